//! Bayes-optimal label recovery and bounds on its error.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{geometry, nearest, sample_gmm, sq_dist, MeanConfig, MixtureModel};

/// Monte Carlo estimate of a misclassification probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub p_err: f64,
    pub std_error: f64,
    pub n_trials: usize,
}

/// Lower and upper bounds on the Bayes error, plus the mutual-information cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPair {
    pub lower: f64,
    pub upper: f64,
    /// Upper bound on `I(L; Y)` in nats.
    pub mi_upper: f64,
    /// Pairwise sum with each tail replaced by its Mills-ratio asymptote
    /// `2 sigma / (Delta_lj sqrt(2 pi)) exp(-Delta_lj^2 / (8 sigma^2))`.
    /// A diagnostic, not a bound.
    pub mills: f64,
}

impl BoundPair {
    /// Whether both bounds carry information, so `lower <= upper` is meaningful.
    pub fn informative(&self, k: usize) -> bool {
        self.lower > 0.0 && self.upper < 1.0 - 1.0 / k as f64
    }
}

/// Index of the nearest mean; ties go to the lowest index.
pub fn bayes_classify(y: &[f64], means: &MeanConfig) -> usize {
    nearest(y, means)
}

/// Fraction of `n` fresh draws that the nearest-center rule mislabels.
pub fn bayes_error_mc(model: &MixtureModel, n: usize, seed: u64) -> Result<ErrorEstimate> {
    if n < 1000 {
        return Err(Error::InvalidArgument(format!("need n >= 1000 trials, got {n}")));
    }
    let sample = sample_gmm(model, n, seed)?;
    let wrong = sample
        .labels
        .iter()
        .zip(sample.observations.rows())
        .filter(|(&l, y)| bayes_classify(y, &model.means) != l)
        .count();
    Ok(binomial(wrong, n))
}

/// Proportion estimate `wrong / n` with its binomial standard error.
pub fn binomial(wrong: usize, n: usize) -> ErrorEstimate {
    let p = wrong as f64 / n as f64;
    ErrorEstimate { p_err: p, std_error: (p * (1.0 - p) / n as f64).sqrt(), n_trials: n }
}

/// Pairwise-sum bound `(1/(2K)) sum_{l != j} exp(-Delta_lj^2 / (8 sigma^2))`.
pub fn pairwise_sum_bound(model: &MixtureModel) -> f64 {
    let k = model.k();
    let s2 = model.sigma * model.sigma;
    let mut total = 0.0;
    for l in 0..k {
        for j in 0..k {
            if l != j {
                total += (-sq_dist(model.means.row(l), model.means.row(j)) / (8.0 * s2)).exp();
            }
        }
    }
    total / (2.0 * k as f64)
}

/// Minimum-separation bound `(K-1)/2 exp(-Delta_min^2 / (8 sigma^2))`.
pub fn min_separation_bound(model: &MixtureModel) -> f64 {
    let g = geometry(model);
    let s2 = model.sigma * model.sigma;
    (model.k() as f64 - 1.0) / 2.0 * (-g.delta_min * g.delta_min / (8.0 * s2)).exp()
}

/// `(1/K) sum_{l != j} 2 sigma / (Delta_lj sqrt(2 pi)) exp(-Delta_lj^2 / (8 sigma^2))`.
pub fn mills_diagnostic(model: &MixtureModel) -> f64 {
    let k = model.k();
    let s = model.sigma;
    let mut total = 0.0;
    for l in 0..k {
        for j in 0..k {
            if l != j {
                let delta = sq_dist(model.means.row(l), model.means.row(j)).sqrt();
                total += 2.0 * s / (delta * (2.0 * std::f64::consts::PI).sqrt()) * (-delta * delta / (8.0 * s * s)).exp();
            }
        }
    }
    total / k as f64
}

/// Bounds on the Bayes error, each clamped to `[0, 1 - 1/K]`.
pub fn error_bounds(model: &MixtureModel) -> Result<BoundPair> {
    let k = model.k();
    if k < 2 {
        return Err(Error::InvalidArgument("error bounds need K >= 2".into()));
    }
    let trivial = 1.0 - 1.0 / k as f64;
    let snr = geometry(model).snr;
    let lower = (trivial - 0.5 * snr.sqrt()).clamp(0.0, trivial);
    let upper = pairwise_sum_bound(model).min(min_separation_bound(model)).clamp(0.0, trivial);
    Ok(BoundPair { lower, upper, mi_upper: snr / 2.0, mills: mills_diagnostic(model) })
}

/// One row of the clustering CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringRow {
    pub snr: f64,
    pub p_err: f64,
    pub std_err: f64,
    pub lower: f64,
    pub upper: f64,
    pub mi_upper: f64,
}

impl ClusteringRow {
    pub fn new(snr: f64, est: &ErrorEstimate, bounds: &BoundPair) -> Self {
        Self {
            snr,
            p_err: est.p_err,
            std_err: est.std_error,
            lower: bounds.lower,
            upper: bounds.upper,
            mi_upper: bounds.mi_upper,
        }
    }
}

/// CSV `snr,p_err,std_err,lower,upper,mi_upper`.
pub fn write_clustering_csv<W: Write>(rows: &[ClusteringRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(["snr", "p_err", "std_err", "lower", "upper", "mi_upper"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        let m = MeanConfig::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(bayes_classify(&[0.0, 3.0], &m), 2);
        assert_eq!(bayes_classify(&[0.0, 0.0], &m), 0);
        let pair = MeanConfig::from_rows(&[[1.0], [-1.0]]).unwrap();
        assert_eq!(bayes_classify(&[0.2], &pair), 0);
        assert_eq!(bayes_classify(&[-0.2], &pair), 1);
    }

    #[test]
    fn bounds_k2_snr1() {
        let b = error_bounds(&MixtureModel::symmetric_k2(1, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(b.lower, 0.0);
        assert!((b.upper - 0.5 * (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(b.mi_upper, 0.5);
    }

    #[test]
    fn bounds_low_snr_lower() {
        let b = error_bounds(&MixtureModel::symmetric_k2(1, 0.1, 1.0).unwrap()).unwrap();
        assert!((b.lower - 0.45).abs() < 1e-15);
        assert!((b.upper - 0.5 * (-0.005f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bounds_equilateral() {
        let m = MeanConfig::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, 0.75f64.sqrt()]]).unwrap();
        let model = MixtureModel::new(m, 0.25).unwrap();
        let b = error_bounds(&model).unwrap();
        assert!((b.upper - (-2.0f64).exp()).abs() < 1e-12);
        assert!(pairwise_sum_bound(&model) <= min_separation_bound(&model) + 1e-15);
    }

    #[test]
    fn mc_rejects_small_n_and_noiseless() {
        let m = MixtureModel::symmetric_k2(1, 1.0, 1e-3).unwrap();
        assert!(bayes_error_mc(&m, 10, 0).is_err());
        assert_eq!(bayes_error_mc(&m, 100_000, 1).unwrap().p_err, 0.0);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        let est = binomial(10, 1000);
        let b = error_bounds(&MixtureModel::symmetric_k2(1, 1.0, 1.0).unwrap()).unwrap();
        write_clustering_csv(&[ClusteringRow::new(1.0, &est, &b)], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("snr,p_err,std_err,lower,upper,mi_upper\n"));
    }
}
