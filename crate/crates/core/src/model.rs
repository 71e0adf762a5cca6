//! The equal-weight isotropic Gaussian mixture, sampling, separation geometry
//! and permutation-invariant metrics.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::assignment;
use crate::error::{Error, Result};
use crate::rng;

/// An ordered tuple of `k` component means in R^d, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanConfig {
    k: usize,
    d: usize,
    data: Vec<f64>,
}

impl MeanConfig {
    pub fn new(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Shape(format!("need k >= 1 and d >= 1, got k={k}, d={d}")));
        }
        if data.len() != k * d {
            return Err(Error::Shape(format!("expected {} values for k={k}, d={d}, got {}", k * d, data.len())));
        }
        Ok(Self { k, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(k * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape(format!("row {i} has dimension {}, expected {d}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(k, d, data)
    }

    /// All `k` means at the origin.
    pub fn zeros(k: usize, d: usize) -> Self {
        Self { k, d, data: vec![0.0; k * d] }
    }

    /// `k` copies of `point`.
    pub fn repeated(point: &[f64], k: usize) -> Self {
        let d = point.len();
        Self { k, d, data: point.repeat(k) }
    }

    /// The symmetric pair `(mu, -mu)`.
    pub fn symmetric_pair(mu: &[f64]) -> Self {
        let mut data = mu.to_vec();
        data.extend(mu.iter().map(|x| -x));
        Self { k: 2, d: mu.len(), data }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { k: self.k, d: self.d, data: self.data.iter().map(|x| x * factor).collect() }
    }

    pub fn translated(&self, shift: &[f64]) -> Self {
        assert_eq!(shift.len(), self.d);
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.d) {
            row.iter_mut().zip(shift).for_each(|(x, s)| *x += s);
        }
        out
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.k);
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self { k: self.k, d: self.d, data }
    }

    /// Apply a linear map `x -> A x` to every mean (`a` is row-major d x d).
    pub fn mapped(&self, a: &[f64]) -> Self {
        assert_eq!(a.len(), self.d * self.d);
        let d = self.d;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.rows() {
            for i in 0..d {
                data.push((0..d).map(|j| a[i * d + j] * row[j]).sum());
            }
        }
        Self { k: self.k, d, data }
    }

    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.d];
        for row in self.rows() {
            c.iter_mut().zip(row).for_each(|(c, x)| *c += x);
        }
        c.iter_mut().for_each(|c| *c /= self.k as f64);
        c
    }

    /// Minimum and maximum pairwise distance; `None` when k = 1.
    pub fn separations(&self) -> Option<(f64, f64)> {
        if self.k < 2 {
            return None;
        }
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        for i in 0..self.k {
            for j in i + 1..self.k {
                let dist = sq_dist(self.row(i), self.row(j)).sqrt();
                lo = lo.min(dist);
                hi = hi.max(dist);
            }
        }
        Some((lo, hi))
    }

    /// Whether this configuration can serve as ground truth: pairwise distinct means.
    pub fn is_valid_ground_truth(&self) -> bool {
        self.separations().map_or(true, |(lo, _)| lo > 0.0)
    }

    /// Write as CSV with header `component,dim0,...,dim{d-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["component".to_string()];
        header.extend((0..self.d).map(|j| format!("dim{j}")));
        w.write_record(&header)?;
        for (i, row) in self.rows().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("component") {
            return Err(Error::Config("mean CSV must start with a `component` column".into()));
        }
        let d = headers.len() - 1;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let idx: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad component index `{}`", &rec[0])))?;
            let vals = (1..=d)
                .map(|j| rec[j].trim().parse::<f64>().map_err(|_| Error::Config(format!("bad value `{}`", &rec[j]))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((idx, vals));
        }
        rows.sort_by_key(|(i, _)| *i);
        if rows.iter().enumerate().any(|(i, (idx, _))| i != *idx) {
            return Err(Error::Config("component indices must be 0..k-1".into()));
        }
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|(_, v)| v).collect();
        Self::from_rows(&rows)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Build one mean per image, where each image is a headerless CSV matrix
    /// flattened row-major. All images must have the same number of entries.
    pub fn from_image_csvs<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut rows = Vec::with_capacity(paths.len());
        for p in paths {
            let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(p.as_ref())?;
            let mut v = Vec::new();
            for rec in r.records() {
                for field in rec?.iter() {
                    v.push(field.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad pixel `{field}`")))?);
                }
            }
            rows.push(v);
        }
        Self::from_rows(&rows)
    }
}

/// Squared Euclidean distance, summed in coordinate order.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `means` to `y`; ties go to the lowest index.
#[inline]
pub fn nearest(y: &[f64], means: &MeanConfig) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (l, m) in means.rows().enumerate() {
        let dist = sq_dist(y, m);
        if dist < best_d {
            best_d = dist;
            best = l;
        }
    }
    best
}

/// The true data-generating law: means plus isotropic noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub means: MeanConfig,
    pub sigma: f64,
}

impl MixtureModel {
    /// `sigma` may be zero (noiseless data) but not negative or non-finite.
    pub fn new(means: MeanConfig, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { means, sigma })
    }

    pub fn k(&self) -> usize {
        self.means.k()
    }

    pub fn d(&self) -> usize {
        self.means.d()
    }

    /// Symmetric two-component model `(mu, -mu)` with `mu = norm * e_0` in R^d.
    pub fn symmetric_k2(d: usize, norm: f64, sigma: f64) -> Result<Self> {
        let mut mu = vec![0.0; d];
        mu[0] = norm;
        Self::new(MeanConfig::symmetric_pair(&mu), sigma)
    }

    /// Second moment `E[Y Y^T] = sigma^2 I + (1/K) sum mu_l mu_l^T`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.d();
        let mut m = DMatrix::<f64>::identity(d, d) * (self.sigma * self.sigma);
        for row in self.means.rows() {
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += row[i] * row[j] / self.k() as f64;
                }
            }
        }
        m
    }
}

/// Observations stored row-major `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Observations {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || data.len() != n * d {
            return Err(Error::Shape(format!("expected {} values for n={n}, d={d}, got {}", n * d, data.len())));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.as_ref().len() != d {
                return Err(Error::Shape("ragged observation rows".into()));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), d, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn translated(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.d) {
            row.iter_mut().zip(shift).for_each(|(x, s)| *x += s);
        }
        out
    }

    /// Concatenate two observation sets of equal dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::Shape("dimension mismatch in concat".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.n + other.n, self.d, data)
    }
}

/// Labels and observations drawn from a [`MixtureModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub labels: Vec<usize>,
    pub observations: Observations,
    pub seed: u64,
}

impl LabeledSample {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Debug dump as CSV `label,dim0,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.observations.d();
        let mut header = vec!["label".to_string()];
        header.extend((0..d).map(|j| format!("dim{j}")));
        w.write_record(&header)?;
        for (l, y) in self.labels.iter().zip(self.observations.rows()) {
            let mut rec = vec![l.to_string()];
            rec.extend(y.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

const SAMPLE_CHUNK: usize = 1 << 14;

/// Draw `n` labelled observations. Output is a pure function of `(model, n, seed)`
/// regardless of thread count: chunk `c` of the sample always uses stream `c`.
pub fn sample_gmm(model: &MixtureModel, n: usize, seed: u64) -> Result<LabeledSample> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let k = model.k();
    let d = model.d();
    let mut labels = vec![0usize; n];
    let mut data = vec![0.0; n * d];
    labels
        .par_chunks_mut(SAMPLE_CHUNK)
        .zip(data.par_chunks_mut(SAMPLE_CHUNK * d))
        .enumerate()
        .for_each(|(c, (lab, obs))| {
            let mut rng = rng::stream(seed, c as u64);
            for (l, y) in lab.iter_mut().zip(obs.chunks_exact_mut(d)) {
                *l = rng.random_range(0..k);
                let m = model.means.row(*l);
                for (yj, mj) in y.iter_mut().zip(m) {
                    let z: f64 = rng.sample(StandardNormal);
                    *yj = mj + model.sigma * z;
                }
            }
        });
    Ok(LabeledSample { labels, observations: Observations { n, d, data }, seed })
}

/// Separation and energy summary of a mixture.
#[derive(Debug, Clone)]
pub struct GeometrySummary {
    pub snr: f64,
    /// `+inf` when k = 1 (see `separation_defined`).
    pub delta_min: f64,
    pub delta_max: f64,
    pub separation_defined: bool,
    pub sigma_mu: DMatrix<f64>,
    pub lambda_max: f64,
    pub mixture_mean: Vec<f64>,
}

pub fn geometry(model: &MixtureModel) -> GeometrySummary {
    let k = model.k();
    let d = model.d();
    let mean = model.means.centroid();
    let mut sigma_mu = DMatrix::<f64>::zeros(d, d);
    let mut energy = 0.0;
    for row in model.means.rows() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
        energy += c.iter().map(|x| x * x).sum::<f64>();
        for i in 0..d {
            for j in 0..d {
                sigma_mu[(i, j)] += c[i] * c[j] / k as f64;
            }
        }
    }
    let spread = energy / k as f64;
    let snr = if spread == 0.0 { 0.0 } else { spread / (model.sigma * model.sigma) };
    let lambda_max = max_eigenvalue(&sigma_mu);
    let (delta_min, delta_max, separation_defined) = match model.means.separations() {
        Some((lo, hi)) => (lo, hi, true),
        None => (f64::INFINITY, 0.0, false),
    };
    GeometrySummary { snr, delta_min, delta_max, separation_defined, sigma_mu, lambda_max, mixture_mean: mean }
}

pub(crate) fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn check_same_shape(a: &MeanConfig, b: &MeanConfig) -> Result<()> {
    if a.k() != b.k() || a.d() != b.d() {
        return Err(Error::Shape(format!("configs are {}x{} and {}x{}", a.k(), a.d(), b.k(), b.d())));
    }
    Ok(())
}

/// Squared Frobenius distance between `a` and `b` with `b` relabelled by `perm`,
/// accumulated over components in index order.
pub fn matched_sq_distance(a: &MeanConfig, b: &MeanConfig, perm: &[usize]) -> f64 {
    a.rows().zip(perm).map(|(ra, &p)| sq_dist(ra, b.row(p))).sum()
}

/// Permutation-invariant distance and a minimizing relabelling `perm`
/// (row `i` of `a` is matched to row `perm[i]` of `b`).
pub fn perm_distance_with_matching(a: &MeanConfig, b: &MeanConfig) -> Result<(f64, Vec<usize>)> {
    perm_sq_distance(a, b).map(|(sq, perm)| (sq.sqrt(), perm))
}

/// Squared permutation-invariant distance and a minimizing relabelling.
pub fn perm_sq_distance(a: &MeanConfig, b: &MeanConfig) -> Result<(f64, Vec<usize>)> {
    check_same_shape(a, b)?;
    let k = a.k();
    let mut cost = Vec::with_capacity(k * k);
    for ra in a.rows() {
        for rb in b.rows() {
            cost.push(sq_dist(ra, rb));
        }
    }
    let perm = assignment::solve(&cost, k);
    Ok((matched_sq_distance(a, b, &perm), perm))
}

/// `min_pi ||a - pi . b||_F`, solved exactly as a linear assignment problem.
pub fn perm_distance(a: &MeanConfig, b: &MeanConfig) -> Result<f64> {
    perm_distance_with_matching(a, b).map(|(v, _)| v)
}

/// `perm_distance(estimate, truth)^2 / ||truth||_F^2`.
pub fn normalized_mse(estimate: &MeanConfig, truth: &MeanConfig) -> Result<f64> {
    let denom = truth.frobenius_norm_sq();
    if denom == 0.0 {
        return Err(Error::ZeroNormTruth);
    }
    let (sq, _) = perm_sq_distance(estimate, truth)?;
    Ok(sq / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rows: &[&[f64]]) -> MeanConfig {
        MeanConfig::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_noise_sampling_hits_means_exactly() {
        let m = MixtureModel::new(cfg(&[&[1.0], &[-1.0]]), 0.0).unwrap();
        let s = sample_gmm(&m, 4, 99).unwrap();
        for (l, y) in s.labels.iter().zip(s.observations.rows()) {
            assert_eq!(y[0], if *l == 0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn sampling_rejects_empty() {
        let m = MixtureModel::symmetric_k2(1, 1.0, 1.0).unwrap();
        assert!(sample_gmm(&m, 0, 1).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = MixtureModel::symmetric_k2(3, 1.0, 0.5).unwrap();
        let a = sample_gmm(&m, 40_000, 5).unwrap();
        let b = sample_gmm(&m, 40_000, 5).unwrap();
        let c = sample_gmm(&m, 40_000, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.observations, c.observations);
    }

    #[test]
    fn label_frequencies_and_second_moment() {
        let m = MixtureModel::symmetric_k2(1, 1.0, 1.0).unwrap();
        let n = 1_000_000;
        let s = sample_gmm(&m, n, 2024).unwrap();
        let ones = s.labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        assert!((ones - 0.5).abs() < 0.002, "class-1 frequency {ones}");
        let m2 = s.observations.as_slice().iter().map(|y| y * y).sum::<f64>() / n as f64;
        assert!((m2 - 2.0).abs() < 0.01, "second moment {m2}");
    }

    #[test]
    fn geometry_symmetric_pair() {
        let g = geometry(&MixtureModel::symmetric_k2(1, 1.0, 1.0).unwrap());
        assert!((g.snr - 1.0).abs() < 1e-15);
        assert_eq!(g.delta_min, 2.0);
        assert_eq!(g.delta_max, 2.0);
        assert!((g.lambda_max - 1.0).abs() < 1e-14);
    }

    #[test]
    fn geometry_degenerate_and_single() {
        let g = geometry(&MixtureModel::new(cfg(&[&[2.0, 1.0], &[2.0, 1.0]]), 0.7).unwrap());
        assert_eq!(g.snr, 0.0);
        assert_eq!(g.delta_min, 0.0);
        let g1 = geometry(&MixtureModel::new(cfg(&[&[2.0]]), 1.0).unwrap());
        assert!(!g1.separation_defined);
        assert!(g1.delta_min.is_infinite());
    }

    #[test]
    fn geometry_trace_identity() {
        let m = MixtureModel::new(cfg(&[&[0.3, 1.0, -2.0], &[1.5, -0.2, 0.0], &[-1.0, 0.4, 0.9]]), 0.8).unwrap();
        let g = geometry(&m);
        let tr = g.sigma_mu.trace();
        assert!((tr - 0.64 * g.snr).abs() < 1e-10 * tr);
        assert!((g.sigma_mu.clone() - g.sigma_mu.transpose()).abs().max() < 1e-15);
        assert!(min_eigenvalue(&g.sigma_mu) > -1e-10);
        assert!(g.delta_min <= g.delta_max);
    }

    #[test]
    fn perm_distance_examples() {
        let a = cfg(&[&[1.0, 2.0], &[3.0, -1.0]]);
        assert_eq!(perm_distance(&a, &a).unwrap(), 0.0);
        let swapped = a.permuted(&[1, 0]);
        assert_eq!(perm_distance(&a, &swapped).unwrap(), 0.0);
        let x = cfg(&[&[0.0], &[3.0]]);
        let y = cfg(&[&[1.0], &[5.0]]);
        assert_eq!(perm_distance(&x, &y).unwrap(), 5.0_f64.sqrt());
    }

    #[test]
    fn perm_distance_shape_mismatch() {
        let a = cfg(&[&[0.0], &[1.0]]);
        let b = cfg(&[&[0.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(perm_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn normalized_mse_examples() {
        let truth = cfg(&[&[1.0], &[-1.0]]);
        assert_eq!(normalized_mse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(normalized_mse(&MeanConfig::zeros(2, 1), &truth).unwrap(), 1.0);
        let est = cfg(&[&[0.8], &[-0.8]]);
        assert!((normalized_mse(&est, &truth).unwrap() - 0.04).abs() < 1e-15);
        assert!(matches!(normalized_mse(&truth, &MeanConfig::zeros(2, 1)), Err(Error::ZeroNormTruth)));
    }

    #[test]
    fn mean_csv_round_trip() {
        let a = cfg(&[&[0.1, -2.5e-7], &[3.0, 1e10]]);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("component,dim0,dim1\n"));
        assert_eq!(MeanConfig::read_csv(buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn ground_truth_validity() {
        assert!(cfg(&[&[0.0], &[1.0]]).is_valid_ground_truth());
        assert!(!cfg(&[&[1.0], &[1.0]]).is_valid_ground_truth());
    }
}
