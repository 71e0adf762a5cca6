//! Finite-sample estimators: EM at a fixed variance and Lloyd's k-means.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{nearest, sq_dist, MeanConfig, Observations};
use crate::rng;

/// Initialization of a finite-sample fit.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Start from the given configuration (typically the ground truth).
    Given(MeanConfig),
    /// K distinct observations chosen uniformly.
    RandomFromData,
    /// k-means++ seeding.
    KMeansPlusPlus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub tau: f64,
    pub max_iters: usize,
    /// EM stops when the objective changes by less than `tol * |objective|`.
    /// Lloyd ignores it and stops on a fixed partition.
    pub tol: f64,
    pub init: Init,
}

impl EmConfig {
    pub fn new(tau: f64, init: Init) -> Self {
        Self { tau, max_iters: 1000, tol: 1e-10, init }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub means: MeanConfig,
    pub iters_used: usize,
    pub final_objective: f64,
    /// Objective at each visited iterate, starting with the initialization.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    /// `(iteration, component)` pairs where a component was frozen for lack of mass.
    pub frozen: Vec<(usize, usize)>,
}

impl FitResult {
    /// CSV trace `iter,objective`.
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iter", "objective"])?;
        for (i, v) in self.objective_trace.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

const CHUNK: usize = 8192;

/// Sum of per-observation vectors, reduced over fixed-size chunks so the
/// result does not depend on the thread count.
fn chunked_sums<F>(data: &Observations, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    let d = data.d();
    let partials: Vec<Vec<f64>> = data
        .as_slice()
        .par_chunks(CHUNK * d)
        .enumerate()
        .map(|(c, block)| {
            let mut acc = vec![0.0; width];
            let mut buf = vec![0.0; width];
            for (i, y) in block.chunks_exact(d).enumerate() {
                f(c * CHUNK + i, y, &mut buf);
                acc.iter_mut().zip(&buf).for_each(|(a, v)| *a += v);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    total
}

fn check_fit_inputs(data: &Observations, k: usize, cfg: &EmConfig) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if data.n() < k {
        return Err(Error::InvalidArgument(format!("need n >= K, got n={} K={k}", data.n())));
    }
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be finite and > 0, got {}", cfg.tau)));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
    }
    Ok(())
}

/// Resolve the initial configuration.
pub fn initialize(data: &Observations, k: usize, init: &Init, seed: u64) -> Result<MeanConfig> {
    let d = data.d();
    match init {
        Init::Given(m) => {
            if m.k() != k || m.d() != d {
                return Err(Error::Shape(format!("init is {}x{}, expected {k}x{d}", m.k(), m.d())));
            }
            Ok(m.clone())
        }
        Init::RandomFromData => {
            let mut r = rng::stream(seed, 0);
            let picks = index::sample(&mut r, data.n(), k);
            let rows: Vec<&[f64]> = picks.iter().map(|i| data.row(i)).collect();
            MeanConfig::from_rows(&rows)
        }
        Init::KMeansPlusPlus => {
            let mut r = rng::stream(seed, 0);
            let mut centers: Vec<Vec<f64>> = vec![data.row(r.random_range(0..data.n())).to_vec()];
            let mut dist: Vec<f64> = data.rows().map(|y| sq_dist(y, &centers[0])).collect();
            while centers.len() < k {
                let total: f64 = dist.iter().sum();
                let next = if total > 0.0 {
                    let mut u = r.random::<f64>() * total;
                    let mut pick = data.n() - 1;
                    for (i, &w) in dist.iter().enumerate() {
                        if u < w {
                            pick = i;
                            break;
                        }
                        u -= w;
                    }
                    pick
                } else {
                    r.random_range(0..data.n())
                };
                let c = data.row(next).to_vec();
                for (dv, y) in dist.iter_mut().zip(data.rows()) {
                    *dv = dv.min(sq_dist(y, &c));
                }
                centers.push(c);
            }
            MeanConfig::from_rows(&centers)
        }
    }
}

/// `-(1/n) sum_i log p_{means,tau}(y_i)`.
pub fn empirical_objective(data: &Observations, means: &MeanConfig, tau: f64) -> Result<f64> {
    if means.d() != data.d() {
        return Err(Error::Shape(format!("means have d={}, data has d={}", means.d(), data.d())));
    }
    let c = 0.5 * data.d() as f64 * (2.0 * PI * tau * tau).ln() + (means.k() as f64).ln();
    let inv = 1.0 / (2.0 * tau * tau);
    let s = chunked_sums(data, 1, |_, y, out| {
        let m = means.rows().map(|mu| sq_dist(y, mu)).fold(f64::INFINITY, f64::min);
        let t: f64 = means.rows().map(|mu| (-(sq_dist(y, mu) - m) * inv).exp()).sum();
        out[0] = m * inv - t.ln();
    });
    Ok(c + s[0] / data.n() as f64)
}

/// EM for the equal-weight mixture with every variance fixed at `tau^2`.
pub fn em_fit(data: &Observations, k: usize, cfg: &EmConfig, seed: u64) -> Result<FitResult> {
    check_fit_inputs(data, k, cfg)?;
    let d = data.d();
    let n = data.n() as f64;
    let mut means = initialize(data, k, &cfg.init, seed)?;
    let c = 0.5 * d as f64 * (2.0 * PI * cfg.tau * cfg.tau).ln() + (k as f64).ln();
    let inv = 1.0 / (2.0 * cfg.tau * cfg.tau);
    let mut trace = Vec::new();
    let mut frozen = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    loop {
        // Layout: [objective, mass_0..mass_{K-1}, shifted first moments K x d].
        let width = 1 + k + k * d;
        let cur = &means;
        let sums = chunked_sums(data, width, |_, y, out| {
            let (head, rest) = out.split_at_mut(1);
            let (mass, first) = rest.split_at_mut(k);
            let mut mx = f64::NEG_INFINITY;
            for (l, mu) in cur.rows().enumerate() {
                mass[l] = -sq_dist(y, mu) * inv;
                mx = mx.max(mass[l]);
            }
            let mut s = 0.0;
            for g in mass.iter_mut() {
                *g = (*g - mx).exp();
                s += *g;
            }
            head[0] = -(mx + s.ln());
            for (l, mu) in cur.rows().enumerate() {
                mass[l] /= s;
                for j in 0..d {
                    first[l * d + j] = mass[l] * (y[j] - mu[j]);
                }
            }
        });
        let obj = c + sums[0] / n;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (prev - obj).abs() < cfg.tol * obj.abs() {
                trace.push(obj);
                converged = true;
                break;
            }
        }
        trace.push(obj);
        if iters >= cfg.max_iters {
            break;
        }
        let mut next = means.clone();
        for l in 0..k {
            let w = sums[1 + l];
            if w < 1e-12 * n {
                frozen.push((iters, l));
                continue;
            }
            for j in 0..d {
                next.row_mut(l)[j] += sums[1 + k + l * d + j] / w;
            }
        }
        means = next;
        iters += 1;
    }
    let final_objective = *trace.last().expect("trace is nonempty");
    Ok(FitResult { means, iters_used: iters, final_objective, objective_trace: trace, converged, frozen })
}

/// Nearest-center labels (lowest-index tie-break).
pub fn assign(data: &Observations, means: &MeanConfig) -> Vec<usize> {
    let d = data.d();
    let mut labels = vec![0usize; data.n()];
    labels
        .par_chunks_mut(CHUNK)
        .zip(data.as_slice().par_chunks(CHUNK * d))
        .for_each(|(lab, block)| {
            for (l, y) in lab.iter_mut().zip(block.chunks_exact(d)) {
                *l = nearest(y, means);
            }
        });
    labels
}

/// Lloyd's algorithm; the objective is the empirical quantization risk
/// `(1/n) sum_i min_l |y_i - mu_l|^2`.
pub fn lloyd_fit(data: &Observations, k: usize, cfg: &EmConfig, seed: u64) -> Result<FitResult> {
    check_fit_inputs(data, k, cfg)?;
    let d = data.d();
    let n = data.n() as f64;
    let mut means = initialize(data, k, &cfg.init, seed)?;
    let mut trace = Vec::new();
    let mut frozen = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut converged = false;
    let mut iters = 0;
    loop {
        let labels = assign(data, &means);
        let width = 1 + k + k * d;
        let cur = &means;
        let lab = &labels;
        let sums = chunked_sums(data, width, |i, y, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            let l = lab[i];
            let mu = cur.row(l);
            out[0] = sq_dist(y, mu);
            out[1 + l] = 1.0;
            for j in 0..d {
                out[1 + k + l * d + j] = y[j] - mu[j];
            }
        });
        trace.push(sums[0] / n);
        if previous.as_ref() == Some(&labels) {
            converged = true;
            break;
        }
        if iters >= cfg.max_iters {
            break;
        }
        let mut next = means.clone();
        for l in 0..k {
            let w = sums[1 + l];
            if w == 0.0 {
                frozen.push((iters, l));
                continue;
            }
            for j in 0..d {
                next.row_mut(l)[j] += sums[1 + k + l * d + j] / w;
            }
        }
        means = next;
        previous = Some(labels);
        iters += 1;
    }
    let final_objective = *trace.last().expect("trace is nonempty");
    Ok(FitResult { means, iters_used: iters, final_objective, objective_trace: trace, converged, frozen })
}
