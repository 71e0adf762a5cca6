//! Expectation engines for population quantities.
//!
//! Every expectation `E[f(Y)]` under the true mixture is reduced to a weighted
//! point set. In one dimension the points come from a deterministic rule; in
//! higher dimension they are a frozen Monte Carlo pool drawn once per seed so
//! that repeated evaluations share common random numbers.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::Result;
use crate::model::{sample_gmm, MixtureModel};

/// Half-width of the integration window in standard deviations. The Gaussian
/// mass beyond it is below 1e-38.
pub const Z_MAX: f64 = 13.0;

/// Deterministic one-dimensional rule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Quadrature {
    /// Composite Gauss-Legendre with `order` nodes per panel. Panels break at
    /// the candidate's decision boundaries and are graded toward them at the
    /// width of the soft-assignment transition.
    Adaptive { order: usize },
    /// Gauss-Hermite (probabilists') with `nodes` nodes per true component.
    GaussHermite { nodes: usize },
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::Adaptive { order: 16 }
    }
}

/// A weighted set of points in R^d approximating the true law.
#[derive(Debug, Clone)]
pub struct PointSet {
    d: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    monte_carlo: bool,
}

/// Where a smooth but sharp transition sits in a 1-D integrand: a location and
/// the length scale over which it happens (0 for a kink).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakpoint {
    pub at: f64,
    pub width: f64,
}

const PAR_CHUNK: usize = 4096;

impl PointSet {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_monte_carlo(&self) -> bool {
        self.monte_carlo
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Frozen Monte Carlo pool of `n` draws from `truth`, equal weights.
    pub fn monte_carlo(truth: &MixtureModel, n: usize, seed: u64) -> Result<Self> {
        let sample = sample_gmm(truth, n, seed)?;
        let d = truth.d();
        Ok(Self {
            d,
            points: sample.observations.as_slice().to_vec(),
            weights: vec![1.0 / n as f64; n],
            monte_carlo: true,
        })
    }

    /// Gauss-Hermite rule on each true component (d = 1).
    pub fn gauss_hermite(truth: &MixtureModel, nodes: usize) -> Self {
        assert_eq!(truth.d(), 1, "deterministic rules are one-dimensional");
        let k = truth.k() as f64;
        let (z, w) = hermite_rule(nodes);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for m in truth.means.rows() {
            if truth.sigma == 0.0 {
                points.push(m[0]);
                weights.push(1.0 / k);
                continue;
            }
            for (zi, wi) in z.iter().zip(&w) {
                points.push(m[0] + truth.sigma * zi);
                weights.push(wi / k);
            }
        }
        Self { d: 1, points, weights, monte_carlo: false }
    }

    /// Composite Gauss-Legendre rule on each true component (d = 1), with panel
    /// edges at every breakpoint and geometric grading around it.
    pub fn adaptive(truth: &MixtureModel, order: usize, breakpoints: &[Breakpoint]) -> Self {
        assert_eq!(truth.d(), 1, "deterministic rules are one-dimensional");
        let k = truth.k() as f64;
        let sigma = truth.sigma;
        let (x, w) = legendre_rule(order);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for m in truth.means.rows() {
            let m = m[0];
            if sigma == 0.0 {
                points.push(m);
                weights.push(1.0 / k);
                continue;
            }
            let mut knots: Vec<f64> = (0..=(2.0 * Z_MAX) as usize).map(|i| -Z_MAX + i as f64).collect();
            for b in breakpoints {
                let c = (b.at - m) / sigma;
                if c.abs() >= Z_MAX {
                    continue;
                }
                knots.push(c);
                let scale = b.width / sigma;
                if scale > 0.0 && scale < 1.0 {
                    let mut h = scale;
                    while h < 1.0 {
                        for e in [c - h, c + h] {
                            if e.abs() < Z_MAX {
                                knots.push(e);
                            }
                        }
                        h *= 2.0;
                    }
                }
            }
            knots.sort_by(f64::total_cmp);
            knots.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
            for pair in knots.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                for (xi, wi) in x.iter().zip(&w) {
                    let z = mid + half * xi;
                    let dens = (-0.5 * z * z).exp() * std::f64::consts::FRAC_1_SQRT_2 * crate::special::FRAC_1_SQRT_PI;
                    points.push(m + sigma * z);
                    weights.push(half * wi * dens / k);
                }
            }
        }
        Self { d: 1, points, weights, monte_carlo: false }
    }

    /// Weighted sums `sum_i w_i f_j(y_i)` for `j < width`, where `f` fills the
    /// `width` values for one point. For Monte Carlo pools the weights are
    /// `1/n`, so these are sample means. The reduction tree is fixed by the
    /// chunking, not by the thread count.
    pub fn accumulate<F>(&self, width: usize, f: F) -> Vec<f64>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let d = self.d;
        let partials: Vec<Vec<f64>> = self
            .points
            .par_chunks(PAR_CHUNK * d)
            .zip(self.weights.par_chunks(PAR_CHUNK))
            .map(|(pts, ws)| {
                let mut acc = vec![0.0; width];
                let mut buf = vec![0.0; width];
                for (y, &w) in pts.chunks_exact(d).zip(ws) {
                    f(y, &mut buf);
                    acc.iter_mut().zip(&buf).for_each(|(a, v)| *a += w * v);
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

    /// Mean and standard error of a scalar integrand. The standard error is 0
    /// for deterministic rules.
    pub fn expect<F>(&self, f: F) -> (f64, f64)
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        if !self.monte_carlo {
            let s = self.accumulate(1, |y, out| out[0] = f(y));
            return (s[0], 0.0);
        }
        let s = self.accumulate(2, |y, out| {
            let v = f(y);
            out[0] = v;
            out[1] = v * v;
        });
        (s[0], standard_error(s[0], s[1], self.len()))
    }
}

/// Standard error of a sample mean from the first two sample moments.
pub fn standard_error(mean: f64, mean_sq: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let var = (mean_sq - mean * mean).max(0.0) * n as f64 / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    static CACHE16: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    if n == 16 {
        return CACHE16.get_or_init(|| compute_legendre(16)).clone();
    }
    compute_legendre(n)
}

fn compute_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Probabilists' Gauss-Hermite rule (weight `exp(-z^2/2)/sqrt(2 pi)`, weights
/// sum to 1) by Golub-Welsch.
pub fn hermite_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.into_iter().map(|(z, w)| (z, w / total)).unzip()
}
