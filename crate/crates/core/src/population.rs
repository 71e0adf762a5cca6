//! Population objectives under the true mixture and their minimizers.
//!
//! `L_tau(mu) = -E log p_{mu,tau}(Y)` is the mismatched negative log-likelihood
//! and `Phi(mu) = E min_l |Y - mu_l|^2` the hard-assignment risk, both with
//! `Y` drawn from the true mixture. Expectations go through
//! [`crate::quadrature`]: a deterministic rule in one dimension, a frozen
//! Monte Carlo pool otherwise.

use std::borrow::Cow;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, geometry, perm_distance, sample_gmm, sq_dist, MeanConfig, MixtureModel};
use crate::quadrature::{standard_error, Breakpoint, PointSet, Quadrature};
use crate::rng;

/// Minimizer used by [`quasi_mle`] (and [`minimize`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PopulationEm,
    PopulationLloyd,
    DampedGradient,
}

/// How expectations are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    /// Deterministic quadrature for d = 1, Monte Carlo pool for d >= 2.
    #[default]
    Auto,
    /// Monte Carlo pool in every dimension.
    MonteCarlo,
}

/// One member of the mismatched objective family plus solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub tau: f64,
    pub mc_samples: usize,
    pub quadrature: Quadrature,
    pub expectation: Expectation,
    pub optimizer: Optimizer,
    pub max_iters: usize,
    /// Stop when successive iterates are closer than this (perm distance).
    /// `None` picks `1e-8 |truth|_F` on the quadrature path, `1e-4 |truth|_F`
    /// on the Monte Carlo path.
    pub tol: Option<f64>,
    /// Seed of the frozen Monte Carlo pool.
    pub seed: u64,
}

pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;
pub const MIN_MC_SAMPLES: usize = 10_000;

impl FitSpec {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            mc_samples: DEFAULT_MC_SAMPLES,
            quadrature: Quadrature::default(),
            expectation: Expectation::Auto,
            optimizer: Optimizer::PopulationEm,
            max_iters: 10_000,
            tol: None,
            seed: 0,
        }
    }

    /// Spec with `tau = rho * sigma`.
    pub fn from_rho(rho: f64, sigma: f64) -> Self {
        Self::new(rho * sigma)
    }

    /// Mismatch ratio `tau / sigma`.
    pub fn rho(&self, sigma: f64) -> f64 {
        self.tau / sigma
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = Some(tol);
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mc_samples(mut self, n: usize) -> Self {
        self.mc_samples = n;
        self
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_quadrature(mut self, q: Quadrature) -> Self {
        self.quadrature = q;
        self
    }

    pub fn with_expectation(mut self, e: Expectation) -> Self {
        self.expectation = e;
        self
    }

    fn uses_monte_carlo(&self, d: usize) -> bool {
        d >= 2 || self.expectation == Expectation::MonteCarlo
    }

    /// Stopping tolerance for the given truth.
    pub fn resolved_tol(&self, truth: &MixtureModel) -> f64 {
        if let Some(t) = self.tol {
            return t;
        }
        let scale = truth.means.frobenius_norm();
        let scale = if scale > 0.0 { scale } else { 1.0 };
        if self.uses_monte_carlo(truth.d()) {
            1e-4 * scale
        } else {
            1e-8 * scale
        }
    }
}

/// A population expectation with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Zero on the deterministic path.
    pub std_error: f64,
    /// Number of integrand evaluations.
    pub evaluations: usize,
}

fn check_tau(tau: f64, truth: &MixtureModel) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be finite and > 0, got {tau}")));
    }
    if tau < 1e-12 * truth.sigma {
        return Err(Error::TauUnderflow { tau, sigma: truth.sigma });
    }
    Ok(())
}

fn check_candidate(candidate: &MeanConfig, truth: &MixtureModel) -> Result<()> {
    if candidate.d() != truth.d() {
        return Err(Error::Shape(format!("candidate has d={}, truth has d={}", candidate.d(), truth.d())));
    }
    Ok(())
}

fn finite(v: ObjectiveValue, candidate: &MeanConfig) -> Result<ObjectiveValue> {
    if v.value.is_finite() && v.std_error.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { candidate: candidate.as_slice().to_vec() })
    }
}

/// Reusable expectation engine for one `(truth, spec)` pair. On the Monte
/// Carlo path it owns the frozen pool, so all evaluations through one engine
/// share common random numbers.
#[derive(Debug, Clone)]
pub struct Expectations {
    truth: MixtureModel,
    source: Source,
}

#[derive(Debug, Clone)]
enum Source {
    Fixed(PointSet),
    Adaptive { order: usize },
}

/// Sufficient statistics of one population EM or Lloyd step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub objective: ObjectiveValue,
    /// Probability mass per component (responsibility or cell).
    pub mass: Vec<f64>,
    /// First moments per component, row-major K x d.
    pub first: Vec<f64>,
}

impl Expectations {
    pub fn new(truth: &MixtureModel, spec: &FitSpec) -> Result<Self> {
        let source = if spec.uses_monte_carlo(truth.d()) {
            if spec.mc_samples < MIN_MC_SAMPLES {
                return Err(Error::InvalidArgument(format!(
                    "mc_samples must be >= {MIN_MC_SAMPLES}, got {}",
                    spec.mc_samples
                )));
            }
            Source::Fixed(PointSet::monte_carlo(truth, spec.mc_samples, spec.seed)?)
        } else {
            match spec.quadrature {
                Quadrature::GaussHermite { nodes } => Source::Fixed(PointSet::gauss_hermite(truth, nodes.max(1))),
                Quadrature::Adaptive { order } => Source::Adaptive { order: order.max(1) },
            }
        };
        Ok(Self { truth: truth.clone(), source })
    }

    pub fn truth(&self) -> &MixtureModel {
        &self.truth
    }

    pub fn is_monte_carlo(&self) -> bool {
        matches!(&self.source, Source::Fixed(p) if p.is_monte_carlo())
    }

    /// Point set suited to integrands built from `candidate`. `tau` is the soft
    /// transition temperature, or `None` for hard-assignment integrands.
    fn points(&self, candidate: &MeanConfig, tau: Option<f64>) -> Cow<'_, PointSet> {
        match &self.source {
            Source::Fixed(p) => Cow::Borrowed(p),
            Source::Adaptive { order } => {
                let mut xs: Vec<f64> = candidate.as_slice().to_vec();
                xs.sort_by(f64::total_cmp);
                xs.dedup();
                let bps: Vec<Breakpoint> = xs
                    .windows(2)
                    .map(|w| Breakpoint { at: 0.5 * (w[0] + w[1]), width: tau.map_or(0.0, |t| t * t / (w[1] - w[0])) })
                    .collect();
                Cow::Owned(PointSet::adaptive(&self.truth, *order, &bps))
            }
        }
    }

    fn scalar<F>(&self, ps: &PointSet, candidate: &MeanConfig, f: F) -> Result<ObjectiveValue>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let (value, std_error) = ps.expect(f);
        finite(ObjectiveValue { value, std_error, evaluations: ps.len() }, candidate)
    }

    /// `L_tau(candidate)`.
    pub fn nll(&self, candidate: &MeanConfig, tau: f64) -> Result<ObjectiveValue> {
        check_tau(tau, &self.truth)?;
        check_candidate(candidate, &self.truth)?;
        let ps = self.points(candidate, Some(tau));
        let c = log_norm_const(candidate.d(), candidate.k(), tau);
        let inv = 1.0 / (2.0 * tau * tau);
        self.scalar(&ps, candidate, |y| c - log_sum_exp_neg(y, candidate, inv))
    }

    /// `Phi(candidate)`.
    pub fn kmeans_risk(&self, candidate: &MeanConfig) -> Result<ObjectiveValue> {
        check_candidate(candidate, &self.truth)?;
        let ps = self.points(candidate, None);
        self.scalar(&ps, candidate, |y| min_sq_dist(y, candidate))
    }

    /// `r_tau(candidate) = -E log sum_l exp(-(|Y-mu_l|^2 - min_j |Y-mu_j|^2)/(2 tau^2))`.
    pub fn remainder(&self, candidate: &MeanConfig, tau: f64) -> Result<ObjectiveValue> {
        check_tau(tau, &self.truth)?;
        check_candidate(candidate, &self.truth)?;
        let ps = self.points(candidate, Some(tau));
        let inv = 1.0 / (2.0 * tau * tau);
        self.scalar(&ps, candidate, |y| {
            let m = min_sq_dist(y, candidate);
            let s: f64 = candidate.rows().map(|mu| (-(sq_dist(y, mu) - m) * inv).exp()).sum();
            -s.ln()
        })
    }

    /// Objective at `candidate` plus responsibility-weighted masses and first
    /// moments at temperature `tau`.
    pub fn em_stats(&self, candidate: &MeanConfig, tau: f64) -> Result<StepStats> {
        check_tau(tau, &self.truth)?;
        check_candidate(candidate, &self.truth)?;
        let ps = self.points(candidate, Some(tau));
        let (k, d) = (candidate.k(), candidate.d());
        let c = log_norm_const(d, k, tau);
        let inv = 1.0 / (2.0 * tau * tau);
        let width = 2 + k + k * d;
        let sums = ps.accumulate(width, |y, out| {
            let (head, rest) = out.split_at_mut(2);
            let (mass, first) = rest.split_at_mut(k);
            let mut mx = f64::NEG_INFINITY;
            for (l, mu) in candidate.rows().enumerate() {
                mass[l] = -sq_dist(y, mu) * inv;
                mx = mx.max(mass[l]);
            }
            let mut s = 0.0;
            for g in mass.iter_mut() {
                *g = (*g - mx).exp();
                s += *g;
            }
            let v = c - (mx + s.ln());
            head[0] = v;
            head[1] = v * v;
            for l in 0..k {
                mass[l] /= s;
                for j in 0..d {
                    first[l * d + j] = mass[l] * y[j];
                }
            }
        });
        self.stats(sums, ps.len(), ps.is_monte_carlo(), k, candidate)
    }

    /// Objective `Phi` at `candidate` plus Voronoi cell masses and first
    /// moments (lowest-index tie-break).
    pub fn lloyd_stats(&self, candidate: &MeanConfig) -> Result<StepStats> {
        check_candidate(candidate, &self.truth)?;
        let ps = self.points(candidate, None);
        let (k, d) = (candidate.k(), candidate.d());
        let width = 2 + k + k * d;
        let sums = ps.accumulate(width, |y, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            let l = model::nearest(y, candidate);
            let v = sq_dist(y, candidate.row(l));
            out[0] = v;
            out[1] = v * v;
            out[2 + l] = 1.0;
            for j in 0..d {
                out[2 + k + l * d + j] = y[j];
            }
        });
        self.stats(sums, ps.len(), ps.is_monte_carlo(), k, candidate)
    }

    fn stats(&self, sums: Vec<f64>, n: usize, mc: bool, k: usize, candidate: &MeanConfig) -> Result<StepStats> {
        let std_error = if mc { standard_error(sums[0], sums[1], n) } else { 0.0 };
        let objective = finite(ObjectiveValue { value: sums[0], std_error, evaluations: n }, candidate)?;
        Ok(StepStats { objective, mass: sums[2..2 + k].to_vec(), first: sums[2 + k..].to_vec() })
    }
}

fn log_norm_const(d: usize, k: usize, tau: f64) -> f64 {
    0.5 * d as f64 * (2.0 * PI * tau * tau).ln() + (k as f64).ln()
}

/// `log sum_l exp(-|y - mu_l|^2 * inv)`, stabilized.
fn log_sum_exp_neg(y: &[f64], means: &MeanConfig, inv: f64) -> f64 {
    let m = min_sq_dist(y, means);
    let s: f64 = means.rows().map(|mu| (-(sq_dist(y, mu) - m) * inv).exp()).sum();
    -m * inv + s.ln()
}

fn min_sq_dist(y: &[f64], means: &MeanConfig) -> f64 {
    means.rows().map(|mu| sq_dist(y, mu)).fold(f64::INFINITY, f64::min)
}

/// Mismatched population negative log-likelihood `L_tau(candidate)` in nats.
pub fn population_nll(candidate: &MeanConfig, tau: f64, truth: &MixtureModel, spec: &FitSpec) -> Result<ObjectiveValue> {
    Expectations::new(truth, spec)?.nll(candidate, tau)
}

/// Population hard-assignment risk `Phi(candidate)`.
pub fn population_kmeans_risk(candidate: &MeanConfig, truth: &MixtureModel, spec: &FitSpec) -> Result<ObjectiveValue> {
    Expectations::new(truth, spec)?.kmeans_risk(candidate)
}

/// The remainder `r_tau(candidate)`, evaluated directly.
pub fn rtau_remainder(candidate: &MeanConfig, tau: f64, truth: &MixtureModel, spec: &FitSpec) -> Result<ObjectiveValue> {
    Expectations::new(truth, spec)?.remainder(candidate, tau)
}

/// One row of a minimizer trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub std_error: f64,
    pub perm_dist_to_truth: f64,
    pub perm_dist_step: f64,
}

/// Result of a population minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFit {
    pub means: MeanConfig,
    /// Objective at `means` (`L_tau` or `Phi`).
    pub objective: ObjectiveValue,
    pub trace: Vec<TraceRow>,
    pub iters: usize,
    pub converged: bool,
    /// Five consecutive objective increases beyond noise.
    pub diverged: bool,
    /// `(iteration, component)` pairs where a component carried no mass and was frozen.
    pub empty_cells: Vec<(usize, usize)>,
}

impl PopulationFit {
    /// Trace CSV: `iter,objective,std_error,perm_dist_to_truth,perm_dist_step`.
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Smallest component mass treated as nonempty.
const MASS_FLOOR: f64 = 1e-300;

fn update_from_stats(current: &MeanConfig, st: &StepStats, iter: usize, empty: &mut Vec<(usize, usize)>) -> MeanConfig {
    let d = current.d();
    let mut next = current.clone();
    for l in 0..current.k() {
        let w = st.mass[l];
        if w > MASS_FLOOR {
            for j in 0..d {
                next.row_mut(l)[j] = st.first[l * d + j] / w;
            }
        } else {
            empty.push((iter, l));
        }
    }
    next
}

struct DivergenceWatch {
    last: Option<f64>,
    ups: usize,
}

impl DivergenceWatch {
    fn new() -> Self {
        Self { last: None, ups: 0 }
    }

    /// Record an objective; true once five consecutive increases were seen.
    fn push(&mut self, obj: ObjectiveValue) -> bool {
        if let Some(prev) = self.last {
            let slack = 1e-12 * prev.abs() + 3.0 * obj.std_error;
            if obj.value > prev + slack {
                self.ups += 1;
            } else {
                self.ups = 0;
            }
        }
        self.last = Some(obj.value);
        self.ups >= 5
    }
}

fn check_init(truth: &MixtureModel, init: &MeanConfig) -> Result<()> {
    if init.k() != truth.k() || init.d() != truth.d() {
        return Err(Error::Shape(format!(
            "init is {}x{}, truth is {}x{}",
            init.k(),
            init.d(),
            truth.k(),
            truth.d()
        )));
    }
    Ok(())
}

/// Stationary point of `L_tau` (`tau = spec.tau`) reached from `init`.
pub fn quasi_mle(truth: &MixtureModel, spec: &FitSpec, init: &MeanConfig) -> Result<PopulationFit> {
    let engine = Expectations::new(truth, spec)?;
    quasi_mle_with(&engine, spec, init)
}

/// [`quasi_mle`] on a prebuilt engine (shares its Monte Carlo pool).
pub fn quasi_mle_with(engine: &Expectations, spec: &FitSpec, init: &MeanConfig) -> Result<PopulationFit> {
    let truth = engine.truth();
    check_init(truth, init)?;
    check_tau(spec.tau, truth)?;
    match spec.optimizer {
        Optimizer::PopulationEm => population_em(engine, spec, init),
        Optimizer::DampedGradient => damped_gradient(engine, spec, init),
        Optimizer::PopulationLloyd => Err(Error::InvalidArgument(
            "population-Lloyd minimizes the hard-assignment risk; use hard_assignment_target".into(),
        )),
    }
}

fn population_em(engine: &Expectations, spec: &FitSpec, init: &MeanConfig) -> Result<PopulationFit> {
    let truth = engine.truth();
    let tol = spec.resolved_tol(truth);
    let mut current = init.clone();
    let mut trace = Vec::new();
    let mut empty = Vec::new();
    let mut watch = DivergenceWatch::new();
    let (mut converged, mut diverged) = (false, false);
    let mut iters = 0;
    while iters < spec.max_iters {
        let st = engine.em_stats(&current, spec.tau)?;
        let next = update_from_stats(&current, &st, iters, &mut empty);
        let step = perm_distance(&next, &current)?;
        trace.push(TraceRow {
            iter: iters,
            objective: st.objective.value,
            std_error: st.objective.std_error,
            perm_dist_to_truth: perm_distance(&current, &truth.means)?,
            perm_dist_step: step,
        });
        iters += 1;
        if watch.push(st.objective) {
            diverged = true;
            break;
        }
        current = next;
        if step < tol {
            converged = true;
            break;
        }
    }
    let objective = engine.nll(&current, spec.tau)?;
    Ok(PopulationFit { means: current, objective, trace, iters, converged, diverged, empty_cells: empty })
}

fn damped_gradient(engine: &Expectations, spec: &FitSpec, init: &MeanConfig) -> Result<PopulationFit> {
    let truth = engine.truth();
    let tol = spec.resolved_tol(truth);
    let tau2 = spec.tau * spec.tau;
    let (k, d) = (init.k(), init.d());
    let base_step = k as f64 * tau2;
    let mut eta = base_step;
    let mut current = init.clone();
    let mut st = engine.em_stats(&current, spec.tau)?;
    let mut trace = Vec::new();
    let (mut converged, mut diverged) = (false, false);
    let mut iters = 0;
    while iters < spec.max_iters {
        // grad_l = (W_l mu_l - S_l) / tau^2
        let mut grad = vec![0.0; k * d];
        for l in 0..k {
            for j in 0..d {
                grad[l * d + j] = (st.mass[l] * current.row(l)[j] - st.first[l * d + j]) / tau2;
            }
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = current.clone();
            trial.as_mut_slice().iter_mut().zip(&grad).for_each(|(x, g)| *x -= eta * g);
            let tst = engine.em_stats(&trial, spec.tau)?;
            if tst.objective.value <= st.objective.value - 1e-4 * eta * g2 {
                accepted = Some((trial, tst));
                break;
            }
            eta *= 0.5;
        }
        let step;
        let next_state = match accepted {
            Some((trial, tst)) => {
                step = perm_distance(&trial, &current)?;
                Some((trial, tst))
            }
            None => {
                step = 0.0;
                None
            }
        };
        trace.push(TraceRow {
            iter: iters,
            objective: st.objective.value,
            std_error: st.objective.std_error,
            perm_dist_to_truth: perm_distance(&current, &truth.means)?,
            perm_dist_step: step,
        });
        iters += 1;
        match next_state {
            Some((trial, tst)) => {
                current = trial;
                st = tst;
                eta = (eta * 2.0).min(4.0 * base_step);
            }
            None => {
                // No descent step found: either stationary to working precision or stuck.
                converged = g2.sqrt() * base_step < tol;
                diverged = !converged;
                break;
            }
        }
        if step < tol {
            converged = true;
            break;
        }
    }
    let objective = engine.nll(&current, spec.tau)?;
    Ok(PopulationFit { means: current, objective, trace, iters, converged, diverged, empty_cells: Vec::new() })
}

/// Population Lloyd iteration from `init`: a stationary point of `Phi`.
pub fn hard_assignment_target(truth: &MixtureModel, spec: &FitSpec, init: &MeanConfig) -> Result<PopulationFit> {
    let engine = Expectations::new(truth, spec)?;
    hard_assignment_target_with(&engine, spec, init)
}

/// [`hard_assignment_target`] on a prebuilt engine.
pub fn hard_assignment_target_with(engine: &Expectations, spec: &FitSpec, init: &MeanConfig) -> Result<PopulationFit> {
    let truth = engine.truth();
    check_init(truth, init)?;
    let tol = spec.resolved_tol(truth);
    let mut current = init.clone();
    let mut trace = Vec::new();
    let mut empty = Vec::new();
    let mut watch = DivergenceWatch::new();
    let (mut converged, mut diverged) = (false, false);
    let mut iters = 0;
    while iters < spec.max_iters {
        let st = engine.lloyd_stats(&current)?;
        let next = update_from_stats(&current, &st, iters, &mut empty);
        let step = perm_distance(&next, &current)?;
        trace.push(TraceRow {
            iter: iters,
            objective: st.objective.value,
            std_error: st.objective.std_error,
            perm_dist_to_truth: perm_distance(&current, &truth.means)?,
            perm_dist_step: step,
        });
        iters += 1;
        if watch.push(st.objective) {
            diverged = true;
            break;
        }
        current = next;
        if step < tol {
            converged = true;
            break;
        }
    }
    let objective = engine.kmeans_risk(&current)?;
    Ok(PopulationFit { means: current, objective, trace, iters, converged, diverged, empty_cells: empty })
}

/// Dispatch on `spec.optimizer`.
pub fn minimize(truth: &MixtureModel, spec: &FitSpec, init: &MeanConfig) -> Result<PopulationFit> {
    match spec.optimizer {
        Optimizer::PopulationLloyd => hard_assignment_target(truth, spec, init),
        _ => quasi_mle(truth, spec, init),
    }
}

/// Best of several starts.
#[derive(Debug, Clone)]
pub struct MultiStartFit {
    pub best: PopulationFit,
    /// Index into the start list of the winning run.
    pub best_start: usize,
    /// Final objective of each start, in start order.
    pub objectives: Vec<f64>,
}

/// Starts used by [`multi_start_quasi_mle`]: the truth, `0.01 * truth`, and K
/// points drawn from the true mixture with `seed`.
pub fn default_starts(truth: &MixtureModel, seed: u64) -> Result<Vec<MeanConfig>> {
    let draw = sample_gmm(truth, truth.k(), rng::derive_seed(seed, &[0x0053_5441_5254]))?;
    let random = MeanConfig::new(truth.k(), truth.d(), draw.observations.as_slice().to_vec())?;
    Ok(vec![truth.means.clone(), truth.means.scaled(0.01), random])
}

/// Relative objective gap below which two starts count as tied; ties go to the
/// earlier start.
pub const MULTI_START_TIE: f64 = 1e-12;

/// Run [`quasi_mle`] from each start and keep the lowest final objective.
pub fn multi_start_quasi_mle(truth: &MixtureModel, spec: &FitSpec, starts: &[MeanConfig]) -> Result<MultiStartFit> {
    if starts.is_empty() {
        return Err(Error::InvalidArgument("at least one start is required".into()));
    }
    let engine = Expectations::new(truth, spec)?;
    let mut fits = Vec::with_capacity(starts.len());
    for s in starts {
        fits.push(quasi_mle_with(&engine, spec, s)?);
    }
    let objectives: Vec<f64> = fits.iter().map(|f| f.objective.value).collect();
    let mut best = 0;
    for (i, &v) in objectives.iter().enumerate().skip(1) {
        let b = objectives[best];
        if v < b - MULTI_START_TIE * b.abs().max(1.0) {
            best = i;
        }
    }
    let best_fit = fits.swap_remove(best);
    Ok(MultiStartFit { best: best_fit, best_start: best, objectives })
}

/// Hessian of `L_tau` at the configuration with all means at the origin, in
/// block form: `H = I_K (x) (D - O) + 1 1^T (x) O`.
#[derive(Debug, Clone)]
pub struct HessianBlocks {
    pub diag_block: DMatrix<f64>,
    pub offdiag_block: DMatrix<f64>,
    pub k: usize,
    /// Smallest eigenvalue of `H` restricted to `{h : sum_l h_l = 0}`.
    pub zero_sum_min_eig: f64,
    /// Smallest eigenvalue of `D + (K-1) O` scaled by K, i.e. the curvature
    /// `h^T H h / |u|^2` along common shifts `h = (u, ..., u)`; equals `1/tau^2`.
    pub common_shift_min_eig: f64,
}

impl HessianBlocks {
    /// The full `Kd x Kd` matrix.
    pub fn full_matrix(&self) -> DMatrix<f64> {
        let d = self.diag_block.nrows();
        let mut h = DMatrix::zeros(self.k * d, self.k * d);
        for a in 0..self.k {
            for b in 0..self.k {
                let blk = if a == b { &self.diag_block } else { &self.offdiag_block };
                h.view_mut((a * d, b * d), (d, d)).copy_from(blk);
            }
        }
        h
    }
}

/// Analytic Hessian blocks at the origin for second moment `E[Y Y^T]`.
pub fn hessian_at_origin(tau: f64, second_moment: &DMatrix<f64>, k: usize) -> Result<HessianBlocks> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be finite and > 0, got {tau}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let d = second_moment.nrows();
    if second_moment.ncols() != d {
        return Err(Error::Shape("second moment must be square".into()));
    }
    let asym = (second_moment - second_moment.transpose()).abs().max();
    let scale = second_moment.abs().max().max(f64::MIN_POSITIVE);
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let m = (second_moment + second_moment.transpose()) * 0.5;
    let kf = k as f64;
    let t2 = tau * tau;
    let t4 = t2 * t2;
    let eye = DMatrix::<f64>::identity(d, d);
    let diag_block = &eye / (kf * t2) - &m * ((kf - 1.0) / (kf * kf * t4));
    let offdiag_block = &m / (kf * kf * t4);
    let zero_sum_min_eig = if k >= 2 {
        model::min_eigenvalue(&(&diag_block - &offdiag_block))
    } else {
        f64::NAN
    };
    let shift = (&diag_block + &offdiag_block * (kf - 1.0)) * kf;
    let common_shift_min_eig = model::min_eigenvalue(&shift);
    Ok(HessianBlocks { diag_block, offdiag_block, k, zero_sum_min_eig, common_shift_min_eig })
}

/// Collapse analysis of a truth: the origin is a local minimum of `L_tau`
/// exactly when `rho^2 >= rho_sq_threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub rho_sq_threshold: f64,
    pub lambda_max: f64,
    pub snr: f64,
    pub d: usize,
}

impl CollapseReport {
    pub fn is_stable_at(&self, rho: f64) -> bool {
        rho * rho >= self.rho_sq_threshold
    }

    /// `1 + snr/d <= threshold <= 1 + snr` up to relative `tol`.
    pub fn within_bounds(&self, tol: f64) -> bool {
        let lo = 1.0 + self.snr / self.d as f64;
        let hi = 1.0 + self.snr;
        self.rho_sq_threshold >= lo * (1.0 - tol) && self.rho_sq_threshold <= hi * (1.0 + tol)
    }
}

pub fn collapse_report(truth: &MixtureModel) -> Result<CollapseReport> {
    if truth.k() < 2 {
        return Err(Error::InvalidArgument("collapse analysis needs K >= 2".into()));
    }
    let g = geometry(truth);
    let s2 = truth.sigma * truth.sigma;
    let lambda_max = g.lambda_max.max(0.0);
    let rho_sq_threshold = if lambda_max == 0.0 { 1.0 } else { 1.0 + lambda_max / s2 };
    Ok(CollapseReport { rho_sq_threshold, lambda_max, snr: g.snr, d: truth.d() })
}

/// `K` vertices of a centred regular simplex with norm `beta`, embedded in the
/// first `K - 1` coordinates of R^d.
pub fn make_regular_simplex(k: usize, d: usize, beta: f64) -> Result<MeanConfig> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("simplex needs K >= 2, got {k}")));
    }
    if d < k - 1 {
        return Err(Error::InvalidArgument(format!("simplex with K={k} needs d >= {}, got {d}", k - 1)));
    }
    // Coordinates of e_i - 1/K in the Helmert basis of the zero-sum subspace.
    let scale = beta * (k as f64 / (k as f64 - 1.0)).sqrt();
    let mut data = vec![0.0; k * d];
    for j in 1..k {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..k {
            let h = match i.cmp(&j) {
                std::cmp::Ordering::Less => 1.0,
                std::cmp::Ordering::Equal => -(j as f64),
                std::cmp::Ordering::Greater => 0.0,
            };
            data[i * d + (j - 1)] = scale * h / norm;
        }
    }
    MeanConfig::new(k, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k2(sigma: f64) -> MixtureModel {
        MixtureModel::symmetric_k2(1, 1.0, sigma).unwrap()
    }

    #[test]
    fn gaussian_entropy() {
        let truth = MixtureModel::new(MeanConfig::new(1, 1, vec![0.4]).unwrap(), 1.3).unwrap();
        let v = population_nll(&truth.means, 1.3, &truth, &FitSpec::new(1.3)).unwrap();
        let want = 0.5 * (2.0 * PI * 1.69f64).ln() + 0.5;
        assert!((v.value - want).abs() < 1e-12);
        assert_eq!(v.std_error, 0.0);
    }

    #[test]
    fn tau_underflow_and_invalid() {
        let truth = k2(1.0);
        let spec = FitSpec::new(1.0);
        assert!(matches!(population_nll(&truth.means, 1e-13, &truth, &spec), Err(Error::TauUnderflow { .. })));
        assert!(matches!(population_nll(&truth.means, 0.0, &truth, &spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kmeans_risk_total_variance() {
        let truth = k2(0.8);
        let c = MeanConfig::new(1, 1, vec![0.0]).unwrap();
        let v = population_kmeans_risk(&c, &truth, &FitSpec::new(1.0)).unwrap();
        assert!((v.value - (0.64 + 1.0)).abs() < 1e-13);
    }

    #[test]
    fn kmeans_risk_zero_noise() {
        let truth = MixtureModel::new(MeanConfig::from_rows(&[[1.0], [-1.0]]).unwrap(), 0.0).unwrap();
        let v = population_kmeans_risk(&truth.means, &truth, &FitSpec::new(1.0)).unwrap();
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn remainder_single_component_is_zero() {
        let truth = k2(1.0);
        let c = MeanConfig::new(1, 1, vec![0.3]).unwrap();
        assert_eq!(rtau_remainder(&c, 0.5, &truth, &FitSpec::new(0.5)).unwrap().value, 0.0);
    }

    #[test]
    fn em_fixed_point_at_truth() {
        let truth = k2(1.0);
        let fit = quasi_mle(&truth, &FitSpec::new(1.0), &truth.means).unwrap();
        assert!(fit.converged);
        assert!(perm_distance(&fit.means, &truth.means).unwrap() <= 1e-8 * truth.means.frobenius_norm());
    }

    #[test]
    fn collapse_above_threshold() {
        let truth = k2(1.0);
        let spec = FitSpec::from_rho(2.5f64.sqrt(), 1.0);
        let fit = quasi_mle(&truth, &spec, &truth.means.scaled(0.01)).unwrap();
        assert!(fit.converged);
        assert!(fit.means.frobenius_norm() < 10.0 * spec.resolved_tol(&truth));
    }

    #[test]
    fn em_trace_is_monotone() {
        let truth = MixtureModel::new(MeanConfig::from_rows(&[[0.0], [1.0], [3.0]]).unwrap(), 0.9).unwrap();
        let init = MeanConfig::from_rows(&[[-1.0], [0.5], [2.0]]).unwrap();
        let fit = quasi_mle(&truth, &FitSpec::new(0.6).with_max_iters(300), &init).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-10, "{:?}", w);
        }
    }

    #[test]
    fn damped_gradient_reaches_em_solution() {
        let truth = k2(1.0);
        let spec = FitSpec::new(0.7).with_tol(1e-10);
        let em = quasi_mle(&truth, &spec, &truth.means).unwrap();
        let gd = quasi_mle(&truth, &spec.clone().with_optimizer(Optimizer::DampedGradient), &truth.means).unwrap();
        assert!(perm_distance(&em.means, &gd.means).unwrap() < 1e-6, "{:?} vs {:?}", em.means, gd.means);
    }

    #[test]
    fn lloyd_rejected_for_quasi_mle() {
        let truth = k2(1.0);
        let spec = FitSpec::new(1.0).with_optimizer(Optimizer::PopulationLloyd);
        assert!(quasi_mle(&truth, &spec, &truth.means).is_err());
        assert!(minimize(&truth, &spec, &truth.means).is_ok());
    }

    #[test]
    fn lloyd_flags_empty_cells() {
        let truth = k2(0.1);
        let init = MeanConfig::from_rows(&[[0.0], [100.0]]).unwrap();
        let fit = hard_assignment_target(&truth, &FitSpec::new(1.0).with_max_iters(3), &init).unwrap();
        assert!(fit.empty_cells.iter().any(|&(_, l)| l == 1));
        assert_eq!(fit.means.row(1)[0], 100.0);
    }

    #[test]
    fn hessian_zero_signal_quadratic_form() {
        let tau: f64 = 0.8;
        let m = DMatrix::<f64>::identity(1, 1);
        let h = hessian_at_origin(tau, &m, 2).unwrap();
        let full = h.full_matrix();
        let v = nalgebra::DVector::from_vec(vec![1.0, -1.0]);
        let q = (v.transpose() * &full * &v)[(0, 0)];
        let want = -(1.0 - tau * tau) / (2.0 * tau.powi(4)) * 2.0;
        assert!((q - want).abs() < 1e-12);
        assert!((h.common_shift_min_eig - 1.0 / (tau * tau)).abs() < 1e-12);
    }

    #[test]
    fn hessian_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(hessian_at_origin(1.0, &m, 2), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn collapse_thresholds() {
        assert!((collapse_report(&k2(1.0)).unwrap().rho_sq_threshold - 2.0).abs() < 1e-12);
        let simplex = MixtureModel::new(make_regular_simplex(3, 2, 1.0).unwrap(), 1.0).unwrap();
        assert!((collapse_report(&simplex).unwrap().rho_sq_threshold - 1.5).abs() < 1e-12);
        let flat = MixtureModel::new(MeanConfig::zeros(2, 3), 1.0).unwrap();
        assert_eq!(collapse_report(&flat).unwrap().rho_sq_threshold, 1.0);
    }

    #[test]
    fn simplex_geometry() {
        let s = make_regular_simplex(3, 2, 1.0).unwrap();
        for i in 0..3 {
            assert!((s.row(i).iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for j in i + 1..3 {
                let ip: f64 = s.row(i).iter().zip(s.row(j)).map(|(a, b)| a * b).sum();
                assert!((ip + 0.5).abs() < 1e-12);
            }
        }
        let s4 = make_regular_simplex(4, 3, 2.0).unwrap();
        assert!(s4.rows().all(|r| (r.iter().map(|x| x * x).sum::<f64>().sqrt() - 2.0).abs() < 1e-12));
        assert!(s4.centroid().iter().all(|c| c.abs() < 1e-12));
        let padded = make_regular_simplex(3, 5, 1.0).unwrap();
        assert!(padded.rows().all(|r| r[2..].iter().all(|&x| x == 0.0)));
        assert!(make_regular_simplex(4, 2, 1.0).is_err());
    }
}
