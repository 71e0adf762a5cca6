//! Seeded parameter sweeps and their on-disk artifacts.
//!
//! A [`SweepSpec`] is read from a flat TOML document. Every grid cell derives
//! its random stream from the master seed and its grid indices, so results do
//! not depend on the worker count or on which cells were computed in an earlier
//! (interrupted) run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{bayes_error_mc, binomial, error_bounds};
use crate::error::{Error, Result};
use crate::estimators::{em_fit, lloyd_fit, EmConfig, Init};
use crate::k2::{bayes_error_k2, ha_mse_asymptote, ha_mse_k2, K2Model, Regime};
use crate::model::{geometry, normalized_mse, sample_gmm, MeanConfig, MixtureModel};
use crate::population::{collapse_report, default_starts, make_regular_simplex, multi_start_quasi_mle, FitSpec};
use crate::quadrature::Quadrature;
use crate::rng::{self, derive_seed};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    PhaseDiagram,
    MseVsSigma,
    ClusteringVsSnr,
    HaVsTheory,
}

impl Experiment {
    pub const ALL: [Experiment; 4] =
        [Experiment::PhaseDiagram, Experiment::MseVsSigma, Experiment::ClusteringVsSnr, Experiment::HaVsTheory];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::PhaseDiagram => "phase-diagram",
            Experiment::MseVsSigma => "mse-vs-sigma",
            Experiment::ClusteringVsSnr => "clustering-vs-snr",
            Experiment::HaVsTheory => "ha-vs-theory",
        }
    }

    fn id(self) -> u64 {
        match self {
            Experiment::PhaseDiagram => 1,
            Experiment::MseVsSigma => 2,
            Experiment::ClusteringVsSnr => 3,
            Experiment::HaVsTheory => 4,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// `(mu, -mu)` with `|mu| = mean_norm` along the first axis of R^dim.
    #[default]
    SymmetricK2,
    /// Regular simplex with `k` vertices of norm `beta` in R^dim.
    Simplex,
    /// `k` means with i.i.d. `N(0, mean_norm^2/dim)` coordinates drawn from the master seed.
    Random,
    /// Means read from `means_csv`.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Linear,
    #[default]
    Log,
}

/// One grid axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn grid(name: &str, scale: Scale, min: f64, max: f64, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Config(format!("axis `{name}` needs at least 2 points")));
        }
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::Config(format!("axis `{name}` needs finite min < max")));
        }
        if scale == Scale::Log && min <= 0.0 {
            return Err(Error::Config(format!("log axis `{name}` needs min > 0")));
        }
        let last = (points - 1) as f64;
        let values = (0..points)
            .map(|i| {
                if i == 0 {
                    return min;
                }
                if i == points - 1 {
                    return max;
                }
                let t = i as f64 / last;
                match scale {
                    Scale::Linear => min + t * (max - min),
                    Scale::Log => {
                        let (a, b) = (min.log10(), max.log10());
                        10f64.powf(a + t * (b - a))
                    }
                }
            })
            .collect();
        Ok(Self { name: name.to_string(), values })
    }
}

/// Sweep configuration. Serialized flat: axis keys are `<axis>_min`,
/// `<axis>_max`, `<axis>_points`, `<axis>_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,

    #[serde(default)]
    pub model: ModelPreset,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_one")]
    pub mean_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means_csv: Option<String>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_scale: Option<Scale>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_sq_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_sq_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_sq_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_sq_scale: Option<Scale>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sq_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sq_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sq_points: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sq_scale: Option<Scale>,

    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,

    /// Population minimizer iteration cap.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub quadrature: QuadratureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature_nodes: Option<usize>,

    #[serde(default = "default_em_iters")]
    pub em_max_iters: usize,
    #[serde(default = "default_lloyd_iters")]
    pub lloyd_max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureKind {
    #[default]
    Adaptive,
    GaussHermite,
}

fn default_dim() -> usize {
    1
}
fn default_one() -> f64 {
    1.0
}
fn default_trials() -> usize {
    1
}
fn default_max_iters() -> usize {
    10_000
}
fn default_mc_samples() -> usize {
    crate::population::DEFAULT_MC_SAMPLES
}
fn default_em_iters() -> usize {
    300
}
fn default_lloyd_iters() -> usize {
    100
}

impl SweepSpec {
    /// Minimal spec for `experiment`; axes still have to be filled in.
    pub fn new(experiment: Experiment) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment,
            master_seed: 0,
            workers: None,
            model: ModelPreset::SymmetricK2,
            dim: 1,
            mean_norm: 1.0,
            k: None,
            beta: None,
            means_csv: None,
            snr_min: None,
            snr_max: None,
            snr_points: None,
            snr_scale: None,
            rho_sq_min: None,
            rho_sq_max: None,
            rho_sq_points: None,
            rho_sq_scale: None,
            sigma_sq_min: None,
            sigma_sq_max: None,
            sigma_sq_points: None,
            sigma_sq_scale: None,
            n_list: Vec::new(),
            trials: 1,
            max_iters: default_max_iters(),
            tol: None,
            mc_samples: default_mc_samples(),
            quadrature: QuadratureKind::Adaptive,
            quadrature_nodes: None,
            em_max_iters: default_em_iters(),
            lloyd_max_iters: default_lloyd_iters(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a TOML config, or the `spec` stored in a run manifest (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_str(&text)?;
            manifest.spec.validate()?;
            return Ok(manifest.spec);
        }
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        self.axes()?;
        match self.experiment {
            Experiment::MseVsSigma if self.n_list.is_empty() => Err(Error::Config("n_list must be nonempty".into())),
            Experiment::ClusteringVsSnr | Experiment::HaVsTheory if self.n_list.len() > 1 => {
                Err(Error::Config("this experiment takes a single sample size in n_list".into()))
            }
            Experiment::HaVsTheory if self.model != ModelPreset::SymmetricK2 => {
                Err(Error::Config("ha-vs-theory needs the symmetric-k2 model".into()))
            }
            Experiment::PhaseDiagram if matches!(self.model, ModelPreset::Custom | ModelPreset::Random) => {
                Err(Error::Config("phase-diagram needs the symmetric-k2 or simplex model".into()))
            }
            _ => Ok(()),
        }
    }

    fn axis(&self, name: &str) -> Result<Axis> {
        let (min, max, points, scale) = match name {
            "snr" => (self.snr_min, self.snr_max, self.snr_points, self.snr_scale),
            "rho_sq" => (self.rho_sq_min, self.rho_sq_max, self.rho_sq_points, self.rho_sq_scale),
            "sigma_sq" => (self.sigma_sq_min, self.sigma_sq_max, self.sigma_sq_points, self.sigma_sq_scale),
            _ => unreachable!("unknown axis"),
        };
        let missing = |k: &str| Error::Config(format!("missing `{name}_{k}`"));
        Axis::grid(
            name,
            scale.unwrap_or_default(),
            min.ok_or_else(|| missing("min"))?,
            max.ok_or_else(|| missing("max"))?,
            points.ok_or_else(|| missing("points"))?,
        )
    }

    /// Grid axes in output order.
    pub fn axes(&self) -> Result<Vec<Axis>> {
        Ok(match self.experiment {
            Experiment::PhaseDiagram => vec![self.axis("snr")?, self.axis("rho_sq")?],
            Experiment::MseVsSigma => vec![
                self.axis("sigma_sq")?,
                Axis { name: "n".into(), values: self.n_list.iter().map(|&n| n as f64).collect() },
            ],
            Experiment::ClusteringVsSnr | Experiment::HaVsTheory => vec![self.axis("snr")?],
        })
    }

    /// Sample size for single-n experiments.
    pub fn sample_size(&self) -> usize {
        self.n_list.first().copied().unwrap_or(1_000_000)
    }

    /// Identity of the computation: everything except the worker count.
    pub fn fingerprint(&self) -> Result<String> {
        let mut s = self.clone();
        s.workers = None;
        let bytes = serde_json::to_vec(&s)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Means of the model preset at unit scale (before SNR rescaling).
    pub fn base_means(&self) -> Result<MeanConfig> {
        match self.model {
            ModelPreset::SymmetricK2 => {
                let mut mu = vec![0.0; self.dim];
                mu[0] = self.mean_norm;
                Ok(MeanConfig::symmetric_pair(&mu))
            }
            ModelPreset::Simplex => {
                let k = self.k.ok_or_else(|| Error::Config("simplex model needs `k`".into()))?;
                make_regular_simplex(k, self.dim, self.beta.unwrap_or(1.0))
            }
            ModelPreset::Random => {
                let k = self.k.ok_or_else(|| Error::Config("random model needs `k`".into()))?;
                let mut r = rng::stream(derive_seed(self.master_seed, &[0x4d45_414e]), 0);
                let s = self.mean_norm / (self.dim as f64).sqrt();
                let data = (0..k * self.dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        s * z
                    })
                    .collect();
                MeanConfig::new(k, self.dim, data)
            }
            ModelPreset::Custom => {
                let path = self.means_csv.as_ref().ok_or_else(|| Error::Config("custom model needs `means_csv`".into()))?;
                MeanConfig::load_csv(Path::new(path))
            }
        }
    }

    fn fit_spec(&self, tau: f64, seed: u64) -> FitSpec {
        let quadrature = match self.quadrature {
            QuadratureKind::Adaptive => Quadrature::Adaptive { order: self.quadrature_nodes.unwrap_or(16) },
            QuadratureKind::GaussHermite => Quadrature::GaussHermite { nodes: self.quadrature_nodes.unwrap_or(200) },
        };
        let mut spec = FitSpec::new(tau)
            .with_max_iters(self.max_iters)
            .with_mc_samples(self.mc_samples)
            .with_quadrature(quadrature)
            .with_seed(seed);
        spec.tol = self.tol;
        spec
    }
}

/// Model with the preset means and `sigma` chosen to hit `snr`.
pub fn model_at_snr(means: &MeanConfig, snr: f64) -> Result<MixtureModel> {
    let spread = geometry(&MixtureModel { means: means.clone(), sigma: 1.0 }).snr;
    if spread == 0.0 {
        return Err(Error::Config("model preset has no signal".into()));
    }
    MixtureModel::new(means.clone(), (spread / snr).sqrt())
}

/// One metric of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub n_trials: usize,
}

impl Metric {
    fn exact(name: &str, value: f64) -> Self {
        Self { name: name.into(), value, std_error: 0.0, n_trials: 1 }
    }

    fn of(name: &str, samples: &[f64]) -> Self {
        let (m, se) = mean_and_se(samples);
        Self { name: name.into(), value: m, std_error: se, n_trials: samples.len() }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `10 log10(mse)`, floored so that an exact zero stays finite.
pub fn to_db(mse: f64) -> f64 {
    10.0 * mse.max(1e-300).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: Vec<usize>,
    pub coords: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub seed: u64,
    /// `ok`, `not-converged`, or `failed: <reason>`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub experiment: Experiment,
    pub axes: Vec<Axis>,
    /// Cells in lexicographic order of their grid index.
    pub cells: Vec<CellResult>,
}

impl SweepGrid {
    pub fn cell(&self, index: &[usize]) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.index == index)
    }

    pub fn metric(&self, index: &[usize], name: &str) -> Option<&Metric> {
        self.cell(index)?.metrics.iter().find(|m| m.name == name)
    }
}

fn grid_indices(axes: &[Axis]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..a.values.len()).map(move |i| {
                    let mut p = prefix.clone();
                    p.push(i);
                    p
                })
            })
            .collect();
    }
    out
}

fn cell_seed(spec: &SweepSpec, index: &[usize]) -> u64 {
    let mut path = vec![spec.experiment.id()];
    path.extend(index.iter().map(|&i| i as u64));
    derive_seed(spec.master_seed, &path)
}

/// Compute one cell. Cell failures are reported in `status`, never as `Err`.
pub fn run_cell(spec: &SweepSpec, base: &MeanConfig, axes: &[Axis], index: &[usize]) -> CellResult {
    let coords: Vec<f64> = index.iter().zip(axes).map(|(&i, a)| a.values[i]).collect();
    let seed = cell_seed(spec, index);
    let out = match spec.experiment {
        Experiment::PhaseDiagram => phase_cell(spec, base, coords[0], coords[1], seed),
        Experiment::MseVsSigma => mse_sigma_cell(spec, base, coords[0], coords[1] as usize, seed),
        Experiment::ClusteringVsSnr => clustering_cell(spec, base, coords[0], seed),
        Experiment::HaVsTheory => ha_cell(spec, coords[0], seed),
    };
    match out {
        Ok((metrics, status)) => CellResult { index: index.to_vec(), coords, metrics, seed, status },
        Err(e) => CellResult {
            index: index.to_vec(),
            coords,
            metrics: vec![Metric::exact("error", f64::NAN)],
            seed,
            status: format!("failed: {e}"),
        },
    }
}

type CellOutput = Result<(Vec<Metric>, String)>;

fn status(ok: bool) -> String {
    if ok { "ok" } else { "not-converged" }.to_string()
}

fn phase_cell(spec: &SweepSpec, base: &MeanConfig, snr: f64, rho_sq: f64, seed: u64) -> CellOutput {
    let truth = model_at_snr(base, snr)?;
    let tau = rho_sq.sqrt() * truth.sigma;
    let fit_spec = spec.fit_spec(tau, derive_seed(seed, &[0]));
    let starts = default_starts(&truth, derive_seed(seed, &[1]))?;
    let fit = multi_start_quasi_mle(&truth, &fit_spec, &starts)?;
    let mse = normalized_mse(&fit.best.means, &truth.means)?;
    let threshold = collapse_report(&truth)?.rho_sq_threshold;
    let metrics = vec![
        Metric::exact("mse", mse),
        Metric::exact("mse_db", to_db(mse)),
        Metric { name: "objective".into(), value: fit.best.objective.value, std_error: fit.best.objective.std_error, n_trials: 1 },
        Metric::exact("rho_sq_threshold", threshold),
        Metric::exact("best_start", fit.best_start as f64),
        Metric::exact("iters", fit.best.iters as f64),
    ];
    Ok((metrics, status(fit.best.converged)))
}

fn mse_sigma_cell(spec: &SweepSpec, base: &MeanConfig, sigma_sq: f64, n: usize, seed: u64) -> CellOutput {
    let truth = MixtureModel::new(base.clone(), sigma_sq.sqrt())?;
    let k = truth.k();
    let mut em = Vec::with_capacity(spec.trials);
    let mut lloyd = Vec::with_capacity(spec.trials);
    let mut all_converged = true;
    for t in 0..spec.trials {
        let s = derive_seed(seed, &[t as u64]);
        let data = sample_gmm(&truth, n, s)?.observations;
        let init = Init::Given(truth.means.clone());
        let e = em_fit(&data, k, &EmConfig::new(truth.sigma, init.clone()).with_max_iters(spec.em_max_iters), s)?;
        let l = lloyd_fit(&data, k, &EmConfig::new(truth.sigma, init).with_max_iters(spec.lloyd_max_iters), s)?;
        em.push(normalized_mse(&e.means, &truth.means)?);
        lloyd.push(normalized_mse(&l.means, &truth.means)?);
        all_converged &= e.means.as_slice().iter().chain(l.means.as_slice()).all(|v| v.is_finite());
    }
    let em_m = Metric::of("em_mse", &em);
    let ll_m = Metric::of("lloyd_mse", &lloyd);
    let metrics = vec![
        Metric::exact("em_mse_db", to_db(em_m.value)),
        em_m,
        Metric::exact("lloyd_mse_db", to_db(ll_m.value)),
        ll_m,
    ];
    Ok((metrics, status(all_converged)))
}

fn clustering_cell(spec: &SweepSpec, base: &MeanConfig, snr: f64, seed: u64) -> CellOutput {
    let truth = model_at_snr(base, snr)?;
    let n = spec.sample_size();
    let mut wrong = 0usize;
    for t in 0..spec.trials {
        let est = bayes_error_mc(&truth, n, derive_seed(seed, &[t as u64]))?;
        wrong += (est.p_err * n as f64).round() as usize;
    }
    let est = binomial(wrong, n * spec.trials);
    let bounds = error_bounds(&truth)?;
    let mut metrics = vec![Metric { name: "p_err".into(), value: est.p_err, std_error: est.std_error, n_trials: est.n_trials }];
    if spec.model == ModelPreset::SymmetricK2 {
        metrics.push(Metric::exact("p_err_theory", bayes_error_k2(snr)));
    }
    metrics.extend([
        Metric::exact("lower", bounds.lower),
        Metric::exact("upper", bounds.upper),
        Metric::exact("mi_upper", bounds.mi_upper),
        Metric::exact("mills", bounds.mills),
    ]);
    Ok((metrics, "ok".into()))
}

fn ha_cell(spec: &SweepSpec, snr: f64, seed: u64) -> CellOutput {
    let m = K2Model::from_snr(spec.dim, spec.mean_norm, snr)?;
    let truth = m.mixture();
    let n = spec.sample_size();
    let mut sims = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials {
        let s = derive_seed(seed, &[t as u64]);
        let data = sample_gmm(&truth, n, s)?.observations;
        let cfg = EmConfig::new(truth.sigma, Init::Given(truth.means.clone())).with_max_iters(spec.lloyd_max_iters);
        let fit = lloyd_fit(&data, 2, &cfg, s)?;
        sims.push(normalized_mse(&fit.means, &truth.means)?);
    }
    let metrics = vec![
        Metric::exact("ha_mse_theory", ha_mse_k2(&m)),
        Metric::of("lloyd_mse", &sims),
        Metric::exact("asymptote_low", ha_mse_asymptote(snr, Regime::Low)),
        Metric::exact("asymptote_high", ha_mse_asymptote(snr, Regime::High)),
    ];
    Ok((metrics, "ok".into()))
}

/// How a sweep is executed.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses rayon's default.
    pub workers: Option<usize>,
    /// Directory for `cells.jsonl` checkpoints (enables resume).
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    pub progress: bool,
}

const CHECKPOINT: &str = "cells.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: String,
}

/// Cells recovered from a checkpoint, and whether every line parsed.
fn load_checkpoint(path: &Path, fingerprint: &str) -> Result<(BTreeMap<Vec<usize>, CellResult>, bool)> {
    let mut done = BTreeMap::new();
    let Ok(file) = File::open(path) else {
        return Ok((done, true));
    };
    let mut lines = BufReader::new(file).lines();
    let Some(first) = lines.next() else {
        return Ok((done, true));
    };
    let header: CheckpointHeader = serde_json::from_str(&first?)?;
    if header.fingerprint != fingerprint {
        return Err(Error::Config("checkpoint belongs to a different spec; remove it or run without --resume".into()));
    }
    let mut clean = true;
    for line in lines {
        let line = line?;
        // A torn final line from an interrupted run is simply recomputed.
        match serde_json::from_str::<CellResult>(&line) {
            Ok(cell) => {
                done.insert(cell.index.clone(), cell);
            }
            Err(_) => clean = false,
        }
    }
    Ok((done, clean))
}

/// Run every cell of `spec`, skipping cells already in the checkpoint when
/// resuming.
pub fn run_sweep(spec: &SweepSpec, opts: &RunOptions) -> Result<SweepGrid> {
    spec.validate()?;
    let axes = spec.axes()?;
    let base = spec.base_means()?;
    let fingerprint = spec.fingerprint()?;
    let indices = grid_indices(&axes);

    let mut done = BTreeMap::new();
    let mut writer = None;
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(CHECKPOINT);
        let mut clean = true;
        if opts.resume {
            (done, clean) = load_checkpoint(&path, &fingerprint)?;
        }
        // Rewrite rather than append after a torn line.
        let fresh = !opts.resume || done.is_empty() || !clean;
        let mut f = if fresh {
            File::create(&path)?
        } else {
            OpenOptions::new().append(true).open(&path)?
        };
        if fresh {
            writeln!(f, "{}", serde_json::to_string(&CheckpointHeader { fingerprint: fingerprint.clone() })?)?;
            for c in done.values() {
                writeln!(f, "{}", serde_json::to_string(c)?)?;
            }
        }
        writer = Some(BufWriter::new(f));
    }

    let todo: Vec<Vec<usize>> = indices.iter().filter(|i| !done.contains_key(*i)).cloned().collect();
    let total = todo.len();
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = opts.workers {
            b = b.num_threads(w.max(1));
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?
    };

    let (tx, rx) = mpsc::channel::<CellResult>();
    let fresh: Vec<CellResult> = std::thread::scope(|scope| -> Result<Vec<CellResult>> {
        let progress = opts.progress;
        let sink = scope.spawn(move || -> Result<Vec<CellResult>> {
            let mut got = Vec::with_capacity(total);
            for (i, cell) in rx.into_iter().enumerate() {
                if let Some(w) = writer.as_mut() {
                    writeln!(w, "{}", serde_json::to_string(&cell)?)?;
                    w.flush()?;
                }
                if progress {
                    eprintln!("[{}/{}] cell {:?} {}", i + 1, total, cell.index, cell.status);
                }
                got.push(cell);
            }
            Ok(got)
        });
        pool.install(|| {
            todo.par_iter().for_each_with(tx, |tx, idx| {
                let cell = run_cell(spec, &base, &axes, idx);
                let _ = tx.send(cell);
            });
        });
        sink.join().expect("checkpoint writer panicked")
    })?;

    for c in fresh {
        done.insert(c.index.clone(), c);
    }
    let cells: Vec<CellResult> = indices.iter().filter_map(|i| done.remove(i)).collect();
    Ok(SweepGrid { experiment: spec.experiment, axes, cells })
}

fn run_in_memory(spec: &SweepSpec, expected: Experiment) -> Result<SweepGrid> {
    if spec.experiment != expected {
        return Err(Error::Config(format!("spec is for {}, not {expected}", spec.experiment)));
    }
    run_sweep(spec, &RunOptions::default())
}

/// Quasi-MLE error over an (SNR, rho^2) grid.
pub fn run_phase_diagram(spec: &SweepSpec) -> Result<SweepGrid> {
    run_in_memory(spec, Experiment::PhaseDiagram)
}

/// Finite-sample EM and Lloyd error over (sigma^2, n).
pub fn run_mse_vs_sigma(spec: &SweepSpec) -> Result<SweepGrid> {
    run_in_memory(spec, Experiment::MseVsSigma)
}

/// Monte Carlo Bayes error, its closed form and bounds over SNR.
pub fn run_clustering_vs_snr(spec: &SweepSpec) -> Result<SweepGrid> {
    run_in_memory(spec, Experiment::ClusteringVsSnr)
}

/// Finite-sample Lloyd error against the closed-form hard-assignment error.
pub fn run_ha_vs_theory(spec: &SweepSpec) -> Result<SweepGrid> {
    run_in_memory(spec, Experiment::HaVsTheory)
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Long-format results: axis columns, then `metric,value,std_error,n_trials,seed,status`.
pub fn write_results_csv<W: Write>(grid: &SweepGrid, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = grid.axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["metric", "value", "std_error", "n_trials", "seed", "status"].map(String::from));
    w.write_record(&header)?;
    for c in &grid.cells {
        for m in &c.metrics {
            let mut rec: Vec<String> = c.coords.iter().map(|&v| fmt_f64(v)).collect();
            rec.extend([
                m.name.clone(),
                fmt_f64(m.value),
                fmt_f64(m.std_error),
                m.n_trials.to_string(),
                c.seed.to_string(),
                c.status.clone(),
            ]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Theory overlay for the experiment, if it has one.
pub fn write_theory_csv<W: Write>(spec: &SweepSpec, writer: W) -> Result<bool> {
    let mut w = csv::Writer::from_writer(writer);
    let fine = |axis: &Axis| -> Result<Vec<f64>> {
        let (lo, hi) = (axis.values[0], *axis.values.last().expect("axis has points"));
        Ok(Axis::grid(&axis.name, spec.snr_scale.unwrap_or_default(), lo, hi, 200)?.values)
    };
    match spec.experiment {
        Experiment::PhaseDiagram => {
            let base = spec.base_means()?;
            w.write_record(["snr", "rho_sq_threshold"])?;
            for snr in fine(&spec.axis("snr")?)? {
                let t = collapse_report(&model_at_snr(&base, snr)?)?.rho_sq_threshold;
                w.write_record([fmt_f64(snr), fmt_f64(t)])?;
            }
        }
        Experiment::ClusteringVsSnr => {
            let base = spec.base_means()?;
            let k2 = spec.model == ModelPreset::SymmetricK2;
            w.write_record(["snr", "p_err_theory", "lower", "upper", "mi_upper", "mills"])?;
            for snr in fine(&spec.axis("snr")?)? {
                let b = error_bounds(&model_at_snr(&base, snr)?)?;
                let th = if k2 { bayes_error_k2(snr) } else { f64::NAN };
                w.write_record([snr, th, b.lower, b.upper, b.mi_upper, b.mills].map(fmt_f64))?;
            }
        }
        Experiment::HaVsTheory => {
            w.write_record(["snr", "ha_mse", "asymptote_low", "asymptote_high"])?;
            for snr in fine(&spec.axis("snr")?)? {
                let m = K2Model::from_snr(spec.dim, spec.mean_norm, snr)?;
                w.write_record(
                    [snr, ha_mse_k2(&m), ha_mse_asymptote(snr, Regime::Low), ha_mse_asymptote(snr, Regime::High)]
                        .map(fmt_f64),
                )?;
            }
        }
        Experiment::MseVsSigma => return Ok(false),
    }
    w.flush()?;
    Ok(true)
}

/// Run record written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub master_seed: u64,
    pub spec: SweepSpec,
    pub fingerprint: String,
    pub git_describe: Option<String>,
    pub crate_version: String,
    pub wall_time_seconds: f64,
    pub workers: Option<usize>,
    pub cells: usize,
    pub failed_cells: usize,
    pub outputs: Vec<String>,
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git").args(["describe", "--always", "--dirty", "--tags"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

const PLOT_STUB: &str = r#"# Plot stub for the CSVs in this directory (requires pandas + matplotlib).
import pandas as pd
import matplotlib.pyplot as plt

df = pd.read_csv("results.csv")
axes = list(df.columns[: list(df.columns).index("metric")])
for metric, part in df.groupby("metric"):
    fig, ax = plt.subplots()
    if len(axes) == 1:
        ax.errorbar(part[axes[0]], part["value"], yerr=part["std_error"], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel(axes[0])
    else:
        pivot = part.pivot(index=axes[1], columns=axes[0], values="value")
        im = ax.imshow(pivot.values, origin="lower", aspect="auto")
        ax.set_xlabel(axes[0])
        ax.set_ylabel(axes[1])
        fig.colorbar(im)
    ax.set_title(metric)
    fig.savefig(f"{metric}.png", dpi=150)
"#;

/// Write `results.csv`, `manifest.json`, the theory overlay (when the
/// experiment has one) and a plotting stub into `out`.
pub fn aggregate_and_write(
    grid: &SweepGrid,
    spec: &SweepSpec,
    out: &Path,
    wall_time_seconds: f64,
    workers: Option<usize>,
) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    let mut outputs = vec!["results.csv".to_string()];
    write_results_csv(grid, BufWriter::new(File::create(out.join("results.csv"))?))?;
    let mut theory = Vec::new();
    if write_theory_csv(spec, &mut theory)? {
        fs::write(out.join("theory.csv"), theory)?;
        outputs.push("theory.csv".into());
    }
    fs::write(out.join("plot.py"), PLOT_STUB)?;
    outputs.push("plot.py".into());
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        experiment: spec.experiment,
        master_seed: spec.master_seed,
        spec: spec.clone(),
        fingerprint: spec.fingerprint()?,
        git_describe: git_describe(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_seconds,
        workers,
        cells: grid.cells.len(),
        failed_cells: grid.cells.iter().filter(|c| c.status.starts_with("failed")).count(),
        outputs,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Run a sweep end to end into `out` (checkpointing there) and write all artifacts.
pub fn run_to_dir(spec: &SweepSpec, out: &Path, opts: &RunOptions) -> Result<(SweepGrid, Manifest)> {
    let start = Instant::now();
    let mut opts = opts.clone();
    opts.checkpoint_dir = Some(out.to_path_buf());
    let grid = run_sweep(spec, &opts)?;
    let manifest = aggregate_and_write(&grid, spec, out, start.elapsed().as_secs_f64(), opts.workers)?;
    Ok((grid, manifest))
}
