//! Config-driven experiment runner.
//!
//! A config names one experiment kind plus the geometry, truth, kernel,
//! methods and grid it needs. Work cells `(method, n, replication)` run on a
//! bounded rayon pool and are merged by cell key, so output bytes do not
//! depend on the worker count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    axis_concentration, eig_learning_audit, fit_power_law, fit_rate, gen_error, median, EigAuditParams, EigAuditReport,
    ErrorCurve, RateReport,
};
use crate::basis::{low_dim_spectrum, OrderedSpectrum};
use crate::dynamics::{init_state, schedules, train, Estimator, FixedState, StoppingRule, TrainConfig};
use crate::error::Error;
use crate::onedim::certify::{certify, Lemma, LemmaReport, SweepConfig};
use crate::sampling::{cell_stream, concentration_audit, default_probes, sample_dataset, sample_dataset_with, AuditSpec, ConcentrationReport};
use crate::signals::{cosine_target, cosine_target_coeffs, theoretical_rates, CoefficientVector, GappedDecay, RateForm};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RateSweep,
    SingleRun,
    OnedimVerify,
    ConcentrationAudit,
    EigAudit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub d: usize,
    /// Number of leading coordinates the truth depends on.
    #[serde(default)]
    pub d0: Option<usize>,
    /// Frequency cutoff for enumerated bases.
    #[serde(default)]
    pub max_freq: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TruthConfig {
    /// `|θ*_{ℓ(j)}| = j^{-(p+1)/2}` at `ℓ(j) ≈ j^q`; `support` coefficients are kept explicitly.
    Gapped { p: f64, q: f64, support: usize },
    /// `cos(7.5πx₁)`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelConfig {
    /// `(1+‖m‖²)^{-r}` on the enumerated torus basis.
    Sobolev {
        r: f64,
        #[serde(default)]
        low_dim: bool,
    },
    /// One-dimensional `rank^{-γ}` on ranks `1..=dense` plus the truth support.
    PowerLaw { gamma: f64, dense: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodConfig {
    Fixed,
    Adaptive { depth: u32 },
}

impl MethodConfig {
    pub fn label(&self) -> String {
        match self {
            MethodConfig::Fixed => "fixed".into(),
            MethodConfig::Adaptive { depth } => format!("adaptive-D{depth}"),
        }
    }

    pub fn depth(&self) -> u32 {
        match self {
            MethodConfig::Fixed => 0,
            MethodConfig::Adaptive { depth } => *depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Step size; when absent each cell uses `0.05/(max λ + ‖y‖∞²)`.
    #[serde(default)]
    pub eta: Option<f64>,
    pub stopping: StoppingRule,
    #[serde(default = "default_c_b")]
    pub c_b: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    #[serde(default)]
    pub record_components: bool,
    #[serde(default)]
    pub write_trajectories: bool,
    #[serde(default = "default_true")]
    pub check_descent: bool,
}

fn default_c_b() -> f64 {
    1.0
}
fn default_max_steps() -> u64 {
    10_000_000
}
fn default_snapshot_every() -> u64 {
    100
}
fn default_true() -> bool {
    true
}
fn default_reps() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnedimConfig {
    #[serde(default = "default_tuples")]
    pub tuples: usize,
    #[serde(default = "default_depths")]
    pub depths: Vec<u32>,
    /// Claims to certify; all of them when empty.
    #[serde(default)]
    pub lemmas: Vec<Lemma>,
    #[serde(default = "default_margin")]
    pub margin_steps: f64,
    #[serde(default = "default_horizon")]
    pub horizon_factor: f64,
    #[serde(default = "default_max_b0")]
    pub max_b0: f64,
    #[serde(default)]
    pub min_log_ratio: Option<f64>,
}

fn default_tuples() -> usize {
    500
}
fn default_depths() -> Vec<u32> {
    vec![0, 1, 2]
}
fn default_margin() -> f64 {
    10.0
}
fn default_horizon() -> f64 {
    2.0
}
fn default_max_b0() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// `S` is the first `s_size` positions of the spectrum.
    pub s_size: usize,
    /// Probe levels beyond the spectrum: ranks `2J, 4J, …, 2^levels J`.
    #[serde(default = "default_levels")]
    pub levels: u32,
}

fn default_levels() -> u32 {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub geometry: Option<Geometry>,
    #[serde(default)]
    pub truth: Option<TruthConfig>,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub onedim: Option<OnedimConfig>,
    #[serde(default)]
    pub audit: Option<AuditConfig>,
    #[serde(default)]
    pub eig_audit: Option<EigAuditParams>,
}

/// Failures of a run, each with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical failure in cell {cell}: {source}")]
    Numerical { cell: CellKey, source: Error },
    #[error(transparent)]
    Other(#[from] Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical { .. } => 3,
            RunError::Other(_) => 1,
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        match self {
            RunError::Config(msg) => serde_json::json!({"error": "config", "exit_code": 2, "detail": msg}),
            RunError::Numerical { cell, source } => serde_json::json!({
                "error": match source { Error::DescentViolation { .. } => "descent-violation", _ => "divergence" },
                "exit_code": 3,
                "cell": cell,
                "detail": source.to_string(),
            }),
            RunError::Other(e) => serde_json::json!({"error": "runtime", "exit_code": 1, "detail": e.to_string()}),
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> std::result::Result<T, RunError> {
    Err(RunError::Config(msg.into()))
}

/// Identifies one training job.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: String,
    pub depth: u32,
    pub n: usize,
    pub rep: usize,
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} D={} n={} rep={}", self.method, self.depth, self.n, self.rep)
    }
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Hex digest recorded in headers; computed from the resolved config when absent.
    pub config_hash: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> std::result::Result<(Self, String), RunError> {
        let bytes = std::fs::read(path).map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| RunError::Config(e.to_string()))?;
        Ok((Self::from_toml(&text)?, hex::encode(Sha256::digest(&bytes))))
    }

    fn needs_training(&self) -> bool {
        matches!(self.kind, ExperimentKind::RateSweep | ExperimentKind::SingleRun | ExperimentKind::EigAudit)
    }

    /// Checks every field the kind uses; nothing is computed beyond the spectrum and truth.
    pub fn validate(&self) -> std::result::Result<(), RunError> {
        if self.name.trim().is_empty() {
            return config_err("name must not be empty");
        }
        if self.kind == ExperimentKind::OnedimVerify {
            let Some(o) = &self.onedim else { return config_err("onedim-verify needs an [onedim] section") };
            if o.tuples == 0 {
                return config_err("onedim.tuples must be positive");
            }
            if o.depths.is_empty() || o.depths.iter().any(|&d| d > 8) {
                return config_err("onedim.depths must be a non-empty list of depths ≤ 8");
            }
            if !(o.margin_steps >= 0.0) || !(o.horizon_factor >= 1.0) || !(o.max_b0 > 0.1) {
                return config_err("onedim needs margin_steps ≥ 0, horizon_factor ≥ 1 and max_b0 > 0.1");
            }
            return Ok(());
        }
        let Some(g) = &self.geometry else { return config_err("missing [geometry]") };
        if g.d == 0 {
            return config_err("geometry.d must be at least 1");
        }
        if let Some(d0) = g.d0 {
            if d0 == 0 || d0 > g.d {
                return config_err(format!("geometry.d0 must lie in 1..={}", g.d));
            }
        }
        if self.truth.is_none() {
            return config_err("missing [truth]");
        }
        if self.kernel.is_none() {
            return config_err("missing [kernel]");
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return config_err("n_grid must list positive sample sizes");
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return config_err("n_grid must be strictly increasing");
        }
        if self.replications == 0 {
            return config_err("replications must be positive");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return config_err("sigma must be finite and non-negative");
        }
        if let KernelConfig::PowerLaw { gamma, dense } = self.kernel.as_ref().unwrap() {
            if g.d != 1 {
                return config_err("the power-law kernel is one-dimensional");
            }
            if !(*gamma > 1.0) || *dense == 0 {
                return config_err("power-law kernel needs gamma > 1 and dense ≥ 1");
            }
            if !matches!(self.truth, Some(TruthConfig::Gapped { .. })) {
                return config_err("the power-law kernel pairs with the gapped truth");
            }
        }
        if let Some(KernelConfig::Sobolev { low_dim: true, .. }) = &self.kernel {
            if g.d0.is_none() {
                return config_err("kernel.low_dim needs geometry.d0");
            }
        }
        match &self.truth {
            Some(TruthConfig::Gapped { p, q, support }) => {
                if g.d != 1 {
                    return config_err("the gapped truth is one-dimensional");
                }
                if !(*p > 0.0) || !(*q >= 1.0) || *support == 0 {
                    return config_err("gapped truth needs p > 0, q ≥ 1 and support ≥ 1");
                }
            }
            Some(TruthConfig::Cosine) => {}
            None => unreachable!(),
        }
        if matches!(self.kernel, Some(KernelConfig::Sobolev { .. })) && g.max_freq < 1 {
            return config_err("the Sobolev kernel needs geometry.max_freq ≥ 1");
        }
        if self.needs_training() {
            if self.methods.is_empty() {
                return config_err("at least one method is required");
            }
            let mut seen = std::collections::HashSet::new();
            for m in &self.methods {
                if !seen.insert(m.label()) {
                    return config_err(format!("method {} listed twice", m.label()));
                }
            }
            let Some(t) = &self.training else { return config_err("missing [training]") };
            if let Some(eta) = t.eta {
                if !(eta > 0.0 && eta.is_finite()) {
                    return config_err("training.eta must be positive");
                }
            }
            if !(t.c_b > 0.0) {
                return config_err("training.c_b must be positive");
            }
            match t.stopping {
                StoppingRule::TheoreticalTime { c_t } if !(c_t > 0.0) => return config_err("stopping.c_t must be positive"),
                StoppingRule::OracleEarlyStop { holdout, patience } if !(holdout > 0.0 && holdout < 1.0) || patience == 0 => {
                    return config_err("stopping.holdout must lie in (0, 1) and patience must be positive")
                }
                _ => {}
            }
            if t.max_steps == 0 || t.snapshot_every == 0 {
                return config_err("max_steps and snapshot_every must be positive");
            }
        }
        if self.kind == ExperimentKind::RateSweep && self.n_grid.len() < 4 {
            return config_err("rate-sweep needs at least 4 sample sizes");
        }
        if self.kind == ExperimentKind::ConcentrationAudit {
            let Some(a) = &self.audit else { return config_err("concentration-audit needs an [audit] section") };
            if a.s_size == 0 {
                return config_err("audit.s_size must be positive");
            }
        }
        Ok(())
    }
}

/// Spectrum, truth and the resolved work list.
#[derive(Clone, Debug)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub config_hash: String,
    pub spectrum: Option<OrderedSpectrum>,
    pub truth: Option<CoefficientVector>,
    pub cells: Vec<CellKey>,
}

/// Summary printed by `--dry-run`.
#[derive(Clone, Debug, Serialize)]
pub struct PlanSummary {
    pub kind: ExperimentKind,
    pub name: String,
    pub seed: u64,
    pub output: String,
    pub config_sha256: String,
    pub spectrum_size: Option<usize>,
    pub max_eigenvalue: Option<f64>,
    pub truth_energy: Option<f64>,
    pub truth_tail_energy: Option<f64>,
    pub methods: Vec<String>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub cells: usize,
    pub steps_per_cell: BTreeMap<String, Vec<u64>>,
    pub lemma_sweeps: Vec<String>,
}

fn build_problem(cfg: &ExperimentConfig) -> std::result::Result<(OrderedSpectrum, CoefficientVector), RunError> {
    let g = cfg.geometry.as_ref().unwrap();
    let truth_cfg = cfg.truth.as_ref().unwrap();
    let spectrum = match cfg.kernel.as_ref().unwrap() {
        KernelConfig::Sobolev { r, low_dim } => {
            let full = OrderedSpectrum::sobolev(g.d, g.max_freq, *r)?;
            if *low_dim {
                low_dim_spectrum(&full, g.d0.unwrap())?
            } else {
                full
            }
        }
        KernelConfig::PowerLaw { gamma, dense } => {
            let TruthConfig::Gapped { p, q, support } = truth_cfg else { unreachable!() };
            let gd = GappedDecay::new(*p, *q, 1)?;
            let mut ranks: Vec<u64> = (1..=*dense).collect();
            ranks.extend(gd.positions(*support));
            ranks.sort_unstable();
            ranks.dedup();
            OrderedSpectrum::power_law_1d(&ranks, *gamma)?
        }
    };
    let truth = match truth_cfg {
        TruthConfig::Cosine => cosine_target_coeffs(&spectrum)?,
        TruthConfig::Gapped { p, q, support } => {
            let positions = GappedDecay::new(*p, *q, 1)?.positions(*support);
            let truncation = match cfg.kernel.as_ref().unwrap() {
                KernelConfig::PowerLaw { .. } => *positions.last().unwrap(),
                KernelConfig::Sobolev { .. } => spectrum.ranks().iter().copied().max().unwrap_or(1),
            };
            GappedDecay::new(*p, *q, truncation)?.on_spectrum(&spectrum)?
        }
    };
    Ok((spectrum, truth))
}

fn max_eig(spectrum: &OrderedSpectrum) -> f64 {
    spectrum.eigenvalues().iter().copied().fold(0.0, f64::max)
}

/// Resolves overrides, builds the spectrum and truth and checks the stability guard.
pub fn plan(config: ExperimentConfig, opts: &RunOptions) -> std::result::Result<Plan, RunError> {
    config.validate()?;
    let seed = opts.seed.unwrap_or(config.seed);
    let out = opts
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name));
    let config_hash = opts.config_hash.clone().unwrap_or_else(|| {
        let text = toml::to_string(&config).unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    });
    let (spectrum, truth) = if config.kind == ExperimentKind::OnedimVerify {
        (None, None)
    } else {
        let (s, t) = build_problem(&config)?;
        (Some(s), Some(t))
    };
    if let (Some(s), Some(t), Some(tr)) = (&spectrum, &truth, &config.training) {
        if let Some(eta) = tr.eta {
            let guard = eta * (max_eig(s) + t.sup_bound + config.sigma);
            if guard > 0.25 {
                return config_err(format!(
                    "stability guard violated: eta·(max λ + ‖θ*‖∞ + σ) = {guard:.4} > 0.25"
                ));
            }
        }
    }
    let mut cells = Vec::new();
    if config.needs_training() {
        for m in &config.methods {
            for &n in &config.n_grid {
                for rep in 0..config.replications {
                    cells.push(CellKey { method: m.label(), depth: m.depth(), n, rep });
                }
            }
        }
    }
    Ok(Plan { config, seed, out, config_hash, spectrum, truth, cells })
}

impl Plan {
    pub fn summary(&self) -> PlanSummary {
        let c = &self.config;
        let mut steps = BTreeMap::new();
        if let Some(t) = &c.training {
            for m in &c.methods {
                let v = c
                    .n_grid
                    .iter()
                    .map(|&n| match (t.stopping, t.eta) {
                        (StoppingRule::TheoreticalTime { c_t }, Some(eta)) => schedules(n, m.depth(), c_t, t.c_b)
                            .map(|s| ((s.stop_time / eta).round() as u64).min(t.max_steps))
                            .unwrap_or(0),
                        _ => t.max_steps,
                    })
                    .collect();
                steps.insert(m.label(), v);
            }
        }
        let lemma_sweeps = c
            .onedim
            .as_ref()
            .filter(|_| c.kind == ExperimentKind::OnedimVerify)
            .map(|o| sweep_list(o).into_iter().map(|(l, d)| format!("{}@D{d}", l.name())).collect())
            .unwrap_or_default();
        PlanSummary {
            kind: c.kind,
            name: c.name.clone(),
            seed: self.seed,
            output: self.out.display().to_string(),
            config_sha256: self.config_hash.clone(),
            spectrum_size: self.spectrum.as_ref().map(|s| s.len()),
            max_eigenvalue: self.spectrum.as_ref().map(max_eig),
            truth_energy: self.truth.as_ref().map(|t| t.total_energy()),
            truth_tail_energy: self.truth.as_ref().map(|t| t.tail_energy),
            methods: c.methods.iter().map(|m| m.label()).collect(),
            n_grid: c.n_grid.clone(),
            replications: c.replications,
            cells: self.cells.len(),
            steps_per_cell: steps,
            lemma_sweeps,
        }
    }

    /// Header lines carried by every output file.
    pub fn header(&self) -> Vec<String> {
        vec![
            format!("adaptive-kernel {VERSION}"),
            format!("experiment: {} ({})", self.config.name, kind_name(self.config.kind)),
            format!("config_sha256: {}", self.config_hash),
            format!("seed: {}", self.seed),
        ]
    }

    fn header_json(&self) -> serde_json::Value {
        serde_json::json!({
            "version": VERSION,
            "experiment": self.config.name,
            "kind": kind_name(self.config.kind),
            "config_sha256": self.config_hash,
            "seed": self.seed,
        })
    }
}

fn kind_name(k: ExperimentKind) -> &'static str {
    match k {
        ExperimentKind::RateSweep => "rate-sweep",
        ExperimentKind::SingleRun => "single-run",
        ExperimentKind::OnedimVerify => "onedim-verify",
        ExperimentKind::ConcentrationAudit => "concentration-audit",
        ExperimentKind::EigAudit => "eig-audit",
    }
}

fn sweep_list(o: &OnedimConfig) -> Vec<(Lemma, u32)> {
    let lemmas: Vec<Lemma> = if o.lemmas.is_empty() { Lemma::ALL.to_vec() } else { o.lemmas.clone() };
    let mut out = Vec::new();
    for l in lemmas {
        for &d in &o.depths {
            if l.applies(d) {
                out.push((l, d));
            }
        }
    }
    out
}

/// Outcome of one training cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub eta: f64,
    pub stop_step: u64,
    pub stop_time: f64,
    pub gen_error: f64,
    pub train_loss: f64,
    pub conservation_drift: f64,
    pub theta: Vec<f64>,
    pub learned: Vec<f64>,
    pub learned_init: Vec<f64>,
}

/// Per-method summary of a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    #[serde(rename = "D")]
    pub depth: u32,
    pub n: usize,
    pub median_gen_error: f64,
    /// Share of learned eigenvalue² (adaptive) or `θ²` (fixed) on components varying only in the active coordinates.
    pub axis_concentration: Option<f64>,
    pub eig_audit: Option<EigAuditReport>,
}

/// Everything a run produced, in memory.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub cells: Vec<CellResult>,
    pub rate_reports: Vec<RateReport>,
    pub method_summaries: Vec<MethodSummary>,
    pub eig_audits: Vec<(CellKey, EigAuditReport)>,
    pub certification: Vec<LemmaReport>,
    pub concentration: Vec<ConcentrationReport>,
    pub concentration_slopes: Vec<f64>,
    pub files: Vec<PathBuf>,
}

fn run_cell(plan: &Plan, method: MethodConfig, key: &CellKey) -> std::result::Result<CellResult, RunError> {
    let cfg = &plan.config;
    let spectrum = plan.spectrum.as_ref().unwrap();
    let truth = plan.truth.as_ref().unwrap();
    let t = cfg.training.as_ref().unwrap();
    let stream = cell_stream(key.n, key.rep);
    let data = match cfg.truth.as_ref().unwrap() {
        TruthConfig::Cosine => sample_dataset_with(cosine_target, spectrum.dim(), key.n, cfg.sigma, plan.seed, stream)?,
        TruthConfig::Gapped { .. } => sample_dataset(truth, spectrum, key.n, cfg.sigma, plan.seed, stream)?,
    };
    let eta = match t.eta {
        Some(e) => e,
        None => {
            let ymax = data.y.iter().fold(0.0f64, |m, y| m.max(y.abs()));
            let e = 0.05 / (max_eig(spectrum) + ymax * ymax);
            let guard = e * (max_eig(spectrum) + truth.sup_bound + cfg.sigma);
            if guard > 0.25 {
                return Err(RunError::Config(format!("default step size violates the stability guard ({guard:.4})")));
            }
            e
        }
    };
    let init = match method {
        MethodConfig::Fixed => Estimator::Fixed(FixedState::new(spectrum.eigenvalues())),
        MethodConfig::Adaptive { depth } => {
            let s = schedules(key.n, depth, 1.0, t.c_b)?;
            Estimator::Adaptive(init_state(spectrum, depth, s.b0.unwrap_or(1.0))?)
        }
    };
    let learned_init = init.learned();
    let train_cfg = TrainConfig {
        eta,
        max_steps: t.max_steps,
        snapshot_every: t.snapshot_every,
        stopping: t.stopping,
        record_components: t.record_components,
        check_descent: t.check_descent,
    };
    let out = train(&data, spectrum, truth, init, &train_cfg).map_err(|e| match e {
        Error::Divergence { .. } | Error::DescentViolation { .. } => RunError::Numerical { cell: key.clone(), source: e },
        other => RunError::Other(other),
    })?;
    if t.write_trajectories || cfg.kind == ExperimentKind::SingleRun {
        let dir = plan.out.join("trajectories");
        std::fs::create_dir_all(&dir).map_err(Error::from)?;
        let mut header = plan.header();
        header.push(format!("cell: {key}"));
        out.trajectory
            .write_csv(&dir.join(format!("{}_n{}_r{}.csv", key.method, key.n, key.rep)), &header)?;
    }
    let stop = out.trajectory.at_stop().clone();
    let theta = out.estimator.theta();
    Ok(CellResult {
        key: key.clone(),
        eta,
        stop_step: out.trajectory.stop_step,
        stop_time: out.trajectory.stop_step as f64 * eta,
        gen_error: gen_error(&theta, truth)?,
        train_loss: stop.train_loss,
        conservation_drift: out.estimator.drift(),
        learned: out.estimator.learned(),
        theta,
        learned_init,
    })
}

fn write_text(path: &Path, text: &str) -> std::result::Result<(), RunError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn write_json<T: Serialize>(plan: &Plan, path: &Path, body: &T) -> std::result::Result<(), RunError> {
    let doc = serde_json::json!({ "header": plan.header_json(), "data": body });
    let mut text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_error_curve(plan: &Plan, cells: &[CellResult], path: &Path) -> std::result::Result<(), RunError> {
    let mut buf = Vec::new();
    for line in plan.header() {
        writeln!(buf, "# {line}").map_err(Error::from)?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["method", "D", "n", "rep", "gen_error_at_stop"]).map_err(Error::from)?;
        for c in cells {
            w.write_record([
                c.key.method.clone(),
                c.key.depth.to_string(),
                c.key.n.to_string(),
                c.key.rep.to_string(),
                c.gen_error.to_string(),
            ])
            .map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
    }
    write_text(path, &String::from_utf8(buf).expect("csv output is utf-8"))
}

fn pool(workers: Option<usize>) -> std::result::Result<rayon::ThreadPool, RunError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        if w == 0 {
            return config_err("--workers must be positive");
        }
        b = b.num_threads(w);
    }
    b.build().map_err(|e| RunError::Config(e.to_string()))
}

/// Runs a resolved plan and writes its artifacts under `plan.out`.
pub fn execute(plan: &Plan, workers: Option<usize>) -> std::result::Result<RunOutcome, RunError> {
    let pool = pool(workers)?;
    std::fs::create_dir_all(&plan.out).map_err(Error::from)?;
    pool.install(|| match plan.config.kind {
        ExperimentKind::OnedimVerify => run_onedim(plan),
        ExperimentKind::ConcentrationAudit => run_concentration(plan),
        _ => run_training(plan),
    })
}

fn run_training(plan: &Plan) -> std::result::Result<RunOutcome, RunError> {
    let cfg = &plan.config;
    let method_of: BTreeMap<String, MethodConfig> = cfg.methods.iter().map(|m| (m.label(), *m)).collect();
    let results: Vec<std::result::Result<CellResult, RunError>> =
        plan.cells.par_iter().map(|k| run_cell(plan, method_of[&k.method], k)).collect();
    let mut cells = Vec::with_capacity(results.len());
    for r in results {
        cells.push(r?);
    }
    cells.sort_by(|a, b| a.key.cmp(&b.key));
    let mut out = RunOutcome::default();
    let curve_path = plan.out.join("error_curve.csv");
    write_error_curve(plan, &cells, &curve_path)?;
    out.files.push(curve_path);

    let spectrum = plan.spectrum.as_ref().unwrap();
    let truth = plan.truth.as_ref().unwrap();
    let (p, q) = match cfg.truth {
        Some(TruthConfig::Gapped { p, q, .. }) => (Some(p), Some(q)),
        _ => (None, None),
    };
    let per_method = |label: &str| -> Vec<(usize, Vec<f64>)> {
        cfg.n_grid
            .iter()
            .map(|&n| (n, cells.iter().filter(|c| c.key.method == label && c.key.n == n).map(|c| c.gen_error).collect()))
            .collect()
    };

    if cfg.kind == ExperimentKind::RateSweep {
        for m in &cfg.methods {
            let curve = ErrorCurve::new(m.label(), m.depth(), per_method(&m.label()))?;
            let fit = fit_rate(&curve)?;
            let theory = match (p, q) {
                (Some(p), Some(q)) => {
                    let r = theoretical_rates(RateForm::Misalignment { p, q })?;
                    Some(match m {
                        MethodConfig::Fixed => -r.fixed_exponent,
                        MethodConfig::Adaptive { .. } => -r.adaptive_exponent,
                    })
                }
                _ => None,
            };
            out.rate_reports.push(RateReport {
                method: m.label(),
                depth: m.depth(),
                p,
                q,
                fitted_slope: fit.slope,
                theoretical_slope: theory,
                r_squared: fit.r_squared,
                intercept: fit.intercept,
                n_grid: cfg.n_grid.clone(),
                reps: cfg.replications,
                medians: curve.medians().into_iter().map(|m| m.1).collect(),
            });
        }
        let path = plan.out.join("rate_report.json");
        write_json(plan, &path, &out.rate_reports)?;
        out.files.push(path);
    }

    let eig_params = cfg.eig_audit.unwrap_or_default();
    let active = cfg.geometry.as_ref().and_then(|g| g.d0).filter(|&d0| d0 < spectrum.dim());
    for m in &cfg.methods {
        for &n in &cfg.n_grid {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.key.method == m.label() && c.key.n == n).collect();
            let errs: Vec<f64> = group.iter().map(|c| c.gen_error).collect();
            let first = group[0];
            let axis = match (active, m) {
                (Some(d0), MethodConfig::Fixed) => Some(axis_concentration(&first.theta, spectrum, d0)?),
                (Some(d0), MethodConfig::Adaptive { .. }) => Some(axis_concentration(&first.learned, spectrum, d0)?),
                (None, _) => None,
            };
            let audit = match m {
                MethodConfig::Adaptive { depth } => Some(eig_learning_audit(
                    &first.learned,
                    &first.learned_init,
                    spectrum,
                    truth,
                    n,
                    *depth,
                    eig_params,
                )?),
                MethodConfig::Fixed => None,
            };
            if cfg.kind == ExperimentKind::EigAudit {
                if let MethodConfig::Adaptive { depth } = m {
                    for c in &group {
                        let rep = eig_learning_audit(&c.learned, &c.learned_init, spectrum, truth, n, *depth, eig_params)?;
                        out.eig_audits.push((c.key.clone(), rep));
                    }
                }
            }
            out.method_summaries.push(MethodSummary {
                method: m.label(),
                depth: m.depth(),
                n,
                median_gen_error: median(&errs),
                axis_concentration: axis,
                eig_audit: audit,
            });
        }
    }
    if cfg.kind == ExperimentKind::SingleRun {
        let path = plan.out.join("summary.json");
        write_json(plan, &path, &out.method_summaries)?;
        out.files.push(path);
    }
    if cfg.kind == ExperimentKind::EigAudit {
        let rows: Vec<serde_json::Value> = out
            .eig_audits
            .iter()
            .map(|(k, r)| serde_json::json!({"cell": k, "audit": r}))
            .collect();
        let path = plan.out.join("eig_audit.json");
        write_json(plan, &path, &serde_json::json!({"params": eig_params, "summaries": out.method_summaries, "cells": rows}))?;
        out.files.push(path);
    }
    out.cells = cells;
    Ok(out)
}

fn run_onedim(plan: &Plan) -> std::result::Result<RunOutcome, RunError> {
    let o = plan.config.onedim.as_ref().unwrap();
    let sweep = SweepConfig {
        tuples: o.tuples,
        seed: plan.seed,
        margin_steps: o.margin_steps,
        horizon_factor: o.horizon_factor,
        max_steps: SweepConfig::default().max_steps,
        min_log_ratio: o.min_log_ratio,
        max_b0: o.max_b0,
        dt_scale: 1.0,
    };
    let mut out = RunOutcome::default();
    for (lemma, depth) in sweep_list(o) {
        let rep = certify(lemma, depth, &sweep)?;
        let path = plan.out.join("certification").join(format!("{}_D{depth}.json", lemma.name()));
        write_json(plan, &path, &rep)?;
        out.files.push(path);
        out.certification.push(rep);
    }
    let path = plan.out.join("certification_summary.json");
    let rows: Vec<serde_json::Value> = out
        .certification
        .iter()
        .map(|r| {
            serde_json::json!({
                "lemma": r.lemma, "D": r.depth, "tuples": r.tuples, "violations": r.violations,
                "supported_tuples": r.supported_tuples, "supported_violations": r.supported_violations,
                "explicit_bound": r.explicit_bound, "max_ratio": r.max_ratio, "fitted_constant": r.fitted_constant,
            })
        })
        .collect();
    write_json(plan, &path, &rows)?;
    out.files.push(path);
    Ok(out)
}

fn run_concentration(plan: &Plan) -> std::result::Result<RunOutcome, RunError> {
    let cfg = &plan.config;
    let a = cfg.audit.as_ref().unwrap();
    let spectrum = plan.spectrum.as_ref().unwrap();
    let truth = plan.truth.as_ref().unwrap();
    if a.s_size > spectrum.len() {
        return config_err(format!("audit.s_size {} exceeds the spectrum size {}", a.s_size, spectrum.len()));
    }
    let probes = default_probes(spectrum, a.levels);
    let mut out = RunOutcome::default();
    for &n in &cfg.n_grid {
        let spec = AuditSpec {
            spectrum,
            truth,
            n,
            s_set: (0..a.s_size).collect(),
            reps: cfg.replications,
            sigma: cfg.sigma,
            seed: plan.seed,
            probes: probes.clone(),
        };
        out.concentration.push(concentration_audit(&spec)?);
    }
    if cfg.n_grid.len() >= 2 {
        let xs: Vec<f64> = cfg.n_grid.iter().map(|&n| n as f64).collect();
        for s in 0..4 {
            let ys: Vec<f64> = out.concentration.iter().map(|r| r.raw_quantiles[s]).collect();
            out.concentration_slopes.push(fit_power_law(&xs, &ys)?.slope);
        }
    }
    let common = out.concentration.iter().map(|r| r.fitted_constant).fold(0.0f64, f64::max);
    let path = plan.out.join("concentration.json");
    write_json(
        plan,
        &path,
        &serde_json::json!({
            "statistics": crate::sampling::STATISTICS,
            "common_constant": common,
            "raw_quantile_slopes": out.concentration_slopes,
            "reports": out.concentration,
        }),
    )?;
    out.files.push(path);
    Ok(out)
}

/// Loads, plans and runs a config file.
pub fn run_file(path: &Path, opts: &RunOptions) -> std::result::Result<RunOutcome, RunError> {
    let (cfg, hash) = ExperimentConfig::load(path)?;
    let mut opts = opts.clone();
    opts.config_hash.get_or_insert(hash);
    let plan = plan(cfg, &opts)?;
    execute(&plan, opts.workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
kind = "rate-sweep"
name = "tiny"
seed = 3
n_grid = [20, 40, 80, 160]
replications = 2
sigma = 0.1

[geometry]
d = 1

[truth]
kind = "gapped"
p = 1.0
q = 2.0
support = 6

[kernel]
kind = "power-law"
gamma = 2.0
dense = 8

[[methods]]
kind = "fixed"

[[methods]]
kind = "adaptive"
depth = 0

[training]
eta = 0.05
stopping = { kind = "theoretical-time", c_t = 1.0 }
"#;

    #[test]
    fn parses_and_plans() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let p = plan(cfg, &RunOptions::default()).unwrap();
        assert_eq!(p.cells.len(), 2 * 4 * 2);
        // Ranks 1..8 plus ℓ(j) = j² for j ≤ 6 → {9, 16, 25, 36}.
        assert_eq!(p.spectrum.as_ref().unwrap().len(), 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SMALL.replace("sigma = 0.1", "sigma = 0.1\nsigmaa = 2");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let text = SMALL.replace("dense = 8", "dense = 8\nextra = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn validation_failures_exit_with_2() {
        for (from, to) in [
            ("n_grid = [20, 40, 80, 160]", "n_grid = [40, 20, 80, 160]"),
            ("n_grid = [20, 40, 80, 160]", "n_grid = [20, 40, 80]"),
            ("replications = 2", "replications = 0"),
            ("eta = 0.05", "eta = 0.5"),
            ("c_t = 1.0", "c_t = -1.0"),
            ("q = 2.0", "q = 0.5"),
        ] {
            let cfg = ExperimentConfig::from_toml(&SMALL.replace(from, to)).unwrap();
            let err = plan(cfg, &RunOptions::default()).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{from} -> {to}");
        }
    }

    #[test]
    fn divergence_is_reported_with_its_cell() {
        let text = SMALL
            .replace("eta = 0.05", "eta = 40.0\ncheck_descent = false")
            .replace("sigma = 0.1", "sigma = 0.0")
            .replace("c_t = 1.0", "c_t = 400.0");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        // Skip the guard so the run itself blows up.
        let mut p = plan(ExperimentConfig::from_toml(SMALL).unwrap(), &RunOptions::default()).unwrap();
        p.config = cfg;
        p.out = std::env::temp_dir().join(format!("ak-diverge-{}", std::process::id()));
        let err = execute(&p, Some(1)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.record()["cell"]["method"].is_string());
        let _ = std::fs::remove_dir_all(&p.out);
    }
}
