//! Explicit-Euler trainers for the fixed-kernel and adaptive gradient flows.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::gen_error;
use crate::basis::OrderedSpectrum;
use crate::error::{invalid, Error, Result};
use crate::sampling::{Dataset, DesignMatrix, LeastSquares};
use crate::signals::CoefficientVector;

/// Parameters `(a, b, β)` of the model `θ = a ⊙ b^D ⊙ β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub a: Vec<f64>,
    /// Empty when `depth == 0`.
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
    pub depth: u32,
    pub lambda: Vec<f64>,
    pub b0: f64,
    pub frozen: Vec<bool>,
}

/// `a = √λ`, `β = 0`, `b = b₀` when `depth ≥ 1`.
pub fn init_state(spectrum: &OrderedSpectrum, depth: u32, b0: f64) -> Result<ModelState> {
    init_state_from(spectrum.eigenvalues(), depth, b0)
}

pub fn init_state_from(lambda: &[f64], depth: u32, b0: f64) -> Result<ModelState> {
    if depth >= 1 && !(b0 > 0.0 && b0.is_finite()) {
        return invalid(format!("b0 must be positive when depth ≥ 1, got {b0}"));
    }
    if lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return invalid("eigenvalues must be finite and non-negative");
    }
    let j = lambda.len();
    Ok(ModelState {
        a: lambda.iter().map(|l| l.sqrt()).collect(),
        b: if depth >= 1 { vec![b0; j] } else { Vec::new() },
        beta: vec![0.0; j],
        depth,
        lambda: lambda.to_vec(),
        b0: if depth >= 1 { b0 } else { 1.0 },
        frozen: lambda.iter().map(|&l| l == 0.0).collect(),
    })
}

impl ModelState {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    fn b_pow(&self, j: usize) -> f64 {
        if self.depth == 0 {
            1.0
        } else {
            self.b[j].powi(self.depth as i32)
        }
    }
}

/// `θ = a ⊙ b^D ⊙ β`.
pub fn effective_coeffs(state: &ModelState) -> Vec<f64> {
    (0..state.len()).map(|j| state.a[j] * state.b_pow(j) * state.beta[j]).collect()
}

/// `a ⊙ b^D`.
pub fn learned_eigs(state: &ModelState) -> Vec<f64> {
    (0..state.len()).map(|j| state.a[j] * state.b_pow(j)).collect()
}

fn divergence(detail: impl Into<String>) -> Error {
    Error::Divergence { step: 0, flow_time: 0.0, detail: detail.into() }
}

/// One simultaneous Euler step of the adaptive flow, from pre-step values.
pub fn gd_step_adaptive(state: &mut ModelState, delta: &[f64], eta: f64) -> Result<()> {
    if delta.len() != state.len() {
        return Err(Error::DimensionMismatch { expected: state.len(), got: delta.len() });
    }
    let d = state.depth;
    for j in 0..state.len() {
        if state.frozen[j] {
            continue;
        }
        let (a, beta, g) = (state.a[j], state.beta[j], delta[j]);
        if d == 0 {
            state.beta[j] = beta + eta * a * g;
            state.a[j] = a + eta * beta * g;
        } else {
            let b = state.b[j];
            let b_dm1 = b.powi(d as i32 - 1);
            let b_d = b_dm1 * b;
            state.beta[j] = beta + eta * a * b_d * g;
            state.a[j] = a + eta * b_d * beta * g;
            state.b[j] = b + eta * d as f64 * a * b_dm1 * beta * g;
        }
        if !(state.a[j].is_finite() && state.beta[j].is_finite() && (d == 0 || state.b[j].is_finite())) {
            return Err(divergence(format!("component {j} became non-finite")));
        }
    }
    Ok(())
}

/// `θ += η Λ ⊙ Δ`.
pub fn gd_step_fixed(theta: &mut [f64], lambda: &[f64], delta: &[f64], eta: f64) -> Result<()> {
    if theta.len() != lambda.len() || theta.len() != delta.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), got: delta.len().min(lambda.len()) });
    }
    for ((t, l), g) in theta.iter_mut().zip(lambda).zip(delta) {
        *t += eta * l * g;
        if !t.is_finite() {
            return Err(divergence("coefficient became non-finite"));
        }
    }
    Ok(())
}

/// `max_j |a_j² − β_j² − λ_j|`, and for `depth ≥ 1` also `|b_j² − Dβ_j² − b₀²|`.
pub fn conservation_drift(state: &ModelState) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..state.len() {
        if state.frozen[j] {
            continue;
        }
        let b2 = state.beta[j] * state.beta[j];
        worst = worst.max((state.a[j] * state.a[j] - b2 - state.lambda[j]).abs());
        if state.depth >= 1 {
            let c = state.b[j] * state.b[j] - state.depth as f64 * b2 - state.b0 * state.b0;
            worst = worst.max(c.abs());
        }
    }
    worst
}

/// Stopping time and initial depth scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stop_time: f64,
    pub b0: Option<f64>,
}

/// `t = c_t n^{(D+1)/(D+2)}`, `b₀ = c_b n^{-1/(2(D+2))}`.
pub fn schedules(n: usize, depth: u32, c_t: f64, c_b: f64) -> Result<Schedule> {
    if n == 0 {
        return invalid("n must be positive");
    }
    if !(c_t > 0.0) || !(c_b > 0.0) {
        return invalid(format!("schedule constants must be positive, got c_t = {c_t}, c_b = {c_b}"));
    }
    let nf = n as f64;
    let d = depth as f64;
    let stop_time = c_t * nf.powf((d + 1.0) / (d + 2.0));
    let b0 = (depth >= 1).then(|| c_b * nf.powf(-1.0 / (2.0 * (d + 2.0))));
    Ok(Schedule { stop_time, b0 })
}

/// Fixed kernel `θ` with eigenvalues `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedState {
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl FixedState {
    pub fn new(lambda: &[f64]) -> Self {
        Self { theta: vec![0.0; lambda.len()], lambda: lambda.to_vec() }
    }
}

/// Either trainer's state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Estimator {
    Fixed(FixedState),
    Adaptive(ModelState),
}

impl Estimator {
    pub fn len(&self) -> usize {
        match self {
            Estimator::Fixed(f) => f.theta.len(),
            Estimator::Adaptive(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Depth used by the stopping schedule; the fixed kernel counts as 0.
    pub fn depth(&self) -> u32 {
        match self {
            Estimator::Fixed(_) => 0,
            Estimator::Adaptive(s) => s.depth,
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            Estimator::Fixed(_) => "fixed",
            Estimator::Adaptive(_) => "adaptive",
        }
    }

    pub fn theta_into(&self, out: &mut [f64]) {
        match self {
            Estimator::Fixed(f) => out.copy_from_slice(&f.theta),
            Estimator::Adaptive(s) => {
                for j in 0..s.len() {
                    out[j] = s.a[j] * s.b_pow(j) * s.beta[j];
                }
            }
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.theta_into(&mut out);
        out
    }

    /// `a ⊙ b^D`; `√λ` for the fixed kernel.
    pub fn learned(&self) -> Vec<f64> {
        match self {
            Estimator::Fixed(f) => f.lambda.iter().map(|l| l.sqrt()).collect(),
            Estimator::Adaptive(s) => learned_eigs(s),
        }
    }

    pub fn step(&mut self, delta: &[f64], eta: f64) -> Result<()> {
        match self {
            Estimator::Fixed(f) => gd_step_fixed(&mut f.theta, &f.lambda, delta, eta),
            Estimator::Adaptive(s) => gd_step_adaptive(s, delta, eta),
        }
    }

    pub fn drift(&self) -> f64 {
        match self {
            Estimator::Fixed(_) => 0.0,
            Estimator::Adaptive(s) => conservation_drift(s),
        }
    }
}

/// When training stops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StoppingRule {
    /// Flow time `c_t n^{(D+1)/(D+2)}`.
    TheoreticalTime { c_t: f64 },
    /// Hold out a fraction of the data and stop at the minimum holdout loss.
    OracleEarlyStop { holdout: f64, patience: usize },
    /// Run `max_steps` steps.
    FixedSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_steps: u64,
    pub snapshot_every: u64,
    pub stopping: StoppingRule,
    /// Store `θ` and learned eigenvalues in every snapshot.
    pub record_components: bool,
    /// Abort when the training loss increases.
    pub check_descent: bool,
}

impl TrainConfig {
    pub fn new(eta: f64, stopping: StoppingRule) -> Self {
        Self { eta, max_steps: 10_000_000, snapshot_every: 100, stopping, record_components: false, check_descent: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub flow_time: f64,
    pub train_loss: f64,
    pub gen_error: f64,
    pub conservation_drift: f64,
    pub theta: Option<Vec<f64>>,
    pub learned: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub method: String,
    pub depth: u32,
    pub eta: f64,
    pub snapshots: Vec<Snapshot>,
    /// Step whose state is returned.
    pub stop_step: u64,
}

impl Trajectory {
    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }

    /// Snapshot at the stopping step.
    pub fn at_stop(&self) -> &Snapshot {
        self.snapshots.iter().find(|s| s.step == self.stop_step).unwrap_or_else(|| self.last())
    }

    /// CSV with columns `step, flow_time, train_loss, gen_error, conservation_drift`,
    /// plus `theta_j`/`learned_j` columns when components were recorded.
    pub fn write_csv(&self, path: &Path, header: &[String]) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in header {
            writeln!(file, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        let j = self.snapshots.first().and_then(|s| s.theta.as_ref()).map_or(0, |t| t.len());
        let mut cols: Vec<String> =
            ["step", "flow_time", "train_loss", "gen_error", "conservation_drift"].iter().map(|s| s.to_string()).collect();
        cols.extend((1..=j).map(|i| format!("theta_{i}")));
        cols.extend((1..=j).map(|i| format!("learned_{i}")));
        w.write_record(&cols)?;
        for s in &self.snapshots {
            let mut row = vec![
                s.step.to_string(),
                s.flow_time.to_string(),
                s.train_loss.to_string(),
                s.gen_error.to_string(),
                s.conservation_drift.to_string(),
            ];
            if j > 0 {
                row.extend(s.theta.iter().flatten().map(|v| v.to_string()));
                row.extend(s.learned.iter().flatten().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub trajectory: Trajectory,
    /// State at the stopping step.
    pub estimator: Estimator,
}

fn snapshot(est: &Estimator, step: u64, eta: f64, loss: f64, truth: &CoefficientVector, theta: &[f64], record: bool) -> Snapshot {
    Snapshot {
        step,
        flow_time: step as f64 * eta,
        train_loss: loss,
        gen_error: gen_error(theta, truth).expect("dimensions checked"),
        conservation_drift: est.drift(),
        theta: record.then(|| theta.to_vec()),
        learned: record.then(|| est.learned()),
    }
}

/// Runs gradient descent from `init` until the stopping rule fires.
pub fn train(
    data: &Dataset,
    spectrum: &OrderedSpectrum,
    truth: &CoefficientVector,
    init: Estimator,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let j = spectrum.len();
    if data.n() == 0 {
        return invalid("empty dataset");
    }
    if init.len() != j {
        return Err(Error::DimensionMismatch { expected: j, got: init.len() });
    }
    if truth.len() != j {
        return Err(Error::DimensionMismatch { expected: j, got: truth.len() });
    }
    if !(config.eta > 0.0 && config.eta.is_finite()) {
        return invalid(format!("step size must be positive, got {}", config.eta));
    }
    let eta = config.eta;
    let every = config.snapshot_every.max(1);

    let (train_set, holdout) = match config.stopping {
        StoppingRule::OracleEarlyStop { holdout, .. } => {
            if !(holdout > 0.0 && holdout < 1.0) {
                return invalid(format!("holdout fraction must lie in (0, 1), got {holdout}"));
            }
            let m = (holdout * data.n() as f64).ceil() as usize;
            if m >= data.n() {
                return invalid("holdout leaves no training data");
            }
            let cut = data.n() - m;
            let h = data.slice(cut..data.n());
            let he = DesignMatrix::build(spectrum, &h)?;
            (data.slice(0..cut), Some(LeastSquares::direct(&he, &h.y)))
        }
        _ => (data.clone(), None),
    };
    let design = DesignMatrix::build(spectrum, &train_set)?;
    let oracle = LeastSquares::new(&design, &train_set.y);

    let target_steps = match config.stopping {
        StoppingRule::TheoreticalTime { c_t } => {
            let s = schedules(data.n(), init.depth(), c_t, 1.0)?;
            ((s.stop_time / eta).round() as u64).min(config.max_steps)
        }
        _ => config.max_steps,
    };
    let patience = match config.stopping {
        StoppingRule::OracleEarlyStop { patience, .. } => patience.max(1),
        _ => usize::MAX,
    };

    let mut est = init;
    let mut theta = vec![0.0; j];
    let mut delta = vec![0.0; j];
    let mut snapshots = Vec::new();
    let mut prev_loss = f64::INFINITY;
    let mut best: Option<(f64, u64, Estimator)> = None;
    let mut since_best = 0usize;
    let mut stop_step = target_steps;
    let mut step = 0u64;
    loop {
        est.theta_into(&mut theta);
        let loss = oracle.evaluate(&theta, &mut delta);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, flow_time: step as f64 * eta, detail: "training loss is not finite".into() });
        }
        if config.check_descent && loss > prev_loss + 1e-12 * prev_loss.max(1.0) {
            return Err(Error::DescentViolation { step, before: prev_loss, after: loss });
        }
        prev_loss = loss;
        let at_end = step >= target_steps;
        if step.is_multiple_of(every) || at_end {
            snapshots.push(snapshot(&est, step, eta, loss, truth, &theta, config.record_components));
            if let Some(h) = &holdout {
                let hl = h.loss(&theta);
                if best.as_ref().is_none_or(|b| hl < b.0) {
                    best = Some((hl, step, est.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                if since_best >= patience {
                    break;
                }
            }
        }
        if at_end {
            break;
        }
        est.step(&delta, eta).map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { step: step + 1, flow_time: (step + 1) as f64 * eta, detail },
            other => other,
        })?;
        step += 1;
    }
    if let Some((_, s, e)) = best {
        stop_step = s;
        est = e;
    } else {
        stop_step = stop_step.min(step);
    }
    let trajectory = Trajectory { method: est.method_name().into(), depth: est.depth(), eta, snapshots, stop_step };
    Ok(TrainOutput { trajectory, estimator: est })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::sample_dataset;
    use approx::assert_relative_eq;

    #[test]
    fn init_examples() {
        let s = init_state_from(&[1.0, 0.25], 0, 0.0).unwrap();
        assert_eq!(s.a, vec![1.0, 0.5]);
        assert_eq!(s.beta, vec![0.0, 0.0]);
        let s = init_state_from(&[1.0, 0.25, 0.1], 2, 0.3).unwrap();
        assert_eq!(s.b, vec![0.3; 3]);
        assert_eq!(effective_coeffs(&s), vec![0.0; 3]);
        assert!(init_state_from(&[1.0], 1, 0.0).is_err());
        assert!(init_state_from(&[1.0], 1, -1.0).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let s = ModelState {
            a: vec![2.0],
            b: vec![3.0],
            beta: vec![0.5],
            depth: 1,
            lambda: vec![1.0],
            b0: 1.0,
            frozen: vec![false],
        };
        assert_eq!(effective_coeffs(&s), vec![3.0]);
        assert_eq!(learned_eigs(&s), vec![6.0]);
        let z = init_state_from(&[0.49], 0, 0.0).unwrap();
        assert_eq!(learned_eigs(&z), z.a);
    }

    #[test]
    fn euler_hand_example() {
        let mut s = init_state_from(&[1.0], 0, 0.0).unwrap();
        gd_step_adaptive(&mut s, &[1.0], 0.1).unwrap();
        assert_relative_eq!(s.beta[0], 0.1);
        assert_eq!(s.a[0], 1.0);
        let before = s.clone();
        gd_step_adaptive(&mut s, &[0.0], 0.1).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn fixed_step_examples() {
        let mut t = vec![0.0];
        gd_step_fixed(&mut t, &[1.0], &[1.0], 0.1).unwrap();
        assert_relative_eq!(t[0], 0.1);
        gd_step_fixed(&mut t, &[1.0], &[0.0], 0.1).unwrap();
        assert_relative_eq!(t[0], 0.1);
    }

    #[test]
    fn frozen_components_do_not_move() {
        let mut s = init_state_from(&[1.0, 0.0], 1, 0.5).unwrap();
        gd_step_adaptive(&mut s, &[1.0, 1.0], 0.1).unwrap();
        assert_eq!(s.beta[1], 0.0);
        assert_eq!(s.b[1], 0.5);
    }

    #[test]
    fn divergence_is_reported() {
        let mut s = init_state_from(&[1.0], 0, 0.0).unwrap();
        assert!(matches!(gd_step_adaptive(&mut s, &[f64::INFINITY], 0.1), Err(Error::Divergence { .. })));
    }

    #[test]
    fn schedule_examples() {
        let s = schedules(400, 0, 1.0, 1.0).unwrap();
        assert_relative_eq!(s.stop_time, 20.0, epsilon = 1e-12);
        assert!(s.b0.is_none());
        let s = schedules(400, 1, 1.0, 1.0).unwrap();
        assert_relative_eq!(s.stop_time, 54.288352, epsilon = 1e-5);
        assert_relative_eq!(s.b0.unwrap(), 0.368403, epsilon = 1e-6);
        assert!(schedules(10, 0, 0.0, 1.0).is_err());
    }

    #[test]
    fn fixed_equals_beta_coordinates() {
        let spectrum = OrderedSpectrum::sobolev(1, 5, 1.0).unwrap();
        let truth = CoefficientVector::exact((0..spectrum.len()).map(|i| 0.8f64.powi(i as i32)).collect()).unwrap();
        let data = sample_dataset(&truth, &spectrum, 50, 0.2, 3, 0).unwrap();
        let design = DesignMatrix::build(&spectrum, &data).unwrap();
        let oracle = LeastSquares::direct(&design, &data.y);
        let lam = spectrum.eigenvalues();
        let sq: Vec<f64> = lam.iter().map(|l| l.sqrt()).collect();
        let mut theta = vec![0.0; lam.len()];
        let mut beta = vec![0.0; lam.len()];
        let mut g = vec![0.0; lam.len()];
        for _ in 0..200 {
            oracle.evaluate(&theta, &mut g);
            gd_step_fixed(&mut theta, lam, &g, 0.05).unwrap();
            let mapped: Vec<f64> = beta.iter().zip(&sq).map(|(b, s)| b * s).collect();
            oracle.evaluate(&mapped, &mut g);
            for k in 0..beta.len() {
                beta[k] += 0.05 * sq[k] * g[k];
            }
        }
        for k in 0..theta.len() {
            assert_relative_eq!(theta[k], beta[k] * sq[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_noiseless_run_converges() {
        let spectrum = OrderedSpectrum::sobolev(1, 0, 1.0).unwrap();
        let truth = CoefficientVector::exact(vec![1.0]).unwrap();
        let data = sample_dataset(&truth, &spectrum, 10, 0.0, 0, 0).unwrap();
        let init = Estimator::Adaptive(init_state(&spectrum, 0, 1.0).unwrap());
        let mut cfg = TrainConfig::new(0.05, StoppingRule::FixedSteps);
        cfg.max_steps = 2000;
        let out = train(&data, &spectrum, &truth, init, &cfg).unwrap();
        assert!(out.trajectory.last().gen_error <= 1e-6);
        let steps: Vec<u64> = out.trajectory.snapshots.iter().map(|s| s.step).collect();
        assert!(steps.windows(2).all(|w| w[1] > w[0]));
        for s in &out.trajectory.snapshots {
            assert_eq!(s.flow_time, s.step as f64 * 0.05);
        }
    }

    #[test]
    fn early_stopping_returns_best_snapshot() {
        let spectrum = OrderedSpectrum::sobolev(1, 10, 1.0).unwrap();
        let truth = CoefficientVector::exact((0..spectrum.len()).map(|i| if i < 3 { 1.0 } else { 0.0 }).collect()).unwrap();
        let data = sample_dataset(&truth, &spectrum, 40, 1.0, 5, 0).unwrap();
        let init = Estimator::Fixed(FixedState::new(spectrum.eigenvalues()));
        let mut cfg = TrainConfig::new(0.05, StoppingRule::OracleEarlyStop { holdout: 0.25, patience: 50 });
        cfg.max_steps = 200_000;
        cfg.snapshot_every = 10;
        cfg.record_components = true;
        let out = train(&data, &spectrum, &truth, init, &cfg).unwrap();
        assert!(out.trajectory.stop_step < out.trajectory.last().step);
        let at_stop = out.trajectory.at_stop();
        assert_eq!(at_stop.step, out.trajectory.stop_step);
        assert_eq!(at_stop.theta.as_ref().unwrap(), &out.estimator.theta());
    }
}
