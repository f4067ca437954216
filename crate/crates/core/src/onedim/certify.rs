//! Randomized certification of the hitting-time bounds against the integrator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;
use crate::sampling::rng_for;

/// Claims checked by the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lemma {
    /// `|z − θ| ≤ 2κ` from below, any `κ`.
    AppBelowLargeKappa,
    /// `θ ≥ z/4` from below, `z ≥ 2κ`.
    AppBelowSmallKappa,
    /// From `θ(t₀) ≥ z`.
    AppAbove,
    /// From `z/4 ≤ θ(t₀) ≤ 3z`.
    FinalTime,
    /// `|z − θ| ≤ 4κ` from above (two-layer only).
    AppAboveLargeKappa,
    /// `|z − θ| ≤ κ + δ` from anywhere, `z ≥ 2κ` (two-layer only).
    ApproachSmallKappa,
    /// `θ ≥ −2κ` from below zero.
    RetractNeg,
    /// `|z − θ| ≤ 2max(|z|, 2κ)` from `θ ≤ 0` or `θ ≥ z`.
    Retracting,
    /// `|z − θ|` non-increasing while `≥ κ`, and trapped once `≤ κ`.
    Monotonicity,
    /// `|β|` and `|θ|` envelopes.
    ErrorControl,
    /// Hitting times of `ẋ ≥ kx^p` and `ẋ ≤ −kx^p`.
    PowerOde,
    /// Coupled components: sup error halves by the halving time.
    ShrinkageHalf,
    /// Coupled components: strong components reach `4ε`.
    ShrinkageFinal,
}

impl Lemma {
    pub const ALL: [Lemma; 13] = [
        Lemma::AppBelowLargeKappa,
        Lemma::AppBelowSmallKappa,
        Lemma::AppAbove,
        Lemma::FinalTime,
        Lemma::AppAboveLargeKappa,
        Lemma::ApproachSmallKappa,
        Lemma::RetractNeg,
        Lemma::Retracting,
        Lemma::Monotonicity,
        Lemma::ErrorControl,
        Lemma::PowerOde,
        Lemma::ShrinkageHalf,
        Lemma::ShrinkageFinal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Lemma::AppBelowLargeKappa => "app-below-large-kappa",
            Lemma::AppBelowSmallKappa => "app-below-small-kappa",
            Lemma::AppAbove => "app-above",
            Lemma::FinalTime => "final-time",
            Lemma::AppAboveLargeKappa => "app-above-large-kappa",
            Lemma::ApproachSmallKappa => "approach-small-kappa",
            Lemma::RetractNeg => "retract-neg",
            Lemma::Retracting => "retracting",
            Lemma::Monotonicity => "monotonicity",
            Lemma::ErrorControl => "error-control",
            Lemma::PowerOde => "power-ode",
            Lemma::ShrinkageHalf => "shrinkage-half",
            Lemma::ShrinkageFinal => "shrinkage-final",
        }
    }

    /// Whether the claim has explicit constants at this depth.
    pub fn has_explicit_bound(&self, depth: u32) -> bool {
        match self {
            Lemma::AppAboveLargeKappa | Lemma::ApproachSmallKappa | Lemma::ShrinkageHalf | Lemma::ShrinkageFinal => {
                depth == 0
            }
            Lemma::PowerOde => depth == 0,
            _ => true,
        }
    }

    /// Whether the sweep runs at this depth (constants are fitted when not explicit).
    pub fn applies(&self, depth: u32) -> bool {
        match self {
            Lemma::AppAboveLargeKappa | Lemma::ApproachSmallKappa => depth == 0,
            Lemma::PowerOde => depth == 0,
            _ => true,
        }
    }
}

/// Sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub tuples: usize,
    pub seed: u64,
    /// Allowed lateness in units of the integrator step.
    pub margin_steps: f64,
    /// Integrate up to this multiple of the bound past `t₀`.
    pub horizon_factor: f64,
    /// Tuples needing more steps are skipped and counted.
    pub max_steps: f64,
    /// Multilayer approach-from-below tuples need `ln(R/r) ≥ this`; `None` uses `1 + 1/D`,
    /// below which the stated bound shrinks to zero while the traversal time does not.
    pub min_log_ratio: Option<f64>,
    /// Largest `b₀` sampled for multilayer tuples.
    pub max_b0: f64,
    /// Multiplier on every integrator step, for refinement checks.
    pub dt_scale: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            tuples: 500,
            seed: 20240,
            margin_steps: 10.0,
            horizon_factor: 2.0,
            max_steps: 2.0e6,
            min_log_ratio: None,
            max_b0: 1.0,
            dt_scale: 1.0,
        }
    }
}

/// One evaluated tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleRecord {
    pub lambda: f64,
    pub z: f64,
    pub kappa: f64,
    pub b0: f64,
    pub family: String,
    pub t0: f64,
    pub theta_t0: f64,
    pub dt: f64,
    /// Bound on the elapsed time (or the envelope value for error control).
    pub bound: f64,
    /// Measured elapsed time (or the largest measured/envelope ratio).
    pub measured: f64,
    pub ok: bool,
    /// Inside the region where the stage-by-stage estimates add up to the bound.
    pub supported: bool,
    /// Tuple index, enough to regenerate it.
    pub index: u64,
}

/// Per-lemma certification outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub depth: u32,
    pub explicit_bound: bool,
    pub tuples: usize,
    pub skipped: usize,
    pub violations: usize,
    /// Tuples inside the region where the stage estimates add up to the bound.
    pub supported_tuples: usize,
    pub supported_violations: usize,
    /// Largest measured/bound over tuples with a positive bound.
    pub max_ratio: f64,
    pub median_ratio: f64,
    /// Smallest `bound + margin − measured`.
    pub min_margin: f64,
    /// Smallest multiplier of the unit-constant bound covering every tuple.
    pub fitted_constant: Option<f64>,
    pub worst: Option<TupleRecord>,
    pub notes: Vec<String>,
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Largest Jacobian scale over states with `|θ| ≤ theta_max` and `|g| ≤ g_max`.
fn stiffness(lambda: f64, b0: f64, depth: u32, theta_max: f64, g_max: f64) -> f64 {
    if depth == 0 {
        let beta2 = theta_max.max(lambda);
        return (lambda + 2.0 * beta2) + g_max;
    }
    let d = depth as f64;
    let beta = (theta_max / d.powf(d / 2.0)).powf(1.0 / (d + 2.0)).max(lambda.sqrt());
    let a = (lambda + beta * beta).sqrt();
    let b = (b0 * b0 + d * beta * beta).sqrt();
    let bd = b.powi(depth as i32);
    let c2 = (bd * beta).powi(2) + (d * a * b.powi(depth as i32 - 1) * beta).powi(2) + (a * bd).powi(2);
    c2 + g_max * (bd + d * a * b.powi(depth as i32 - 1) + a * bd / b.max(1e-300))
}

/// Pre-phase push `h = push` until `stop(θ)`; returns `(t₀, θ(t₀))`.
fn prephase<F: Fn(f64) -> bool>(base: &ScalarParams, push: f64, dt: f64, t_cap: f64, stop: F) -> Option<(f64, f64)> {
    let mut p = base.clone();
    p.h = Perturbation::Constant { value: push };
    let mut hit = None;
    drive(&p, t_cap, dt, |t, s| {
        let th = s.theta(p.depth);
        if stop(th) {
            hit = Some((t, th));
            return false;
        }
        true
    })
    .ok()?;
    hit
}

/// Direction in which the adversary pushes after `t₀`.
#[derive(Clone, Copy)]
enum Side {
    Down,
    Up,
}

fn family(rng: &mut ChaCha8Rng, kappa: f64, side: Side, time_scale: f64) -> (Perturbation, String) {
    let against = match side {
        Side::Down => -kappa,
        Side::Up => kappa,
    };
    let u: f64 = rng.random();
    if u < 0.4 {
        (Perturbation::Constant { value: against }, "adversarial-constant".into())
    } else if u < 0.55 {
        (Perturbation::Constant { value: -against }, "helpful-constant".into())
    } else if u < 0.75 {
        let half = log_uniform(rng, 1e-3, 0.5) * time_scale.max(1e-6);
        (Perturbation::Alternating { amp: against, half_period: half }, "alternating".into())
    } else if u < 0.85 {
        (Perturbation::Decaying { amp: against }, "decaying".into())
    } else {
        let pieces = rng.random_range(2..8);
        let mut segs = Vec::with_capacity(pieces);
        let mut t = 0.0;
        for _ in 0..pieces {
            segs.push((t, kappa * rng.random_range(-1.0..1.0)));
            t += log_uniform(rng, 1e-3, 0.5) * time_scale.max(1e-6);
        }
        (Perturbation::Piecewise { segments: segs }, "random-piecewise".into())
    }
}

struct Case {
    params: ScalarParams,
    t0: f64,
    predicate: HitPredicate,
    dt: f64,
    family: String,
    kappa: f64,
    /// Bound as a function of `θ(t₀)`; `None` marks an inadmissible start.
    bound: Box<dyn Fn(f64) -> Option<f64> + Send + Sync>,
    /// Whether the chain of estimates behind the bound actually yields it here.
    supported: bool,
}

/// Sum of the stage-by-stage time estimates behind the multilayer approach
/// bound when the drift `z − θ + h` stays above `drive`.
fn multi_stage_sum(lambda: f64, b0: f64, depth: u32, drive: f64) -> f64 {
    let d = depth as f64;
    let (r, big_r) = radii(lambda, b0, depth);
    let unit = 1.0 / (d.powf(d / 2.0) * drive * big_r.powi(depth as i32));
    let escape = 2.0 * r / (drive * lambda.sqrt() * b0.powi(depth as i32));
    2.0 * unit / d + 2.0 * (big_r / r).ln() * unit + escape
}

fn combine(pre: f64, t0: f64, then: Perturbation) -> Perturbation {
    if t0 <= 0.0 {
        then
    } else {
        Perturbation::Sequence { first: Box::new(Perturbation::Constant { value: pre }), switch: t0, then: Box::new(then) }
    }
}

fn base_params(rng: &mut ChaCha8Rng, depth: u32, cfg: &SweepConfig) -> ScalarParams {
    let lambda = log_uniform(rng, 1e-6, 1.0);
    let z = log_uniform(rng, 1e-3, 1.0);
    let b0 = if depth >= 1 { log_uniform(rng, 0.1, cfg.max_b0) } else { 1.0 };
    ScalarParams { lambda, b0, depth, z, h: Perturbation::Zero }
}

fn pre_dt(p: &ScalarParams, theta_max: f64, g_max: f64) -> f64 {
    (0.05 / stiffness(p.lambda, p.b0, p.depth, theta_max, g_max)).min(1.0)
}

/// Drives `θ` below `-target` with a negative push; returns `(push, t₀, θ(t₀))`.
fn start_negative(p: &ScalarParams, target: f64, cfg: &SweepConfig) -> Option<(f64, f64, f64, f64)> {
    let push = -(p.z + 2.0 * target);
    let dt = pre_dt(p, 2.0 * target + p.z, p.z + 2.0 * target + 2.0 * target);
    let (t0, th) = prephase(p, push, dt, dt * cfg.max_steps * 0.25, |th| th <= -target)?;
    Some((push, t0, th, dt))
}

fn start_above(p: &ScalarParams, target: f64, cfg: &SweepConfig) -> Option<(f64, f64, f64, f64)> {
    let push = 2.0 * (target - p.z) + 0.1 * p.z.abs();
    let dt = pre_dt(p, target * 1.5, push + target);
    let (t0, th) = prephase(p, push, dt, dt * cfg.max_steps * 0.25, |th| th >= target)?;
    Some((push, t0, th, dt))
}

fn start_between(p: &ScalarParams, target: f64, cfg: &SweepConfig) -> Option<(f64, f64, f64, f64)> {
    if target <= p.z {
        let dt = pre_dt(p, p.z, p.z);
        let (t0, th) = prephase(p, 0.0, dt, dt * cfg.max_steps * 0.25, |th| th >= target)?;
        Some((0.0, t0, th, dt))
    } else {
        start_above(p, target, cfg)
    }
}

fn build_case(lemma: Lemma, depth: u32, rng: &mut ChaCha8Rng, cfg: &SweepConfig) -> Option<Case> {
    let mut p = base_params(rng, depth, cfg);
    let z = p.z;
    let (lambda, b0) = (p.lambda, p.b0);
    let d = depth;
    match lemma {
        Lemma::AppBelowLargeKappa | Lemma::AppBelowSmallKappa => {
            let kappa = if lemma == Lemma::AppBelowLargeKappa {
                log_uniform(rng, z / 20.0, 2.0 * z)
            } else {
                log_uniform(rng, z / 200.0, z / 2.0)
            };
            let mut supported = true;
            if depth >= 1 {
                let mb = bound_multi_app_below(lambda, b0, d, kappa).ok()?;
                if mb.degenerate || cfg.min_log_ratio.is_some_and(|m| mb.log_ratio < m) {
                    return None;
                }
                let drive = if lemma == Lemma::AppBelowLargeKappa { kappa } else { z / 4.0 };
                let claimed = if lemma == Lemma::AppBelowLargeKappa {
                    mb.time
                } else {
                    bound_multi_sig_below(lambda, b0, d, z).ok()?.time
                };
                supported = multi_stage_sum(lambda, b0, d, drive) <= claimed;
            }
            let (pre, t0, _th0, _) = if rng.random::<f64>() < 0.5 {
                (0.0, 0.0, 0.0, 0.0)
            } else {
                start_negative(&p, log_uniform(rng, 0.05, 3.0) * z, cfg)?
            };
            let scale = if lemma == Lemma::AppBelowLargeKappa { 1.0 / kappa } else { 4.0 / z };
            let (then, fam) = family(rng, kappa, Side::Down, scale);
            p.h = combine(pre, t0, then);
            let (pred, bound): (HitPredicate, Box<dyn Fn(f64) -> Option<f64> + Send + Sync>) =
                if lemma == Lemma::AppBelowLargeKappa {
                    (
                        HitPredicate::DistanceAtMost(2.0 * kappa),
                        Box::new(move |th0| {
                            (th0 <= z).then(|| {
                                if d == 0 {
                                    bound_app_below(lambda, z, kappa, z - th0)
                                } else {
                                    bound_multi_app_below(lambda, b0, d, kappa).unwrap().time
                                }
                            })
                        }),
                    )
                } else {
                    (
                        HitPredicate::AtLeast(z / 4.0),
                        Box::new(move |th0| {
                            (th0 <= z).then(|| {
                                if d == 0 {
                                    bound_sig_below(lambda, z, z - th0)
                                } else {
                                    bound_multi_sig_below(lambda, b0, d, z).unwrap().time
                                }
                            })
                        }),
                    )
                };
            let theta_max = (z - _th0).abs() + z + 2.0 * kappa;
            let dt = pre_dt(&p, theta_max, theta_max + kappa);
            Some(Case { params: p, t0, predicate: pred, dt, family: fam, kappa, bound, supported })
        }
        Lemma::AppAbove | Lemma::AppAboveLargeKappa => {
            let kappa = log_uniform(rng, z / 20.0, 2.0 * z);
            let m = z.max(2.0 * kappa);
            let target = z + log_uniform(rng, 0.01, 30.0) * m;
            let (pre, t0, th0, _) = start_above(&p, target, cfg)?;
            let (tb, radius) = if d == 0 { bound_app_above(z, kappa) } else { bound_multi_app_above(d, z, kappa).ok()? };
            let (then, fam) = family(rng, kappa, Side::Up, tb);
            p.h = combine(pre, t0, then);
            let dt = pre_dt(&p, th0 * 1.2, th0 + kappa);
            if lemma == Lemma::AppAbove {
                Some(Case {
                    params: p,
                    t0,
                    predicate: HitPredicate::DistanceAtMost(radius),
                    dt,
                    family: fam,
                    kappa,
                    bound: Box::new(move |th0| (th0 >= z).then_some(tb)),
                    supported: true,
                })
            } else {
                Some(Case {
                    params: p,
                    t0,
                    predicate: HitPredicate::DistanceAtMost(4.0 * kappa),
                    dt,
                    family: fam,
                    kappa,
                    bound: Box::new(move |th0| (th0 >= z).then(|| bound_app_above_large_kappa(kappa, (z - th0).abs()))),
                    supported: true,
                })
            }
        }
        Lemma::FinalTime => {
            let kappa = log_uniform(rng, z / 200.0, 2.0 * z);
            let delta = log_uniform(rng, 1e-3, 1.0) * z;
            let target = rng.random_range(0.25 * z..3.0 * z);
            let (pre, t0, th0, _) = start_between(&p, target, cfg)?;
            let dev = (z - th0).abs();
            let tb = if d == 0 {
                bound_final_time(z, kappa, delta, dev)
            } else {
                bound_multi_final_time(d, z, kappa, delta, dev).ok()?
            };
            let side = if th0 <= z { Side::Down } else { Side::Up };
            let (then, fam) = family(rng, kappa, side, tb.max(1.0 / z));
            p.h = combine(pre, t0, then);
            let dt = pre_dt(&p, 3.5 * z, 3.0 * z + kappa);
            Some(Case {
                params: p,
                t0,
                predicate: HitPredicate::DistanceAtMost(kappa + delta),
                dt,
                family: fam,
                kappa,
                bound: Box::new(move |th0| {
                    (th0 >= 0.25 * z && th0 <= 3.0 * z).then(|| {
                        let dev = (z - th0).abs();
                        if d == 0 {
                            bound_final_time(z, kappa, delta, dev)
                        } else {
                            bound_multi_final_time(d, z, kappa, delta, dev).unwrap()
                        }
                    })
                }),
                supported: true,
            })
        }
        Lemma::ApproachSmallKappa => {
            let kappa = log_uniform(rng, z / 200.0, z / 2.0);
            let delta = log_uniform(rng, 1e-3, 1.0) * z;
            let u: f64 = rng.random();
            let (pre, t0, th0, _) = if u < 0.4 {
                (0.0, 0.0, 0.0, 0.0)
            } else if u < 0.7 {
                start_negative(&p, log_uniform(rng, 0.05, 3.0) * z, cfg)?
            } else {
                start_above(&p, z * (1.0 + log_uniform(rng, 0.01, 10.0)), cfg)?
            };
            let side = if th0 <= z { Side::Down } else { Side::Up };
            let (then, fam) = family(rng, kappa, side, 4.0 / z);
            p.h = combine(pre, t0, then);
            let theta_max = th0.abs() + 2.0 * z;
            let dt = pre_dt(&p, theta_max, theta_max + kappa);
            Some(Case {
                params: p,
                t0,
                predicate: HitPredicate::DistanceAtMost(kappa + delta),
                dt,
                family: fam,
                kappa,
                bound: Box::new(move |th0| Some(bound_approach_small_kappa(lambda, z, delta, (z - th0).abs()))),
                supported: true,
            })
        }
        Lemma::RetractNeg | Lemma::Retracting => {
            let kappa = log_uniform(rng, z / 20.0, 2.0 * z);
            let from_above = lemma == Lemma::Retracting && rng.random::<f64>() < 0.5;
            let (pre, t0, th0, _) = if from_above {
                start_above(&p, z + log_uniform(rng, 0.01, 30.0) * z.max(2.0 * kappa), cfg)?
            } else {
                start_negative(&p, 2.0 * kappa * log_uniform(rng, 1.0, 30.0), cfg)?
            };
            let tb = if d == 0 { bound_retract_neg(kappa) } else { bound_multi_retract(d, kappa).ok()? };
            let side = if from_above { Side::Up } else { Side::Down };
            let (then, fam) = family(rng, kappa, side, tb);
            p.h = combine(pre, t0, then);
            let theta_max = th0.abs() + z + 2.0 * kappa;
            let dt = pre_dt(&p, theta_max, theta_max + kappa);
            let (pred, bound): (HitPredicate, Box<dyn Fn(f64) -> Option<f64> + Send + Sync>) =
                if lemma == Lemma::RetractNeg {
                    (HitPredicate::AtLeast(-2.0 * kappa), Box::new(move |_| Some(tb)))
                } else {
                    (
                        HitPredicate::DistanceAtMost(2.0 * z.abs().max(2.0 * kappa)),
                        Box::new(move |th0| (th0 <= 0.0 || th0 >= z).then_some(tb)),
                    )
                };
            Some(Case { params: p, t0, predicate: pred, dt, family: fam, kappa, bound, supported: true })
        }
        _ => None,
    }
}

fn run_case(case: &Case, cfg: &SweepConfig) -> Option<TupleRecord> {
    let p = &case.params;
    let dt = case.dt * cfg.dt_scale;
    // Probe θ(t₀) once to size the horizon.
    let probe = measure_settle(p, case.predicate, case.t0, case.t0, dt).ok()?;
    let b = (case.bound)(probe.theta_from)?;
    let horizon = case.t0 + (cfg.horizon_factor * b).max(b + 100.0 * dt);
    if (horizon / dt) > cfg.max_steps / cfg.dt_scale.min(1.0) {
        return None;
    }
    let settle = measure_settle(p, case.predicate, case.t0, horizon, dt).ok()?;
    let bound = (case.bound)(settle.theta_from)?;
    let measured = settle.settle_time.map_or(f64::INFINITY, |t| t - case.t0);
    let ok = measured <= bound + cfg.margin_steps * dt;
    Some(TupleRecord {
        lambda: p.lambda,
        z: p.z,
        kappa: case.kappa,
        b0: p.b0,
        family: case.family.clone(),
        t0: case.t0,
        theta_t0: settle.theta_from,
        dt,
        bound,
        measured,
        ok,
        supported: case.supported,
        index: 0,
    })
}

fn monotonicity_tuple(depth: u32, rng: &mut ChaCha8Rng, cfg: &SweepConfig) -> Option<TupleRecord> {
    let mut p = base_params(rng, depth, cfg);
    let z = p.z;
    let kappa = log_uniform(rng, z / 100.0, 2.0 * z);
    let u: f64 = rng.random();
    let (pre, t0, th0, _) = if u < 0.3 {
        (0.0, 0.0, 0.0, 0.0)
    } else if u < 0.65 {
        start_negative(&p, log_uniform(rng, 0.05, 3.0) * z, cfg)?
    } else {
        start_above(&p, z * (1.0 + log_uniform(rng, 0.01, 10.0)), cfg)?
    };
    let side = if th0 <= z { Side::Down } else { Side::Up };
    let scale = if depth == 0 { 1.0 / kappa } else { bound_multi_retract(depth, kappa).ok()? };
    let (then, fam) = family(rng, kappa, side, scale);
    p.h = combine(pre, t0, then);
    let theta_max = th0.abs() + 2.0 * z + 2.0 * kappa;
    let dt = pre_dt(&p, theta_max, theta_max + kappa) * cfg.dt_scale;
    let horizon = t0 + 3.0 * scale.max(4.0 / z);
    if horizon / dt > cfg.max_steps {
        return None;
    }
    let tol = 1e-9 * (1.0 + z + th0.abs());
    let mut prev: Option<f64> = None;
    let mut trapped = false;
    let mut worst = 0.0f64;
    let mut theta_t0 = f64::NAN;
    drive(&p, horizon, dt, |t, s| {
        if t + 1e-12 * dt < t0 {
            return true;
        }
        let dist = (z - s.theta(depth)).abs();
        if theta_t0.is_nan() {
            theta_t0 = s.theta(depth);
        }
        if let Some(pd) = prev {
            if pd >= kappa {
                worst = worst.max(dist - pd);
            }
        }
        if trapped {
            worst = worst.max(dist - kappa);
        }
        if dist <= kappa {
            trapped = true;
        }
        prev = Some(dist);
        true
    })
    .ok()?;
    Some(TupleRecord {
        lambda: p.lambda,
        z,
        kappa,
        b0: p.b0,
        family: fam,
        t0,
        theta_t0,
        dt,
        bound: tol,
        measured: worst,
        ok: worst <= tol,
        supported: true,
        index: 0,
    })
}

fn error_control_tuple(depth: u32, rng: &mut ChaCha8Rng, cfg: &SweepConfig) -> Option<TupleRecord> {
    let mut p = base_params(rng, depth, cfg);
    let z = if rng.random::<f64>() < 0.5 { p.z } else { -p.z };
    p.z = z;
    let amp = log_uniform(rng, 1e-3, 2.0) * z.abs().max(1e-3);
    let pieces = rng.random_range(1..6);
    let horizon = log_uniform(rng, 1.0, 200.0) / (z.abs() + amp);
    let mut segs = Vec::new();
    let mut t = 0.0;
    for _ in 0..pieces {
        segs.push((t, amp * rng.random_range(-1.0..1.0)));
        t += horizon / pieces as f64;
    }
    p.h = Perturbation::Piecewise { segments: segs };
    let theta_max = 4.0 * (z.abs() + amp);
    let dt = pre_dt(&p, theta_max, 2.0 * theta_max) * cfg.dt_scale;
    if horizon / dt > cfg.max_steps {
        return None;
    }
    let mut worst_ratio = 0.0f64;
    let mut integral = 0.0;
    let mut last_t = 0.0;
    let mut checked = 0usize;
    drive(&p, horizon, dt, |t, s| {
        integral += (p.h.value(0.5 * (t + last_t)).abs() + z.abs()) * (t - last_t);
        last_t = t;
        let th = s.theta(depth).abs();
        if depth == 0 {
            let env = bound_error_control(p.lambda, integral, 0, 1.0);
            worst_ratio = worst_ratio.max(s.beta.abs() / env.beta.unwrap()).max(th / env.theta.unwrap());
            checked += 1;
        } else {
            let env = bound_error_control(p.lambda, integral, depth, p.b0);
            if env.early_regime && t > 0.0 {
                let early = bound_error_control_early(p.lambda, integral, depth, p.b0);
                worst_ratio = worst_ratio.max(th / early);
                checked += 1;
            }
            if env.condition_ok {
                worst_ratio = worst_ratio.max(s.beta.abs() / env.beta.unwrap()).max(th / env.theta.unwrap());
                checked += 1;
            }
        }
        true
    })
    .ok()?;
    if checked == 0 {
        return None;
    }
    Some(TupleRecord {
        lambda: p.lambda,
        z,
        kappa: amp,
        b0: p.b0,
        family: "random-piecewise".into(),
        t0: 0.0,
        theta_t0: 0.0,
        dt,
        bound: 1.0,
        measured: worst_ratio,
        ok: worst_ratio <= 1.0 + 1e-9,
        supported: true,
        index: 0,
    })
}

/// `ẋ = s·(k x^p + g(t))` by RK4 with relative step control; returns the
/// first time `x` crosses `level`.
#[allow(clippy::too_many_arguments)]
fn power_hit(k: f64, p: f64, x0: f64, g: &[(f64, f64)], sign: f64, level: f64, t_cap: f64, rel: f64) -> Option<(f64, f64)> {
    let gval = |t: f64| g.iter().rev().find(|(s, _)| t >= *s).map_or(0.0, |(_, v)| *v);
    let f = |t: f64, x: f64| sign * (k * x.max(0.0).powf(p) + gval(t));
    let mut t = 0.0;
    let mut x = x0;
    let mut max_dt = 0.0f64;
    while t < t_cap {
        let rate = f(t, x).abs().max(1e-300);
        let mut dt = (rel * x.abs() / rate).min(t_cap - t).max(1e-15);
        if let Some((b, _)) = g.iter().find(|(s, _)| *s > t) {
            dt = dt.min(b - t);
        }
        let k1 = f(t, x);
        let k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1);
        let k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2);
        let k4 = f(t + dt * (1.0 - 1e-12), x + dt * k3);
        let nx = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        max_dt = max_dt.max(dt);
        let crossed = if sign > 0.0 { nx >= level } else { nx <= level };
        if crossed || !nx.is_finite() {
            let frac = if nx.is_finite() && nx != x { ((level - x) / (nx - x)).clamp(0.0, 1.0) } else { 1.0 };
            return Some((t + frac * dt, dt));
        }
        x = nx;
        t += dt;
    }
    None
}

fn power_tuple(rng: &mut ChaCha8Rng, cfg: &SweepConfig) -> Option<TupleRecord> {
    let k = log_uniform(rng, 1e-2, 1e2);
    let p = rng.random_range(1.1..4.0);
    let x0 = log_uniform(rng, 1e-2, 1e1);
    let pieces = rng.random_range(1..5);
    let growing = rng.random::<f64>() < 0.5;
    let bound = if growing {
        bound_power_ode(k, p, x0).ok()?.bound
    } else {
        0.0
    };
    let level = if growing { x0 * log_uniform(rng, 2.0, 1e6) } else { x0 * log_uniform(rng, 1e-4, 0.5) };
    let bound = if growing { bound } else { bound_power_ode_decay(k, p, level).ok()? };
    let mut g = Vec::new();
    let mut t = 0.0;
    for _ in 0..pieces {
        g.push((t, log_uniform(rng, 1e-6, 1.0) * k * x0.powf(p)));
        t += bound * log_uniform(rng, 0.01, 0.5);
    }
    let (hit, dt) = power_hit(k, p, x0, &g, if growing { 1.0 } else { -1.0 }, level, 4.0 * bound, 0.002 * cfg.dt_scale)?;
    Some(TupleRecord {
        lambda: k,
        z: p,
        kappa: x0,
        b0: level,
        family: if growing { "growth".into() } else { "decay".into() },
        t0: 0.0,
        theta_t0: x0,
        dt,
        bound,
        measured: hit,
        ok: hit <= bound + 10.0 * dt,
        supported: true,
        index: 0,
    })
}

/// Coupled components with worst-case cross-talk `h_k = −sgn(θ*_k − θ_k)(η‖θ* − θ‖∞ + ε)`.
fn shrinkage_tuple(lemma: Lemma, depth: u32, rng: &mut ChaCha8Rng, cfg: &SweepConfig) -> Option<TupleRecord> {
    let k = rng.random_range(2..7);
    let lambdas: Vec<f64> = (0..k).map(|_| log_uniform(rng, 1e-4, 1.0)).collect();
    let targets: Vec<f64> = (0..k)
        .map(|_| {
            let m = log_uniform(rng, 0.02, 1.0);
            if rng.random::<f64>() < 0.5 {
                m
            } else {
                -m
            }
        })
        .collect();
    let b0 = if depth >= 1 { log_uniform(rng, 0.1, cfg.max_b0) } else { 1.0 };
    let m = targets.iter().fold(0.0f64, |a, t| a.max(t.abs()));
    let eta = 0.125;
    let eps = if lemma == Lemma::ShrinkageHalf {
        eta * m * log_uniform(rng, 1e-3, 1.0)
    } else {
        eta * m * log_uniform(rng, 1.0, 2.0)
    };
    let random_weights = rng.random::<f64>() < 0.3;
    let weights: Vec<f64> = (0..k).map(|_| if random_weights { rng.random_range(0.0..1.0) } else { 1.0 }).collect();
    let unit = ShrinkageConstants { c1: 1.0, c2: 1.0, c3: 1.0, c4: 1.0, c5: 1.0 };

    // Bound per watched quantity and the predicate radius.
    let mut watched: Vec<(Option<usize>, f64, f64)> = Vec::new();
    if lemma == Lemma::ShrinkageHalf {
        let b = if depth == 0 {
            bound_half(m, &lambdas, &targets).ok()?
        } else {
            bound_multi_half(&unit, m, &lambdas, b0, depth).ok()?
        };
        watched.push((None, b, 0.5 * m));
    } else {
        for i in 0..k {
            if targets[i].abs() >= 4.0 * eps {
                let b = if depth == 0 {
                    bound_fin(targets[i], lambdas[i], m, eps).ok()?
                } else {
                    bound_multi_fin(&unit, targets[i], lambdas[i], b0, depth, eps).ok()?
                };
                watched.push((Some(i), b, 4.0 * eps));
            }
        }
        if watched.is_empty() {
            return None;
        }
    }
    let largest_bound = watched.iter().map(|w| w.1).fold(0.0f64, f64::max);
    let theta_max = 2.0 * m;
    let dt = lambdas
        .iter()
        .map(|&l| 0.05 / stiffness(l, b0, depth, theta_max, theta_max + m))
        .fold(1.0f64, f64::min)
        * cfg.dt_scale;
    // Explicit bounds fix the horizon; fitted ones run until every watched
    // quantity has settled and then as long again.
    let mut t_end = if depth == 0 { largest_bound * cfg.horizon_factor.max(1.0) } else { f64::INFINITY };
    let cap = dt * cfg.max_steps;
    if depth == 0 && t_end > cap {
        return None;
    }
    const K: usize = 6;
    let d = depth as i32;
    let mut state = [[0.0f64; K]; 3];
    for i in 0..k {
        state[0][i] = lambdas[i].sqrt();
        state[1][i] = b0;
    }
    let theta_of = |s: &[[f64; K]; 3], i: usize| s[0][i] * if depth == 0 { 1.0 } else { s[1][i].powi(d) } * s[2][i];
    let deriv = |s: &[[f64; K]; 3]| -> [[f64; K]; 3] {
        let mut th = [0.0; K];
        let mut sup = 0.0f64;
        for i in 0..k {
            th[i] = theta_of(s, i);
            sup = sup.max((targets[i] - th[i]).abs());
        }
        let mut out = [[0.0; K]; 3];
        for i in 0..k {
            let e = targets[i] - th[i];
            let g = e - e.signum() * weights[i] * (eta * sup + eps);
            let (a, b, beta) = (s[0][i], s[1][i], s[2][i]);
            if depth == 0 {
                out[0][i] = beta * g;
                out[2][i] = a * g;
            } else {
                let bdm1 = b.powi(d - 1);
                let bd = bdm1 * b;
                out[0][i] = bd * beta * g;
                out[1][i] = depth as f64 * a * bdm1 * beta * g;
                out[2][i] = a * bd * g;
            }
        }
        out
    };
    let axpy = |x: &[[f64; K]; 3], dx: &[[f64; K]; 3], h: f64| {
        let mut o = *x;
        for r in 0..3 {
            for i in 0..k {
                o[r][i] += h * dx[r][i];
            }
        }
        o
    };
    let mut settle: Vec<Option<f64>> = vec![None; watched.len()];
    let mut t = 0.0;
    while t < t_end {
        if t > cap {
            return None;
        }
        let k1 = deriv(&state);
        let k2 = deriv(&axpy(&state, &k1, dt / 2.0));
        let k3 = deriv(&axpy(&state, &k2, dt / 2.0));
        let k4 = deriv(&axpy(&state, &k3, dt));
        for r in 0..3 {
            for i in 0..k {
                state[r][i] += dt / 6.0 * (k1[r][i] + 2.0 * k2[r][i] + 2.0 * k3[r][i] + k4[r][i]);
            }
        }
        t += dt;
        if !state.iter().flatten().all(|v| v.is_finite()) {
            return None;
        }
        for (w, s) in watched.iter().zip(settle.iter_mut()) {
            let err = match w.0 {
                None => (0..k).map(|i| (targets[i] - theta_of(&state, i)).abs()).fold(0.0f64, f64::max),
                Some(i) => (targets[i] - theta_of(&state, i)).abs(),
            };
            if err > w.2 {
                *s = None;
            } else if s.is_none() {
                *s = Some(t);
            }
        }
        if depth >= 1 && t_end.is_infinite() && settle.iter().all(|s| s.is_some()) {
            let last = settle.iter().map(|s| s.unwrap()).fold(0.0f64, f64::max);
            t_end = (2.0 * last).max(last + 100.0 * dt);
        }
    }
    // Report the tuple by its worst watched quantity.
    let mut worst: Option<(f64, f64, f64)> = None;
    for (w, s) in watched.iter().zip(&settle) {
        let measured = s.unwrap_or(f64::INFINITY);
        let ratio = if w.1 > 0.0 { measured / w.1 } else { f64::INFINITY };
        if worst.is_none_or(|x| ratio > x.2) {
            worst = Some((w.1, measured, ratio));
        }
    }
    let (bound, measured, _) = worst?;
    Some(TupleRecord {
        lambda: lambdas.iter().cloned().fold(f64::INFINITY, f64::min),
        z: m,
        kappa: eps,
        b0,
        family: if random_weights { "weighted-adversarial".into() } else { "adversarial".into() },
        t0: 0.0,
        theta_t0: 0.0,
        dt,
        bound,
        measured,
        ok: depth >= 1 || measured <= bound + 10.0 * dt,
        supported: true,
        index: 0,
    })
}

/// Regenerates and evaluates tuple `index` of a sweep.
pub fn tuple(lemma: Lemma, depth: u32, index: u64, cfg: &SweepConfig) -> Option<TupleRecord> {
    let mut rng = rng_for(cfg.seed, (lemma as u64) << 40 | (depth as u64) << 32 | index);
    let rec = match lemma {
        Lemma::Monotonicity => monotonicity_tuple(depth, &mut rng, cfg),
        Lemma::ErrorControl => error_control_tuple(depth, &mut rng, cfg),
        Lemma::PowerOde => power_tuple(&mut rng, cfg),
        Lemma::ShrinkageHalf | Lemma::ShrinkageFinal => shrinkage_tuple(lemma, depth, &mut rng, cfg),
        _ => {
            let case = build_case(lemma, depth, &mut rng, cfg)?;
            run_case(&case, cfg)
        }
    };
    rec.map(|mut r| {
        r.index = index;
        r
    })
}

/// Runs the sweep for one claim at one depth until `cfg.tuples` tuples are evaluated.
pub fn certify(lemma: Lemma, depth: u32, cfg: &SweepConfig) -> Result<LemmaReport> {
    if !lemma.applies(depth) {
        return invalid(format!("{} is not defined at depth {depth}", lemma.name()));
    }
    let mut records: Vec<TupleRecord> = Vec::with_capacity(cfg.tuples);
    let mut attempts = 0u64;
    let mut skipped = 0usize;
    let cap = (cfg.tuples as u64).saturating_mul(8);
    while records.len() < cfg.tuples && attempts < cap {
        let batch = (cfg.tuples - records.len()) as u64 + 8;
        let got: Vec<Option<TupleRecord>> =
            (attempts..attempts + batch).into_par_iter().map(|i| tuple(lemma, depth, i, cfg)).collect();
        attempts += batch;
        for r in got {
            if records.len() >= cfg.tuples {
                break;
            }
            match r {
                Some(r) => records.push(r),
                None => skipped += 1,
            }
        }
    }
    let explicit = lemma.has_explicit_bound(depth);
    let ratio_of = |r: &TupleRecord| if r.bound > 0.0 { r.measured / r.bound } else if r.measured <= 0.0 { 0.0 } else { f64::INFINITY };
    let mut ratios: Vec<f64> = records.iter().map(ratio_of).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let max_ratio = ratios.last().copied().unwrap_or(0.0);
    let median_ratio = if ratios.is_empty() { 0.0 } else { ratios[ratios.len() / 2] };
    let violations = records.iter().filter(|r| !r.ok).count();
    let supported_tuples = records.iter().filter(|r| r.supported).count();
    let supported_violations = records.iter().filter(|r| r.supported && !r.ok).count();
    let min_margin = records
        .iter()
        .map(|r| r.bound + cfg.margin_steps * r.dt - r.measured)
        .fold(f64::INFINITY, f64::min);
    let worst = records
        .iter()
        .max_by(|a, b| ratio_of(a).partial_cmp(&ratio_of(b)).unwrap_or(std::cmp::Ordering::Equal))
        .cloned();
    let mut notes = Vec::new();
    if !explicit {
        notes.push("constants are unspecified; fitted_constant is the smallest multiplier of the unit-constant bound".into());
    }
    if lemma == Lemma::ErrorControl {
        notes.push("bound = 1; measured = largest ratio of |beta| or |theta| to its envelope".into());
    }
    if lemma == Lemma::Monotonicity {
        notes.push("bound = tolerance; measured = largest increase of |z - theta| while >= kappa or after entering kappa".into());
    }
    Ok(LemmaReport {
        lemma: lemma.name().into(),
        depth,
        explicit_bound: explicit,
        tuples: records.len(),
        skipped,
        violations,
        supported_tuples,
        supported_violations,
        max_ratio,
        median_ratio,
        min_margin,
        fitted_constant: (!explicit).then_some(max_ratio),
        worst,
        notes,
    })
}
