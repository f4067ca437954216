//! One-dimensional perturbed dynamics: an RK4 integrator and closed-form
//! hitting-time bounds.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub mod certify;

/// The perturbation `h(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    Zero,
    Constant { value: f64 },
    /// `+amp` on `[0, half)`, `-amp` on `[half, 2·half)`, and so on.
    Alternating { amp: f64, half_period: f64 },
    /// `amp / (1 + t)`.
    Decaying { amp: f64 },
    /// `value_i` on `[start_i, start_{i+1})`; before the first start the value is 0.
    Piecewise { segments: Vec<(f64, f64)> },
    /// `first` up to `switch`, `then` afterwards.
    Sequence { first: Box<Perturbation>, switch: f64, then: Box<Perturbation> },
}

impl Perturbation {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Perturbation::Zero => 0.0,
            Perturbation::Constant { value } => *value,
            Perturbation::Alternating { amp, half_period } => {
                if ((t / half_period).floor() as i64) % 2 == 0 {
                    *amp
                } else {
                    -amp
                }
            }
            Perturbation::Decaying { amp } => amp / (1.0 + t),
            Perturbation::Piecewise { segments } => {
                segments.iter().rev().find(|(s, _)| t >= *s).map_or(0.0, |(_, v)| *v)
            }
            Perturbation::Sequence { first, switch, then } => {
                if t < *switch {
                    first.value(t)
                } else {
                    then.value(t - switch)
                }
            }
        }
    }

    /// Value at `t` of the smooth piece that contains `start`, so that evaluations
    /// at the end of a step landing on a breakpoint use the left limit.
    pub fn value_in(&self, start: f64, t: f64) -> f64 {
        match self {
            Perturbation::Alternating { amp, half_period } => {
                let mut k = (start / half_period).floor();
                if (k + 1.0) * half_period <= start {
                    k += 1.0;
                }
                if (k as i64) % 2 == 0 {
                    *amp
                } else {
                    -amp
                }
            }
            Perturbation::Piecewise { .. } => self.value(start),
            Perturbation::Sequence { first, switch, then } => {
                if start < *switch {
                    first.value_in(start, t)
                } else {
                    then.value_in(start - switch, t - switch)
                }
            }
            _ => self.value(t),
        }
    }

    /// First discontinuity strictly after `t`.
    pub fn next_break(&self, t: f64) -> Option<f64> {
        match self {
            Perturbation::Alternating { half_period, .. } => {
                let k = (t / half_period).floor() + 1.0;
                let b = k * half_period;
                Some(if b <= t { b + half_period } else { b })
            }
            Perturbation::Piecewise { segments } => segments.iter().map(|(s, _)| *s).find(|s| *s > t),
            Perturbation::Sequence { first, switch, then } => {
                if t < *switch {
                    Some(first.next_break(t).map_or(*switch, |b| b.min(*switch)))
                } else {
                    // Shifting back by `switch` can round onto `t`; skip such breaks.
                    let mut local = t - switch;
                    loop {
                        let b = then.next_break(local)?;
                        if b + switch > t {
                            return Some(b + switch);
                        }
                        local = b;
                    }
                }
            }
            _ => None,
        }
    }

    /// `sup_{t ≥ from} |h(t)|`.
    pub fn sup_from(&self, from: f64) -> f64 {
        match self {
            Perturbation::Zero => 0.0,
            Perturbation::Constant { value } => value.abs(),
            Perturbation::Alternating { amp, .. } => amp.abs(),
            Perturbation::Decaying { amp } => amp.abs() / (1.0 + from.max(0.0)),
            Perturbation::Piecewise { segments } => {
                let before = segments.iter().rev().find(|(s, _)| *s <= from).map_or(0.0, |(_, v)| v.abs());
                segments.iter().filter(|(s, _)| *s > from).fold(before, |m, (_, v)| m.max(v.abs()))
            }
            Perturbation::Sequence { first, switch, then } => {
                if from < *switch {
                    first.sup_from(from).max(then.sup_from(0.0))
                } else {
                    then.sup_from(from - switch)
                }
            }
        }
    }

    /// `∫_0^t |h|` on a fine grid between breakpoints (exact for piecewise constants).
    pub fn abs_integral(&self, t: f64) -> f64 {
        let mut total = 0.0;
        let mut s = 0.0;
        while s < t {
            let end = self.next_break(s).map_or(t, |b| b.min(t));
            total += match self {
                Perturbation::Decaying { amp } => amp.abs() * ((1.0 + end) / (1.0 + s)).ln(),
                Perturbation::Sequence { .. } => {
                    // Each sub-piece is handled at its own breakpoints.
                    let mid = 0.5 * (s + end);
                    match self.piece_at(mid) {
                        Perturbation::Decaying { amp } => {
                            let off = self.offset_at(mid);
                            amp.abs() * ((1.0 + end - off) / (1.0 + s - off)).ln()
                        }
                        _ => self.value(mid).abs() * (end - s),
                    }
                }
                _ => self.value(0.5 * (s + end)).abs() * (end - s),
            };
            s = end;
        }
        total
    }

    fn piece_at(&self, t: f64) -> &Perturbation {
        match self {
            Perturbation::Sequence { first, switch, then } => {
                if t < *switch {
                    first.piece_at(t)
                } else {
                    then.piece_at(t - switch)
                }
            }
            other => other,
        }
    }

    fn offset_at(&self, t: f64) -> f64 {
        match self {
            Perturbation::Sequence { first, switch, then } => {
                if t < *switch {
                    first.offset_at(t)
                } else {
                    switch + then.offset_at(t - switch)
                }
            }
            _ => 0.0,
        }
    }
}

/// Parameters of the scalar dynamics
/// `β̇ = a b^D g`, `ȧ = b^D β g`, `ḃ = D a b^{D−1} β g` with `g = z − θ + h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarParams {
    pub lambda: f64,
    /// Ignored when `depth == 0`.
    pub b0: f64,
    pub depth: u32,
    pub z: f64,
    pub h: Perturbation,
}

impl ScalarParams {
    pub fn two_layer(lambda: f64, z: f64, h: Perturbation) -> Self {
        Self { lambda, b0: 1.0, depth: 0, z, h }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return invalid(format!("λ must be positive, got {}", self.lambda));
        }
        if self.depth >= 1 && !(self.b0 > 0.0 && self.b0.is_finite()) {
            return invalid(format!("b0 must be positive, got {}", self.b0));
        }
        if !self.z.is_finite() {
            return invalid("z must be finite");
        }
        Ok(())
    }

    pub fn initial_state(&self) -> ScalarState {
        ScalarState { a: self.lambda.sqrt(), b: if self.depth >= 1 { self.b0 } else { 1.0 }, beta: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarState {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
}

impl ScalarState {
    pub fn theta(&self, depth: u32) -> f64 {
        self.a * self.b.powi(depth as i32) * self.beta
    }

    /// `|a² − β² − λ|` and `|b² − Dβ² − b₀²|` (0 when `depth == 0`).
    pub fn conservation_errors(&self, p: &ScalarParams) -> (f64, f64) {
        let b2 = self.beta * self.beta;
        let first = (self.a * self.a - b2 - p.lambda).abs();
        let second = if p.depth >= 1 { (self.b * self.b - p.depth as f64 * b2 - p.b0 * p.b0).abs() } else { 0.0 };
        (first, second)
    }

    fn axpy(&self, k: &ScalarState, s: f64) -> ScalarState {
        ScalarState { a: self.a + s * k.a, b: self.b + s * k.b, beta: self.beta + s * k.beta }
    }
}

fn rhs(p: &ScalarParams, s: &ScalarState, h: f64) -> ScalarState {
    let d = p.depth;
    if d == 0 {
        let g = p.z - s.a * s.beta + h;
        ScalarState { a: s.beta * g, b: 0.0, beta: s.a * g }
    } else {
        let b_dm1 = s.b.powi(d as i32 - 1);
        let b_d = b_dm1 * s.b;
        let g = p.z - s.a * b_d * s.beta + h;
        ScalarState { a: b_d * s.beta * g, b: d as f64 * s.a * b_dm1 * s.beta * g, beta: s.a * b_d * g }
    }
}

/// Classical RK4 step of length `dt` from time `t`.
fn rk4_step(p: &ScalarParams, s: &ScalarState, t: f64, dt: f64) -> ScalarState {
    // Steps never straddle a breakpoint, so every stage reads the piece holding `t`.
    let h0 = p.h.value_in(t, t);
    let hm = p.h.value_in(t, t + 0.5 * dt);
    let h1 = p.h.value_in(t, t + dt);
    let k1 = rhs(p, s, h0);
    let k2 = rhs(p, &s.axpy(&k1, 0.5 * dt), hm);
    let k3 = rhs(p, &s.axpy(&k2, 0.5 * dt), hm);
    let k4 = rhs(p, &s.axpy(&k3, dt), h1);
    ScalarState {
        a: s.a + dt / 6.0 * (k1.a + 2.0 * k2.a + 2.0 * k3.a + k4.a),
        b: s.b + dt / 6.0 * (k1.b + 2.0 * k2.b + 2.0 * k3.b + k4.b),
        beta: s.beta + dt / 6.0 * (k1.beta + 2.0 * k2.beta + 2.0 * k3.beta + k4.beta),
    }
}

/// Integrates from `t = 0` to `t_end`, calling `visit(t, state)` at `t = 0` and
/// after every step. Steps are shortened to land on breakpoints of `h`.
/// `visit` returning `false` stops early.
pub fn drive<F>(p: &ScalarParams, t_end: f64, dt: f64, mut visit: F) -> Result<()>
where
    F: FnMut(f64, &ScalarState) -> bool,
{
    p.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return invalid(format!("dt must be positive, got {dt}"));
    }
    if !(t_end >= 0.0) {
        return invalid(format!("T_end must be non-negative, got {t_end}"));
    }
    let mut s = p.initial_state();
    let mut t = 0.0;
    let mut k = 0u64;
    if !visit(t, &s) {
        return Ok(());
    }
    let tol = 1e-12 * dt;
    while t < t_end - tol {
        k += 1;
        let mut next = (t + dt).min(t_end);
        if let Some(b) = p.h.next_break(t) {
            if b > t {
                next = next.min(b);
            }
        }
        if t_end - next < tol {
            next = t_end;
        }
        s = rk4_step(p, &s, t, next - t);
        t = next;
        if !(s.a.is_finite() && s.b.is_finite() && s.beta.is_finite()) {
            return Err(Error::Divergence { step: k, flow_time: t, detail: "scalar dynamics blew up".into() });
        }
        if !visit(t, &s) {
            break;
        }
    }
    Ok(())
}

/// Sampled scalar trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarTrajectory {
    pub dt: f64,
    pub depth: u32,
    pub t: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
}

/// RK4 from `a = √λ`, `b = b₀`, `β = 0`, keeping every `keep_every`-th output.
pub fn integrate_scalar(p: &ScalarParams, t_end: f64, dt: f64, keep_every: usize) -> Result<ScalarTrajectory> {
    let mut out = ScalarTrajectory { dt, depth: p.depth, t: vec![], a: vec![], b: vec![], beta: vec![], theta: vec![] };
    let every = keep_every.max(1);
    let mut i = 0usize;
    let mut last = None;
    drive(p, t_end, dt, |t, s| {
        if i.is_multiple_of(every) {
            out.t.push(t);
            out.a.push(s.a);
            out.b.push(s.b);
            out.beta.push(s.beta);
            out.theta.push(s.theta(p.depth));
        }
        last = Some((t, *s));
        i += 1;
        true
    })?;
    if let Some((t, s)) = last {
        if out.t.last() != Some(&t) {
            out.t.push(t);
            out.a.push(s.a);
            out.b.push(s.b);
            out.beta.push(s.beta);
            out.theta.push(s.theta(p.depth));
        }
    }
    Ok(out)
}

/// Conditions whose hitting times are measured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "kebab-case")]
pub enum HitPredicate {
    /// `|z − θ| ≤ target`.
    DistanceAtMost(f64),
    /// `θ ≥ target`.
    AtLeast(f64),
    /// `θ ≤ target`.
    AtMost(f64),
}

impl HitPredicate {
    /// Non-negative exactly when the predicate holds.
    pub fn slack(&self, z: f64, theta: f64) -> f64 {
        match *self {
            HitPredicate::DistanceAtMost(r) => r - (z - theta).abs(),
            HitPredicate::AtLeast(v) => theta - v,
            HitPredicate::AtMost(v) => v - theta,
        }
    }
}

fn crossing(t0: f64, s0: f64, t1: f64, s1: f64) -> f64 {
    if s1 == s0 {
        t1
    } else {
        (t0 + (t1 - t0) * (-s0) / (s1 - s0)).clamp(t0, t1)
    }
}

/// First time at which the predicate holds, linearly interpolated between grid points.
pub fn measure_hit(p: &ScalarParams, pred: HitPredicate, t_end: f64, dt: f64) -> Result<Option<f64>> {
    let mut prev: Option<(f64, f64)> = None;
    let mut hit = None;
    drive(p, t_end, dt, |t, s| {
        let sl = pred.slack(p.z, s.theta(p.depth));
        if sl >= 0.0 {
            hit = Some(match prev {
                None => t,
                Some((tp, sp)) => crossing(tp, sp, t, sl),
            });
            return false;
        }
        prev = Some((t, sl));
        true
    })?;
    Ok(hit)
}

/// Outcome of watching a predicate on `[t_from, t_end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settle {
    /// Time after which the predicate held through `t_end` (interpolated);
    /// `t_from` when it held throughout.
    pub settle_time: Option<f64>,
    /// `θ(t_from)`.
    pub theta_from: f64,
}

/// Time after which the predicate holds until `t_end`, together with `θ(t_from)`.
pub fn measure_settle(p: &ScalarParams, pred: HitPredicate, t_from: f64, t_end: f64, dt: f64) -> Result<Settle> {
    let mut theta_from = f64::NAN;
    let mut prev: Option<(f64, f64)> = None;
    let mut settle: Option<f64> = None;
    let mut started = false;
    drive(p, t_end, dt, |t, s| {
        let th = s.theta(p.depth);
        if !started {
            if t + 1e-12 * dt < t_from {
                return true;
            }
            started = true;
            theta_from = th;
        }
        let sl = pred.slack(p.z, th);
        if sl < 0.0 {
            settle = None;
        } else if settle.is_none() {
            settle = Some(match prev {
                Some((tp, sp)) if sp < 0.0 => crossing(tp, sp, t, sl),
                _ => t,
            });
        }
        prev = Some((t, sl));
        true
    })?;
    Ok(Settle { settle_time: settle, theta_from })
}

/// `max(ln x, 0)`, with `ln⁺ x = 0` for `x ≤ 0`.
pub fn ln_plus(x: f64) -> f64 {
    if x > 1.0 {
        x.ln()
    } else {
        0.0
    }
}

/// Approach from below with a large perturbation: `|z − θ| ≤ 2κ` after
/// `κ^{-1}[2 + ½ln⁺(M/λ) + ½ln⁺((z−2κ)/λ)]`.
pub fn bound_app_below(lambda: f64, z: f64, kappa: f64, m: f64) -> f64 {
    (2.0 + 0.5 * ln_plus(m / lambda) + 0.5 * ln_plus((z - 2.0 * kappa) / lambda)) / kappa
}

/// `θ ≥ z/4` after `4z^{-1}[2 + ½ln⁺(M/λ) + ½ln⁺(z/(4λ))]` (needs `z ≥ 2κ`).
pub fn bound_sig_below(lambda: f64, z: f64, m: f64) -> f64 {
    4.0 / z * (2.0 + 0.5 * ln_plus(m / lambda) + 0.5 * ln_plus(z / (4.0 * lambda)))
}

/// Approach from above: returns `(time, radius)` with radius `2max(z, 2κ)`
/// reached after `max(z, 2κ)^{-1}`.
pub fn bound_app_above(z: f64, kappa: f64) -> (f64, f64) {
    let m = z.max(2.0 * kappa);
    (1.0 / m, 2.0 * m)
}

/// `|z − θ| ≤ κ + δ` after `4z^{-1}ln⁺((|z − θ(t₀)| − κ)/δ)` when `z/4 ≤ θ(t₀) ≤ 3z`.
pub fn bound_final_time(z: f64, kappa: f64, delta: f64, dev0: f64) -> f64 {
    4.0 / z * ln_plus((dev0 - kappa) / delta)
}

/// `|z − θ| ≤ 4κ` after `κ^{-1}(1 + ln⁺(|z − θ(t₀)|/κ))`, starting above `z`.
pub fn bound_app_above_large_kappa(kappa: f64, dev0: f64) -> f64 {
    (1.0 + ln_plus(dev0 / kappa)) / kappa
}

/// `|z − θ| ≤ κ + δ` after
/// `4z^{-1}[2 + ½ln⁺(|z−θ(t₀)|/λ) + ½ln⁺(z/(4λ)) + ln⁺(2z/δ)]` (needs `z ≥ 2κ`).
pub fn bound_approach_small_kappa(lambda: f64, z: f64, delta: f64, dev0: f64) -> f64 {
    4.0 / z * (2.0 + 0.5 * ln_plus(dev0 / lambda) + 0.5 * ln_plus(z / (4.0 * lambda)) + ln_plus(2.0 * z / delta))
}

/// `θ ≥ −2κ` after `κ^{-1}`.
pub fn bound_retract_neg(kappa: f64) -> f64 {
    1.0 / kappa
}

/// `|z − θ| ≤ 2max(|z|, 2κ)` after `κ^{-1}`; returns `(time, radius)`.
pub fn bound_retracting(z: f64, kappa: f64) -> (f64, f64) {
    (1.0 / kappa, 2.0 * z.abs().max(2.0 * kappa))
}

/// Envelopes on `|β|` and `|θ|` given `I = ∫_0^t (|h| + |z|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    /// `None` when no envelope applies (multilayer, `λ^{1/2} > b₀/√D` or condition violated).
    pub beta: Option<f64>,
    pub theta: Option<f64>,
    /// Multilayer: the early-time condition `2^{(D+1)/2}λ^{1/2}b₀^D I ≤ r` holds.
    pub early_regime: bool,
    /// Multilayer: the condition `2^{(D+1)/2}b₀^D I ≤ ln((b₀/√D)/λ^{1/2})` holds.
    pub condition_ok: bool,
}

pub fn bound_error_control(lambda: f64, integral: f64, depth: u32, b0: f64) -> ErrorEnvelope {
    let s2 = std::f64::consts::SQRT_2;
    if depth == 0 {
        return ErrorEnvelope {
            beta: Some(lambda.sqrt() * (s2 * integral).exp()),
            theta: Some(s2 * lambda * (2.0 * s2 * integral).exp()),
            early_regime: true,
            condition_ok: true,
        };
    }
    let d = depth as f64;
    let c = 2f64.powf((d + 1.0) / 2.0);
    let bd = b0.powi(depth as i32);
    let scale = b0 / d.sqrt();
    let (r, _) = radii(lambda, b0, depth);
    let early = c * lambda.sqrt() * bd * integral <= r;
    let small_lambda = lambda.sqrt() <= scale;
    let condition_ok = small_lambda && c * bd * integral <= (scale / lambda.sqrt()).ln();
    if condition_ok {
        ErrorEnvelope {
            beta: Some(lambda.sqrt() * (c * bd * integral).exp()),
            theta: Some(c * lambda * bd * (2f64.powf((d + 3.0) / 2.0) * bd * integral).exp()),
            early_regime: early,
            condition_ok,
        }
    } else if early {
        ErrorEnvelope { beta: None, theta: Some(c * lambda * bd * integral), early_regime: true, condition_ok: false }
    } else {
        ErrorEnvelope { beta: None, theta: None, early_regime: false, condition_ok: false }
    }
}

/// Multilayer early envelope `2^{(D+1)/2}λb₀^D I`, valid while the early condition holds.
pub fn bound_error_control_early(lambda: f64, integral: f64, depth: u32, b0: f64) -> f64 {
    let d = depth as f64;
    2f64.powf((d + 1.0) / 2.0) * lambda * b0.powi(depth as i32) * integral
}

/// Halving time of the signal error with eigenvalues `λ_k` and targets `θ*_k`:
/// `4M^{-1}[2 + ½max_k(ln⁺(M/λ_k) + ln⁺(|θ*_k|/λ_k))]`.
pub fn bound_half(m: f64, lambdas: &[f64], targets: &[f64]) -> Result<f64> {
    if !(m > 0.0) || lambdas.is_empty() || lambdas.len() != targets.len() {
        return invalid("need M > 0 and matching nonempty sets");
    }
    let worst = lambdas
        .iter()
        .zip(targets)
        .map(|(l, t)| ln_plus(m / l) + ln_plus(t.abs() / l))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(4.0 / m * (2.0 + 0.5 * worst))
}

/// Final approach time of one strong component:
/// `4|θ*_k|^{-1}(2 + ½ln⁺(M/λ_k) + ½ln⁺(|θ*_k|/(4λ_k)) + ln⁺(|θ*_k|/(2ε)))`.
pub fn bound_fin(target: f64, lambda: f64, m: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) || !(m > 0.0) || target == 0.0 {
        return invalid("need ε > 0, M > 0 and a nonzero target");
    }
    let t = target.abs();
    Ok(4.0 / t * (2.0 + 0.5 * ln_plus(m / lambda) + 0.5 * ln_plus(t / (4.0 * lambda)) + ln_plus(t / (2.0 * eps))))
}

/// `(r, R) = (min, max)(λ^{1/2}, b₀/√D)`.
pub fn radii(lambda: f64, b0: f64, depth: u32) -> (f64, f64) {
    let a = lambda.sqrt();
    let b = b0 / (depth as f64).sqrt();
    (a.min(b), a.max(b))
}

/// A multilayer bound plus a flag for `r = R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiBound {
    pub time: f64,
    /// `ln(R/r)`.
    pub log_ratio: f64,
    pub degenerate: bool,
}

fn check_depth(depth: u32) -> Result<()> {
    if depth == 0 {
        return invalid("multilayer bounds need depth ≥ 1; use the two-layer calculators");
    }
    Ok(())
}

/// `4[D^{D/2} κ R^D]^{-1} ln(R/r)`.
pub fn bound_multi_app_below(lambda: f64, b0: f64, depth: u32, kappa: f64) -> Result<MultiBound> {
    check_depth(depth)?;
    if !(lambda > 0.0 && b0 > 0.0 && kappa > 0.0) {
        return invalid("λ, b0 and κ must be positive");
    }
    let d = depth as f64;
    let (r, big_r) = radii(lambda, b0, depth);
    let log_ratio = (big_r / r).ln();
    let time = 4.0 / (d.powf(d / 2.0) * kappa * big_r.powi(depth as i32)) * log_ratio;
    Ok(MultiBound { time, log_ratio, degenerate: log_ratio <= 0.0 })
}

/// `4[D^{D/2} z R^D]^{-1} ln(R/r)` for `θ ≥ z/4`.
pub fn bound_multi_sig_below(lambda: f64, b0: f64, depth: u32, z: f64) -> Result<MultiBound> {
    bound_multi_app_below(lambda, b0, depth, z)
}

fn power_time(depth: u32, level: f64) -> f64 {
    let d = depth as f64;
    (d + 2.0) / (d + 1.0) * d.powf(d / (d + 2.0)) * level.powf(-(2.0 * d + 2.0) / (d + 2.0))
}

/// Approach from above: `(time, radius)` with `m = 2max(z, 2κ)` and time
/// `(D+2)/(D+1)·D^{D/(D+2)}·m^{-(2D+2)/(D+2)}`.
pub fn bound_multi_app_above(depth: u32, z: f64, kappa: f64) -> Result<(f64, f64)> {
    check_depth(depth)?;
    let m = 2.0 * z.max(2.0 * kappa);
    Ok((power_time(depth, m), m))
}

/// `4^{(2D+2)/(D+2)} D^{D/(D+2)} z^{-(2D+2)/(D+2)} ln⁺((|z−θ(t₀)| − κ)/δ)`.
pub fn bound_multi_final_time(depth: u32, z: f64, kappa: f64, delta: f64, dev0: f64) -> Result<f64> {
    check_depth(depth)?;
    let d = depth as f64;
    let e = (2.0 * d + 2.0) / (d + 2.0);
    Ok(4f64.powf(e) * d.powf(d / (d + 2.0)) * z.powf(-e) * ln_plus((dev0 - kappa) / delta))
}

/// Retraction time `(D+2)/(D+1)·D^{D/(D+2)}·(2κ)^{-(2D+2)/(D+2)}`.
pub fn bound_multi_retract(depth: u32, kappa: f64) -> Result<f64> {
    check_depth(depth)?;
    Ok(power_time(depth, 2.0 * kappa))
}

/// Constants of the multilayer shrinkage bounds, which the theory leaves unspecified.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

impl Default for ShrinkageConstants {
    fn default() -> Self {
        Self { c1: 4.0, c2: 4.0, c3: 4.0, c4: 4.0, c5: 4.0 }
    }
}

/// `C₁M^{-(2D+2)/(D+2)} + C₂M^{-1}max_k R_k^{-D}ln(R_k/r_k)`.
pub fn bound_multi_half(c: &ShrinkageConstants, m: f64, lambdas: &[f64], b0: f64, depth: u32) -> Result<f64> {
    check_depth(depth)?;
    if !(m > 0.0) || lambdas.is_empty() {
        return invalid("need M > 0 and a nonempty set");
    }
    let d = depth as f64;
    let worst = lambdas
        .iter()
        .map(|&l| {
            let (r, big_r) = radii(l, b0, depth);
            big_r.powi(-(depth as i32)) * (big_r / r).ln()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(c.c1 * m.powf(-(2.0 * d + 2.0) / (d + 2.0)) + c.c2 / m * worst)
}

/// `C₃|θ*_k|^{-1}R_k^{-D}ln(R_k/r_k) + C₄|θ*_k|^{-(2D+2)/(D+2)}ln⁺(|θ*_k|/ε)`.
pub fn bound_multi_fin(c: &ShrinkageConstants, target: f64, lambda: f64, b0: f64, depth: u32, eps: f64) -> Result<f64> {
    check_depth(depth)?;
    if !(eps > 0.0) || target == 0.0 {
        return invalid("need ε > 0 and a nonzero target");
    }
    let d = depth as f64;
    let t = target.abs();
    let (r, big_r) = radii(lambda, b0, depth);
    Ok(c.c3 / t * big_r.powi(-(depth as i32)) * (big_r / r).ln()
        + c.c4 * t.powf(-(2.0 * d + 2.0) / (d + 2.0)) * ln_plus(t / eps))
}

/// Hitting bound for `ẋ ≥ kx^p` from `x0`, and the blow-up time of `ẋ = kx^p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerBound {
    pub bound: f64,
    pub exact_blowup: f64,
}

/// `[(p−1)k x0^{p−1}]^{-1}`.
pub fn bound_power_ode(k: f64, p: f64, x0: f64) -> Result<PowerBound> {
    if !(p > 1.0) {
        return invalid(format!("power must exceed 1, got {p}"));
    }
    if !(k > 0.0 && x0 > 0.0) {
        return invalid("k and x0 must be positive");
    }
    let bound = 1.0 / ((p - 1.0) * k * x0.powf(p - 1.0));
    let exact_blowup = x0.powf(1.0 - p) / ((p - 1.0) * k);
    Ok(PowerBound { bound, exact_blowup })
}

/// `[(p−1)k M^{p−1}]^{-1}` for `ẋ ≤ −kx^p` to fall to `M`.
pub fn bound_power_ode_decay(k: f64, p: f64, m: f64) -> Result<f64> {
    if !(p > 1.0) {
        return invalid(format!("power must exceed 1, got {p}"));
    }
    if !(k > 0.0 && m > 0.0) {
        return invalid("k and M must be positive");
    }
    Ok(1.0 / ((p - 1.0) * k * m.powf(p - 1.0)))
}
