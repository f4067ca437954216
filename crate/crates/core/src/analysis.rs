//! Generalization error, rate fits and eigenvalue-learning audits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::basis::OrderedSpectrum;
use crate::error::{invalid, Error, Result};
use crate::signals::CoefficientVector;

/// `‖θ* − θ‖² + tail`, the squared L² distance by orthonormality.
pub fn gen_error(theta: &[f64], truth: &CoefficientVector) -> Result<f64> {
    if theta.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: theta.len() });
    }
    let head: f64 = truth.theta.iter().zip(theta).map(|(t, e)| (t - e) * (t - e)).sum();
    Ok(head + truth.tail_energy)
}

/// Per-replication errors on an increasing `n` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub method: String,
    pub depth: u32,
    pub points: Vec<(usize, Vec<f64>)>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl ErrorCurve {
    pub fn new(method: impl Into<String>, depth: u32, points: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return invalid("n grid must be strictly increasing");
        }
        if points.iter().flat_map(|p| &p.1).any(|e| !(*e >= 0.0)) {
            return invalid("errors must be non-negative");
        }
        Ok(Self { method: method.into(), depth, points, meta: BTreeMap::new() })
    }

    /// Median error per `n`.
    pub fn medians(&self) -> Vec<(usize, f64)> {
        self.points.iter().map(|(n, e)| (*n, median(e))).collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Log-log least squares fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Grid points dropped for a non-positive median.
    pub dropped: Vec<usize>,
}

/// OLS of `ln y` on `ln x`; non-positive pairs are dropped.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), got: ys.len() });
    }
    let mut dropped = Vec::new();
    let mut pts = Vec::new();
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        if x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite() {
            pts.push((x.ln(), y.ln()));
        } else {
            dropped.push(i);
        }
    }
    if pts.len() < 2 {
        return invalid("need at least two positive points for a log-log fit");
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return invalid("x values must not all coincide");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy <= 1e-300 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(RateFit { slope, intercept, r_squared, dropped })
}

/// Fits `ln median` against `ln n`.
pub fn fit_rate(curve: &ErrorCurve) -> Result<RateFit> {
    if curve.points.len() < 4 {
        return invalid(format!("rate fit needs at least 4 grid points, got {}", curve.points.len()));
    }
    let med = curve.medians();
    let xs: Vec<f64> = med.iter().map(|m| m.0 as f64).collect();
    let ys: Vec<f64> = med.iter().map(|m| m.1).collect();
    let mut fit = fit_power_law(&xs, &ys)?;
    for i in &mut fit.dropped {
        log::warn!("{}: dropping n={} with non-positive median error", curve.method, med[*i].0);
        *i = med[*i].0;
    }
    Ok(fit)
}

/// Rate report written next to the error curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub method: String,
    #[serde(rename = "D")]
    pub depth: u32,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub fitted_slope: f64,
    pub theoretical_slope: Option<f64>,
    #[serde(rename = "r2")]
    pub r_squared: f64,
    pub intercept: f64,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub medians: Vec<f64>,
}

/// Thresholds for the signal/noise partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigAuditParams {
    /// Signal threshold multiplier on `n^{-1/2} ln n`.
    pub c1: f64,
    /// Noise components need `λ_k ≤ n^{-(1+s)/(D+2)}`.
    pub s: f64,
}

impl Default for EigAuditParams {
    fn default() -> Self {
        Self { c1: 1.0, s: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigAuditReport {
    pub n: usize,
    pub depth: u32,
    /// `(D+1)/(D+2)`.
    pub signal_exponent: f64,
    pub signal_ranks: Vec<u64>,
    pub noise_count: usize,
    /// `min learned_k / |θ*_k|^{(D+1)/(D+2)}` over signal components.
    pub min_signal_ratio: Option<f64>,
    /// `max learned_k / (learned_k(0) exp(√ln n + √ln k))` over noise components.
    pub max_noise_ratio: Option<f64>,
}

/// Partitions components into signal and noise and reports the learned-eigenvalue ratios.
///
/// `learned` and `learned_init` are `a⊙b^D` at the stop time and at initialization.
pub fn eig_learning_audit(
    learned: &[f64],
    learned_init: &[f64],
    spectrum: &OrderedSpectrum,
    truth: &CoefficientVector,
    n: usize,
    depth: u32,
    params: EigAuditParams,
) -> Result<EigAuditReport> {
    let j = spectrum.len();
    for len in [learned.len(), learned_init.len(), truth.len()] {
        if len != j {
            return Err(Error::DimensionMismatch { expected: j, got: len });
        }
    }
    if n < 2 {
        return invalid("eig audit needs n >= 2");
    }
    let nf = n as f64;
    let dd = depth as f64;
    let exponent = (dd + 1.0) / (dd + 2.0);
    let sig_level = params.c1 * nf.powf(-0.5) * nf.ln();
    let noise_level = nf.powf(-0.5);
    let lam_level = nf.powf(-(1.0 + params.s) / (dd + 2.0));
    let mut signal_ranks = Vec::new();
    let mut min_signal: Option<f64> = None;
    let mut max_noise: Option<f64> = None;
    let mut noise_count = 0;
    for k in 0..j {
        let t = truth.theta[k].abs();
        let lam = spectrum.eigenvalues()[k];
        let rank = spectrum.ranks()[k].max(1) as f64;
        if t >= sig_level && t > 0.0 {
            signal_ranks.push(spectrum.ranks()[k]);
            let r = learned[k] / t.powf(exponent);
            min_signal = Some(min_signal.map_or(r, |m: f64| m.min(r)));
        } else if t <= noise_level && lam <= lam_level && learned_init[k] > 0.0 {
            noise_count += 1;
            let r = learned[k] / (learned_init[k] * (nf.ln().sqrt() + rank.ln().sqrt()).exp());
            max_noise = Some(max_noise.map_or(r, |m: f64| m.max(r)));
        }
    }
    Ok(EigAuditReport {
        n,
        depth,
        signal_exponent: exponent,
        signal_ranks,
        noise_count,
        min_signal_ratio: min_signal,
        max_noise_ratio: max_noise,
    })
}

/// Share of `Σ v²` carried by components that vary only in the first `active_dims` coordinates.
pub fn axis_concentration(values: &[f64], spectrum: &OrderedSpectrum, active_dims: usize) -> Result<f64> {
    if values.len() != spectrum.len() {
        return Err(Error::DimensionMismatch { expected: spectrum.len(), got: values.len() });
    }
    if active_dims == 0 || active_dims > spectrum.dim() {
        return invalid(format!("active_dims must be in 1..={}", spectrum.dim()));
    }
    let mut on = 0.0;
    let mut all = 0.0;
    for (v, el) in values.iter().zip(spectrum.elements()) {
        let w = v * v;
        all += w;
        if el.index().freq()[active_dims..].iter().all(|&f| f == 0) {
            on += w;
        }
    }
    if all <= 0.0 {
        return invalid("all values are zero");
    }
    Ok(on / all)
}
