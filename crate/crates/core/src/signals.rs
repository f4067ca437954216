//! Truth coefficient sequences, signal functionals and rate predictions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::basis::{OrderedSpectrum, Phase};
use crate::error::{invalid, Result};

/// Truth coefficients aligned with a spectrum, plus the energy left outside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub theta: Vec<f64>,
    pub tail_energy: f64,
    /// False when the tail could not be computed and `tail_energy` is 0.
    pub tail_known: bool,
    /// `max_j |θ*_j|`.
    pub sup_bound: f64,
}

impl CoefficientVector {
    pub fn new(theta: Vec<f64>, tail_energy: f64, tail_known: bool) -> Result<Self> {
        if theta.iter().any(|t| !t.is_finite()) {
            return invalid("coefficients must be finite");
        }
        if !(tail_energy >= 0.0 && tail_energy.is_finite()) {
            return invalid(format!("tail energy {tail_energy} must be finite and non-negative"));
        }
        let sup_bound = theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        Ok(Self { theta, tail_energy, tail_known, sup_bound })
    }

    /// Coefficients with nothing outside the span.
    pub fn exact(theta: Vec<f64>) -> Result<Self> {
        Self::new(theta, 0.0, true)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// `‖θ*‖² + tail`.
    pub fn total_energy(&self) -> f64 {
        self.theta.iter().map(|t| t * t).sum::<f64>() + self.tail_energy
    }
}

/// `Σ_{j ≥ from} j^{-s}` for `s > 1`, by direct summation of the first
/// terms and an Euler–Maclaurin remainder.
pub fn power_tail(s: f64, from: u64) -> f64 {
    assert!(s > 1.0, "power tail needs s > 1");
    let from = from.max(1);
    let direct = 2000u64;
    let mut sum = 0.0;
    for j in (from..from + direct).rev() {
        sum += (j as f64).powf(-s);
    }
    let m = (from + direct) as f64;
    sum + m.powf(1.0 - s) / (s - 1.0) + 0.5 * m.powf(-s) + s / 12.0 * m.powf(-s - 1.0)
        - s * (s + 1.0) * (s + 2.0) / 720.0 * m.powf(-s - 3.0)
}

/// Misaligned coefficients `|θ*_{ℓ(j)}| = j^{-(p+1)/2}` with `ℓ(j) ≈ j^q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GappedDecay {
    pub p: f64,
    pub q: f64,
    /// Largest flat rank kept in the coefficient vector.
    pub truncation: u64,
}

impl GappedDecay {
    pub fn new(p: f64, q: f64, truncation: u64) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return invalid(format!("decay exponent p must be positive, got {p}"));
        }
        if !(q >= 1.0 && q.is_finite()) {
            return invalid(format!("misalignment exponent q must be at least 1, got {q}"));
        }
        if truncation == 0 {
            return invalid("truncation must be positive");
        }
        Ok(Self { p, q, truncation })
    }

    /// `ℓ(1), …, ℓ(count)` with `ℓ(j) = max(ℓ(j−1)+1, round(j^q))`.
    pub fn positions(&self, count: usize) -> Vec<u64> {
        let mut out = Vec::with_capacity(count);
        let mut prev = 0u64;
        for j in 1..=count as u64 {
            let target = (j as f64).powf(self.q).round();
            let l = if j == 1 { 1 } else { (prev + 1).max(target as u64) };
            out.push(l);
            prev = l;
        }
        out
    }

    /// `j^{-(p+1)/2}`.
    pub fn magnitude(&self, j: u64) -> f64 {
        (j as f64).powf(-(self.p + 1.0) / 2.0)
    }

    /// Number of `j` with `ℓ(j) ≤ truncation`.
    pub fn support_size(&self) -> usize {
        let mut count = 0usize;
        let mut prev = 0u64;
        loop {
            let j = count as u64 + 1;
            let target = (j as f64).powf(self.q).round();
            let l = if j == 1 { 1 } else { (prev + 1).max(target as u64) };
            if l > self.truncation {
                return count;
            }
            prev = l;
            count += 1;
        }
    }

    /// Places the coefficients on the elements of a one-dimensional spectrum by
    /// flat rank. Coefficients whose rank is absent go to the tail.
    pub fn on_spectrum(&self, spectrum: &OrderedSpectrum) -> Result<CoefficientVector> {
        let count = self.support_size();
        let positions = self.positions(count);
        let mut by_rank = std::collections::HashMap::with_capacity(spectrum.len());
        for (i, &r) in spectrum.ranks().iter().enumerate() {
            by_rank.insert(r, i);
        }
        let mut theta = vec![0.0; spectrum.len()];
        let mut missing = 0.0;
        for (j, &l) in positions.iter().enumerate() {
            let v = self.magnitude(j as u64 + 1);
            match by_rank.get(&l) {
                Some(&i) => theta[i] = v,
                None => missing += v * v,
            }
        }
        let tail = missing + power_tail(self.p + 1.0, count as u64 + 1);
        CoefficientVector::new(theta, tail, true)
    }
}

/// Dense coefficient vector of length `truncation`, indexed by flat rank.
pub fn gapped_coeffs(spec: &GappedDecay) -> CoefficientVector {
    let count = spec.support_size();
    let mut theta = vec![0.0; spec.truncation as usize];
    for (j, l) in spec.positions(count).into_iter().enumerate() {
        theta[(l - 1) as usize] = spec.magnitude(j as u64 + 1);
    }
    let tail = power_tail(spec.p + 1.0, count as u64 + 1);
    CoefficientVector { sup_bound: theta.iter().fold(0.0f64, |m, t| m.max(t.abs())), theta, tail_energy: tail, tail_known: true }
}

/// `cos(7.5πx₁)`.
pub fn cosine_target(x: &[f64]) -> f64 {
    (7.5 * PI * x[0]).cos()
}

/// Coefficient of `cos(7.5πx₁)` against the normalized element
/// `√2 cos(kπx₁)` (the constant for `k = 0`).
pub fn cosine_target_coefficient(k: u64) -> f64 {
    let kf = k as f64;
    let raw = 30.0 / ((4.0 * kf * kf - 225.0) * PI);
    if k == 0 {
        raw
    } else {
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * std::f64::consts::SQRT_2 * raw
    }
}

/// Coefficients of the cosine target on the elements of `spectrum`. Frequencies
/// above the largest first-axis frequency present form the tail.
pub fn cosine_target_coeffs(spectrum: &OrderedSpectrum) -> Result<CoefficientVector> {
    let mut theta = vec![0.0; spectrum.len()];
    let mut max_k = 0u64;
    for (t, el) in theta.iter_mut().zip(spectrum.elements()) {
        let idx = el.index();
        if idx.phase()[1..].iter().any(|p| *p != Phase::Const) {
            continue;
        }
        match idx.phase()[0] {
            Phase::Sin => {}
            Phase::Const | Phase::Cos => {
                let k = idx.freq()[0];
                max_k = max_k.max(k);
                *t = cosine_target_coefficient(k);
            }
        }
    }
    let mut tail = 0.0;
    for k in (max_k + 1..=1_000_000).rev() {
        let c = cosine_target_coefficient(k);
        tail += c * c;
    }
    CoefficientVector::new(theta, tail, true)
}

/// Positions `j` with `|θ*_j| ≥ δ`.
pub fn j_sig(c: &CoefficientVector, delta: f64) -> Result<Vec<usize>> {
    if !(delta > 0.0) {
        return invalid(format!("threshold must be positive, got {delta}"));
    }
    Ok(c.theta.iter().enumerate().filter(|(_, t)| t.abs() >= delta).map(|(i, _)| i).collect())
}

/// `Φ(δ) = |J_sig(δ)|`.
pub fn phi_of(c: &CoefficientVector, delta: f64) -> Result<usize> {
    Ok(j_sig(c, delta)?.len())
}

/// `Ψ(δ)`: energy below the threshold, tail included.
pub fn psi_of(c: &CoefficientVector, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return invalid(format!("threshold must be positive, got {delta}"));
    }
    let below: f64 = c.theta.iter().filter(|t| t.abs() < delta).map(|t| t * t).sum();
    Ok(below + c.tail_energy)
}

/// Setting in which a rate prediction is made.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum RateForm {
    Misalignment { p: f64, q: f64 },
    LowDim { t_smooth: f64, d: usize, d0: usize },
}

/// Exponents `a` in error rates `n^{-a}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePrediction {
    pub adaptive_exponent: f64,
    pub fixed_exponent: f64,
}

pub fn theoretical_rates(form: RateForm) -> Result<RatePrediction> {
    match form {
        RateForm::Misalignment { p, q } => {
            if !(p > 0.0) || !(q >= 1.0) {
                return invalid(format!("need p > 0 and q ≥ 1, got p = {p}, q = {q}"));
            }
            Ok(RatePrediction { adaptive_exponent: p / (p + 1.0), fixed_exponent: p / (p + q) })
        }
        RateForm::LowDim { t_smooth, d, d0 } => {
            if !(t_smooth > 0.0) || d0 == 0 || d0 > d {
                return invalid(format!("need t > 0 and 1 ≤ d0 ≤ d, got t = {t_smooth}, d = {d}, d0 = {d0}"));
            }
            let t2 = 2.0 * t_smooth;
            Ok(RatePrediction {
                adaptive_exponent: t2 / (t2 + d0 as f64),
                fixed_exponent: t2 / (t2 + d as f64),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gapped_examples() {
        let c = gapped_coeffs(&GappedDecay::new(1.0, 2.0, 100).unwrap());
        assert_eq!(GappedDecay::new(1.0, 2.0, 100).unwrap().positions(4), vec![1, 4, 9, 16]);
        assert_eq!(c.theta[3], 0.5);
        assert_eq!(c.theta[1], 0.0);
        let aligned = gapped_coeffs(&GappedDecay::new(1.0, 1.0, 50).unwrap());
        for (j, t) in aligned.theta.iter().enumerate() {
            assert_relative_eq!(*t, 1.0 / (j as f64 + 1.0), epsilon = 1e-15);
        }
        assert!(GappedDecay::new(0.0, 2.0, 10).is_err());
        assert!(GappedDecay::new(1.0, 0.5, 10).is_err());
    }

    #[test]
    fn collisions_stay_injective() {
        let pos = GappedDecay::new(1.0, 1.3, 10_000).unwrap().positions(200);
        assert!(pos.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(&pos[..4], &[1, 2, 4, 6]);
    }

    #[test]
    fn power_tail_against_zeta() {
        // ζ(2) = π²/6, ζ(4) = π⁴/90.
        assert_relative_eq!(power_tail(2.0, 1), PI * PI / 6.0, epsilon = 1e-13);
        assert_relative_eq!(power_tail(4.0, 1), PI.powi(4) / 90.0, epsilon = 1e-14);
        let direct: f64 = (1..10).map(|j| (j as f64).powi(-2)).sum();
        assert_relative_eq!(power_tail(2.0, 10), PI * PI / 6.0 - direct, epsilon = 1e-13);
    }

    #[test]
    fn gapped_energy_is_complete() {
        let spec = GappedDecay::new(1.0, 2.0, 1000).unwrap();
        let c = gapped_coeffs(&spec);
        assert_relative_eq!(c.total_energy(), PI * PI / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn on_spectrum_places_by_rank() {
        let spec = GappedDecay::new(1.0, 2.0, 16).unwrap();
        let ranks = [1u64, 2, 3, 4, 9];
        let s = OrderedSpectrum::power_law_1d(&ranks, 2.0).unwrap();
        let c = spec.on_spectrum(&s).unwrap();
        assert_eq!(c.theta, vec![1.0, 0.0, 0.0, 0.5, 1.0 / 3.0]);
        assert_relative_eq!(c.total_energy(), PI * PI / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn cosine_coefficient_magnitudes() {
        assert_relative_eq!(30.0 / (31.0 * PI), 0.30804, epsilon = 1e-5);
        assert_relative_eq!(
            cosine_target_coefficient(8).abs(),
            std::f64::consts::SQRT_2 * 30.0 / (31.0 * PI),
            epsilon = 1e-15
        );
        assert_relative_eq!(cosine_target_coefficient(0), -2.0 / (15.0 * PI), epsilon = 1e-15);
    }

    #[test]
    fn cosine_energy_is_one_half() {
        let s = OrderedSpectrum::sobolev(2, 12, 1.5).unwrap();
        let c = cosine_target_coeffs(&s).unwrap();
        assert_relative_eq!(c.total_energy(), 0.5, epsilon = 1e-12);
        let nonzero = c.theta.iter().filter(|t| **t != 0.0).count();
        assert_eq!(nonzero, 13);
    }

    #[test]
    fn phi_psi_examples() {
        let c = CoefficientVector::exact(vec![1.0, 0.5, 0.25, 0.125]).unwrap();
        assert_eq!(phi_of(&c, 0.3).unwrap(), 2);
        assert_eq!(j_sig(&c, 0.3).unwrap(), vec![0, 1]);
        assert_relative_eq!(psi_of(&c, 0.3).unwrap(), 0.078125);
        assert_eq!(phi_of(&c, 2.0).unwrap(), 0);
        assert_relative_eq!(psi_of(&c, 2.0).unwrap(), c.total_energy());
        assert!(phi_of(&c, 0.0).is_err());
        assert!(psi_of(&c, -1.0).is_err());
    }

    #[test]
    fn rate_examples() {
        let r = theoretical_rates(RateForm::Misalignment { p: 2.0, q: 3.0 }).unwrap();
        assert_relative_eq!(r.adaptive_exponent, 2.0 / 3.0);
        assert_relative_eq!(r.fixed_exponent, 0.4);
        let r = theoretical_rates(RateForm::Misalignment { p: 1.7, q: 1.0 }).unwrap();
        assert_eq!(r.adaptive_exponent, r.fixed_exponent);
        let r = theoretical_rates(RateForm::LowDim { t_smooth: 1.5, d: 4, d0: 1 }).unwrap();
        assert_relative_eq!(r.adaptive_exponent, 0.75);
        assert_relative_eq!(r.fixed_exponent, 3.0 / 7.0);
        assert!(theoretical_rates(RateForm::LowDim { t_smooth: 1.0, d: 2, d0: 3 }).is_err());
    }
}
