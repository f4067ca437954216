//! Real trigonometric eigenbasis on the torus `[-1,1)^d` under the uniform
//! probability measure, and the spectra built on top of it.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-axis factor: `1`, `√2 cos(kπx)` or `√2 sin(kπx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Const,
    Cos,
    Sin,
}

/// Frequency vector plus per-axis phase. `phase[a] == Const` iff `freq[a] == 0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex {
    freq: Vec<u64>,
    phase: Vec<Phase>,
}

impl MultiIndex {
    pub fn new(freq: Vec<u64>, phase: Vec<Phase>) -> Result<Self> {
        if freq.is_empty() {
            return invalid("multi-index needs at least one axis");
        }
        if freq.len() != phase.len() {
            return Err(Error::DimensionMismatch { expected: freq.len(), got: phase.len() });
        }
        for (k, ph) in freq.iter().zip(&phase) {
            if (*k == 0) != (*ph == Phase::Const) {
                return invalid(format!("phase {ph:?} inconsistent with frequency {k}"));
            }
        }
        Ok(Self { freq, phase })
    }

    /// The constant function on `d` axes.
    pub fn constant(d: usize) -> Self {
        Self { freq: vec![0; d], phase: vec![Phase::Const; d] }
    }

    pub fn dim(&self) -> usize {
        self.freq.len()
    }

    pub fn freq(&self) -> &[u64] {
        &self.freq
    }

    pub fn phase(&self) -> &[Phase] {
        &self.phase
    }

    /// `‖m‖²` in floating point.
    pub fn norm_sq(&self) -> f64 {
        self.freq.iter().map(|&k| (k as f64) * (k as f64)).sum()
    }

    fn norm_sq_exact(&self) -> u128 {
        self.freq.iter().map(|&k| (k as u128) * (k as u128)).sum()
    }

    /// Tie-break order: `(‖m‖², m, phase)` lexicographically.
    pub fn tie_break(&self, other: &Self) -> Ordering {
        self.norm_sq_exact()
            .cmp(&other.norm_sq_exact())
            .then_with(|| self.freq.cmp(&other.freq))
            .then_with(|| self.phase.cmp(&other.phase))
    }
}

/// One orthonormal basis function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisElement {
    idx: MultiIndex,
    norm_const: f64,
}

impl BasisElement {
    pub fn new(idx: MultiIndex) -> Self {
        let norm_const = idx
            .phase
            .iter()
            .map(|p| if *p == Phase::Const { 1.0 } else { SQRT_2 })
            .product();
        Self { idx, norm_const }
    }

    /// Element of the one-dimensional basis at flat rank `rank ≥ 1`:
    /// 1 is the constant, `2k` is the cosine and `2k+1` the sine of frequency `k`.
    pub fn from_rank_1d(rank: u64) -> Result<Self> {
        if rank == 0 {
            return invalid("flat ranks start at 1");
        }
        let idx = if rank == 1 {
            MultiIndex::constant(1)
        } else if rank.is_multiple_of(2) {
            MultiIndex { freq: vec![rank / 2], phase: vec![Phase::Cos] }
        } else {
            MultiIndex { freq: vec![rank / 2], phase: vec![Phase::Sin] }
        };
        Ok(Self::new(idx))
    }

    pub fn index(&self) -> &MultiIndex {
        &self.idx
    }

    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        eval_basis(self, x)
    }
}

/// `kx mod 2` carried out with an error-free product so that large
/// frequencies keep their phase accuracy.
fn reduced_phase(k: u64, x: f64) -> f64 {
    let kf = k as f64;
    let p = kf * x;
    let err = kf.mul_add(x, -p);
    p.rem_euclid(2.0) + err
}

/// Wraps a coordinate into `[-1, 1)`.
pub fn wrap_coordinate(x: f64) -> f64 {
    if (-1.0..1.0).contains(&x) {
        x
    } else {
        (x + 1.0).rem_euclid(2.0) - 1.0
    }
}

pub fn eval_basis(el: &BasisElement, x: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), el.idx.dim());
    let mut v = el.norm_const;
    for ((&k, &ph), &xa) in el.idx.freq.iter().zip(&el.idx.phase).zip(x) {
        match ph {
            Phase::Const => {}
            Phase::Cos => v *= (PI * reduced_phase(k, wrap_coordinate(xa))).cos(),
            Phase::Sin => v *= (PI * reduced_phase(k, wrap_coordinate(xa))).sin(),
        }
    }
    v
}

/// All `(2·max_freq+1)^d` tensor products, in tie-break order.
pub fn enumerate_basis(d: usize, max_freq: i64) -> Result<Vec<BasisElement>> {
    if d == 0 {
        return invalid("dimension must be at least 1");
    }
    if max_freq < 0 {
        return invalid(format!("max_freq must be non-negative, got {max_freq}"));
    }
    let m = max_freq as u64;
    let mut axis: Vec<(u64, Phase)> = vec![(0, Phase::Const)];
    for k in 1..=m {
        axis.push((k, Phase::Cos));
        axis.push((k, Phase::Sin));
    }
    let count = axis.len().checked_pow(d as u32).ok_or_else(|| {
        Error::InvalidArgument(format!("basis of size {}^{d} is too large", axis.len()))
    })?;
    let mut out = Vec::with_capacity(count);
    let mut digits = vec![0usize; d];
    for _ in 0..count {
        let freq = digits.iter().map(|&i| axis[i].0).collect();
        let phase = digits.iter().map(|&i| axis[i].1).collect();
        out.push(BasisElement::new(MultiIndex { freq, phase }));
        for a in (0..d).rev() {
            digits[a] += 1;
            if digits[a] < axis.len() {
                break;
            }
            digits[a] = 0;
        }
    }
    out.sort_by(|x, y| x.idx.tie_break(&y.idx));
    Ok(out)
}

/// `(1 + ‖m‖²)^{-r}`, which needs `r > d/2` to be summable.
pub fn sobolev_eigenvalue(idx: &MultiIndex, r: f64) -> Result<f64> {
    let half_dim = idx.dim() as f64 / 2.0;
    if !(r > half_dim) {
        return Err(Error::Summability { r, half_dim });
    }
    Ok((1.0 + idx.norm_sq()).powf(-r))
}

/// Basis elements paired with eigenvalues, sorted by decreasing eigenvalue.
///
/// `ranks[i]` is the flat rank of element `i` in the full ordering of the
/// basis. For spectra built from a complete enumeration it is `i + 1`; sparse
/// one-dimensional spectra keep the original ranks of the selected elements.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderedSpectrum {
    elements: Vec<BasisElement>,
    eigenvalues: Vec<f64>,
    ranks: Vec<u64>,
    #[serde(skip)]
    index_map: HashMap<MultiIndex, usize>,
}

impl OrderedSpectrum {
    fn build(mut items: Vec<(BasisElement, f64, u64)>, keep_ranks: bool) -> Result<Self> {
        if items.is_empty() {
            return invalid("spectrum needs at least one element");
        }
        let d = items[0].0.idx.dim();
        for (el, lam, _) in &items {
            if el.idx.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: el.idx.dim() });
            }
            if !(lam.is_finite() && *lam >= 0.0) {
                return invalid(format!("eigenvalue {lam} must be finite and non-negative"));
            }
        }
        items.sort_by(|x, y| spectral_order((&x.0, x.1), (&y.0, y.1)));
        let mut elements = Vec::with_capacity(items.len());
        let mut eigenvalues = Vec::with_capacity(items.len());
        let mut ranks = Vec::with_capacity(items.len());
        let mut index_map = HashMap::with_capacity(items.len());
        for (i, (el, lam, rank)) in items.into_iter().enumerate() {
            if index_map.insert(el.idx.clone(), i).is_some() {
                return invalid(format!("duplicate basis element {:?}", el.idx));
            }
            elements.push(el);
            eigenvalues.push(lam);
            ranks.push(if keep_ranks { rank } else { i as u64 + 1 });
        }
        Ok(Self { elements, eigenvalues, ranks, index_map })
    }

    /// Sorts arbitrary `(element, eigenvalue)` pairs; ranks become positions.
    pub fn from_parts(elements: Vec<BasisElement>, eigenvalues: Vec<f64>) -> Result<Self> {
        if elements.len() != eigenvalues.len() {
            return Err(Error::DimensionMismatch { expected: elements.len(), got: eigenvalues.len() });
        }
        Self::build(elements.into_iter().zip(eigenvalues).map(|(e, l)| (e, l, 0)).collect(), false)
    }

    /// Full torus basis with Sobolev eigenvalues `(1+‖m‖²)^{-r}`.
    pub fn sobolev(d: usize, max_freq: i64, r: f64) -> Result<Self> {
        let elements = enumerate_basis(d, max_freq)?;
        let eigenvalues = elements
            .iter()
            .map(|e| sobolev_eigenvalue(&e.idx, r))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(elements, eigenvalues)
    }

    /// Selected ranks of the one-dimensional basis with eigenvalues `rank^{-γ}`.
    pub fn power_law_1d(ranks: &[u64], gamma: f64) -> Result<Self> {
        if !(gamma > 1.0) {
            return invalid(format!("power-law exponent must exceed 1, got {gamma}"));
        }
        let items = ranks
            .iter()
            .map(|&r| Ok((BasisElement::from_rank_1d(r)?, (r as f64).powf(-gamma), r)))
            .collect::<Result<Vec<_>>>()?;
        Self::build(items, true)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.elements[0].idx.dim()
    }

    pub fn elements(&self) -> &[BasisElement] {
        &self.elements
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn ranks(&self) -> &[u64] {
        &self.ranks
    }

    /// Position of a multi-index in this spectrum.
    pub fn position(&self, idx: &MultiIndex) -> Option<usize> {
        if self.index_map.is_empty() {
            return self.elements.iter().position(|e| &e.idx == idx);
        }
        self.index_map.get(idx).copied()
    }

    /// Components excluded from training.
    pub fn frozen(&self) -> Vec<bool> {
        self.eigenvalues.iter().map(|&l| l == 0.0).collect()
    }

    /// Row of the design matrix at `x`.
    pub fn evaluate_all(&self, x: &[f64], out: &mut [f64]) {
        for (o, el) in out.iter_mut().zip(&self.elements) {
            *o = eval_basis(el, x);
        }
    }

    /// Whether the stored order is the canonical one.
    pub fn is_sorted(&self) -> bool {
        self.elements.windows(2).zip(self.eigenvalues.windows(2)).all(|(e, l)| {
            spectral_order((&e[0], l[0]), (&e[1], l[1])) != Ordering::Greater
        })
    }

    /// Sum of eigenvalues.
    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

fn spectral_order(x: (&BasisElement, f64), y: (&BasisElement, f64)) -> Ordering {
    y.1.partial_cmp(&x.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| x.0.idx.tie_break(&y.0.idx))
}

/// Zeroes eigenvalues of elements with a nonzero frequency beyond the first
/// `active_dims` axes, then re-sorts.
pub fn low_dim_spectrum(spec: &OrderedSpectrum, active_dims: usize) -> Result<OrderedSpectrum> {
    let d = spec.dim();
    if active_dims > d {
        return invalid(format!("active dimensions {active_dims} exceed d = {d}"));
    }
    let items = spec
        .elements
        .iter()
        .zip(&spec.eigenvalues)
        .zip(&spec.ranks)
        .map(|((el, &lam), &rank)| {
            let inactive = el.idx.freq[active_dims..].iter().any(|&k| k != 0);
            (el.clone(), if inactive { 0.0 } else { lam }, rank)
        })
        .collect();
    OrderedSpectrum::build(items, false)
}
