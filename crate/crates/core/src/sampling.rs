//! Regression data, design matrices, the least-squares gradient and the
//! Monte Carlo concentration audit.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{eval_basis, BasisElement, OrderedSpectrum};
use crate::error::{invalid, Error, Result};
use crate::signals::CoefficientVector;

/// Seeded generator for one `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id of a `(n, replication)` cell.
pub fn cell_stream(n: usize, rep: usize) -> u64 {
    ((n as u64) << 24) | rep as u64
}

/// i.i.d. samples `(x_i, y_i)`, points stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
    pub stream: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            d: self.d,
            x: self.x[range.start * self.d..range.end * self.d].to_vec(),
            y: self.y[range].to_vec(),
            sigma: self.sigma,
            seed: self.seed,
            stream: self.stream,
        }
    }

    /// CSV with columns `x_1..x_d, y`, preceded by `header` lines prefixed with `#`.
    pub fn write_csv(&self, path: &Path, header: &[String]) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in header {
            writeln!(file, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        let mut cols: Vec<String> = (1..=self.d).map(|a| format!("x_{a}")).collect();
        cols.push("y".into());
        w.write_record(&cols)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = self.point(i).iter().map(|v| v.to_string()).collect();
            row.push(self.y[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Samples `y = f(x) + σξ` with `x` uniform on the torus.
pub fn sample_dataset_with<F>(f: F, d: usize, n: usize, sigma: f64, seed: u64, stream: u64) -> Result<Dataset>
where
    F: Fn(&[f64]) -> f64,
{
    if n == 0 {
        return invalid("need at least one sample");
    }
    if d == 0 {
        return invalid("dimension must be at least 1");
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return invalid(format!("noise scale must be finite and non-negative, got {sigma}"));
    }
    let mut rng = rng_for(seed, stream);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut point = vec![0.0; d];
    for _ in 0..n {
        for p in point.iter_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let xi: f64 = rng.sample(StandardNormal);
        x.extend_from_slice(&point);
        y.push(f(&point) + sigma * xi);
    }
    Ok(Dataset { d, x, y, sigma, seed, stream })
}

/// Samples from the function with coefficients `truth` on `spectrum`.
pub fn sample_dataset(
    truth: &CoefficientVector,
    spectrum: &OrderedSpectrum,
    n: usize,
    sigma: f64,
    seed: u64,
    stream: u64,
) -> Result<Dataset> {
    if truth.len() != spectrum.len() {
        return Err(Error::DimensionMismatch { expected: spectrum.len(), got: truth.len() });
    }
    let support: Vec<(&BasisElement, f64)> = spectrum
        .elements()
        .iter()
        .zip(&truth.theta)
        .filter(|(_, t)| **t != 0.0)
        .map(|(e, &t)| (e, t))
        .collect();
    let f = |x: &[f64]| support.iter().map(|(e, t)| t * eval_basis(e, x)).sum();
    sample_dataset_with(f, spectrum.dim(), n, sigma, seed, stream)
}

/// `E_{ij} = e_j(x_i)`.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    e: Array2<f64>,
}

impl DesignMatrix {
    pub fn build(spectrum: &OrderedSpectrum, data: &Dataset) -> Result<Self> {
        if data.d != spectrum.dim() {
            return Err(Error::DimensionMismatch { expected: spectrum.dim(), got: data.d });
        }
        Ok(Self::from_elements(spectrum.elements(), data))
    }

    /// Design matrix over an explicit list of elements.
    pub fn from_elements(elements: &[BasisElement], data: &Dataset) -> Self {
        let (n, j) = (data.n(), elements.len());
        let mut e = Array2::zeros((n, j));
        for (i, mut row) in e.rows_mut().into_iter().enumerate() {
            let x = data.point(i);
            for (v, el) in row.iter_mut().zip(elements) {
                *v = eval_basis(el, x);
            }
        }
        Self { e }
    }

    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    pub fn j(&self) -> usize {
        self.e.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.e
    }

    /// `Σ̂ = EᵀE / n`.
    pub fn empirical_covariance(&self) -> Array2<f64> {
        self.e.t().dot(&self.e) / self.n() as f64
    }

    /// `Eθ`.
    pub fn predict(&self, theta: &[f64]) -> Vec<f64> {
        self.e.dot(&ArrayView1::from(theta)).to_vec()
    }
}

/// `Δ = Eᵀ(Y − Eθ)/n`.
pub fn residual_gradient(design: &DesignMatrix, y: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if y.len() != design.n() {
        return Err(Error::DimensionMismatch { expected: design.n(), got: y.len() });
    }
    if theta.len() != design.j() {
        return Err(Error::DimensionMismatch { expected: design.j(), got: theta.len() });
    }
    let mut out = vec![0.0; design.j()];
    LeastSquares::direct(design, y).evaluate(theta, &mut out);
    Ok(out)
}

#[derive(Clone, Debug)]
enum Form {
    /// Precomputed `Σ̂`, `EᵀY/n` and `‖Y‖²/n`.
    Gram { cov: Array2<f64>, moment: Array1<f64>, y_sq: f64 },
    Direct { e: Array2<f64>, y: Array1<f64> },
}

/// Empirical loss `‖Y − Eθ‖²/(2n)` and its residual gradient.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    form: Form,
    n: usize,
}

impl LeastSquares {
    /// Uses the Gram form when `J ≤ n`.
    pub fn new(design: &DesignMatrix, y: &[f64]) -> Self {
        if design.j() <= design.n() {
            Self::gram(design, y)
        } else {
            Self::direct(design, y)
        }
    }

    pub fn gram(design: &DesignMatrix, y: &[f64]) -> Self {
        let n = design.n();
        let y = ArrayView1::from(y);
        let cov = design.empirical_covariance();
        let moment = design.matrix().t().dot(&y) / n as f64;
        let y_sq = y.dot(&y) / n as f64;
        Self { form: Form::Gram { cov, moment, y_sq }, n }
    }

    pub fn direct(design: &DesignMatrix, y: &[f64]) -> Self {
        Self { form: Form::Direct { e: design.matrix().clone(), y: Array1::from(y.to_vec()) }, n: design.n() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn j(&self) -> usize {
        match &self.form {
            Form::Gram { moment, .. } => moment.len(),
            Form::Direct { e, .. } => e.ncols(),
        }
    }

    /// Writes `Δ` into `delta` and returns the loss at `theta`.
    pub fn evaluate(&self, theta: &[f64], delta: &mut [f64]) -> f64 {
        let th = ArrayView1::from(theta);
        match &self.form {
            Form::Gram { cov, moment, y_sq } => {
                let ct = cov.dot(&th);
                let mut quad = 0.0;
                let mut lin = 0.0;
                for j in 0..theta.len() {
                    delta[j] = moment[j] - ct[j];
                    quad += theta[j] * ct[j];
                    lin += theta[j] * moment[j];
                }
                (0.5 * (y_sq - 2.0 * lin + quad)).max(0.0)
            }
            Form::Direct { e, y } => {
                let res = y - &e.dot(&th);
                let g = e.t().dot(&res) / self.n as f64;
                delta.copy_from_slice(g.as_slice().expect("contiguous"));
                0.5 * res.dot(&res) / self.n as f64
            }
        }
    }

    /// Loss only.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let mut scratch = vec![0.0; theta.len()];
        self.evaluate(theta, &mut scratch)
    }
}

/// Inputs of a concentration audit.
#[derive(Clone, Debug)]
pub struct AuditSpec<'a> {
    pub spectrum: &'a OrderedSpectrum,
    pub truth: &'a CoefficientVector,
    pub n: usize,
    /// Positions (0-based) forming the set `S`; the rest of the spectrum is `R`.
    pub s_set: Vec<usize>,
    pub reps: usize,
    pub sigma: f64,
    pub seed: u64,
    /// `(flat rank k, element e_k)` probed by the audit.
    pub probes: Vec<(u64, BasisElement)>,
}

/// Probe grid `k ∈ 1..J` plus, for one-dimensional spectra, ranks
/// `2J, 4J, …` up to `J·2^levels`.
pub fn default_probes(spectrum: &OrderedSpectrum, levels: u32) -> Vec<(u64, BasisElement)> {
    let mut out: Vec<(u64, BasisElement)> = spectrum
        .elements()
        .iter()
        .zip(spectrum.ranks())
        .map(|(e, &r)| (r, e.clone()))
        .collect();
    if spectrum.dim() == 1 {
        let top = spectrum.ranks().iter().copied().max().unwrap_or(1);
        for l in 1..=levels {
            let k = top << l;
            if let Ok(e) = BasisElement::from_rank_1d(k) {
                out.push((k, e));
            }
        }
    }
    out
}

/// Four statistics, in order: noise term, signal remainder along `R`,
/// covariance error on `S`, eigenvalue-weighted covariance error on `R`.
pub const STATISTICS: [&str; 4] = ["noise", "signal_remainder", "covariance_s", "weighted_covariance_r"];

/// Quantiles of the normalized and raw statistics over replications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub reps: usize,
    pub quantile_level: f64,
    pub probe_ranks: Vec<u64>,
    pub s_size: usize,
    /// `1 − 1/n²` empirical quantile of `max_k √n·|stat_k|/√(norm·ln(nk))`.
    pub normalized_quantiles: [f64; 4],
    /// Same quantile of `max_k |stat_k|`.
    pub raw_quantiles: [f64; 4],
    /// Largest raw maximum seen across replications.
    pub raw_maxima: [f64; 4],
    /// Smallest constant bounding all four normalized quantiles.
    pub fitted_constant: f64,
}

fn empirical_quantile(values: &mut [f64], level: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((level * values.len() as f64).ceil() as usize).clamp(1, values.len()) - 1;
    values[idx]
}

pub fn concentration_audit(spec: &AuditSpec<'_>) -> Result<ConcentrationReport> {
    let j = spec.spectrum.len();
    if spec.s_set.is_empty() {
        return invalid("the set S must not be empty");
    }
    if spec.s_set.iter().any(|&s| s >= j) {
        return invalid("S must index into the spectrum");
    }
    if spec.reps < 30 {
        return invalid(format!("need at least 30 replications, got {}", spec.reps));
    }
    if spec.truth.len() != j {
        return Err(Error::DimensionMismatch { expected: j, got: spec.truth.len() });
    }
    if spec.probes.is_empty() {
        return invalid("probe grid is empty");
    }
    let mut in_s = vec![false; j];
    for &s in &spec.s_set {
        in_s[s] = true;
    }
    let lam = spec.spectrum.eigenvalues();
    let theta_r_l1: f64 = (0..j).filter(|&i| !in_s[i]).map(|i| spec.truth.theta[i].abs()).sum();
    let trace_r: f64 = (0..j).filter(|&i| !in_s[i]).map(|i| lam[i]).sum();
    let s_size = spec.s_set.len() as f64;
    let norms = [1.0, theta_r_l1, s_size, trace_r];
    let rank_pos: std::collections::HashMap<u64, usize> =
        spec.spectrum.ranks().iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let probe_elements: Vec<BasisElement> = spec.probes.iter().map(|(_, e)| e.clone()).collect();
    let n = spec.n;
    let nf = n as f64;

    let per_rep: Vec<([f64; 4], [f64; 4])> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| -> Result<([f64; 4], [f64; 4])> {
            let data = sample_dataset(spec.truth, spec.spectrum, n, spec.sigma, spec.seed, cell_stream(n, rep))?;
            let clean = sample_dataset(spec.truth, spec.spectrum, n, 0.0, spec.seed, cell_stream(n, rep))?;
            let e = DesignMatrix::build(spec.spectrum, &data)?;
            let probes = DesignMatrix::from_elements(&probe_elements, &data);
            let noise = Array1::from_iter(data.y.iter().zip(&clean.y).map(|(y, f)| y - f));
            // Rows of Σ̂ between probes and model elements.
            let cross = probes.matrix().t().dot(e.matrix()) / nf;
            let r_vec = probes.matrix().t().dot(&noise) / nf;
            let mut norm_max = [0.0f64; 4];
            let mut raw_max = [0.0f64; 4];
            for (p, (k, _)) in spec.probes.iter().enumerate() {
                let row = cross.row(p);
                let own = rank_pos.get(k).copied();
                let mut s2 = 0.0;
                let mut s3 = 0.0;
                let mut s4 = 0.0;
                for i in 0..j {
                    let c = row[i] - if own == Some(i) { 1.0 } else { 0.0 };
                    if in_s[i] {
                        s3 += c * c;
                    } else {
                        s2 += c * spec.truth.theta[i];
                        s4 += c * c * lam[i];
                    }
                }
                let stats = [r_vec[p].abs(), s2.abs(), s3.sqrt(), s4.sqrt()];
                let log_nk = (nf * *k as f64).ln();
                for q in 0..4 {
                    raw_max[q] = raw_max[q].max(stats[q]);
                    if norms[q] > 0.0 {
                        let v = nf.sqrt() * stats[q] / (norms[q] * log_nk).sqrt();
                        norm_max[q] = norm_max[q].max(v);
                    }
                }
            }
            Ok((norm_max, raw_max))
        })
        .collect::<Result<Vec<_>>>()?;

    let level = 1.0 - 1.0 / (nf * nf);
    let mut normalized_quantiles = [0.0; 4];
    let mut raw_quantiles = [0.0; 4];
    let mut raw_maxima = [0.0f64; 4];
    for q in 0..4 {
        let mut a: Vec<f64> = per_rep.iter().map(|r| r.0[q]).collect();
        let mut b: Vec<f64> = per_rep.iter().map(|r| r.1[q]).collect();
        normalized_quantiles[q] = empirical_quantile(&mut a, level);
        raw_quantiles[q] = empirical_quantile(&mut b, level);
        raw_maxima[q] = b.iter().fold(0.0f64, |m, v| m.max(*v));
    }
    let fitted_constant = normalized_quantiles.iter().fold(0.0f64, |m, v| m.max(*v));
    Ok(ConcentrationReport {
        n,
        reps: spec.reps,
        quantile_level: level,
        probe_ranks: spec.probes.iter().map(|(k, _)| *k).collect(),
        s_size: spec.s_set.len(),
        normalized_quantiles,
        raw_quantiles,
        raw_maxima,
        fitted_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{cosine_target, cosine_target_coeffs};
    use approx::assert_relative_eq;

    fn spectrum_1d(m: i64) -> OrderedSpectrum {
        OrderedSpectrum::sobolev(1, m, 1.0).unwrap()
    }

    #[test]
    fn zero_truth_zero_noise() {
        let s = spectrum_1d(3);
        let t = CoefficientVector::exact(vec![0.0; s.len()]).unwrap();
        let d = sample_dataset(&t, &s, 20, 0.0, 1, 0).unwrap();
        assert!(d.y.iter().all(|&y| y == 0.0));
        assert!(d.x.iter().all(|x| (-1.0..1.0).contains(x)));
    }

    #[test]
    fn cosine_target_sampled_exactly() {
        let d = sample_dataset_with(cosine_target, 2, 50, 0.0, 3, 0).unwrap();
        for i in 0..d.n() {
            assert_relative_eq!(d.y[i], (7.5 * std::f64::consts::PI * d.point(i)[0]).cos(), epsilon = 1e-15);
        }
        // Truncated expansion with a large frequency cut agrees closely.
        let s = OrderedSpectrum::sobolev(1, 400, 1.0).unwrap();
        let c = cosine_target_coeffs(&s).unwrap();
        let e = DesignMatrix::build(&s, &sample_dataset_with(cosine_target, 1, 20, 0.0, 3, 0).unwrap()).unwrap();
        let direct = sample_dataset_with(cosine_target, 1, 20, 0.0, 3, 0).unwrap();
        for (p, y) in e.predict(&c.theta).iter().zip(&direct.y) {
            assert!((p - y).abs() < 2e-3, "{p} vs {y}");
        }
    }

    #[test]
    fn deterministic_datasets() {
        let s = spectrum_1d(4);
        let t = CoefficientVector::exact((0..s.len()).map(|i| 1.0 / (i as f64 + 1.0)).collect()).unwrap();
        let a = sample_dataset(&t, &s, 30, 0.3, 11, 5).unwrap();
        let b = sample_dataset(&t, &s, 30, 0.3, 11, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_dataset(&t, &s, 30, 0.3, 11, 6).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn gradient_hand_example() {
        let s = spectrum_1d(0);
        let data = Dataset { d: 1, x: vec![0.2], y: vec![1.0], sigma: 0.0, seed: 0, stream: 0 };
        let e = DesignMatrix::build(&s, &data).unwrap();
        assert_eq!(residual_gradient(&e, &data.y, &[0.0]).unwrap(), vec![1.0]);
        assert!(residual_gradient(&e, &data.y, &[0.0, 1.0]).is_err());
        assert!(residual_gradient(&e, &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn gradient_vanishes_at_truth() {
        let s = spectrum_1d(5);
        let t = CoefficientVector::exact((0..s.len()).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let data = sample_dataset(&t, &s, 40, 0.0, 2, 0).unwrap();
        let e = DesignMatrix::build(&s, &data).unwrap();
        let g = residual_gradient(&e, &data.y, &t.theta).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn gram_and_direct_forms_agree() {
        let s = spectrum_1d(6);
        let t = CoefficientVector::exact((0..s.len()).map(|i| 0.5f64.powi(i as i32)).collect()).unwrap();
        let data = sample_dataset(&t, &s, 60, 0.4, 9, 1).unwrap();
        let e = DesignMatrix::build(&s, &data).unwrap();
        let theta: Vec<f64> = (0..s.len()).map(|i| 0.1 * i as f64).collect();
        let mut g1 = vec![0.0; s.len()];
        let mut g2 = vec![0.0; s.len()];
        let l1 = LeastSquares::gram(&e, &data.y).evaluate(&theta, &mut g1);
        let l2 = LeastSquares::direct(&e, &data.y).evaluate(&theta, &mut g2);
        assert_relative_eq!(l1, l2, epsilon = 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn audit_rejects_bad_inputs() {
        let s = spectrum_1d(3);
        let t = CoefficientVector::exact(vec![0.0; s.len()]).unwrap();
        let mut spec = AuditSpec {
            spectrum: &s,
            truth: &t,
            n: 16,
            s_set: vec![],
            reps: 30,
            sigma: 0.0,
            seed: 0,
            probes: default_probes(&s, 2),
        };
        assert!(concentration_audit(&spec).is_err());
        spec.s_set = vec![0];
        spec.reps = 10;
        assert!(concentration_audit(&spec).is_err());
    }

    #[test]
    fn noiseless_audit_has_zero_noise_statistic() {
        let s = spectrum_1d(4);
        let t = CoefficientVector::exact((0..s.len()).map(|i| 1.0 / (i as f64 + 1.0)).collect()).unwrap();
        let spec = AuditSpec {
            spectrum: &s,
            truth: &t,
            n: 64,
            s_set: vec![0, 1, 2],
            reps: 30,
            sigma: 0.0,
            seed: 4,
            probes: default_probes(&s, 3),
        };
        let rep = concentration_audit(&spec).unwrap();
        assert_eq!(rep.normalized_quantiles[0], 0.0);
        assert!(rep.fitted_constant > 0.0);
        assert_eq!(rep.probe_ranks.len(), s.len() + 3);
    }
}
