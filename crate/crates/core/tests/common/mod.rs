//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use adaptive_kernel::basis::eval_basis;
use adaptive_kernel::dynamics::{gd_step_adaptive, gd_step_fixed};
use adaptive_kernel::sampling::{residual_gradient, rng_for, sample_dataset};
use adaptive_kernel::{CoefficientVector, Dataset, DesignMatrix, ModelState, OrderedSpectrum};
use rand::seq::index::sample;
use rand::Rng;

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// `∫_{-1}^{1} f` by composite Gauss–Legendre.
pub fn integrate(f: impl Fn(f64) -> f64, panels: usize, order: usize) -> f64 {
    let (x, w) = gauss_legendre(order);
    let h = 2.0 / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = -1.0 + (p as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(&w) {
            total += wi * f(mid + 0.5 * h * xi) * 0.5 * h;
        }
    }
    total
}

/// `‖Y − Σ_j θ_j e_j(X)‖² / (2n)` evaluated point by point.
pub fn loss_oracle(spectrum: &OrderedSpectrum, data: &Dataset, theta: &[f64]) -> f64 {
    let n = data.n();
    let mut total = 0.0;
    for i in 0..n {
        let x = data.point(i);
        let f: f64 = spectrum.elements().iter().zip(theta).map(|(e, t)| t * eval_basis(e, x)).sum();
        let r = data.y[i] - f;
        total += r * r;
    }
    total / (2.0 * n as f64)
}

fn theta_of(a: &[f64], b: &[f64], beta: &[f64], depth: u32) -> Vec<f64> {
    (0..a.len())
        .map(|j| a[j] * if depth == 0 { 1.0 } else { b[j].powi(depth as i32) } * beta[j])
        .collect()
}

/// A random regression instance for gradient checks.
pub struct GradInstance {
    pub spectrum: OrderedSpectrum,
    pub data: Dataset,
    pub state: ModelState,
}

pub fn grad_instance(seed: u64, depth: u32) -> GradInstance {
    let mut rng = rng_for(seed, 0xF1D);
    let j = rng.random_range(2..=30usize);
    let n = rng.random_range(5..=100usize);
    let ranks: Vec<u64> = sample(&mut rng, 200, j).into_iter().map(|r| r as u64 + 1).collect();
    let spectrum = OrderedSpectrum::power_law_1d(&ranks, 2.0).unwrap();
    let truth = CoefficientVector::exact((0..j).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let data = sample_dataset(&truth, &spectrum, n, 0.3, seed, 1).unwrap();
    let state = ModelState {
        a: (0..j).map(|_| rng.random_range(0.2..1.5)).collect(),
        b: if depth >= 1 { (0..j).map(|_| rng.random_range(0.5..1.5)).collect() } else { Vec::new() },
        beta: (0..j).map(|_| rng.random_range(-1.0..1.0)).collect(),
        depth,
        lambda: spectrum.eigenvalues().to_vec(),
        b0: 1.0,
        frozen: vec![false; j],
    };
    GradInstance { spectrum, data, state }
}

/// Relative error between the library's update direction and minus the central
/// finite-difference gradient of the empirical loss in `(a, b, β)`.
pub fn adaptive_gradient_error(inst: &GradInstance) -> f64 {
    let s = &inst.state;
    let depth = s.depth;
    let design = DesignMatrix::build(&inst.spectrum, &inst.data).unwrap();
    let theta = theta_of(&s.a, &s.b, &s.beta, depth);
    let delta = residual_gradient(&design, &inst.data.y, &theta).unwrap();
    let mut stepped = s.clone();
    gd_step_adaptive(&mut stepped, &delta, 1.0).unwrap();

    let loss = |a: &[f64], b: &[f64], beta: &[f64]| loss_oracle(&inst.spectrum, &inst.data, &theta_of(a, b, beta, depth));
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..s.a.len() {
        let mut blocks: Vec<(f64, f64)> = Vec::new();
        let mut a = s.a.clone();
        a[j] += h;
        let up = loss(&a, &s.b, &s.beta);
        a[j] -= 2.0 * h;
        let down = loss(&a, &s.b, &s.beta);
        blocks.push((stepped.a[j] - s.a[j], -(up - down) / (2.0 * h)));
        let mut beta = s.beta.clone();
        beta[j] += h;
        let up = loss(&s.a, &s.b, &beta);
        beta[j] -= 2.0 * h;
        let down = loss(&s.a, &s.b, &beta);
        blocks.push((stepped.beta[j] - s.beta[j], -(up - down) / (2.0 * h)));
        if depth >= 1 {
            let mut b = s.b.clone();
            b[j] += h;
            let up = loss(&s.a, &b, &s.beta);
            b[j] -= 2.0 * h;
            let down = loss(&s.a, &b, &s.beta);
            blocks.push((stepped.b[j] - s.b[j], -(up - down) / (2.0 * h)));
        }
        for (analytic, fd) in blocks {
            num += (analytic - fd) * (analytic - fd);
            den += fd * fd;
        }
    }
    (num / den.max(1e-300)).sqrt()
}

/// Same check for the fixed kernel, whose update is `λ ⊙ (−∇_θ L)`.
pub fn fixed_gradient_error(inst: &GradInstance) -> f64 {
    let lambda = inst.spectrum.eigenvalues();
    let theta = inst.state.beta.clone();
    let design = DesignMatrix::build(&inst.spectrum, &inst.data).unwrap();
    let delta = residual_gradient(&design, &inst.data.y, &theta).unwrap();
    let mut stepped = theta.clone();
    gd_step_fixed(&mut stepped, lambda, &delta, 1.0).unwrap();
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..theta.len() {
        let mut t = theta.clone();
        t[j] += h;
        let up = loss_oracle(&inst.spectrum, &inst.data, &t);
        t[j] -= 2.0 * h;
        let down = loss_oracle(&inst.spectrum, &inst.data, &t);
        let fd = -lambda[j] * (up - down) / (2.0 * h);
        let analytic = stepped[j] - theta[j];
        num += (analytic - fd) * (analytic - fd);
        den += fd * fd;
    }
    (num / den.max(1e-300)).sqrt()
}

/// Monte Carlo estimate of `∫ (f_θ − f_full)² dμ` with its standard error.
pub fn mc_l2_distance(
    estimator_spec: &OrderedSpectrum,
    theta: &[f64],
    full_spec: &OrderedSpectrum,
    full_truth: &[f64],
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = rng_for(seed, 0x3C);
    let d = full_spec.dim();
    let mut x = vec![0.0; d];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let f: f64 = estimator_spec.elements().iter().zip(theta).map(|(e, t)| t * eval_basis(e, &x)).sum();
        let g: f64 = full_spec.elements().iter().zip(full_truth).map(|(e, t)| t * eval_basis(e, &x)).sum();
        let v = (f - g) * (f - g);
        sum += v;
        sum_sq += v * v;
    }
    let m = sum / samples as f64;
    let var = (sum_sq / samples as f64 - m * m).max(0.0);
    (m, (var / samples as f64).sqrt())
}

/// OLS slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
