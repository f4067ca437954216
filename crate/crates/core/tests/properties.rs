mod common;

use adaptive_kernel::analysis::{fit_rate, ErrorCurve};
use adaptive_kernel::basis::OrderedSpectrum;
use adaptive_kernel::dynamics::{effective_coeffs, gd_step_adaptive, init_state};
use adaptive_kernel::onedim::{drive, Perturbation, ScalarParams};
use adaptive_kernel::sampling::{residual_gradient, rng_for, sample_dataset, LeastSquares};
use adaptive_kernel::signals::{phi_of, psi_of, theoretical_rates, RateForm};
use adaptive_kernel::{CoefficientVector, DesignMatrix};
use proptest::prelude::*;
use rand::Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn spectra_are_sorted_and_resorting_is_idempotent(d in 1usize..=3, max_freq in 1i64..=4, extra in 0.1f64..2.0) {
        let r = d as f64 / 2.0 + extra;
        let s = OrderedSpectrum::sobolev(d, max_freq, r).unwrap();
        prop_assert!(s.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.is_sorted());
        let again = OrderedSpectrum::from_parts(s.elements().to_vec(), s.eigenvalues().to_vec()).unwrap();
        prop_assert_eq!(again.eigenvalues(), s.eigenvalues());
        prop_assert_eq!(again.elements(), s.elements());
    }

    #[test]
    fn phi_and_psi_are_monotone(theta in prop::collection::vec(-2.0f64..2.0, 1..40), tail in 0.0f64..1.0,
                                d1 in 1e-4f64..3.0, d2 in 1e-4f64..3.0) {
        let c = CoefficientVector::new(theta.clone(), tail, true).unwrap();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(phi_of(&c, lo).unwrap() >= phi_of(&c, hi).unwrap());
        prop_assert!(psi_of(&c, lo).unwrap() <= psi_of(&c, hi).unwrap() + 1e-15);
        let energy: f64 = theta.iter().map(|t| t * t).sum::<f64>() + tail;
        prop_assert!((psi_of(&c, 1e6).unwrap() - energy).abs() <= 1e-12 * (1.0 + energy));
    }

    #[test]
    fn adaptive_exponent_dominates_fixed(p in 0.1f64..4.0, q in 1.0f64..8.0, t in 0.2f64..4.0, d in 1usize..6, d0_off in 0usize..6) {
        let m = theoretical_rates(RateForm::Misalignment { p, q }).unwrap();
        prop_assert!(m.adaptive_exponent >= m.fixed_exponent);
        prop_assert_eq!(m.adaptive_exponent == m.fixed_exponent, q == 1.0);
        let d0 = d.saturating_sub(d0_off).max(1);
        let l = theoretical_rates(RateForm::LowDim { t_smooth: t, d, d0 }).unwrap();
        prop_assert!(l.adaptive_exponent >= l.fixed_exponent);
        prop_assert_eq!(l.adaptive_exponent == l.fixed_exponent, d0 == d);
    }

    #[test]
    fn distance_to_target_shrinks_outside_the_perturbation_band(
        lambda in 1e-3f64..1.0, z in 0.05f64..1.0, kappa_frac in 0.02f64..1.0,
        values in prop::collection::vec(-1.0f64..1.0, 1..6), lengths in prop::collection::vec(0.5f64..20.0, 6),
        negative_z in any::<bool>(),
    ) {
        let z = if negative_z { -z } else { z };
        let kappa = kappa_frac * z.abs();
        let mut segments = Vec::new();
        let mut start = 0.0;
        for (v, len) in values.iter().zip(&lengths) {
            segments.push((start, v * kappa));
            start += len;
        }
        let p = ScalarParams::two_layer(lambda, z, Perturbation::Piecewise { segments });
        let dt = 1e-2;
        let tol = 1e-8;
        let mut prev: Option<f64> = None;
        let mut trapped = false;
        let mut worst = 0.0f64;
        drive(&p, 4.0 * start + 10.0 / (z.abs() * lambda.sqrt()).max(1e-3), dt, |_, s| {
            let dist = (z - s.theta(0)).abs();
            if let Some(pd) = prev {
                if pd >= kappa {
                    worst = worst.max(dist - pd);
                }
            }
            if trapped {
                worst = worst.max(dist - kappa);
            }
            trapped |= dist <= kappa;
            prev = Some(dist);
            true
        }).unwrap();
        prop_assert!(worst <= tol, "distance grew by {worst}");
    }

    #[test]
    fn fit_rate_recovers_planted_exponents(alpha in 0.1f64..1.5, scale in 0.1f64..10.0, seed in 0u64..1000) {
        let mut rng = rng_for(seed, 77);
        let points: Vec<(usize, Vec<f64>)> = (0..6)
            .map(|k| {
                let n = 100usize << k;
                let reps = (0..16).map(|_| scale * (n as f64).powf(-alpha) * (1.0 + rng.random_range(-0.2..0.2))).collect();
                (n, reps)
            })
            .collect();
        let fit = fit_rate(&ErrorCurve::new("planted", 0, points).unwrap()).unwrap();
        prop_assert!((fit.slope + alpha).abs() <= 0.1, "slope {} vs {}", fit.slope, -alpha);
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn separate_depth_layers_stay_equal_and_match_the_shared_model(depth in 1u32..=3, j in 1usize..=5, seed in 0u64..1000) {
        let ranks: Vec<u64> = (1..=j as u64).collect();
        let spectrum = OrderedSpectrum::power_law_1d(&ranks, 2.0).unwrap();
        let mut rng = rng_for(seed, 3);
        let truth = CoefficientVector::exact((0..j).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let data = sample_dataset(&truth, &spectrum, 40, 0.2, seed, 0).unwrap();
        let design = DesignMatrix::build(&spectrum, &data).unwrap();
        let b0 = rng.random_range(0.3..1.2);
        let eta = 0.05;

        let mut shared = init_state(&spectrum, depth, b0).unwrap();
        let mut a: Vec<f64> = spectrum.eigenvalues().iter().map(|l| l.sqrt()).collect();
        let mut beta = vec![0.0; j];
        let mut layers = vec![vec![b0; j]; depth as usize];
        for _ in 0..400 {
            let theta: Vec<f64> = (0..j).map(|k| a[k] * layers.iter().map(|l| l[k]).product::<f64>() * beta[k]).collect();
            let delta = residual_gradient(&design, &data.y, &theta).unwrap();
            let mut next = layers.clone();
            for k in 0..j {
                let prod: f64 = layers.iter().map(|l| l[k]).product();
                for (li, layer) in next.iter_mut().enumerate() {
                    let others: f64 = layers.iter().enumerate().filter(|(m, _)| *m != li).map(|(_, l)| l[k]).product();
                    layer[k] += eta * depth as f64 * a[k] * others * beta[k] * delta[k];
                }
                let (ak, bk) = (a[k], beta[k]);
                beta[k] = bk + eta * ak * prod * delta[k];
                a[k] = ak + eta * prod * bk * delta[k];
            }
            layers = next;
            for k in 0..j {
                prop_assert!(layers.iter().all(|l| l[k].to_bits() == layers[0][k].to_bits()));
            }
            let shared_theta = effective_coeffs(&shared);
            let shared_delta = residual_gradient(&design, &data.y, &shared_theta).unwrap();
            gd_step_adaptive(&mut shared, &shared_delta, eta).unwrap();
        }
        for k in 0..j {
            prop_assert!((layers[0][k] - shared.b[k]).abs() <= 1e-10 * shared.b[k].abs().max(1.0));
            prop_assert!((a[k] - shared.a[k]).abs() <= 1e-10 * shared.a[k].abs().max(1.0));
            prop_assert!((beta[k] - shared.beta[k]).abs() <= 1e-10 * shared.beta[k].abs().max(1.0));
        }
    }

    #[test]
    fn training_keeps_scales_positive_and_descends(depth in 0u32..=2, j in 2usize..=20, n in 10usize..=100, seed in 0u64..1000) {
        let ranks: Vec<u64> = (1..=j as u64).collect();
        let spectrum = OrderedSpectrum::power_law_1d(&ranks, 2.0).unwrap();
        let mut rng = rng_for(seed, 4);
        let truth = CoefficientVector::exact((0..j).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let sigma = 0.3;
        let data = sample_dataset(&truth, &spectrum, n, sigma, seed, 0).unwrap();
        let design = DesignMatrix::build(&spectrum, &data).unwrap();
        let ls = LeastSquares::new(&design, &data.y);
        let eta = 0.25 / (1.0 + truth.sup_bound + sigma);
        let mut state = init_state(&spectrum, depth, 0.8).unwrap();
        let mut delta = vec![0.0; j];
        let mut prev = f64::INFINITY;
        for step in 0..2000 {
            let loss = ls.evaluate(&effective_coeffs(&state), &mut delta);
            prop_assert!(loss <= prev * (1.0 + 1e-12) + 1e-15, "loss rose at step {step}: {prev} -> {loss}");
            prev = loss;
            gd_step_adaptive(&mut state, &delta, eta).unwrap();
            prop_assert!(state.a.iter().all(|&a| a > 0.0));
            prop_assert!(state.b.iter().all(|&b| b > 0.0));
        }
    }

    #[test]
    fn datasets_depend_only_on_seed_and_stream(seed in 0u64..1_000_000, stream in 0u64..1_000_000) {
        let spectrum = OrderedSpectrum::power_law_1d(&[1, 2, 3, 4], 2.0).unwrap();
        let truth = CoefficientVector::exact(vec![0.5, -0.25, 0.1, 0.0]).unwrap();
        let a = sample_dataset(&truth, &spectrum, 30, 0.5, seed, stream).unwrap();
        let b = sample_dataset(&truth, &spectrum, 30, 0.5, seed, stream).unwrap();
        let c = sample_dataset(&truth, &spectrum, 30, 0.5, seed, stream + 1).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a.x, &c.x);
    }
}
