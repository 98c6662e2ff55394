use dfu_core::diffusion::*;
use dfu_core::grid::GridFunction;
use dfu_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: usize, rng: &mut ChaCha8Rng) -> GridFunction {
    GridFunction::new(1, r, (0..r * r).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn oracle_battery_passes() {
    let checks = oracle_suite(7).unwrap();
    for c in &checks {
        println!("{:40} {:>12.3e} < {:<8.1e} {} {}", c.name, c.value, c.tolerance, c.passed, c.detail);
    }
    assert!(checks.iter().all(|c| c.passed));
}

#[test]
fn eigenvalues_are_sorted_and_trace_class_flagged() {
    let c = CovarianceOperator::new(2.0, None).unwrap();
    let b = KlBasis::new(&c, 8).unwrap();
    assert_eq!(b.len(), 64);
    assert!(b.modes().windows(2).all(|w| w[0].eigenvalue >= w[1].eigenvalue));
    assert!(c.is_trace_class());
    assert!(!CovarianceOperator::WHITE.is_trace_class());
    assert!(CovarianceOperator::new(-1.0, None).is_err());
}

#[test]
fn basis_is_orthonormal() {
    let b = KlBasis::new(&CovarianceOperator::new(1.5, None).unwrap(), 6).unwrap();
    for i in 0..b.len() {
        for j in 0..b.len() {
            let d: f64 = b.vector(i).iter().zip(b.vector(j)).map(|(p, q)| p * q).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-12, "({i},{j}) {d}");
        }
    }
}

#[test]
fn single_mode_noise_is_constant() {
    let c = CovarianceOperator::new(2.0, Some(1)).unwrap();
    let x = kl_noise(&c, 8, 1, &mut rng(1)).unwrap();
    let v = x.values();
    assert!(v.iter().all(|p| (p - v[0]).abs() < 1e-12));
    assert!(v[0] != 0.0);
}

#[test]
fn white_noise_has_unit_pixel_variance() {
    let c = CovarianceOperator::WHITE;
    let mut g = rng(2);
    let (mut acc, mut n) = (0.0, 0usize);
    for _ in 0..10_000 {
        let x = kl_noise(&c, 8, 1, &mut g).unwrap();
        acc += x.values().iter().map(|v| v * v).sum::<f64>();
        n += 64;
    }
    assert!((acc / n as f64 - 1.0).abs() < 0.05);
}

#[test]
fn full_basis_with_flat_spectrum_matches_white_noise_variance() {
    // α=0 through the eigenbasis instead of the per-pixel shortcut.
    let c = CovarianceOperator::new(0.0, Some(64)).unwrap();
    let b = KlBasis::new(&c, 8).unwrap();
    let mut g = rng(3);
    let (mut acc, mut n) = (0.0, 0usize);
    for _ in 0..10_000 {
        let x = kl_noise_with(&b, 1, &mut g).unwrap();
        acc += x.values().iter().map(|v| v * v).sum::<f64>();
        n += 64;
    }
    assert!((acc / n as f64 - 1.0).abs() < 0.05);
}

#[test]
fn truncation_beyond_grid_is_an_error() {
    let c = CovarianceOperator::new(2.0, Some(65)).unwrap();
    assert!(matches!(kl_noise(&c, 8, 1, &mut rng(0)), Err(Error::Truncation { .. })));
}

#[test]
fn perturb_at_zero_is_identity() {
    let x0 = randn(8, &mut rng(4));
    let (xt, _) = perturb(&x0, 0.0, &CovarianceOperator::WHITE, &mut rng(5)).unwrap();
    assert_eq!(xt, x0);
    assert!(perturb(&x0, -1.0, &CovarianceOperator::WHITE, &mut rng(5)).is_err());
}

#[test]
fn stationary_data_has_static_gradient() {
    let c = CovarianceOperator::new(2.0, None).unwrap();
    let b = KlBasis::new(&c, 6).unwrap();
    let data = GaussianData::stationary(&b);
    let x = randn(6, &mut rng(6));
    let z = b.project(x.values());
    for t in [0.1, 1.0, 5.0] {
        let out = analytic_score(&x, t, &data, &b).unwrap();
        let g = b.project(out.grad_log_p.values());
        for k in 0..b.len() {
            let want = -z[k] / b.modes()[k].eigenvalue;
            assert!((g[k] - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }
}

#[test]
fn zero_input_has_zero_score() {
    let c = CovarianceOperator::new(2.0, None).unwrap();
    let b = KlBasis::new(&c, 4).unwrap();
    let data = GaussianData::stationary(&b);
    let out = analytic_score(&GridFunction::zeros(1, 4), 0.5, &data, &b).unwrap();
    assert!(out.score.values().iter().all(|v| *v == 0.0));
}

#[test]
fn score_at_t_zero_is_singular() {
    let b = KlBasis::new(&CovarianceOperator::new(2.0, None).unwrap(), 4).unwrap();
    let data = GaussianData::stationary(&b);
    let r = analytic_score(&GridFunction::zeros(1, 4), 0.0, &data, &b);
    assert!(matches!(r, Err(Error::Singular(_))));
}

#[test]
fn single_mode_gradient_matches_finite_difference_of_log_density() {
    // One coordinate, s = λ = 1, t = ln 2: p_t = a²s + vλ = 1.
    let c = CovarianceOperator::new(0.0, Some(1)).unwrap();
    let b = KlBasis::new(&c, 1).unwrap();
    let data = GaussianData::new(GridFunction::zeros(1, 1), vec![1.0]).unwrap();
    let t = 2f64.ln();
    let out = analytic_score(&GridFunction::constant(1, 1, 1.0), t, &data, &b).unwrap();
    let g = out.grad_log_p.values()[0];
    let var = (-t).exp() + (1.0 - (-t).exp());
    let logp = |x: f64| -0.5 * x * x / var - 0.5 * (std::f64::consts::TAU * var).ln();
    let h = 1e-5;
    let fd = (logp(1.0 + h) - logp(1.0 - h)) / (2.0 * h);
    assert!((g + 1.0).abs() < 1e-12);
    assert!((g - fd).abs() < 1e-8);
}

#[test]
fn score_from_denoiser_identities() {
    let x = randn(4, &mut rng(7));
    let s = score_from_denoiser(&x, 0.7, &x).unwrap();
    assert!(s.values().iter().all(|v| *v == 0.0));
    let d = randn(4, &mut rng(8));
    let s = score_from_denoiser(&GridFunction::zeros(1, 4), 1.0, &d).unwrap();
    assert_eq!(s, d);
    assert!(matches!(score_from_denoiser(&x, 0.0, &d), Err(Error::Singular(_))));
}

#[test]
fn exact_denoiser_gives_the_ve_gradient() {
    let c = CovarianceOperator::WHITE;
    let b = KlBasis::new(&c, 6).unwrap();
    let var: Vec<f64> = b.modes().iter().map(|m| 1.0 / (1.0 + (m.m.0.pow(2) + m.m.1.pow(2)) as f64)).collect();
    let data = GaussianData::new(GridFunction::zeros(1, 6), var.clone()).unwrap();
    let x = randn(6, &mut rng(9));
    for sigma in [0.1, 0.8, 3.0] {
        let (post, grad) = ve_posterior(&x, sigma, &data, &b).unwrap();
        let s = score_from_denoiser(&x, sigma, &post).unwrap();
        // Independent closed form: ∇log p = −x_k / (s_k + σ²).
        let z = b.project(x.values());
        let coords: Vec<f64> = z.iter().zip(&var).map(|(x, s)| -x / (s + sigma * sigma)).collect();
        let want = b.synthesize(&coords);
        assert!(s.max_abs_diff(&GridFunction::new(1, 6, want).unwrap()).unwrap() < 1e-8);
        assert!(s.max_abs_diff(&grad).unwrap() < 1e-8);
    }
}

#[test]
fn schedule_shape_and_endpoints() {
    let s = DiffusionSchedule::standard(18);
    assert_eq!(s.steps(), 18);
    assert_eq!(s.sigmas.len(), 19);
    assert_eq!(s.evaluations(), 35);
    assert!((s.sigmas[0] - 80.0).abs() < 1e-9);
    assert!((s.sigmas[17] - 0.002).abs() < 1e-12);
    assert_eq!(s.sigmas[18], 0.0);
    assert!(s.sigmas.windows(2).all(|w| w[0] > w[1]));
    assert!(DiffusionSchedule::new(0, 0.002, 80.0, 7.0).is_err());
    assert!(DiffusionSchedule::new(5, 1.0, 0.5, 7.0).is_err());
}

#[test]
fn sampler_counts_evaluations_and_is_seeded() {
    let c = CovarianceOperator::WHITE;
    let b = KlBasis::new(&c, 4).unwrap();
    let data = GaussianData::stationary(&b);
    let sched = DiffusionSchedule::standard(18);
    let run = |seed| {
        let mut d = GaussianDenoiser { data: &data, basis: &b };
        sample(&mut d, 3, 4, 1, &sched, &c, &mut rng(seed)).unwrap()
    };
    let (a, b2) = (run(11), run(11));
    assert_eq!(a.evaluations, 35);
    assert_eq!(a.samples, b2.samples);
    assert_ne!(a.samples, run(12).samples);
}

#[test]
fn heun_errors_shrink_at_second_order() {
    let rep = heun_convergence(0.25, &[9, 18, 36]).unwrap();
    assert!(rep.ratios.iter().all(|q| (3.0..=5.0).contains(q)), "{rep:?}");
}

#[test]
fn eighteen_step_sampler_reproduces_its_discretized_flow() {
    let tv = terminal_variance_check(8, 4096, 18, 3).unwrap();
    assert!(tv.discretized_error() < 0.02, "{tv:?}");
    // The bias against the data law is a property of the schedule, not noise.
    assert!(tv.relative_error() > 0.05, "{tv:?}");
}

#[test]
fn fine_sampler_reaches_the_data_law() {
    let tv = terminal_variance_check(8, 4096, 64, 4).unwrap();
    assert!(tv.relative_error() < 0.02, "{tv:?}");
}

#[test]
fn low_mode_noise_covariance_is_resolution_independent() {
    let c = CovarianceOperator::new(2.0, Some(5)).unwrap();
    let mut vars = Vec::new();
    for r in [8, 16] {
        let b = KlBasis::new(&c, r).unwrap();
        let mut g = rng(21);
        let mut acc = vec![0.0; 5];
        for _ in 0..4000 {
            let z = b.project(kl_noise_with(&b, 1, &mut g).unwrap().values());
            for k in 0..5 {
                acc[k] += z[k] * z[k] / 4000.0;
            }
        }
        vars.push(acc);
    }
    for k in 0..5 {
        assert!((vars[0][k] / vars[1][k] - 1.0).abs() < 0.1);
    }
}

#[test]
fn time_and_sigma_round_trip() {
    for t in [0.01, 0.5, 2.0, 7.0] {
        assert!((time_of_sigma(sigma_of_time(t)) - t).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn analytic_score_sign_is_consistent(seed in 0u64..1000, t in 0.01f64..6.0, alpha in 0.5f64..3.0) {
        let c = CovarianceOperator::new(alpha, None).unwrap();
        let b = KlBasis::new(&c, 4).unwrap();
        let mut g = rng(seed);
        let var: Vec<f64> = b.modes().iter().map(|_| g.random_range(0.0..2.0)).collect();
        let data = GaussianData::new(GridFunction::zeros(1, 4), var).unwrap();
        // analytic_score asserts s = −C∇log p internally.
        let out = analytic_score(&randn(4, &mut g), t, &data, &b).unwrap();
        prop_assert!(out.score.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn project_then_synthesize_is_identity(seed in 0u64..1000, r in 2usize..7) {
        let b = KlBasis::new(&CovarianceOperator::new(1.0, None).unwrap(), r).unwrap();
        let x = randn(r, &mut rng(seed));
        let back = b.synthesize(&b.project(x.values()));
        for (p, q) in back.iter().zip(x.values()) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn schedules_are_strictly_decreasing(n in 1usize..60, lo in 0.001f64..0.1, hi in 1.0f64..100.0, rho in 1.0f64..10.0) {
        let s = DiffusionSchedule::new(n, lo, hi, rho).unwrap();
        prop_assert_eq!(*s.sigmas.last().unwrap(), 0.0);
        prop_assert!(s.sigmas.windows(2).all(|w| w[0] > w[1]));
    }
}
