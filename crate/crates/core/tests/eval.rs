use std::f64::consts::TAU;

use dfu_core::diffusion::{CovarianceOperator, GaussianData, GaussianDenoiser, KlBasis, ModelDenoiser};
use dfu_core::eval::*;
use dfu_core::grid::{resample, sample_on_grid, GridFunction, ResampleMethod, SyntheticKind, SyntheticSpec};
use dfu_core::model::{build, ModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn white(r: usize, rng: &mut impl Rng) -> GridFunction {
    GridFunction::new(1, r, (0..r * r).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn gaussian_set(n: usize, mean: &[f64], scale: &[f64], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| mean.iter().zip(scale).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn power_at(s: &RadialSpectrum, radius: usize) -> f64 {
    s.bins.iter().find(|b| b.radius == radius).map_or(0.0, |b| b.power * b.count as f64)
}

#[test]
fn single_mode_lands_in_bin_one() {
    let g = GridFunction::from_fn(1, 16, |_, x, _| (TAU * x).sin()).unwrap();
    let s = radial_spectrum(&g);
    let total = s.total_power();
    assert!((total - 0.5).abs() < 1e-12);
    assert!((power_at(&s, 1) - total).abs() < 1e-12);
}

#[test]
fn constant_lands_in_bin_zero() {
    let s = radial_spectrum(&GridFunction::constant(1, 12, 1.5));
    assert_eq!(s.bins[0].radius, 0);
    assert_eq!(s.bins[0].count, 1);
    assert!((s.bins[0].power - 2.25).abs() < 1e-12);
    assert!(s.bins[1..].iter().all(|b| b.power < 1e-24));
}

#[test]
fn white_noise_spectrum_is_flat() {
    let r = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spectra: Vec<_> = (0..1024).map(|_| radial_spectrum(&white(r, &mut rng))).collect();
    let avg = RadialSpectrum::average(&spectra).unwrap();
    // Unit pixel variance spreads evenly over r² modes.
    let per_mode = 1.0 / (r * r) as f64;
    for b in &avg.bins {
        assert!((b.power / per_mode - 1.0).abs() < 0.10, "bin {} power {}", b.radius, b.power / per_mode);
    }
}

#[test]
fn bins_are_ordered_with_nonnegative_power() {
    let g = white(15, &mut ChaCha8Rng::seed_from_u64(0));
    let s = radial_spectrum(&g);
    assert!(s.bins.windows(2).all(|w| w[0].mean_frequency < w[1].mean_frequency));
    assert!(s.bins.iter().all(|b| b.power >= 0.0));
    // Every full-plane mode is counted once.
    assert_eq!(s.bins.iter().map(|b| b.count).sum::<usize>(), 15 * 15);
}

#[test]
fn spectra_of_different_resolutions_do_not_compare() {
    let a = radial_spectrum(&GridFunction::constant(1, 8, 1.0));
    let b = radial_spectrum(&GridFunction::constant(1, 16, 1.0));
    assert!(relative_spectrum_error(&a, &b, 0, 4).is_err());
    assert!(RadialSpectrum::average(&[a, b]).is_err());
}

#[test]
fn band_errors_split_at_a_quarter_of_the_training_nyquist() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let set: Vec<_> = (0..8).map(|_| white(48, &mut rng)).collect();
    let e = band_errors(&set, &set, 32).unwrap();
    assert_eq!(e.split, 4);
    assert_eq!((e.coherence, e.fidelity), (0.0, 0.0));
    // Doubling amplitude quadruples power: relative error 3 in both bands.
    let loud: Vec<_> = set.iter().map(|g| g.scale(2.0).unwrap()).collect();
    let e = band_errors(&loud, &set, 32).unwrap();
    assert!((e.coherence - 3.0).abs() < 1e-9 && (e.fidelity - 3.0).abs() < 1e-9);
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = gaussian_set(200, &[1.0, -2.0, 0.5], &[1.0, 0.3, 2.0], &mut rng);
    assert!(frechet_gaussian(&a, &a).unwrap() < 1e-6);
}

#[test]
fn frechet_of_scaled_diagonal_gaussians() {
    // Σ_a = I, Σ_b = 4I in 2D: per axis 1 + 4 − 2·2 = 1.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = gaussian_set(20_000, &[0.0, 0.0], &[1.0, 1.0], &mut rng);
    let b = gaussian_set(20_000, &[0.0, 0.0], &[2.0, 2.0], &mut rng);
    let d = frechet_gaussian(&a, &b).unwrap();
    assert!((d - 2.0).abs() < 0.1, "{d}");
}

#[test]
fn frechet_of_a_mean_shift_is_its_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = gaussian_set(500, &[0.0, 0.0, 0.0], &[1.0, 0.5, 0.2], &mut rng);
    let shift = [0.3, -1.2, 0.4];
    let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
    let d2: f64 = shift.iter().map(|s| s * s).sum();
    assert!((frechet_gaussian(&a, &b).unwrap() - d2).abs() < 1e-9);
}

#[test]
fn frechet_rejects_mismatched_dimensions() {
    assert!(frechet_gaussian(&[vec![0.0, 1.0]], &[vec![0.0]]).is_err());
    assert!(frechet_gaussian(&[], &[vec![0.0]]).is_err());
}

#[test]
fn undersampled_sets_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = gaussian_set(5, &[0.0; 16], &[1.0; 16], &mut rng);
    let b = gaussian_set(5, &[0.0; 16], &[1.0; 16], &mut rng);
    let d = frechet_gaussian(&a, &b).unwrap();
    assert!(d.is_finite() && d > 0.0);
}

#[test]
fn lowres_features_ignore_spectral_refinement() {
    let spec = SyntheticSpec::new(SyntheticKind::GaussianProcess { alpha: 2.0, cutoff: 8 }, 1, 0);
    let g = sample_on_grid(&spec, 64, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let fine = resample(&g, 128, ResampleMethod::Spectral).unwrap();
    let fx = FeatureExtractor::FlattenLowres;
    let (a, b) = (fx.extract(&g).unwrap(), fx.extract(&fine).unwrap());
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(diff / norm < 0.05, "{}", diff / norm);
}

#[test]
fn extractors_are_deterministic_and_fixed_width() {
    let g = white(40, &mut ChaCha8Rng::seed_from_u64(8));
    for fx in [FeatureExtractor::FlattenLowres, FeatureExtractor::FixedRandomConv { seed: 3 }] {
        let a = fx.extract(&g).unwrap();
        assert_eq!(a, fx.extract(&g).unwrap());
        assert_eq!(a.len(), fx.extract(&GridFunction::zeros(1, 24)).unwrap().len());
    }
    let other = FeatureExtractor::FixedRandomConv { seed: 4 }.extract(&g).unwrap();
    assert_ne!(other, FeatureExtractor::FixedRandomConv { seed: 3 }.extract(&g).unwrap());
}

#[test]
fn proxy_fid_of_a_set_against_itself_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let set: Vec<_> = (0..40).map(|_| white(16, &mut rng)).collect();
    for fx in [FeatureExtractor::FlattenLowres, FeatureExtractor::FixedRandomConv { seed: 0 }] {
        assert!(proxy_fid(&set, &set, &fx).unwrap() < 1e-6);
    }
}

#[test]
fn oracle_against_itself_has_no_score_error() {
    let basis = KlBasis::new(&CovarianceOperator::WHITE, 12).unwrap();
    let data = GaussianData::stationary(&basis);
    let mut oracle = GaussianDenoiser { data: &data, basis: &basis };
    let rep = score_error(&mut oracle, &data, &basis, &PROBE_SIGMAS, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(rep.mean < 1e-10, "{}", rep.mean);
    assert_eq!(rep.probes, 16);
    assert_eq!(rep.skipped, 0);
}

#[test]
fn zero_oracle_scores_are_skipped() {
    // A point mass at zero probed without noise: every oracle score vanishes.
    let basis = KlBasis::new(&CovarianceOperator::WHITE, 8).unwrap();
    let data = GaussianData::new(GridFunction::zeros(1, 8), vec![0.0; basis.len()]).unwrap();
    let mut oracle = GaussianDenoiser { data: &data, basis: &basis };
    let rep = score_error(&mut oracle, &data, &basis, &[0.0], 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((rep.probes, rep.skipped), (0, 3));
    assert!(rep.mean.is_nan());
}

#[test]
fn untrained_network_is_uninformative() {
    let m = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let basis = KlBasis::new(&CovarianceOperator::WHITE, 16).unwrap();
    let data = GaussianData::from_spectrum(&dfu_core::grid::FieldSpectrum::gaussian_process(2.0, 7), &basis);
    let mut den = ModelDenoiser::new(&m);
    let rep = score_error(&mut den, &data, &basis, &[0.4], 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(rep.mean > 0.5, "{}", rep.mean);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spectrum_obeys_parseval(r in 3usize..20, seed in any::<u64>()) {
        let g = white(r, &mut ChaCha8Rng::seed_from_u64(seed));
        let ms = g.values().iter().map(|v| v * v).sum::<f64>() / (r * r) as f64;
        let total = radial_spectrum(&g).total_power();
        prop_assert!((total - ms).abs() <= 1e-8 * ms);
    }

    #[test]
    fn frechet_is_symmetric(seed in any::<u64>(), shift in -2.0f64..2.0, scale in 0.2f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian_set(30, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], &mut rng);
        let b = gaussian_set(30, &[shift, 0.0, 0.0], &[scale, 1.0, 0.5], &mut rng);
        let (ab, ba) = (frechet_gaussian(&a, &b).unwrap(), frechet_gaussian(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
    }
}
