use std::collections::BTreeSet;

use dfu_core::engine::Tensor;
use dfu_core::grid::GridFunction;
use dfu_core::model::*;
use dfu_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny(arch: Arch) -> ModelSpec {
    ModelSpec {
        arch,
        levels: 2,
        blocks_per_level: 1,
        base_channels: 4,
        channel_mult: vec![1, 2],
        spatial_k: if arch == Arch::FnoUnet { 1 } else { 3 },
        modes: 4,
        emb_dim: 8,
        data_channels: 1,
        train_resolution: None,
    }
}

fn noise(r: usize, seed: u64) -> GridFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GridFunction::new(1, r, (0..r * r).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[test]
fn paper_spec_layout() {
    let s = ModelSpec::paper();
    assert_eq!((s.levels, s.blocks_per_level, s.spatial_k, s.modes), (4, 4, 3, 16));
    assert_eq!((1..4).map(|l| s.level_modes(l).unwrap()).collect::<Vec<_>>(), vec![8, 4, 2]);
    s.validate().unwrap();
    for r in [32, 48, 64, 80, 96, 128, 160, 192] {
        assert!(s.is_admissible(r), "{r}");
    }
    // 196 is not a multiple of 8.
    match s.check_resolution(196) {
        Err(Error::InadmissibleResolution { admissible, .. }) => assert!(admissible.contains("32, 40, 48")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn slim_paper_layout_runs_at_every_table_resolution() {
    let spec = ModelSpec {
        base_channels: 2,
        channel_mult: vec![1, 1, 1, 1],
        blocks_per_level: 1,
        emb_dim: 4,
        data_channels: 1,
        ..ModelSpec::paper()
    };
    let m = build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for r in [32, 48, 64, 80, 96, 128, 160] {
        let out = denoise(&m, &noise(r, r as u64), 1.0).unwrap();
        assert_eq!((out.channels(), out.resolution()), (1, r));
        assert!(out.values().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn fno_variant_has_only_pointwise_spatial_kernels() {
    let m = build(&ModelSpec::desk().with_arch(Arch::FnoUnet), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(m.params.iter().all(|(_, t)| !(t.shape().len() == 4 && t.shape()[2] == 3)));
    assert!(spatial_kernel_names(&m.params).is_empty());
    assert!(m.params.keys().any(|k| k.ends_with(".spectral")));
}

#[test]
fn multires_variant_has_no_spectral_kernels() {
    let m = build(&ModelSpec::desk().with_arch(Arch::MultiresUnet), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!m.params.keys().any(|k| k.ends_with(".spectral")));
    assert!(!spatial_kernel_names(&m.params).is_empty());
}

#[test]
fn seeded_builds_are_bit_identical() {
    let a = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let b = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    assert_eq!(a, b);
    let c = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn parameter_shapes_do_not_depend_on_resolution() {
    for arch in [Arch::Dfu, Arch::FnoUnet, Arch::MultiresUnet] {
        let spec = tiny(arch);
        let at = |r| build_graph::<f32>(&spec, 1, r).unwrap().param_shapes();
        let base = at(8);
        for r in [16, 24, 40] {
            assert_eq!(at(r), base, "{arch} at {r}");
        }
    }
}

#[test]
fn singleres_model_only_accepts_its_resolution() {
    let spec = ModelSpec {
        train_resolution: Some(16),
        ..tiny(Arch::SingleresUnet)
    };
    assert!(spec.check_resolution(16).is_ok());
    assert!(matches!(spec.check_resolution(24), Err(Error::InadmissibleResolution { .. })));
    assert!(tiny(Arch::SingleresUnet).validate().is_err());
}

#[test]
fn indivisible_resolution_lists_admissible_values() {
    let m = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = denoise(&m, &noise(18, 0), 1.0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("18") && msg.contains("multiples of 4"), "{msg}");
    // Divisible but too coarse for the top cutoff of 8 modes.
    assert!(denoise(&m, &noise(12, 0), 1.0).unwrap_err().to_string().contains("level 0"));
}

#[test]
fn large_noise_output_does_not_grow_with_the_input() {
    let m = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let xi = noise(16, 3);
    let peak = |s: f64| {
        let out = denoise(&m, &xi.scale(s).unwrap(), s).unwrap();
        out.values().iter().fold(0.0f64, |a, v| a.max(v.abs()))
    };
    let (a, b) = (peak(80.0), peak(8000.0));
    // The input grew 100×; c_skip·x shrinks as 1/σ and c_out → σ_data.
    assert!(b < 2.0 * a + 1e-3, "σ=80: {a}, σ=8000: {b}");
    let (c_skip, c_out, c_in, _) = precond(8000.0);
    assert!(c_skip * 8000.0 < 1e-4 && (c_out - SIGMA_DATA).abs() < 1e-6 && (c_in * 8000.0 - 1.0).abs() < 1e-6);
}

#[test]
fn small_network_passes_composite_gradient_check() {
    for arch in [Arch::Dfu, Arch::FnoUnet, Arch::MultiresUnet] {
        let spec = ModelSpec { base_channels: 16, ..tiny(arch) };
        for rep in block_grad_check(&spec, 8, 1e-5, 3).unwrap() {
            assert!(rep.passed(1e-4), "{}: {:?}", rep.label, rep.checks.iter().map(|c| (&c.name, c.analytic, c.numeric)).collect::<Vec<_>>());
        }
    }
}

#[test]
fn zero_spectral_kernels_reduce_to_the_spatial_network() {
    let dfu = build(&tiny(Arch::Dfu), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut with_zeros = cast_params::<f32, f64>(&dfu.params);
    for (k, t) in with_zeros.iter_mut() {
        if k.ends_with(".spectral") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let spatial_only: dfu_core::engine::ParamStore<f64> =
        with_zeros.iter().filter(|(k, _)| !k.ends_with(".spectral")).map(|(k, v)| (k.clone(), v.clone())).collect();
    let x = to_batch::<f64>(&[noise(8, 1), noise(8, 2)]).unwrap();
    let a = Network::<f64>::new(&tiny(Arch::Dfu)).denoise(&with_zeros, &x, &[0.3, 2.0]).unwrap();
    let b = Network::<f64>::new(&tiny(Arch::MultiresUnet)).denoise(&spatial_only, &x, &[0.3, 2.0]).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn freeze_bottom_only_keeps_bottom_spatial_kernels_live() {
    let m = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let bottom = ModelSpec::desk().levels - 1;
    let f = m.clone().freeze_spatial(&BTreeSet::from([bottom])).unwrap();
    for k in spatial_kernel_names(&m.params) {
        assert_eq!(f.is_frozen(&k), ModelSpec::param_level(&k) != Some(bottom), "{k}");
    }
    assert!(f.params.keys().filter(|k| k.ends_with(".spectral")).all(|k| !f.is_frozen(k)));
}

#[test]
fn freeze_with_every_level_excepted_is_a_no_op() {
    let m = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let f = m.clone().freeze_spatial(&(0..3).collect()).unwrap();
    assert!(f.frozen.values().all(|v| !v));
}

#[test]
fn freeze_with_no_exceptions_hits_every_wide_kernel() {
    let m = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let f = m.clone().freeze_spatial(&BTreeSet::new()).unwrap();
    for (k, t) in &f.params {
        let wide = k.ends_with(".spatial") && t.shape()[2] > 1;
        assert_eq!(f.is_frozen(k), wide, "{k}");
    }
    assert_eq!(f.frozen.len(), f.params.len());
}

#[test]
fn freeze_rejects_bad_levels_and_baselines() {
    let m = build(&ModelSpec::desk(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(m.clone().freeze_spatial(&BTreeSet::from([3])), Err(Error::Config(_))));
    let u = build(&ModelSpec::desk().with_arch(Arch::MultiresUnet), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(u.freeze_spatial(&BTreeSet::new()).is_err());
}

#[test]
fn invalid_specs_are_configuration_errors() {
    let bad = [
        ModelSpec { levels: 0, ..ModelSpec::desk() },
        ModelSpec { channel_mult: vec![1, 2], ..ModelSpec::desk() },
        ModelSpec { spatial_k: 2, ..ModelSpec::desk() },
        ModelSpec { modes: 2, ..ModelSpec::desk() },
        ModelSpec { arch: Arch::FnoUnet, ..ModelSpec::desk() },
    ];
    for s in bad {
        assert!(matches!(build(&s, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))), "{s:?}");
    }
}

#[test]
fn noise_embedding_depends_only_on_sigma() {
    let a = noise_features(precond(0.7).3, 16);
    assert_eq!(a, noise_features(precond(0.7).3, 16));
    assert_ne!(a, noise_features(precond(0.8).3, 16));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_shape_matches_any_admissible_input(k in 4usize..12, sigma in 0.01f64..50.0) {
        let spec = tiny(Arch::Dfu);
        let r = 2 * k;
        prop_assume!(spec.is_admissible(r));
        let m = build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = denoise(&m, &noise(r, k as u64), sigma).unwrap();
        prop_assert_eq!(out.resolution(), r);
        prop_assert!(out.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn preconditioning_is_consistent(sigma in 1e-3f64..1e3) {
        // c_out is the spread of the effective regression target.
        let (c_skip, c_out, c_in, _) = precond(sigma);
        let s2 = sigma * sigma + SIGMA_DATA * SIGMA_DATA;
        prop_assert!((c_skip * s2 - SIGMA_DATA * SIGMA_DATA).abs() < 1e-9 * s2);
        let target = c_skip * c_skip * sigma * sigma + (1.0 - c_skip).powi(2) * SIGMA_DATA * SIGMA_DATA;
        prop_assert!((target - c_out * c_out).abs() < 1e-9 * (1.0 + c_out * c_out));
        prop_assert!((c_in * c_in * s2 - 1.0).abs() < 1e-9);
    }
}
