use std::collections::BTreeMap;
use std::f64::consts::TAU;

use dfu_core::dualconv::*;
use dfu_core::engine::{grad_check, Graph, Tensor};
use dfu_core::eval::{radial_spectrum, relative_spectrum_error};
use dfu_core::grid::{resample, sample_on_grid, GridFunction, ResampleMethod, SyntheticKind, SyntheticSpec};
use dfu_core::Error;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn white(c: usize, r: usize, rng: &mut impl Rng) -> GridFunction {
    GridFunction::new(c, r, (0..c * r * r).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn band_limited(cutoff: usize, channels: usize, seed: u64, r: usize) -> GridFunction {
    let spec = SyntheticSpec::new(SyntheticKind::BandLimitedFourier { cutoff }, channels, 0);
    sample_on_grid(&spec, r, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A periodic disk with a hard edge.
fn disk(r: usize) -> GridFunction {
    GridFunction::from_fn(1, r, |_, x, y| if (x - 0.5).hypot(y - 0.5) < 0.3 { 1.0 } else { 0.0 }).unwrap()
}

fn ones(modes: usize) -> SpectralKernel {
    SpectralKernel::from_fn(1, 1, modes, |_, _, _, _| Complex::new(1.0, 0.0)).unwrap()
}

#[test]
fn zero_spectral_kernel_gives_zero() {
    let g = white(2, 12, &mut ChaCha8Rng::seed_from_u64(0));
    let k = SpectralKernel::new(4, Tensor::zeros(&[3, 2, 28, 2])).unwrap();
    let out = spectral_conv(&g, &k).unwrap();
    assert_eq!(out.channels(), 3);
    assert!(out.values().iter().all(|v| *v == 0.0));
}

#[test]
fn unit_spectral_kernel_is_identity_on_its_band() {
    for r in [7, 16, 33] {
        let g = band_limited(3, 1, 1, r);
        let out = spectral_conv(&g, &ones(4)).unwrap();
        assert!(out.max_abs_diff(&g).unwrap() < 1e-10, "r={r}");
    }
}

#[test]
fn single_mode_gain_and_phase() {
    // sin(2πx) through coefficient c on the (0, 1) mode gives |c|·sin(2πx + arg c).
    let c = Complex::from_polar(1.7, 0.6);
    let k = SpectralKernel::from_fn(1, 1, 3, |_, _, m1, m2| if (m1, m2) == (0, 1) { c } else { Complex::new(0.0, 0.0) }).unwrap();
    let g = GridFunction::from_fn(1, 16, |_, x, _| (TAU * x).sin()).unwrap();
    let expect = GridFunction::from_fn(1, 16, |_, x, _| c.norm() * (TAU * x + c.arg()).sin()).unwrap();
    assert!(spectral_conv(&g, &k).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn too_coarse_grid_is_rejected() {
    let g = white(1, 6, &mut ChaCha8Rng::seed_from_u64(0));
    match spectral_conv(&g, &ones(4)) {
        Err(Error::ResolutionTooLow { resolution: 6, modes: 4, required }) => assert_eq!(required, 7),
        other => panic!("{other:?}"),
    }
}

#[test]
fn spatial_identity_and_averaging() {
    let g = white(3, 9, &mut ChaCha8Rng::seed_from_u64(2));
    let id = SpatialKernel::identity(3, 5).unwrap();
    assert!(spatial_conv(&g, &id).unwrap().max_abs_diff(&g).unwrap() < 1e-15);
    let avg = SpatialKernel::new(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0)).unwrap();
    let c = GridFunction::constant(1, 10, 2.5);
    assert!(spatial_conv(&c, &avg).unwrap().max_abs_diff(&c).unwrap() < 1e-14);
}

#[test]
fn even_or_nonsquare_spatial_kernels_are_rejected() {
    assert!(SpatialKernel::new(Tensor::zeros(&[1, 1, 2, 2])).is_err());
    assert!(SpatialKernel::new(Tensor::zeros(&[1, 1, 3, 1])).is_err());
    assert!(SpectralKernel::new(3, Tensor::zeros(&[1, 1, 14, 2])).is_err());
}

#[test]
fn spatial_kernel_keeps_low_modes_of_smooth_inputs() {
    // A blur applied at r=8 and r=16: the low band barely moves, but the outputs
    // are not the same function.
    let f = |_: usize, x: f64, y: f64| 1.0 + 0.3 * (TAU * x).sin() + 0.2 * (TAU * y).cos();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw: Vec<f64> = (0..9).map(|_| rng.random::<f64>() + 0.2).collect();
    let s: f64 = raw.iter().sum();
    let k = SpatialKernel::new(Tensor::from_vec(&[1, 1, 3, 3], raw.iter().map(|v| v / s).collect())).unwrap();
    let a = spatial_conv(&GridFunction::from_fn(1, 8, f).unwrap(), &k).unwrap();
    let b = spatial_conv(&GridFunction::from_fn(1, 16, f).unwrap(), &k).unwrap();
    let b8 = resample(&b, 8, ResampleMethod::Spectral).unwrap();
    let err = relative_spectrum_error(&radial_spectrum(&a), &radial_spectrum(&b8), 0, 3).unwrap();
    assert!(err < 0.10, "{err}");
    assert!(a.max_abs_diff(&b8).unwrap() > 1e-3);
}

#[test]
fn dual_conv_is_the_sum_of_its_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100 {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = [1, 3, 5][case % 3];
        let modes = rng.random_range(1..5);
        let r = rng.random_range(2 * modes - 1..2 * modes + 10);
        let p = DualConvParams::random(cout, cin, k, modes, &mut rng).unwrap();
        let g = white(cin, r, &mut rng);
        let sum = spatial_conv(&g, &p.spatial).unwrap().add(&spectral_conv(&g, &p.spectral).unwrap()).unwrap();
        let out = dual_conv(&g, &p).unwrap();
        for c in 0..cout {
            for (a, b) in out.channel(c).iter().zip(sum.channel(c)) {
                assert!((a - (b + p.bias[c])).abs() < 1e-12, "case {case}");
            }
        }
    }
}

#[test]
fn zeroed_branch_leaves_the_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = DualConvParams::random(2, 2, 3, 3, &mut rng).unwrap();
    let g = white(2, 10, &mut rng);
    let no_spec = DualConvParams::new(p.spatial.clone(), SpectralKernel::new(3, Tensor::zeros(&[2, 2, 15, 2])).unwrap(), vec![0.0; 2]).unwrap();
    assert!(dual_conv(&g, &no_spec).unwrap().max_abs_diff(&spatial_conv(&g, &p.spatial).unwrap()).unwrap() < 1e-15);
    let no_spat = DualConvParams::new(SpatialKernel::new(Tensor::zeros(&[2, 2, 3, 3])).unwrap(), p.spectral.clone(), vec![0.0; 2]).unwrap();
    assert!(dual_conv(&g, &no_spat).unwrap().max_abs_diff(&spectral_conv(&g, &p.spectral).unwrap()).unwrap() < 1e-15);
}

#[test]
fn spectral_branch_commutes_with_refinement() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let k = SpectralKernel::random(2, 2, 4, &mut rng).unwrap();
    for (r1, r2) in [(16, 32), (16, 64), (32, 64), (64, 16), (32, 16)] {
        let a = resample(&spectral_conv(&band_limited(3, 2, 8, r1), &k).unwrap(), r2, ResampleMethod::Spectral).unwrap();
        let b = spectral_conv(&band_limited(3, 2, 8, r2), &k).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-8, "{r1}->{r2}");
    }
}

#[test]
fn spatial_branch_does_not_commute_on_sharp_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = SpatialKernel::random(1, 1, 3, &mut rng).unwrap();
    for (r1, r2) in [(16, 32), (32, 64)] {
        let a = resample(&spatial_conv(&disk(r1), &k).unwrap(), r2, ResampleMethod::Spectral).unwrap();
        let b = spatial_conv(&disk(r2), &k).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-3, "{r1}->{r2}");
    }
}

#[test]
fn no_small_spatial_kernel_reproduces_a_band_projection() {
    // Least-squares fit of a 3×3 kernel to the M=4 low-pass on r=16, over random inputs.
    let r = 16;
    let proj = ones(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs: Vec<_> = (0..6).map(|_| white(1, r, &mut rng)).collect();
    let n = inputs.len() * r * r;
    let mut a = DMatrix::zeros(n, 9);
    let mut b = DVector::zeros(n);
    for (s, g) in inputs.iter().enumerate() {
        for t in 0..9 {
            let mut w = Tensor::zeros(&[1, 1, 3, 3]);
            w.data_mut()[t] = 1.0;
            let col = spatial_conv(g, &SpatialKernel::new(w).unwrap()).unwrap();
            for (i, v) in col.values().iter().enumerate() {
                a[(s * r * r + i, t)] = *v;
            }
        }
        for (i, v) in spectral_conv(g, &proj).unwrap().values().iter().enumerate() {
            b[s * r * r + i] = *v;
        }
    }
    let w = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
    let residual = (&a * w - &b).norm() / b.norm();
    assert!(residual > 0.10, "{residual}");
}

#[test]
fn dual_conv_node_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2, 2, 9, 9]);
    let y = dual_conv_node(&mut g, x, "dc", 3, 3, Some(4)).unwrap();
    g.output("out", y);
    let mut randn = |s: &[usize]| Tensor::from_fn(s, |_| rng.sample::<f64, _>(StandardNormal));
    let params = g.param_shapes().iter().map(|(k, s)| (k.clone(), randn(s))).collect();
    let inputs = BTreeMap::from([("x".to_string(), randn(&[2, 2, 9, 9]))]);
    let rep = grad_check(&mut g, &inputs, &params, "out", 1e-5, 1).unwrap();
    assert!(rep.passed(1e-4), "{:?}", rep.checks);
    let names: Vec<_> = rep.checks.iter().map(|c| c.name.as_str()).collect();
    for n in ["dc.spatial", "dc.spectral", "dc.bias", "x"] {
        assert!(names.iter().any(|c| c.contains(n)), "{n} not checked: {names:?}");
    }
}

#[test]
fn graph_node_matches_the_direct_operator() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = DualConvParams::random(2, 3, 3, 3, &mut rng).unwrap();
    let gfun = white(3, 8, &mut rng);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1, 3, 8, 8]);
    let y = dual_conv_node(&mut g, x, "dc", 2, 3, Some(3)).unwrap();
    g.output("out", y);
    let params = BTreeMap::from([
        ("dc.spatial".to_string(), p.spatial.weights().clone()),
        ("dc.spectral".to_string(), p.spectral.coeffs().clone()),
        ("dc.bias".to_string(), Tensor::from_vec(&[2], p.bias.clone())),
    ]);
    let inputs = BTreeMap::from([("x".to_string(), Tensor::from_vec(&[1, 3, 8, 8], gfun.values().to_vec()))]);
    let out = g.forward(&inputs, &params).unwrap();
    let direct = dual_conv(&gfun, &p).unwrap();
    for (a, b) in out["out"].data().iter().zip(direct.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spectral_output_is_band_limited(seed in any::<u64>(), modes in 1usize..5, extra in 0usize..8) {
        let r = 2 * modes - 1 + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = SpectralKernel::random(1, 1, modes, &mut rng).unwrap();
        let out = spectral_conv(&white(1, r, &mut rng), &k).unwrap();
        // Projecting onto the band again changes nothing.
        let again = spectral_conv(&out, &ones(modes)).unwrap();
        prop_assert!(again.max_abs_diff(&out).unwrap() < 1e-10);
    }

    #[test]
    fn spatial_conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = SpatialKernel::random(2, 2, 3, &mut rng).unwrap();
        let (f, g) = (white(2, 7, &mut rng), white(2, 7, &mut rng));
        let lhs = spatial_conv(&f.axpy(a, &g).unwrap(), &k).unwrap();
        let rhs = spatial_conv(&f, &k).unwrap().axpy(a, &spatial_conv(&g, &k).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
