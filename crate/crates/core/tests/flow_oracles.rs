//! Flow layers against closed forms and brute-force Jacobians.

use approx::assert_relative_eq;
use flowseq_core::compute::{ops, slogdet, DType, Device, NoiseRng, ParamStore, Precision, Tensor};
use flowseq_core::flow::{
    concat, factor_in, factor_out, split, squeeze, squeeze_mask, unsqueeze, Actnorm, CouplingType, FlowConfig, Layer, MultiHeadLinear, SplitFormat,
};
use flowseq_core::nets::length_mask;
use flowseq_core::verify::{self, FlowFixture};
use flowseq_core::Error;

fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
    ops::from_f64(data, shape, DType::F64).unwrap()
}

fn ones(b: usize, n: usize) -> Tensor {
    Tensor::ones((b, n), DType::F64, &Device::Cpu).unwrap()
}

fn actnorm(d: usize) -> (ParamStore, Actnorm) {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = NoiseRng::new(0);
    let a = {
        let mut pb = store.builder(&mut rng);
        Actnorm::new(&mut pb.pp("a"), "a".into(), d).unwrap()
    };
    (store, a)
}

fn linear(d: usize, heads: usize, format: SplitFormat) -> (ParamStore, MultiHeadLinear) {
    let mut store = ParamStore::new(DType::F64);
    let mut rng = NoiseRng::new(1);
    let l = {
        let mut pb = store.builder(&mut rng);
        MultiHeadLinear::new(&mut pb.pp("l"), "l".into(), d, heads, format).unwrap()
    };
    (store, l)
}

#[test]
fn actnorm_identity_and_closed_form() {
    let (_s, a) = actnorm(2);
    a.mark_initialized().unwrap();
    let h = t(vec![0.5, -1.0, 2.0, 3.0, 0.1, 0.2, 9.0, 9.0], &[1, 4, 2]);
    let mask = t(vec![1.0, 1.0, 1.0, 0.0], &[1, 4]);
    let (y, ld) = a.forward(&h, &mask, false).unwrap();
    assert_eq!(ops::to_f64_vec(&y).unwrap(), ops::to_f64_vec(&h).unwrap());
    assert_eq!(ops::to_f64_scalar(&ld).unwrap(), 0.0);

    a.set(&[2.0, 2.0], &[0.0, 0.0]).unwrap();
    let (_, ld) = a.forward(&h, &mask, false).unwrap();
    assert_relative_eq!(ops::to_f64_scalar(&ld).unwrap(), 6.0 * 2f64.ln(), epsilon = 1e-12);
    assert_relative_eq!(ops::to_f64_scalar(&ld).unwrap(), 4.1589, epsilon = 1e-4);
}

#[test]
fn actnorm_round_trip_and_uninitialized_error() {
    let (_s, a) = actnorm(3);
    let h = NoiseRng::new(4).normal_tensor(&[2, 5, 3], DType::F64).unwrap();
    let mask = ones(2, 5);
    assert!(matches!(a.forward(&h, &mask, false), Err(Error::Uninitialized(_))));
    a.set(&[0.3, 1.7, 4.0], &[0.5, -2.0, 0.1]).unwrap();
    a.mark_initialized().unwrap();
    let (y, _) = a.forward(&h, &mask, false).unwrap();
    let (back, _) = a.inverse(&y, &mask).unwrap();
    let err = ops::to_f64_vec(&(back - &h).unwrap().abs().unwrap()).unwrap().into_iter().fold(0.0, f64::max);
    assert!(err < 1e-10, "round trip error {err}");
}

#[test]
fn actnorm_init_whitens_real_positions() {
    let (_s, a) = actnorm(3);
    let mut rng = NoiseRng::new(5);
    let raw = ops::to_f64_vec(&rng.normal_tensor(&[4, 6, 3], DType::F64).unwrap()).unwrap();
    let shifted: Vec<f64> = raw.iter().enumerate().map(|(i, x)| x * (1.0 + (i % 3) as f64) + 3.0 * (i % 3) as f64).collect();
    let h = t(shifted, &[4, 6, 3]);
    let mask = length_mask(&[6, 4, 2, 5], 6, DType::F64).unwrap();
    let (y, _) = a.forward(&h, &mask, true).unwrap();
    assert!(a.is_initialized().unwrap());
    let y = ops::to_f64_vec(&y).unwrap();
    let m = ops::to_f64_vec(&mask).unwrap();
    for f in 0..3 {
        let vals: Vec<f64> = (0..24).filter(|&p| m[p] == 1.0).map(|p| y[p * 3 + f]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "feature {f} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "feature {f} variance {var}");
    }
}

#[test]
fn actnorm_constant_feature_uses_floor() {
    let (_s, a) = actnorm(2);
    let h = t(vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0], &[1, 3, 2]);
    a.forward(&h, &ones(1, 3), true).unwrap();
    let s = a.scale().unwrap();
    assert_relative_eq!(s[1], 1.0 / flowseq_core::flow::STD_FLOOR, max_relative = 1e-9);
}

#[test]
fn linear_closed_forms() {
    let (_s, l) = linear(2, 1, SplitFormat::RowMajor);
    l.set_weight(&t(vec![2.0, 0.0, 0.0, 3.0], &[1, 2, 2])).unwrap();
    let h = t(vec![1.0, 1.0, 2.0, -1.0], &[1, 2, 2]);
    let (y, ld) = l.forward(&h, &ones(1, 2)).unwrap();
    assert_eq!(ops::to_f64_vec(&y).unwrap(), vec![2.0, 3.0, 4.0, -3.0]);
    assert_relative_eq!(ops::to_f64_scalar(&ld).unwrap(), 2.0 * 6f64.ln(), epsilon = 1e-12);
    assert_relative_eq!(ops::to_f64_scalar(&ld).unwrap(), 3.5835, epsilon = 1e-4);

    let (_s, l) = linear(4, 2, SplitFormat::ColumnMajor);
    l.set_weight(&t(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], &[2, 2, 2])).unwrap();
    let h = NoiseRng::new(2).normal_tensor(&[2, 3, 4], DType::F64).unwrap();
    let (y, ld) = l.forward(&h, &ones(2, 3)).unwrap();
    assert_eq!(ops::to_f64_vec(&y).unwrap(), ops::to_f64_vec(&h).unwrap());
    assert_eq!(ops::to_f64_vec(&ld).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn linear_shared_heads_match_t_h_log_det() {
    // With one matrix shared by all h heads the sum over heads is T * h * log|det W|.
    let w = [0.9, 0.4, -0.3, 1.2];
    let det: f64 = w[0] * w[3] - w[1] * w[2];
    for format in [SplitFormat::RowMajor, SplitFormat::ColumnMajor] {
        let (_s, l) = linear(6, 3, format);
        l.set_weight(&t(w.repeat(3), &[3, 2, 2])).unwrap();
        let (_, ld) = l.forward(&NoiseRng::new(3).normal_tensor(&[1, 5, 6], DType::F64).unwrap(), &ones(1, 5)).unwrap();
        assert_relative_eq!(ops::to_f64_scalar(&ld).unwrap(), 5.0 * 3.0 * det.abs().ln(), epsilon = 1e-12);
    }
}

#[test]
fn linear_brute_force_jacobian_t2_d4_h2() {
    for format in [SplitFormat::RowMajor, SplitFormat::ColumnMajor] {
        let (_s, l) = linear(4, 2, format);
        let mut rng = NoiseRng::new(6);
        l.set_weight(&rng.normal_tensor(&[2, 2, 2], DType::F64).unwrap()).unwrap();
        let h = rng.normal_tensor(&[1, 2, 4], DType::F64).unwrap();
        let mask = ones(1, 2);
        let (_, ld) = l.forward(&h, &mask).unwrap();
        let mut f = |x: &[f64]| Ok(ops::to_f64_vec(&l.forward(&t(x.to_vec(), &[1, 2, 4]), &mask)?.0)?);
        let j = verify::numerical_jacobian(&mut f, &ops::to_f64_vec(&h).unwrap(), 1e-5).unwrap();
        let brute = slogdet(&j).0;
        assert!(verify::log_det_relative_error(ops::to_f64_scalar(&ld).unwrap(), brute) < 1e-6);
    }
}

#[test]
fn linear_singular_head_is_named() {
    let (_s, l) = linear(4, 2, SplitFormat::RowMajor);
    l.set_weight(&t(vec![1.0, 0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 4.0], &[2, 2, 2])).unwrap();
    match l.forward(&ones(1, 4).reshape((1, 1, 4)).unwrap(), &ones(1, 1)) {
        Err(Error::Singular { layer, head, .. }) => {
            assert_eq!(layer, "l");
            assert_eq!(head, 1);
        }
        other => panic!("expected a singularity error, got {other:?}"),
    }
}

#[test]
fn every_layer_matches_brute_force_log_det() {
    let rows = verify::log_det_table(21).unwrap();
    assert_eq!(rows.len(), 6 * 3 + 1);
    for (name, reported, brute) in rows {
        let err = verify::log_det_relative_error(reported, brute);
        assert!(err < verify::LOG_DET_REL_TOL, "{name}: reported {reported}, brute force {brute}");
    }
}

#[test]
fn coupling_round_trips_all_types_and_swaps() {
    let fx = FlowFixture::new(&verify::jacobian_flow_config(6), 4, 8, DType::F64, 3).unwrap();
    let mut rng = NoiseRng::new(3);
    fx.randomize(&mut rng, 0.3, 0.3).unwrap();
    let src = fx.source(2, &mut rng).unwrap();
    let mask = length_mask(&[6, 4], 6, DType::F64).unwrap();
    let mut seen = Vec::new();
    for layer in fx.flow.layers() {
        if let Layer::Coupling(c) = layer {
            seen.push((c.kind, c.swap));
            let h = rng.normal_tensor(&[2, 6, 4], DType::F64).unwrap();
            let (y, ld) = c.forward(&h, &mask, &src).unwrap();
            let (back, ld_inv) = c.inverse(&y, &mask, &src).unwrap();
            let err = ops::to_f64_vec(&(back - &h).unwrap().abs().unwrap()).unwrap().into_iter().fold(0.0, f64::max);
            assert!(err < 1e-8, "{}: round trip error {err}", c.name);
            let (a, b) = (ops::to_f64_vec(&ld).unwrap(), ops::to_f64_vec(&ld_inv).unwrap());
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
        }
    }
    for kind in [CouplingType::TimeAlternate, CouplingType::FeatureContinuous, CouplingType::FeatureAlternate] {
        for swap in [false, true] {
            assert!(seen.contains(&(kind, swap)), "{kind} swap={swap} not covered");
        }
    }
}

#[test]
fn fresh_coupling_is_identity() {
    let fx = FlowFixture::new(&verify::jacobian_flow_config(3), 4, 8, DType::F64, 9).unwrap();
    let mut rng = NoiseRng::new(9);
    let src = fx.source(1, &mut rng).unwrap();
    let h = rng.normal_tensor(&[1, 4, 4], DType::F64).unwrap();
    for layer in fx.flow.layers() {
        if let Layer::Coupling(c) = layer {
            let (y, ld) = c.forward(&h, &ones(1, 4), &src).unwrap();
            assert_eq!(ops::to_f64_vec(&y).unwrap(), ops::to_f64_vec(&h).unwrap());
            assert_eq!(ops::to_f64_scalar(&ld).unwrap(), 0.0);
        }
    }
}

#[test]
fn split_concat_identity_and_examples() {
    let h = t((0..8).map(f64::from).collect(), &[1, 2, 4]);
    let (a, b) = split(&h, CouplingType::FeatureContinuous, false).unwrap();
    assert_eq!(ops::to_f64_vec(&a).unwrap(), vec![0.0, 1.0, 4.0, 5.0]);
    assert_eq!(ops::to_f64_vec(&b).unwrap(), vec![2.0, 3.0, 6.0, 7.0]);
    let (a, b) = split(&h, CouplingType::FeatureAlternate, true).unwrap();
    assert_eq!(ops::to_f64_vec(&a).unwrap(), vec![1.0, 3.0, 5.0, 7.0]);
    assert_eq!(ops::to_f64_vec(&b).unwrap(), vec![0.0, 2.0, 4.0, 6.0]);
    let (a, _) = split(&h, CouplingType::TimeAlternate, false).unwrap();
    assert_eq!(ops::to_f64_vec(&a).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    for kind in [CouplingType::TimeAlternate, CouplingType::FeatureContinuous, CouplingType::FeatureAlternate] {
        for swap in [false, true] {
            let (a, b) = split(&h, kind, swap).unwrap();
            let back = concat(&a, &b, kind, swap).unwrap();
            assert_eq!(ops::to_f64_vec(&back).unwrap(), ops::to_f64_vec(&h).unwrap());
        }
    }
}

#[test]
fn squeeze_merges_adjacent_steps() {
    let h = t((0..8).map(f64::from).collect(), &[1, 4, 2]);
    let s = squeeze(&h).unwrap();
    assert_eq!(s.dims(), &[1, 2, 4]);
    assert_eq!(ops::to_f64_vec(&s).unwrap(), (0..8).map(f64::from).collect::<Vec<_>>());
    assert_eq!(ops::to_f64_vec(&unsqueeze(&s).unwrap()).unwrap(), ops::to_f64_vec(&h).unwrap());
    let m = squeeze_mask(&t(vec![1.0, 1.0, 0.0, 0.0], &[1, 4])).unwrap();
    assert_eq!(ops::to_f64_vec(&m).unwrap(), vec![1.0, 0.0]);
    let (k, r) = factor_out(&h).unwrap();
    assert_eq!(ops::to_f64_vec(&factor_in(&k, &r).unwrap()).unwrap(), ops::to_f64_vec(&h).unwrap());
    assert!(squeeze(&t(vec![0.0; 6], &[1, 3, 2])).is_err());
}

#[test]
fn multiscale_round_trip_both_precisions() {
    let cfg = FlowConfig::default();
    let r = verify::invertibility_suite(&cfg, 16, Precision::F64, &[4, 8, 16], 2, 17, None).unwrap();
    assert!(r.max_error < verify::INVERT_TOL_F64, "64-bit error {}", r.max_error);
    let r = verify::invertibility_suite(&cfg, 16, Precision::F32, &[4, 8, 16], 2, 17, None).unwrap();
    assert!(r.max_error < verify::INVERT_TOL_F32, "32-bit error {}", r.max_error);
}

#[test]
fn pad_positions_do_not_change_density() {
    let fx = FlowFixture::new(&FlowConfig::default(), 8, 8, DType::F64, 4).unwrap();
    let mut rng = NoiseRng::new(4);
    fx.randomize(&mut rng, 0.3, 0.3).unwrap();
    let src = fx.source(2, &mut rng).unwrap();
    let mask = length_mask(&[4, 2], 4, DType::F64).unwrap();
    let z = rng.normal_tensor(&[2, 4, 8], DType::F64).unwrap();
    let noise = (rng.normal_tensor(&[2, 4, 8], DType::F64).unwrap() * 5.0).unwrap();
    let pad = flowseq_core::nets::expand_mask(&mask).unwrap().affine(-1.0, 1.0).unwrap();
    let z2 = (&z + noise.broadcast_mul(&pad).unwrap()).unwrap();
    let a = ops::to_f64_vec(&fx.flow.log_density(&z, &mask, &src).unwrap()).unwrap();
    let b = ops::to_f64_vec(&fx.flow.log_density(&z2, &mask, &src).unwrap()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_relative_eq!(*x, *y, epsilon = 1e-9);
    }
}

#[test]
fn sample_reencodes_to_its_noise() {
    let fx = FlowFixture::new(&FlowConfig::default(), 8, 8, DType::F64, 8).unwrap();
    let mut rng = NoiseRng::new(8);
    fx.randomize(&mut rng, 0.3, 0.3).unwrap();
    let src = fx.source(3, &mut rng).unwrap();
    let lengths = [4, 8, 2];
    let mut draw = NoiseRng::new(77);
    let s = fx.flow.sample(&src, &lengths, 1.0, &mut draw, DType::F64).unwrap();
    let lp = ops::to_f64_vec(&s.log_prob).unwrap();
    assert!(lp.iter().all(|v| v.is_finite()));
    let dens = ops::to_f64_vec(&fx.flow.log_density(&s.z, &s.mask, &src).unwrap()).unwrap();
    for (a, b) in lp.iter().zip(&dens) {
        assert_relative_eq!(*a, *b, epsilon = 1e-8);
    }
    // Redraw the same noise in the documented order: top first, then factored halves last to first.
    let mut again = NoiseRng::new(77);
    let (top, factored) = fx.flow.base_shapes(3, 8);
    let v = ops::to_f64_vec(&again.normal_tensor(&top, DType::F64).unwrap()).unwrap();
    let f0 = ops::to_f64_vec(&again.normal_tensor(&factored[0], DType::F64).unwrap()).unwrap();
    let state = fx.flow.forward(&s.z, &s.mask, &src, false).unwrap();
    let hm = ops::to_f64_vec(&flowseq_core::nets::expand_mask(&state.mask).unwrap().broadcast_as(state.h.dims()).unwrap().contiguous().unwrap()).unwrap();
    let h = ops::to_f64_vec(&state.h).unwrap();
    for i in 0..h.len() {
        if hm[i] == 1.0 {
            assert!((h[i] - v[i]).abs() < 1e-6, "top noise {i}: {} vs {}", h[i], v[i]);
        }
    }
    let fm = ops::to_f64_vec(&flowseq_core::nets::expand_mask(&state.factored_masks[0]).unwrap().broadcast_as(state.factored_out[0].dims()).unwrap().contiguous().unwrap()).unwrap();
    let fo = ops::to_f64_vec(&state.factored_out[0]).unwrap();
    for i in 0..fo.len() {
        if fm[i] == 1.0 {
            assert!((fo[i] - f0[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn mode_is_deterministic_and_sample_std_tracks_temperature() {
    let fx = FlowFixture::new(&FlowConfig::default(), 4, 8, DType::F64, 12).unwrap();
    let mut rng = NoiseRng::new(12);
    fx.flow.mark_initialized().unwrap();
    let src = fx.source(1, &mut rng).unwrap();
    let a = fx.flow.mode(&src, &[4], DType::F64).unwrap();
    let b = fx.flow.mode(&src, &[4], DType::F64).unwrap();
    assert_eq!(ops::to_f64_vec(&a.z).unwrap(), ops::to_f64_vec(&b.z).unwrap());

    // Freshly built flows are orthogonal linear maps plus identity couplings,
    // which preserve an isotropic Gaussian.
    let n = 500;
    let rows = vec![0; n];
    for tau in [0.3, 1.0] {
        let s = fx.flow.sample(&src.select(&rows).unwrap(), &vec![4; n], tau, &mut rng, DType::F64).unwrap();
        let v = ops::to_f64_vec(&s.z).unwrap();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var.sqrt() / tau - 1.0).abs() < 0.03, "tau {tau}: std {}", var.sqrt());
    }
}

#[test]
fn quadrature_normalizes_prior() {
    let z = verify::density_normalization(31, 241).unwrap();
    assert!((z - 1.0).abs() < verify::DENSITY_TOL, "integral {z}");
}
