use cloftr_core::attention::{
    self, build_params, encoder_layer, linear_attention_fast, linear_attention_reference, loftr_module, phi,
    positional_encoding, AttentionConfig, LayerKind,
};
use cloftr_core::backbone::FeatureGrid;
use cloftr_core::numerics::gradcheck::{check_inputs, check_params};
use cloftr_core::numerics::{DType, Tape, Tensor};
use cloftr_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor, fast: bool, dtype: DType) -> Tensor {
    let tape = Tape::with_dtype(dtype);
    let (q, k, v) = (tape.constant(q).unwrap(), tape.constant(k).unwrap(), tape.constant(v).unwrap());
    let out = if fast {
        linear_attention_fast(&tape, q, k, v)
    } else {
        linear_attention_reference(&tape, q, k, v)
    };
    tape.value(out.unwrap())
}

fn grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
    FeatureGrid {
        height: h,
        width: w,
        dim: d,
        values: rand_t(rng, &[h * w, d], 1.0),
    }
}

#[test]
fn phi_examples() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::new([3], vec![0.0, 2.0, -20.0]).unwrap()).unwrap();
    let y = tape.data(phi(&tape, x).unwrap());
    assert_eq!(y[0], 1.0);
    assert_eq!(y[1], 3.0);
    assert!((y[2] - (-20f64).exp()).abs() < 1e-15);
    assert!(y[2] > 0.0);
}

#[test]
fn single_position_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = rand_t(&mut rng, &[2, 1, 4], 2.0);
    let k = rand_t(&mut rng, &[2, 1, 4], 2.0);
    let v = rand_t(&mut rng, &[2, 1, 4], 2.0);
    for fast in [false, true] {
        let out = run_attention(&q, &k, &v, fast, DType::F64);
        assert!(out.max_abs_diff(&v) < 1e-15, "fast={fast}");
    }
}

#[test]
fn identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (5, 3);
    let q = rand_t(&mut rng, &[1, n, d], 1.0);
    let row = rand_t(&mut rng, &[d], 1.0);
    let k = Tensor::from_fn([1, n, d], |i| row.data()[i % d]);
    let v = rand_t(&mut rng, &[1, n, d], 1.0);
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|i| v.data()[i * d + c]).sum::<f64>() / n as f64).collect();
    let out = run_attention(&q, &k, &v, false, DType::F64);
    for i in 0..n {
        for c in 0..d {
            assert!((out.data()[i * d + c] - mean[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn fast_matches_reference_f64_and_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(1..=32);
        let m = rng.gen_range(1..=32);
        let h = rng.gen_range(1..=2);
        let d = rng.gen_range(1..=8);
        let q = rand_t(&mut rng, &[h, n, d], 2.0);
        let k = rand_t(&mut rng, &[h, m, d], 2.0);
        let v = rand_t(&mut rng, &[h, m, d], 2.0);
        let diff = run_attention(&q, &k, &v, true, DType::F64).max_abs_diff(&run_attention(&q, &k, &v, false, DType::F64));
        assert!(diff < 1e-10, "f64 diff {diff}");
        let diff = run_attention(&q, &k, &v, true, DType::F32).max_abs_diff(&run_attention(&q, &k, &v, false, DType::F32));
        assert!(diff < 1e-4, "f32 diff {diff}");
    }
}

#[test]
fn mismatched_attention_shapes_error() {
    let tape = Tape::new();
    let q = tape.constant(&Tensor::zeros([1, 3, 4])).unwrap();
    let k = tape.constant(&Tensor::zeros([1, 5, 4])).unwrap();
    let v = tape.constant(&Tensor::zeros([1, 4, 4])).unwrap();
    assert!(matches!(linear_attention_fast(&tape, q, k, v), Err(Error::Dimension(_))));
}

/// Independent evaluation of the interleaved sinusoid table.
fn pe_oracle(h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            for k in 0..d / 4 {
                let freq = 10000f64.powf(-(4.0 * k as f64) / d as f64);
                let base = (y * w + x) * d + 4 * k;
                let (fx, fy) = ((x + 1) as f64 * freq, (y + 1) as f64 * freq);
                out[base] = fx.sin();
                out[base + 1] = fx.cos();
                out[base + 2] = fy.sin();
                out[base + 3] = fy.cos();
            }
        }
    }
    out
}

#[test]
fn positional_encoding_matches_formula() {
    let pe = positional_encoding(4, 4, 32).unwrap();
    assert_eq!(pe.shape(), &[16, 32]);
    for (a, b) in pe.data().iter().zip(pe_oracle(4, 4, 32)) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn x_shift_only_changes_x_channels() {
    let d = 32;
    let pe = positional_encoding(3, 5, d).unwrap();
    let (a, b) = (1 * 5 + 1, 1 * 5 + 3);
    for c in 0..d {
        let same = pe.data()[a * d + c] == pe.data()[b * d + c];
        assert_eq!(same, c % 4 >= 2, "channel {c}");
    }
}

#[test]
fn positional_encoding_needs_multiple_of_four() {
    assert!(matches!(positional_encoding(2, 2, 30), Err(Error::Config(_))));
}

#[test]
fn zero_output_projections_make_identity_layer() {
    let cfg = AttentionConfig::reduced();
    let mut store = build_params(&cfg, 1).unwrap();
    for name in ["merge", "ffn2"] {
        for part in ["w", "b"] {
            let t = store.get_mut(&format!("loftr.layer0.{name}.{part}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&mut rng, &[6, 32], 1.0);
    let src = rand_t(&mut rng, &[9, 32], 1.0);
    let tape = Tape::new();
    let (xv, sv) = (tape.constant(&x).unwrap(), tape.constant(&src).unwrap());
    let y = encoder_layer(&cfg, &tape, &store, 0, xv, sv).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) < 1e-12);
}

#[test]
fn encoder_layer_rejects_wrong_width() {
    let cfg = AttentionConfig::reduced();
    let store = build_params(&cfg, 1).unwrap();
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros([4, 32])).unwrap();
    let s = tape.constant(&Tensor::zeros([4, 16])).unwrap();
    assert!(matches!(encoder_layer(&cfg, &tape, &store, 0, x, s), Err(Error::Dimension(_))));
}

#[test]
fn encoder_layer_gradients_match_finite_differences() {
    let cfg = AttentionConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 12,
        layer_pattern: vec![LayerKind::Cross],
    };
    let store = build_params(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_t(&mut rng, &[5, 8], 1.0);
    let src = rand_t(&mut rng, &[7, 8], 1.0);
    let w = rand_t(&mut rng, &[5, 8], 1.0);
    let report = check_params(
        &store,
        |t, s| {
            let y = encoder_layer(&cfg, t, s, 0, t.constant(&x)?, t.constant(&src)?)?;
            t.sum_all(t.mul(y, t.constant(&w)?)?)
        },
        1e-4,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
    let store_ref = &store;
    let report = check_inputs(
        &[x.clone(), src.clone()],
        |t, v| {
            let y = encoder_layer(&cfg, t, store_ref, 0, v[0], v[1])?;
            t.sum_all(t.mul(y, t.constant(&w)?)?)
        },
        1e-4,
        None,
        0,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn module_gradients_match_finite_differences() {
    let cfg = AttentionConfig {
        d_model: 8,
        n_heads: 2,
        ffn_dim: 8,
        layer_pattern: AttentionConfig::alternating(4),
    };
    let store = build_params(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_t(&mut rng, &[6, 8], 1.0);
    let b = rand_t(&mut rng, &[4, 8], 1.0);
    let report = check_params(
        &store,
        |t, s| {
            let (x, y) = attention::forward(&cfg, t, s, t.constant(&a)?, (2, 3), t.constant(&b)?, (2, 2))?;
            let sx = t.sum_all(t.mul(x, x)?)?;
            let sy = t.sum_all(y)?;
            t.add(sx, sy)
        },
        1e-6,
        Some(6),
        1,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn swapping_inputs_swaps_outputs_exactly() {
    let cfg = AttentionConfig::reduced();
    let store = build_params(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = grid(&mut rng, 3, 4, 32);
    let b = grid(&mut rng, 2, 5, 32);
    let ab = loftr_module(&a, &b, &cfg, &store).unwrap();
    let ba = loftr_module(&b, &a, &cfg, &store).unwrap();
    assert_eq!(ab.feat_a, ba.feat_b);
    assert_eq!(ab.feat_b, ba.feat_a);
    assert_eq!(ab.feat_a.shape(), &[12, 32]);
    assert_eq!(ab.feat_b.shape(), &[10, 32]);
}

#[test]
fn empty_pattern_only_adds_positional_encoding() {
    let cfg = AttentionConfig {
        layer_pattern: Vec::new(),
        ..AttentionConfig::reduced()
    };
    let store = build_params(&AttentionConfig::reduced(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = grid(&mut rng, 2, 2, 32);
    let b = grid(&mut rng, 3, 1, 32);
    let out = loftr_module(&a, &b, &cfg, &store).unwrap();
    let pe = positional_encoding(2, 2, 32).unwrap();
    let want = Tensor::from_fn([4, 32], |k| a.values.data()[k] + pe.data()[k]);
    assert_eq!(out.feat_a, want);
}

#[test]
fn config_validation() {
    let bad_heads = AttentionConfig {
        n_heads: 3,
        ..AttentionConfig::reduced()
    };
    assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    assert!(AttentionConfig::teacher().validate().is_ok());
    assert_eq!(AttentionConfig::reduced().layer_pattern, vec![
        LayerKind::SelfAttn,
        LayerKind::Cross,
        LayerKind::SelfAttn,
        LayerKind::Cross
    ]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reference_rows_stay_inside_value_envelope(n in 1usize..10, m in 1usize..10, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_t(&mut rng, &[1, n, d], 3.0);
        let k = rand_t(&mut rng, &[1, m, d], 3.0);
        let v = rand_t(&mut rng, &[1, m, d], 3.0);
        let out = run_attention(&q, &k, &v, false, DType::F64);
        for c in 0..d {
            let col: Vec<f64> = (0..m).map(|s| v.data()[s * d + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let o = out.data()[i * d + c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}
