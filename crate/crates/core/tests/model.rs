use cloftr_core::bench::{attention_timings, bench_pipeline};
use cloftr_core::dataio::{load_weights, save_weights};
use cloftr_core::matching::{dual_softmax, score_matrix};
use cloftr_core::model::{Model, ModelConfig};
use cloftr_core::numerics::Tensor;
use cloftr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([1, h, w], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn prediction_shapes_and_probability_bounds() {
    let model = Model::new(ModelConfig::reduced(), 0).unwrap();
    let pred = model.predict(&image(64, 48, 1), &image(32, 64, 2)).unwrap();
    assert_eq!((pred.grid_a, pred.grid_b), ((4, 3), (2, 4)));
    assert_eq!(pred.prob.p.shape(), &[12, 8]);
    assert!(pred.prob.p.data().iter().all(|p| (0.0..=1.0).contains(p)));
    let again = dual_softmax(&pred.scores).unwrap();
    assert!(again.p.max_abs_diff(&pred.prob.p) < 1e-15);
}

#[test]
fn scores_scale_with_inverse_tau() {
    let mut cfg = ModelConfig::reduced();
    let (a, b) = (image(32, 32, 3), image(32, 32, 4));
    let s1 = Model::new(cfg.clone(), 1).unwrap().predict(&a, &b).unwrap().scores.s;
    cfg.tau = 0.05;
    let s2 = Model::new(cfg, 1).unwrap().predict(&a, &b).unwrap().scores.s;
    for (x, y) in s1.data().iter().zip(s2.data()) {
        assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn score_matrix_helper_matches_model() {
    let f = Tensor::from_fn([3, 4], |k| k as f64 * 0.1);
    let g = Tensor::from_fn([2, 4], |k| 1.0 - k as f64 * 0.2);
    let s = score_matrix(&f, &g, 0.1).unwrap();
    let direct: f64 = (0..4).map(|c| f.data()[c] * g.data()[c]).sum::<f64>() / 0.1;
    assert!((s.s.data()[0] - direct).abs() < 1e-12);
}

#[test]
fn weights_round_trip_reproduces_predictions() {
    let model = Model::new(ModelConfig::reduced(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.clfw");
    save_weights(&path, model.params.iter()).unwrap();
    let back = Model::from_weights(ModelConfig::reduced(), &load_weights(&path).unwrap()).unwrap();
    let (a, b) = (image(32, 32, 5), image(32, 32, 6));
    assert_eq!(model.predict(&a, &b).unwrap(), back.predict(&a, &b).unwrap());
}

#[test]
fn weights_for_another_architecture_are_rejected() {
    let teacher = Model::new(ModelConfig::teacher(), 0).unwrap();
    let r = Model::from_weights(ModelConfig::reduced(), &teacher.params.to_map());
    assert!(r.is_err());
}

#[test]
fn parameter_counts() {
    assert_eq!(Model::new(ModelConfig::reduced(), 0).unwrap().param_count(), 113_016);
    assert_eq!(Model::new(ModelConfig::teacher(), 0).unwrap().param_count(), 4_033_584);
}

#[test]
fn mismatched_widths_are_config_errors() {
    let mut cfg = ModelConfig::reduced();
    cfg.backbone.d_model = 64;
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn bench_runs_once() {
    let model = Model::new(ModelConfig::reduced(), 0).unwrap();
    let r = bench_pipeline(&model, 32, 32, 1, 0).unwrap();
    assert_eq!(r.iters, 1);
    assert!(r.median_ms > 0.0 && (r.fps * r.median_ms - 1e3).abs() < 1e-6);
    let (fast, reference) = attention_timings(16, 1, 8, 1, 0).unwrap();
    assert!(fast > 0.0 && reference > 0.0);
}
