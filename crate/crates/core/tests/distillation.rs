use cloftr_core::distillation::{kl_distill_loss, soften, target_loss, total_loss, DistillConfig};
use cloftr_core::numerics::gradcheck::check_inputs;
use cloftr_core::numerics::{Tape, Tensor};
use cloftr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn soften_values(s: &Tensor, t: f64) -> Vec<f64> {
    let tape = Tape::new();
    let v = soften(&tape, tape.constant(s).unwrap(), t).unwrap();
    tape.data(v)
}

fn kl(student: &Tensor, teacher: &Tensor, t: f64) -> f64 {
    let tape = Tape::new();
    let (s, te) = (tape.constant(student).unwrap(), tape.constant(teacher).unwrap());
    tape.item(kl_distill_loss(&tape, s, te, t).unwrap()).unwrap()
}

#[test]
fn soften_examples() {
    let out = soften_values(&Tensor::full([3, 4], 1.7), 5.0);
    assert_eq!(out.len(), 12);
    assert!(out.iter().all(|v| (v + 12f64.ln()).abs() < 1e-14));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = rand_t(&mut rng, &[4, 5], 10.0);
    assert!(soften_values(&s, 1e6).iter().all(|v| (v + 20f64.ln()).abs() < 1e-4));
    let out = soften_values(&Tensor::new([1, 2], vec![0.0, 9f64.ln()]).unwrap(), 1.0);
    assert!((out[0] - 0.1f64.ln()).abs() < 1e-14 && (out[1] - 0.9f64.ln()).abs() < 1e-14);
}

#[test]
fn soften_rejects_bad_temperature() {
    let tape = Tape::new();
    let s = tape.constant(&Tensor::zeros([2, 2])).unwrap();
    assert!(matches!(soften(&tape, s, 0.0), Err(Error::Config(_))));
}

#[test]
fn kl_of_equal_inputs_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = rand_t(&mut rng, &[6, 7], 20.0);
    assert!(kl(&s, &s, 5.0).abs() < 1e-12);
}

#[test]
fn kl_near_delta_against_uniform_is_ln2() {
    let teacher = Tensor::new([1, 2], vec![100.0, 0.0]).unwrap();
    let student = Tensor::zeros([1, 2]);
    assert!((kl(&student, &teacher, 1.0) - 2f64.ln()).abs() < 1e-12);
    // t² scaling: at t = 2 the softened teacher is no longer a delta.
    let q = (-50f64).exp() / (1.0 + (-50f64).exp());
    let p = 1.0 / (1.0 + (-50f64).exp());
    let want = 4.0 * (p * (2.0 * p).ln() + q * (2.0 * q).ln());
    assert!((kl(&student, &teacher, 2.0) - want).abs() < 1e-12);
}

#[test]
fn kl_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.gen_range(1..6);
        let m = rng.gen_range(1..6);
        let a = rand_t(&mut rng, &[n, m], 30.0);
        let b = rand_t(&mut rng, &[n, m], 30.0);
        assert!(kl(&a, &b, rng.gen_range(0.5..10.0)) >= 0.0);
    }
}

#[test]
fn kl_shape_mismatch_is_error() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros([2, 3])).unwrap();
    let b = tape.constant(&Tensor::zeros([3, 2])).unwrap();
    assert!(matches!(kl_distill_loss(&tape, a, b, 5.0), Err(Error::Dimension(_))));
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let student = rand_t(&mut rng, &[3, 4], 10.0);
        let teacher = rand_t(&mut rng, &[3, 4], 10.0);
        let report = check_inputs(
            &[student],
            |tape, v| kl_distill_loss(tape, v[0], tape.constant(&teacher)?, 5.0),
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}

#[test]
fn no_gradient_reaches_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let student = tape.leaf(&rand_t(&mut rng, &[3, 3], 5.0).with_requires_grad(true)).unwrap();
    let teacher = tape.leaf(&rand_t(&mut rng, &[3, 3], 5.0).with_requires_grad(true)).unwrap();
    let loss = kl_distill_loss(&tape, student, teacher, 5.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(student).unwrap().data().iter().any(|g| *g != 0.0));
    if let Some(g) = grads.get(teacher) {
        assert!(g.data().iter().all(|v| *v == 0.0));
    }
}

fn target(p: &Tensor, gt: &[usize]) -> Result<f64, Error> {
    let tape = Tape::new();
    let v = target_loss(&tape, tape.constant(p)?, gt)?;
    tape.item(v)
}

#[test]
fn target_loss_examples() {
    let p = Tensor::from_fn([3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 });
    assert_eq!(target(&p, &[0, 4, 8]).unwrap(), 0.0);
    let e = Tensor::new([1, 2], vec![(-1f64).exp(), 0.5]).unwrap();
    assert!((target(&e, &[0]).unwrap() - 1.0).abs() < 1e-15);
    let floor = target(&Tensor::zeros([2, 2]), &[3]).unwrap();
    assert!((floor - 1e12f64.ln()).abs() < 1e-9);
    assert!(matches!(target(&p, &[]), Err(Error::Contract(_))));
    assert!(matches!(target(&p, &[9]), Err(Error::Dimension(_))));
}

#[test]
fn target_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let p = Tensor::from_fn([4, 5], |_| rng.gen_range(1e-6..1.0));
        let gt: Vec<usize> = (0..3).map(|_| rng.gen_range(0..20)).collect();
        let direct = -gt.iter().map(|&k| p.data()[k].ln()).sum::<f64>() / 3.0;
        assert!((target(&p, &gt).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn total_loss_examples() {
    let cfg = DistillConfig::default();
    assert_eq!((cfg.t, cfg.c_d, cfg.c_t), (5.0, 0.3, 0.7));
    assert!((total_loss(0.0, 1.0, &cfg).total - 0.7).abs() < 1e-15);
    assert!((total_loss(1.0, 0.0, &cfg).total - 0.3).abs() < 1e-15);
    let baseline = DistillConfig { c_d: 0.0, ..cfg };
    let b = total_loss(123.0, 2.0, &baseline);
    assert_eq!((b.l_distill, b.l_target), (123.0, 2.0));
    assert!((b.total - 1.4).abs() < 1e-15);
    let (x, y) = (total_loss(2.0, 3.0, &cfg).total, total_loss(4.0, 6.0, &cfg).total);
    assert!((2.0 * x - y).abs() < 1e-12);
}

#[test]
fn distill_config_validation() {
    assert!(DistillConfig::default().validate().is_ok());
    for bad in [
        DistillConfig { t: 0.0, ..Default::default() },
        DistillConfig { c_d: -0.1, ..Default::default() },
        DistillConfig { c_d: 0.0, c_t: 0.0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
