use cloftr_core::matching::{dual_softmax, extract_matches, mae, score_matrix, MatchProbability, ScoreMatrix};
use cloftr_core::numerics::Tensor;
use cloftr_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new([rows, cols], data).unwrap()
}

fn sm(s: Tensor) -> ScoreMatrix {
    ScoreMatrix { s, tau: 1.0 }
}

#[test]
fn score_matrix_examples() {
    let e = t2(1, 3, vec![0.6, 0.8, 0.0]);
    assert_eq!(score_matrix(&e, &e, 1.0).unwrap().s.data(), &[1.0]);
    let basis = t2(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let s = score_matrix(&basis, &basis, 1.0).unwrap().s;
    assert_eq!(s, Tensor::eye(3));
    let f = t2(2, 2, vec![0.3, -1.2, 2.0, 0.5]);
    let one = score_matrix(&f, &f, 1.0).unwrap().s;
    let half = score_matrix(&f, &f, 0.5).unwrap().s;
    for (a, b) in one.data().iter().zip(half.data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn score_matrix_errors() {
    let f = t2(2, 2, vec![1.0; 4]);
    assert!(matches!(score_matrix(&f, &f, 0.0), Err(Error::Config(_))));
    assert!(matches!(score_matrix(&f, &f, -1.0), Err(Error::Config(_))));
    assert!(matches!(score_matrix(&f, &t2(2, 3, vec![0.0; 6]), 1.0), Err(Error::Dimension(_))));
}

#[test]
fn dual_softmax_examples() {
    assert_eq!(dual_softmax(&sm(t2(1, 1, vec![3.0]))).unwrap().p.data(), &[1.0]);
    let p = dual_softmax(&sm(t2(2, 2, vec![10.0, 0.0, 0.0, 10.0]))).unwrap().p;
    let sig = 1.0 / (1.0 + (-10f64).exp());
    let want = [sig * sig, (1.0 - sig) * (1.0 - sig), (1.0 - sig) * (1.0 - sig), sig * sig];
    for (a, b) in p.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((p.data()[0] - 0.99991).abs() < 1e-5 && (p.data()[1] - 2.06e-9).abs() < 1e-10);
    let p = dual_softmax(&sm(Tensor::full([3, 5], 2.5))).unwrap().p;
    assert!(p.data().iter().all(|v| (v - 1.0 / 15.0).abs() < 1e-15));
}

/// Scans every candidate pair and checks the rule from scratch.
fn exhaustive_oracle(p: &Tensor, threshold: f64, mnn: bool) -> Vec<(usize, usize)> {
    let (n, m) = (p.shape()[0], p.shape()[1]);
    let v = |i: usize, j: usize| p.data()[i * m + j];
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if v(i, j) < threshold {
                continue;
            }
            if mnn {
                let row_ok = (0..m).all(|k| v(i, k) < v(i, j) || (v(i, k) == v(i, j) && k >= j));
                let col_ok = (0..n).all(|k| v(k, j) < v(i, j) || (v(k, j) == v(i, j) && k >= i));
                if !(row_ok && col_ok) {
                    continue;
                }
            }
            out.push((i, j));
        }
    }
    out
}

#[test]
fn extract_matches_examples() {
    let p = MatchProbability {
        p: Tensor::from_fn([4, 4], |k| if k / 4 == k % 4 { 0.9 } else { 0.01 }),
    };
    for mnn in [false, true] {
        let got: Vec<_> = extract_matches(&p, 0.2, mnn).unwrap().matches.iter().map(|m| (m.cell_a, m.cell_b)).collect();
        assert_eq!(got, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }
    assert!(extract_matches(&p, 1.0 - 1e-9, false).unwrap().matches.is_empty());
    assert!(matches!(extract_matches(&p, 1.0, false), Err(Error::Config(_))));
    assert!(matches!(extract_matches(&p, 0.0, true), Err(Error::Config(_))));
}

#[test]
fn ties_go_to_smaller_index() {
    let p = MatchProbability {
        p: t2(2, 2, vec![0.4, 0.4, 0.1, 0.1]),
    };
    let got: Vec<_> = extract_matches(&p, 0.2, true).unwrap().matches.iter().map(|m| (m.cell_a, m.cell_b)).collect();
    assert_eq!(got, vec![(0, 0)]);
}

#[test]
fn extract_matches_agrees_with_exhaustive_scan() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::from_fn([8, 8], |_| rng.gen_range(-3.0..3.0));
        let p = dual_softmax(&sm(s)).unwrap();
        let threshold = rng.gen_range(0.01..0.3);
        for mnn in [false, true] {
            let set = extract_matches(&p, threshold, mnn).unwrap();
            let got: Vec<_> = set.matches.iter().map(|m| (m.cell_a, m.cell_b)).collect();
            assert_eq!(got, exhaustive_oracle(&p.p, threshold, mnn), "seed {seed} mnn {mnn}");
            assert!(set.matches.iter().all(|m| m.confidence >= threshold && m.confidence == p.p.data()[m.cell_a * 8 + m.cell_b]));
        }
    }
}

#[test]
fn mae_examples() {
    let g = Tensor::from_fn([3, 4], |k| if k % 5 == 0 { 1.0 } else { 0.0 });
    assert_eq!(mae(&g, &g).unwrap(), 0.0);
    let k = g.data().iter().sum::<f64>();
    assert!((mae(&Tensor::zeros([3, 4]), &g).unwrap() - k / 12.0).abs() < 1e-15);
    let u = Tensor::full([3, 4], 1.0 / 12.0);
    let direct: f64 = g.data().iter().map(|&gv| (1.0 / 12.0 - gv).abs()).sum::<f64>() / 12.0;
    assert!((mae(&u, &g).unwrap() - direct).abs() < 1e-15);
    let closed = (k * (1.0 - 1.0 / 12.0) + (12.0 - k) / 12.0) / 12.0;
    assert!((direct - closed).abs() < 1e-15);
    assert!(matches!(mae(&u, &Tensor::zeros([4, 3])), Err(Error::Dimension(_))));
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..7, 1usize..7).prop_flat_map(|(n, m)| {
        prop::collection::vec(-30.0f64..30.0, n * m).prop_map(move |v| Tensor::new([n, m], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dual_softmax_bounded_by_each_softmax(s in matrix()) {
        let (n, m) = (s.shape()[0], s.shape()[1]);
        let p = dual_softmax(&sm(s.clone())).unwrap().p;
        for i in 0..n {
            let row_sum: f64 = (0..m).map(|j| p.data()[i * m + j]).sum();
            prop_assert!(row_sum <= 1.0 + 1e-12);
        }
        for j in 0..m {
            let col_sum: f64 = (0..n).map(|i| p.data()[i * m + j]).sum();
            prop_assert!(col_sum <= 1.0 + 1e-12);
        }
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dual_softmax_shift_invariant(s in matrix(), c in -50.0f64..50.0) {
        let shifted = Tensor::from_fn(s.shape().to_vec(), |k| s.data()[k] + c);
        let a = dual_softmax(&sm(s)).unwrap().p;
        let b = dual_softmax(&sm(shifted)).unwrap().p;
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn mnn_uses_each_cell_once(s in matrix(), threshold in 0.001f64..0.5) {
        let p = dual_softmax(&sm(s)).unwrap();
        let set = extract_matches(&p, threshold, true).unwrap();
        let (n, m) = (p.p.shape()[0], p.p.shape()[1]);
        prop_assert!(set.matches.len() <= n.min(m));
        let mut rows: Vec<_> = set.matches.iter().map(|x| x.cell_a).collect();
        let mut cols: Vec<_> = set.matches.iter().map(|x| x.cell_b).collect();
        rows.dedup();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(rows.len(), set.matches.len());
        prop_assert_eq!(cols.len(), set.matches.len());
    }

    #[test]
    fn mae_in_unit_interval(s in matrix(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = dual_softmax(&sm(s)).unwrap().p;
        let g = Tensor::from_fn(p.shape().to_vec(), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let v = mae(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
