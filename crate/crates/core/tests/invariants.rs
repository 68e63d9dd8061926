use proptest::prelude::*;
use proptest::test_runner::RngSeed;

use smre_core::autodiff::cosine_similarity_matrix;
use smre_core::sst_losses::{contrastive_loss_intra, triplet_loss_inter};
use smre_core::{SstConfig, Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec((0.05..2.0f64).prop_union(-2.0..-0.05f64), cols),
        rows,
    )
}

fn eval<F: FnOnce(&mut Tape) -> smre_core::Var>(f: F) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

fn scaled(rows: &[Vec<f64>], which: usize, c: f64) -> Vec<Vec<f64>> {
    let mut out = rows.to_vec();
    out[which].iter_mut().for_each(|x| *x *= c);
    out
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 128,
        rng_seed: RngSeed::Fixed(3),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(4, 7), log_scale in -3.0..3.0f64) {
        let scale = 10f64.powf(log_scale);
        let out = eval(|t| {
            let v = t.constant(Tensor::from_rows(&x).unwrap());
            t.softmax_lastdim(v, scale).unwrap()
        });
        for row in out.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn cosine_is_scale_invariant(a in matrix(3, 5), b in matrix(4, 5), c in 1e-3..1e3f64, row in 0..3usize) {
        let cos = |a: &[Vec<f64>]| eval(|t| {
            let x = t.constant(Tensor::from_rows(a).unwrap());
            let y = t.constant(Tensor::from_rows(&b).unwrap());
            cosine_similarity_matrix(t, x, y).unwrap()
        });
        let base = cos(&a);
        prop_assert!(base.max_abs_diff(&cos(&scaled(&a, row, c))) < 1e-12);
        prop_assert!(base.data().iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn matmul_is_associative(a in matrix(4, 4), b in matrix(4, 4), c in matrix(4, 4)) {
        let chain = |left_first: bool| eval(|t| {
            let (x, y, z) = (
                t.constant(Tensor::from_rows(&a).unwrap()),
                t.constant(Tensor::from_rows(&b).unwrap()),
                t.constant(Tensor::from_rows(&c).unwrap()),
            );
            if left_first {
                let xy = t.matmul(x, y).unwrap();
                t.matmul(xy, z).unwrap()
            } else {
                let yz = t.matmul(y, z).unwrap();
                t.matmul(x, yz).unwrap()
            }
        });
        prop_assert!(chain(true).max_abs_diff(&chain(false)) < 1e-9);
    }

    #[test]
    fn losses_are_nonnegative_and_scale_free(
        v in matrix(5, 4),
        s in matrix(5, 4),
        y in 0.0..=1.0f64,
        c in 1e-2..1e2f64,
        row in 0..5usize,
    ) {
        let cfg = SstConfig { alpha: 0.2, m: 0.2, y_signal: y };
        let losses = |v: &[Vec<f64>], s: &[Vec<f64>]| {
            let mut t = Tape::new();
            let a = t.constant(Tensor::from_rows(v).unwrap());
            let b = t.constant(Tensor::from_rows(s).unwrap());
            let inter = triplet_loss_inter(&mut t, a, b, &cfg).unwrap();
            let intra = contrastive_loss_intra(&mut t, a, b, &cfg).unwrap();
            (t.value(inter).item().unwrap(), t.value(intra).item().unwrap())
        };
        let (inter, intra) = losses(&v, &s);
        prop_assert!(inter >= 0.0 && intra >= 0.0);
        let (inter2, intra2) = losses(&scaled(&v, row, c), &scaled(&s, row, 1.0 / c));
        prop_assert!((inter - inter2).abs() < 1e-6);
        prop_assert!((intra - intra2).abs() < 1e-6);
    }
}

#[test]
fn triplet_vanishes_for_well_separated_embeddings() {
    // One-hot rows: positives have similarity 1, every cross pair 0 <= 1 - alpha.
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::identity(4));
    let l = triplet_loss_inter(&mut tape, e, e, &SstConfig::default()).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);
}

#[test]
fn identical_pairs_cost_margin_squared() {
    let rows = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.5]];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_rows(&rows).unwrap());
    let l = contrastive_loss_intra(&mut tape, v, v, &SstConfig::default()).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.04).abs() < 1e-12);
}

#[test]
fn push_term_is_non_increasing_in_distance() {
    let cfg = SstConfig::default();
    let mut prev = f64::INFINITY;
    for step in 0..=60 {
        let d = step as f64 * 0.005;
        let c = 1.0 - d;
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2], vec![c, (1.0 - c * c).sqrt()]).unwrap());
        let l = contrastive_loss_intra(&mut tape, a, b, &cfg).unwrap();
        let l = tape.value(l).item().unwrap();
        assert!(l <= prev + 1e-15, "D={d}: {l} > {prev}");
        if d >= cfg.m + 1e-9 {
            assert!(l < 1e-15, "D={d}: {l}");
        }
        prev = l;
    }
}
