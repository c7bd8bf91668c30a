mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use subspace_fusion::coord::{coordinate, BranchGradients};
use subspace_fusion::data::Subspace;
use subspace_fusion::fusion::ge_con_loss;
use subspace_fusion::objectives::{binary_auc, classification_metrics};
use subspace_fusion::tensor::{Tape, Tensor};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn vec_pair(max_dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_dim).prop_flat_map(|d| (prop::collection::vec(-5.0..5.0f64, d), prop::collection::vec(-5.0..5.0f64, d)))
}

fn ge_con(genes: &Tensor, points: &Tensor) -> f64 {
    let tape = Tape::new();
    ge_con_loss(tape.constant(genes.clone()), tape.constant(points.clone()))
        .unwrap()
        .item()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop_oneof![-3.0..-0.1f64, 0.1..3.0f64], rows * cols)
        .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn coordination_properties((g_t, g_e) in vec_pair(64), conf_t in 0.0..8.0f64, conf_e in 0.0..8.0f64) {
        let bg = BranchGradients { grad_t: g_t.clone(), grad_e: g_e.clone(), conf_t, conf_e };
        let out = coordinate(&bg).unwrap();
        let conflict = dot(&g_t, &g_e) < 0.0 && norm(&g_t) > 0.0 && norm(&g_e) > 0.0;
        match out.adjusted {
            None => {
                prop_assert!(!conflict || conf_t == conf_e);
                prop_assert_eq!(&out.grad_t, &g_t);
                prop_assert_eq!(&out.grad_e, &g_e);
            }
            Some(branch) => {
                prop_assert!(conflict);
                let (adj, orig, other, kept) = match branch {
                    Subspace::Tumour => (&out.grad_t, &g_t, &g_e, &out.grad_e),
                    Subspace::Tme => (&out.grad_e, &g_e, &g_t, &out.grad_t),
                };
                prop_assert_eq!(branch == Subspace::Tumour, conf_t < conf_e);
                prop_assert_eq!(kept, other);
                prop_assert!(dot(adj, other).abs() <= 1e-9 * norm(adj).max(1.0) * norm(other));
                prop_assert!(norm(adj) <= norm(orig) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn ge_con_is_non_negative(genes in matrix(4, 3), pts in matrix(4, 8)) {
        let pts = Tensor::new(&[4, 2, 2, 2], pts.into_data()).unwrap();
        prop_assert!(ge_con(&genes, &pts) >= 0.0);
    }

    #[test]
    fn ge_con_ignores_positive_row_scale(
        genes in matrix(5, 4),
        pts in matrix(5, 8),
        scales in prop::collection::vec(0.01..100.0f64, 5),
    ) {
        let pts = Tensor::new(&[5, 2, 2, 2], pts.into_data()).unwrap();
        let scaled = Tensor::from_fn(&[5, 4], |i| genes.data()[i] * scales[i / 4]);
        let (a, b) = (ge_con(&genes, &pts), ge_con(&scaled, &pts));
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn ge_con_vanishes_for_equal_grams(pts in matrix(4, 8), scales in prop::collection::vec(0.5..2.0f64, 4)) {
        let points = Tensor::new(&[4, 2, 2, 2], pts.data().to_vec()).unwrap();
        prop_assert_eq!(ge_con(&pts, &points), 0.0);
        // Same Gram through a per-row positive rescale of the gene side.
        let scaled = Tensor::from_fn(&[4, 8], |i| pts.data()[i] * scales[i / 8]);
        prop_assert!(ge_con(&scaled, &points) <= 1e-12);
    }

    #[test]
    fn gram_is_symmetric_unit_diagonal_psd(b in 1usize..=8, d in 1usize..=6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = common::randn(&mut rng, &[b, d]);
        prop_assume!(x.data().chunks(d).all(|r| norm(r) > 1e-6));
        let tape = Tape::new();
        let g = tape.constant(x).gram_matrix().unwrap().value();
        for i in 0..b {
            prop_assert!((g.at(&[i, i]) - 1.0).abs() <= 1e-12);
            for j in 0..b {
                prop_assert!((g.at(&[i, j]) - g.at(&[j, i])).abs() <= 1e-12);
            }
        }
        let m = DMatrix::from_row_slice(b, b, g.data());
        let min = m.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-9, "eigenvalue {}", min);
    }

    #[test]
    fn metrics_ignore_sample_order(seed in any::<u64>(), n in 4usize..40) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = common::rng(seed);
        let k = 3;
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| (rng.gen_range(0..4) as f64) + 0.5).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let base = classification_metrics(&probs, &labels).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let p2: Vec<Vec<f64>> = order.iter().map(|&i| probs[i].clone()).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(classification_metrics(&p2, &l2).unwrap(), base);
    }

    #[test]
    fn auc_is_rank_based(scores in prop::collection::vec(-3.0..3.0f64, 2..30), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = common::rng(seed);
        let mut positive: Vec<bool> = scores.iter().map(|_| rng.gen()).collect();
        positive[0] = true;
        positive[1] = false;
        let auc = binary_auc(&scores, &positive).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 2.0 + 1.0).collect();
        prop_assert_eq!(binary_auc(&transformed, &positive).unwrap(), auc);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((binary_auc(&negated, &positive).unwrap() + auc - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ge_con_hand_case() {
    let genes = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let pts = Tensor::new(&[2, 1, 1, 2], vec![0.3, -0.4, 0.3, -0.4]).unwrap();
    assert!((ge_con(&genes, &pts) - 2f64.sqrt() / 2.0).abs() <= 1e-12);
}
