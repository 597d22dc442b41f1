mod common;

use std::f64::consts::E;
use std::rc::Rc;

use frontnet_core::autodiff::{ce_dice_parts, Graph, NceAnchor, NcePlan};
use frontnet_core::losses::{cds_loss, pixel_nce_batch, LossWeights};
use frontnet_core::model::Model;
use frontnet_core::nn::{rng_from_seed, Ctx, Linear, ParamStore};
use frontnet_core::Tensor;
use proptest::prelude::*;

fn nce(rows: &[f64], d: usize, labels: &[u8], tau: f64) -> (f64, bool) {
    let mut g = Graph::<f64>::inference();
    let e = g.constant(Tensor::from_vec(&[labels.len(), d], rows.to_vec()).unwrap());
    let e = g.l2_normalize_rows(e).unwrap();
    let (l, none) = pixel_nce_batch(&mut g, e, labels, tau).unwrap();
    (g.value(l).data()[0], none)
}

#[test]
fn two_anchors_one_orthogonal_negative() {
    let (l, none) = nce(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 2, &[0, 0, 1], 1.0);
    // anchors 0 and 1 each see the other as positive; row 2 has no positive
    assert!(!none);
    assert!((l - -(E / (E + 1.0)).ln()).abs() <= 1e-9);
    assert!((l - 0.3133).abs() < 1e-4);
}

#[test]
fn uniform_logits_cross_entropy_is_ln4() {
    let (ce, dice) = ce_dice_parts(&Tensor::<f64>::zeros(&[2, 4, 3, 3]), &[1u8; 18]).unwrap();
    assert!((ce - 4f64.ln()).abs() <= 1e-9);
    // class 1: inter 18/4, denom 1 + 18/4 + 18; absent classes: 1 − 1/(1 + 18/4)
    let d1 = 1.0 - (2.0 * 4.5 + 1.0) / (1.0 + 4.5 + 18.0);
    let d0 = 1.0 - 1.0 / (1.0 + 4.5);
    assert!((dice - (d1 + 3.0 * d0) / 4.0).abs() < 1e-12);
    let mut g = Graph::<f64>::inference();
    let z = g.constant(Tensor::zeros(&[2, 4, 3, 3]));
    let l = g.ce_dice(z, Rc::new(vec![1u8; 18])).unwrap();
    assert!((g.value(l).data()[0] - (ce + dice)).abs() < 1e-12);
}

#[test]
fn no_negatives_gives_zero() {
    let (l, none) = nce(&[1.0, 0.2, 0.3, 1.0, -0.5, 0.1], 2, &[2, 2, 2], 0.1);
    assert!(!none);
    assert_eq!(l, 0.0);
}

#[test]
fn closer_positive_lowers_the_loss() {
    let plan = Rc::new(NcePlan {
        anchors: vec![NceAnchor {
            anchor: 0,
            positives: vec![1],
            negatives: vec![2],
        }],
    });
    let eval = |angle: f64| {
        let mut g = Graph::<f64>::inference();
        let rows = vec![1.0, 0.0, angle.cos(), angle.sin(), 0.0, -1.0];
        let e = g.constant(Tensor::from_vec(&[3, 2], rows).unwrap());
        let (l, _) = g.pixel_nce(e, plan.clone(), 0.5).unwrap();
        g.value(l).data()[0]
    };
    let mut prev = eval(1.5);
    for step in 1..8 {
        let l = eval(1.5 - 0.2 * step as f64);
        assert!(l < prev, "step {step}: {l} !< {prev}");
        prev = l;
    }
}

#[test]
fn explicit_plan_is_order_invariant() {
    let rows = [0.3, -1.0, 0.8, 0.5, -0.2, 0.9, 1.0, 0.1, -0.7, -0.4];
    let mut g = Graph::<f64>::inference();
    let e = g.constant(Tensor::from_vec(&[5, 2], rows.to_vec()).unwrap());
    let e = g.l2_normalize_rows(e).unwrap();
    let mut plan = NcePlan::exhaustive(&[0, 1, 0, 1, 0]);
    let (a, _) = g.pixel_nce(e, Rc::new(plan.clone()), 0.2).unwrap();
    plan.anchors.reverse();
    let (b, _) = g.pixel_nce(e, Rc::new(plan), 0.2).unwrap();
    assert!((g.value(a).data()[0] - g.value(b).data()[0]).abs() < 1e-12);
}

fn cds_fixture(feature: Vec<f64>, labels: Vec<u8>) -> (f64, bool) {
    let mut store = ParamStore::<f64>::new();
    let head = Linear::new(&mut store, &mut rng_from_seed(0), "p", 2, 2, false);
    *store.get_mut(head.w) = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false);
    let f = ctx.g.constant(Tensor::from_vec(&[1, 2, 2, 2], feature).unwrap());
    let w = LossWeights { tau: 0.5, ..LossWeights::default() };
    let (l, degenerate) = cds_loss(&mut ctx, &[f], &[head], &labels, 4, &w, &mut rng_from_seed(1)).unwrap();
    (g.value(l).data()[0], degenerate)
}

#[test]
fn constant_hook_feature_gives_log_of_one_plus_negatives() {
    // every embedding is the same unit vector, so each anchor scores
    // −log(e^{2}/(e^{2} + |N|·e^{2})) = ln(1 + |N|)
    let labels: Vec<u8> = (0..16).map(|i| (i >= 8) as u8).collect();
    let (l, degenerate) = cds_fixture(vec![0.6, 0.6, 0.6, 0.6, -0.8, -0.8, -0.8, -0.8], labels);
    assert!(!degenerate);
    assert!((l - 9f64.ln()).abs() < 1e-12);
}

#[test]
fn constant_labels_give_zero_contrastive_loss() {
    let (l, degenerate) = cds_fixture(vec![0.1, 0.7, -0.3, 0.2, 0.5, 0.5, 0.9, -1.0], vec![3; 16]);
    assert!(!degenerate);
    assert_eq!(l, 0.0);
}

#[test]
fn total_loss_bookkeeping() {
    let pairs = common::rich_pairs(7, 112, 3, 2);
    let batch = common::batch_f64(&pairs);
    let (model, store) = Model::new::<f64>(common::grad_config(), 2).unwrap();
    let eval = |w: &LossWeights| {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, true);
        let c = ctx.g.constant(batch.context.clone());
        let t = ctx.g.constant(batch.target.clone());
        let out = model.forward(&mut ctx, c, t).unwrap();
        let l = model.loss(&mut ctx, &out, &batch.y_t, &batch.y_c, w, &mut rng_from_seed(4)).unwrap();
        let v = |x| g.value(x).data()[0];
        (v(l.total), v(l.target), v(l.context.unwrap()), v(l.aux.unwrap()), g.value(out.target_logits).clone())
    };
    let w = LossWeights::default();
    assert_eq!((w.lambda1, w.lambda2, w.lambda3), (1.0, 1.0, 0.5));
    let (total, lt, lc, aux, _) = eval(&w);
    assert!((total - (lt + lc + 0.5 * aux)).abs() < 1e-9);
    let (total, lt, _, _, logits) = eval(&LossWeights { lambda2: 0.0, lambda3: 0.0, ..w });
    let (ce, dice) = ce_dice_parts(&logits, &batch.y_t).unwrap();
    assert_eq!(total, lt);
    assert_eq!(lt, ce + dice);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pixel_nce_is_nonnegative(
        rows in prop::collection::vec(-1.0f64..1.0, 8 * 3),
        labels in prop::collection::vec(0u8..3, 8),
        tau in 0.05f64..2.0,
    ) {
        let (l, none) = nce(&rows, 3, &labels, tau);
        prop_assert!(l >= 0.0);
        if none {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn embeddings_are_unit_norm(rows in prop::collection::vec(-3.0f64..3.0, 6 * 4)) {
        prop_assume!(rows.chunks(4).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let mut g = Graph::<f64>::inference();
        let e = g.constant(Tensor::from_vec(&[6, 4], rows).unwrap());
        let n = g.l2_normalize_rows(e).unwrap();
        for r in g.value(n).data().chunks(4) {
            prop_assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
