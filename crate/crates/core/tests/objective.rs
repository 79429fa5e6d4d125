mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use stmn::language::Tag;
use stmn::numerics::Tape;
use stmn::objective::{bce_loss, dice_loss, mask_iou, score_loss, LossWeights, MetricsReport, SplitMetrics};

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!((w.bce, w.dice, w.rel, w.score), (1.0, 1.0, 5.0, 0.5));
}

#[test]
fn accuracy_thresholds_are_inclusive() {
    let m = SplitMetrics::from_ious(&[0.25, 0.5, 0.1, 0.49]);
    assert_eq!(m.acc_at_025, 0.75);
    assert_eq!(m.acc_at_05, 0.25);
    assert!((m.miou - 0.335).abs() < 1e-15);
    assert_eq!(m.n_expressions, 4);
}

#[test]
fn score_loss_is_gated_strictly_above_one_half() {
    let mut tape = Tape::new();
    let s = tape.constant(1, 1, vec![0.9]).unwrap();
    let at = score_loss(&mut tape, s, 0.5).unwrap();
    let above = score_loss(&mut tape, s, 0.6).unwrap();
    assert_eq!(tape.scalar(at), 0.0);
    assert!((tape.scalar(above) - 0.3).abs() < 1e-15);
}

#[test]
fn mask_iou_edge_cases() {
    assert_eq!(mask_iou(&[false, false], &[false, false]).unwrap(), 1.0);
    assert_eq!(mask_iou(&[true, false], &[false, true]).unwrap(), 0.0);
    assert_eq!(mask_iou(&[true, true, false], &[true, false, false]).unwrap(), 0.5);
    assert!(mask_iou(&[true], &[true, false]).is_err());
}

#[test]
fn per_tag_metrics_partition_the_records() {
    let recs = [(Tag::Unique, 0.9), (Tag::Multiple, 0.2), (Tag::Unique, 0.4), (Tag::Multiple, 0.6)];
    let m = MetricsReport::from_records(&recs);
    assert_eq!(m.n_expressions, 4);
    assert_eq!(m.per_tag[&Tag::Unique].n_expressions, 2);
    assert!((m.per_tag[&Tag::Unique].miou - 0.65).abs() < 1e-15);
    assert_eq!(m.per_tag[&Tag::Multiple].acc_at_05, 0.5);
}

fn eval(p: &[f64], y: &[bool], dice: bool) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(1, p.len(), p.to_vec()).unwrap();
    let l = if dice { dice_loss(&mut tape, v, y) } else { bce_loss(&mut tape, v, y) }.unwrap();
    tape.scalar(l)
}

proptest! {
    #[test]
    fn metrics_ignore_record_order(ious in proptest::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>()) {
        let tagged = |v: &[f64]| v.iter().enumerate().map(|(i, &x)| (if i % 3 == 0 { Tag::Unique } else { Tag::Multiple }, x)).collect::<Vec<_>>();
        let a = MetricsReport::from_records(&tagged(&ious));
        let mut r = common::rng(seed);
        let mut recs = tagged(&ious);
        recs.shuffle(&mut r);
        let b = MetricsReport::from_records(&recs);
        prop_assert_eq!(a.miou.to_bits(), b.miou.to_bits());
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 1..50), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn losses_are_nonnegative_and_finite(p in proptest::collection::vec(0.0f64..=1.0, 1..30), seed in any::<u64>()) {
        let y: Vec<bool> = (0..p.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        for dice in [false, true] {
            let l = eval(&p, &y, dice);
            prop_assert!(l.is_finite() && l >= -1e-12);
        }
    }
}
