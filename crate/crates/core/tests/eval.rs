mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use xmda::eval::{self, miou, report_deltas, render_table, ConfusionMatrix, EvalAccumulator, FixtureTable, KEY_2D, KEY_3D, KEY_ENSEMBLE};
use xmda::nets::{Outputs, PredictionSet};
use xmda::tensor::Mat;

use common::{from_rows, oracle_miou};

#[test]
fn hand_computed_matrices() {
    let two = miou(&from_rows(&[&[1, 1], &[1, 1]])).unwrap();
    assert!((two.miou - 1.0 / 3.0).abs() < 1e-12);
    assert!(two.iou.iter().all(|v| (v.unwrap() - 1.0 / 3.0).abs() < 1e-12));

    // Class 0: 3 / (3 + 1 + 1); class 1: 2 / (2 + 1 + 2); class 2: 0 / (0 + 1 + 0).
    let three = miou(&from_rows(&[&[3, 1, 0], &[1, 2, 1], &[0, 0, 0]])).unwrap();
    let want = [3.0 / 5.0, 2.0 / 5.0, 0.0];
    for (got, w) in three.iou.iter().zip(want) {
        assert!((got.unwrap() - w).abs() < 1e-12);
    }
    assert!((three.miou - 1.0 / 3.0).abs() < 1e-12);

    // A class absent from truth and prediction is left out of the mean.
    let absent = miou(&from_rows(&[&[4, 0, 0], &[0, 0, 0], &[0, 1, 1]])).unwrap();
    assert_eq!(absent.iou[1], Some(0.0));
    let absent = miou(&from_rows(&[&[4, 0, 0], &[0, 0, 0], &[0, 0, 2]])).unwrap();
    assert_eq!(absent.iou[1], None);
    assert!((absent.miou - 1.0).abs() < 1e-12);

    assert!(miou(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn matches_a_recount_on_random_points() {
    let mut r = xmda::rng::substream(7, "eval-oracle");
    for classes in [2usize, 6, 11] {
        let truth: Vec<i32> = (0..1000).map(|_| if r.random_bool(0.1) { -1 } else { r.random_range(0..classes as i32) }).collect();
        let pred: Vec<usize> = (0..1000).map(|_| r.random_range(0..classes)).collect();
        let cm = eval::accumulate(ConfusionMatrix::new(classes), &pred, &truth).unwrap();
        assert_eq!(cm.total(), truth.iter().filter(|&&t| t >= 0).count() as u64);
        assert!((miou(&cm).unwrap().miou - oracle_miou(&pred, &truth, classes)).abs() < 1e-12);
    }
}

#[test]
fn invalid_inputs_are_rejected_without_counting() {
    let mut cm = ConfusionMatrix::new(3);
    assert!(cm.accumulate(&[0, 1], &[0]).is_err());
    assert!(cm.accumulate(&[0, 1], &[0, 3]).is_err());
    assert!(cm.accumulate(&[0, 5], &[0, 1]).is_err());
    assert_eq!(cm.total(), 0);
}

proptest! {
    #[test]
    fn batch_order_does_not_matter(
        points in prop::collection::vec((0usize..5, -1i32..5), 1..300),
        cuts in prop::collection::vec(0usize..300, 0..6),
        seed in any::<u64>(),
    ) {
        let (pred, truth): (Vec<usize>, Vec<i32>) = points.iter().copied().unzip();
        let whole = eval::accumulate(ConfusionMatrix::new(5), &pred, &truth).unwrap();

        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(&mut xmda::rng::substream(seed, "order"));
        let mut bounds: Vec<usize> = cuts.iter().map(|c| c % (points.len() + 1)).collect();
        bounds.extend([0, points.len()]);
        bounds.sort();
        let mut merged = ConfusionMatrix::new(5);
        for w in bounds.windows(2) {
            let idx = &order[w[0]..w[1]];
            let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let t: Vec<i32> = idx.iter().map(|&i| truth[i]).collect();
            merged.merge(&eval::accumulate(ConfusionMatrix::new(5), &p, &t).unwrap()).unwrap();
        }
        prop_assert_eq!(&merged, &whole);
        if whole.total() > 0 {
            prop_assert_eq!(miou(&merged).unwrap(), miou(&whole).unwrap());
        }
    }
}

fn random_probs(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
    let mut r = xmda::rng::substream(seed, "probs");
    let mut m = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(0.01..1.0)).collect());
    for i in 0..rows {
        let s: f64 = m.row(i).iter().sum();
        m.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    m
}

#[test]
fn identical_streams_give_identical_scores() {
    let p = random_probs(200, 6, 1);
    let truth: Vec<i32> = (0..200).map(|i| i % 7 - 1).collect();
    let out = Outputs::Dual(PredictionSet { p_2d: p.clone(), p_3d: p.clone(), p_2d_to_3d: p.clone(), p_3d_to_2d: p });
    let mut acc = EvalAccumulator::new();
    acc.add_outputs(&out, &truth).unwrap();
    let r = acc.report("target_test", "iter_000000").unwrap();
    assert_eq!(r.miou(KEY_2D), r.miou(KEY_3D));
    assert_eq!(r.miou(KEY_2D), r.miou(KEY_ENSEMBLE));
    assert_eq!(r.agreement, Some(1.0));
}

#[test]
fn accumulators_merge_like_one_pass() {
    let truth: Vec<i32> = (0..120).map(|i| i % 6).collect();
    let outs: Vec<Outputs<f64>> = (0..3)
        .map(|s| {
            let (a, b) = (random_probs(40, 6, 10 + s), random_probs(40, 6, 20 + s));
            Outputs::Dual(PredictionSet { p_2d: a.clone(), p_3d: b.clone(), p_2d_to_3d: a, p_3d_to_2d: b })
        })
        .collect();
    let mut one = EvalAccumulator::new();
    for (i, o) in outs.iter().enumerate() {
        one.add_outputs(o, &truth[i * 40..(i + 1) * 40]).unwrap();
    }
    let mut merged = EvalAccumulator::new();
    for i in [2, 0, 1] {
        let mut part = EvalAccumulator::new();
        part.add_outputs(&outs[i], &truth[i * 40..(i + 1) * 40]).unwrap();
        merged.merge(&part).unwrap();
    }
    assert_eq!(merged, one);
}

#[test]
fn fixture_round_trip_and_domain_gap() {
    let t = FixtureTable::shipped("uda").unwrap();
    let s = t.scenario("usa_singapore").unwrap();
    assert_eq!(s.rows["baseline"], [Some(58.4), Some(62.8), Some(68.2)]);
    let back: FixtureTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
    assert_eq!(back, t);

    let d = report_deltas(&s.named_rows()).unwrap();
    let gap = d.domain_gap.unwrap();
    assert!((gap[0].unwrap() - 17.0).abs() < 1e-9);
    let table = render_table(&s.title, &s.score_rows(), Some(&report_deltas(&s.named_rows()).unwrap()));
    let row = table.lines().find(|l| l.starts_with("Domain gap (O-B)")).unwrap();
    assert_eq!(row.split_whitespace().nth(3), Some("17.0"), "{row}");
    assert!(table.lines().any(|l| l.starts_with("baseline") && l.contains("58.4")));
}

#[test]
fn semi_supervised_rows() {
    let t = FixtureTable::shipped("ssda").unwrap();
    let s = t.scenario("usa_singapore").unwrap();
    let d = report_deltas(&s.named_rows()).unwrap();
    assert_eq!(d.domain_gap_label.as_deref(), Some("Domain gap (S vs. S+T_l)"));
    assert!((d.domain_gap.unwrap()[0].unwrap() - 13.5).abs() < 1e-9);
    assert!(d.unsupervised_advantage.is_some());
}

#[test]
fn single_row_has_no_deltas() {
    let mut rows = BTreeMap::new();
    rows.insert("xmuda".to_string(), [Some(50.0), Some(60.0), Some(65.0)]);
    assert!(report_deltas(&rows).is_err());
    rows.insert("baseline".to_string(), [Some(40.0), None, Some(50.0)]);
    assert!(report_deltas(&rows).is_err());
    rows.insert("oracle".to_string(), [Some(70.0), Some(75.0), Some(80.0)]);
    assert_eq!(report_deltas(&rows).unwrap().domain_gap.unwrap(), [Some(30.0), None, Some(30.0)]);
}
