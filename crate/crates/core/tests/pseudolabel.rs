mod common;

use common::{argmax_labels, random_maps, sort_oracle};

use proptest::prelude::*;
use xmda::nets::checkpoint::{self, save};
use xmda::nets::{FusionConfig, FusionMode, HeadMode, Model};
use xmda::pseudolabel::{coverage_report, extract, extract_from_checkpoint, select, PseudoLabelError, PseudoLabelSet};
use xmda::tensor::Mat;

#[test]
fn selection_matches_sort_oracle() {
    let maps = random_maps(&[37, 52, 8, 61, 24], 6, 3);
    for p in [0.0, 0.1, 0.5, 0.9, 1.0] {
        let (labels, sel) = select(&maps, p).unwrap();
        assert_eq!(labels, sort_oracle(&maps, p), "p = {p}");
        let total: u64 = sel.candidates.iter().sum();
        assert_eq!(total, 182);
    }
}

#[test]
fn ties_at_the_threshold_are_all_kept() {
    let m = Mat::from_vec(4, 2, vec![0.8, 0.2, 0.8, 0.2, 0.8, 0.2, 0.9, 0.1]);
    let (labels, sel) = select(&[m], 0.5).unwrap();
    assert_eq!(sel.thresholds[0], Some(0.8));
    assert_eq!(labels[0], vec![0, 0, 0, 0]);
}

#[test]
fn full_and_empty_selection() {
    let maps = random_maps(&[30, 30, 30], 6, 9);
    assert_eq!(select(&maps, 1.0).unwrap().0, argmax_labels(&maps));
    assert!(select(&maps, 0.0).unwrap().0.iter().flatten().all(|&l| l == -1));
    assert!(matches!(select(&maps, 1.5), Err(PseudoLabelError::InvalidP(_))));
    assert!(matches!(select::<f64>(&[], 0.5), Err(PseudoLabelError::EmptySplit)));
}

proptest! {
    #[test]
    fn selection_grows_with_p(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let maps = random_maps(&[20, 33, 7], 4, seed);
        let (small, _) = select(&maps, lo).unwrap();
        let (large, _) = select(&maps, hi).unwrap();
        let argmax = argmax_labels(&maps);
        for ((s, l), am) in small.iter().flatten().zip(large.iter().flatten()).zip(argmax.iter().flatten()) {
            if *s >= 0 {
                prop_assert_eq!(s, l);
            }
            if *l >= 0 {
                prop_assert_eq!(l, am);
            }
        }
    }
}

#[test]
fn extraction_needs_a_final_dual_checkpoint() {
    let cfg = common::tiny_config(HeadMode::Dual);
    let samples = common::tiny_samples("pl", 4, 5);
    let prepared = common::prepare(&samples, &cfg);
    let model = Model::<f32>::new(&cfg, 2);
    let dir = tempfile::tempdir().unwrap();

    let mid = save(&model, &dir.path().join("mid"), 10, false, None).unwrap();
    assert!(matches!(extract(&model, &mid, &prepared, 0.9), Err(PseudoLabelError::StaleCheckpoint(10))));

    let fin = save(&model, &dir.path().join("final"), 20, true, None).unwrap();
    let set = extract_from_checkpoint(&dir.path().join("final"), &prepared, 0.9).unwrap();
    assert_eq!(set.manifest.checkpoint_hash, fin.hash);
    assert_eq!(set.labels.len(), prepared.len());
    for (l, s) in set.labels.iter().zip(&prepared) {
        assert_eq!(l.pl_2d.len(), s.len());
        assert_eq!(l.pl_3d.len(), s.len());
    }
    assert!(set.check_source(&fin.hash).is_ok());
    assert!(matches!(set.check_source("other"), Err(PseudoLabelError::CheckpointMismatch { .. })));

    let out = dir.path().join("pl");
    set.write(&out).unwrap();
    let back = PseudoLabelSet::read(&out).unwrap();
    assert_eq!(back, set);
    let keys: Vec<String> = prepared.iter().map(|s| s.key.clone()).rev().collect();
    assert_eq!(back.aligned(&keys).unwrap()[0], &set.labels[prepared.len() - 1]);
    assert!(back.aligned(&["missing".to_string()]).is_err());

    let cov = coverage_report(&set);
    for c in cov.classes_2d.iter().chain(&cov.classes_3d) {
        assert!(c.selected <= c.candidates);
        assert!((0.0..=1.0).contains(&c.fraction));
    }
    let n: u64 = cov.classes_3d.iter().map(|c| c.candidates).sum();
    assert_eq!(n as usize, prepared.iter().map(|s| s.len()).sum::<usize>());

    let mut fused = cfg.clone();
    fused.fusion = Some(FusionConfig { mode: FusionMode::Vanilla, width: 5 });
    let fmodel = Model::<f32>::new(&fused, 2);
    let fdir = dir.path().join("fusion");
    save(&fmodel, &fdir, 20, true, None).unwrap();
    assert!(matches!(extract_from_checkpoint(&fdir, &prepared, 0.9), Err(PseudoLabelError::NotDual)));
    assert_eq!(checkpoint::read_manifest(&fdir).unwrap().iteration, 20);
}
