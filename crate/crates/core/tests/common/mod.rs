//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use xmda::eval::ConfusionMatrix;
use xmda::losses::{seg_loss, xm_loss, ClassWeights, LossWeights, PseudoLabels};
use xmda::nets::layers::Module;
use xmda::nets::{HeadMode, Model, ModelConfig, PredictionSet, PreparedSample, Stream2DConfig, Stream3DConfig};
use xmda::sample::Sample;
use xmda::scenegen::presets::{ScenarioKind, SplitName};
use xmda::scenegen::{generate_scene, DomainSpec};
use xmda::tensor::Mat;
use xmda::trainer::{Regime, TrainConfig, TrainData};

/// A model small enough for exhaustive finite differences. Large voxels make
/// every sparse kernel offset carry data.
pub fn tiny_config(head: HeadMode) -> ModelConfig {
    ModelConfig {
        num_classes: 6,
        stream2d: Stream2DConfig { widths: vec![3, 3], out_dim: 4 },
        stream3d: Stream3DConfig { voxel_size: 0.6, widths: vec![3, 3], out_dim: 4 },
        head,
        fusion: None,
    }
}

pub fn tiny_spec(name: &str, seed: u64) -> DomainSpec {
    let mut spec = DomainSpec::new(name, seed);
    spec.image_height = 8;
    spec.image_width = 10;
    spec.lidar_rings = 5;
    spec.points_per_ring = 8;
    spec
}

pub fn tiny_samples(name: &str, seed: u64, n: u64) -> Vec<Sample> {
    let spec = tiny_spec(name, seed);
    (0..n).map(|f| generate_scene(&spec, f).unwrap()).filter(|s| !s.is_empty()).collect()
}

pub fn prepare(samples: &[Sample], cfg: &ModelConfig) -> Vec<PreparedSample> {
    samples.iter().map(|s| PreparedSample::new(s, &cfg.stream3d).unwrap()).collect()
}

pub fn labels(samples: &[Sample]) -> Vec<i32> {
    samples.iter().flat_map(|s| s.labels.iter().copied()).collect()
}

pub fn dual(model: &Model<f64>, batch: &[&PreparedSample]) -> PredictionSet<f64> {
    model.predict(batch).unwrap().dual().unwrap().clone()
}

/// Flattened parameter values in visit order.
pub fn values(model: &Model<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit("", &mut |_, p| out.extend_from_slice(&p.value));
    out
}

pub fn grads(model: &Model<f64>) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, p| out.push((name.to_string(), p.grad.clone())));
    out
}

/// Zero-initialized biases put dead inputs exactly on a rectifier kink, where
/// central differences are meaningless; random biases avoid that.
pub fn randomize_biases(model: &mut Model<f64>, seed: u64) {
    use rand::Rng as _;
    let mut rng = xmda::rng::substream(seed, "test-bias");
    model.visit_mut("", &mut |name, p| {
        if name.ends_with(".b") {
            p.value.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    });
}

/// Adds `delta` to the `index`-th scalar parameter in visit order.
pub fn nudge(model: &mut Model<f64>, index: usize, delta: f64) {
    let mut seen = 0;
    model.visit_mut("", &mut |_, p| {
        if index >= seen && index < seen + p.len() {
            p.value[index - seen] += delta;
        }
        seen += p.len();
    });
}

/// One labeled or unlabeled batch part, recomposed from the scalar losses
/// with mimicry targets frozen at `frozen` (the detached main predictions).
pub struct OraclePart<'a> {
    pub labels: Option<&'a [i32]>,
    pub seg: f64,
    pub xm: f64,
    pub pseudo: Option<PseudoLabels<'a>>,
    pub pl: f64,
}

pub fn oracle_objective(parts: &[(OraclePart<'_>, PredictionSet<f64>, PredictionSet<f64>)], cw: &ClassWeights) -> f64 {
    let mut total = 0.0;
    for (part, p, frozen) in parts {
        if part.seg != 0.0 {
            let y = part.labels.unwrap();
            total += part.seg * (seg_loss(&p.p_2d, y, cw).unwrap() + seg_loss(&p.p_3d, y, cw).unwrap());
        }
        if part.xm != 0.0 {
            total += part.xm * (xm_loss(&frozen.p_3d, &p.p_2d_to_3d).unwrap() + xm_loss(&frozen.p_2d, &p.p_3d_to_2d).unwrap());
        }
        if part.pl != 0.0 {
            let pl = part.pseudo.unwrap();
            total += part.pl * (seg_loss(&p.p_2d, pl.pl_2d, cw).unwrap() + seg_loss(&p.p_3d, pl.pl_3d, cw).unwrap());
        }
    }
    total
}

pub fn default_weights() -> LossWeights {
    LossWeights::default()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Which objective a gradient check exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Uda,
    UdaPl,
    Ssda,
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter of a tiny dual-head model, and the parameter count.
pub fn gradient_check(objective: Objective, step: f64) -> (f64, usize) {
    let (worst, n, _) = gradient_check_detail(objective, step);
    (worst, n)
}

/// As [`gradient_check`], also naming the parameter with the worst error.
pub fn gradient_check_detail(objective: Objective, step: f64) -> (f64, usize, String) {
    use xmda::losses::{ssda_objective, uda_objective};
    use xmda::nets::Outputs;

    let cfg = tiny_config(HeadMode::Dual);
    let mut model = Model::<f64>::new(&cfg, 11);
    randomize_biases(&mut model, 11);
    let src = tiny_samples("src", 1, 2);
    let trg = tiny_samples("trg", 2, 2);
    let tl = tiny_samples("tl", 3, 1);
    let cw = ClassWeights::log_smoothed(&labels(&src), 6);
    let w = LossWeights { lambda_s: 0.7, lambda_t: 0.3, lambda_tl: 0.9, lambda_tu: 0.4, lambda_pl: 0.6, lambda_ent: 0.0 };
    let src_y = labels(&src);
    let tl_y = labels(&tl);
    let trg_y = labels(&trg);
    // Pseudo-labels with some ignored points.
    let pl_2d: Vec<i32> = trg_y.iter().enumerate().map(|(i, &y)| if i % 3 == 0 { -1 } else { y }).collect();
    let pl_3d: Vec<i32> = trg_y.iter().enumerate().map(|(i, &y)| if i % 4 == 1 { -1 } else { (y + 1) % 6 }).collect();
    let pseudo = PseudoLabels { pl_2d: &pl_2d, pl_3d: &pl_3d };

    let mut parts_samples: Vec<&[Sample]> = vec![&src];
    if objective == Objective::Ssda {
        parts_samples.push(&tl);
    }
    parts_samples.push(&trg);
    let prepared: Vec<Vec<PreparedSample>> = parts_samples.iter().map(|s| prepare(s, &cfg)).collect();
    let batch: Vec<&PreparedSample> = prepared.iter().flatten().collect();
    let sizes: Vec<usize> = parts_samples.iter().map(|s| s.iter().map(|x| x.len()).sum()).collect();
    let split = |p: &PredictionSet<f64>| {
        let mut out = Vec::new();
        let mut start = 0;
        for &n in &sizes {
            out.push(p.slice_rows(start, n));
            start += n;
        }
        out
    };

    // Analytic.
    let (outputs, cache) = model.forward(&batch).unwrap();
    let preds = split(outputs.dual().unwrap());
    let value = match objective {
        Objective::Uda => uda_objective(&preds[0], &src_y, &preds[1], None, &w, &cw).unwrap(),
        Objective::UdaPl => uda_objective(&preds[0], &src_y, &preds[1], Some(pseudo), &w, &cw).unwrap(),
        Objective::Ssda => ssda_objective(&preds[0], &src_y, &preds[1], &tl_y, &preds[2], Some(pseudo), &w, &cw).unwrap(),
    };
    let g = PredictionSet {
        p_2d: Mat::vstack(&value.grads.iter().map(|g| &g.p_2d).collect::<Vec<_>>()),
        p_3d: Mat::vstack(&value.grads.iter().map(|g| &g.p_3d).collect::<Vec<_>>()),
        p_2d_to_3d: Mat::vstack(&value.grads.iter().map(|g| &g.p_2d_to_3d).collect::<Vec<_>>()),
        p_3d_to_2d: Mat::vstack(&value.grads.iter().map(|g| &g.p_3d_to_2d).collect::<Vec<_>>()),
    };
    model.zero_grad();
    model.backward(&batch, cache, &outputs, &Outputs::Dual(g));
    let named = grads(&model);
    let owner: Vec<String> = named.iter().flat_map(|(n, g)| g.iter().enumerate().map(move |(i, _)| format!("{n}[{i}]"))).collect();
    let analytic: Vec<f64> = named.into_iter().flat_map(|(_, g)| g).collect();

    // Numeric, with the mimicry targets frozen at the unperturbed predictions.
    let frozen = preds.clone();
    let oracle = |m: &Model<f64>| {
        let p = split(&dual(m, &batch));
        let src_part = OraclePart { labels: Some(&src_y), seg: 1.0, xm: w.lambda_s, pseudo: None, pl: 0.0 };
        let mut parts = vec![(src_part, p[0].clone(), frozen[0].clone())];
        match objective {
            Objective::Uda => {
                parts.push((OraclePart { labels: None, seg: 0.0, xm: w.lambda_t, pseudo: None, pl: 0.0 }, p[1].clone(), frozen[1].clone()));
            }
            Objective::UdaPl => {
                parts.push((
                    OraclePart { labels: None, seg: 0.0, xm: w.lambda_t, pseudo: Some(pseudo), pl: w.lambda_pl },
                    p[1].clone(),
                    frozen[1].clone(),
                ));
            }
            Objective::Ssda => {
                parts.push((OraclePart { labels: Some(&tl_y), seg: 1.0, xm: w.lambda_tl, pseudo: None, pl: 0.0 }, p[1].clone(), frozen[1].clone()));
                parts.push((
                    OraclePart { labels: None, seg: 0.0, xm: w.lambda_tu, pseudo: Some(pseudo), pl: w.lambda_pl },
                    p[2].clone(),
                    frozen[2].clone(),
                ));
            }
        }
        oracle_objective(&parts, &cw)
    };
    let base = oracle(&model);
    assert!((base - (value.loss_2d + value.loss_3d)).abs() < 1e-9, "objective recomposition");
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for (i, &a) in analytic.iter().enumerate() {
        nudge(&mut model, i, step);
        let plus = oracle(&model);
        nudge(&mut model, i, -2.0 * step);
        let minus = oracle(&model);
        nudge(&mut model, i, step);
        let n = (plus - minus) / (2.0 * step);
        let e = rel_err(a, n, 1e-6);
        if e > 1e-4 && std::env::var("GC_VERBOSE").is_ok() {
            eprintln!("{} {a} {n}", owner[i]);
        }
        if e > worst {
            worst = e;
            worst_name = format!("{} analytic {a} numeric {n}", owner[i]);
        }
    }
    (worst, analytic.len(), worst_name)
}

/// A tiny scenario: source domain `src`, target domain `trg`, every split
/// a handful of frames.
pub fn tiny_data(kind: ScenarioKind, cfg: &ModelConfig) -> TrainData {
    let src = tiny_spec("src", 1);
    let mut trg = tiny_spec("trg", 2);
    trg.brightness = 0.4;
    let gen = |spec: &DomainSpec, frames: std::ops::Range<u64>| -> Vec<Sample> {
        frames.map(|f| generate_scene(spec, f).unwrap()).filter(|s| !s.is_empty()).collect()
    };
    let mut splits = vec![(SplitName::SourceTrain, gen(&src, 0..6))];
    match kind {
        ScenarioKind::Uda => splits.push((SplitName::TargetTrain, gen(&trg, 0..6))),
        ScenarioKind::Ssda => {
            splits.push((SplitName::TargetLabeled, gen(&trg, 0..3)));
            splits.push((SplitName::TargetUnlabeled, gen(&trg, 3..9)));
        }
    }
    splits.push((SplitName::TargetVal, gen(&trg, 20..23)));
    splits.push((SplitName::TargetTest, gen(&trg, 30..33)));
    TrainData::from_samples(kind, splits, cfg).unwrap()
}

pub fn tiny_train_config(regime: Regime) -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch_size: 2,
        val_interval: 3,
        model: tiny_config(HeadMode::Dual),
        fusion_width: 5,
        ..TrainConfig::new(regime)
    }
}

pub fn random_maps(sizes: &[usize], classes: usize, seed: u64) -> Vec<Mat<f64>> {
    use rand::Rng as _;
    let mut r = xmda::rng::substream(seed, "pl-maps");
    sizes
        .iter()
        .map(|&n| {
            let mut m = Mat::from_vec(n, classes, (0..n * classes).map(|_| r.random_range(0.0..1.0f64).powi(3) + 1e-3).collect());
            for i in 0..n {
                let s: f64 = m.row(i).iter().sum();
                m.row_mut(i).iter_mut().for_each(|v| *v /= s);
            }
            m
        })
        .collect()
}

/// Sorts every class's candidates by confidence and keeps the top
/// `floor(p · n)`, extended by anything tied with the last kept one.
pub fn sort_oracle(maps: &[Mat<f64>], p: f64) -> Vec<Vec<i32>> {
    let classes = maps[0].cols;
    // (confidence, sample, row) of every point, per predicted class.
    let mut pools: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); classes];
    for (s, m) in maps.iter().enumerate() {
        for r in 0..m.rows {
            let row = m.row(r);
            let k = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            pools[k].push((row[k], s, r));
        }
    }
    let mut out: Vec<Vec<i32>> = maps.iter().map(|m| vec![-1; m.rows]).collect();
    for (k, pool) in pools.iter_mut().enumerate() {
        pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let keep = (p * pool.len() as f64).floor() as usize;
        if keep == 0 {
            continue;
        }
        let cut = pool[keep - 1].0;
        for &(c, s, r) in pool.iter() {
            if c >= cut {
                out[s][r] = k as i32;
            }
        }
    }
    out
}

pub fn argmax_labels(maps: &[Mat<f64>]) -> Vec<Vec<i32>> {
    maps.iter().map(|m| m.argmax_rows().into_iter().map(|k| k as i32).collect()).collect()
}

/// Per-class IoU by scanning the point list once per class.
pub fn oracle_miou(pred: &[usize], truth: &[i32], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for k in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            if t < 0 {
                continue;
            }
            match (p == k, t as usize == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            ious.push(tp as f64 / (tp + fp + fn_) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

pub fn from_rows(rows: &[&[u64]]) -> ConfusionMatrix {
    let c = rows.len();
    ConfusionMatrix { classes: c, counts: rows.iter().flat_map(|r| r.iter().copied()).collect() }
}
