//! Confusion matrices, IoU, per-stream reports and the derived table rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::checkpoint;
use crate::nets::{ensemble, Model, Outputs, PreparedSample};
use crate::sample::IGNORE;
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{pred} predictions for {truth} labels")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("label {0} outside the class range")]
    InvalidLabel(i64),
    #[error("confusion matrices have different class counts")]
    ClassMismatch,
    #[error("missing report `{0}`")]
    MissingReport(String),
    #[error(transparent)]
    Net(#[from] crate::nets::NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `C × C` counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per non-ignored point. Nothing is added on error.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[i32]) -> Result<(), EvalError> {
        if pred.len() != truth.len() {
            return Err(EvalError::LengthMismatch { pred: pred.len(), truth: truth.len() });
        }
        let c = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(EvalError::InvalidLabel(t as i64));
            }
            if p >= c {
                return Err(EvalError::InvalidLabel(p as i64));
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != IGNORE {
                self.counts[t as usize * c + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), EvalError> {
        if other.classes != self.classes {
            return Err(EvalError::ClassMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn accumulate(mut cm: ConfusionMatrix, pred: &[usize], truth: &[i32]) -> Result<ConfusionMatrix, EvalError> {
    cm.accumulate(pred, truth)?;
    Ok(cm)
}

/// Per-class IoU (`None` where the class never occurs in truth or
/// prediction) and their mean over the remaining classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let c = cm.classes;
    let mut iou = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k);
        let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
        let fp: u64 = (0..c).map(|t| cm.get(t, k)).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        iou.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { iou, miou })
}

/// Stream keys of a [`MetricsReport`].
pub const KEY_2D: &str = "2d";
pub const KEY_3D: &str = "3d";
pub const KEY_ENSEMBLE: &str = "2d+3d";
pub const KEY_FUSION: &str = "fusion";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub checkpoint: String,
    pub points: u64,
    /// Keyed by [`KEY_2D`], [`KEY_3D`], [`KEY_ENSEMBLE`] or [`KEY_FUSION`].
    pub streams: BTreeMap<String, IouReport>,
    /// Fraction of points where the 2D and 3D argmax agree (dual-stream models).
    pub agreement: Option<f64>,
}

impl MetricsReport {
    pub fn miou(&self, key: &str) -> Option<f64> {
        self.streams.get(key).map(|r| r.miou)
    }

    /// Mean IoU in percent for the 2D, 3D and 2D+3D columns. A fusion model
    /// fills only the last column.
    pub fn columns(&self) -> [Option<f64>; 3] {
        let pct = |k: &str| self.miou(k).map(|v| 100.0 * v);
        if self.streams.contains_key(KEY_FUSION) {
            [None, None, pct(KEY_FUSION)]
        } else {
            [pct(KEY_2D), pct(KEY_3D), pct(KEY_ENSEMBLE)]
        }
    }
}

/// Confusion matrices of one evaluation, before reduction to IoU.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalAccumulator {
    pub streams: BTreeMap<String, ConfusionMatrix>,
    pub agree: u64,
    pub points: u64,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self { streams: BTreeMap::new(), agree: 0, points: 0 }
    }

    fn add(&mut self, key: &str, classes: usize, pred: &[usize], truth: &[i32]) -> Result<(), EvalError> {
        self.streams.entry(key.to_string()).or_insert_with(|| ConfusionMatrix::new(classes)).accumulate(pred, truth)
    }

    /// Adds one sample's predictions.
    pub fn add_outputs<T: Real>(&mut self, out: &Outputs<T>, truth: &[i32]) -> Result<(), EvalError> {
        if out.rows() != truth.len() {
            return Err(EvalError::LengthMismatch { pred: out.rows(), truth: truth.len() });
        }
        let valid = truth.iter().filter(|&&t| t != IGNORE).count() as u64;
        match out {
            Outputs::Dual(p) => {
                let c = p.p_2d.cols;
                let a2 = p.p_2d.argmax_rows();
                let a3 = p.p_3d.argmax_rows();
                let ae = ensemble(&p.p_2d, &p.p_3d)?.argmax_rows();
                self.add(KEY_2D, c, &a2, truth)?;
                self.add(KEY_3D, c, &a3, truth)?;
                self.add(KEY_ENSEMBLE, c, &ae, truth)?;
                self.agree += a2.iter().zip(&a3).zip(truth).filter(|((x, y), &t)| t != IGNORE && x == y).count() as u64;
            }
            Outputs::Fusion(f) => {
                self.add(KEY_FUSION, f.p_fuse.cols, &f.p_fuse.argmax_rows(), truth)?;
            }
        }
        self.points += valid;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), EvalError> {
        for (k, cm) in &other.streams {
            match self.streams.get_mut(k) {
                Some(mine) => mine.merge(cm)?,
                None => {
                    self.streams.insert(k.clone(), cm.clone());
                }
            }
        }
        self.agree += other.agree;
        self.points += other.points;
        Ok(())
    }

    pub fn report(&self, split: &str, checkpoint: &str) -> Result<MetricsReport, EvalError> {
        let mut streams = BTreeMap::new();
        for (k, cm) in &self.streams {
            streams.insert(k.clone(), miou(cm)?);
        }
        if streams.is_empty() {
            return Err(EvalError::EmptyMatrix);
        }
        let dual = self.streams.contains_key(KEY_2D);
        let agreement = (dual && self.points > 0).then(|| self.agree as f64 / self.points as f64);
        Ok(MetricsReport { split: split.to_string(), checkpoint: checkpoint.to_string(), points: self.points, streams, agreement })
    }
}

impl Default for EvalAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Evaluates a model sample by sample; `labels[i]` belongs to `samples[i]`.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    samples: &[PreparedSample],
    labels: &[&[i32]],
    split: &str,
    checkpoint: &str,
) -> Result<MetricsReport, EvalError> {
    if samples.len() != labels.len() {
        return Err(EvalError::LengthMismatch { pred: samples.len(), truth: labels.len() });
    }
    let mut acc = EvalAccumulator::new();
    for (s, y) in samples.iter().zip(labels) {
        acc.add_outputs(&model.predict(&[s])?, y)?;
    }
    acc.report(split, checkpoint)
}

/// Loads a checkpoint directory and evaluates it.
pub fn evaluate_checkpoint(dir: &Path, samples: &[PreparedSample], labels: &[&[i32]], split: &str) -> Result<MetricsReport, EvalError> {
    let (model, manifest) = checkpoint::load(dir)?;
    let id = format!("iter_{:06}", manifest.iteration);
    evaluate_model(&model, samples, labels, split, &id)
}

/// One method row of a results table, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub name: String,
    pub scores: [Option<f64>; 3],
}

/// Derived rows. Each is `None` when its inputs are missing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// Oracle minus baseline, or `S + T_ℓ` minus `S` in the semi-supervised table.
    pub domain_gap: Option<[Option<f64>; 3]>,
    pub domain_gap_label: Option<String>,
    /// `xmossda_pl` minus the `S + T_ℓ` baseline.
    pub unsupervised_advantage: Option<[Option<f64>; 3]>,
    /// The same, relative to the baseline, in percent.
    pub unsupervised_advantage_relative: Option<[Option<f64>; 3]>,
}

/// Row names recognized by [`report_deltas`].
pub mod names {
    pub const BASELINE: &str = "baseline";
    pub const ORACLE: &str = "oracle";
    pub const BASELINE_SRC_TRG: &str = "baseline_src_trg";
    pub const XMOSSDA_PL: &str = "xmossda_pl";
}

fn diff(a: &[Option<f64>; 3], b: &[Option<f64>; 3]) -> [Option<f64>; 3] {
    std::array::from_fn(|i| Some(a[i]? - b[i]?))
}

/// Domain gap and unsupervised advantage from named rows. At least one of the
/// pairs (baseline, oracle), (baseline, baseline_src_trg) or
/// (baseline_src_trg, xmossda_pl) must be present.
pub fn report_deltas(rows: &BTreeMap<String, [Option<f64>; 3]>) -> Result<Deltas, EvalError> {
    use names::*;
    let get = |k: &str| rows.get(k);
    let mut d = Deltas::default();
    if let (Some(b), Some(o)) = (get(BASELINE), get(ORACLE)) {
        d.domain_gap = Some(diff(o, b));
        d.domain_gap_label = Some("Domain gap (O-B)".into());
    } else if let (Some(b), Some(st)) = (get(BASELINE), get(BASELINE_SRC_TRG)) {
        d.domain_gap = Some(diff(st, b));
        d.domain_gap_label = Some("Domain gap (S vs. S+T_l)".into());
    }
    if let (Some(st), Some(x)) = (get(BASELINE_SRC_TRG), get(XMOSSDA_PL)) {
        let adv = diff(x, st);
        d.unsupervised_advantage_relative = Some(std::array::from_fn(|i| Some(100.0 * adv[i]? / st[i]?)));
        d.unsupervised_advantage = Some(adv);
    }
    if d.domain_gap.is_none() && d.unsupervised_advantage.is_none() {
        let want = if rows.contains_key(BASELINE) { ORACLE } else { BASELINE };
        return Err(EvalError::MissingReport(want.into()));
    }
    Ok(d)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

/// Aligned text table with 2D, 3D and 2D+3D columns, followed by whichever
/// derived rows `deltas` carries.
pub fn render_table(title: &str, rows: &[ScoreRow], deltas: Option<&Deltas>) -> String {
    let mut body: Vec<(String, [String; 3])> = rows.iter().map(|r| (r.name.clone(), r.scores.map(cell))).collect();
    let mut derived = Vec::new();
    if let Some(d) = deltas {
        if let (Some(g), Some(label)) = (&d.domain_gap, &d.domain_gap_label) {
            derived.push((label.clone(), g.map(cell)));
        }
        if let Some(a) = &d.unsupervised_advantage {
            derived.push(("Unsupervised advantage".to_string(), a.map(cell)));
        }
        if let Some(r) = &d.unsupervised_advantage_relative {
            derived.push(("(relative)".to_string(), r.map(|v| v.map_or_else(|| "-".into(), |x| format!("({x:+.1}%)")))));
        }
    }
    let head = ["2D", "3D", "2D+3D"].map(String::from);
    let w0 = body.iter().chain(&derived).map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(title.chars().count()).max(6);
    let wc = body
        .iter()
        .chain(&derived)
        .flat_map(|(_, c)| c.iter().map(|s| s.chars().count()))
        .max()
        .unwrap_or(0)
        .max(5);
    let line = |out: &mut String, name: &str, cols: &[String; 3]| {
        let _ = write!(out, "{name:<w0$}");
        for c in cols {
            let _ = write!(out, "  {c:>wc$}");
        }
        out.push('\n');
    };
    let mut out = String::new();
    line(&mut out, title, &head);
    let rule = "-".repeat(w0 + 3 * (wc + 2));
    out.push_str(&rule);
    out.push('\n');
    for (n, c) in body.drain(..) {
        line(&mut out, &n, &c);
    }
    if !derived.is_empty() {
        out.push_str(&rule);
        out.push('\n');
        for (n, c) in &derived {
            line(&mut out, n, c);
        }
    }
    out
}

/// Published results of one scenario, as shipped in the fixture files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureScenario {
    pub id: String,
    pub title: String,
    pub rows: BTreeMap<String, [Option<f64>; 3]>,
    /// Derived rows as printed alongside the results.
    pub printed: BTreeMap<String, [f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureTable {
    pub table: String,
    pub columns: Vec<String>,
    pub scenarios: Vec<FixtureScenario>,
}

impl FixtureTable {
    /// `uda` or `ssda`.
    pub fn shipped(name: &str) -> Option<Self> {
        let text = match name {
            "uda" => include_str!("../data/fixtures/uda.json"),
            "ssda" => include_str!("../data/fixtures/ssda.json"),
            _ => return None,
        };
        Some(serde_json::from_str(text).expect("shipped fixture parses"))
    }

    pub fn scenario(&self, id: &str) -> Option<&FixtureScenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }
}

impl FixtureScenario {
    /// Rows in fixture order, with the semi-supervised table's source-only
    /// row renamed to `baseline` so [`report_deltas`] finds it.
    pub fn named_rows(&self) -> BTreeMap<String, [Option<f64>; 3]> {
        self.rows
            .iter()
            .map(|(k, v)| (if k == "baseline_src" { names::BASELINE.to_string() } else { k.clone() }, *v))
            .collect()
    }

    pub fn score_rows(&self) -> Vec<ScoreRow> {
        self.rows.iter().map(|(k, v)| ScoreRow { name: k.clone(), scores: *v }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let cm = accumulate(ConfusionMatrix::new(3), &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 0, 0, 1, 0, 0, 0, 1]);
        let r = miou(&cm).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.iou.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn ignored_truth_leaves_matrix_unchanged() {
        let cm = accumulate(ConfusionMatrix::new(2), &[0, 1], &[-1, -1]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(miou(&cm), Err(EvalError::EmptyMatrix)));
        assert!(matches!(ConfusionMatrix::new(2).accumulate(&[0], &[0, 1]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn uniform_two_class_matrix() {
        let cm = ConfusionMatrix { classes: 2, counts: vec![1, 1, 1, 1] };
        let r = miou(&cm).unwrap();
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let cm = accumulate(ConfusionMatrix::new(4), &[0, 0, 1], &[0, 1, 1]).unwrap();
        let r = miou(&cm).unwrap();
        assert_eq!(r.iou[2], None);
        assert_eq!(r.iou[3], None);
        assert!((r.miou - (0.5 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn deltas_from_named_rows() {
        let mut rows = BTreeMap::new();
        rows.insert("baseline".to_string(), [Some(58.4), Some(62.8), Some(68.2)]);
        assert!(matches!(report_deltas(&rows), Err(EvalError::MissingReport(_))));
        rows.insert("oracle".to_string(), [Some(75.4), None, Some(68.2)]);
        let d = report_deltas(&rows).unwrap();
        let g = d.domain_gap.unwrap();
        assert_eq!(format!("{:.1}", g[0].unwrap()), "17.0");
        assert_eq!(g[1], None);
        assert_eq!(g[2], Some(0.0));
    }

    #[test]
    fn table_has_derived_rows() {
        let rows = vec![
            ScoreRow { name: "baseline".into(), scores: [Some(50.0), Some(60.0), None] },
            ScoreRow { name: "oracle".into(), scores: [Some(70.25), Some(61.0), None] },
        ];
        let named = rows.iter().map(|r| (r.name.clone(), r.scores)).collect();
        let d = report_deltas(&named).unwrap();
        let t = render_table("demo", &rows, Some(&d));
        assert!(t.contains("Domain gap (O-B)"));
        assert!(t.lines().any(|l| l.starts_with("Domain gap") && l.contains("20.2") && l.contains("1.0") && l.ends_with('-')));
        let single = render_table("demo", &rows[..1], None);
        assert_eq!(single.lines().count(), 3);
    }

    #[test]
    fn fixtures_parse() {
        let uda = FixtureTable::shipped("uda").unwrap();
        assert_eq!(uda.scenarios.len(), 4);
        assert_eq!(uda.scenario("usa_singapore").unwrap().rows["baseline"], [Some(58.4), Some(62.8), Some(68.2)]);
        let ssda = FixtureTable::shipped("ssda").unwrap();
        assert_eq!(ssda.scenarios.len(), 3);
        assert!(FixtureTable::shipped("other").is_none());
    }
}
