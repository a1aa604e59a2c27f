//! Training loops for every regime, with deterministic batching, validation
//! based model selection and run directories.
//!
//! ```text
//! <run>/config.json        resolved TrainConfig
//! <run>/manifest.json      RunManifest
//! <run>/metrics.jsonl      one validation report per line
//! <run>/checkpoints/best/
//! <run>/checkpoints/final/
//! ```
//!
//! Two-stage regimes nest a complete run in `<run>/stage1` and
//! `<run>/stage2`, with the pseudo-labels in `<run>/pseudo_labels`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{self, EvalError, MetricsReport, KEY_ENSEMBLE, KEY_FUSION};
use crate::losses::{dual_objective, fusion_objective, ClassWeights, FusionPart, LossError, LossWeights, Part, PseudoLabels};
use crate::nets::checkpoint;
use crate::nets::layers::Module;
use crate::nets::{FusionConfig, FusionMode, HeadMode, Model, ModelConfig, NetError, Outputs, PreparedSample, PredictionSet};
use crate::optim::{AdamConfig, GroupOptimizer};
use crate::pseudolabel::{self, PseudoLabelError, PseudoLabelSet, SamplePseudoLabels};
use crate::rng::{self, Rng};
use crate::sample::Sample;
use crate::scenegen::presets::{read_split, ScenarioKind, SplitName, SplitSet};
use crate::scenegen::SceneError;
use crate::tensor::Mat;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config does not fit the data: {0}")]
    ConfigSplitMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}; diagnostics in {}", dump.display())]
    NonFiniteLoss { iteration: u64, dump: PathBuf },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Supervised on source only.
    SrcOnly,
    /// Supervised on labeled target only (the oracle).
    TrgOnly,
    /// Supervised on 50/50 source and labeled-target batches.
    SrcPlusTrg,
    Xmuda,
    XmudaPl,
    Xmossda,
    XmossdaPl,
    /// Fused head trained on source only.
    FusionVanilla,
    /// Fused head with per-modality mimicry heads and target cross-modal loss.
    FusionXmuda,
    /// `xmuda` with the mimicry prediction tied to the main prediction.
    SingleHeadAblation,
    /// Labeled target with segmentation and cross-modal losses.
    SupervisedXm,
    /// Source supervision plus target entropy minimization.
    Minent,
    /// Source supervision plus target pseudo-labels from a source-only run.
    Pl,
}

impl Regime {
    pub const ALL: [Regime; 13] = [
        Regime::SrcOnly,
        Regime::TrgOnly,
        Regime::SrcPlusTrg,
        Regime::Xmuda,
        Regime::XmudaPl,
        Regime::Xmossda,
        Regime::XmossdaPl,
        Regime::FusionVanilla,
        Regime::FusionXmuda,
        Regime::SingleHeadAblation,
        Regime::SupervisedXm,
        Regime::Minent,
        Regime::Pl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::SrcOnly => "src_only",
            Regime::TrgOnly => "trg_only",
            Regime::SrcPlusTrg => "src_plus_trg",
            Regime::Xmuda => "xmuda",
            Regime::XmudaPl => "xmuda_pl",
            Regime::Xmossda => "xmossda",
            Regime::XmossdaPl => "xmossda_pl",
            Regime::FusionVanilla => "fusion_vanilla",
            Regime::FusionXmuda => "fusion_xmuda",
            Regime::SingleHeadAblation => "single_head_ablation",
            Regime::SupervisedXm => "supervised_xm",
            Regime::Minent => "minent",
            Regime::Pl => "pl",
        }
    }

    /// The regime producing the pseudo-labels of a two-stage regime.
    pub fn stage1(self) -> Option<Regime> {
        match self {
            Regime::XmudaPl => Some(Regime::Xmuda),
            Regime::XmossdaPl => Some(Regime::Xmossda),
            Regime::Pl => Some(Regime::SrcOnly),
            _ => None,
        }
    }

    pub fn uses_pseudo_labels(self) -> bool {
        self.stage1().is_some()
    }

    pub fn fusion_mode(self) -> Option<FusionMode> {
        match self {
            Regime::FusionVanilla => Some(FusionMode::Vanilla),
            Regime::FusionXmuda => Some(FusionMode::XmudaFusion),
            _ => None,
        }
    }

    /// Regimes that must never see target training labels.
    pub fn is_unsupervised_on_target(self) -> bool {
        !matches!(self, Regime::TrgOnly | Regime::SrcPlusTrg | Regime::SupervisedXm | Regime::Xmossda | Regime::XmossdaPl)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown regime `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    Uniform,
    /// `1 / ln(1.02 + f_c)` from the labeled training splits.
    #[default]
    LogSmoothed,
}

fn d_iterations() -> u64 {
    2000
}
fn d_batch() -> usize {
    8
}
fn d_val() -> u64 {
    200
}
fn d_p() -> f64 {
    pseudolabel::DEFAULT_P
}
fn d_fusion_width() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default = "d_iterations")]
    pub iterations: u64,
    /// Samples per forward batch; split 50/50 where two splits share a batch.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Validate every this many iterations.
    #[serde(default = "d_val")]
    pub val_interval: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub class_weights: ClassWeightMode,
    /// Kept fraction per class when extracting pseudo-labels.
    #[serde(default = "d_p")]
    pub pl_p: f64,
    /// Oracle only: mix source 50/50 into the labeled target batches.
    #[serde(default)]
    pub mix_source: bool,
    /// Width of the fusion mixing layer (fusion regimes).
    #[serde(default = "d_fusion_width")]
    pub fusion_width: usize,
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            iterations: d_iterations(),
            batch_size: d_batch(),
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            val_interval: d_val(),
            model: ModelConfig::default(),
            class_weights: ClassWeightMode::default(),
            pl_p: d_p(),
            mix_source: false,
            fusion_width: d_fusion_width(),
        }
    }

    /// Makes the model config agree with the regime and checks every field.
    pub fn resolved(mut self) -> Result<Self, TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        match self.regime.fusion_mode() {
            Some(mode) => self.model.fusion = Some(FusionConfig { mode, width: self.fusion_width }),
            None => self.model.fusion = None,
        }
        if self.regime == Regime::SingleHeadAblation {
            self.model.head = HeadMode::Single;
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.val_interval == 0 {
            return bad("val_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.pl_p) {
            return bad("pl_p must lie in [0, 1]");
        }
        if self.model.num_classes < 2 {
            return bad("need at least two classes");
        }
        self.optimizer.validate().map_err(TrainError::InvalidConfig)?;
        self.weights.validate().map_err(TrainError::InvalidConfig)?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Seed of the second stage of a two-stage run.
pub fn stage2_seed(seed: u64) -> u64 {
    rng::substream(seed, "stage2").random()
}

/// Labels of every split behind a read counter.
#[derive(Debug, Default)]
pub struct LabelGuard {
    labels: BTreeMap<SplitName, Vec<Vec<i32>>>,
    reads: Mutex<BTreeMap<SplitName, u64>>,
}

impl LabelGuard {
    /// Labels of one sample; every call counts as a read.
    pub fn get(&self, split: SplitName, index: usize) -> &[i32] {
        *self.reads.lock().unwrap().entry(split).or_default() += 1;
        &self.labels[&split][index]
    }

    pub fn reads(&self) -> BTreeMap<SplitName, u64> {
        self.reads.lock().unwrap().clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub keys: Vec<String>,
    pub inputs: Vec<PreparedSample>,
}

/// Network inputs of every split, with labels only reachable through the guard.
#[derive(Debug)]
pub struct TrainData {
    pub kind: ScenarioKind,
    pub splits: BTreeMap<SplitName, SplitData>,
    pub labels: LabelGuard,
}

/// Worker threads for data preparation, from `XMDA_NUM_WORKERS` (default 1).
pub fn num_workers() -> usize {
    std::env::var("XMDA_NUM_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Order-preserving parallel map over `num_workers()` threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = num_workers().min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

impl TrainData {
    pub fn from_samples(kind: ScenarioKind, splits: Vec<(SplitName, Vec<Sample>)>, model: &ModelConfig) -> Result<Self, TrainError> {
        let mut data = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for (name, samples) in splits {
            if samples.is_empty() {
                continue;
            }
            let inputs = par_map(&samples, |s| PreparedSample::new(s, &model.stream3d)).into_iter().collect::<Result<Vec<_>, _>>()?;
            let keys = samples.iter().map(Sample::key).collect();
            labels.insert(name, samples.into_iter().map(|s| s.labels).collect());
            data.insert(name, SplitData { keys, inputs });
        }
        Ok(Self { kind, splits: data, labels: LabelGuard { labels, reads: Mutex::default() } })
    }

    /// Generates every split in memory.
    pub fn generate(set: &SplitSet, model: &ModelConfig) -> Result<Self, TrainError> {
        let mut splits = Vec::new();
        for name in set.present() {
            let spec = set.domain(name);
            let samples = par_map(set.frames(name), |&f| crate::scenegen::generate_scene(spec, f)).into_iter().collect::<Result<Vec<_>, _>>()?;
            splits.push((name, samples));
        }
        Self::from_samples(set.kind, splits, model)
    }

    /// Reads a dataset directory written by [`SplitSet::write_dataset`].
    pub fn load(dir: &Path, model: &ModelConfig) -> Result<Self, TrainError> {
        let set = SplitSet::read_manifest(dir)?;
        let mut splits = Vec::new();
        for name in SplitName::ALL {
            splits.push((name, read_split(dir, name)?));
        }
        Self::from_samples(set.kind, splits, model)
    }

    pub fn split(&self, name: SplitName) -> Option<&SplitData> {
        self.splits.get(&name)
    }

    fn require(&self, name: SplitName) -> Result<&SplitData, TrainError> {
        self.split(name).ok_or_else(|| TrainError::ConfigSplitMismatch(format!("split {name} is missing")))
    }

    /// The split used as unlabeled target data.
    pub fn unlabeled_target(&self) -> SplitName {
        match self.kind {
            ScenarioKind::Uda => SplitName::TargetTrain,
            ScenarioKind::Ssda => SplitName::TargetUnlabeled,
        }
    }

    /// The split used as labeled target data by supervised regimes.
    pub fn labeled_target(&self) -> SplitName {
        match self.kind {
            ScenarioKind::Uda => SplitName::TargetTrain,
            ScenarioKind::Ssda => SplitName::TargetLabeled,
        }
    }

    /// Evaluates a model on a labeled split.
    pub fn evaluate(&self, model: &Model<f32>, split: SplitName, checkpoint: &str) -> Result<MetricsReport, TrainError> {
        let d = self.require(split)?;
        let labels: Vec<&[i32]> = (0..d.inputs.len()).map(|i| self.labels.get(split, i)).collect();
        Ok(eval::evaluate_model(model, &d.inputs, &labels, split.as_str(), checkpoint)?)
    }
}

/// One split's share of a forward batch and the weights of its loss terms.
#[derive(Clone, Debug, PartialEq)]
struct Member {
    split: SplitName,
    count: usize,
    role: &'static str,
    seg: f64,
    xm: f64,
    pl: f64,
    ent: f64,
}

impl Member {
    fn new(split: SplitName, count: usize, role: &'static str) -> Self {
        Self { split, count, role, seg: 0.0, xm: 0.0, pl: 0.0, ent: 0.0 }
    }
    fn seg(mut self, v: f64) -> Self {
        self.seg = v;
        self
    }
    fn xm(mut self, v: f64) -> Self {
        self.xm = v;
        self
    }
    fn pl(mut self, v: f64) -> Self {
        self.pl = v;
        self
    }
    fn ent(mut self, v: f64) -> Self {
        self.ent = v;
        self
    }
}

/// Forward batches of one iteration; gradients of all of them are
/// accumulated before the optimizer step.
fn plan(cfg: &TrainConfig, data: &TrainData, with_pl: bool) -> Result<Vec<Vec<Member>>, TrainError> {
    use SplitName::*;
    let b = cfg.batch_size;
    let w = &cfg.weights;
    let half = || {
        if b % 2 == 1 || b < 2 {
            Err(TrainError::InvalidConfig("mixed batches need an even batch_size".into()))
        } else {
            Ok(b / 2)
        }
    };
    let ssda = data.kind == ScenarioKind::Ssda;
    let need_ssda = |r: Regime| {
        if ssda {
            Ok(())
        } else {
            Err(TrainError::ConfigSplitMismatch(format!("{r} needs a semi-supervised scenario")))
        }
    };
    let u = data.unlabeled_target();
    let lt = data.labeled_target();
    let pl = if with_pl { w.lambda_pl } else { 0.0 };
    let src = |n| Member::new(SourceTrain, n, "src").seg(1.0);
    let groups = match cfg.regime {
        Regime::SrcOnly | Regime::FusionVanilla => vec![vec![src(b)]],
        Regime::TrgOnly => {
            if cfg.mix_source {
                let h = half()?;
                vec![vec![src(h), Member::new(lt, h, "trg").seg(1.0)]]
            } else {
                vec![vec![Member::new(lt, b, "trg").seg(1.0)]]
            }
        }
        Regime::SrcPlusTrg => {
            need_ssda(cfg.regime)?;
            let h = half()?;
            vec![vec![src(h), Member::new(TargetLabeled, h, "trg_l").seg(1.0)]]
        }
        Regime::Xmuda | Regime::XmudaPl | Regime::SingleHeadAblation | Regime::FusionXmuda => {
            vec![vec![src(b).xm(w.lambda_s)], vec![Member::new(u, b, "trg").xm(w.lambda_t).pl(pl)]]
        }
        Regime::Xmossda | Regime::XmossdaPl => {
            need_ssda(cfg.regime)?;
            let h = half()?;
            vec![
                vec![src(h).xm(w.lambda_s), Member::new(TargetLabeled, h, "trg_l").seg(1.0).xm(w.lambda_tl)],
                vec![Member::new(TargetUnlabeled, b, "trg_u").xm(w.lambda_tu).pl(pl)],
            ]
        }
        Regime::SupervisedXm => vec![vec![Member::new(lt, b, "trg").seg(1.0).xm(w.lambda_s)]],
        Regime::Minent => vec![vec![src(b)], vec![Member::new(u, b, "trg").ent(w.lambda_ent)]],
        Regime::Pl => {
            if with_pl {
                vec![vec![src(b)], vec![Member::new(u, b, "trg").pl(pl)]]
            } else {
                vec![vec![src(b)]]
            }
        }
    };
    for m in groups.iter().flatten() {
        data.require(m.split)?;
    }
    Ok(groups)
}

/// Epoch-wise shuffled draws from one split.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64, split: SplitName) -> Self {
        Self { order: (0..len).collect(), pos: len, rng: rng::substream(seed, &format!("{}/{split}", rng::BATCHING)) }
    }

    fn draw(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    /// Unweighted term values, keyed `<role>/<term>`.
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iteration: u64,
    /// Selection score: 2D+3D mIoU, or fused mIoU for fusion models.
    pub score: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub regime: Regime,
    pub seed: u64,
    pub config_hash: String,
    pub iterations: u64,
    pub loss_log: Vec<LossRecord>,
    pub val_history: Vec<ValRecord>,
    pub best_checkpoint_id: String,
    pub final_checkpoint_id: String,
    /// Checkpoint directories relative to the run directory.
    pub best_checkpoint: String,
    pub final_checkpoint: String,
    pub best_hash: String,
    pub final_hash: String,
    /// Label reads per split during the run, validation included.
    pub label_reads: BTreeMap<String, u64>,
    /// Samples drawn per split.
    pub draws: BTreeMap<String, u64>,
    /// Two-stage runs: the first stage and pseudo-label directories.
    pub stage1: Option<String>,
    pub pseudo_labels: Option<String>,
}

impl RunManifest {
    pub fn read(run: &Path) -> io::Result<Self> {
        let bytes = fs::read(run.join("manifest.json"))?;
        serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", run.display())))
    }

    fn write(&self, run: &Path) -> io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(run.join("manifest.json"), json + "\n")
    }

    pub fn best_val(&self) -> Option<&ValRecord> {
        self.val_history.iter().find(|v| checkpoint_id(v.iteration) == self.best_checkpoint_id)
    }
}

pub fn checkpoint_id(iteration: u64) -> String {
    format!("iter_{iteration:06}")
}

fn selection_score(r: &MetricsReport) -> f64 {
    r.miou(KEY_FUSION).or_else(|| r.miou(KEY_ENSEMBLE)).unwrap_or(0.0)
}

fn vstack_dual(parts: &[PredictionSet<f32>]) -> PredictionSet<f32> {
    let cat = |f: fn(&PredictionSet<f32>) -> &Mat<f32>| Mat::vstack(&parts.iter().map(f).collect::<Vec<_>>());
    PredictionSet { p_2d: cat(|p| &p.p_2d), p_3d: cat(|p| &p.p_3d), p_2d_to_3d: cat(|p| &p.p_2d_to_3d), p_3d_to_2d: cat(|p| &p.p_3d_to_2d) }
}

fn vstack_fusion(parts: &[crate::nets::FusionPredictions<f32>]) -> crate::nets::FusionPredictions<f32> {
    let opt = |f: fn(&crate::nets::FusionPredictions<f32>) -> Option<&Mat<f32>>| {
        parts.iter().map(f).collect::<Option<Vec<_>>>().map(|v| Mat::vstack(&v))
    };
    crate::nets::FusionPredictions {
        p_fuse: Mat::vstack(&parts.iter().map(|p| &p.p_fuse).collect::<Vec<_>>()),
        p_2d_to_fuse: opt(|p| p.p_2d_to_fuse.as_ref()),
        p_3d_to_fuse: opt(|p| p.p_3d_to_fuse.as_ref()),
    }
}

struct Trainer<'a> {
    data: &'a TrainData,
    groups: Vec<Vec<Member>>,
    samplers: BTreeMap<SplitName, Sampler>,
    /// Pseudo-labels aligned with the samples of their split.
    pseudo: Option<(SplitName, Vec<&'a SamplePseudoLabels>)>,
    cw: ClassWeights,
    draws: BTreeMap<SplitName, u64>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a TrainData, pseudo: Option<&'a PseudoLabelSet>) -> Result<Self, TrainError> {
        let groups = plan(cfg, data, pseudo.is_some())?;
        let mut samplers = BTreeMap::new();
        for m in groups.iter().flatten() {
            let n = data.require(m.split)?.inputs.len();
            samplers.entry(m.split).or_insert_with(|| Sampler::new(n, cfg.seed, m.split));
        }
        let pseudo = match pseudo {
            None => None,
            Some(set) => {
                let split = data.unlabeled_target();
                Some((split, set.aligned(&data.require(split)?.keys)?))
            }
        };
        let c = cfg.model.num_classes;
        let cw = match cfg.class_weights {
            ClassWeightMode::Uniform => ClassWeights::uniform(c),
            ClassWeightMode::LogSmoothed => {
                let mut splits: Vec<SplitName> = groups.iter().flatten().filter(|m| m.seg != 0.0).map(|m| m.split).collect();
                splits.sort();
                splits.dedup();
                let mut all = Vec::new();
                for s in splits {
                    for i in 0..data.require(s)?.inputs.len() {
                        all.extend_from_slice(data.labels.get(s, i));
                    }
                }
                if all.iter().any(|&y| y >= c as i32) {
                    return Err(TrainError::ConfigSplitMismatch(format!("labels exceed {c} classes")));
                }
                ClassWeights::log_smoothed(&all, c)
            }
        };
        Ok(Self { data, groups, samplers, pseudo, cw, draws: BTreeMap::new() })
    }

    /// One optimizer step. Returns the loss record, or the diagnostics of a
    /// non-finite loss.
    fn step(&mut self, model: &mut Model<f32>, opt: &mut GroupOptimizer, iteration: u64) -> Result<Result<LossRecord, String>, TrainError> {
        model.zero_grad();
        let mut total = 0.0;
        let mut terms = BTreeMap::new();
        let mut drawn = Vec::new();
        for g in 0..self.groups.len() {
            let group = self.groups[g].clone();
            let mut batch: Vec<&PreparedSample> = Vec::new();
            let mut picks: Vec<Vec<usize>> = Vec::new();
            for m in &group {
                let s = self.samplers.get_mut(&m.split).expect("sampler per split");
                let idx: Vec<usize> = (0..m.count).map(|_| s.draw()).collect();
                *self.draws.entry(m.split).or_default() += m.count as u64;
                let split = &self.data.splits[&m.split];
                batch.extend(idx.iter().map(|&i| &split.inputs[i]));
                picks.push(idx);
            }
            drawn.push(batch.iter().map(|s| s.key.clone()).collect::<Vec<_>>());
            let mut labels: Vec<Option<Vec<i32>>> = Vec::new();
            let mut pls: Vec<Option<(Vec<i32>, Vec<i32>)>> = Vec::new();
            let mut rows = Vec::new();
            for (m, idx) in group.iter().zip(&picks) {
                rows.push(idx.iter().map(|&i| self.data.splits[&m.split].inputs[i].len()).sum::<usize>());
                labels.push((m.seg != 0.0).then(|| idx.iter().flat_map(|&i| self.data.labels.get(m.split, i).iter().copied()).collect()));
                pls.push(match (&self.pseudo, m.pl != 0.0) {
                    (Some((split, aligned)), true) if *split == m.split => Some((
                        idx.iter().flat_map(|&i| aligned[i].pl_2d.iter().copied()).collect(),
                        idx.iter().flat_map(|&i| aligned[i].pl_3d.iter().copied()).collect(),
                    )),
                    (_, true) => return Err(TrainError::ConfigSplitMismatch(format!("no pseudo-labels for {}", m.split))),
                    _ => None,
                });
            }
            let mut offsets = vec![0];
            for r in &rows {
                offsets.push(offsets.last().unwrap() + r);
            }
            let (out, cache) = model.forward(&batch)?;
            let grads = match &out {
                Outputs::Dual(p) => {
                    let slices: Vec<PredictionSet<f32>> = rows.iter().zip(&offsets).map(|(&n, &o)| p.slice_rows(o, n)).collect();
                    let parts: Vec<Part<'_, f32>> = group
                        .iter()
                        .enumerate()
                        .map(|(k, m)| Part {
                            name: m.role,
                            preds: &slices[k],
                            labels: labels[k].as_deref(),
                            seg_weight: m.seg,
                            xm_weight: m.xm,
                            pseudo: pls[k].as_ref().map(|(a, b)| PseudoLabels { pl_2d: a, pl_3d: b }),
                            pl_weight: m.pl,
                            ent_weight: m.ent,
                        })
                        .collect();
                    let v = dual_objective(&parts, &self.cw)?;
                    total += (v.loss_2d + v.loss_3d) as f64;
                    terms.extend(v.terms);
                    Outputs::Dual(vstack_dual(&v.grads))
                }
                Outputs::Fusion(p) => {
                    let slices: Vec<_> = rows.iter().zip(&offsets).map(|(&n, &o)| p.slice_rows(o, n)).collect();
                    if group.iter().any(|m| m.pl != 0.0 || m.ent != 0.0) {
                        return Err(TrainError::InvalidConfig("fusion models take no pseudo-label or entropy terms".into()));
                    }
                    let parts: Vec<FusionPart<'_, f32>> = group
                        .iter()
                        .enumerate()
                        .map(|(k, m)| FusionPart { name: m.role, preds: &slices[k], labels: labels[k].as_deref(), seg_weight: m.seg, xm_weight: m.xm })
                        .collect();
                    let v = fusion_objective(&parts, &self.cw)?;
                    total += v.loss as f64;
                    terms.extend(v.terms);
                    Outputs::Fusion(vstack_fusion(&v.grads))
                }
            };
            model.backward(&batch, cache, &out, &grads);
        }
        let mut finite = total.is_finite();
        model.visit("", &mut |_, p| finite &= p.grad.iter().all(|g| g.is_finite()));
        if !finite {
            // Non-finite floats have no JSON number form, so values go out as strings.
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "iteration": iteration,
                "loss": total.to_string(),
                "terms": terms.iter().map(|(k, v)| (k.clone(), v.to_string())).collect::<BTreeMap<_, _>>(),
                "batches": drawn,
            }))
            .expect("diagnostics serialize");
            return Ok(Err(json));
        }
        opt.step(model);
        Ok(Ok(LossRecord { iteration, loss: total, terms }))
    }
}

fn append_line(path: &Path, value: &impl Serialize) -> io::Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value).map_err(io::Error::other)?)
}

/// Trains one run into `out`. PL regimes need `pseudo`; the caller is
/// responsible for checking where it came from.
pub fn train(cfg: &TrainConfig, data: &TrainData, out: &Path, pseudo: Option<&PseudoLabelSet>) -> Result<RunManifest, TrainError> {
    let cfg = cfg.clone().resolved()?;
    if cfg.regime.uses_pseudo_labels() != pseudo.is_some() {
        let m = if pseudo.is_some() { "pseudo-labels given to a regime without a pseudo-label term" } else { "regime needs pseudo-labels" };
        return Err(TrainError::ConfigSplitMismatch(m.into()));
    }
    if cfg.regime.uses_pseudo_labels() && cfg.regime.stage1() == Some(Regime::SrcOnly) && data.kind == ScenarioKind::Ssda {
        return Err(TrainError::ConfigSplitMismatch("pl is an unsupervised regime".into()));
    }
    let val = data.require(SplitName::TargetVal)?;
    if val.inputs.is_empty() {
        return Err(TrainError::ConfigSplitMismatch("target_val is empty".into()));
    }
    let reads_before = data.labels.reads();
    let mut trainer = Trainer::new(&cfg, data, pseudo)?;

    fs::create_dir_all(out)?;
    let ckpts = out.join("checkpoints");
    if ckpts.exists() {
        fs::remove_dir_all(&ckpts)?;
    }
    let metrics = out.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    fs::write(out.join("config.json"), cfg.to_json())?;

    let mut model = Model::<f32>::new(&cfg.model, cfg.seed);
    let mut opt = GroupOptimizer::new(&model, cfg.optimizer.clone());
    let mut loss_log = Vec::with_capacity(cfg.iterations as usize);
    let mut history: Vec<ValRecord> = Vec::new();
    let mut best: Option<(f64, u64, String)> = None;
    let best_dir = ckpts.join("best");

    let mut validate = |model: &Model<f32>, it: u64, history: &mut Vec<ValRecord>| -> Result<(), TrainError> {
        let report = data.evaluate(model, SplitName::TargetVal, &checkpoint_id(it))?;
        let score = selection_score(&report);
        let rec = ValRecord { iteration: it, score, report };
        append_line(&metrics, &rec)?;
        history.push(rec);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            if best_dir.exists() {
                fs::remove_dir_all(&best_dir)?;
            }
            let m = checkpoint::save(model, &best_dir, it, it == cfg.iterations, None)?;
            best = Some((score, it, m.hash));
        }
        Ok(())
    };

    for it in 1..=cfg.iterations {
        match trainer.step(&mut model, &mut opt, it)? {
            Ok(rec) => loss_log.push(rec),
            Err(diag) => {
                let dump = out.join("diagnostics.json");
                fs::write(&dump, diag + "\n")?;
                checkpoint::save(&model, &ckpts.join("diagnostic"), it, false, None)?;
                return Err(TrainError::NonFiniteLoss { iteration: it, dump });
            }
        }
        if it % cfg.val_interval == 0 {
            validate(&model, it, &mut history)?;
        }
    }
    if history.is_empty() {
        validate(&model, cfg.iterations, &mut history)?;
    }
    let final_m = checkpoint::save(&model, &ckpts.join("final"), cfg.iterations, true, None)?;
    let (_, best_it, best_hash) = best.expect("validated at least once");
    let reads_after = data.labels.reads();
    let label_reads = reads_after
        .iter()
        .map(|(k, v)| (k.to_string(), v - reads_before.get(k).copied().unwrap_or(0)))
        .filter(|(_, v)| *v > 0)
        .collect();
    let manifest = RunManifest {
        regime: cfg.regime,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        iterations: cfg.iterations,
        loss_log,
        val_history: history,
        best_checkpoint_id: checkpoint_id(best_it),
        final_checkpoint_id: checkpoint_id(cfg.iterations),
        best_checkpoint: "checkpoints/best".into(),
        final_checkpoint: "checkpoints/final".into(),
        best_hash,
        final_hash: final_m.hash,
        label_reads,
        draws: trainer.draws.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        stage1: None,
        pseudo_labels: None,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Stage 1 with the regime's non-PL counterpart, pseudo-labels from its
/// final checkpoint, then a fresh stage 2 with the pseudo-label term.
pub fn train_two_stage_pl(cfg: &TrainConfig, data: &TrainData, out: &Path) -> Result<RunManifest, TrainError> {
    let cfg = cfg.clone().resolved()?;
    let Some(first) = cfg.regime.stage1() else {
        return Err(TrainError::InvalidConfig(format!("{} is not a two-stage regime", cfg.regime)));
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let s1_cfg = TrainConfig { regime: first, ..cfg.clone() };
    let s1 = train(&s1_cfg, data, &out.join("stage1"), None)?;
    let pl_dir = out.join("pseudo_labels");
    let unlabeled = data.require(data.unlabeled_target())?;
    let pls = pseudolabel::extract_from_checkpoint(&out.join("stage1").join(&s1.final_checkpoint), &unlabeled.inputs, cfg.pl_p)?;
    pls.check_source(&s1.final_hash)?;
    if pl_dir.exists() {
        fs::remove_dir_all(&pl_dir)?;
    }
    pls.write(&pl_dir)?;
    let s2_cfg = TrainConfig { seed: stage2_seed(cfg.seed), ..cfg.clone() };
    let s2 = train(&s2_cfg, data, &out.join("stage2"), Some(&pls))?;
    let mut label_reads = s1.label_reads.clone();
    for (k, v) in &s2.label_reads {
        *label_reads.entry(k.clone()).or_default() += v;
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        best_checkpoint: format!("stage2/{}", s2.best_checkpoint),
        final_checkpoint: format!("stage2/{}", s2.final_checkpoint),
        label_reads,
        stage1: Some("stage1".into()),
        pseudo_labels: Some("pseudo_labels".into()),
        ..s2
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Supervised target training, optionally with source mixed in 50/50.
pub fn train_oracle(cfg: &TrainConfig, data: &TrainData, out: &Path, mix_source: bool) -> Result<RunManifest, TrainError> {
    let cfg = TrainConfig { regime: Regime::TrgOnly, mix_source, ..cfg.clone() };
    train(&cfg, data, out, None)
}

/// Any regime: two-stage ones go through [`train_two_stage_pl`].
pub fn run(cfg: &TrainConfig, data: &TrainData, out: &Path) -> Result<RunManifest, TrainError> {
    if cfg.regime.uses_pseudo_labels() {
        train_two_stage_pl(cfg, data, out)
    } else {
        train(cfg, data, out, None)
    }
}

/// Evaluates the best-validation checkpoint of a run on a labeled split.
pub fn evaluate_run(run: &Path, data: &TrainData, split: SplitName) -> Result<MetricsReport, TrainError> {
    let m = RunManifest::read(run)?;
    let (model, _) = checkpoint::load(&run.join(&m.best_checkpoint))?;
    data.evaluate(&model, split, &m.best_checkpoint_id)
}
