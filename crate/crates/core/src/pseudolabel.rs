//! Offline pseudo-labels from the final checkpoint of a finished run.
//!
//! Selection is class-balanced: for each modality and class `c`, the
//! confidences of all points argmax-predicted as `c` over the split are
//! sorted, and the most confident `floor(p · n_c)` of them set the class
//! threshold. Points at or above their class threshold keep the argmax label,
//! the rest get `-1`.
//!
//! On disk:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<sample key>/pl_2d.i32
//! <dir>/<sample key>/pl_3d.i32
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::checkpoint::{self, CheckpointManifest};
use crate::nets::{Model, NetError, Outputs, PreparedSample};
use crate::sample::{read_i32, write_i32, IGNORE};
use crate::tensor::{Mat, Real};

pub const DEFAULT_P: f64 = 0.9;

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error("split is empty")]
    EmptySplit,
    #[error("checkpoint at iteration {0} is not the final checkpoint of a completed run")]
    StaleCheckpoint(u64),
    #[error("pseudo-labels need a dual-head model")]
    NotDual,
    #[error("p must lie in [0, 1], got {0}")]
    InvalidP(f64),
    #[error("pseudo-labels were made from checkpoint {found}, expected {expected}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("no pseudo-labels for sample `{0}`")]
    MissingSample(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Selection of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    /// Per-class threshold; `None` when nothing of the class is kept.
    pub thresholds: Vec<Option<f64>>,
    /// Points argmax-predicted as each class.
    pub candidates: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelManifest {
    /// Parameter hash of the generating checkpoint.
    pub checkpoint_hash: String,
    pub checkpoint_iteration: u64,
    pub p: f64,
    pub num_classes: usize,
    pub samples: Vec<String>,
    pub selection_2d: ClassSelection,
    pub selection_3d: ClassSelection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePseudoLabels {
    pub pl_2d: Vec<i32>,
    pub pl_3d: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub manifest: PseudoLabelManifest,
    /// In the order of `manifest.samples`.
    pub labels: Vec<SamplePseudoLabels>,
}

/// Class-balanced selection over the per-sample probability maps of one
/// modality. Returns the per-sample labels and the selection metadata.
pub fn select<T: Real>(probs: &[Mat<T>], p: f64) -> Result<(Vec<Vec<i32>>, ClassSelection), PseudoLabelError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PseudoLabelError::InvalidP(p));
    }
    let Some(first) = probs.first() else { return Err(PseudoLabelError::EmptySplit) };
    let c = first.cols;
    let mut argmax = Vec::with_capacity(probs.len());
    let mut conf: Vec<Vec<f64>> = vec![Vec::new(); c];
    for m in probs {
        let a = m.argmax_rows();
        for (r, &k) in a.iter().enumerate() {
            conf[k].push(m.get(r, k).as_f64());
        }
        argmax.push(a);
    }
    let mut thresholds = Vec::with_capacity(c);
    let mut candidates = Vec::with_capacity(c);
    for v in &mut conf {
        candidates.push(v.len() as u64);
        let keep = (p * v.len() as f64).floor() as usize;
        if keep == 0 {
            thresholds.push(None);
        } else {
            v.sort_by(|a, b| b.total_cmp(a));
            thresholds.push(Some(v[keep - 1]));
        }
    }
    let labels = probs
        .iter()
        .zip(&argmax)
        .map(|(m, a)| {
            a.iter()
                .enumerate()
                .map(|(r, &k)| match thresholds[k] {
                    Some(t) if m.get(r, k).as_f64() >= t => k as i32,
                    _ => IGNORE,
                })
                .collect()
        })
        .collect();
    Ok((labels, ClassSelection { thresholds, candidates }))
}

/// Pseudo-labels from a model and the manifest of the checkpoint it was
/// loaded from. Only the final checkpoint of a completed run is accepted.
pub fn extract<T: Real>(
    model: &Model<T>,
    ckpt: &CheckpointManifest,
    samples: &[PreparedSample],
    p: f64,
) -> Result<PseudoLabelSet, PseudoLabelError> {
    if !ckpt.is_final {
        return Err(PseudoLabelError::StaleCheckpoint(ckpt.iteration));
    }
    if samples.is_empty() {
        return Err(PseudoLabelError::EmptySplit);
    }
    let mut p2 = Vec::with_capacity(samples.len());
    let mut p3 = Vec::with_capacity(samples.len());
    for s in samples {
        match model.predict(&[s])? {
            Outputs::Dual(ps) => {
                p2.push(ps.p_2d);
                p3.push(ps.p_3d);
            }
            Outputs::Fusion(_) => return Err(PseudoLabelError::NotDual),
        }
    }
    let (l2, selection_2d) = select(&p2, p)?;
    let (l3, selection_3d) = select(&p3, p)?;
    let labels = l2.into_iter().zip(l3).map(|(pl_2d, pl_3d)| SamplePseudoLabels { pl_2d, pl_3d }).collect();
    Ok(PseudoLabelSet {
        manifest: PseudoLabelManifest {
            checkpoint_hash: ckpt.hash.clone(),
            checkpoint_iteration: ckpt.iteration,
            p,
            num_classes: model.num_classes(),
            samples: samples.iter().map(|s| s.key.clone()).collect(),
            selection_2d,
            selection_3d,
        },
        labels,
    })
}

/// Loads a checkpoint directory and extracts from it.
pub fn extract_from_checkpoint(dir: &Path, samples: &[PreparedSample], p: f64) -> Result<PseudoLabelSet, PseudoLabelError> {
    let (model, manifest) = checkpoint::load(dir)?;
    extract(&model, &manifest, samples, p)
}

impl PseudoLabelSet {
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (key, l) in self.manifest.samples.iter().zip(&self.labels) {
            let d = dir.join(key);
            fs::create_dir_all(&d)?;
            write_i32(&d.join("pl_2d.i32"), &l.pl_2d)?;
            write_i32(&d.join("pl_3d.i32"), &l.pl_3d)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest).map_err(io::Error::other)?;
        fs::write(dir.join("manifest.json"), json + "\n")
    }

    pub fn read(dir: &Path) -> io::Result<Self> {
        let bytes = fs::read(dir.join("manifest.json"))?;
        let manifest: PseudoLabelManifest =
            serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let labels = manifest
            .samples
            .iter()
            .map(|k| {
                let d = dir.join(k);
                Ok(SamplePseudoLabels { pl_2d: read_i32(&d.join("pl_2d.i32"))?, pl_3d: read_i32(&d.join("pl_3d.i32"))? })
            })
            .collect::<io::Result<_>>()?;
        Ok(Self { manifest, labels })
    }

    pub fn get(&self, key: &str) -> Option<&SamplePseudoLabels> {
        self.manifest.samples.iter().position(|k| k == key).map(|i| &self.labels[i])
    }

    /// Labels aligned with `keys`, failing on any key without labels.
    pub fn aligned(&self, keys: &[String]) -> Result<Vec<&SamplePseudoLabels>, PseudoLabelError> {
        keys.iter().map(|k| self.get(k).ok_or_else(|| PseudoLabelError::MissingSample(k.clone()))).collect()
    }

    pub fn check_source(&self, checkpoint_hash: &str) -> Result<(), PseudoLabelError> {
        if self.manifest.checkpoint_hash == checkpoint_hash {
            Ok(())
        } else {
            Err(PseudoLabelError::CheckpointMismatch {
                expected: checkpoint_hash.to_string(),
                found: self.manifest.checkpoint_hash.clone(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCoverage {
    pub selected: u64,
    pub candidates: u64,
    /// `selected / candidates`, or 0 for a class never predicted.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub p: f64,
    pub classes_2d: Vec<ClassCoverage>,
    pub classes_3d: Vec<ClassCoverage>,
}

fn coverage(sel: &ClassSelection, labels: &mut dyn Iterator<Item = &i32>) -> Vec<ClassCoverage> {
    let mut selected = vec![0u64; sel.candidates.len()];
    for &l in labels {
        if l >= 0 {
            selected[l as usize] += 1;
        }
    }
    selected
        .into_iter()
        .zip(&sel.candidates)
        .map(|(s, &n)| ClassCoverage { selected: s, candidates: n, fraction: if n == 0 { 0.0 } else { s as f64 / n as f64 } })
        .collect()
}

pub fn coverage_report(pls: &PseudoLabelSet) -> CoverageReport {
    let m = &pls.manifest;
    CoverageReport {
        p: m.p,
        classes_2d: coverage(&m.selection_2d, &mut pls.labels.iter().flat_map(|l| &l.pl_2d)),
        classes_3d: coverage(&m.selection_3d, &mut pls.labels.iter().flat_map(|l| &l.pl_3d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps() -> Vec<Mat<f64>> {
        vec![
            Mat::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8]]),
            Mat::from_rows(&[vec![0.7, 0.3], vec![0.45, 0.55]]),
        ]
    }

    #[test]
    fn keeps_the_most_confident_fraction_per_class() {
        let (l, sel) = select(&maps(), 0.5).unwrap();
        // class 0: 0.9, 0.7, 0.6 → keep 1; class 1: 0.8, 0.55 → keep 1
        assert_eq!(sel.candidates, vec![3, 2]);
        assert_eq!(sel.thresholds, vec![Some(0.9), Some(0.8)]);
        assert_eq!(l, vec![vec![0, -1, 1], vec![-1, -1]]);
    }

    #[test]
    fn p_one_keeps_everything_and_p_zero_nothing() {
        let (all, _) = select(&maps(), 1.0).unwrap();
        assert_eq!(all, vec![vec![0, 0, 1], vec![0, 1]]);
        let (none, sel) = select(&maps(), 0.0).unwrap();
        assert!(none.iter().flatten().all(|&v| v == IGNORE));
        assert_eq!(sel.thresholds, vec![None, None]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(select::<f64>(&[], 0.5), Err(PseudoLabelError::EmptySplit)));
        assert!(matches!(select(&maps(), 1.5), Err(PseudoLabelError::InvalidP(_))));
    }

    #[test]
    fn coverage_of_a_never_predicted_class_is_zero() {
        let probs = vec![Mat::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]])];
        let (l, sel) = select(&probs, 1.0).unwrap();
        let set = PseudoLabelSet {
            manifest: PseudoLabelManifest {
                checkpoint_hash: "h".into(),
                checkpoint_iteration: 3,
                p: 1.0,
                num_classes: 3,
                samples: vec!["a".into()],
                selection_2d: sel.clone(),
                selection_3d: sel,
            },
            labels: vec![SamplePseudoLabels { pl_2d: l[0].clone(), pl_3d: l[0].clone() }],
        };
        let r = coverage_report(&set);
        assert_eq!(r.classes_2d.iter().map(|c| c.fraction).collect::<Vec<_>>(), vec![1.0, 1.0, 0.0]);
        assert_eq!(r.classes_3d[2].candidates, 0);
        let dir = tempfile::tempdir().unwrap();
        set.write(dir.path()).unwrap();
        assert_eq!(PseudoLabelSet::read(dir.path()).unwrap(), set);
    }
}
