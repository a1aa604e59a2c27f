//! Shipped source/target scenarios and their train/val/test splits.
//!
//! A scenario is materialized into a dataset directory:
//!
//! ```text
//! <out>/scenario.json          the resolved SplitSet
//! <out>/<split>.txt            sample keys of one split, one per line
//! <out>/<sample key>/          one sample container per frame
//! ```

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{generate_scene, DomainSpec, SceneError};
use crate::sample::{read_sample, sample_key, write_sample, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Uda,
    Ssda,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Uda => "uda",
            ScenarioKind::Ssda => "ssda",
        })
    }
}

/// Frame counts per split; unused splits are zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    #[serde(default)]
    pub target_train: usize,
    #[serde(default)]
    pub target_labeled: usize,
    #[serde(default)]
    pub target_unlabeled: usize,
    pub target_val: usize,
    pub target_test: usize,
}

/// One shipped preset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub mapping: String,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub uda: SplitSizes,
    pub ssda: SplitSizes,
}

const SHIPPED: [(&str, &str); 5] = [
    ("synth-layout", include_str!("../../data/presets/synth-layout.json")),
    ("synth-lighting", include_str!("../../data/presets/synth-lighting.json")),
    ("synth-sensor", include_str!("../../data/presets/synth-sensor.json")),
    ("synth-density", include_str!("../../data/presets/synth-density.json")),
    ("synth-weather", include_str!("../../data/presets/synth-weather.json")),
];

impl Preset {
    pub fn names() -> Vec<&'static str> {
        SHIPPED.iter().map(|(n, _)| *n).collect()
    }

    pub fn shipped(name: &str) -> Result<Self, SceneError> {
        let (_, text) = SHIPPED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| SceneError::UnknownPreset(name.to_string()))?;
        serde_json::from_str(text).map_err(|e| SceneError::InvalidSpec(format!("{name}: {e}")))
    }

    pub fn sizes(&self, kind: ScenarioKind) -> &SplitSizes {
        match kind {
            ScenarioKind::Uda => &self.uda,
            ScenarioKind::Ssda => &self.ssda,
        }
    }
}

/// Names of the splits a scenario can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    SourceTrain,
    TargetTrain,
    TargetLabeled,
    TargetUnlabeled,
    TargetVal,
    TargetTest,
}

impl SplitName {
    pub const ALL: [SplitName; 6] = [
        SplitName::SourceTrain,
        SplitName::TargetTrain,
        SplitName::TargetLabeled,
        SplitName::TargetUnlabeled,
        SplitName::TargetVal,
        SplitName::TargetTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::SourceTrain => "source_train",
            SplitName::TargetTrain => "target_train",
            SplitName::TargetLabeled => "target_labeled",
            SplitName::TargetUnlabeled => "target_unlabeled",
            SplitName::TargetVal => "target_val",
            SplitName::TargetTest => "target_test",
        }
    }

    pub fn is_source(self) -> bool {
        self == SplitName::SourceTrain
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// Frame ids of every split. Source frames come from the source domain, all
/// others from the target domain in consecutive, non-overlapping id ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub preset: String,
    pub kind: ScenarioKind,
    pub mapping: String,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub source_train: Vec<u64>,
    pub target_train: Vec<u64>,
    pub target_labeled: Vec<u64>,
    pub target_unlabeled: Vec<u64>,
    pub target_val: Vec<u64>,
    pub target_test: Vec<u64>,
}

/// Shipped preset `"<name>/<uda|ssda>"` with its default seeds.
pub fn make_scenario(preset: &str) -> Result<SplitSet, SceneError> {
    make_scenario_with_seed(preset, 0)
}

/// Like [`make_scenario`], with both domain seeds mixed with `seed`
/// (`seed = 0` keeps the shipped seeds).
pub fn make_scenario_with_seed(preset: &str, seed: u64) -> Result<SplitSet, SceneError> {
    let unknown = || SceneError::UnknownPreset(preset.to_string());
    let (name, kind) = preset.split_once('/').ok_or_else(unknown)?;
    let kind = match kind {
        "uda" => ScenarioKind::Uda,
        "ssda" => ScenarioKind::Ssda,
        _ => return Err(unknown()),
    };
    let p = Preset::shipped(name).map_err(|_| unknown())?;
    SplitSet::from_preset(&p, kind, seed)
}

impl SplitSet {
    pub fn from_preset(p: &Preset, kind: ScenarioKind, seed: u64) -> Result<Self, SceneError> {
        let mix = |s: u64| s ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut source = p.source.clone();
        let mut target = p.target.clone();
        source.seed = mix(source.seed);
        target.seed = mix(target.seed);
        source.validate()?;
        target.validate()?;
        if source.name == target.name {
            return Err(SceneError::InvalidSpec("source and target domains share a name".into()));
        }
        let sizes = p.sizes(kind);
        if kind == ScenarioKind::Ssda && sizes.target_unlabeled < 5 * sizes.target_labeled {
            return Err(SceneError::InvalidSpec("ssda presets need |T_u| >= 5 |T_l|".into()));
        }
        let mut next = 0u64;
        let mut take = |n: usize| {
            let ids: Vec<u64> = (next..next + n as u64).collect();
            next += n as u64;
            ids
        };
        let (target_train, target_labeled, target_unlabeled) = match kind {
            ScenarioKind::Uda => (take(sizes.target_train), Vec::new(), Vec::new()),
            ScenarioKind::Ssda => {
                let l = take(sizes.target_labeled);
                (Vec::new(), l, take(sizes.target_unlabeled))
            }
        };
        let target_val = take(sizes.target_val);
        let target_test = take(sizes.target_test);
        Ok(Self {
            preset: p.name.clone(),
            kind,
            mapping: p.mapping.clone(),
            source_train: (0..sizes.source_train as u64).collect(),
            source,
            target,
            target_train,
            target_labeled,
            target_unlabeled,
            target_val,
            target_test,
        })
    }

    pub fn frames(&self, split: SplitName) -> &[u64] {
        match split {
            SplitName::SourceTrain => &self.source_train,
            SplitName::TargetTrain => &self.target_train,
            SplitName::TargetLabeled => &self.target_labeled,
            SplitName::TargetUnlabeled => &self.target_unlabeled,
            SplitName::TargetVal => &self.target_val,
            SplitName::TargetTest => &self.target_test,
        }
    }

    pub fn frames_mut(&mut self, split: SplitName) -> &mut Vec<u64> {
        match split {
            SplitName::SourceTrain => &mut self.source_train,
            SplitName::TargetTrain => &mut self.target_train,
            SplitName::TargetLabeled => &mut self.target_labeled,
            SplitName::TargetUnlabeled => &mut self.target_unlabeled,
            SplitName::TargetVal => &mut self.target_val,
            SplitName::TargetTest => &mut self.target_test,
        }
    }

    pub fn domain(&self, split: SplitName) -> &DomainSpec {
        if split.is_source() {
            &self.source
        } else {
            &self.target
        }
    }

    /// Splits that hold at least one frame.
    pub fn present(&self) -> Vec<SplitName> {
        SplitName::ALL.into_iter().filter(|&s| !self.frames(s).is_empty()).collect()
    }

    pub fn keys(&self, split: SplitName) -> Vec<String> {
        let d = &self.domain(split).name;
        self.frames(split).iter().map(|&f| sample_key(d, f)).collect()
    }

    /// Generates every frame of `split` in memory.
    pub fn generate(&self, split: SplitName) -> Result<Vec<Sample>, SceneError> {
        let spec = self.domain(split);
        self.frames(split).iter().map(|&f| generate_scene(spec, f)).collect()
    }

    /// Writes all splits as a dataset directory (see module docs).
    pub fn write_dataset(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join("scenario.json"), json + "\n")?;
        for split in self.present() {
            let spec = self.domain(split);
            let mut index = String::new();
            for &frame in self.frames(split) {
                let sample = generate_scene(spec, frame).map_err(io::Error::other)?;
                let key = sample.key();
                write_sample(&sample, &dir.join(&key))?;
                index.push_str(&key);
                index.push('\n');
            }
            fs::write(dir.join(format!("{split}.txt")), index)?;
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> io::Result<Self> {
        let text = fs::read(dir.join("scenario.json"))?;
        serde_json::from_slice(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Loads one split of a dataset directory in index-file order.
pub fn read_split(dir: &Path, split: SplitName) -> io::Result<Vec<Sample>> {
    let path = dir.join(format!("{split}.txt"));
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|key| read_sample(&dir.join(key)))
        .collect()
}
