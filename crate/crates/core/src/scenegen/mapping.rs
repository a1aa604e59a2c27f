//! Raw-label to training-class mappings.
//!
//! Each shipped table lists, per dataset, the raw label names in raw-id order
//! and the merged class each one maps to (`"ignore"` maps to -1).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::IGNORE;

#[derive(Debug, Error, PartialEq)]
pub enum MappingError {
    #[error("raw label {0} is not covered by the mapping")]
    UnmappedLabel(i32),
    #[error("unknown mapping `{0}`")]
    UnknownMapping(String),
    #[error("mapping `{mapping}` has no domain `{domain}`")]
    UnknownDomain { mapping: String, domain: String },
    #[error("invalid mapping: {0}")]
    Invalid(String),
}

const IGNORE_NAME: &str = "ignore";

/// A class-mapping document covering one or more datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Merged class names; the position is the training class id.
    pub classes: Vec<String>,
    /// Dataset name → `[raw label name, merged class or "ignore"]` rows.
    pub domains: BTreeMap<String, Vec<(String, String)>>,
}

const SHIPPED: [(&str, &str); 6] = [
    ("virtualkitti_semantickitti", include_str!("../../data/mappings/virtualkitti_semantickitti.json")),
    ("a2d2_semantickitti", include_str!("../../data/mappings/a2d2_semantickitti.json")),
    ("semantickitti_nuscenes", include_str!("../../data/mappings/semantickitti_nuscenes.json")),
    ("nuscenes_lidarseg", include_str!("../../data/mappings/nuscenes_lidarseg.json")),
    ("waymo_od", include_str!("../../data/mappings/waymo_od.json")),
    ("synthetic", include_str!("../../data/mappings/synthetic.json")),
];

impl ClassMapping {
    pub fn shipped_names() -> Vec<&'static str> {
        SHIPPED.iter().map(|(n, _)| *n).collect()
    }

    pub fn shipped(name: &str) -> Result<Self, MappingError> {
        let (_, text) = SHIPPED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| MappingError::UnknownMapping(name.to_string()))?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self, MappingError> {
        let m: Self = serde_json::from_str(text).map_err(|e| MappingError::Invalid(e.to_string()))?;
        for (domain, rows) in &m.domains {
            for (raw, target) in rows {
                if target != IGNORE_NAME && !m.classes.contains(target) {
                    return Err(MappingError::Invalid(format!("{domain}: `{raw}` maps to unknown class `{target}`")));
                }
            }
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Lookup table for one dataset of this mapping.
    pub fn table(&self, domain: &str) -> Result<LabelTable, MappingError> {
        let rows = self.domains.get(domain).ok_or_else(|| MappingError::UnknownDomain {
            mapping: self.name.clone(),
            domain: domain.to_string(),
        })?;
        let targets = rows
            .iter()
            .map(|(_, t)| self.classes.iter().position(|c| c == t).map_or(IGNORE, |i| i as i32))
            .collect();
        Ok(LabelTable { num_classes: self.classes.len(), targets })
    }
}

/// Raw id → merged id (or -1) for one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTable {
    pub num_classes: usize,
    pub targets: Vec<i32>,
}

impl LabelTable {
    pub fn identity(num_classes: usize) -> Self {
        Self { num_classes, targets: (0..num_classes as i32).collect() }
    }
}

/// Maps raw labels through `table`. Raw `-1` stays ignored.
pub fn apply_class_mapping(labels: &[i32], table: &LabelTable) -> Result<Vec<i32>, MappingError> {
    labels
        .iter()
        .map(|&raw| {
            if raw == IGNORE {
                return Ok(IGNORE);
            }
            usize::try_from(raw)
                .ok()
                .and_then(|i| table.targets.get(i).copied())
                .ok_or(MappingError::UnmappedLabel(raw))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shipped_mapping_parses() {
        for name in ClassMapping::shipped_names() {
            let m = ClassMapping::shipped(name).unwrap();
            for domain in m.domains.keys() {
                let t = m.table(domain).unwrap();
                assert!(t.targets.iter().all(|&c| c == IGNORE || (0..m.num_classes() as i32).contains(&c)));
            }
        }
    }

    #[test]
    fn nuscenes_has_six_classes() {
        let m = ClassMapping::shipped("nuscenes_lidarseg").unwrap();
        assert_eq!(m.num_classes(), 6);
    }

    #[test]
    fn a2d2_semantickitti_has_ten_classes() {
        let m = ClassMapping::shipped("a2d2_semantickitti").unwrap();
        let want = ["car", "truck", "bike", "person", "road", "parking", "sidewalk", "building", "nature", "other-objects"];
        assert_eq!(m.classes, want);
        // Spot checks against the published table.
        let a2d2 = &m.domains["A2D2"];
        assert!(a2d2.contains(&("Curbstone".into(), "sidewalk".into())));
        assert!(a2d2.contains(&("Sky".into(), "ignore".into())));
        let kitti = &m.domains["SemanticKITTI"];
        assert!(kitti.contains(&("trunk".into(), "nature".into())));
        assert!(kitti.contains(&("moving-bicyclist".into(), "bike".into())));
    }

    #[test]
    fn identity_mapping_is_a_no_op() {
        let labels = vec![0, 5, -1, 3, 2];
        assert_eq!(apply_class_mapping(&labels, &LabelTable::identity(6)).unwrap(), labels);
        let m = ClassMapping::shipped("synthetic").unwrap();
        assert_eq!(apply_class_mapping(&labels, &m.table("synthetic").unwrap()).unwrap(), labels);
    }

    #[test]
    fn virtualkitti_table_maps_by_raw_id() {
        let m = ClassMapping::shipped("virtualkitti_semantickitti").unwrap();
        let t = m.table("VirtualKITTI").unwrap();
        // Terrain, Building, Van, Car
        assert_eq!(apply_class_mapping(&[0, 3, 11, 10], &t).unwrap(), vec![0, 1, -1, 5]);
    }

    #[test]
    fn uncovered_labels_are_errors() {
        let t = LabelTable::identity(3);
        assert_eq!(apply_class_mapping(&[0, 3], &t), Err(MappingError::UnmappedLabel(3)));
        assert_eq!(apply_class_mapping(&[-7], &t), Err(MappingError::UnmappedLabel(-7)));
    }
}
