//! JSON dataset manifest: image records, per-visit labels and an optional
//! patient-level split assignment.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pasi::{self, PerRegion, Region, SeverityComponents, PASI_MAX};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Image path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub patient_id: String,
    pub visit_id: String,
    pub region: Region,
    pub slot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<u8>,
}

impl ImageRecord {
    pub fn visit_key(&self) -> String {
        visit_key(&self.patient_id, &self.visit_id)
    }
}

pub fn visit_key(patient_id: &str, visit_id: &str) -> String {
    format!("{patient_id}/{visit_id}")
}

/// Split a `patient/visit` key into its two parts.
pub fn parse_visit_key(key: &str) -> Result<(&str, &str)> {
    key.split_once('/')
        .filter(|(p, v)| !p.is_empty() && !v.is_empty() && !v.contains('/'))
        .ok_or_else(|| Error::validation("visit key", format!("{key:?} is not <patient>/<visit>")))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelBlock {
    #[serde(rename = "HN", default, skip_serializing_if = "Option::is_none")]
    pub head_neck: Option<f64>,
    #[serde(rename = "UE", default, skip_serializing_if = "Option::is_none")]
    pub upper_extremities: Option<f64>,
    #[serde(rename = "LE", default, skip_serializing_if = "Option::is_none")]
    pub lower_extremities: Option<f64>,
    #[serde(rename = "TR", default, skip_serializing_if = "Option::is_none")]
    pub trunk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
}

impl LabelBlock {
    pub fn from_regions(regional: &PerRegion<f64>) -> Result<Self> {
        let total = pasi::total_from_regions(regional)?.value;
        Ok(LabelBlock {
            head_neck: Some(regional[Region::HeadNeck]),
            upper_extremities: Some(regional[Region::UpperExtremities]),
            lower_extremities: Some(regional[Region::LowerExtremities]),
            trunk: Some(regional[Region::Trunk]),
            total: Some(total),
        })
    }

    pub fn regional(&self, region: Region) -> Option<f64> {
        match region {
            Region::HeadNeck => self.head_neck,
            Region::UpperExtremities => self.upper_extremities,
            Region::LowerExtremities => self.lower_extremities,
            Region::Trunk => self.trunk,
        }
    }

    /// All four regional labels, if present.
    pub fn all_regional(&self) -> Option<PerRegion<f64>> {
        let mut out = PerRegion([0.0; 4]);
        for region in Region::ALL {
            out[region] = self.regional(region)?;
        }
        Some(out)
    }

    fn validate(&self, key: &str) -> Result<()> {
        let fields = Region::ALL
            .iter()
            .map(|r| (r.code(), self.regional(*r)))
            .chain(std::iter::once(("total", self.total)));
        for (name, value) in fields {
            if let Some(v) = value {
                if !(0.0..=PASI_MAX).contains(&v) {
                    return Err(Error::validation(
                        format!("labels.{key}.{name}"),
                        format!("{v} outside [0, {PASI_MAX}]"),
                    ));
                }
            }
        }
        if let (Some(regional), Some(total)) = (self.all_regional(), self.total) {
            let combined = pasi::total_from_regions(&regional)?.value;
            if (combined - total).abs() > 1e-9 {
                return Err(Error::validation(
                    format!("labels.{key}.total"),
                    format!("{total} disagrees with weighted regional sum {combined}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-region ground-truth ordinals, keyed by region code.
pub type ComponentBlock = BTreeMap<Region, SeverityComponents>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patients: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub labels: BTreeMap<String, LabelBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<BTreeMap<String, Split>>,
    /// Known sub-scores, only present for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<BTreeMap<String, ComponentBlock>>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    /// Visit keys in canonical (sorted) order.
    pub fn visit_keys(&self) -> Vec<String> {
        self.labels.keys().cloned().collect()
    }

    pub fn records_for<'a>(
        &'a self,
        patient_id: &'a str,
        visit_id: &'a str,
        region: Region,
    ) -> impl Iterator<Item = &'a ImageRecord> + 'a {
        self.records.iter().filter(move |r| {
            r.patient_id == patient_id && r.visit_id == visit_id && r.region == region
        })
    }

    /// Keep only the given patients (records, labels, components, split).
    pub fn restrict_to(&self, keep: &BTreeSet<String>) -> DatasetManifest {
        let in_keep = |key: &String| {
            parse_visit_key(key)
                .map(|(p, _)| keep.contains(p))
                .unwrap_or(false)
        };
        DatasetManifest {
            patients: self
                .patients
                .iter()
                .filter(|p| keep.contains(*p))
                .cloned()
                .collect(),
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.patient_id))
                .cloned()
                .collect(),
            labels: self
                .labels
                .iter()
                .filter(|(k, _)| in_keep(k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            split: self.split.as_ref().map(|s| {
                s.iter()
                    .filter(|(p, _)| keep.contains(*p))
                    .map(|(p, v)| (p.clone(), *v))
                    .collect()
            }),
            components: self.components.as_ref().map(|c| {
                c.iter()
                    .filter(|(k, _)| in_keep(k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect()
            }),
            root: self.root.clone(),
        }
    }

    /// Sub-manifest for one split, using the stored assignment.
    pub fn split_subset(&self, which: Split) -> Result<DatasetManifest> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Structure("manifest has no split assignment".into()))?;
        let keep: BTreeSet<String> = split
            .iter()
            .filter(|(_, s)| **s == which)
            .map(|(p, _)| p.clone())
            .collect();
        Ok(self.restrict_to(&keep))
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let patients: HashSet<&str> = self.patients.iter().map(String::as_str).collect();
        if patients.len() != self.patients.len() {
            return Err(Error::Structure(
                "duplicate patient id in patients list".into(),
            ));
        }
        for p in &self.patients {
            if p.is_empty() || p.contains('/') {
                return Err(Error::validation(
                    "patients",
                    format!("bad patient id {p:?}"),
                ));
            }
        }
        let mut seen = HashSet::new();
        let mut visits_with_images = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let field = |name: &str| format!("records[{i}].{name}");
            if !patients.contains(r.patient_id.as_str()) {
                return Err(Error::validation(
                    field("patient_id"),
                    format!("{:?} not listed in patients", r.patient_id),
                ));
            }
            if r.visit_id.is_empty() || r.visit_id.contains('/') {
                return Err(Error::validation(
                    field("visit_id"),
                    format!("bad visit id {:?}", r.visit_id),
                ));
            }
            if r.slot >= r.region.image_count() {
                return Err(Error::validation(
                    field("slot"),
                    format!(
                        "slot {} out of range for {} (capacity {})",
                        r.slot,
                        r.region,
                        r.region.image_count()
                    ),
                ));
            }
            if let Some(c) = r.crop {
                if c > 3 {
                    return Err(Error::validation(
                        field("crop"),
                        format!("{c} not in 0..=3"),
                    ));
                }
            }
            let key = (&r.patient_id, &r.visit_id, r.region, r.slot, r.crop);
            if !seen.insert(key) {
                return Err(Error::Structure(format!(
                    "duplicate record for {}/{} {} slot {}",
                    r.patient_id, r.visit_id, r.region, r.slot
                )));
            }
            visits_with_images.insert(r.visit_key());
        }
        for (key, block) in &self.labels {
            let (patient, _) = parse_visit_key(key)?;
            if !patients.contains(patient) {
                return Err(Error::validation(
                    format!("labels.{key}"),
                    format!("patient {patient:?} not listed in patients"),
                ));
            }
            if !visits_with_images.contains(key) {
                return Err(Error::Structure(format!(
                    "labeled visit {key} has no images"
                )));
            }
            block.validate(key)?;
        }
        if let Some(split) = &self.split {
            for p in split.keys() {
                if !patients.contains(p.as_str()) {
                    return Err(Error::validation(
                        "split",
                        format!("patient {p:?} not listed in patients"),
                    ));
                }
            }
        }
        if let Some(components) = &self.components {
            for (key, block) in components {
                for (region, c) in block {
                    c.validate().map_err(|e| {
                        Error::validation(format!("components.{key}.{region}"), e.to_string())
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Fail on the first referenced image that does not exist.
    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            let path = self.resolve(r);
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced image not found"),
                ));
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str, context: &str) -> Result<DatasetManifest> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })
}

/// Read, validate and check a manifest, resolving image paths against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = parse_manifest(&text, &path.display().to_string())?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    manifest.check_files()?;
    Ok(manifest)
}

pub fn to_json(manifest: &DatasetManifest) -> String {
    serde_json::to_string_pretty(manifest).expect("manifest is always serializable")
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, to_json(manifest)).map_err(|e| Error::io(path, e))
}

/// Copy of the manifest with every record path made absolute, so it can be
/// written to another directory.
pub fn with_absolute_paths(manifest: &DatasetManifest) -> DatasetManifest {
    let mut out = manifest.clone();
    for r in &mut out.records {
        let resolved = manifest.resolve(r);
        r.path = std::fs::canonicalize(&resolved).unwrap_or(resolved);
    }
    out
}
