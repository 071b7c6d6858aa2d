use std::collections::HashSet;

use ndarray::Array3;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::image::{four_crop, load_rgb, normalize_image, resize_bilinear, rgb_to_array};
use super::manifest::{parse_visit_key, DatasetManifest, ImageRecord, LabelBlock};
use crate::error::{Error, Result};
use crate::pasi::{PerRegion, Region, SeverityComponents};

/// How photos become model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// Each photo is resized to the input size.
    #[default]
    LowRes,
    /// Each photo is resized to twice the input size and split into four
    /// input-sized quadrants.
    FourCrop,
}

impl AssemblyMode {
    pub fn capacity(self, region: Region) -> usize {
        match self {
            AssemblyMode::LowRes => region.image_count(),
            AssemblyMode::FourCrop => region.image_count() * 4,
        }
    }
}

impl std::str::FromStr for AssemblyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_res" => Ok(AssemblyMode::LowRes),
            "four_crop" => Ok(AssemblyMode::FourCrop),
            other => Err(Error::validation(
                "mode",
                format!("{other:?} is not low_res or four_crop"),
            )),
        }
    }
}

/// A fixed-capacity image set for one region. Invalid slots hold all-zero
/// images and are excluded from attention.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalImageSet<F = f32> {
    pub region: Region,
    /// `(3, height, width)` standardized images.
    pub images: Vec<Array3<F>>,
    pub valid_mask: Vec<bool>,
}

impl<F: Float> RegionalImageSet<F> {
    pub fn new(region: Region, images: Vec<Array3<F>>, valid_mask: Vec<bool>) -> Result<Self> {
        if images.len() != valid_mask.len() {
            return Err(Error::Shape(format!(
                "{} images but {} mask entries",
                images.len(),
                valid_mask.len()
            )));
        }
        if let Some(first) = images.first() {
            let dim = first.dim();
            if dim.0 != 3 {
                return Err(Error::Shape(format!("expected 3 channels, got {}", dim.0)));
            }
            if images.iter().any(|im| im.dim() != dim) {
                return Err(Error::Shape("images in a set must share one size".into()));
            }
        }
        for (im, &valid) in images.iter().zip(&valid_mask) {
            if !valid && im.iter().any(|v| !v.is_zero()) {
                return Err(Error::Structure(
                    "masked slot holds a non-zero image".into(),
                ));
            }
        }
        Ok(RegionalImageSet {
            region,
            images,
            valid_mask,
        })
    }

    /// Build a full set from the valid images only (all slots valid).
    pub fn from_valid(region: Region, images: Vec<Array3<F>>) -> Result<Self> {
        let mask = vec![true; images.len()];
        Self::new(region, images, mask)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid_mask[i]).collect()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|im| (im.dim().1, im.dim().2))
    }

    pub fn cast<G: Float>(&self) -> RegionalImageSet<G> {
        RegionalImageSet {
            region: self.region,
            images: self
                .images
                .iter()
                .map(|im| im.mapv(|v| G::from(v).unwrap()))
                .collect(),
            valid_mask: self.valid_mask.clone(),
        }
    }

    /// Apply a slot permutation: output slot `i` takes input slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        RegionalImageSet {
            region: self.region,
            images: perm.iter().map(|&i| self.images[i].clone()).collect(),
            valid_mask: perm.iter().map(|&i| self.valid_mask[i]).collect(),
        }
    }
}

fn place(
    slots: &mut [Option<Array3<f32>>],
    index: usize,
    image: Array3<f32>,
    record: &ImageRecord,
) -> Result<()> {
    let slot = slots.get_mut(index).ok_or_else(|| {
        Error::validation(
            "slot",
            format!(
                "{} slot {} exceeds set capacity",
                record.region, record.slot
            ),
        )
    })?;
    if slot.is_some() {
        return Err(Error::Structure(format!(
            "two records map to {} slot {}",
            record.region, record.slot
        )));
    }
    *slot = Some(image);
    Ok(())
}

/// Load, resize, normalize and place one visit's records for `region`.
pub fn assemble_region_set(
    manifest: &DatasetManifest,
    records: &[&ImageRecord],
    region: Region,
    mode: AssemblyMode,
    target_size: (usize, usize),
) -> Result<RegionalImageSet> {
    let capacity = mode.capacity(region);
    let (th, tw) = target_size;
    if records.len() > capacity {
        return Err(Error::validation(
            "records",
            format!(
                "{} records for {region} exceed capacity {capacity}",
                records.len()
            ),
        ));
    }
    let visits: HashSet<(&str, &str)> = records
        .iter()
        .map(|r| (r.patient_id.as_str(), r.visit_id.as_str()))
        .collect();
    if visits.len() > 1 || records.iter().any(|r| r.region != region) {
        return Err(Error::Structure(format!(
            "records for one {region} set span several visits or regions"
        )));
    }
    let mut slots: Vec<Option<Array3<f32>>> = vec![None; capacity];
    for record in records {
        let path = manifest.resolve(record);
        let raw = rgb_to_array(&load_rgb(&path)?);
        let x = normalize_image(raw.view())?;
        match (mode, record.crop) {
            (AssemblyMode::LowRes, None) => place(
                &mut slots,
                record.slot,
                resize_bilinear(x.view(), th, tw),
                record,
            )?,
            (AssemblyMode::LowRes, Some(_)) => {
                return Err(Error::validation(
                    "crop",
                    format!("{} has a crop index but mode is low_res", path.display()),
                ))
            }
            (AssemblyMode::FourCrop, Some(c)) => place(
                &mut slots,
                record.slot * 4 + usize::from(c),
                resize_bilinear(x.view(), th, tw),
                record,
            )?,
            (AssemblyMode::FourCrop, None) => {
                let big = resize_bilinear(x.view(), th * 2, tw * 2);
                for (c, crop) in four_crop(big.view())?.into_iter().enumerate() {
                    place(&mut slots, record.slot * 4 + c, crop, record)?;
                }
            }
        }
    }
    let valid_mask = slots.iter().map(Option::is_some).collect();
    let images = slots
        .into_iter()
        .map(|s| s.unwrap_or_else(|| Array3::zeros((3, th, tw))))
        .collect();
    RegionalImageSet::new(region, images, valid_mask)
}

/// One visit's model input plus its labels.
#[derive(Debug, Clone)]
pub struct VisitSample {
    pub patient_id: String,
    pub visit_id: String,
    pub region_sets: PerRegion<RegionalImageSet>,
    pub labels: LabelBlock,
    pub truth_components: Option<PerRegion<SeverityComponents>>,
}

impl VisitSample {
    pub fn key(&self) -> String {
        super::manifest::visit_key(&self.patient_id, &self.visit_id)
    }
}

/// Assemble every labeled visit in canonical key order.
pub fn load_visits(
    manifest: &DatasetManifest,
    mode: AssemblyMode,
    target_size: (usize, usize),
) -> Result<Vec<VisitSample>> {
    manifest
        .labels
        .iter()
        .map(|(key, labels)| {
            let (patient, visit) = parse_visit_key(key)?;
            load_visit(manifest, patient, visit, *labels, mode, target_size)
        })
        .collect()
}

pub fn load_visit(
    manifest: &DatasetManifest,
    patient_id: &str,
    visit_id: &str,
    labels: LabelBlock,
    mode: AssemblyMode,
    target_size: (usize, usize),
) -> Result<VisitSample> {
    let mut sets = Vec::with_capacity(4);
    for region in Region::ALL {
        let records: Vec<&ImageRecord> =
            manifest.records_for(patient_id, visit_id, region).collect();
        sets.push(assemble_region_set(
            manifest,
            &records,
            region,
            mode,
            target_size,
        )?);
    }
    let region_sets = PerRegion(sets.try_into().expect("four regions"));
    let key = super::manifest::visit_key(patient_id, visit_id);
    let truth_components = manifest
        .components
        .as_ref()
        .and_then(|c| c.get(&key))
        .and_then(|block| {
            let mut out = PerRegion([SeverityComponents::default(); 4]);
            for region in Region::ALL {
                out[region] = *block.get(&region)?;
            }
            Some(out)
        });
    Ok(VisitSample {
        patient_id: patient_id.to_string(),
        visit_id: visit_id.to_string(),
        region_sets,
        labels,
        truth_components,
    })
}
