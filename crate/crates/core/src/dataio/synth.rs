//! Procedural lesion images with ground truth known by construction.
//!
//! Each region of a visit gets three severity levels (redness, relief,
//! scale speckle) and a set of elliptical lesions scattered over its
//! photos. The area sub-score comes from the exact lesion pixel coverage,
//! so every label passes through the PASI arithmetic without estimation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::save_rgb;
use super::manifest::{save_manifest, visit_key, DatasetManifest, ImageRecord, LabelBlock};
use crate::error::{Error, Result};
use crate::pasi::{area_fraction_to_score, regional_pasi, PerRegion, Region, SeverityComponents};

/// Inclusive lesion-count ranges per region (lesions per region set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionCounts {
    #[serde(rename = "HN")]
    pub head_neck: [usize; 2],
    #[serde(rename = "UE")]
    pub upper_extremities: [usize; 2],
    #[serde(rename = "LE")]
    pub lower_extremities: [usize; 2],
    #[serde(rename = "TR")]
    pub trunk: [usize; 2],
}

impl LesionCounts {
    pub fn get(&self, region: Region) -> [usize; 2] {
        match region {
            Region::HeadNeck => self.head_neck,
            Region::UpperExtremities => self.upper_extremities,
            Region::LowerExtremities => self.lower_extremities,
            Region::Trunk => self.trunk,
        }
    }

    pub fn uniform(range: [usize; 2]) -> Self {
        LesionCounts {
            head_neck: range,
            upper_extremities: range,
            lower_extremities: range,
            trunk: range,
        }
    }
}

impl Default for LesionCounts {
    fn default() -> Self {
        // Roughly 0..3 lesions per photo.
        LesionCounts {
            head_neck: [0, 30],
            upper_extremities: [0, 45],
            lower_extremities: [0, 32],
            trunk: [0, 25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub patients: usize,
    /// Inclusive range of visits per patient.
    pub visits_per_patient: [usize; 2],
    /// `[height, width]` of every generated photo.
    pub image_size: [usize; 2],
    pub lesion_count: LesionCounts,
    /// Inclusive range of the lesion major radius, as a fraction of the
    /// shorter image side.
    pub lesion_radius: [f64; 2],
    /// Erythema proxy level range (0..=4).
    pub redness: [u8; 2],
    /// Induration proxy level range (0..=4).
    pub relief: [u8; 2],
    /// Desquamation proxy level range (0..=4).
    pub speckle: [u8; 2],
    pub skin_tones: Vec<[u8; 3]>,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            patients: 120,
            visits_per_patient: [2, 2],
            image_size: [64, 64],
            lesion_count: LesionCounts::default(),
            lesion_radius: [0.08, 0.25],
            redness: [0, 4],
            relief: [0, 4],
            speckle: [0, 4],
            skin_tones: vec![
                [241, 214, 196],
                [228, 188, 160],
                [208, 162, 128],
                [176, 126, 92],
                [132, 92, 62],
                [96, 64, 44],
            ],
            rng_seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |field: &str, lo: usize, hi: usize| {
            if lo > hi {
                Err(Error::validation(
                    field,
                    format!("empty range [{lo}, {hi}]"),
                ))
            } else {
                Ok(())
            }
        };
        if self.patients == 0 {
            return Err(Error::validation("patients", "must be at least 1"));
        }
        range(
            "visits_per_patient",
            self.visits_per_patient[0],
            self.visits_per_patient[1],
        )?;
        if self.visits_per_patient[0] == 0 {
            return Err(Error::validation(
                "visits_per_patient",
                "minimum must be at least 1",
            ));
        }
        if self.image_size.iter().any(|&s| s < 8) {
            return Err(Error::validation(
                "image_size",
                "sides must be at least 8 pixels",
            ));
        }
        for region in Region::ALL {
            let [lo, hi] = self.lesion_count.get(region);
            range(&format!("lesion_count.{region}"), lo, hi)?;
        }
        let [rlo, rhi] = self.lesion_radius;
        if !(rlo > 0.0 && rlo <= rhi && rhi <= 0.5) {
            return Err(Error::validation(
                "lesion_radius",
                format!("need 0 < min <= max <= 0.5, got [{rlo}, {rhi}]"),
            ));
        }
        for (field, [lo, hi]) in [
            ("redness", self.redness),
            ("relief", self.relief),
            ("speckle", self.speckle),
        ] {
            range(field, usize::from(lo), usize::from(hi))?;
            if hi > 4 {
                return Err(Error::validation(field, format!("level {hi} above 4")));
            }
        }
        if self.skin_tones.is_empty() {
            return Err(Error::validation("skin_tones", "palette is empty"));
        }
        Ok(())
    }
}

/// An elliptical lesion in pixel coordinates of one photo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub slot: usize,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Lesion {
    /// Position in the lesion's unit-disc frame, if the pixel centre is inside.
    fn local(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        (u * u + v * v <= 1.0).then_some((u, v))
    }
}

/// Appearance levels shared by every lesion of one region set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LesionLevels {
    pub redness: u8,
    pub relief: u8,
    pub speckle: u8,
}

const LESION_RED: [f64; 3] = [192.0, 38.0, 48.0];
const SCALE_WHITE: [f64; 3] = [246.0, 242.0, 236.0];

/// Truth components for a region from its levels and exact coverage.
pub fn region_truth(
    levels: LesionLevels,
    covered: usize,
    total: usize,
) -> Result<SeverityComponents> {
    let fraction = covered as f64 / total as f64;
    let area_score = area_fraction_to_score(fraction)?;
    if area_score == 0 {
        return Ok(SeverityComponents::default());
    }
    SeverityComponents::new(levels.redness, levels.relief, levels.speckle, area_score)
}

/// Render `n_images` photos of one region. Returns the photos and, per
/// photo, the lesion mask.
pub fn render_region(
    n_images: usize,
    size: (usize, usize),
    skin: [u8; 3],
    levels: LesionLevels,
    lesions: &[Lesion],
    rng: &mut ChaCha8Rng,
) -> (Vec<RgbImage>, Vec<Array2<bool>>) {
    let (h, w) = size;
    let mut images = Vec::with_capacity(n_images);
    let mut masks = Vec::with_capacity(n_images);
    for slot in 0..n_images {
        let brightness = rng.random_range(0.93..1.07);
        let base: [f64; 3] = skin.map(|c| f64::from(c) * brightness);
        let here: Vec<&Lesion> = lesions.iter().filter(|l| l.slot == slot).collect();
        let mut mask = Array2::from_elem((h, w), false);
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let mut c = base;
                // The last lesion covering a pixel decides its shading.
                if let Some((u, v)) = here.iter().rev().find_map(|l| l.local(x, y)) {
                    mask[[y, x]] = true;
                    let red = 0.18 * f64::from(levels.redness);
                    for k in 0..3 {
                        c[k] += (LESION_RED[k] - c[k]) * red;
                    }
                    // Raised plaque: lit from the top-left, darker rim.
                    let relief = f64::from(levels.relief);
                    let shade = 1.0 + 0.08 * relief * (-(u + v) / std::f64::consts::SQRT_2)
                        - 0.05 * relief * (u * u + v * v);
                    c = c.map(|v| v * shade);
                    if rng.random::<f64>() < 0.11 * f64::from(levels.speckle) {
                        for k in 0..3 {
                            c[k] += (SCALE_WHITE[k] - c[k]) * 0.85;
                        }
                    }
                }
                let px =
                    c.map(|v| (v + rng.random_range(-5.0..5.0)).round().clamp(0.0, 255.0) as u8);
                img.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        images.push(img);
        masks.push(mask);
    }
    (images, masks)
}

/// A single photo carrying one lesion, plus its mask. Used to check that
/// saliency maps land on the lesion.
pub fn render_single_lesion(
    size: (usize, usize),
    skin: [u8; 3],
    levels: LesionLevels,
    lesion: Lesion,
    seed: u64,
) -> (RgbImage, Array2<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lesion = Lesion { slot: 0, ..lesion };
    let (mut images, mut masks) = render_region(1, size, skin, levels, &[lesion], &mut rng);
    (images.remove(0), masks.remove(0))
}

fn level_in(range: [u8; 2], activity: f64, rng: &mut ChaCha8Rng) -> u8 {
    let [lo, hi] = range;
    let (lo_f, hi_f) = (f64::from(lo), f64::from(hi));
    let raw = lo_f + activity * (hi_f - lo_f) + rng.random_range(-1.0..1.0);
    raw.round().clamp(lo_f, hi_f) as u8
}

fn random_lesion(
    slot: usize,
    size: (usize, usize),
    radius: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Lesion {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let side = h.min(w);
    let r = rng.random_range(radius[0]..=radius[1]) * side;
    let ry = r * rng.random_range(0.6..=1.0);
    Lesion {
        slot,
        cx: rng.random_range(0.0..w),
        cy: rng.random_range(0.0..h),
        rx: r.max(0.75),
        ry: ry.max(0.75),
        angle: rng.random_range(0.0..PI),
    }
}

struct RegionDraw {
    images: Vec<RgbImage>,
    truth: SeverityComponents,
}

fn draw_region(
    spec: &SyntheticSpec,
    region: Region,
    activity: f64,
    skin: [u8; 3],
    rng: &mut ChaCha8Rng,
) -> Result<RegionDraw> {
    let n = region.image_count();
    let size = (spec.image_size[0], spec.image_size[1]);
    let a = (activity * rng.random_range(0.6..1.4)).clamp(0.0, 1.0);
    let [lo, hi] = spec.lesion_count.get(region);
    let count = lo + (a * (hi - lo) as f64).round() as usize;
    let levels = if count == 0 {
        LesionLevels::default()
    } else {
        LesionLevels {
            redness: level_in(spec.redness, a, rng),
            relief: level_in(spec.relief, a, rng),
            speckle: level_in(spec.speckle, a, rng),
        }
    };
    let lesions: Vec<Lesion> = (0..count)
        .map(|_| {
            let slot = rng.random_range(0..n);
            random_lesion(slot, size, spec.lesion_radius, rng)
        })
        .collect();
    let (images, masks) = render_region(n, size, skin, levels, &lesions, rng);
    let covered: usize = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
    let truth = region_truth(levels, covered, n * size.0 * size.1)?;
    Ok(RegionDraw { images, truth })
}

/// Generate the whole dataset under `out_dir` and write `manifest.json`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        components: Some(BTreeMap::new()),
        ..Default::default()
    };
    for p in 0..spec.patients {
        let patient_id = format!("P{p:04}");
        let skin = spec.skin_tones[rng.random_range(0..spec.skin_tones.len())];
        // Skewed towards mild disease, like a trial population.
        let patient_activity = rng.random::<f64>().powf(1.3);
        let visits = rng.random_range(spec.visits_per_patient[0]..=spec.visits_per_patient[1]);
        for v in 0..visits {
            let visit_id = format!("V{v}");
            let activity = (patient_activity * rng.random_range(0.7..1.3)).clamp(0.0, 1.0);
            let mut truth = PerRegion([SeverityComponents::default(); 4]);
            let mut regional = PerRegion([0.0; 4]);
            for region in Region::ALL {
                let draw = draw_region(spec, region, activity, skin, &mut rng)?;
                for (slot, img) in draw.images.iter().enumerate() {
                    let rel = PathBuf::from("images")
                        .join(&patient_id)
                        .join(&visit_id)
                        .join(region.code())
                        .join(format!("{slot:02}.png"));
                    save_rgb(img, &out_dir.join(&rel))?;
                    manifest.records.push(ImageRecord {
                        path: rel,
                        patient_id: patient_id.clone(),
                        visit_id: visit_id.clone(),
                        region,
                        slot,
                        crop: None,
                    });
                }
                regional[region] = regional_pasi(&draw.truth, region)?.value;
                truth[region] = draw.truth;
            }
            let key = visit_key(&patient_id, &visit_id);
            manifest
                .labels
                .insert(key.clone(), LabelBlock::from_regions(&regional)?);
            if let Some(c) = manifest.components.as_mut() {
                c.insert(key, truth.iter().map(|(r, c)| (r, *c)).collect());
            }
        }
        manifest.patients.push(patient_id);
    }
    manifest.validate()?;
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
