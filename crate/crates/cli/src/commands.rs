use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use psonet_core::dataio::image::{load_rgb, save_rgb};
use psonet_core::dataio::manifest::{parse_visit_key, visit_key, with_absolute_paths};
use psonet_core::dataio::{
    generate_synthetic_dataset, load_manifest, load_visits, save_manifest, split_by_patient,
    AssemblyMode, DatasetManifest, ImageRecord, LabelBlock, VisitSample,
};
use psonet_core::interpret::{explain_set, overlay, write_overlay, GradRamOptions, MapSource};
use psonet_core::metrics::{build_report, read_score_csv, CiMethod, MetricsReport, ScoreTable};
use psonet_core::nnet::{load_checkpoint, save_checkpoint, Checkpoint, PsoNetParams};
use psonet_core::pasi::Region;
use psonet_core::train::{fit, predict, write_metrics_csv, TrainState, VisitPrediction};
use psonet_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// The configured manifest, else `<out>/manifest.json` when present.
fn manifest_path(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.data.manifest {
        return Ok(p.clone());
    }
    let fallback = cfg.out.join("manifest.json");
    if fallback.is_file() {
        return Ok(fallback);
    }
    Err(Error::validation(
        "data.manifest",
        format!(
            "no dataset manifest given and {} does not exist",
            fallback.display()
        ),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub patients: usize,
    pub visits: usize,
    pub images: usize,
    pub total_mean: f64,
    pub total_median: f64,
    pub total_max: f64,
    /// Visits whose total exceeds the sampling threshold.
    pub severe_visits: usize,
}

pub fn summarize(manifest: &DatasetManifest, threshold: f64) -> DatasetSummary {
    let mut totals: Vec<f64> = manifest.labels.values().filter_map(|l| l.total).collect();
    totals.sort_by(f64::total_cmp);
    let n = totals.len().max(1) as f64;
    DatasetSummary {
        patients: manifest.patients.len(),
        visits: manifest.labels.len(),
        images: manifest.records.len(),
        total_mean: totals.iter().sum::<f64>() / n,
        total_median: if totals.is_empty() {
            0.0
        } else {
            psonet_core::interpret::percentile(&totals, 0.5)
        },
        total_max: totals.last().copied().unwrap_or(0.0),
        severe_visits: totals.iter().filter(|&&t| t > threshold).count(),
    }
}

/// Generate a synthetic dataset into the run directory. Returns the
/// manifest path.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let out = &cfg.out;
    let manifest = generate_synthetic_dataset(&cfg.synth, out)?;
    cfg.echo_into(out)?;
    let summary = summarize(&manifest, cfg.train.sampling_threshold);
    println!(
        "synthesized {} patients, {} visits, {} images; total PASI mean {:.2} median {:.2} max {:.2}; {} visits above {}",
        summary.patients,
        summary.visits,
        summary.images,
        summary.total_mean,
        summary.total_median,
        summary.total_max,
        summary.severe_visits,
        cfg.train.sampling_threshold
    );
    Ok(out.join("manifest.json"))
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub manifest: PathBuf,
    pub best: PathBuf,
    pub state: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
}

fn best_checkpoint(state: &TrainState, mode: AssemblyMode) -> Checkpoint {
    let mut ckpt = state.best_checkpoint();
    ckpt.set_meta("mode", &mode);
    ckpt
}

/// Split, weight, fit. With `resume`, continues from `state.ckpt` in the
/// run directory when it exists.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainArtifacts> {
    let out = cfg.out.clone();
    let source = load_manifest(&manifest_path(cfg)?)?;
    let splits = split_by_patient(&source, cfg.ratios(), cfg.seed)?;
    cfg.echo_into(&out)?;
    let artifacts = TrainArtifacts {
        manifest: out.join("manifest.json"),
        best: out.join("best.ckpt"),
        state: out.join("state.ckpt"),
        metrics: out.join("metrics.csv"),
        config: out.join("config.toml"),
    };
    save_manifest(&with_absolute_paths(&splits.annotated), &artifacts.manifest)?;

    let size = cfg.input_size();
    let train = load_visits(&splits.train, cfg.train.mode, size)?;
    let val = load_visits(&splits.val, cfg.train.mode, size)?;
    log::info!(
        "{} training and {} validation visits",
        train.len(),
        val.len()
    );

    let resume_state = if resume && artifacts.state.exists() {
        let state = TrainState::from_checkpoint(&load_checkpoint(&artifacts.state)?)?;
        log::info!("resuming after epoch {}", state.epoch);
        Some(state)
    } else {
        None
    };
    let outcome = fit(
        &cfg.model,
        &train,
        &val,
        &cfg.train,
        resume_state,
        |state| {
            save_checkpoint(&artifacts.state, &state.to_checkpoint())?;
            save_checkpoint(&artifacts.best, &best_checkpoint(state, cfg.train.mode))?;
            write_metrics_csv(&artifacts.metrics, &state.log)
        },
    )?;
    save_checkpoint(&artifacts.state, &outcome.state.to_checkpoint())?;
    save_checkpoint(
        &artifacts.best,
        &best_checkpoint(&outcome.state, cfg.train.mode),
    )?;
    write_metrics_csv(&artifacts.metrics, &outcome.log)?;
    match (outcome.state.best_epoch, outcome.state.best_val_mae) {
        (Some(e), Some(m)) => println!("best epoch {e} with validation MAE {m:.4}"),
        _ => println!("no epochs run; wrote initial parameters"),
    }
    Ok(artifacts)
}

/// Parameters and assembly mode stored in a checkpoint.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<(PsoNetParams<f32>, AssemblyMode)> {
    let ckpt = load_checkpoint(path)?;
    let params = ckpt.params("")?;
    let mode = ckpt.meta("mode")?.unwrap_or(cfg.train.mode);
    Ok((params, mode))
}

fn visits_for_eval(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<DatasetManifest> {
    if manifest.split.is_some() {
        manifest.split_subset(cfg.eval.split)
    } else {
        log::warn!("manifest has no split; evaluating every labeled visit");
        Ok(manifest.clone())
    }
}

fn input_size_of(params: &PsoNetParams<f32>) -> (usize, usize) {
    let [h, w] = params.config.encoder.input_size;
    (h, w)
}

/// Score the evaluation split and compare with the rater tables.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let (params, mode) = load_model(checkpoint, cfg)?;
    let manifest = visits_for_eval(&load_manifest(&manifest_path(cfg)?)?, cfg)?;
    let visits = load_visits(&manifest, mode, input_size_of(&params))?;
    let predictions: Vec<VisitPrediction> = visits
        .iter()
        .map(|v| predict(&params, v))
        .collect::<Result<_>>()?;

    let model: ScoreTable = predictions
        .iter()
        .map(|p| (p.key.clone(), p.total))
        .collect();
    let mut raters = Vec::new();
    if cfg.eval.truth_as_rater {
        let truth = visits
            .iter()
            .map(|v| {
                v.labels.total.map(|t| (v.key(), t)).ok_or_else(|| {
                    Error::Structure(format!("visit {} has no total label", v.key()))
                })
            })
            .collect::<Result<ScoreTable>>()?;
        raters.push(("truth".to_string(), truth));
    }
    for r in &cfg.eval.raters {
        raters.push((r.name.clone(), read_score_csv(&r.path)?));
    }
    if raters.is_empty() {
        return Err(Error::validation(
            "eval.raters",
            "no rater tables; add one or set truth_as_rater",
        ));
    }
    let method = if cfg.eval.bootstrap {
        CiMethod::Bootstrap {
            resamples: cfg.eval.bootstrap_resamples,
            seed: cfg.seed,
        }
    } else {
        CiMethod::FDistribution
    };
    let mut report = build_report(&model, &raters, cfg.eval.confidence, method)?;
    report.config = serde_json::to_value(cfg).expect("config serializes");

    let out = &cfg.out;
    cfg.echo_into(out)?;
    write_predictions(&out.join("predictions.csv"), &predictions)?;
    write_json(&out.join("report.json"), &report)?;
    let table = report.render_table();
    std::fs::write(out.join("report.txt"), &table)
        .map_err(|e| Error::io(out.join("report.txt"), e))?;
    print!("{table}");
    Ok(report)
}

fn write_predictions(path: &Path, predictions: &[VisitPrediction]) -> Result<()> {
    let mut text = String::from("visit,HN,UE,LE,TR,total\n");
    for p in predictions {
        let r = &p.regional;
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.key,
            r[Region::HeadNeck],
            r[Region::UpperExtremities],
            r[Region::LowerExtremities],
            r[Region::Trunk],
            p.total
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Ranking plus the written overlay files of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionExplanation {
    pub region: Region,
    pub score: f64,
    /// `(slot, attention weight)` in rank order.
    pub ranking: Vec<(usize, f64)>,
    pub overlays: Vec<PathBuf>,
}

/// The photo behind a slot, cropped to the quadrant in four-crop mode.
fn display_image(
    manifest: &DatasetManifest,
    records: &[&ImageRecord],
    slot: usize,
    mode: AssemblyMode,
) -> Result<image::RgbImage> {
    let (photo_slot, quadrant) = match mode {
        AssemblyMode::LowRes => (slot, None),
        AssemblyMode::FourCrop => (slot / 4, Some(slot % 4)),
    };
    let record = records
        .iter()
        .find(|r| match (r.crop, quadrant) {
            (Some(c), Some(q)) => r.slot == photo_slot && usize::from(c) == q,
            _ => r.slot == photo_slot,
        })
        .ok_or_else(|| Error::Structure(format!("no photo for slot {slot}")))?;
    let img = load_rgb(&manifest.resolve(record))?;
    match (quadrant, record.crop) {
        (Some(q), None) => {
            let (w, h) = img.dimensions();
            let (hw, hh) = (w / 2, h / 2);
            let (x, y) = ((q as u32 % 2) * hw, (q as u32 / 2) * hh);
            Ok(image::imageops::crop_imm(&img, x, y, hw, hh).to_image())
        }
        _ => Ok(img),
    }
}

/// Grad-RAM overlays for the top-ranked images of one visit. `region`
/// `None` loops over all four regions.
pub fn cmd_explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    visit: &str,
    region: Option<Region>,
) -> Result<Vec<RegionExplanation>> {
    let (params, mode) = load_model(checkpoint, cfg)?;
    let manifest = load_manifest(&manifest_path(cfg)?)?;
    let (patient_id, visit_id) = parse_visit_key(visit)?;
    let labels = manifest.labels.get(visit).copied().or_else(|| {
        manifest
            .records
            .iter()
            .any(|r| r.patient_id == patient_id && r.visit_id == visit_id)
            .then(LabelBlock::default)
    });
    let labels =
        labels.ok_or_else(|| Error::validation("visit", format!("unknown visit {visit}")))?;
    let sample = psonet_core::dataio::regionset::load_visit(
        &manifest,
        patient_id,
        visit_id,
        labels,
        mode,
        input_size_of(&params),
    )?;
    let regions: Vec<Region> = region.map_or_else(|| Region::ALL.to_vec(), |r| vec![r]);
    let options = GradRamOptions {
        signed: cfg.explain.signed,
    };
    let visit_dir = cfg
        .out
        .join("explain")
        .join(format!("{patient_id}_{visit_id}"));
    let mut out = Vec::new();
    for region in regions {
        let set = &sample.region_sets[region];
        let source = MapSource {
            patient_id: patient_id.to_string(),
            visit_id: visit_id.to_string(),
            region: Some(region),
            slot: 0,
        };
        let model = &params.regions[region];
        let explanation = explain_set(set, model, cfg.explain.top_k, options, &source, None)?;
        let score = {
            let fwd = model.forward(set)?;
            f64::from(psonet_core::nnet::model::clamp_score(fwd.raw))
        };
        let dir = visit_dir.join(region.code());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let records: Vec<&ImageRecord> =
            manifest.records_for(patient_id, visit_id, region).collect();
        let mut overlays = Vec::new();
        for (rank, map) in explanation.maps.iter().enumerate() {
            let photo = display_image(&manifest, &records, map.source.slot, mode)?;
            let rendered = overlay(&photo, &map.grid, cfg.explain.alpha)?;
            let path = dir.join(format!(
                "rank{:02}_slot{:03}.png",
                rank + 1,
                map.source.slot
            ));
            write_overlay(&path, &rendered, map)?;
            overlays.push(path);
        }
        let entry = RegionExplanation {
            region,
            score,
            ranking: explanation.ranking.0.clone(),
            overlays,
        };
        write_json(&dir.join("ranking.json"), &entry)?;
        out.push(entry);
    }
    cfg.echo_into(&cfg.out)?;
    println!(
        "wrote {} overlays under {}",
        out.iter().map(|e| e.overlays.len()).sum::<usize>(),
        visit_dir.display()
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub regional: BTreeMap<Region, f64>,
    pub total: f64,
    pub images: BTreeMap<Region, usize>,
}

/// Build a manifest for `<dir>/{HN,UE,LE,TR}/*.png`, slots in file-name order.
pub fn directory_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        root: dir.to_path_buf(),
        patients: vec!["input".into()],
        ..Default::default()
    };
    for region in Region::ALL {
        let sub = dir.join(region.code());
        let mut files: Vec<PathBuf> = match std::fs::read_dir(&sub) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        files.sort();
        if files.is_empty() {
            return Err(Error::Structure(format!(
                "{region}: no PNG images in {}; every region needs at least one photo for attention pooling",
                sub.display()
            )));
        }
        if files.len() > region.image_count() {
            return Err(Error::validation(
                region.code(),
                format!(
                    "{} images in {}, at most {} allowed",
                    files.len(),
                    sub.display(),
                    region.image_count()
                ),
            ));
        }
        for (slot, path) in files.into_iter().enumerate() {
            manifest.records.push(ImageRecord {
                path,
                patient_id: "input".into(),
                visit_id: "visit".into(),
                region,
                slot,
                crop: None,
            });
        }
    }
    manifest
        .labels
        .insert(visit_key("input", "visit"), LabelBlock::default());
    Ok(manifest)
}

/// Score one visit directory.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<InferResult> {
    let (params, mode) = load_model(checkpoint, cfg)?;
    let manifest = directory_manifest(dir)?;
    let sample: VisitSample = psonet_core::dataio::regionset::load_visit(
        &manifest,
        "input",
        "visit",
        LabelBlock::default(),
        mode,
        input_size_of(&params),
    )?;
    let p = predict(&params, &sample)?;
    let result = InferResult {
        regional: Region::ALL.iter().map(|&r| (r, p.regional[r])).collect(),
        total: p.total,
        images: Region::ALL
            .iter()
            .map(|&r| (r, manifest.records_for("input", "visit", r).count()))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&result).expect("serializable");
    println!("{text}");
    Ok(result)
}

/// Copy a visit's photos from a manifest into the inference layout.
pub fn export_visit(manifest: &DatasetManifest, visit: &str, dir: &Path) -> Result<()> {
    let (patient_id, visit_id) = parse_visit_key(visit)?;
    for region in Region::ALL {
        for r in manifest.records_for(patient_id, visit_id, region) {
            let img = load_rgb(&manifest.resolve(r))?;
            save_rgb(
                &img,
                &dir.join(region.code()).join(format!("{:02}.png", r.slot)),
            )?;
        }
    }
    Ok(())
}
