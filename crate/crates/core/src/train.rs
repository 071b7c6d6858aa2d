//! MAE-loss training loop with AdamW, weighted visit sampling, per-epoch
//! validation and exactly restorable state.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::sampling::DEFAULT_HIGH_PASI_THRESHOLD;
use crate::dataio::{
    compute_sampling_weights, AssemblyMode, LabelBlock, SamplingWeights, VisitSample,
};
use crate::error::{Error, Result};
use crate::nnet::model::clamp_score;
use crate::nnet::{init_params, Checkpoint, ModelConfig, PsoNetParams, RegionalForward};
use crate::pasi::{PerRegion, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// Sum of the four regional MAE losses.
    #[default]
    PerRegion,
    /// MAE of the weighted total only.
    Absolute,
}

impl std::str::FromStr for TrainTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_region" => Ok(TrainTarget::PerRegion),
            "absolute" => Ok(TrainTarget::Absolute),
            other => Err(Error::validation(
                "target",
                format!("{other:?} is not one of per_region, absolute"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Visits per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: AssemblyMode,
    pub seed: u64,
    pub target: TrainTarget,
    pub weighted_sampling: bool,
    /// Total PASI above which a visit counts as severe for sampling.
    pub sampling_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::full()
    }
}

impl TrainConfig {
    /// Full-scale recipe for pretrained 224x224 encoders.
    pub fn full() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 100,
            mode: AssemblyMode::LowRes,
            seed: 0,
            target: TrainTarget::PerRegion,
            weighted_sampling: true,
            sampling_threshold: DEFAULT_HIGH_PASI_THRESHOLD,
        }
    }

    /// Desk-scale recipe for randomly initialized 64x64 tiny encoders.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 30,
            ..TrainConfig::full()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(TrainConfig::full()),
            "desk" => Ok(TrainConfig::desk()),
            other => Err(Error::validation(
                "profile",
                format!("{other:?} is not one of full, desk"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::validation(
                "learning_rate",
                "must be finite and non-negative",
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation(
                "weight_decay",
                "must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if !self.sampling_threshold.is_finite() {
            return Err(Error::validation("sampling_threshold", "must be finite"));
        }
        Ok(())
    }
}

/// Mean absolute error.
pub fn mae_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Structure("MAE of empty series".into()));
    }
    if predictions.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MAE input".into()));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Adaptive moment estimation with decoupled weight decay
/// (`p <- p - lr*wd*p` before the moment step).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: PsoNetParams<f32>,
    pub v: PsoNetParams<f32>,
}

impl AdamW {
    pub fn new(params: &PsoNetParams<f32>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(
        &mut self,
        params: &mut PsoNetParams<f32>,
        grads: &PsoNetParams<f32>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let decay = (1.0 - lr * weight_decay) as f32;
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;

        let mut p_all = params.named_tensors_mut();
        let g_all = grads.named_tensors();
        let mut m_all = self.m.named_tensors_mut();
        let mut v_all = self.v.named_tensors_mut();
        for (((p, g), m), v) in p_all
            .iter_mut()
            .zip(&g_all)
            .zip(m_all.iter_mut())
            .zip(v_all.iter_mut())
        {
            let (p, g, m, v) = (&mut p.1, &g.1, &mut m.1, &mut v.1);
            ndarray::Zip::from(&mut **p)
                .and(&**g)
                .and(&mut **m)
                .and(&mut **v)
                .for_each(|p, &g, m, v| {
                    *p *= decay;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let denom = v.sqrt() / bc2_sqrt + eps;
                    *p -= step_size * *m / denom;
                });
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: PsoNetParams<f32>,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: PsoNetParams<f32>,
    pub seed: u64,
    pub log: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    step: u64,
    best_val_mae: Option<f64>,
    best_epoch: Option<usize>,
    seed: u64,
    log: Vec<EpochMetrics>,
}

impl TrainState {
    /// Fresh state. Every regional head bias starts at the mean regional
    /// training label so early steps do not have to learn the offset.
    pub fn new(model: &ModelConfig, config: &TrainConfig, train: &[VisitSample]) -> Result<Self> {
        let mut params: PsoNetParams<f32> = init_params(model, config.seed)?;
        let labels: Vec<f64> = train
            .iter()
            .filter_map(|v| v.labels.all_regional())
            .flat_map(|r| r.0)
            .collect();
        if !labels.is_empty() {
            let mean = labels.iter().sum::<f64>() / labels.len() as f64;
            for (_, m) in params.regions.iter_mut() {
                m.head.bias[0] = mean as f32;
            }
        }
        Ok(TrainState {
            optimizer: AdamW::new(&params),
            best_params: params.clone(),
            params,
            epoch: 0,
            best_val_mae: None,
            best_epoch: None,
            seed: config.seed,
            log: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(&self.params);
        ckpt.insert_params("adam.m.", &self.optimizer.m);
        ckpt.insert_params("adam.v.", &self.optimizer.v);
        ckpt.insert_params("best.", &self.best_params);
        ckpt.set_meta(
            "train",
            &StateHeader {
                epoch: self.epoch,
                step: self.optimizer.step,
                best_val_mae: self.best_val_mae,
                best_epoch: self.best_epoch,
                seed: self.seed,
                log: self.log.clone(),
            },
        );
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let header: StateHeader = ckpt
            .meta("train")?
            .ok_or_else(|| Error::Checkpoint("not a training-state checkpoint".into()))?;
        let params = ckpt.params("")?;
        let mut optimizer = AdamW::new(&params);
        optimizer.step = header.step;
        ckpt.load_params_into("adam.m.", &mut optimizer.m)?;
        ckpt.load_params_into("adam.v.", &mut optimizer.v)?;
        let best_params = ckpt.params("best.")?;
        Ok(TrainState {
            params,
            optimizer,
            epoch: header.epoch,
            best_val_mae: header.best_val_mae,
            best_epoch: header.best_epoch,
            best_params,
            seed: header.seed,
            log: header.log,
        })
    }

    /// Checkpoint of the best parameters alone.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(&self.best_params);
        ckpt.set_meta("epoch", &self.best_epoch);
        ckpt.set_meta("val_mae", &self.best_val_mae);
        ckpt
    }
}

/// Per-epoch RNG, derived from the run seed and the epoch index only so a
/// resumed run draws the same batches.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn check_visits(visits: &[VisitSample], config: &TrainConfig, what: &str) -> Result<()> {
    for v in visits {
        for (region, set) in v.region_sets.iter() {
            let cap = config.mode.capacity(region);
            if set.len() != cap {
                return Err(Error::validation(
                    "mode",
                    format!(
                        "{what} visit {} has {} {region} slots, {:?} expects {cap}",
                        v.key(),
                        set.len(),
                        config.mode
                    ),
                ));
            }
        }
        match config.target {
            TrainTarget::PerRegion if v.labels.all_regional().is_none() => {
                return Err(Error::Structure(format!(
                    "{what} visit {} lacks regional labels",
                    v.key()
                )))
            }
            TrainTarget::Absolute if total_label(&v.labels).is_none() => {
                return Err(Error::Structure(format!(
                    "{what} visit {} lacks a total label",
                    v.key()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn total_label(labels: &LabelBlock) -> Option<f64> {
    labels.total.or_else(|| {
        labels
            .all_regional()
            .and_then(|r| crate::pasi::total_from_regions(&r).ok())
            .map(|t| t.value)
    })
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One optimizer step on `batch`. Returns the batch loss (mean over visits
/// of the per-visit loss) and the summed absolute errors with their count.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&VisitSample],
    config: &TrainConfig,
) -> Result<(f64, f64, usize)> {
    if batch.is_empty() {
        return Err(Error::Structure("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let mut grads = state.params.zeros_like();
    let mut loss = 0.0f64;
    let mut abs_err = 0.0f64;
    let mut count = 0usize;
    for visit in batch {
        let mut fwds: Vec<RegionalForward<f32>> = Vec::with_capacity(4);
        for region in Region::ALL {
            fwds.push(state.params.regions[region].forward(&visit.region_sets[region])?);
        }
        let d_raw: [f32; 4] = match config.target {
            TrainTarget::PerRegion => {
                let labels = visit.labels.all_regional().expect("checked");
                let mut d = [0.0; 4];
                for region in Region::ALL {
                    let err = fwds[region.index()].raw - labels[region] as f32;
                    loss += f64::from(err.abs());
                    abs_err += f64::from(err.abs());
                    count += 1;
                    d[region.index()] = sign(err) * scale;
                }
                d
            }
            TrainTarget::Absolute => {
                let target = total_label(&visit.labels).expect("checked") as f32;
                let total: f32 = Region::ALL
                    .iter()
                    .map(|r| r.weight() as f32 * fwds[r.index()].raw)
                    .sum();
                let err = total - target;
                loss += f64::from(err.abs());
                abs_err += f64::from(err.abs());
                count += 1;
                Region::ALL.map(|r| r.weight() as f32 * sign(err) * scale)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} on visit {}",
                state.optimizer.step + 1,
                visit.key()
            )));
        }
        for region in Region::ALL {
            let model = &state.params.regions[region];
            model.backward(
                &fwds[region.index()],
                d_raw[region.index()],
                Some(&mut grads.regions[region]),
                false,
            );
        }
    }
    if state.params.config.shared_encoder {
        tie_encoder_grads(&mut grads);
    }
    for (name, g) in grads.named_tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at step {}",
                state.optimizer.step + 1
            )));
        }
    }
    state.optimizer.update(
        &mut state.params,
        &grads,
        config.learning_rate,
        config.weight_decay,
    );
    Ok((loss / batch.len() as f64, abs_err, count))
}

/// Sum the regional encoder gradients and hand the sum to every region.
fn tie_encoder_grads(grads: &mut PsoNetParams<f32>) {
    let mut total = grads.regions[Region::HeadNeck].encoder.clone();
    for region in &Region::ALL[1..] {
        let src = &grads.regions[*region].encoder;
        total.stem.weight += &src.stem.weight;
        total.stem.bias += &src.stem.bias;
        for (d, s) in total.stages.iter_mut().zip(&src.stages) {
            d.weight += &s.weight;
            d.bias += &s.bias;
        }
    }
    for (_, m) in grads.regions.iter_mut() {
        m.encoder = total.clone();
    }
}

/// Summary of one pass over the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// Mean batch loss.
    pub loss: f64,
    /// Mean absolute error of the raw outputs over everything drawn.
    pub train_mae: f64,
}

/// One epoch: draw `train.len()` visits with the sampling weights, step on
/// consecutive batches, advance the epoch counter.
pub fn train_epoch(
    state: &mut TrainState,
    train: &[VisitSample],
    weights: &SamplingWeights,
    config: &TrainConfig,
) -> Result<EpochSummary> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Structure("no training visits".into()));
    }
    if weights.weights.len() != train.len() {
        return Err(Error::Shape(format!(
            "{} sampling weights for {} visits",
            weights.weights.len(),
            train.len()
        )));
    }
    check_visits(train, config, "training")?;
    let mut rng = epoch_rng(state.seed, state.epoch);
    let order = weights.sample(train.len(), &mut rng)?;
    let (mut loss, mut abs_err, mut count, mut batches) = (0.0, 0.0, 0usize, 0usize);
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<&VisitSample> = chunk.iter().map(|&i| &train[i]).collect();
        let (l, e, c) = train_step(state, &batch, config).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {})", state.epoch + 1)),
            other => other,
        })?;
        loss += l;
        abs_err += e;
        count += c;
        batches += 1;
    }
    state.epoch += 1;
    Ok(EpochSummary {
        loss: loss / batches as f64,
        train_mae: abs_err / count as f64,
    })
}

/// Model output for one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitPrediction {
    pub key: String,
    /// Clamped regional scores.
    pub regional: PerRegion<f64>,
    /// Weighted combination of `regional`.
    pub total: f64,
    /// Attention weight of every slot.
    pub attention: PerRegion<Vec<f64>>,
}

pub fn predict(params: &PsoNetParams<f32>, visit: &VisitSample) -> Result<VisitPrediction> {
    let mut regional = PerRegion([0.0; 4]);
    let mut attention = PerRegion::from_fn(|_| Vec::new());
    for region in Region::ALL {
        let fwd = params.regions[region].forward(&visit.region_sets[region])?;
        regional[region] = f64::from(clamp_score(fwd.raw));
        attention[region] = fwd
            .attention
            .weights
            .iter()
            .map(|&w| f64::from(w))
            .collect();
    }
    let total = crate::pasi::total_from_regions(&regional)?.value;
    Ok(VisitPrediction {
        key: visit.key(),
        regional,
        total,
        attention,
    })
}

pub fn predict_all(
    params: &PsoNetParams<f32>,
    visits: &[VisitSample],
) -> Result<Vec<VisitPrediction>> {
    visits.iter().map(|v| predict(params, v)).collect()
}

/// Validation MAE of clamped predictions: per (visit, region) for the
/// per-region target, on the total for the absolute target.
pub fn validation_mae(
    params: &PsoNetParams<f32>,
    visits: &[VisitSample],
    target: TrainTarget,
) -> Result<f64> {
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    for visit in visits {
        let p = predict(params, visit)?;
        match target {
            TrainTarget::PerRegion => {
                let labels = visit.labels.all_regional().ok_or_else(|| {
                    Error::Structure(format!("visit {} lacks regional labels", visit.key()))
                })?;
                preds.extend(p.regional.0);
                truth.extend(labels.0);
            }
            TrainTarget::Absolute => {
                let t = total_label(&visit.labels).ok_or_else(|| {
                    Error::Structure(format!("visit {} lacks a total label", visit.key()))
                })?;
                preds.push(p.total);
                truth.push(t);
            }
        }
    }
    mae_loss(&preds, &truth)
}

/// MAE on `eval` of always predicting the training-label mean (per region,
/// or of the total for the absolute target).
pub fn mean_predictor_mae(
    train: &[VisitSample],
    eval: &[VisitSample],
    target: TrainTarget,
) -> Result<f64> {
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    match target {
        TrainTarget::PerRegion => {
            let train_labels: Vec<PerRegion<f64>> = train
                .iter()
                .filter_map(|v| v.labels.all_regional())
                .collect();
            if train_labels.is_empty() {
                return Err(Error::Structure("no regional training labels".into()));
            }
            let n = train_labels.len() as f64;
            let means = PerRegion::from_fn(|r| train_labels.iter().map(|l| l[r]).sum::<f64>() / n);
            for v in eval {
                if let Some(l) = v.labels.all_regional() {
                    preds.extend(means.0);
                    truth.extend(l.0);
                }
            }
        }
        TrainTarget::Absolute => {
            let totals: Vec<f64> = train
                .iter()
                .filter_map(|v| total_label(&v.labels))
                .collect();
            if totals.is_empty() {
                return Err(Error::Structure("no total training labels".into()));
            }
            let mean = totals.iter().sum::<f64>() / totals.len() as f64;
            for v in eval {
                if let Some(t) = total_label(&v.labels) {
                    preds.push(mean);
                    truth.push(t);
                }
            }
        }
    }
    mae_loss(&preds, &truth)
}

pub fn sampling_weights_for(
    train: &[VisitSample],
    config: &TrainConfig,
) -> Result<SamplingWeights> {
    if !config.weighted_sampling {
        return Ok(SamplingWeights::uniform(
            train.len(),
            config.sampling_threshold,
        ));
    }
    let totals: Vec<f64> = train
        .iter()
        .map(|v| {
            total_label(&v.labels)
                .ok_or_else(|| Error::Structure(format!("visit {} has no total label", v.key())))
        })
        .collect::<Result<_>>()?;
    let weights = compute_sampling_weights(&totals, config.sampling_threshold)?;
    if let Some(w) = &weights.warning {
        log::warn!("{w}");
    }
    Ok(weights)
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState,
    pub best: PsoNetParams<f32>,
    pub log: Vec<EpochMetrics>,
}

/// Train until `config.epochs` epochs are complete, validating after each
/// and keeping the parameters with the lowest validation MAE. Continues
/// from `resume` when given. `on_epoch` runs after every epoch, e.g. to
/// write checkpoints.
pub fn fit(
    model: &ModelConfig,
    train: &[VisitSample],
    val: &[VisitSample],
    config: &TrainConfig,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    model.validate()?;
    check_visits(train, config, "training")?;
    check_visits(val, config, "validation")?;
    let mut state = match resume {
        Some(s) => {
            if s.params.config != *model {
                return Err(Error::validation(
                    "resume",
                    "checkpoint model config differs from the requested one",
                ));
            }
            if s.seed != config.seed {
                return Err(Error::validation(
                    "resume",
                    format!("checkpoint seed {} differs from {}", s.seed, config.seed),
                ));
            }
            s
        }
        None => TrainState::new(model, config, train)?,
    };
    if state.epoch < config.epochs {
        if val.is_empty() {
            return Err(Error::Structure("no validation visits".into()));
        }
        let weights = sampling_weights_for(train, config)?;
        while state.epoch < config.epochs {
            let started = Instant::now();
            let summary = train_epoch(&mut state, train, &weights, config)?;
            let val_mae = validation_mae(&state.params, val, config.target)?;
            if state.best_val_mae.is_none_or(|b| val_mae < b) {
                state.best_val_mae = Some(val_mae);
                state.best_epoch = Some(state.epoch);
                state.best_params = state.params.clone();
            }
            state.log.push(EpochMetrics {
                epoch: state.epoch,
                train_mae: summary.train_mae,
                val_mae,
                lr: config.learning_rate,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            log::info!(
                "epoch {} train_mae {:.4} val_mae {:.4}",
                state.epoch,
                summary.train_mae,
                val_mae
            );
            on_epoch(&state)?;
        }
    }
    Ok(FitOutcome {
        best: state.best_params.clone(),
        log: state.log.clone(),
        state,
    })
}

pub fn write_metrics_csv(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in log {
        w.serialize(row)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    // Header-only file for an empty log.
    if log.is_empty() {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "epoch,train_mae,val_mae,lr,wall_seconds").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                context: path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae_loss(&[5.0], &[5.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[0.0, 10.0], &[10.0, 0.0]).unwrap(), 10.0);
        assert!(mae_loss(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae_loss(&[], &[]).is_err());
        assert!(mae_loss(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn profiles() {
        let p = TrainConfig::full();
        assert_eq!(
            (p.learning_rate, p.weight_decay, p.batch_size, p.epochs),
            (1e-6, 1e-4, 4, 100)
        );
        let d = TrainConfig::desk();
        assert_eq!((d.learning_rate, d.epochs), (1e-3, 30));
        assert!(TrainConfig::profile("fast").is_err());
    }

    #[test]
    fn epoch_streams_differ() {
        use rand::Rng;
        let a: u64 = epoch_rng(1, 0).random();
        let b: u64 = epoch_rng(1, 1).random();
        let c: u64 = epoch_rng(1, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = {
            let mut c = ModelConfig::tiny(2, 32);
            c.embed_dim = 4;
            c.attention_hidden = 2;
            c
        };
        let mut params: PsoNetParams<f32> = init_params(&cfg, 0).unwrap();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.regions[Region::Trunk].head.bias[0] = 3.0;
        grads.regions[Region::Trunk].head.weight[[0, 1]] = -0.5;
        let mut opt = AdamW::new(&params);
        opt.update(&mut params, &grads, 0.01, 0.0);
        let b = before.regions[Region::Trunk].head.bias[0];
        assert!((params.regions[Region::Trunk].head.bias[0] - (b - 0.01)).abs() < 1e-6);
        let w = before.regions[Region::Trunk].head.weight[[0, 1]];
        assert!((params.regions[Region::Trunk].head.weight[[0, 1]] - (w + 0.01)).abs() < 1e-6);
        assert_eq!(
            params.regions[Region::HeadNeck],
            before.regions[Region::HeadNeck]
        );
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut c = ModelConfig::tiny(2, 32);
        c.embed_dim = 4;
        c.attention_hidden = 2;
        let mut params: PsoNetParams<f32> = init_params(&c, 0).unwrap();
        let before = params.clone();
        let grads = params.zeros_like();
        AdamW::new(&params).update(&mut params, &grads, 0.1, 0.5);
        let w0 = before.regions[Region::Trunk].embed.weight[[1, 1]];
        let w1 = params.regions[Region::Trunk].embed.weight[[1, 1]];
        assert!((w1 - w0 * 0.95).abs() < 1e-7);
    }
}
