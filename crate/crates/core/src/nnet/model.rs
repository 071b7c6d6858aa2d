use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::{pooled_to_map_grad, Encoder, EncoderTrace, ImageFeature};
use super::layers::{as_row, gelu, gelu_grad, Linear};
use super::{checkpoint, EncoderVariant, ModelConfig, Scalar};
use crate::dataio::{RegionalImageSet, VisitSample};
use crate::error::{Error, Result};
use crate::pasi::{self, AbsolutePasi, PerRegion, Region, RegionalPasi, PASI_MAX};

/// Attention scorer: `logit = w2 . tanh(W1 e + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub hidden: Linear<F>,
    pub score: Linear<F>,
}

/// Per-image attention weights and the pooled feature of one set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<F> {
    /// Softmax weights, one per slot; masked slots are exactly zero.
    pub weights: Vec<F>,
    /// Attention-weighted sum of the valid embeddings.
    pub pooled: Array1<F>,
    /// Pre-softmax scores; masked slots are negative infinity.
    pub logits: Vec<F>,
}

/// All parameters of one region's scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalModel<F> {
    pub region: Region,
    pub encoder: Encoder<F>,
    /// 8K -> D, followed by GELU.
    pub embed: Linear<F>,
    pub attention: AttentionParams<F>,
    /// D -> 1.
    pub head: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoNetParams<F> {
    pub config: ModelConfig,
    pub regions: PerRegion<RegionalModel<F>>,
}

macro_rules! named_tensors {
    ($m:ident; $stem:ident, $s0:ident, $s1:ident, $s2:ident, $s3:ident,
     $embed:ident, $hidden:ident, $score:ident, $head:ident) => {
        vec![
            ("encoder.stem.weight", $stem.weight.$m().into_dyn()),
            ("encoder.stem.bias", $stem.bias.$m().into_dyn()),
            ("encoder.stage0.conv.weight", $s0.weight.$m().into_dyn()),
            ("encoder.stage0.conv.bias", $s0.bias.$m().into_dyn()),
            ("encoder.stage1.conv.weight", $s1.weight.$m().into_dyn()),
            ("encoder.stage1.conv.bias", $s1.bias.$m().into_dyn()),
            ("encoder.stage2.conv.weight", $s2.weight.$m().into_dyn()),
            ("encoder.stage2.conv.bias", $s2.bias.$m().into_dyn()),
            ("encoder.stage3.conv.weight", $s3.weight.$m().into_dyn()),
            ("encoder.stage3.conv.bias", $s3.bias.$m().into_dyn()),
            ("embed.weight", $embed.weight.$m().into_dyn()),
            ("embed.bias", $embed.bias.$m().into_dyn()),
            ("attention.hidden.weight", $hidden.weight.$m().into_dyn()),
            ("attention.hidden.bias", $hidden.bias.$m().into_dyn()),
            ("attention.score.weight", $score.weight.$m().into_dyn()),
            ("attention.score.bias", $score.bias.$m().into_dyn()),
            ("head.weight", $head.weight.$m().into_dyn()),
            ("head.bias", $head.bias.$m().into_dyn()),
        ]
    };
}

impl<F: Scalar> RegionalModel<F> {
    pub fn init(region: Region, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::init(config.encoder.base_width, rng);
        let feat = config.encoder.feature_dim();
        let (d, a) = (config.embed_dim, config.attention_hidden);
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let xavier = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let plain = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        RegionalModel {
            region,
            encoder,
            embed: Linear::init(feat, d, he(feat), rng),
            attention: AttentionParams {
                hidden: Linear::init(d, a, xavier(d), rng),
                score: Linear::init(a, 1, plain(a), rng),
            },
            head: Linear::init(d, 1, plain(d), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        RegionalModel {
            region: self.region,
            encoder: self.encoder.zeros_like(),
            embed: Linear::zeros(self.embed.input_dim(), self.embed.output_dim()),
            attention: AttentionParams {
                hidden: Linear::zeros(
                    self.attention.hidden.input_dim(),
                    self.attention.hidden.output_dim(),
                ),
                score: Linear::zeros(
                    self.attention.score.input_dim(),
                    self.attention.score.output_dim(),
                ),
            },
            head: Linear::zeros(self.head.input_dim(), 1),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.output_dim()
    }

    /// Parameter tensors in a fixed order, named relative to the region.
    pub fn named_tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, F>)> {
        let RegionalModel {
            encoder:
                Encoder {
                    stem,
                    stages: [s0, s1, s2, s3],
                },
            embed,
            attention: AttentionParams { hidden, score },
            head,
            ..
        } = self;
        named_tensors!(view; stem, s0, s1, s2, s3, embed, hidden, score, head)
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, F>)> {
        let RegionalModel {
            encoder:
                Encoder {
                    stem,
                    stages: [s0, s1, s2, s3],
                },
            embed,
            attention: AttentionParams { hidden, score },
            head,
            ..
        } = self;
        named_tensors!(view_mut; stem, s0, s1, s2, s3, embed, hidden, score, head)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> RegionalModel<G> {
        let mut out = RegionalModel::<G> {
            region: self.region,
            encoder: Encoder {
                stem: cast_conv(&self.encoder.stem),
                stages: [
                    cast_conv(&self.encoder.stages[0]),
                    cast_conv(&self.encoder.stages[1]),
                    cast_conv(&self.encoder.stages[2]),
                    cast_conv(&self.encoder.stages[3]),
                ],
            },
            embed: Linear::zeros(0, 0),
            attention: AttentionParams {
                hidden: Linear::zeros(0, 0),
                score: Linear::zeros(0, 0),
            },
            head: Linear::zeros(0, 0),
        };
        out.embed = cast_linear(&self.embed);
        out.attention.hidden = cast_linear(&self.attention.hidden);
        out.attention.score = cast_linear(&self.attention.score);
        out.head = cast_linear(&self.head);
        out
    }

    /// Forward pass over the valid slots of a set, keeping what backward needs.
    pub fn forward(&self, set: &RegionalImageSet<F>) -> Result<RegionalForward<F>> {
        let valid = set.valid_indices();
        if valid.is_empty() {
            return Err(Error::Structure(format!(
                "{} set has no valid images; at least one is required for attention",
                set.region
            )));
        }
        let mut encoder_traces = Vec::with_capacity(valid.len());
        let mut features = Vec::with_capacity(valid.len());
        for &slot in &valid {
            let (feature, trace) = self.encoder.forward(set.images[slot].view())?;
            encoder_traces.push(trace);
            features.push(feature);
        }
        let feat_dim = self.encoder.feature_dim();
        if self.embed.input_dim() != feat_dim {
            return Err(Error::Shape(format!(
                "embed expects width {}, encoder gives {feat_dim}",
                self.embed.input_dim()
            )));
        }
        let pooled_features =
            Array2::from_shape_fn((valid.len(), feat_dim), |(i, j)| features[i].pooled[j]);
        let embed_pre = self.embed.forward(pooled_features.view());
        let embeddings = embed_pre.mapv(gelu);
        let att = attention_forward(&self.attention, embeddings.view())?;
        let raw = self.head.forward(as_row(&att.pooled))[[0, 0]];
        if !raw.is_finite() {
            return Err(Error::NonFinite(format!("{} head output", set.region)));
        }

        let n = set.len();
        let mut weights = vec![F::zero(); n];
        let mut logits = vec![F::neg_infinity(); n];
        for (k, &slot) in valid.iter().enumerate() {
            weights[slot] = att.weights[k];
            logits[slot] = att.logits[k];
        }
        Ok(RegionalForward {
            raw,
            attention: AttentionOutput {
                weights,
                pooled: att.pooled.clone(),
                logits,
            },
            trace: RegionalTrace {
                valid,
                encoder: encoder_traces,
                features,
                pooled_features,
                embed_pre,
                embeddings,
                hidden: att.hidden,
                weights: att.weights,
            },
        })
    }

    /// Backpropagate `d_raw = dL/d(raw score)`. Parameter gradients are
    /// accumulated into `grads` when given; when `want_maps` is set, the
    /// gradients w.r.t. each valid image's final-stage map are returned in
    /// valid-slot order.
    pub fn backward(
        &self,
        fwd: &RegionalForward<F>,
        d_raw: F,
        mut grads: Option<&mut RegionalModel<F>>,
        want_maps: bool,
    ) -> Vec<Array3<F>> {
        let t = &fwd.trace;
        let pooled = &fwd.attention.pooled;
        let head_w = self.head.weight.row(0).to_owned();
        if let Some(g) = grads.as_deref_mut() {
            g.head.weight.row_mut(0).scaled_add(d_raw, pooled);
            g.head.bias[0] += d_raw;
        }
        let dpooled = head_w * d_raw;

        // pooled = sum_i a_i e_i
        let da = t.embeddings.dot(&dpooled);
        let mut de = Array2::from_shape_fn(t.embeddings.dim(), |(i, j)| t.weights[i] * dpooled[j]);
        let weighted: F = t.weights.iter().zip(da.iter()).map(|(&a, &g)| a * g).sum();
        let dlogit = Array2::from_shape_fn((t.weights.len(), 1), |(i, _)| {
            t.weights[i] * (da[i] - weighted)
        });

        let mut dz = match grads.as_deref_mut() {
            Some(g) => self.attention.score.backward(
                t.hidden.view(),
                dlogit.view(),
                &mut g.attention.score,
            ),
            None => dlogit.dot(&self.attention.score.weight),
        };
        dz.zip_mut_with(&t.hidden, |g, &h| *g *= F::one() - h * h);
        let de_att = match grads.as_deref_mut() {
            Some(g) => self.attention.hidden.backward(
                t.embeddings.view(),
                dz.view(),
                &mut g.attention.hidden,
            ),
            None => dz.dot(&self.attention.hidden.weight),
        };
        de += &de_att;

        let mut du = de;
        du.zip_mut_with(&t.embed_pre, |g, &u| *g *= gelu_grad(u));
        let dfeat = match grads.as_deref_mut() {
            Some(g) => self
                .embed
                .backward(t.pooled_features.view(), du.view(), &mut g.embed),
            None => du.dot(&self.embed.weight),
        };

        let mut map_grads = Vec::new();
        for (k, feature) in t.features.iter().enumerate() {
            let needs_encoder = grads.is_some();
            if !needs_encoder && !want_maps {
                break;
            }
            let dmap = pooled_to_map_grad(&dfeat.row(k).to_owned(), feature.map.dim());
            if want_maps {
                map_grads.push(dmap.clone());
            }
            if let Some(g) = grads.as_deref_mut() {
                self.encoder.backward(&t.encoder[k], dmap, &mut g.encoder);
            }
        }
        map_grads
    }
}

fn cast_linear<F: Scalar, G: Scalar>(l: &Linear<F>) -> Linear<G> {
    Linear {
        weight: l.weight.mapv(|v| G::from(v).unwrap()),
        bias: l.bias.mapv(|v| G::from(v).unwrap()),
    }
}

fn cast_conv<F: Scalar, G: Scalar>(c: &super::layers::Conv2d<F>) -> super::layers::Conv2d<G> {
    super::layers::Conv2d {
        weight: c.weight.mapv(|v| G::from(v).unwrap()),
        bias: c.bias.mapv(|v| G::from(v).unwrap()),
        stride: c.stride,
        padding: c.padding,
    }
}

/// Intermediates of one regional forward pass.
#[derive(Debug, Clone)]
pub struct RegionalTrace<F> {
    /// Slot indices of the valid images, in slot order.
    pub valid: Vec<usize>,
    encoder: Vec<EncoderTrace<F>>,
    /// Encoder outputs of the valid images.
    pub features: Vec<ImageFeature<F>>,
    pooled_features: Array2<F>,
    embed_pre: Array2<F>,
    /// GELU embeddings, `(n_valid, D)`.
    pub embeddings: Array2<F>,
    hidden: Array2<F>,
    weights: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct RegionalForward<F> {
    /// Unclamped head output.
    pub raw: F,
    pub attention: AttentionOutput<F>,
    pub trace: RegionalTrace<F>,
}

impl<F: Scalar> RegionalForward<F> {
    /// Head output clamped to the PASI range.
    pub fn score(&self) -> F {
        clamp_score(self.raw)
    }
}

pub fn clamp_score<F: Scalar>(raw: F) -> F {
    raw.max(F::zero()).min(F::from(PASI_MAX).unwrap())
}

struct AttentionForward<F> {
    hidden: Array2<F>,
    logits: Array1<F>,
    weights: Array1<F>,
    pooled: Array1<F>,
}

fn attention_forward<F: Scalar>(
    params: &AttentionParams<F>,
    embeddings: ArrayView2<F>,
) -> Result<AttentionForward<F>> {
    if embeddings.nrows() == 0 {
        return Err(Error::Structure("attention over an empty set".into()));
    }
    if embeddings.ncols() != params.hidden.input_dim() {
        return Err(Error::Shape(format!(
            "attention expects width {}, got {}",
            params.hidden.input_dim(),
            embeddings.ncols()
        )));
    }
    let hidden = params.hidden.forward(embeddings).mapv(F::tanh);
    let logits = params.score.forward(hidden.view()).column(0).to_owned();
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exp = logits.mapv(|l| (l - max).exp());
    let total: F = exp.sum();
    let weights = exp / total;
    let pooled = weights
        .view()
        .insert_axis(Axis(0))
        .dot(&embeddings)
        .row(0)
        .to_owned();
    Ok(AttentionForward {
        hidden,
        logits,
        weights,
        pooled,
    })
}

/// Masked attention pooling over `(N, D)` embeddings.
pub fn attention_pool<F: Scalar>(
    embeddings: ArrayView2<F>,
    valid_mask: &[bool],
    params: &AttentionParams<F>,
) -> Result<AttentionOutput<F>> {
    if embeddings.nrows() != valid_mask.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} mask entries",
            embeddings.nrows(),
            valid_mask.len()
        )));
    }
    let valid: Vec<usize> = (0..valid_mask.len()).filter(|&i| valid_mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::Structure(
            "all slots masked; attention needs one valid slot".into(),
        ));
    }
    let picked = embeddings.select(Axis(0), &valid);
    let att = attention_forward(params, picked.view())?;
    let n = valid_mask.len();
    let mut weights = vec![F::zero(); n];
    let mut logits = vec![F::neg_infinity(); n];
    for (k, &slot) in valid.iter().enumerate() {
        weights[slot] = att.weights[k];
        logits[slot] = att.logits[k];
    }
    Ok(AttentionOutput {
        weights,
        pooled: att.pooled,
        logits,
    })
}

/// Score one region set: clamped regional PASI plus the attention output.
pub fn regional_forward<F: Scalar>(
    set: &RegionalImageSet<F>,
    params: &RegionalModel<F>,
) -> Result<(RegionalPasi, AttentionOutput<F>)> {
    if set.region != params.region {
        return Err(Error::Structure(format!(
            "{} set given to the {} model",
            set.region, params.region
        )));
    }
    let fwd = params.forward(set)?;
    let value = fwd.score().to_f64().expect("finite score");
    Ok((RegionalPasi::new(set.region, value)?, fwd.attention))
}

type RegionalOutputs = PerRegion<(RegionalPasi, AttentionOutput<f32>)>;

/// Score a whole visit: four regional scores combined with the region weights.
pub fn absolute_forward(
    sample: &VisitSample,
    params: &PsoNetParams<f32>,
) -> Result<(AbsolutePasi, RegionalOutputs)> {
    let mut outputs = Vec::with_capacity(4);
    for region in Region::ALL {
        outputs.push(regional_forward(
            &sample.region_sets[region],
            &params.regions[region],
        )?);
    }
    let regional: Vec<RegionalPasi> = outputs.iter().map(|(r, _)| *r).collect();
    let total = pasi::total_pasi(&regional)?;
    Ok((total, PerRegion(outputs.try_into().expect("four regions"))))
}

/// Result of [`gradient`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub loss: F,
    /// Parameter-shaped gradients.
    pub params: RegionalModel<F>,
    /// `(slot, dL/dmap)` for each valid image, when requested.
    pub map_grads: Vec<(usize, Array3<F>)>,
}

/// Gradients of `loss(raw score)` for one region set. `loss` returns the
/// loss value and its derivative w.r.t. the raw head output.
pub fn gradient<F: Scalar>(
    model: &RegionalModel<F>,
    set: &RegionalImageSet<F>,
    loss: impl Fn(F) -> (F, F),
    want_maps: bool,
) -> Result<Gradients<F>> {
    let fwd = model.forward(set)?;
    let (value, d_raw) = loss(fwd.raw);
    if !value.is_finite() || !d_raw.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", set.region)));
    }
    let mut grads = model.zeros_like();
    let maps = model.backward(&fwd, d_raw, Some(&mut grads), want_maps);
    Ok(Gradients {
        loss: value,
        params: grads,
        map_grads: fwd.trace.valid.iter().copied().zip(maps).collect(),
    })
}

impl<F: Scalar> PsoNetParams<F> {
    pub fn zeros_like(&self) -> Self {
        PsoNetParams {
            config: self.config.clone(),
            regions: self.regions.map(|_, m| m.zeros_like()),
        }
    }

    /// All tensors, named `region.<code>.<tensor>`.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        self.regions
            .iter()
            .flat_map(|(region, m)| {
                m.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("region.{}.{n}", region.code()), t))
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        self.regions
            .iter_mut()
            .flat_map(|(region, m)| {
                m.named_tensors_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("region.{}.{n}", region.code()), t))
            })
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> PsoNetParams<G> {
        PsoNetParams {
            config: self.config.clone(),
            regions: self.regions.map(|_, m| m.cast()),
        }
    }
}

/// Seeded initialization. With the pretrained variant the encoders are
/// overwritten from the referenced checkpoint.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<PsoNetParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Drawn in f32 so every precision starts from the same values.
    let mut regions =
        PerRegion::from_fn(|region| RegionalModel::<f32>::init(region, config, &mut rng));
    if config.shared_encoder {
        let shared = regions[Region::HeadNeck].encoder.clone();
        for (_, m) in regions.iter_mut() {
            m.encoder = shared.clone();
        }
    }
    if let EncoderVariant::PluggablePretrained { path } = &config.encoder.variant {
        let ckpt = checkpoint::load_checkpoint(path)?;
        for (_, m) in regions.iter_mut() {
            checkpoint::load_encoder(&ckpt, "encoder.", m)?;
        }
    }
    let params = PsoNetParams {
        config: config.clone(),
        regions,
    };
    Ok(params.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::tiny(4, 32);
        c.embed_dim = 16;
        c.attention_hidden = 8;
        c
    }

    fn random_set(region: Region, n_valid: usize, rng: &mut ChaCha8Rng) -> RegionalImageSet<f64> {
        let n = region.image_count();
        let images = (0..n)
            .map(|i| {
                if i < n_valid {
                    Array::from_shape_simple_fn((3, 32, 32), || rng.random_range(-1.0..1.0))
                } else {
                    Array3::zeros((3, 32, 32))
                }
            })
            .collect();
        let mask = (0..n).map(|i| i < n_valid).collect();
        RegionalImageSet::new(region, images, mask).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a: PsoNetParams<f32> = init_params(&small_config(), 3).unwrap();
        let b: PsoNetParams<f32> = init_params(&small_config(), 3).unwrap();
        let c: PsoNetParams<f32> = init_params(&small_config(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn head_width_is_embed_dim() {
        let p: PsoNetParams<f32> = init_params(&ModelConfig::tiny(16, 64), 0).unwrap();
        for (_, m) in p.regions.iter() {
            assert_eq!(m.head.input_dim(), 768);
            assert_eq!(m.embed.input_dim(), 128);
        }
    }

    #[test]
    fn single_valid_slot_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: PsoNetParams<f64> = init_params(&small_config(), 1).unwrap();
        let set = random_set(Region::Trunk, 1, &mut rng);
        let (score, att) = regional_forward(&set, &p.regions[Region::Trunk]).unwrap();
        assert_eq!(att.weights[0], 1.0);
        assert!(att.weights[1..].iter().all(|&w| w == 0.0));
        assert!(att.logits[1..].iter().all(|l| *l == f64::NEG_INFINITY));
        assert!((0.0..=72.0).contains(&score.value));
    }

    #[test]
    fn identical_embeddings_share_weight_equally() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: PsoNetParams<f64> = init_params(&small_config(), 2).unwrap();
        let row = Array::from_shape_simple_fn(16, || rng.random_range(-1.0..1.0));
        let e = Array2::from_shape_fn((10, 16), |(_, j)| row[j]);
        let out =
            attention_pool(e.view(), &[true; 10], &p.regions[Region::Trunk].attention).unwrap();
        for w in &out.weights {
            assert!((w - 0.1).abs() < 1e-12);
        }
        for (a, b) in out.pooled.iter().zip(row.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let p: PsoNetParams<f64> = init_params(&small_config(), 2).unwrap();
        let e = Array2::zeros((3, 16));
        assert!(
            attention_pool(e.view(), &[false; 3], &p.regions[Region::Trunk].attention).is_err()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = random_set(Region::Trunk, 0, &mut rng);
        assert!(regional_forward(&set, &p.regions[Region::Trunk]).is_err());
    }

    #[test]
    fn duplicating_every_image_keeps_the_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: PsoNetParams<f64> = init_params(&small_config(), 5).unwrap();
        let model = &p.regions[Region::Trunk];
        let base = random_set(Region::Trunk, 4, &mut rng);
        let imgs: Vec<_> = base.images[..4].to_vec();
        let set = RegionalImageSet::from_valid(Region::Trunk, imgs.clone()).unwrap();
        let doubled: Vec<_> = imgs.iter().chain(imgs.iter()).cloned().collect();
        let set2 = RegionalImageSet::from_valid(Region::Trunk, doubled).unwrap();
        let (s1, a1) = regional_forward(&set, model).unwrap();
        let (s2, a2) = regional_forward(&set2, model).unwrap();
        assert!((s1.value - s2.value).abs() < 1e-9);
        for (x, y) in a1.pooled.iter().zip(a2.pooled.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        for i in 0..4 {
            assert!((a2.weights[i] - a1.weights[i] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_heads_combine_with_region_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p: PsoNetParams<f32> = init_params(&small_config(), 6).unwrap();
        let forced = [10.0f32, 20.0, 5.0, 8.0];
        for (region, m) in p.regions.iter_mut() {
            m.head.weight.fill(0.0);
            m.head.bias[0] = forced[region.index()];
        }
        let sets = PerRegion::from_fn(|r| random_set(r, 3, &mut rng).cast::<f32>());
        let sample = VisitSample {
            patient_id: "P".into(),
            visit_id: "V".into(),
            region_sets: sets,
            labels: Default::default(),
            truth_components: None,
        };
        let (total, regional) = absolute_forward(&sample, &p).unwrap();
        assert!((total.value - 9.4).abs() < 1e-6);
        assert_eq!(regional[Region::UpperExtremities].0.value, 20.0);

        for (_, m) in p.regions.iter_mut() {
            m.head.bias[0] = -3.0;
        }
        let (total, _) = absolute_forward(&sample, &p).unwrap();
        assert_eq!(total.value, 0.0);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        // With one valid image the softmax is constant, so the attention
        // scorer does not influence the output.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: PsoNetParams<f64> = init_params(&small_config(), 7).unwrap();
        let set = random_set(Region::HeadNeck, 1, &mut rng);
        let g = gradient(&p.regions[Region::HeadNeck], &set, |r| (r, 1.0), false).unwrap();
        assert!(g.params.attention.score.weight.iter().all(|&v| v == 0.0));
        assert!(g.params.attention.hidden.weight.iter().all(|&v| v == 0.0));
        assert!(g.params.head.weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: PsoNetParams<f64> = init_params(&small_config(), 8).unwrap();
        let set = random_set(Region::HeadNeck, 2, &mut rng);
        let err = gradient(
            &p.regions[Region::HeadNeck],
            &set,
            |_| (f64::NAN, 1.0),
            false,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn shared_encoder_starts_tied() {
        let mut c = small_config();
        c.shared_encoder = true;
        let p: PsoNetParams<f32> = init_params(&c, 1).unwrap();
        assert_eq!(
            p.regions[Region::HeadNeck].encoder,
            p.regions[Region::Trunk].encoder
        );
        assert_ne!(
            p.regions[Region::HeadNeck].head,
            p.regions[Region::Trunk].head
        );
    }
}
