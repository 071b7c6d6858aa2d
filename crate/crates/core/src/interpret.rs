//! Ranked gradient regression activation maps, overlays and the
//! max-attention quartile analysis.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::image::{resize_bilinear, save_rgb};
use crate::dataio::RegionalImageSet;
use crate::error::{Error, Result};
use crate::nnet::model::clamp_score;
use crate::nnet::{AttentionOutput, RegionalModel};
use crate::pasi::{PerRegion, Region};

/// Side of the output activation grid.
pub const GRAD_RAM_SIZE: usize = 224;

/// Valid slots ordered by descending attention weight, ties by slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRanking(pub Vec<(usize, f64)>);

impl AttentionRanking {
    pub fn order(&self) -> Vec<usize> {
        self.0.iter().map(|(s, _)| *s).collect()
    }
}

pub fn rank_attention<F: num_traits::Float>(
    output: &AttentionOutput<F>,
) -> Result<AttentionRanking> {
    let mut ranked = Vec::new();
    for (slot, (&w, &l)) in output.weights.iter().zip(&output.logits).enumerate() {
        if l == F::neg_infinity() {
            continue;
        }
        let w = w
            .to_f64()
            .filter(|w| w.is_finite())
            .ok_or_else(|| Error::NonFinite(format!("attention weight of slot {slot}")))?;
        ranked.push((slot, w));
    }
    // Stable sort keeps ascending slot order among equal weights.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(AttentionRanking(ranked))
}

/// Which photo a map belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MapSource {
    pub patient_id: String,
    pub visit_id: String,
    pub region: Option<Region>,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRamMap {
    /// `GRAD_RAM_SIZE x GRAD_RAM_SIZE`, values in `[0, 1]`.
    pub grid: Array2<f64>,
    pub source: MapSource,
    /// Clamped regional score of the single-image set.
    pub score: f64,
    /// Weight of the image in the full-set inference, 1 when used alone.
    pub attention_weight: f64,
    /// Range of the raw map before normalization.
    pub grid_minmax: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GradRamOptions {
    /// Keep negative evidence instead of rectifying.
    pub signed: bool,
}

/// Gradient regression activation map of one normalized CHW image, scored
/// as a set of one.
pub fn grad_ram(
    image: &Array3<f32>,
    model: &RegionalModel<f32>,
    options: GradRamOptions,
) -> Result<GradRamMap> {
    let set = RegionalImageSet::from_valid(model.region, vec![image.clone()])?;
    let fwd = model.forward(&set)?;
    let dmap = model
        .backward(&fwd, 1.0, None, true)
        .pop()
        .expect("one valid image");
    if dmap.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Grad-RAM gradient".into()));
    }
    let map = &fwd.trace.features[0].map;
    let weights = dmap
        .map(|&v| f64::from(v))
        .mean_axis(Axis(2))
        .and_then(|m| m.mean_axis(Axis(1)))
        .expect("non-empty map");
    let (_, h, w) = map.dim();
    let mut raw = Array2::<f64>::zeros((h, w));
    for (c, &wc) in weights.iter().enumerate() {
        raw.scaled_add(wc, &map.index_axis(Axis(0), c).mapv(f64::from));
    }
    if !options.signed {
        raw.mapv_inplace(|v| v.max(0.0));
    }
    let grid_minmax = min_max(raw.view());
    let up = resize_bilinear(
        raw.insert_axis(Axis(0)).view(),
        GRAD_RAM_SIZE,
        GRAD_RAM_SIZE,
    )
    .index_axis_move(Axis(0), 0);
    Ok(GradRamMap {
        grid: normalize_unit(up.view()),
        source: MapSource {
            region: Some(model.region),
            ..MapSource::default()
        },
        score: f64::from(clamp_score(fwd.raw)),
        attention_weight: 1.0,
        grid_minmax,
    })
}

fn min_max(x: ArrayView2<f64>) -> (f64, f64) {
    x.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Min-max scale to `[0, 1]`; a constant input maps to zeros.
pub fn normalize_unit(x: ArrayView2<f64>) -> Array2<f64> {
    let (lo, hi) = min_max(x);
    if hi <= lo {
        return Array2::zeros(x.dim());
    }
    x.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Counts of forward passes issued by [`explain_set`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCounter {
    pub full_set: usize,
    pub single_image: usize,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub ranking: AttentionRanking,
    /// Maps for the top-ranked images, in rank order.
    pub maps: Vec<GradRamMap>,
    /// Set when `top_k` exceeded the number of valid images.
    pub notice: Option<String>,
}

/// Rank the images of a set by attention, then map the `top_k` highest.
pub fn explain_set(
    set: &RegionalImageSet,
    model: &RegionalModel<f32>,
    top_k: usize,
    options: GradRamOptions,
    source: &MapSource,
    mut counter: Option<&mut PassCounter>,
) -> Result<Explanation> {
    let fwd = model.forward(set)?;
    if let Some(c) = counter.as_deref_mut() {
        c.full_set += 1;
    }
    let ranking = rank_attention(&fwd.attention)?;
    let notice = (top_k > ranking.0.len()).then(|| {
        format!(
            "top_k {top_k} exceeds {} valid images; truncated",
            ranking.0.len()
        )
    });
    if let Some(n) = &notice {
        log::warn!("{n}");
    }
    let mut maps = Vec::new();
    for &(slot, weight) in ranking.0.iter().take(top_k) {
        let mut m = grad_ram(&set.images[slot], model, options)?;
        if let Some(c) = counter.as_deref_mut() {
            c.single_image += 1;
        }
        m.source = MapSource {
            slot,
            region: Some(set.region),
            ..source.clone()
        };
        m.attention_weight = weight;
        maps.push(m);
    }
    Ok(Explanation {
        ranking,
        maps,
        notice,
    })
}

/// Jet colormap for `v` in `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel =
        |centre: f64| ((1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Blend the colormapped `map` over `image` with opacity `alpha`.
pub fn overlay(image: &RgbImage, map: &Array2<f64>, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(
            "alpha",
            format!("{alpha} is outside [0, 1]"),
        ));
    }
    let (w, h) = image.dimensions();
    let resized = resize_bilinear(map.view().insert_axis(Axis(0)), h as usize, w as usize);
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in image.enumerate_pixels() {
        let color = jet(resized[[0, y as usize, x as usize]]);
        let blended: [u8; 3] = std::array::from_fn(|k| {
            let v = (1.0 - alpha) * f64::from(px[k]) + alpha * f64::from(color[k]);
            v.round().clamp(0.0, 255.0) as u8
        });
        out.put_pixel(x, y, Rgb(blended));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlaySidecar {
    pub source: MapSource,
    pub score: f64,
    pub attention_weight: f64,
    pub grid_minmax: [f64; 2],
}

/// Write the overlay PNG and `<stem>.json` next to it.
pub fn write_overlay(path: &Path, rendered: &RgbImage, map: &GradRamMap) -> Result<()> {
    save_rgb(rendered, path)?;
    let sidecar = OverlaySidecar {
        source: map.source.clone(),
        score: map.score,
        attention_weight: map.attention_weight,
        grid_minmax: [map.grid_minmax.0, map.grid_minmax.1],
    };
    let json_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileMember {
    pub max_attention: f64,
    pub label: f64,
    /// 1 to 4.
    pub quartile: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionQuartiles {
    /// 25th, 50th and 75th percentiles of the max attention.
    pub boundaries: [f64; 3],
    pub members: Vec<QuartileMember>,
    /// Boundaries collapsed, or too few sets to split.
    pub degenerate: bool,
    pub notice: Option<String>,
}

impl RegionQuartiles {
    /// Mean label of each non-empty quartile, as `(quartile, mean)`.
    pub fn quartile_means(&self) -> Vec<(usize, f64)> {
        (1..=4)
            .filter_map(|q| {
                let labels: Vec<f64> = self
                    .members
                    .iter()
                    .filter(|m| m.quartile == q)
                    .map(|m| m.label)
                    .collect();
                (!labels.is_empty()).then(|| (q, labels.iter().sum::<f64>() / labels.len() as f64))
            })
            .collect()
    }

    /// Spearman correlation between quartile index and per-quartile mean
    /// label. `None` with fewer than two non-empty quartiles or no spread.
    pub fn spearman(&self) -> Option<f64> {
        let means = self.quartile_means();
        if means.len() < 2 {
            return None;
        }
        let q: Vec<f64> = means.iter().map(|(q, _)| *q as f64).collect();
        let m: Vec<f64> = means.iter().map(|(_, m)| *m).collect();
        spearman(&q, &m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileTable(pub PerRegion<RegionQuartiles>);

/// Bin sets per region by their max attention weight. `pairs[region]`
/// holds one `(max_attention, regional label)` per set.
pub fn attention_quartiles(pairs: &PerRegion<Vec<(f64, f64)>>) -> Result<QuartileTable> {
    let mut out = Vec::with_capacity(4);
    for (region, sets) in pairs.iter() {
        if sets.iter().any(|(a, l)| !a.is_finite() || !l.is_finite()) {
            return Err(Error::NonFinite(format!("{region} quartile input")));
        }
        if sets.len() < 4 {
            let notice = format!(
                "{region}: {} sets, fewer than 4; all placed in one bucket",
                sets.len()
            );
            log::warn!("{notice}");
            let b = sets.iter().map(|s| s.0).fold(0.0, f64::max);
            out.push(RegionQuartiles {
                boundaries: [b; 3],
                members: sets
                    .iter()
                    .map(|&(a, l)| QuartileMember {
                        max_attention: a,
                        label: l,
                        quartile: 1,
                    })
                    .collect(),
                degenerate: true,
                notice: Some(notice),
            });
            continue;
        }
        let mut sorted: Vec<f64> = sets.iter().map(|s| s.0).collect();
        sorted.sort_by(f64::total_cmp);
        let b = [0.25, 0.5, 0.75].map(|q| percentile(&sorted, q));
        let members = sets
            .iter()
            .map(|&(a, l)| QuartileMember {
                max_attention: a,
                label: l,
                quartile: if a <= b[0] {
                    1
                } else if a <= b[1] {
                    2
                } else if a <= b[2] {
                    3
                } else {
                    4
                },
            })
            .collect();
        let degenerate = b[0] == b[1] || b[1] == b[2];
        out.push(RegionQuartiles {
            boundaries: b,
            members,
            degenerate,
            notice: degenerate.then(|| format!("{region}: quartile boundaries coincide")),
        });
    }
    Ok(QuartileTable(PerRegion(
        out.try_into().expect("four regions"),
    )))
}

/// CSV with columns `region,quartile,max_attention,label`.
pub fn write_quartile_csv(path: &Path, table: &QuartileTable) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(["region", "quartile", "max_attention", "label"])
        .map_err(io)?;
    for (region, q) in table.0.iter() {
        for m in &q.members {
            w.write_record([
                region.code().to_string(),
                format!("Q{}", m.quartile),
                m.max_attention.to_string(),
                m.label.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Average ranks, 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_params, ModelConfig, PsoNetParams};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn output(weights: &[f64], mask: &[bool]) -> AttentionOutput<f64> {
        AttentionOutput {
            weights: weights.to_vec(),
            pooled: ndarray::Array1::zeros(1),
            logits: mask
                .iter()
                .zip(weights)
                .map(|(&m, &w)| if m { w.ln() } else { f64::NEG_INFINITY })
                .collect(),
        }
    }

    #[test]
    fn ranking_examples() {
        let r = rank_attention(&output(&[0.1, 0.7, 0.2], &[true; 3])).unwrap();
        assert_eq!(r.order(), vec![1, 2, 0]);
        let r = rank_attention(&output(&[0.25; 4], &[true; 4])).unwrap();
        assert_eq!(r.order(), vec![0, 1, 2, 3]);
        let r = rank_attention(&output(&[0.5, 0.0, 0.5], &[true, false, true])).unwrap();
        assert_eq!(r.order(), vec![0, 2]);
    }

    fn model() -> PsoNetParams<f32> {
        let mut c = ModelConfig::tiny(4, 64);
        c.embed_dim = 16;
        c.attention_hidden = 8;
        init_params(&c, 3).unwrap()
    }

    fn image(seed: u64, side: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((3, side, side), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn grid_is_unit_range_at_fixed_size() {
        let p = model();
        for side in [32, 64, 96] {
            let m = grad_ram(
                &image(side as u64, side),
                &p.regions[Region::Trunk],
                Default::default(),
            )
            .unwrap();
            assert_eq!(m.grid.dim(), (224, 224));
            let (lo, hi) = min_max(m.grid.view());
            assert!(lo >= 0.0 && hi <= 1.0);
            assert!(hi == 1.0 || hi == 0.0);
        }
    }

    #[test]
    fn zero_final_stage_gives_zero_map() {
        let mut p = model();
        let m = &mut p.regions[Region::Trunk];
        m.encoder.stages[3].weight.fill(0.0);
        m.encoder.stages[3].bias.fill(0.0);
        let g = grad_ram(&image(1, 64), m, Default::default()).unwrap();
        assert!(g.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn explain_matches_direct_maps_and_counts_passes() {
        let p = model();
        let m = &p.regions[Region::HeadNeck];
        let imgs: Vec<_> = (0..5).map(|i| image(i, 64)).collect();
        let set = RegionalImageSet::from_valid(Region::HeadNeck, imgs).unwrap();
        let mut counter = PassCounter::default();
        let ex = explain_set(
            &set,
            m,
            2,
            Default::default(),
            &MapSource::default(),
            Some(&mut counter),
        )
        .unwrap();
        assert_eq!(
            counter,
            PassCounter {
                full_set: 1,
                single_image: 2
            }
        );
        let top = ex.ranking.0[0].0;
        assert_eq!(ex.maps[0].source.slot, top);
        let direct = grad_ram(&set.images[top], m, Default::default()).unwrap();
        for (a, b) in direct.grid.iter().zip(ex.maps[0].grid.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let all =
            explain_set(&set, m, 99, Default::default(), &MapSource::default(), None).unwrap();
        assert_eq!(all.maps.len(), 5);
        assert!(all.notice.is_some());
    }

    #[test]
    fn overlay_blending() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = RgbImage::from_fn(20, 12, |_, _| {
            Rgb([rng.random(), rng.random(), rng.random()])
        });
        let map = Array2::from_shape_fn((20, 12), |(y, x)| (x + y) as f64 / 30.0);
        assert_eq!(overlay(&img, &map, 0.0).unwrap(), img);
        let full = overlay(&img, &map, 1.0).unwrap();
        let half = overlay(&img, &map, 0.5).unwrap();
        for ((a, b), h) in img.pixels().zip(full.pixels()).zip(half.pixels()) {
            for k in 0..3 {
                let mean = (f64::from(a[k]) + f64::from(b[k])) / 2.0;
                assert!((f64::from(h[k]) - mean).abs() <= 1.0);
            }
        }
        assert!(overlay(&img, &map, 1.5).is_err());
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }

    fn single(region_sets: Vec<(f64, f64)>) -> PerRegion<Vec<(f64, f64)>> {
        PerRegion::from_fn(|_| region_sets.clone())
    }

    #[test]
    fn eight_distinct_sets_fill_quartiles_evenly() {
        let pairs: Vec<(f64, f64)> = (0..8).map(|i| (0.1 + i as f64 * 0.05, i as f64)).collect();
        let t = attention_quartiles(&single(pairs)).unwrap();
        for (_, q) in t.0.iter() {
            for k in 1..=4 {
                assert_eq!(q.members.iter().filter(|m| m.quartile == k).count(), 2);
            }
            assert!(!q.degenerate);
            assert_eq!(q.spearman(), Some(1.0));
        }
    }

    #[test]
    fn identical_attention_is_degenerate() {
        let t = attention_quartiles(&single(vec![(0.3, 1.0); 6])).unwrap();
        let q = &t.0[Region::Trunk];
        assert!(q.degenerate);
        assert!(q.members.iter().all(|m| m.quartile == 1));
        let t = attention_quartiles(&single(vec![(0.3, 1.0), (0.4, 2.0)])).unwrap();
        assert!(t.0[Region::Trunk].notice.is_some());
    }

    #[test]
    fn spearman_handles_ties() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
    }
}
