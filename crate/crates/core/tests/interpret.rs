use ndarray::{Array2, Array3};
use psonet_core::dataio::RegionalImageSet;
use psonet_core::interpret::{
    attention_quartiles, explain_set, grad_ram, normalize_unit, overlay, percentile, spearman,
    write_overlay, GradRamOptions, MapSource, PassCounter, GRAD_RAM_SIZE,
};
use psonet_core::nnet::{init_params, ModelConfig};
use psonet_core::pasi::{PerRegion, Region};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        embed_dim: 12,
        attention_hidden: 6,
        ..ModelConfig::tiny(2, 32)
    }
}

fn image(rng: &mut ChaCha8Rng) -> Array3<f32> {
    Array3::from_shape_simple_fn((3, 32, 32), || rng.random_range(-2.0f32..2.0))
}

#[test]
fn map_is_unit_scaled_at_display_size() {
    let params = init_params::<f32>(&config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for signed in [false, true] {
        let m = grad_ram(
            &image(&mut rng),
            &params.regions[Region::Trunk],
            GradRamOptions { signed },
        )
        .unwrap();
        assert_eq!(m.grid.dim(), (GRAD_RAM_SIZE, GRAD_RAM_SIZE));
        assert!(m.grid.iter().all(|v| (0.0..=1.0).contains(v)));
        let (lo, hi) = m.grid_minmax;
        if hi > lo {
            assert!((m.grid.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.attention_weight, 1.0);
        assert!((0.0..=72.0).contains(&m.score));
    }
}

#[test]
fn constant_map_normalizes_to_zero() {
    let z = normalize_unit(Array2::from_elem((5, 5), 3.0).view());
    assert!(z.iter().all(|&v| v == 0.0));
}

#[test]
fn explain_counts_passes_and_truncates() {
    let params = init_params::<f32>(&config(), 2).unwrap();
    let model = &params.regions[Region::HeadNeck];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = Region::HeadNeck.image_count();
    let mask: Vec<bool> = (0..n).map(|i| i < 3).collect();
    let images = mask
        .iter()
        .map(|&v| {
            if v {
                image(&mut rng)
            } else {
                Array3::zeros((3, 32, 32))
            }
        })
        .collect();
    let set = RegionalImageSet::new(Region::HeadNeck, images, mask).unwrap();
    let source = MapSource {
        patient_id: "P".into(),
        visit_id: "V".into(),
        ..MapSource::default()
    };

    let mut counter = PassCounter::default();
    let e = explain_set(
        &set,
        model,
        2,
        GradRamOptions::default(),
        &source,
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
    assert_eq!(e.maps.len(), 2);
    assert!(e.notice.is_none());
    let order = e.ranking.order();
    assert_eq!(order.len(), 3);
    assert_eq!(e.maps[0].source.slot, order[0]);
    assert!(e.ranking.0.windows(2).all(|w| w[0].1 >= w[1].1));

    let mut counter = PassCounter::default();
    let e = explain_set(
        &set,
        model,
        10,
        GradRamOptions::default(),
        &source,
        Some(&mut counter),
    )
    .unwrap();
    assert_eq!(counter.single_image, 3);
    assert!(e.notice.is_some());
}

#[test]
fn overlay_and_sidecar_written() {
    let params = init_params::<f32>(&config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = grad_ram(
        &image(&mut rng),
        &params.regions[Region::Trunk],
        GradRamOptions::default(),
    )
    .unwrap();
    let photo = image::RgbImage::from_pixel(32, 32, image::Rgb([120, 90, 80]));
    let rendered = overlay(&photo, &m.grid, 0.5).unwrap();
    assert_eq!(rendered.dimensions(), photo.dimensions());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    write_overlay(&path, &rendered, &m).unwrap();
    assert!(path.is_file());
    assert!(path.with_extension("json").is_file());
}

#[test]
fn percentile_interpolates_linearly() {
    let s = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(percentile(&s, 0.25), 2.0);
    assert_eq!(percentile(&s, 0.5), 3.0);
    let s = [1.0, 2.0, 3.0, 4.0];
    assert!((percentile(&s, 0.25) - 1.75).abs() < 1e-12);
    assert!((percentile(&s, 0.75) - 3.25).abs() < 1e-12);
}

#[test]
fn quartiles_split_evenly_and_rank_labels() {
    // attention i/20, label 2i: quartile means rise monotonically
    let sets: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 / 20.0, 2.0 * i as f64)).collect();
    let short = vec![(0.5, 1.0), (0.7, 2.0)];
    let table = attention_quartiles(&PerRegion([sets.clone(), sets.clone(), sets, short])).unwrap();
    let q = &table.0[Region::HeadNeck];
    for quartile in 1..=4 {
        assert_eq!(
            q.members.iter().filter(|m| m.quartile == quartile).count(),
            5
        );
    }
    assert_eq!(q.spearman(), Some(1.0));
    assert!(!q.degenerate);
    let t = &table.0[Region::Trunk];
    assert!(t.degenerate && t.notice.is_some());
    assert!(t.members.iter().all(|m| m.quartile == 1));
}

#[test]
fn spearman_uses_average_ranks() {
    let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 20.0, 30.0]).unwrap();
    // ranks y = 1, 2.5, 2.5, 4
    let want = 4.5 / (5.0f64 * 4.5).sqrt();
    assert!((r - want).abs() < 1e-12, "{r} vs {want}");
    assert_eq!(spearman(&[1.0, 2.0], &[3.0, 3.0]), None);
}
