use ndarray::{Array, Array3};
use psonet_core::dataio::RegionalImageSet;
use psonet_core::nnet::gradcheck::check_gradients;
use psonet_core::nnet::{init_params, ModelConfig, PsoNetParams};
use psonet_core::pasi::Region;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    let mut c = ModelConfig::tiny(4, 32);
    c.embed_dim = 24;
    c.attention_hidden = 8;
    c
}

fn set(region: Region, n_valid: usize, seed: u64) -> RegionalImageSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = region.image_count();
    let images = (0..n)
        .map(|i| {
            if i < n_valid {
                Array::from_shape_simple_fn((3, 32, 32), || rng.random_range(-2.0..2.0))
            } else {
                Array3::zeros((3, 32, 32))
            }
        })
        .collect();
    RegionalImageSet::new(region, images, (0..n).map(|i| i < n_valid).collect()).unwrap()
}

const FLOOR: f64 = 1e-6;

#[test]
fn attention_and_head_gradients_match_finite_differences() {
    let params: PsoNetParams<f64> = init_params(&config(), 21).unwrap();
    for (region, n_valid, seed) in [(Region::Trunk, 6, 1), (Region::HeadNeck, 12, 2)] {
        let model = &params.regions[region];
        let report = check_gradients(
            model,
            &set(region, n_valid, seed),
            1e-4,
            usize::MAX,
            |n| n.starts_with("attention.") || n.starts_with("head."),
            seed,
        )
        .unwrap();
        let err = report.max_relative_error(FLOOR, |_| true);
        assert!(err < 1e-3, "{region}: {err} at {:?}", report.worst(FLOOR));
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let params: PsoNetParams<f64> = init_params(&config(), 5).unwrap();
    let model = &params.regions[Region::LowerExtremities];
    let report = check_gradients(
        model,
        &set(Region::LowerExtremities, 4, 9),
        1e-4,
        12,
        |_| true,
        3,
    )
    .unwrap();
    let err = report.max_relative_error(FLOOR, |_| true);
    assert!(err < 1e-2, "{err} at {:?}", report.worst(FLOOR));
    assert!(report
        .probes
        .iter()
        .any(|p| p.tensor == "encoder.stem.weight" && p.analytic.abs() > 1e-6));
    eprintln!("end-to-end max relative error {err:.2e}");
}
