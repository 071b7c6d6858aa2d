use std::sync::OnceLock;

use psonet_core::dataio::split::{split_by_patient, DEFAULT_RATIOS};
use psonet_core::dataio::{
    generate_synthetic_dataset, load_visits, AssemblyMode, SamplingWeights, SyntheticSpec,
    VisitSample,
};
use psonet_core::nnet::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, PsoNetParams};
use psonet_core::train::{
    fit, train_epoch, train_step, validation_mae, EpochMetrics, TrainConfig, TrainState,
};

struct Data {
    train: Vec<VisitSample>,
    val: Vec<VisitSample>,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            patients: 10,
            image_size: [32, 32],
            rng_seed: 21,
            ..SyntheticSpec::default()
        };
        let m = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        let s = split_by_patient(&m, DEFAULT_RATIOS, 4).unwrap();
        Data {
            train: load_visits(&s.train, AssemblyMode::LowRes, (32, 32)).unwrap(),
            val: load_visits(&s.val, AssemblyMode::LowRes, (32, 32)).unwrap(),
        }
    })
}

fn model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        attention_hidden: 8,
        ..ModelConfig::tiny(2, 32)
    }
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 13,
        ..TrainConfig::desk()
    }
}

fn bits(p: &PsoNetParams<f32>) -> Vec<u32> {
    p.named_tensors()
        .into_iter()
        .flat_map(|(_, t)| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn without_time(log: &[EpochMetrics]) -> Vec<(usize, f64, f64, f64)> {
    log.iter()
        .map(|m| (m.epoch, m.train_mae, m.val_mae, m.lr))
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let d = data();
    let a = fit(&model(), &d.train, &d.val, &config(2), None, |_| Ok(())).unwrap();
    let b = fit(&model(), &d.train, &d.val, &config(2), None, |_| Ok(())).unwrap();
    assert_eq!(without_time(&a.log), without_time(&b.log));
    assert_eq!(bits(&a.state.params), bits(&b.state.params));
    assert_eq!(a.state.best_epoch, b.state.best_epoch);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = data();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..config(1)
    };
    let mut state = TrainState::new(&model(), &cfg, &d.train).unwrap();
    let before = bits(&state.params);
    let weights = SamplingWeights::uniform(d.train.len(), cfg.sampling_threshold);
    train_epoch(&mut state, &d.train, &weights, &cfg).unwrap();
    assert_eq!(bits(&state.params), before);
    assert!(state.optimizer.step > 0);
}

#[test]
fn overfits_a_single_batch() {
    let d = data();
    let cfg = config(1);
    let mut state = TrainState::new(&model(), &cfg, &d.train).unwrap();
    let batch: Vec<&VisitSample> = d.train.iter().take(4).collect();
    let losses: Vec<f64> = (0..200)
        .map(|_| train_step(&mut state, &batch, &cfg).unwrap().0)
        .collect();
    let windows: Vec<f64> = losses
        .chunks(50)
        .map(|w| w.iter().sum::<f64>() / 50.0)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "window means {windows:?}");
    }
    assert!(windows[3] < 0.5 * windows[0], "window means {windows:?}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = data();
    let full = fit(&model(), &d.train, &d.val, &config(3), None, |_| Ok(())).unwrap();
    let first = fit(&model(), &d.train, &d.val, &config(2), None, |_| Ok(())).unwrap();

    let mut bytes = Vec::new();
    first.state.to_checkpoint().write_to(&mut bytes).unwrap();
    let restored =
        TrainState::from_checkpoint(&Checkpoint::read_from(&mut bytes.as_slice()).unwrap())
            .unwrap();
    assert_eq!(restored, first.state);

    let resumed = fit(
        &model(),
        &d.train,
        &d.val,
        &config(3),
        Some(restored),
        |_| Ok(()),
    )
    .unwrap();
    for ((_, a), (_, b)) in full
        .state
        .params
        .named_tensors()
        .iter()
        .zip(resumed.state.params.named_tensors().iter())
    {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
    let (fa, fb) = (without_time(&full.log), without_time(&resumed.log));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert!((x.2 - y.2).abs() <= 1e-5);
    }
}

#[test]
fn best_checkpoint_reproduces_validation_mae() {
    let d = data();
    let out = fit(&model(), &d.train, &d.val, &config(2), None, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&path, &out.state.best_checkpoint()).unwrap();
    let params = load_checkpoint(&path).unwrap().params("").unwrap();
    let cfg = config(2);
    let before = validation_mae(&out.best, &d.val, cfg.target).unwrap();
    let after = validation_mae(&params, &d.val, cfg.target).unwrap();
    assert_eq!(before, after);
    assert_eq!(Some(before), out.state.best_val_mae);
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let d = data();
    let cfg = config(0);
    let out = fit(&model(), &d.train, &d.val, &cfg, None, |_| Ok(())).unwrap();
    let fresh = TrainState::new(&model(), &cfg, &d.train).unwrap();
    assert_eq!(bits(&out.best), bits(&fresh.params));
    assert!(out.log.is_empty());
}
