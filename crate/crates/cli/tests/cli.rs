use std::path::Path;
use std::process::{Command, Output};

use psonet_cli::commands::{cmd_eval, cmd_synth, cmd_train, directory_manifest};
use psonet_cli::config::{resolve, Overrides, RaterSpec};
use psonet_core::metrics::{read_score_csv, write_score_csv};

fn psonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psonet"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn config_text(out: &Path) -> String {
    format!(
        "seed = 2\nout = {:?}\n[synth]\npatients = 10\n[model]\nembed_dim = 8\nattention_hidden = 4\n[model.encoder]\nbase_width = 2\ninput_size = [32, 32]\n[train]\nepochs = 1\n",
        out.display().to_string()
    )
}

#[test]
fn bad_config_value_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = -1.0\n").unwrap();
    let o = psonet(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    std::fs::write(&cfg, "[train]\nno_such_key = 1\n").unwrap();
    let o = psonet(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = psonet(&[
        "infer",
        "--checkpoint",
        missing.to_str().unwrap(),
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn malformed_rater_flag_rejected_by_parser() {
    let o = psonet(&["eval", "--checkpoint", "x.ckpt", "--rater", "nopath"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_inference_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    for code in ["HN", "UE", "LE"] {
        std::fs::create_dir_all(dir.path().join(code)).unwrap();
    }
    let err = directory_manifest(dir.path()).unwrap_err();
    assert!(err.is_input_error());
    assert!(err.to_string().contains("HN"));
}

#[test]
fn eval_compares_model_with_csv_raters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = resolve(Some(&config_text(&out)), "test", &Overrides::default()).unwrap();
    cmd_synth(&cfg).unwrap();
    let artifacts = cmd_train(&cfg, false).unwrap();

    // A second rater that is the truth plus one on every visit.
    let manifest = psonet_core::dataio::load_manifest(&artifacts.manifest).unwrap();
    let test = manifest.split_subset(cfg.eval.split).unwrap();
    let table = test
        .labels
        .iter()
        .map(|(k, l)| (k.clone(), l.total.unwrap() + 1.0))
        .collect();
    let rater = dir.path().join("r1.csv");
    write_score_csv(&rater, &table).unwrap();
    assert_eq!(read_score_csv(&rater).unwrap(), table);

    cfg.eval.truth_as_rater = true;
    cfg.eval.raters.push(RaterSpec {
        name: "r1".into(),
        path: rater,
    });
    let report = cmd_eval(&cfg, &artifacts.best).unwrap();
    let names: Vec<(String, String)> = report
        .rows
        .iter()
        .map(|r| (r.a.clone(), r.b.clone()))
        .collect();
    assert_eq!(
        names,
        [
            ("model".to_string(), "truth".to_string()),
            ("model".to_string(), "r1".to_string()),
            ("truth".to_string(), "r1".to_string()),
        ]
    );
    let truth_vs_r1 = &report.rows[2];
    assert!((truth_vs_r1.mae - 1.0).abs() < 1e-12);
    assert!(truth_vs_r1.std.abs() < 1e-12);
    for f in ["predictions.csv", "report.json", "report.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}
