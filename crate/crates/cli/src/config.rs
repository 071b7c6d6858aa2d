//! Run configuration: profile defaults, merged with a TOML file, then flag
//! overrides.

use std::path::{Path, PathBuf};

use psonet_core::dataio::split::DEFAULT_RATIOS;
use psonet_core::dataio::{AssemblyMode, Split, SyntheticSpec};
use psonet_core::nnet::ModelConfig;
use psonet_core::train::TrainConfig;
use psonet_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Train, validation and test fractions of patients.
    pub ratios: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterSpec {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub confidence: f64,
    /// Percentile bootstrap interval instead of the F-based one.
    pub bootstrap: bool,
    pub bootstrap_resamples: usize,
    pub split: Split,
    /// Add the manifest labels as a rater named `truth`.
    pub truth_as_rater: bool,
    pub raters: Vec<RaterSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    pub top_k: usize,
    pub alpha: f64,
    pub signed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `desk` or `full`; selects the defaults below.
    pub profile: String,
    /// Master seed for data generation, splitting and training.
    pub seed: u64,
    /// Run directory every command writes into.
    pub out: PathBuf,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let (model, train) = match name {
            "desk" => (ModelConfig::tiny(16, 64), TrainConfig::desk()),
            "full" => (ModelConfig::tiny(96, 224), TrainConfig::full()),
            other => {
                return Err(Error::validation(
                    "profile",
                    format!("{other:?} is not one of desk, full"),
                ))
            }
        };
        Ok(RunConfig {
            profile: name.to_string(),
            seed: 0,
            out: PathBuf::from("run"),
            data: DataConfig {
                manifest: None,
                ratios: [DEFAULT_RATIOS.0, DEFAULT_RATIOS.1, DEFAULT_RATIOS.2],
            },
            synth: SyntheticSpec {
                image_size: model.encoder.input_size,
                ..SyntheticSpec::default()
            },
            model,
            train,
            eval: EvalConfig {
                confidence: 0.95,
                bootstrap: false,
                bootstrap_resamples: 2000,
                split: Split::Test,
                truth_as_rater: false,
                raters: Vec::new(),
            },
            explain: ExplainConfig {
                top_k: 1,
                alpha: 0.5,
                signed: false,
            },
        })
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (
            self.data.ratios[0],
            self.data.ratios[1],
            self.data.ratios[2],
        )
    }

    pub fn input_size(&self) -> (usize, usize) {
        let [h, w] = self.model.encoder.input_size;
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(self.eval.confidence > 0.0 && self.eval.confidence < 1.0) {
            return Err(Error::validation("eval.confidence", "must lie in (0, 1)"));
        }
        if self.eval.bootstrap && self.eval.bootstrap_resamples == 0 {
            return Err(Error::validation(
                "eval.bootstrap_resamples",
                "must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return Err(Error::validation("explain.alpha", "must lie in [0, 1]"));
        }
        if self.explain.top_k == 0 {
            return Err(Error::validation("explain.top_k", "must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Write the resolved config as `config.toml` in `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

/// Command-line overrides applied after the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<AssemblyMode>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_error(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    }
}

/// Resolve a config from optional TOML text plus overrides. The master
/// seed is copied into the training and synthesis seeds.
pub fn resolve(text: Option<&str>, context: &str, overrides: &Overrides) -> Result<RunConfig> {
    let file: toml::Value = match text {
        Some(t) => toml::from_str(t).map_err(|e| parse_error(context, e))?,
        None => toml::Value::Table(Default::default()),
    };
    let profile = file
        .get("profile")
        .map(|p| {
            p.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::validation("profile", "must be a string"))
        })
        .transpose()?
        .unwrap_or_else(|| "desk".to_string());
    let defaults = RunConfig::profile(&profile)?;
    let mut merged = toml::Value::try_from(&defaults).expect("defaults serialize");
    // Synthetic images follow the model input unless set explicitly.
    if let Some(size) = file
        .get("model")
        .and_then(|m| m.get("encoder"))
        .and_then(|e| e.get("input_size"))
    {
        if file
            .get("synth")
            .and_then(|s| s.get("image_size"))
            .is_none()
        {
            merge(
                &mut merged,
                toml::Value::Table(
                    [(
                        "synth".to_string(),
                        toml::Value::Table(
                            [("image_size".to_string(), size.clone())]
                                .into_iter()
                                .collect(),
                        ),
                    )]
                    .into_iter()
                    .collect(),
                ),
            );
        }
    }
    merge(&mut merged, file);
    let mut cfg: RunConfig = merged.try_into().map_err(|e| parse_error(context, e))?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = overrides.mode {
        cfg.train.mode = mode;
    }
    if let Some(epochs) = overrides.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(out) = &overrides.out {
        cfg.out = out.clone();
    }
    if let Some(m) = &overrides.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    cfg.train.seed = cfg.seed;
    cfg.synth.rng_seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve from an optional config file path.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    match path {
        None => resolve(None, "defaults", overrides),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::validation("config", format!("cannot read {}: {e}", p.display()))
            })?;
            resolve(Some(&text), &p.display().to_string(), overrides)
        }
    }
}
