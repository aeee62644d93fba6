//! Run settings: config file, command-line overrides, resolved values and
//! the run record that echoes them.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use brainseg::modality::Modality;
use brainseg::trainer::{AugmentConfig, TrainConfig};
use brainseg::unet::ModelSpec;

use crate::CliError;

/// Optional values read from `--config`; anything unset falls back to the
/// built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub modality: Option<Modality>,
    pub reference: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inference: InferenceFile,
    pub train: TrainFile,
    pub model: ModelFile,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceFile {
    pub mc: Option<bool>,
    pub mc_samples: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub cv_threshold: Option<f64>,
    pub registration_iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub translation_vox: Option<f64>,
    pub rotation_deg: Option<f64>,
    pub crop_fraction: Option<f64>,
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFile {
    pub initial_features: Option<usize>,
    pub depth: Option<usize>,
    pub dropout_rate: Option<f64>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.reference, &mut cfg.checkpoint, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or(Ok(Self::default()), Self::read)
    }
}

/// Resolved inference settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InferenceSettings {
    pub modality: Modality,
    pub mc: bool,
    pub mc_samples: usize,
    pub dropout_rate: f64,
    pub cv_threshold: f64,
    pub seed: u64,
    pub registration_iterations: usize,
}

impl InferenceSettings {
    pub fn defaults(modality: Modality) -> Self {
        Self {
            modality,
            mc: true,
            mc_samples: 15,
            dropout_rate: 0.2,
            cv_threshold: modality.cv_threshold(),
            seed: 0,
            registration_iterations: 150,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.mc && self.mc_samples < 2 {
            return Err(CliError::Config("MC mode needs --mc-samples >= 2 for a CV estimate".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CliError::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.cv_threshold >= 0.0) {
            return Err(CliError::Config(format!("invalid CV threshold {}", self.cv_threshold)));
        }
        Ok(())
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferenceOverrides {
    pub modality: Option<Modality>,
    pub mc: Option<bool>,
    pub mc_samples: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub cv_threshold: Option<f64>,
    pub seed: Option<u64>,
}

/// Flag beats file beats default. The threshold default follows the
/// resolved modality.
pub fn resolve_inference(file: &ConfigFile, cli: &InferenceOverrides) -> Result<InferenceSettings, CliError> {
    let modality = cli
        .modality
        .or(file.modality)
        .ok_or_else(|| CliError::Config("no modality given (--modality or config)".into()))?;
    let d = InferenceSettings::defaults(modality);
    let f = &file.inference;
    let s = InferenceSettings {
        modality,
        mc: cli.mc.or(f.mc).unwrap_or(d.mc),
        mc_samples: cli.mc_samples.or(f.mc_samples).unwrap_or(d.mc_samples),
        dropout_rate: cli.dropout_rate.or(f.dropout_rate).unwrap_or(d.dropout_rate),
        cv_threshold: cli.cv_threshold.or(f.cv_threshold).unwrap_or(d.cv_threshold),
        seed: cli.seed.or(file.seed).unwrap_or(d.seed),
        registration_iterations: f.registration_iterations.unwrap_or(d.registration_iterations),
    };
    s.validate()?;
    Ok(s)
}

/// Resolved training settings, flattened for the run record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub modality: Modality,
    pub seed: u64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub translation_vox: f64,
    pub rotation_deg: f64,
    pub crop_fraction: f64,
    pub validation_fraction: f64,
    pub initial_features: usize,
    pub depth: usize,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub modality: Option<Modality>,
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: Option<f64>,
    pub dropout_rate: Option<f64>,
}

pub fn resolve_train(file: &ConfigFile, cli: &TrainOverrides) -> Result<TrainSettings, CliError> {
    let modality = cli
        .modality
        .or(file.modality)
        .ok_or_else(|| CliError::Config("no modality given (--modality or config)".into()))?;
    let t = TrainConfig::default();
    let m = ModelSpec::desk([32, 32, 32]);
    let (f, mf) = (&file.train, &file.model);
    let s = TrainSettings {
        modality,
        seed: cli.seed.or(file.seed).unwrap_or(t.seed),
        learning_rate: cli.learning_rate.or(f.learning_rate).unwrap_or(t.learning_rate),
        max_epochs: cli.max_epochs.or(f.max_epochs).unwrap_or(t.max_epochs),
        patience: cli.patience.or(f.patience).unwrap_or(t.patience),
        batch_size: f.batch_size.unwrap_or(t.batch_size),
        translation_vox: f.translation_vox.unwrap_or(t.augment.translation_vox),
        rotation_deg: f.rotation_deg.unwrap_or(t.augment.rotation_deg),
        crop_fraction: f.crop_fraction.unwrap_or(t.augment.crop_fraction),
        validation_fraction: f.validation_fraction.unwrap_or(t.validation_fraction),
        initial_features: mf.initial_features.unwrap_or(m.initial_features),
        depth: mf.depth.unwrap_or(m.depth),
        dropout_rate: cli.dropout_rate.or(mf.dropout_rate).unwrap_or(m.dropout_rate),
    };
    s.train_config().validate()?;
    Ok(s)
}

impl TrainSettings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            augment: AugmentConfig {
                translation_vox: self.translation_vox,
                rotation_deg: self.rotation_deg,
                crop_fraction: self.crop_fraction,
            },
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            ..TrainConfig::default()
        }
    }

    pub fn model_spec(&self, dims: [usize; 3]) -> ModelSpec {
        let mut spec = ModelSpec::desk(dims);
        spec.initial_features = self.initial_features;
        spec.depth = self.depth;
        spec.dropout_rate = self.dropout_rate;
        spec
    }
}

/// `path` expressed relative to `base`, so records stay identical when a
/// whole tree is moved.
pub fn relative_path(path: &Path, base: &Path) -> String {
    let (Ok(p), Ok(b)) = (std::path::absolute(path), std::path::absolute(base)) else {
        return path.display().to_string();
    };
    let pc: Vec<Component> = p.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = pc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &pc[common..] {
        out.push(c.as_os_str());
    }
    out.display().to_string()
}

/// TOML record of every effective setting for one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord<S: Serialize> {
    pub command: String,
    pub version: String,
    pub inputs: std::collections::BTreeMap<String, String>,
    pub settings: S,
}

impl<S: Serialize> RunRecord<S> {
    pub fn new(command: &str, settings: S) -> Self {
        Self { command: command.into(), version: env!("CARGO_PKG_VERSION").into(), inputs: Default::default(), settings }
    }

    pub fn input(mut self, name: &str, path: &Path, out: &Path) -> Self {
        self.inputs.insert(name.into(), relative_path(path, out));
        self
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))?;
        let path = out.join("run_record.toml");
        fs::write(&path, text).map_err(|e| CliError::Io { path, source: e })
    }
}
