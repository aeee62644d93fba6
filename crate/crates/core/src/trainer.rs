//! Optimization loop: Adam on the combined loss, paired augmentation,
//! seeded shuffling, validation-loss early stopping and best-model restore.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::affine::{AffineTransform, GeometryError};
use crate::autodiff::{ActivationField, AutodiffError, Graph, Mode, Shape};
use crate::manifest::{Manifest, ManifestEntry, ManifestError, Split};
use crate::mc::argmax_labels;
use crate::metrics::DiceReport;
use crate::modality::Modality;
use crate::mvox::{self, FormatError};
use crate::optim::Adam;
use crate::resample::{resample_labels_onto, resample_onto, Interpolation};
use crate::seed;
use crate::unet::{Dropout, UNet, UnetError};
use crate::volume::{normalize_intensity, one_hot_labels, LabelMap, Volume};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}; loss history {history:?}")]
    NonFinite { epoch: usize, batch: usize, loss: f64, history: Vec<f64> },
    #[error(transparent)]
    Model(#[from] UnetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Augmentation ranges; each draw is uniform in the symmetric range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub translation_vox: f64,
    pub rotation_deg: f64,
    /// Largest fraction of each axis cropped away (then zero padded back).
    pub crop_fraction: f64,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig { translation_vox: 0.0, rotation_deg: 0.0, crop_fraction: 0.0 };

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { translation_vox: 4.0, rotation_deg: 10.0, crop_fraction: 0.1 }
    }
}

/// One concrete augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Pull-back shift in voxels: output voxel `x` reads input `x + shift`.
    pub shift_vox: [f64; 3],
    pub angles_deg: [f64; 3],
    /// Voxels cropped from the low and high end of each axis.
    pub crop: [[usize; 2]; 3],
}

impl AugmentDraw {
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, dims: [usize; 3], rng: &mut R) -> Self {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let shift_vox = std::array::from_fn(|_| sym(cfg.translation_vox));
        let angles_deg = std::array::from_fn(|_| sym(cfg.rotation_deg));
        let crop = std::array::from_fn(|a| {
            if cfg.crop_fraction <= 0.0 {
                return [0, 0];
            }
            let total = rng.random_range(0.0..=cfg.crop_fraction) * dims[a] as f64;
            let share = rng.random_range(0.0..=1.0);
            [(total * share).floor() as usize, (total * (1.0 - share)).floor() as usize]
        });
        Self { shift_vox, angles_deg, crop }
    }
}

/// Applies `d` to an intensity/label pair on the same grid.
pub fn augment_with(v: &Volume, l: &LabelMap, d: &AugmentDraw) -> Result<(Volume, LabelMap), TrainError> {
    if v.grid != l.grid {
        return Err(TrainError::Data("augmentation needs intensities and labels on one grid".into()));
    }
    let grid = &v.grid;
    let moved = d.shift_vox != [0.0; 3] || d.angles_deg != [0.0; 3];
    let (mut v, mut l) = if moved {
        let centre = grid.affine.apply(std::array::from_fn(|a| (grid.dims[a] as f64 - 1.0) / 2.0));
        let mut pull = AffineTransform::rotation_about(d.angles_deg.map(f64::to_radians), centre);
        let shift = grid.affine.apply_linear(d.shift_vox);
        for a in 0..3 {
            pull.translation[a] += shift[a];
        }
        (resample_onto(v, &pull, grid, Interpolation::CubicBSpline)?, resample_labels_onto(l, &pull, grid)?)
    } else {
        (v.clone(), l.clone())
    };
    if d.crop.iter().any(|c| c[0] + c[1] > 0) {
        let [nx, ny, nz] = grid.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x, y, z];
                    if (0..3).any(|a| p[a] < d.crop[a][0] || p[a] + d.crop[a][1] >= grid.dims[a]) {
                        let i = grid.index(x, y, z);
                        v.data[i] = 0.0;
                        l.labels[i] = 0;
                    }
                }
            }
        }
    }
    Ok((v, l))
}

/// Random paired augmentation.
pub fn augment<R: Rng + ?Sized>(v: &Volume, l: &LabelMap, cfg: &AugmentConfig, rng: &mut R) -> Result<(Volume, LabelMap), TrainError> {
    if cfg.is_none() {
        return Ok((v.clone(), l.clone()));
    }
    let d = AugmentDraw::sample(cfg, v.grid.dims, rng);
    augment_with(v, l, &d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Share of training volumes held out for validation when the manifest
    /// tags none.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            max_epochs: 400,
            patience: 100,
            batch_size: 1,
            augment: AugmentConfig::default(),
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning rate must be finite and non-negative");
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return err("need 0 < patience <= max_epochs");
        }
        if self.batch_size == 0 {
            return err("batch size must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return err("validation fraction must lie in (0, 0.5]");
        }
        let a = &self.augment;
        if [a.translation_vox, a.rotation_deg, a.crop_fraction].iter().any(|v| !(*v >= 0.0)) || a.crop_fraction >= 1.0 {
            return err("augmentation ranges must be non-negative, crop below 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStop => "early-stop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Mean average Dice over validation volumes.
    pub validation_dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    /// Running minimum of the validation loss.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .scan(f64::INFINITY, |m, r| {
                *m = m.min(r.validation_loss);
                Some(*m)
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tvalidation_loss\tvalidation_dice\n");
        for r in &self.epochs {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", r.epoch, r.train_loss, r.validation_loss, r.validation_dice));
        }
        s.push_str(&format!("# best_epoch\t{}\n# stop_reason\t{}\n", self.best_epoch, self.stop_reason));
        s
    }
}

/// A training volume with its labels, both on the label grid, intensities
/// not yet normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub labels: LabelMap,
}

/// Reads one manifest record; intensities on a different grid are spline
/// resampled onto the label grid.
pub fn load_sample(entry: &ManifestEntry) -> Result<Sample, TrainError> {
    let labels = mvox::read_labels(&entry.labels)?;
    let mut image = mvox::read_intensity(&entry.volume)?;
    if image.grid != labels.grid {
        image = resample_onto(&image, &AffineTransform::identity(), &labels.grid, Interpolation::CubicBSpline)?;
    }
    Ok(Sample { image, labels })
}

pub fn load_split(manifest: &Manifest, modality: Modality, split: Split) -> Result<Vec<Sample>, TrainError> {
    manifest.select(modality, split).into_iter().map(load_sample).collect()
}

/// Training and validation samples: validation-tagged records when present,
/// otherwise a seeded carve-out of the training records.
pub fn training_sets(manifest: &Manifest, modality: Modality, cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>), TrainError> {
    let train = manifest.select(modality, Split::Train);
    let tagged = manifest.select(modality, Split::Validation);
    if !tagged.is_empty() {
        let t = train.into_iter().map(load_sample).collect::<Result<_, _>>()?;
        let v = tagged.into_iter().map(load_sample).collect::<Result<_, _>>()?;
        return Ok((t, v));
    }
    let n = train.len();
    let n_val = ((n as f64 * cfg.validation_fraction + 0.5).floor() as usize).max(1);
    if n < n_val + 2 {
        return Err(TrainError::Data(format!("{n} {modality} training volumes cannot supply a validation split")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[u64::MAX - 1])));
    let mut is_val = vec![false; n];
    order.iter().take(n_val).for_each(|&i| is_val[i] = true);
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (i, e) in train.into_iter().enumerate() {
        let s = load_sample(e)?;
        if is_val[i] {
            v.push(s);
        } else {
            t.push(s);
        }
    }
    Ok((t, v))
}

/// Normalized single-channel network input for one volume.
pub fn network_input(v: &Volume) -> ActivationField<f32> {
    let n = normalize_intensity(v).volume;
    let [x, y, z] = n.grid.dims;
    ActivationField::new(Shape::new(1, 1, x, y, z), n.data)
}

fn batch_input(images: &[Volume]) -> ActivationField<f32> {
    let [x, y, z] = images[0].grid.dims;
    let mut values = Vec::with_capacity(images.len() * x * y * z);
    for v in images {
        values.extend(network_input(v).values);
    }
    ActivationField::new(Shape::new(images.len(), 1, x, y, z), values)
}

/// Validation loss and mean average Dice with eval batch norm, no dropout.
pub fn evaluate(model: &mut UNet<f32>, samples: &[Sample]) -> Result<(f64, f64), TrainError> {
    let classes = model.spec.num_classes;
    let (mut loss, mut dice) = (0.0, 0.0);
    for s in samples {
        let mut g = Graph::new();
        let x = g.input(network_input(&s.image));
        let fp = model.forward(&mut g, x, Mode::Eval, Dropout::Off, false)?;
        let target = one_hot_labels(&s.labels.labels, classes);
        let l = g.combined_loss(fp.logits, &target)?;
        loss += g.value(l).item() as f64;
        let pred = argmax_labels(g.value(fp.probabilities), 0);
        dice += DiceReport::from_labels(&pred, &s.labels.labels).map(|r| r.average).unwrap_or(f64::NAN);
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, dice / n))
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Optimizer state at the best epoch.
    pub optimizer: Adam<f32>,
}

/// Trains `model` in place and leaves it at the best-validation epoch.
pub fn train(model: &mut UNet<f32>, train: &[Sample], validation: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(TrainError::Data(format!("need at least 2 training volumes, got {}", train.len())));
    }
    if validation.is_empty() {
        return Err(TrainError::Data("empty validation set".into()));
    }
    let dims = model.spec.input_dims;
    if let Some(s) = train.iter().chain(validation).find(|s| s.labels.grid.dims != dims || s.image.grid != s.labels.grid) {
        return Err(TrainError::Data(format!("volume on grid {:?} does not match model input {dims:?}", s.labels.grid.dims)));
    }
    let classes = model.spec.num_classes;
    let rate = model.spec.dropout_rate;
    let mut adam = Adam::new(cfg.learning_rate, &model.params.values);
    let mut epochs = Vec::new();
    let mut best: Option<(UNet<f32>, Adam<f32>)> = None;
    let (mut best_loss, mut best_epoch, mut since) = (f64::INFINITY, 0, 0);
    let mut stop_reason = StopReason::MaxEpochs;
    let mut history: Vec<f64> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[epoch as u64, 0])));
        let mut total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, chunk) in batches.iter().enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len() * train[0].labels.labels.len());
            for &i in chunk.iter() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[epoch as u64, 1, i as u64]));
                let (v, l) = augment(&train[i].image, &train[i].labels, &cfg.augment, &mut rng)?;
                images.push(v);
                labels.extend_from_slice(&l.labels);
            }
            let target = one_hot_labels(&labels, classes);
            let mut g = Graph::new();
            let x = g.input(batch_input(&images));
            let mut drng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[epoch as u64, 2, b as u64]));
            let dropout = if rate > 0.0 { Dropout::On { rate, rng: &mut drng } } else { Dropout::Off };
            let fp = model.forward(&mut g, x, Mode::Train, dropout, true)?;
            let root = g.combined_loss(fp.logits, &target)?;
            let value = g.value(root).item() as f64;
            history.push(value);
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b, loss: value, history });
            }
            total += value;
            g.backward(root)?;
            let grads: Vec<&[f32]> = fp.params.iter().map(|&p| g.grad(p).expect("parameters receive gradients")).collect();
            adam.update(&mut model.params.values, &grads);
        }
        let train_loss = total / batches.len() as f64;
        let (validation_loss, validation_dice) = evaluate(model, validation)?;
        if !validation_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: batches.len(), loss: validation_loss, history });
        }
        log::info!("epoch {epoch}: train {train_loss:.4} validation {validation_loss:.4} dice {validation_dice:.4}");
        epochs.push(EpochRecord { epoch, train_loss, validation_loss, validation_dice });
        if validation_loss < best_loss {
            best_loss = validation_loss;
            best_epoch = epoch;
            since = 0;
            best = Some((model.clone(), adam.clone()));
        } else {
            since += 1;
            if since >= cfg.patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    let (best_model, best_adam) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(TrainOutcome { log: TrainLog { epochs, best_epoch, stop_reason }, optimizer: best_adam })
}

/// Reads the manifest, splits it and trains on one modality.
pub fn train_from_manifest(model: &mut UNet<f32>, manifest_path: &Path, modality: Modality, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let manifest = Manifest::read(manifest_path)?;
    let (t, v) = training_sets(&manifest, modality, cfg)?;
    train(model, &t, &v, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, PhantomSpec};
    use crate::unet::ModelSpec;
    use crate::volume::Grid;

    fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
        let spec = PhantomSpec::desk([24, 24, 24], seed);
        (0..n as u64)
            .map(|k| {
                let mut s = spec.clone();
                s.jitter.rotation_deg = 0.0;
                s.jitter.translation_vox = 0.0;
                let subj = generate_subject(&s, k).unwrap();
                Sample { image: subj.volumes[&Modality::Mprage].clone(), labels: subj.labels }
            })
            .collect()
    }

    fn tiny_model(seed: u64, rate: f64) -> UNet<f32> {
        let mut spec = ModelSpec::desk([24, 24, 24]);
        spec.initial_features = 4;
        spec.dropout_rate = rate;
        UNet::build(spec, seed).unwrap()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig { learning_rate: 0.01, max_epochs: 3, patience: 3, augment: AugmentConfig::NONE, seed, ..TrainConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 500, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: 0.6, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_range_augmentation_is_identity() {
        let s = &tiny_samples(1, 1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (v, l) = augment(&s.image, &s.labels, &AugmentConfig::NONE, &mut rng).unwrap();
        assert_eq!(v, s.image);
        assert_eq!(l, s.labels);
        let d = AugmentDraw { shift_vox: [0.0; 3], angles_deg: [0.0; 3], crop: [[0, 0]; 3] };
        let (v, l) = augment_with(&s.image, &s.labels, &d).unwrap();
        assert_eq!((v, l), (s.image.clone(), s.labels.clone()));
    }

    #[test]
    fn translation_moves_labels_with_intensities() {
        let s = &tiny_samples(1, 2)[0];
        let d = AugmentDraw { shift_vox: [2.0, 0.0, 0.0], angles_deg: [0.0; 3], crop: [[0, 0]; 3] };
        let (v, l) = augment_with(&s.image, &s.labels, &d).unwrap();
        let [nx, ny, nz] = s.image.grid.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx - 2 {
                    assert_eq!(l.at(x, y, z), s.labels.at(x + 2, y, z));
                    assert_eq!(v.at(x, y, z), s.image.at(x + 2, y, z));
                }
            }
        }
    }

    #[test]
    fn rotation_never_invents_labels() {
        let s = &tiny_samples(1, 3)[0];
        let before = s.labels.label_set();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let cfg = AugmentConfig { translation_vox: 0.0, rotation_deg: 10.0, crop_fraction: 0.0 };
            let (_, l) = augment(&s.image, &s.labels, &cfg, &mut rng).unwrap();
            assert!(l.label_set().iter().all(|v| before.contains(v)));
        }
    }

    #[test]
    fn crop_pads_back_to_the_same_dims() {
        let s = &tiny_samples(1, 4)[0];
        let d = AugmentDraw { shift_vox: [0.0; 3], angles_deg: [0.0; 3], crop: [[1, 2], [0, 0], [3, 0]] };
        let (v, l) = augment_with(&s.image, &s.labels, &d).unwrap();
        assert_eq!(v.grid, s.image.grid);
        assert_eq!(l.at(0, 5, 5), 0);
        assert_eq!(l.at(23, 12, 12), 0);
        assert_eq!(l.at(22, 12, 12), 0);
        assert_eq!(v.at(12, 12, 2), 0.0);
        assert_eq!(l.at(12, 12, 12), s.labels.at(12, 12, 12));
        assert_ne!(l.at(12, 12, 12), 0);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let s = &tiny_samples(1, 4)[0];
        let other = LabelMap::background(Grid::canonical([24, 24, 8], [1.0; 3]).unwrap());
        assert!(augment_with(&s.image, &other, &AugmentDraw { shift_vox: [0.0; 3], angles_deg: [0.0; 3], crop: [[0, 0]; 3] }).is_err());
    }

    #[test]
    fn training_reduces_the_loss() {
        let data = tiny_samples(3, 5);
        let mut model = tiny_model(1, 0.0);
        let cfg = TrainConfig { max_epochs: 50, patience: 50, ..quick(3) };
        let out = train(&mut model, &data[..2], &data[2..], &cfg).unwrap();
        let first = out.log.epochs[0].train_loss;
        let last = out.log.epochs.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn frozen_learning_rate_stops_early_at_epoch_four() {
        let one = tiny_samples(2, 6);
        let data = vec![one[0].clone(), one[0].clone()];
        let mut model = tiny_model(2, 0.0);
        let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 50, patience: 3, augment: AugmentConfig::NONE, seed: 1, ..TrainConfig::default() };
        let out = train(&mut model, &data, &one[1..], &cfg).unwrap();
        assert_eq!(out.log.stop_reason, StopReason::EarlyStop);
        assert_eq!(out.log.epochs.len(), 4);
        assert_eq!(out.log.best_epoch, 1);
        assert!(out.log.to_tsv().contains("early-stop"));
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_samples(3, 7);
        let cfg = TrainConfig { augment: AugmentConfig::default(), ..quick(9) };
        let run = || {
            let mut model = tiny_model(3, 0.2);
            let out = train(&mut model, &data[..2], &data[2..], &cfg).unwrap();
            (out.log, model)
        };
        let (la, ma) = run();
        let (lb, mb) = run();
        assert_eq!(la, lb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn returned_model_is_the_best_epoch() {
        let data = tiny_samples(3, 8);
        let mut model = tiny_model(4, 0.0);
        let cfg = TrainConfig { learning_rate: 0.05, max_epochs: 8, patience: 8, ..quick(2) };
        let out = train(&mut model, &data[..2], &data[2..], &cfg).unwrap();
        let best = out.log.epochs[out.log.best_epoch - 1].validation_loss;
        let (again, _) = evaluate(&mut model, &data[2..]).unwrap();
        assert_eq!(again, best);
        let mins = out.log.best_so_far();
        assert!(mins.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let data = tiny_samples(3, 9);
        let mut model = tiny_model(5, 0.0);
        let last = model.params.values.len() - 1;
        model.params.values[last].values.iter_mut().for_each(|b| *b = f32::NAN);
        match train(&mut model, &data[..2], &data[2..], &quick(1)) {
            Err(TrainError::NonFinite { epoch, batch, history, .. }) => {
                assert_eq!((epoch, batch), (1, 0));
                assert_eq!(history.len(), 1);
            }
            other => panic!("expected non-finite error, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn too_little_data_is_rejected() {
        let data = tiny_samples(2, 10);
        let mut model = tiny_model(6, 0.0);
        assert!(matches!(train(&mut model, &data[..1], &data[1..], &quick(1)), Err(TrainError::Data(_))));
    }
}
