//! Single-pass and MC-dropout segmentation with volume-based uncertainty.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{ActivationField, Mode};
use crate::modality::Modality;
use crate::seed;
use crate::trainer::network_input;
use crate::unet::{Dropout, UNet, UnetError};
use crate::volume::{LabelMap, StructureTable, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum McError {
    #[error("MC config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] UnetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Per-voxel argmax over the channel axis of batch item `batch`; ties go to
/// the lowest class index.
pub fn argmax_labels<T: Copy + PartialOrd>(p: &ActivationField<T>, batch: usize) -> Vec<u8> {
    let s = p.shape;
    let n = s.x * s.y * s.z;
    let base = batch * s.channels * n;
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut top = p.values[base + i];
            for c in 1..s.channels {
                let v = p.values[base + c * n + i];
                if v > top {
                    top = v;
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Argmax segmentation of a softmax field laid out on `grid`.
pub fn hard_segment(p: &ActivationField<f32>, grid: &crate::volume::Grid) -> Result<LabelMap, McError> {
    Ok(LabelMap::new(grid.clone(), argmax_labels(p, 0))?)
}

/// Deterministic segmentation: eval batch norm, dropout off.
pub fn segment(model: &mut UNet<f32>, v: &Volume) -> Result<LabelMap, McError> {
    let p = model.infer(network_input(v), Mode::Eval, Dropout::Off)?;
    hard_segment(&p, &v.grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub samples: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { samples: 15, dropout_rate: 0.2, seed: 0 }
    }
}

/// Outputs of the individual stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct McSampleSet {
    pub seeds: Vec<u64>,
    /// Hard segmentation of each pass.
    pub labels: Vec<Vec<u8>>,
}

impl McSampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Voxel count of each structure in each sample.
    pub fn structure_volumes(&self, structures: &StructureTable) -> Vec<BTreeMap<u8, f64>> {
        self.labels
            .iter()
            .map(|l| {
                let mut counts = [0u64; 256];
                l.iter().for_each(|&v| counts[v as usize] += 1);
                structures.indices().map(|s| (s, counts[s as usize] as f64)).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSegmentation {
    pub labels: LabelMap,
    pub samples: McSampleSet,
}

/// Fused MC-dropout segmentation: argmax of the summed softmax of
/// `samples` passes with independent dropout masks.
pub fn mc_segment(model: &mut UNet<f32>, v: &Volume, cfg: &McConfig) -> Result<McSegmentation, McError> {
    if cfg.samples < 1 {
        return Err(McError::Config("at least one MC sample is required".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout_rate) {
        return Err(McError::Config(format!("dropout rate {} outside [0, 1)", cfg.dropout_rate)));
    }
    let input = network_input(v);
    let mut sum: Option<ActivationField<f64>> = None;
    let mut set = McSampleSet { seeds: Vec::with_capacity(cfg.samples), labels: Vec::with_capacity(cfg.samples) };
    for k in 0..cfg.samples {
        let s = seed::derive(cfg.seed, &[k as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let dropout = if cfg.dropout_rate > 0.0 { Dropout::On { rate: cfg.dropout_rate, rng: &mut rng } } else { Dropout::Off };
        let p = model.infer(input.clone(), Mode::Eval, dropout)?;
        set.seeds.push(s);
        set.labels.push(argmax_labels(&p, 0));
        match sum.as_mut() {
            None => sum = Some(ActivationField::new(p.shape, p.values.iter().map(|&x| x as f64).collect())),
            Some(acc) => acc.values.iter_mut().zip(&p.values).for_each(|(a, &x)| *a += x as f64),
        }
    }
    let sum = sum.expect("at least one sample");
    Ok(McSegmentation { labels: LabelMap::new(v.grid.clone(), argmax_labels(&sum, 0))?, samples: set })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Warn,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Warn => "warn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureSpread {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub per_structure: BTreeMap<u8, StructureSpread>,
    /// Structures with zero mean volume, left out of the aggregate.
    pub excluded: Vec<u8>,
    pub cv: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// CV report from per-sample structure volumes.
pub fn uncertainty_from_volumes(volumes: &[BTreeMap<u8, f64>], threshold: f64) -> Result<UncertaintyReport, McError> {
    if volumes.len() < 2 {
        return Err(McError::Config(format!("CV needs at least 2 samples, got {}", volumes.len())));
    }
    if !(threshold >= 0.0) {
        return Err(McError::Config(format!("invalid CV threshold {threshold}")));
    }
    let n = volumes.len() as f64;
    let mut per_structure = BTreeMap::new();
    let mut excluded = Vec::new();
    for &s in volumes[0].keys() {
        let xs: Vec<f64> = volumes.iter().map(|v| v.get(&s).copied().unwrap_or(0.0)).collect();
        let mean = xs.iter().sum::<f64>() / n;
        if mean <= 0.0 {
            excluded.push(s);
            continue;
        }
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        per_structure.insert(s, StructureSpread { mean, std, cv: std / mean });
    }
    let cv = if per_structure.is_empty() {
        f64::INFINITY
    } else {
        per_structure.values().map(|s| s.cv).sum::<f64>() / per_structure.len() as f64
    };
    let verdict = if cv > threshold { Verdict::Warn } else { Verdict::Pass };
    Ok(UncertaintyReport { per_structure, excluded, cv, threshold, verdict })
}

pub fn uncertainty(samples: &McSampleSet, structures: &StructureTable, threshold: f64) -> Result<UncertaintyReport, McError> {
    uncertainty_from_volumes(&samples.structure_volumes(structures), threshold)
}

/// Default warn threshold for a modality.
pub fn default_threshold(m: Modality) -> f64 {
    m.cv_threshold()
}

impl UncertaintyReport {
    pub fn to_text(&self, structures: &StructureTable) -> String {
        let mut s = String::from("structure\tname\tmean_voxels\tstd_voxels\tcv\n");
        for (k, r) in &self.per_structure {
            s.push_str(&format!("{k}\t{}\t{:.3}\t{:.3}\t{:.6}\n", structures.name(*k), r.mean, r.std, r.cv));
        }
        for k in &self.excluded {
            s.push_str(&format!("{k}\t{}\tabsent\tabsent\tabsent\n", structures.name(*k)));
        }
        s.push_str(&format!("summary\tcv={:.6}\tthreshold={:.6}\tverdict={}\n", self.cv, self.threshold, self.verdict));
        s
    }
}
