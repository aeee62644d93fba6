//! Overlap metrics and correlation statistics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::loss::DICE_EPS;
use crate::volume::{OneHot, MAX_LABEL};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction has {pred} elements, truth {truth}")]
    ShapeMismatch { pred: usize, truth: usize },
    #[error("correlation needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("correlation undefined: zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("no foreground structure is present in the ground truth")]
    NoStructures,
}

/// Smoothed Dice `(2·inter + ε) / (|A| + |B| + ε)`.
pub fn smoothed_dice(intersection: f64, pred_sum: f64, truth_sum: f64) -> f64 {
    (2.0 * intersection + DICE_EPS) / (pred_sum + truth_sum + DICE_EPS)
}

/// Per-class Dice of class-major soft probabilities against a one-hot truth.
pub fn dice_soft(p: &[f64], truth: &OneHot) -> Result<Vec<f64>, MetricError> {
    let v = truth.num_voxels;
    if p.len() != truth.num_classes * v {
        return Err(MetricError::ShapeMismatch { pred: p.len(), truth: truth.num_classes * v });
    }
    Ok((0..truth.num_classes)
        .map(|s| {
            let ps = &p[s * v..(s + 1) * v];
            let ts = truth.plane(s);
            let inter: f64 = ps.iter().zip(ts).map(|(&a, &t)| a * t as f64).sum();
            let sp: f64 = ps.iter().sum();
            smoothed_dice(inter, sp, truth.class_sum(s) as f64)
        })
        .collect())
}

/// Per-class Dice of hard label maps, with the voxel counts it was built from.
pub fn dice_hard(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<(Vec<f64>, Vec<u64>), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::ShapeMismatch { pred: pred.len(), truth: truth.len() });
    }
    let mut inter = vec![0u64; num_classes];
    let mut np = vec![0u64; num_classes];
    let mut nt = vec![0u64; num_classes];
    for (&a, &b) in pred.iter().zip(truth) {
        np[a as usize] += 1;
        nt[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    let d = (0..num_classes).map(|s| smoothed_dice(inter[s] as f64, np[s] as f64, nt[s] as f64)).collect();
    Ok((d, nt))
}

/// Foreground Dice summary of one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// Dice of every structure present in the truth.
    pub per_structure: BTreeMap<u8, f64>,
    /// Ground-truth voxel counts `V_s`.
    pub structure_volumes: BTreeMap<u8, u64>,
    /// Structures 1..=27 absent from the truth, excluded from both means.
    pub absent: Vec<u8>,
    pub average: f64,
    pub weighted: f64,
}

impl DiceReport {
    /// Builds the report from per-structure Dice and ground-truth volumes.
    /// Entries with zero volume are treated as absent.
    pub fn from_parts(dice: &BTreeMap<u8, f64>, volumes: &BTreeMap<u8, u64>) -> Result<Self, MetricError> {
        let mut per_structure = BTreeMap::new();
        let mut structure_volumes = BTreeMap::new();
        let mut absent = Vec::new();
        for s in 1..=MAX_LABEL {
            match (dice.get(&s), volumes.get(&s).copied().unwrap_or(0)) {
                (Some(&d), v) if v > 0 => {
                    per_structure.insert(s, d);
                    structure_volumes.insert(s, v);
                }
                _ => absent.push(s),
            }
        }
        if per_structure.is_empty() {
            return Err(MetricError::NoStructures);
        }
        let average = average_dice(&per_structure);
        let weighted = weighted_dice(&per_structure, &structure_volumes);
        Ok(Self { per_structure, structure_volumes, absent, average, weighted })
    }

    /// Hard-mask report of a predicted label map against the truth.
    pub fn from_labels(pred: &[u8], truth: &[u8]) -> Result<Self, MetricError> {
        let (d, v) = dice_hard(pred, truth, MAX_LABEL as usize + 1)?;
        let dice = (1..=MAX_LABEL).map(|s| (s, d[s as usize])).collect();
        let vols = (1..=MAX_LABEL).map(|s| (s, v[s as usize])).collect();
        Self::from_parts(&dice, &vols)
    }
}

/// `D_A`: arithmetic mean of the per-structure Dice.
pub fn average_dice(per_structure: &BTreeMap<u8, f64>) -> f64 {
    per_structure.values().sum::<f64>() / per_structure.len() as f64
}

/// `D_V = Σ V_s D_s / Σ V_s`.
pub fn weighted_dice(per_structure: &BTreeMap<u8, f64>, volumes: &BTreeMap<u8, u64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, &d) in per_structure {
        let v = volumes.get(s).copied().unwrap_or(0) as f64;
        num += v * d;
        den += v;
    }
    num / den
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::ShapeMismatch { pred: xs.len(), truth: ys.len() });
    }
    let n = xs.len();
    if n < 3 {
        return Err(MetricError::TooFewPoints(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance("ys"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; ties share their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson on tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    pearson(&ranks(xs), &ranks(ys))
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}
