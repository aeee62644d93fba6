//! Synthetic multi-modality head phantoms with ground-truth labels.
//!
//! Anatomy is a set of labelled ellipsoids in template coordinates (fractions
//! of the field of view), painted in order so later shapes overwrite earlier
//! ones. Each subject draws a small rigid pose, per-axis radius scales and a
//! smooth folding of the white-matter surface, so the grey-matter ribbon has
//! subject-specific thickness. Every modality renders the same anatomy on its
//! own grid from a per-label contrast table plus Gaussian noise; thick-slice
//! grids average several sub-samples per voxel.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine::AffineTransform;
use crate::manifest::{Manifest, ManifestEntry, ManifestError, Split};
use crate::modality::Modality;
use crate::mvox::{self, FormatError};
use crate::seed;
use crate::volume::{labels as lbl, Grid, LabelMap, Volume, VolumeError, MAX_LABEL};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom spec: {0}")]
    Spec(String),
    #[error("phantom config: {0}")]
    Parse(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labelled ellipsoid. With `right` set, voxels past the midline take
/// that label instead of `left`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub name: String,
    pub left: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<u8>,
    /// Centre as a fraction of the field of view.
    pub centre: [f64; 3],
    /// Semi-axes as fractions of the field of view.
    pub radii: [f64; 3],
    /// Modulate the surface with the subject's folding pattern.
    #[serde(default)]
    pub folded: bool,
}

impl Shape {
    fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        std::iter::once(self.left).chain(self.right)
    }
}

/// Interhemispheric gap: voxels of `labels` within `width` voxels of the
/// midline and above height `above` (fraction) become background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fissure {
    pub width: f64,
    pub above: f64,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub label: u8,
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityProfile {
    pub modality: Modality,
    /// Voxel spacing in mm; the field of view is shared with the label grid.
    pub spacing: [f64; 3],
    pub tissues: Vec<Tissue>,
}

impl ModalityProfile {
    pub fn tissue(&self, label: u8) -> Option<&Tissue> {
        self.tissues.iter().find(|t| t.label == label)
    }
}

/// Per-subject variation ranges (uniform, symmetric).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub rotation_deg: f64,
    pub translation_vox: f64,
    /// Relative per-axis radius change.
    pub radius_fraction: f64,
    /// Relative surface displacement of folded shapes.
    pub fold_amplitude: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { rotation_deg: 0.0, translation_vox: 0.0, radius_fraction: 0.0, fold_amplitude: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    /// Label-grid spacing in mm.
    pub spacing: [f64; 3],
    pub jitter: Jitter,
    pub fissure: Option<Fissure>,
    pub structures: Vec<Shape>,
    pub modalities: Vec<ModalityProfile>,
}

/// Margin every shape must keep from the volume edge, in voxels.
pub const EDGE_MARGIN: f64 = 2.0;

fn shape(name: &str, left: u8, right: Option<u8>, centre: [f64; 3], radii: [f64; 3], folded: bool) -> Shape {
    Shape { name: name.into(), left, right, centre, radii, folded }
}

fn mirrored(name: &str, left: u8, right: u8, centre: [f64; 3], radii: [f64; 3]) -> [Shape; 2] {
    [
        shape(&format!("{name} left"), left, None, centre, radii, false),
        shape(&format!("{name} right"), right, None, [1.0 - centre[0], centre[1], centre[2]], radii, false),
    ]
}

fn profile(modality: Modality, spacing: [f64; 3], sigma: f64, means: [f64; 7]) -> ModalityProfile {
    // background, WM, GM, ventricle, putamen, hippocampus, brainstem
    let [bg, wm, gm, csf, put, hip, bs] = means;
    let pairs = [
        (lbl::BACKGROUND, bg),
        (lbl::WM_LEFT, wm),
        (lbl::WM_RIGHT, wm),
        (lbl::GM_LEFT, gm),
        (lbl::GM_RIGHT, gm),
        (lbl::LAT_VENTRICLE_LEFT, csf),
        (lbl::LAT_VENTRICLE_RIGHT, csf),
        (lbl::PUTAMEN_LEFT, put),
        (lbl::PUTAMEN_RIGHT, put),
        (lbl::HIPPOCAMPUS_LEFT, hip),
        (lbl::HIPPOCAMPUS_RIGHT, hip),
        (lbl::BRAINSTEM, bs),
    ];
    let tissues = pairs.iter().map(|&(label, mean)| Tissue { label, mean, sigma }).collect();
    ModalityProfile { modality, spacing, tissues }
}

impl PhantomSpec {
    /// Eleven-structure head at `dims` voxels of 1 mm.
    pub fn desk(dims: [usize; 3], seed: u64) -> Self {
        let mut structures = vec![
            shape("cortex", lbl::GM_LEFT, Some(lbl::GM_RIGHT), [0.5, 0.5, 0.53], [0.35, 0.35, 0.3], false),
            shape("white matter", lbl::WM_LEFT, Some(lbl::WM_RIGHT), [0.5, 0.5, 0.53], [0.27, 0.27, 0.22], true),
        ];
        structures.extend(mirrored("ventricle", lbl::LAT_VENTRICLE_LEFT, lbl::LAT_VENTRICLE_RIGHT, [0.43, 0.5, 0.63], [0.06, 0.17, 0.09]));
        structures.extend(mirrored("putamen", lbl::PUTAMEN_LEFT, lbl::PUTAMEN_RIGHT, [0.3, 0.38, 0.47], [0.08, 0.11, 0.1]));
        structures.extend(mirrored("hippocampus", lbl::HIPPOCAMPUS_LEFT, lbl::HIPPOCAMPUS_RIGHT, [0.33, 0.66, 0.4], [0.08, 0.12, 0.075]));
        structures.push(shape("brainstem", lbl::BRAINSTEM, None, [0.5, 0.6, 0.32], [0.08, 0.08, 0.17], false));
        Self {
            seed,
            dims,
            spacing: [1.0; 3],
            jitter: Jitter { rotation_deg: 2.0, translation_vox: 0.5, radius_fraction: 0.04, fold_amplitude: 0.3 },
            fissure: Some(Fissure { width: 1.0, above: 0.55, labels: vec![lbl::GM_LEFT, lbl::GM_RIGHT] }),
            structures,
            modalities: vec![
                profile(Modality::Mprage, [1.0, 1.0, 1.0], 4.0, [0.0, 80.0, 50.0, 15.0, 65.0, 52.0, 72.0]),
                profile(Modality::Flair, [1.0, 1.0, 2.0], 4.0, [0.0, 45.0, 60.0, 5.0, 55.0, 62.0, 50.0]),
                profile(Modality::Dwi, [1.0, 1.0, 4.0], 5.0, [0.0, 44.0, 58.0, 10.0, 54.0, 60.0, 48.0]),
                profile(Modality::Ct, [1.0, 1.0, 1.0], 5.0, [0.0, 30.5, 31.0, 8.0, 38.0, 36.0, 33.0]),
            ],
        }
    }

    pub fn profile(&self, m: Modality) -> Option<&ModalityProfile> {
        self.modalities.iter().find(|p| p.modality == m)
    }

    /// Every label some shape can paint.
    pub fn generated_labels(&self) -> Vec<u8> {
        let mut v: Vec<u8> = std::iter::once(0).chain(self.structures.iter().flat_map(|s| s.labels())).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let err = |m: String| Err(PhantomError::Spec(m));
        if self.dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return err(format!("bad geometry {:?} / {:?}", self.dims, self.spacing));
        }
        if self.structures.is_empty() {
            return err("no structures".into());
        }
        let j = &self.jitter;
        if [j.rotation_deg, j.translation_vox, j.radius_fraction, j.fold_amplitude].iter().any(|v| !(*v >= 0.0)) || j.radius_fraction >= 1.0 {
            return err(format!("bad jitter {j:?}"));
        }
        let theta = 3f64.sqrt() * j.rotation_deg.to_radians();
        for s in &self.structures {
            if s.labels().any(|l| l == 0 || l > MAX_LABEL) {
                return err(format!("{}: label outside 1..={MAX_LABEL}", s.name));
            }
            if s.radii.iter().any(|&r| !(r > 0.0)) {
                return err(format!("{}: radii must be positive", s.name));
            }
            // worst case under jitter: a rotation by |θ| tilts the support
            // direction by at most |θ| and moves the centre by |θ|·|c − centre|
            let grow = (1.0 + j.radius_fraction) * if s.folded { 1.0 + j.fold_amplitude } else { 1.0 };
            let r: [f64; 3] = std::array::from_fn(|a| s.radii[a] * self.dims[a] as f64 * grow);
            let r_max = r.iter().cloned().fold(0.0, f64::max);
            let offset = (0..3).map(|a| ((s.centre[a] - 0.5) * self.dims[a] as f64).powi(2)).sum::<f64>().sqrt();
            for a in 0..3 {
                let n = self.dims[a] as f64;
                let c = s.centre[a] * n - 0.5;
                let slack = r[a] + j.translation_vox + theta * (r_max + offset);
                if c - slack < EDGE_MARGIN || c + slack > n - 1.0 - EDGE_MARGIN {
                    return err(format!("{}: extends within {EDGE_MARGIN} voxels of the edge on axis {a}", s.name));
                }
            }
        }
        if self.modalities.is_empty() {
            return err("no modality profiles".into());
        }
        for p in &self.modalities {
            if p.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return err(format!("{}: bad spacing {:?}", p.modality, p.spacing));
            }
            for l in self.generated_labels() {
                match p.tissue(l) {
                    None => return err(format!("{}: contrast table has no entry for label {l}", p.modality)),
                    Some(t) if !(t.sigma >= 0.0 && t.mean.is_finite()) => {
                        return err(format!("{}: bad tissue entry for label {l}", p.modality))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("phantom spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, PhantomError> {
        let spec: Self = toml::from_str(text).map_err(|e| PhantomError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PhantomError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

const FOLD_WAVES: usize = 4;

/// One subject's anatomy as a labelling function of world position.
pub struct Anatomy {
    /// World → template coordinates.
    pose: AffineTransform,
    /// Per structure: centre and semi-axes in mm.
    placed: Vec<([f64; 3], [f64; 3])>,
    waves: [([f64; 3], f64); FOLD_WAVES],
    fold_amplitude: f64,
    midline: f64,
    fissure: Option<(f64, f64, Vec<u8>)>,
    spec: PhantomSpec,
}

impl Anatomy {
    pub fn new(spec: &PhantomSpec, subject_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[subject_seed, 0]));
        let mut sym = |range: f64| rng.random_range(-1.0..=1.0) * range;
        let j = spec.jitter;
        let angles: [f64; 3] = std::array::from_fn(|_| sym(j.rotation_deg.to_radians()));
        let shift: [f64; 3] = std::array::from_fn(|a| sym(j.translation_vox) * spec.spacing[a]);
        let n: [f64; 3] = std::array::from_fn(|a| spec.dims[a] as f64 * spec.spacing[a]);
        let centre: [f64; 3] = std::array::from_fn(|a| (spec.dims[a] as f64 - 1.0) / 2.0 * spec.spacing[a]);
        let placed = spec
            .structures
            .iter()
            .map(|s| {
                let c = std::array::from_fn(|a| s.centre[a] * n[a] - 0.5 * spec.spacing[a]);
                let r = std::array::from_fn(|a| s.radii[a] * n[a] * (1.0 + sym(j.radius_fraction)));
                (c, r)
            })
            .collect();
        let waves = std::array::from_fn(|_| {
            let mut d: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let freq = rng.random_range(2.0..4.0);
            d.iter_mut().for_each(|v| *v *= freq / norm);
            (d, rng.random_range(0.0..std::f64::consts::TAU))
        });
        let mut forward = AffineTransform::rotation_about(angles, centre);
        for a in 0..3 {
            forward.translation[a] += shift[a];
        }
        let pose = forward.inverse().expect("rotation is invertible");
        let fissure = spec.fissure.as_ref().map(|f| (f.width * spec.spacing[0] / 2.0, f.above * n[2] - 0.5 * spec.spacing[2], f.labels.clone()));
        Self { pose, placed, waves, fold_amplitude: j.fold_amplitude, midline: centre[0], fissure, spec: spec.clone() }
    }

    /// Template anatomy without any subject variation.
    pub fn template(spec: &PhantomSpec) -> Self {
        let mut s = spec.clone();
        s.jitter = Jitter::NONE;
        Self::new(&s, 0)
    }

    fn fold(&self, dir: [f64; 3]) -> f64 {
        self.waves.iter().map(|(w, phase)| (std::f64::consts::PI * (w[0] * dir[0] + w[1] * dir[1] + w[2] * dir[2]) + phase).cos()).sum::<f64>()
            / FOLD_WAVES as f64
    }

    pub fn label_at(&self, world: [f64; 3]) -> u8 {
        let u = self.pose.apply(world);
        let mut label = 0;
        for (s, (c, r)) in self.spec.structures.iter().zip(&self.placed) {
            let d: [f64; 3] = std::array::from_fn(|a| (u[a] - c[a]) / r[a]);
            let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let limit = if s.folded && self.fold_amplitude > 0.0 && rho > 0.0 {
                1.0 + self.fold_amplitude * self.fold([d[0] / rho, d[1] / rho, d[2] / rho])
            } else {
                1.0
            };
            if rho <= limit {
                label = match s.right {
                    Some(r) if u[0] > self.midline => r,
                    _ => s.left,
                };
            }
        }
        if let Some((half, above, labels)) = &self.fissure {
            if (u[0] - self.midline).abs() < *half && u[2] > *above && labels.contains(&label) {
                label = 0;
            }
        }
        label
    }

    pub fn label_grid(&self) -> Grid {
        Grid::canonical(self.spec.dims, self.spec.spacing).expect("validated spec")
    }

    pub fn labels(&self) -> LabelMap {
        let grid = self.label_grid();
        let [nx, ny, nz] = grid.dims;
        let mut out = Vec::with_capacity(grid.num_voxels());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(self.label_at(grid.affine.apply([x as f64, y as f64, z as f64])));
                }
            }
        }
        LabelMap { grid, labels: out }
    }

    /// Grid of `spacing` covering the label grid's field of view.
    pub fn modality_grid(&self, spacing: [f64; 3]) -> Grid {
        let s = self.spec.spacing;
        let dims = std::array::from_fn(|a| ((self.spec.dims[a] as f64 * s[a] / spacing[a]).round() as usize).max(1));
        let mut affine = AffineTransform::scaling(spacing);
        affine.translation = std::array::from_fn(|a| 0.5 * spacing[a] - 0.5 * s[a]);
        Grid::new(dims, spacing, affine).expect("positive spacing")
    }

    /// Intensity volume from `tissues` on `grid`, noise drawn from `rng`.
    pub fn render(&self, grid: &Grid, tissues: &[Tissue], rng: &mut ChaCha8Rng) -> Volume {
        let table: BTreeMap<u8, Tissue> = tissues.iter().map(|t| (t.label, *t)).collect();
        let k: [usize; 3] = std::array::from_fn(|a| ((grid.spacing[a] / self.spec.spacing[a]).round() as usize).max(1));
        let inv_k = 1.0 / (k[0] * k[1] * k[2]) as f64;
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.num_voxels());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (mut mean, mut var) = (0.0, 0.0);
                    for c in 0..k[2] {
                        for b in 0..k[1] {
                            for a in 0..k[0] {
                                let sub = [
                                    x as f64 + (a as f64 + 0.5) / k[0] as f64 - 0.5,
                                    y as f64 + (b as f64 + 0.5) / k[1] as f64 - 0.5,
                                    z as f64 + (c as f64 + 0.5) / k[2] as f64 - 0.5,
                                ];
                                let t = table[&self.label_at(grid.affine.apply(sub))];
                                mean += t.mean;
                                var += t.sigma * t.sigma;
                            }
                        }
                    }
                    let sigma = (var * inv_k).sqrt();
                    let noise: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    data.push((mean * inv_k + sigma * noise) as f32);
                }
            }
        }
        Volume { grid: grid.clone(), data }
    }
}

/// Post-hoc degradations used to produce low-quality inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    /// Additive Gaussian noise with σ = fraction × intensity range.
    Noise(f64),
    /// A cuboid with sides `fraction` × dims set to the minimum intensity.
    Occlusion(f64),
    /// Render with another modality's contrast table.
    ContrastSwap(Modality),
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::Noise(v) => write!(f, "noise:{v}"),
            Corruption::Occlusion(v) => write!(f, "occlusion:{v}"),
            Corruption::ContrastSwap(m) => write!(f, "swap:{m}"),
        }
    }
}

impl FromStr for Corruption {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.trim().split_once(':').ok_or_else(|| format!("corruption {s:?}: expected kind:value"))?;
        let frac = || arg.parse::<f64>().ok().filter(|v| v.is_finite() && *v >= 0.0).ok_or_else(|| format!("corruption {s:?}: bad value"));
        match kind {
            "noise" => Ok(Corruption::Noise(frac()?)),
            "occlusion" if frac()? <= 1.0 => Ok(Corruption::Occlusion(frac()?)),
            "swap" => arg.parse().map(Corruption::ContrastSwap).map_err(|e| e.to_string()),
            _ => Err(format!("corruption {s:?}: unknown kind")),
        }
    }
}

/// Applies a noise or occlusion corruption; contrast swaps happen at render time.
pub fn corrupt(v: &Volume, c: Corruption, rng: &mut ChaCha8Rng) -> Volume {
    let mut out = v.clone();
    let (lo, hi) = v.min_max();
    match c {
        Corruption::Noise(fraction) => {
            let sigma = fraction * (hi - lo) as f64;
            for x in out.data.iter_mut() {
                *x += (sigma * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        Corruption::Occlusion(fraction) => {
            let d = v.grid.dims;
            let side: [usize; 3] = std::array::from_fn(|a| ((d[a] as f64 * fraction).round() as usize).clamp(1, d[a]));
            let start: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=d[a] - side[a]));
            for z in start[2]..start[2] + side[2] {
                for y in start[1]..start[1] + side[1] {
                    for x in start[0]..start[0] + side[0] {
                        let i = v.grid.index(x, y, z);
                        out.data[i] = lo;
                    }
                }
            }
        }
        Corruption::ContrastSwap(_) => {}
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub labels: LabelMap,
    pub volumes: BTreeMap<Modality, Volume>,
}

pub fn generate_subject(spec: &PhantomSpec, subject_seed: u64) -> Result<Subject, PhantomError> {
    generate_subject_with(spec, subject_seed, None)
}

/// Subject with every modality degraded by `corruption`.
pub fn generate_subject_with(spec: &PhantomSpec, subject_seed: u64, corruption: Option<Corruption>) -> Result<Subject, PhantomError> {
    spec.validate()?;
    let anatomy = Anatomy::new(spec, subject_seed);
    Ok(render_subject(spec, &anatomy, subject_seed, corruption, false))
}

/// Noise-free template anatomy with every modality on the label grid; used as
/// the registration reference.
pub fn generate_atlas(spec: &PhantomSpec) -> Result<Subject, PhantomError> {
    spec.validate()?;
    let mut quiet = spec.clone();
    for p in quiet.modalities.iter_mut() {
        p.tissues.iter_mut().for_each(|t| t.sigma = 0.0);
    }
    let anatomy = Anatomy::template(&quiet);
    Ok(render_subject(&quiet, &anatomy, 0, None, true))
}

fn render_subject(spec: &PhantomSpec, anatomy: &Anatomy, subject_seed: u64, corruption: Option<Corruption>, on_label_grid: bool) -> Subject {
    let labels = anatomy.labels();
    let mut volumes = BTreeMap::new();
    for p in &spec.modalities {
        let grid = if on_label_grid { labels.grid.clone() } else { anatomy.modality_grid(p.spacing) };
        let tissues = match corruption {
            Some(Corruption::ContrastSwap(other)) => spec.profile(other).map_or(&p.tissues, |q| &q.tissues),
            _ => &p.tissues,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[subject_seed, 1 + p.modality.ordinal()]));
        let mut v = anatomy.render(&grid, tissues, &mut rng);
        if let Some(c) = corruption {
            let mut crng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[subject_seed, 100 + p.modality.ordinal()]));
            v = corrupt(&v, c, &mut crng);
        }
        volumes.insert(p.modality, v);
    }
    Subject { labels, volumes }
}

/// `round(x)` with halves rounded up.
fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    pub test_fraction: f64,
    /// Fraction of subjects tagged for validation; 0 leaves the carve-out to the trainer.
    pub validation_fraction: f64,
    /// One extra test subject per entry, degraded accordingly.
    pub corrupted: Vec<Corruption>,
    /// Modalities to write; empty means all in the spec.
    pub modalities: Vec<Modality>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_subjects: 20, test_fraction: 0.1, validation_fraction: 0.0, corrupted: Vec::new(), modalities: Vec::new() }
    }
}

/// Split sizes `(train, validation, test)` for `n` subjects.
pub fn split_counts(n: usize, test_fraction: f64, validation_fraction: f64) -> (usize, usize, usize) {
    let test = round_half_up(n as f64 * test_fraction).min(n);
    let val = round_half_up(n as f64 * validation_fraction).min(n - test);
    (n - test - val, val, test)
}

/// Writes `out/atlas/*`, `out/subject_NNN/*`, `out/phantom.toml` and
/// `out/manifest.csv`; returns the manifest.
pub fn generate_dataset(spec: &PhantomSpec, cfg: &DatasetConfig, out: &Path) -> Result<Manifest, PhantomError> {
    spec.validate()?;
    if cfg.n_subjects < 5 {
        return Err(PhantomError::Spec(format!("need at least 5 subjects, got {}", cfg.n_subjects)));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) || !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(PhantomError::Spec("split fractions must lie in [0, 1)".into()));
    }
    let modalities: Vec<Modality> = if cfg.modalities.is_empty() { spec.modalities.iter().map(|p| p.modality).collect() } else { cfg.modalities.clone() };
    if let Some(m) = modalities.iter().find(|m| spec.profile(**m).is_none()) {
        return Err(PhantomError::Spec(format!("no profile for {m}")));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("phantom.toml"), spec.to_text())?;

    let atlas = generate_atlas(spec)?;
    let atlas_dir = out.join("atlas");
    std::fs::create_dir_all(&atlas_dir)?;
    mvox::write_labels(atlas_dir.join("labels.mvox"), &atlas.labels)?;
    for m in &modalities {
        mvox::write_volume(atlas_dir.join(format!("{m}.mvox")), &atlas.volumes[m])?;
    }

    let (_, n_val, n_test) = split_counts(cfg.n_subjects, cfg.test_fraction, cfg.validation_fraction);
    let mut order: Vec<usize> = (0..cfg.n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[u64::MAX])));
    let mut splits = vec![Split::Train; cfg.n_subjects];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            splits[i] = Split::Test;
        } else if rank < n_test + n_val {
            splits[i] = Split::Validation;
        }
    }

    let mut manifest = Manifest::default();
    let jobs = splits.into_iter().map(|s| (s, None)).chain(cfg.corrupted.iter().map(|c| (Split::Test, Some(*c))));
    for (i, (split, corruption)) in jobs.enumerate() {
        let subject = generate_subject_with(spec, i as u64, corruption)?;
        let dir = out.join(format!("subject_{i:03}"));
        std::fs::create_dir_all(&dir)?;
        let labels_path = dir.join("labels.mvox");
        mvox::write_labels(&labels_path, &subject.labels)?;
        for m in &modalities {
            let path: PathBuf = dir.join(format!("{m}.mvox"));
            mvox::write_volume(&path, &subject.volumes[m])?;
            manifest.entries.push(ManifestEntry {
                volume: path,
                labels: labels_path.clone(),
                modality: *m,
                split,
                corruption: corruption.map(|c| c.to_string()),
            });
        }
    }
    manifest.write(out.join("manifest.csv"))?;
    Ok(manifest)
}

/// Michelson contrast `|a − b| / (a + b)` between two tissue means.
pub fn michelson(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec32() -> PhantomSpec {
        PhantomSpec::desk([32, 32, 32], 5)
    }

    #[test]
    fn desk_spec_is_valid_and_round_trips_as_text() {
        let s = spec32();
        s.validate().unwrap();
        let back = PhantomSpec::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.generated_labels(), vec![0, 1, 2, 3, 4, 5, 10, 14, 15, 18, 23, 25]);
    }

    #[test]
    fn missing_contrast_entry_is_a_spec_error() {
        let mut s = spec32();
        s.modalities[3].tissues.retain(|t| t.label != lbl::BRAINSTEM);
        let e = s.validate().unwrap_err();
        assert!(e.to_string().contains("label 14"), "{e}");
        assert!(generate_subject(&s, 0).is_err());
    }

    #[test]
    fn shapes_too_close_to_the_edge_are_rejected() {
        let mut s = spec32();
        s.structures[0].radii[0] = 0.48;
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_seeds_give_identical_subjects() {
        let s = spec32();
        let a = generate_subject(&s, 3).unwrap();
        let b = generate_subject(&s, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_subject(&s, 4).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn zero_noise_reproduces_the_contrast_table() {
        let mut s = spec32();
        for p in s.modalities.iter_mut() {
            p.tissues.iter_mut().for_each(|t| t.sigma = 0.0);
        }
        let subj = generate_subject(&s, 1).unwrap();
        for m in [Modality::Mprage, Modality::Ct] {
            let v = &subj.volumes[&m];
            assert_eq!(v.grid, subj.labels.grid);
            let p = s.profile(m).unwrap();
            for (x, l) in v.data.iter().zip(&subj.labels.labels) {
                assert_eq!(*x, p.tissue(*l).unwrap().mean as f32);
            }
        }
    }

    #[test]
    fn thick_slice_modalities_cover_the_same_field_of_view() {
        let subj = generate_subject(&spec32(), 2).unwrap();
        let flair = &subj.volumes[&Modality::Flair];
        let dwi = &subj.volumes[&Modality::Dwi];
        assert_eq!(flair.grid.dims, [32, 32, 16]);
        assert_eq!(dwi.grid.dims, [32, 32, 8]);
        // first slab of 4 mm is centred on label-grid z = 1.5
        assert_eq!(dwi.grid.affine.apply([0.0; 3]), [0.0, 0.0, 1.5]);
    }

    #[test]
    fn labels_keep_their_distance_from_the_edges() {
        let s = spec32();
        for k in 0..30 {
            let l = generate_subject(&s, k).unwrap().labels;
            for z in 0..32 {
                for y in 0..32 {
                    for x in 0..32 {
                        if l.at(x, y, z) != 0 {
                            let d = [x, y, z, 31 - x, 31 - y, 31 - z].into_iter().min().unwrap();
                            assert!(d >= 2, "subject {k} label at ({x},{y},{z})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn every_structure_is_present_in_every_subject() {
        let s = spec32();
        for k in 0..10 {
            let l = generate_subject(&s, k).unwrap().labels;
            assert_eq!(l.label_set(), s.generated_labels(), "subject {k}");
        }
    }

    #[test]
    fn ellipsoid_volumes_match_the_analytic_estimate() {
        let mut s = PhantomSpec::desk([64, 64, 64], 1);
        s.jitter = Jitter::NONE;
        let l = generate_subject(&s, 0).unwrap().labels;
        let hist = l.histogram();
        // shapes painted after every shape they touch keep their full volume
        for shape in s.structures.iter().filter(|sh| sh.right.is_none()) {
            let abc: f64 = (0..3).map(|a| shape.radii[a] * 64.0).product();
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * abc;
            let got = hist[shape.left as usize] as f64;
            assert!((got - analytic).abs() <= 0.1 * analytic, "{}: {got} vs {analytic}", shape.name);
        }
    }

    #[test]
    fn contrast_gaps_follow_the_modality() {
        let s = spec32();
        let gap = |m: Modality| {
            let p = s.profile(m).unwrap();
            let (gm, wm) = (p.tissue(lbl::GM_LEFT).unwrap(), p.tissue(lbl::WM_LEFT).unwrap());
            ((gm.mean - wm.mean).abs(), gm.sigma.max(wm.sigma))
        };
        let (ct, ct_sigma) = gap(Modality::Ct);
        assert!(ct <= 0.2 * ct_sigma);
        let (mp, mp_sigma) = gap(Modality::Mprage);
        assert!(mp >= 5.0 * mp_sigma);
    }

    #[test]
    fn michelson_ordering_on_generated_means() {
        let s = spec32();
        let subj = generate_subject(&s, 0).unwrap();
        let contrast = |m: Modality| {
            // means over pure voxels: every label-grid voxel inside the
            // modality voxel carries the same label
            let v = &subj.volumes[&m];
            let k: [usize; 3] = std::array::from_fn(|a| v.grid.spacing[a].round() as usize);
            let (mut gm, mut ngm, mut wm, mut nwm) = (0.0, 0usize, 0.0, 0usize);
            let [nx, ny, nz] = v.grid.dims;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let first = subj.labels.at(x * k[0], y * k[1], z * k[2]);
                        let pure = (0..k[2]).all(|c| (0..k[1]).all(|b| (0..k[0]).all(|a| subj.labels.at(x * k[0] + a, y * k[1] + b, z * k[2] + c) == first)));
                        if !pure {
                            continue;
                        }
                        let val = v.at(x, y, z) as f64;
                        match first {
                            lbl::GM_LEFT | lbl::GM_RIGHT => (gm, ngm) = (gm + val, ngm + 1),
                            lbl::WM_LEFT | lbl::WM_RIGHT => (wm, nwm) = (wm + val, nwm + 1),
                            _ => {}
                        }
                    }
                }
            }
            michelson(gm / ngm as f64, wm / nwm as f64)
        };
        let (mp, fl, dw, ct) = (contrast(Modality::Mprage), contrast(Modality::Flair), contrast(Modality::Dwi), contrast(Modality::Ct));
        assert!(mp > fl && mp > dw, "{mp} {fl} {dw}");
        assert!(fl > ct && dw > ct, "{fl} {dw} {ct}");
        // FLAIR and DWI comparable
        assert!((fl - dw).abs() < 0.5 * fl.min(dw), "{fl} {dw}");
        // table means give the same ordering exactly
        let table = |m: Modality| {
            let p = s.profile(m).unwrap();
            michelson(p.tissue(lbl::GM_LEFT).unwrap().mean, p.tissue(lbl::WM_LEFT).unwrap().mean)
        };
        assert!(table(Modality::Mprage) > table(Modality::Flair));
        assert!(table(Modality::Flair) > table(Modality::Ct) && table(Modality::Dwi) > table(Modality::Ct));
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_counts(20, 0.1, 0.0), (18, 0, 2));
        assert_eq!(split_counts(25, 0.1, 0.0), (22, 0, 3));
        assert_eq!(split_counts(15, 0.1, 0.0), (13, 0, 2));
        assert_eq!(split_counts(40, 0.1, 0.1), (32, 4, 4));
    }

    #[test]
    fn dataset_is_a_partition_with_tagged_corruptions() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::desk([32, 32, 32], 9);
        let cfg = DatasetConfig {
            n_subjects: 20,
            corrupted: vec![Corruption::Noise(0.5), Corruption::Occlusion(0.4)],
            modalities: vec![Modality::Mprage],
            ..DatasetConfig::default()
        };
        let m = generate_dataset(&spec, &cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 22);
        let count = |s: Split| m.entries.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Test)), (18, 4));
        let mut seen = std::collections::HashSet::new();
        for e in &m.entries {
            assert!(seen.insert(e.labels.clone()), "subject listed twice");
            assert!(e.volume.exists() && e.labels.exists());
        }
        let tagged: Vec<_> = m.entries.iter().filter_map(|e| e.corruption.clone()).collect();
        assert_eq!(tagged, vec!["noise:0.5".to_string(), "occlusion:0.4".to_string()]);
        assert_eq!(Manifest::read(dir.path().join("manifest.csv")).unwrap(), m);
        assert!(dir.path().join("atlas/mprage.mvox").exists());
    }

    #[test]
    fn corruption_text_round_trips() {
        for c in [Corruption::Noise(0.5), Corruption::Occlusion(0.25), Corruption::ContrastSwap(Modality::Ct)] {
            assert_eq!(c.to_string().parse::<Corruption>().unwrap(), c);
        }
        assert!("blur:1".parse::<Corruption>().is_err());
        assert!("occlusion:2".parse::<Corruption>().is_err());
    }

    #[test]
    fn noise_corruption_scales_with_range() {
        let subj = generate_subject(&spec32(), 0).unwrap();
        let v = &subj.volumes[&Modality::Mprage];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = corrupt(v, Corruption::Noise(0.5), &mut rng);
        let (lo, hi) = v.min_max();
        let diffs: Vec<f64> = noisy.data.iter().zip(&v.data).map(|(a, b)| (a - b) as f64).collect();
        let sd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
        let want = 0.5 * (hi - lo) as f64;
        assert!((sd - want).abs() < 0.03 * want, "{sd} vs {want}");
    }
}
