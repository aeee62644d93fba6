//! Volumetric containers, the anatomical structure table, intensity
//! normalization and one-hot label expansion.
//!
//! Voxel data is stored x-fastest: index = x + nx·(y + ny·z).

use thiserror::Error;

use crate::affine::{AffineTransform, GeometryError};

/// Number of segmentation classes including background.
pub const NUM_CLASSES: usize = 28;
/// Largest valid label value.
pub const MAX_LABEL: u8 = (NUM_CLASSES - 1) as u8;

/// Upper end of the normalized intensity interval.
pub const NORMALIZED_MAX: f32 = 100.0;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dims must all be >= 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("data length {got} does not match dims {dims:?} ({expected} voxels)")]
    LengthMismatch { dims: [usize; 3], expected: usize, got: usize },
    #[error("spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("label {value} at voxel {index} outside 0..={MAX_LABEL}")]
    LabelOutOfRange { index: usize, value: u8 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Voxel lattice shared by intensity volumes and label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Voxel-to-world map.
    pub affine: AffineTransform,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: AffineTransform) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        if !affine.is_invertible() {
            return Err(GeometryError::Singular(affine.determinant()).into());
        }
        Ok(Self { dims, spacing, affine })
    }

    /// Axis-aligned grid with the origin at voxel (0,0,0).
    pub fn canonical(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, AffineTransform::scaling(spacing))
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Physical extent along each axis (dims · spacing).
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    pub fn world_to_voxel(&self) -> AffineTransform {
        // invertibility is a construction invariant
        self.affine.inverse().expect("grid affine is invertible")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self, VolumeError> {
        let expected = grid.num_voxels();
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch { dims: grid.dims, expected, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.num_voxels();
        Self { grid, data: vec![0.0; n] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.min_max();
        lo == hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self, VolumeError> {
        let expected = grid.num_voxels();
        if labels.len() != expected {
            return Err(VolumeError::LengthMismatch { dims: grid.dims, expected, got: labels.len() });
        }
        if let Some(index) = labels.iter().position(|&v| v > MAX_LABEL) {
            return Err(VolumeError::LabelOutOfRange { index, value: labels[index] });
        }
        Ok(Self { grid, labels })
    }

    pub fn background(grid: Grid) -> Self {
        let n = grid.num_voxels();
        Self { grid, labels: vec![0; n] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.grid.index(x, y, z)]
    }

    /// Voxel count per class, indexed by label.
    pub fn histogram(&self) -> [u64; NUM_CLASSES] {
        let mut h = [0u64; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Sorted distinct labels present in the map.
    pub fn label_set(&self) -> Vec<u8> {
        self.histogram()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, _)| l as u8)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Laterality {
    Left,
    Right,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Structure {
    pub index: u8,
    pub name: &'static str,
    pub laterality: Laterality,
}

/// The 27 anatomical structures; label 0 is background and not listed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureTable {
    entries: Vec<Structure>,
}

const STRUCTURES: [(&str, Laterality); 27] = {
    use Laterality::*;
    [
        ("Cortical White Matter Left", Left),
        ("Cortical Grey Matter Left", Left),
        // listed twice as "Left" in the source table; 2/4 pairing makes it Right
        ("Cortical White Matter Right", Right),
        ("Cortical Grey Matter Right", Right),
        ("Lateral Ventricle Left", Left),
        ("Cerebellar White Matter Left", Left),
        ("Cerebellar Grey Matter Left", Left),
        ("Thalamus Left", Left),
        ("Caudate Left", Left),
        ("Putamen Left", Left),
        ("Pallidum Left", Left),
        ("Third Ventricle", None),
        ("Fourth Ventricle", None),
        ("Brainstem", None),
        ("Hippocampus Left", Left),
        ("Amygdala Left", Left),
        ("Ventral DC Left", Left),
        ("Lateral Ventricle Right", Right),
        ("Cerebellar White Matter Right", Right),
        ("Cerebellar Grey Matter Right", Right),
        ("Thalamus Right", Right),
        ("Caudate Right", Right),
        ("Putamen Right", Right),
        ("Pallidum Right", Right),
        ("Hippocampus Right", Right),
        ("Amygdala Right", Right),
        ("Ventral DC Right", Right),
    ]
};

impl StructureTable {
    pub fn standard() -> Self {
        let entries = STRUCTURES
            .iter()
            .enumerate()
            .map(|(i, &(name, laterality))| Structure { index: i as u8 + 1, name, laterality })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[Structure] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u8) -> Option<&Structure> {
        self.entries.iter().find(|s| s.index == index)
    }

    pub fn name(&self, index: u8) -> &'static str {
        if index == 0 {
            return "Background";
        }
        self.get(index).map(|s| s.name).unwrap_or("Unknown")
    }

    pub fn indices(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.iter().map(|s| s.index)
    }
}

impl Default for StructureTable {
    fn default() -> Self {
        Self::standard()
    }
}

/// Well-known label indices used by the phantom generator and reports.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const WM_LEFT: u8 = 1;
    pub const GM_LEFT: u8 = 2;
    pub const WM_RIGHT: u8 = 3;
    pub const GM_RIGHT: u8 = 4;
    pub const LAT_VENTRICLE_LEFT: u8 = 5;
    pub const THALAMUS_LEFT: u8 = 8;
    pub const PUTAMEN_LEFT: u8 = 10;
    pub const BRAINSTEM: u8 = 14;
    pub const HIPPOCAMPUS_LEFT: u8 = 15;
    pub const LAT_VENTRICLE_RIGHT: u8 = 18;
    pub const THALAMUS_RIGHT: u8 = 21;
    pub const PUTAMEN_RIGHT: u8 = 23;
    pub const HIPPOCAMPUS_RIGHT: u8 = 25;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NormalizeMode {
    /// Plain min–max mapping onto [0, 100].
    #[default]
    MinMax,
    /// Clip to the given lower/upper percentiles before min–max mapping.
    PercentileClip { lower: f64, upper: f64 },
}

/// Raised when the input has no intensity range; usually a corrupt scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegenerateInput {
    pub value: f32,
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: Volume,
    pub warning: Option<DegenerateInput>,
}

pub fn normalize_intensity(v: &Volume) -> Normalized {
    normalize_intensity_with(v, NormalizeMode::MinMax)
}

pub fn normalize_intensity_with(v: &Volume, mode: NormalizeMode) -> Normalized {
    let (lo, hi) = match mode {
        NormalizeMode::MinMax => v.min_max(),
        NormalizeMode::PercentileClip { lower, upper } => percentile_bounds(&v.data, lower, upper),
    };
    if lo >= hi {
        log::warn!("constant-intensity volume ({lo}); normalized to zeros");
        return Normalized {
            volume: Volume::zeros(v.grid.clone()),
            warning: Some(DegenerateInput { value: lo }),
        };
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let scale = NORMALIZED_MAX as f64 / (hi - lo);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64).clamp(lo, hi) - lo) * scale).clamp(0.0, NORMALIZED_MAX as f64) as f32)
        .collect();
    Normalized { volume: Volume { grid: v.grid.clone(), data }, warning: None }
}

fn percentile_bounds(data: &[f32], lower: f64, upper: f64) -> (f32, f32) {
    let mut sorted = data.to_vec();
    sorted.sort_by(f32::total_cmp);
    let pick = |q: f64| {
        let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
        sorted[pos.round() as usize]
    };
    (pick(lower), pick(upper))
}

/// Per-class indicator planes, class-major: `planes[s·n + i]` is 1 iff
/// voxel `i` carries label `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot {
    pub num_classes: usize,
    pub num_voxels: usize,
    pub planes: Vec<u8>,
}

impl OneHot {
    pub fn plane(&self, class: usize) -> &[u8] {
        &self.planes[class * self.num_voxels..(class + 1) * self.num_voxels]
    }

    pub fn class_sum(&self, class: usize) -> u64 {
        self.plane(class).iter().map(|&v| v as u64).sum()
    }

    /// Label at voxel `i` (the unique hot class).
    pub fn label_at(&self, i: usize) -> usize {
        (0..self.num_classes).find(|&s| self.planes[s * self.num_voxels + i] == 1).unwrap_or(0)
    }
}

pub fn one_hot(l: &LabelMap, num_classes: usize) -> OneHot {
    one_hot_labels(&l.labels, num_classes)
}

pub fn one_hot_labels(labels: &[u8], num_classes: usize) -> OneHot {
    let n = labels.len();
    let mut planes = vec![0u8; num_classes * n];
    for (i, &l) in labels.iter().enumerate() {
        assert!((l as usize) < num_classes, "label {l} outside {num_classes} classes");
        planes[l as usize * n + i] = 1;
    }
    OneHot { num_classes, num_voxels: n, planes }
}
