//! Grid-to-grid resampling through an affine pull-back.
//!
//! Every output voxel centre is mapped to world space by the output grid,
//! through the transform `t` into the input's world space, and from there to
//! a fractional input voxel position. Intensities are interpolated with a
//! cubic B-spline (or linear / nearest, selectable); labels always use
//! nearest neighbour. Positions outside `[-0.5, n - 0.5]` on any axis are
//! filled with 0 (background).

use crate::affine::{AffineTransform, GeometryError};
use crate::volume::{Grid, LabelMap, Volume};

/// Positions this close to an integer are sampled directly.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    Nearest,
    Linear,
    #[default]
    CubicBSpline,
}

impl Interpolation {
    pub fn from_order(order: u8) -> Option<Self> {
        match order {
            0 => Some(Self::Nearest),
            1 => Some(Self::Linear),
            3 => Some(Self::CubicBSpline),
            _ => None,
        }
    }
}

/// Output-voxel → input-voxel map for a pull-back through `t`.
pub fn voxel_map(input: &Grid, t: &AffineTransform, output: &Grid) -> Result<AffineTransform, GeometryError> {
    if !t.is_invertible() {
        return Err(GeometryError::Singular(t.determinant()));
    }
    let w2v = input.affine.inverse()?;
    Ok(w2v.compose(t).compose(&output.affine))
}

fn canonical_grid(out_dims: [usize; 3], out_spacing: [f64; 3]) -> Result<Grid, GeometryError> {
    Grid::canonical(out_dims, out_spacing).map_err(|e| GeometryError::InvalidGrid(e.to_string()))
}

/// Cubic B-spline resampling onto an axis-aligned grid with origin 0.
pub fn resample_spline(
    v: &Volume,
    t: &AffineTransform,
    out_dims: [usize; 3],
    out_spacing: [f64; 3],
) -> Result<Volume, GeometryError> {
    resample_onto(v, t, &canonical_grid(out_dims, out_spacing)?, Interpolation::CubicBSpline)
}

pub fn resample_onto(v: &Volume, t: &AffineTransform, grid: &Grid, interp: Interpolation) -> Result<Volume, GeometryError> {
    let m = voxel_map(&v.grid, t, grid)?;
    let sampler = Sampler::new(v, interp);
    let [nx, ny, nz] = grid.dims;
    let mut data = Vec::with_capacity(grid.num_voxels());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = m.apply([x as f64, y as f64, z as f64]);
                data.push(sampler.sample(q) as f32);
            }
        }
    }
    Ok(Volume { grid: grid.clone(), data })
}

/// Nearest-neighbour label resampling onto an axis-aligned grid with origin 0.
pub fn resample_nearest(
    l: &LabelMap,
    t: &AffineTransform,
    out_dims: [usize; 3],
    out_spacing: [f64; 3],
) -> Result<LabelMap, GeometryError> {
    resample_labels_onto(l, t, &canonical_grid(out_dims, out_spacing)?)
}

pub fn resample_labels_onto(l: &LabelMap, t: &AffineTransform, grid: &Grid) -> Result<LabelMap, GeometryError> {
    let m = voxel_map(&l.grid, t, grid)?;
    let [nx, ny, nz] = grid.dims;
    let mut labels = Vec::with_capacity(grid.num_voxels());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = m.apply([x as f64, y as f64, z as f64]);
                labels.push(match nearest_index(q, l.grid.dims) {
                    Some([i, j, k]) => l.at(i, j, k),
                    None => 0,
                });
            }
        }
    }
    Ok(LabelMap { grid: grid.clone(), labels })
}

/// Bring a segmentation computed on the registered grid back onto the
/// original input grid, inverting the forward coregistration `t`.
pub fn map_back(seg: &LabelMap, original: &Grid, t: &AffineTransform) -> Result<LabelMap, GeometryError> {
    let inv = t.inverse()?;
    resample_labels_onto(seg, &inv, original)
}

fn nearest_index(q: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let r = (q[a] + 0.5).floor();
        if r < 0.0 || r >= dims[a] as f64 {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

fn in_domain(q: [f64; 3], dims: [usize; 3]) -> bool {
    (0..3).all(|a| q[a] >= -0.5 && q[a] <= dims[a] as f64 - 0.5)
}

fn snapped(q: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let r = q[a].round();
        if (q[a] - r).abs() > SNAP || r < 0.0 || r >= dims[a] as f64 {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

/// Point sampler over one intensity volume.
pub struct Sampler<'a> {
    volume: &'a Volume,
    interp: Interpolation,
    coeffs: Option<BSplineCoefficients>,
}

impl<'a> Sampler<'a> {
    pub fn new(volume: &'a Volume, interp: Interpolation) -> Self {
        let coeffs = (interp == Interpolation::CubicBSpline).then(|| BSplineCoefficients::new(volume));
        Self { volume, interp, coeffs }
    }

    /// Interpolated value at fractional voxel position `q`, 0 outside.
    pub fn sample(&self, q: [f64; 3]) -> f64 {
        let dims = self.volume.grid.dims;
        if !in_domain(q, dims) {
            return 0.0;
        }
        if let Some([i, j, k]) = snapped(q, dims) {
            return self.volume.at(i, j, k) as f64;
        }
        match self.interp {
            Interpolation::Nearest => match nearest_index(q, dims) {
                Some([i, j, k]) => self.volume.at(i, j, k) as f64,
                None => 0.0,
            },
            Interpolation::Linear => trilinear(self.volume, q),
            Interpolation::CubicBSpline => self.coeffs.as_ref().unwrap().evaluate(q),
        }
    }
}

fn trilinear(v: &Volume, q: [f64; 3]) -> f64 {
    let dims = v.grid.dims;
    let mut idx = [[0usize; 2]; 3];
    let mut w = [[0f64; 2]; 3];
    for a in 0..3 {
        let n = dims[a] as isize;
        let f = q[a].floor();
        let t = q[a] - f;
        let i0 = (f as isize).clamp(0, n - 1) as usize;
        let i1 = (f as isize + 1).clamp(0, n - 1) as usize;
        idx[a] = [i0, i1];
        w[a] = [1.0 - t, t];
    }
    let mut acc = 0.0;
    for (c, wz) in w[2].iter().enumerate() {
        for (b, wy) in w[1].iter().enumerate() {
            for (a, wx) in w[0].iter().enumerate() {
                acc += wx * wy * wz * v.at(idx[0][a], idx[1][b], idx[2][c]) as f64;
            }
        }
    }
    acc
}

/// Interpolating cubic B-spline coefficients (mirror boundary conditions).
pub struct BSplineCoefficients {
    dims: [usize; 3],
    coeffs: Vec<f64>,
}

const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

impl BSplineCoefficients {
    pub fn new(v: &Volume) -> Self {
        let dims = v.grid.dims;
        let mut coeffs: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
        let [nx, ny, nz] = dims;
        let mut line = Vec::new();
        // x lines
        for z in 0..nz {
            for y in 0..ny {
                let base = nx * (y + ny * z);
                line.clear();
                line.extend_from_slice(&coeffs[base..base + nx]);
                prefilter(&mut line);
                coeffs[base..base + nx].copy_from_slice(&line);
            }
        }
        // y lines
        for z in 0..nz {
            for x in 0..nx {
                line.clear();
                line.extend((0..ny).map(|y| coeffs[x + nx * (y + ny * z)]));
                prefilter(&mut line);
                for (y, &c) in line.iter().enumerate() {
                    coeffs[x + nx * (y + ny * z)] = c;
                }
            }
        }
        // z lines
        for y in 0..ny {
            for x in 0..nx {
                line.clear();
                line.extend((0..nz).map(|z| coeffs[x + nx * (y + ny * z)]));
                prefilter(&mut line);
                for (z, &c) in line.iter().enumerate() {
                    coeffs[x + nx * (y + ny * z)] = c;
                }
            }
        }
        Self { dims, coeffs }
    }

    pub fn evaluate(&self, q: [f64; 3]) -> f64 {
        let mut idx = [[0usize; 4]; 3];
        let mut w = [[0f64; 4]; 3];
        for a in 0..3 {
            let f = q[a].floor();
            let t = q[a] - f;
            w[a] = cubic_weights(t);
            let base = f as isize - 1;
            for k in 0..4 {
                idx[a][k] = mirror(base + k as isize, self.dims[a]);
            }
        }
        let [nx, ny, _] = self.dims;
        let mut acc = 0.0;
        for c in 0..4 {
            let mut acc_y = 0.0;
            for b in 0..4 {
                let row = nx * (idx[1][b] + ny * idx[2][c]);
                let mut acc_x = 0.0;
                for a in 0..4 {
                    acc_x += w[0][a] * self.coeffs[row + idx[0][a]];
                }
                acc_y += w[1][b] * acc_x;
            }
            acc += w[2][c] * acc_y;
        }
        acc
    }

    /// Value and gradient with respect to the voxel coordinate `q`.
    pub fn evaluate_with_grad(&self, q: [f64; 3]) -> (f64, [f64; 3]) {
        let mut idx = [[0usize; 4]; 3];
        let mut w = [[0f64; 4]; 3];
        let mut dw = [[0f64; 4]; 3];
        for a in 0..3 {
            let f = q[a].floor();
            let t = q[a] - f;
            w[a] = cubic_weights(t);
            dw[a] = cubic_weight_derivs(t);
            let base = f as isize - 1;
            for k in 0..4 {
                idx[a][k] = mirror(base + k as isize, self.dims[a]);
            }
        }
        let [nx, ny, _] = self.dims;
        let (mut v, mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0, 0.0);
        for c in 0..4 {
            let (mut vy, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
            for b in 0..4 {
                let row = nx * (idx[1][b] + ny * idx[2][c]);
                let (mut vx, mut dx) = (0.0, 0.0);
                for a in 0..4 {
                    let cf = self.coeffs[row + idx[0][a]];
                    vx += w[0][a] * cf;
                    dx += dw[0][a] * cf;
                }
                vy += w[1][b] * vx;
                gxy += w[1][b] * dx;
                gyy += dw[1][b] * vx;
            }
            v += w[2][c] * vy;
            gx += w[2][c] * gxy;
            gy += w[2][c] * gyy;
            gz += dw[2][c] * vy;
        }
        (v, [gx, gy, gz])
    }
}

#[inline]
fn cubic_weight_derivs(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let omt = 1.0 - t;
    [-0.5 * omt * omt, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2]
}

#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let omt = 1.0 - t;
    [
        omt * omt * omt / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Whole-sample mirror reflection of `i` into `0..n`.
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// In-place conversion of samples to cubic B-spline coefficients.
fn prefilter(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= gain;
    }
    // exact mirror-symmetric causal initialisation
    let zn = z.powi(n as i32 - 1);
    let z2n = zn * zn;
    let mut sum = c[0] + zn * c[n - 1];
    let mut zk = z;
    let mut z2nk = z2n / z;
    for v in c.iter().take(n - 1).skip(1) {
        sum += (zk + z2nk) * v;
        zk *= z;
        z2nk /= z;
    }
    c[0] = sum / (1.0 - z2n);
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}
