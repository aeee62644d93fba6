//! Affine coregistration by mean-squared intensity difference.
//!
//! The transform maps reference world coordinates into moving world
//! coordinates, so `resample_onto(moving, t, reference.grid)` produces the
//! registered volume. It is parameterized as `t(p) = L(p − c) + c + d` with
//! `c` the reference intensity centroid, and optimized coarse to fine over a
//! three-level block-average pyramid by gradient descent with backtracking.

use crate::affine::{AffineTransform, GeometryError};
use crate::resample::BSplineCoefficients;
use crate::volume::{Grid, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub transform: AffineTransform,
    /// Cost at the returned transform, full resolution.
    pub final_cost: f64,
    /// Cost at the centroid initialization, full resolution.
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    /// Pyramid downsampling factors, coarse first.
    pub levels: [usize; 3],
    pub max_iterations_per_level: usize,
    /// Allow the linear part to move; `false` restricts to translation.
    pub affine: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { levels: [4, 2, 1], max_iterations_per_level: 150, affine: true }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistrationError {
    #[error("{0} volume is constant")]
    Constant(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Intensity-weighted centre of mass in world coordinates (shifted so the
/// minimum weighs zero).
pub fn intensity_centroid(v: &Volume) -> [f64; 3] {
    let (lo, _) = v.min_max();
    let [nx, ny, nz] = v.grid.dims;
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let w = (v.at(x, y, z) - lo) as f64;
                acc[0] += w * x as f64;
                acc[1] += w * y as f64;
                acc[2] += w * z as f64;
                total += w;
            }
        }
    }
    let c = if total > 0.0 {
        [acc[0] / total, acc[1] / total, acc[2] / total]
    } else {
        [(nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0, (nz - 1) as f64 / 2.0]
    };
    v.grid.affine.apply(c)
}

/// Block average by `f` along each axis (at least one voxel per axis).
pub fn downsample(v: &Volume, f: usize) -> Volume {
    if f <= 1 {
        return v.clone();
    }
    let d = v.grid.dims;
    let fs: [usize; 3] = std::array::from_fn(|a| if d[a] >= f { f } else { d[a] });
    let od: [usize; 3] = std::array::from_fn(|a| d[a] / fs[a]);
    let mut data = vec![0f32; od[0] * od[1] * od[2]];
    let inv = 1.0 / (fs[0] * fs[1] * fs[2]) as f64;
    for z in 0..od[2] {
        for y in 0..od[1] {
            for x in 0..od[0] {
                let mut s = 0.0;
                for k in 0..fs[2] {
                    for j in 0..fs[1] {
                        for i in 0..fs[0] {
                            s += v.at(x * fs[0] + i, y * fs[1] + j, z * fs[2] + k) as f64;
                        }
                    }
                }
                data[x + od[0] * (y + od[1] * z)] = (s * inv) as f32;
            }
        }
    }
    let step = AffineTransform::new(
        [[fs[0] as f64, 0.0, 0.0], [0.0, fs[1] as f64, 0.0], [0.0, 0.0, fs[2] as f64]],
        std::array::from_fn(|a| (fs[a] as f64 - 1.0) / 2.0),
    );
    let spacing = std::array::from_fn(|a| v.grid.spacing[a] * fs[a] as f64);
    let grid = Grid { dims: od, spacing, affine: v.grid.affine.compose(&step) };
    Volume { grid, data }
}

/// Cubic B-spline value and voxel-space gradient, with coordinates clamped to
/// the volume so the cost stays continuous as samples leave the field of view.
fn sample_with_grad(spline: &BSplineCoefficients, dims: [usize; 3], q: [f64; 3]) -> (f64, [f64; 3]) {
    let mut qc = q;
    let mut inside = [true; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        if q[a] < 0.0 || q[a] > hi {
            qc[a] = q[a].clamp(0.0, hi);
            inside[a] = false;
        }
    }
    let (v, mut g) = spline.evaluate_with_grad(qc);
    for a in 0..3 {
        if !inside[a] {
            g[a] = 0.0;
        }
    }
    (v, g)
}

/// Parameters: linear part `L` (row-major) and offset `d`, around centre `c`.
#[derive(Debug, Clone, Copy)]
struct Params {
    l: [[f64; 3]; 3],
    d: [f64; 3],
}

impl Params {
    fn transform(&self, c: [f64; 3]) -> AffineTransform {
        let mut t = AffineTransform::linear_about(self.l, c);
        for a in 0..3 {
            t.translation[a] += self.d[a];
        }
        t
    }
}

struct Level {
    reference: Volume,
    moving: BSplineCoefficients,
    moving_dims: [usize; 3],
    moving_w2v: AffineTransform,
}

impl Level {
    fn new(reference: Volume, moving: &Volume) -> Result<Self, GeometryError> {
        Ok(Self {
            reference,
            moving: BSplineCoefficients::new(moving),
            moving_dims: moving.grid.dims,
            moving_w2v: moving.grid.affine.inverse()?,
        })
    }
}

/// Gauss-Newton normal equations over the 12 parameters, ordered as the
/// rows of `L` followed by `d`.
struct Linearization {
    cost: f64,
    jtj: [[f64; 12]; 12],
    jtr: [f64; 12],
}

impl Level {
    fn visit(&self, p: &Params, c: [f64; 3], mut each: impl FnMut(f64, [f64; 3], [f64; 3])) -> f64 {
        let t = p.transform(c);
        let to_moving = self.moving_w2v.compose(&t);
        let a = &self.moving_w2v.linear;
        let [nx, ny, nz] = self.reference.grid.dims;
        let ref_affine = &self.reference.grid.affine;
        let mut sum = 0.0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pw = ref_affine.apply([x as f64, y as f64, z as f64]);
                    let (m, gv) = sample_with_grad(&self.moving, self.moving_dims, to_moving.apply(pw));
                    let r = m - self.reference.at(x, y, z) as f64;
                    sum += r * r;
                    if gv != [0.0; 3] {
                        // world-space gradient of the moving image: Aᵀ ∇_vox
                        let gw = std::array::from_fn(|i| (0..3).map(|k| a[k][i] * gv[k]).sum());
                        each(r, gw, std::array::from_fn(|j| pw[j] - c[j]));
                    }
                }
            }
        }
        sum / (nx * ny * nz) as f64
    }

    /// Mean squared difference and its gradient w.r.t. `(L, d)`.
    fn cost(&self, p: &Params, c: [f64; 3], grad: bool) -> (f64, [[f64; 3]; 3], [f64; 3]) {
        let mut gl = [[0.0; 3]; 3];
        let mut gd = [0.0; 3];
        if !grad {
            let t = p.transform(c);
            let to_moving = self.moving_w2v.compose(&t);
            let [nx, ny, nz] = self.reference.grid.dims;
            let ref_affine = &self.reference.grid.affine;
            let mut sum = 0.0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let q = to_moving.apply(ref_affine.apply([x as f64, y as f64, z as f64]));
                        let r = sample_with_grad(&self.moving, self.moving_dims, q).0 - self.reference.at(x, y, z) as f64;
                        sum += r * r;
                    }
                }
            }
            return (sum / (nx * ny * nz) as f64, gl, gd);
        }
        let mse = self.visit(p, c, |r, gw, dp| {
            for i in 0..3 {
                let s = r * gw[i];
                gd[i] += s;
                for j in 0..3 {
                    gl[i][j] += s * dp[j];
                }
            }
        });
        let k = 2.0 / self.reference.data.len() as f64;
        gl.iter_mut().flatten().for_each(|v| *v *= k);
        gd.iter_mut().for_each(|v| *v *= k);
        (mse, gl, gd)
    }

    fn linearize(&self, p: &Params, c: [f64; 3]) -> Linearization {
        let mut jtj = [[0.0; 12]; 12];
        let mut jtr = [0.0; 12];
        let cost = self.visit(p, c, |r, gw, dp| {
            let mut j = [0.0; 12];
            for i in 0..3 {
                for k in 0..3 {
                    j[3 * i + k] = gw[i] * dp[k];
                }
                j[9 + i] = gw[i];
            }
            for a in 0..12 {
                jtr[a] += j[a] * r;
                for b in a..12 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        });
        for a in 0..12 {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }
        Linearization { cost, jtj, jtr }
    }
}

/// Solves `m x = rhs` for symmetric positive definite `m` (Cholesky).
fn solve_spd<const N: usize>(m: &[[f64; N]; N], rhs: &[f64; N]) -> Option<[f64; N]> {
    let mut l = [[0.0; N]; N];
    for i in 0..N {
        for j in 0..=i {
            let s: f64 = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; N];
    for i in 0..N {
        y[i] = (rhs[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; N];
    for i in (0..N).rev() {
        x[i] = (y[i] - (i + 1..N).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

fn mse(reference: &Volume, moving: &Volume, t: &AffineTransform) -> Result<f64, GeometryError> {
    let level = Level::new(reference.clone(), moving)?;
    let c = [0.0; 3];
    let p = Params { l: t.linear, d: std::array::from_fn(|a| t.translation[a]) };
    Ok(level.cost(&p, c, false).0)
}

/// Mean squared intensity difference of `moving` pulled through `t` onto the
/// reference grid.
pub fn registration_cost(moving: &Volume, reference: &Volume, t: &AffineTransform) -> Result<f64, GeometryError> {
    mse(reference, moving, t)
}

pub fn register_affine(moving: &Volume, reference: &Volume) -> Result<RegistrationResult, RegistrationError> {
    register_affine_with(moving, reference, &RegistrationConfig::default())
}

pub fn register_affine_with(
    moving: &Volume,
    reference: &Volume,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult, RegistrationError> {
    if moving.is_constant() {
        return Err(RegistrationError::Constant("moving"));
    }
    if reference.is_constant() {
        return Err(RegistrationError::Constant("reference"));
    }
    let c = intensity_centroid(reference);
    let cm = intensity_centroid(moving);
    let identity = AffineTransform::identity().linear;
    let init = Params { l: identity, d: std::array::from_fn(|a| cm[a] - c[a]) };
    let full = Level::new(reference.clone(), moving)?;
    let initial_cost = full.cost(&init, c, false).0;

    // Levenberg-Marquardt per pyramid level
    let mut p = init;
    let mut iterations = 0;
    for &f in &cfg.levels {
        let coarse;
        let level = if f <= 1 {
            &full
        } else {
            coarse = Level::new(downsample(reference, f), &downsample(moving, f))?;
            &coarse
        };
        let mut lin = level.linearize(&p, c);
        let mut lambda = 1e-3;
        for _ in 0..cfg.max_iterations_per_level {
            iterations += 1;
            let mut m = lin.jtj;
            let mut rhs = lin.jtr.map(|v| -v);
            for a in 0..12 {
                m[a][a] += lambda * m[a][a] + 1e-12;
            }
            if !cfg.affine {
                for a in 0..9 {
                    m[a] = [0.0; 12];
                    for row in m.iter_mut() {
                        row[a] = 0.0;
                    }
                    m[a][a] = 1.0;
                    rhs[a] = 0.0;
                }
            }
            let Some(delta) = solve_spd(&m, &rhs) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
                continue;
            };
            let mut trial = p;
            for i in 0..3 {
                for j in 0..3 {
                    trial.l[i][j] += delta[3 * i + j];
                }
                trial.d[i] += delta[9 + i];
            }
            let trial_cost = level.cost(&trial, c, false).0;
            if trial_cost.is_finite() && trial_cost < lin.cost {
                let rel = (lin.cost - trial_cost) / lin.cost.max(f64::MIN_POSITIVE);
                p = trial;
                lambda = (lambda / 3.0).max(1e-9);
                if rel < 1e-8 {
                    break;
                }
                lin = level.linearize(&p, c);
            } else {
                lambda *= 4.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
    }
    let t = p.transform(c);
    let final_cost = full.cost(&p, c, false).0;
    if final_cost > initial_cost || !final_cost.is_finite() {
        return Ok(RegistrationResult {
            transform: init.transform(c),
            final_cost: initial_cost,
            initial_cost,
            iterations,
            converged: false,
        });
    }
    Ok(RegistrationResult { transform: t, final_cost, initial_cost, iterations, converged: true })
}
