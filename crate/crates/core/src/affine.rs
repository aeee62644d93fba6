//! 3-D affine transforms (3×3 linear part plus translation).
//!
//! Transforms are used in two roles: as voxel-to-world maps attached to a
//! [`Grid`](crate::volume::Grid), and as world-to-world maps produced by
//! registration. A registration transform maps points of the *reference*
//! space into the *moving* space, so resampling a moving volume onto the
//! reference grid is a pull-back through it.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("transform is not invertible (determinant {0:e})")]
    Singular(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("transform file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Below this |det| a linear part is treated as singular.
pub const SINGULAR_EPS: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl fmt::Debug for AffineTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.linear;
        let t = &self.translation;
        write!(
            f,
            "Affine[[{:.6} {:.6} {:.6} | {:.6}] [{:.6} {:.6} {:.6} | {:.6}] [{:.6} {:.6} {:.6} | {:.6}]]",
            l[0][0], l[0][1], l[0][2], t[0], l[1][0], l[1][1], l[1][2], t[1], l[2][0], l[2][1], l[2][2], t[2]
        )
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub const fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        Self { linear, translation }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    pub fn scaling(s: [f64; 3]) -> Self {
        Self {
            linear: [[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]],
            translation: [0.0; 3],
        }
    }

    /// Rotation by `angles` (radians) about the x, y and z axes, applied in
    /// that order, around `center`.
    pub fn rotation_about(angles: [f64; 3], center: [f64; 3]) -> Self {
        let (sx, cx) = angles[0].sin_cos();
        let (sy, cy) = angles[1].sin_cos();
        let (sz, cz) = angles[2].sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let r = mat_mul(&rz, &mat_mul(&ry, &rx));
        Self::linear_about(r, center)
    }

    /// `p ↦ L (p − c) + c`.
    pub fn linear_about(linear: [[f64; 3]; 3], center: [f64; 3]) -> Self {
        let lc = mat_vec(&linear, center);
        Self {
            linear,
            translation: [center[0] - lc[0], center[1] - lc[1], center[2] - lc[2]],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let l = mat_vec(&self.linear, p);
        [l[0] + self.translation[0], l[1] + self.translation[1], l[2] + self.translation[2]]
    }

    pub fn apply_linear(&self, v: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.linear, v)
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.linear)
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.determinant();
        d.is_finite() && d.abs() > SINGULAR_EPS
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let d = self.determinant();
        if !d.is_finite() || d.abs() <= SINGULAR_EPS {
            return Err(GeometryError::Singular(d));
        }
        let m = &self.linear;
        let mut inv = [[0.0; 3]; 3];
        inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
        inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
        inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
        inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
        inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
        inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
        inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
        inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
        inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
        let t = mat_vec(&inv, self.translation);
        Ok(Self { linear: inv, translation: [-t[0], -t[1], -t[2]] })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let linear = mat_mul(&self.linear, &other.linear);
        let t = self.apply(other.translation);
        Self { linear, translation: t }
    }

    /// Row-major homogeneous 4×4 matrix.
    pub fn to_homogeneous(&self) -> [[f64; 4]; 4] {
        let l = &self.linear;
        let t = &self.translation;
        [
            [l[0][0], l[0][1], l[0][2], t[0]],
            [l[1][0], l[1][1], l[1][2], t[1]],
            [l[2][0], l[2][1], l[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Row-major 3×4 matrix, the layout stored in MVOX headers.
    pub fn to_rows(&self) -> [f64; 12] {
        let h = self.to_homogeneous();
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 4..r * 4 + 4].copy_from_slice(&h[r]);
        }
        out
    }

    pub fn from_rows(rows: &[f64; 12]) -> Self {
        let mut linear = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for r in 0..3 {
            linear[r].copy_from_slice(&rows[r * 4..r * 4 + 3]);
            translation[r] = rows[r * 4 + 3];
        }
        Self { linear, translation }
    }

    /// Largest absolute entry-wise difference of the 3×4 matrices.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.to_rows()
            .iter()
            .zip(other.to_rows().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rotation angle about z (radians) of the orthogonal part of the linear
    /// map, read from the in-plane 2×2 block.
    pub fn rotation_z_angle(&self) -> f64 {
        let l = &self.linear;
        (l[1][0] - l[0][1]).atan2(l[0][0] + l[1][1])
    }

    /// Text form: 16 whitespace-separated numbers, one matrix row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.to_homogeneous() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, GeometryError> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| GeometryError::Parse(format!("{tok:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 16 {
            return Err(GeometryError::Parse(format!("expected 16 numbers, found {}", values.len())));
        }
        if values[12..] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::Parse("last row must be 0 0 0 1".into()));
        }
        let mut rows = [0.0; 12];
        rows.copy_from_slice(&values[..12]);
        Ok(Self::from_rows(&rows))
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_text(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn singular_transform_is_rejected() {
        let t = AffineTransform::scaling([1.0, 0.0, 1.0]);
        assert!(matches!(t.inverse(), Err(GeometryError::Singular(_))));
    }

    #[test]
    fn text_round_trip_is_exact() {
        let t = AffineTransform::rotation_about([0.1, -0.2, 0.3], [1.5, 2.0, -3.0])
            .compose(&AffineTransform::translation([0.125, 7.0, 1.0 / 3.0]));
        let back = AffineTransform::from_text(&t.to_text()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn text_rejects_bad_last_row() {
        let text = "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 1 1\n";
        assert!(AffineTransform::from_text(text).is_err());
        assert!(AffineTransform::from_text("1 2 3").is_err());
    }

    #[test]
    fn rotation_angle_is_recovered() {
        let t = AffineTransform::rotation_about([0.0, 0.0, 5f64.to_radians()], [3.0, 4.0, 5.0]);
        assert!((t.rotation_z_angle().to_degrees() - 5.0).abs() < 1e-12);
        // rotation about its own center leaves the center fixed
        let c = t.apply([3.0, 4.0, 5.0]);
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(
            angles in prop::array::uniform3(-1.0f64..1.0),
            scales in prop::array::uniform3(0.5f64..2.0),
            shear in -0.3f64..0.3,
            t in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let mut m = AffineTransform::rotation_about(angles, [0.0; 3])
                .compose(&AffineTransform::scaling(scales));
            m.linear[0][1] += shear;
            m.translation = t;
            let inv = m.inverse().unwrap();
            let id = AffineTransform::identity();
            prop_assert!(m.compose(&inv).max_abs_diff(&id) < 1e-9);
            prop_assert!(inv.compose(&m).max_abs_diff(&id) < 1e-9);
        }
    }
}
