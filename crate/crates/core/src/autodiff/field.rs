use std::fmt;

use crate::real::Real;

/// Dense 5-D layout `(batch, channels, x, y, z)`, stored with x fastest:
/// index = x + nx·(y + ny·(z + nz·(c + C·b))).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}, {}]", self.batch, self.channels, self.x, self.y, self.z)
    }
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, x: usize, y: usize, z: usize) -> Self {
        Self { batch, channels, x, y, z }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1, 1)
    }

    /// Shape of a per-channel vector (bias, batch-norm scale/shift).
    pub const fn channel_vector(channels: usize) -> Self {
        Self::new(1, channels, 1, 1, 1)
    }

    /// Shape of a cubic kernel bank `(out, in, k, k, k)`.
    pub const fn kernel(out_channels: usize, in_channels: usize, k: usize) -> Self {
        Self::new(out_channels, in_channels, k, k, k)
    }

    pub fn spatial(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    pub fn with_spatial(&self, [x, y, z]: [usize; 3]) -> Self {
        Self { x, y, z, ..*self }
    }
}

/// Values of one graph node.
#[derive(Clone, PartialEq)]
pub struct ActivationField<T> {
    pub shape: Shape,
    pub values: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for ActivationField<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActivationField{:?}", self.shape)?;
        if self.values.len() <= 8 {
            write!(f, " {:?}", self.values)?;
        }
        Ok(())
    }
}

impl<T: Real> ActivationField<T> {
    /// Panics if `values.len()` differs from the element count of `shape`.
    pub fn new(shape: Shape, values: Vec<T>) -> Self {
        assert_eq!(values.len(), shape.len(), "values do not fill shape {shape:?}");
        Self { shape, values }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, values: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: Shape, v: T) -> Self {
        Self { shape, values: vec![v; shape.len()] }
    }

    pub fn scalar(v: T) -> Self {
        Self::new(Shape::scalar(), vec![v])
    }

    /// Contiguous block of one (batch, channel) plane.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.spatial();
        let start = (b * self.shape.channels + c) * n;
        &self.values[start..start + n]
    }

    pub fn item(&self) -> T {
        self.values[0]
    }

    pub fn cast<U: Real>(&self) -> ActivationField<U> {
        ActivationField {
            shape: self.shape,
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
        }
    }
}
