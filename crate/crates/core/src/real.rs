//! Floating-point element types for network computation.
//!
//! Training runs in `f32`; gradient verification runs the same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ScalarType {
    F32 = 0,
    F64 = 1,
}

impl ScalarType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Row/column strides of a dense matrix view.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    /// Transposed view of a row-major `rows × cols` matrix.
    pub const fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }
}

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const SCALAR: ScalarType;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_le_bytes_vec(values: &[Self], out: &mut Vec<u8>);

    fn from_le_chunk(bytes: &[u8]) -> Self;

    /// Raw GEMM kernel; see [`gemm`].
    #[allow(clippy::too_many_arguments)]
    fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    );
}

fn check_view(len: usize, rows: usize, cols: usize, s: Strides, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * s.row + (cols - 1) * s.col;
    assert!(last < len, "gemm: {what} view {rows}x{cols} {s:?} exceeds buffer of {len}");
}

/// `C ← alpha·A·B + beta·C` for an `m×k` A and `k×n` B given as strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    check_view(a.len(), m, k, sa, "A");
    check_view(b.len(), k, n, sb, "B");
    check_view(c.len(), m, n, sc, "C");
    T::gemm_kernel(m, k, n, alpha, a, sa, b, sb, beta, c, sc);
}

macro_rules! impl_real {
    ($t:ty, $tag:expr, $kernel:path, $w:expr) => {
        impl Real for $t {
            const SCALAR: ScalarType = $tag;

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn to_le_bytes_vec(values: &[Self], out: &mut Vec<u8>) {
                out.reserve(values.len() * $w);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn from_le_chunk(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("chunk width"))
            }

            fn gemm_kernel(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                beta: Self,
                c: &mut [Self],
                sc: Strides,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: `gemm` verified that every strided view stays inside
                // its slice, and `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.row as isize,
                        sa.col as isize,
                        b.as_ptr(),
                        sb.row as isize,
                        sb.col as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.row as isize,
                        sc.col as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, ScalarType::F32, matrixmultiply::sgemm, 4);
impl_real!(f64, ScalarType::F64, matrixmultiply::dgemm, 8);
