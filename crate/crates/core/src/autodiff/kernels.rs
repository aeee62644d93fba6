//! Numeric kernels behind the graph operators. Everything here is a pure
//! function of slices; the graph owns bookkeeping.

use crate::real::{gemm, Real, Strides};

/// Copy the `k³` shifted views of each input channel into rows of `cols`
/// (`channels·k³ × n`), zero outside the volume. Padding is `k / 2`.
pub fn im2col<T: Real>(x: &[T], channels: usize, dims: [usize; 3], k: usize, cols: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let kk = k * k * k;
    let pad = (k / 2) as isize;
    debug_assert_eq!(cols.len(), channels * kk * n);
    for ci in 0..channels {
        let src = &x[ci * n..(ci + 1) * n];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ci * kk + (kz * k + ky) * k + kx;
                    let row = &mut cols[r * n..(r + 1) * n];
                    let (dx, dy, dz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let (x0, x1) = valid_range(nx, dx);
                    for z in 0..nz {
                        let sz = z as isize + dz;
                        for y in 0..ny {
                            let sy = y as isize + dy;
                            let dst = &mut row[(z * ny + y) * nx..(z * ny + y + 1) * nx];
                            if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize || x0 >= x1 {
                                dst.fill(T::zero());
                                continue;
                            }
                            let base = (sz as usize * ny + sy as usize) * nx;
                            dst[..x0].fill(T::zero());
                            let s0 = (x0 as isize + dx) as usize + base;
                            dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                            dst[x1..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add rows of `cols` back into `dx`.
pub fn col2im_add<T: Real>(cols: &[T], channels: usize, dims: [usize; 3], k: usize, dx: &mut [T]) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let kk = k * k * k;
    let pad = (k / 2) as isize;
    for ci in 0..channels {
        let dst = &mut dx[ci * n..(ci + 1) * n];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ci * kk + (kz * k + ky) * k + kx;
                    let row = &cols[r * n..(r + 1) * n];
                    let (dx_, dy, dz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let (x0, x1) = valid_range(nx, dx_);
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..nz {
                        let sz = z as isize + dz;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let src = &row[(z * ny + y) * nx + x0..(z * ny + y) * nx + x1];
                            let s0 = (sz as usize * ny + sy as usize) * nx + (x0 as isize + dx_) as usize;
                            for (d, &g) in dst[s0..s0 + (x1 - x0)].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output x-range `[x0, x1)` whose shifted source `x + d` stays in `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let x0 = (-d).max(0) as usize;
    let x1 = (n as isize - d).clamp(0, n as isize) as usize;
    (x0.min(n), x1)
}

pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dims: [usize; 3],
    pub k: usize,
}

impl ConvGeometry {
    fn n(&self) -> usize {
        self.dims.iter().product()
    }

    fn patch(&self) -> usize {
        self.in_channels * self.k * self.k * self.k
    }
}

/// Same-padded stride-1 convolution (cross-correlation). Returns the output
/// and, when `keep_cols`, the per-batch im2col buffers for the weight
/// gradient.
pub fn conv3d_forward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Vec<Vec<T>>) {
    let n = g.n();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.out_channels * n];
    let mut saved = Vec::new();
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * n..(b + 1) * g.in_channels * n];
        let ob = &mut out[b * g.out_channels * n..(b + 1) * g.out_channels * n];
        for (co, row) in ob.chunks_exact_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        if g.k == 1 {
            gemm(g.out_channels, patch, n, T::one(), w, Strides::row_major(patch), xb, Strides::row_major(n), T::one(), ob, Strides::row_major(n));
            continue;
        }
        let mut cols = vec![T::zero(); patch * n];
        im2col(xb, g.in_channels, g.dims, g.k, &mut cols);
        gemm(g.out_channels, patch, n, T::one(), w, Strides::row_major(patch), &cols, Strides::row_major(n), T::one(), ob, Strides::row_major(n));
        if keep_cols {
            saved.push(cols);
        }
    }
    (out, saved)
}

/// Accumulates weight/bias gradients given upstream `dout`.
pub fn conv3d_backward_params<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    cols: &[Vec<T>],
    dout: &[T],
    dw: &mut [T],
    db: &mut [T],
) {
    let n = g.n();
    let patch = g.patch();
    for b in 0..g.batch {
        let db_ = &dout[b * g.out_channels * n..(b + 1) * g.out_channels * n];
        for (co, row) in db_.chunks_exact(n).enumerate() {
            db[co] += sum_f64(row);
        }
        let cb: &[T] = if g.k == 1 { &x[b * g.in_channels * n..(b + 1) * g.in_channels * n] } else { &cols[b] };
        gemm(
            g.out_channels,
            n,
            patch,
            T::one(),
            db_,
            Strides::row_major(n),
            cb,
            Strides::transposed(n),
            T::one(),
            dw,
            Strides::row_major(patch),
        );
    }
}

pub fn conv3d_backward_input<T: Real>(g: &ConvGeometry, w: &[T], dout: &[T], dx: &mut [T]) {
    let n = g.n();
    let patch = g.patch();
    let mut dcols = if g.k == 1 { Vec::new() } else { vec![T::zero(); patch * n] };
    for b in 0..g.batch {
        let db_ = &dout[b * g.out_channels * n..(b + 1) * g.out_channels * n];
        let dxb = &mut dx[b * g.in_channels * n..(b + 1) * g.in_channels * n];
        if g.k == 1 {
            gemm(
                patch,
                g.out_channels,
                n,
                T::one(),
                w,
                Strides::transposed(patch),
                db_,
                Strides::row_major(n),
                T::one(),
                dxb,
                Strides::row_major(n),
            );
        } else {
            gemm(
                patch,
                g.out_channels,
                n,
                T::one(),
                w,
                Strides::transposed(patch),
                db_,
                Strides::row_major(n),
                T::zero(),
                &mut dcols,
                Strides::row_major(n),
            );
            col2im_add(&dcols, g.in_channels, g.dims, g.k, dxb);
        }
    }
}

/// Kernel-2 stride-2 transpose convolution. `w` is `(in, out, 2, 2, 2)`.
pub fn transpose_conv_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let n = g.n();
    let [nx, ny, nz] = g.dims;
    let (ox, oy) = (2 * nx, 2 * ny);
    let on = 8 * n;
    let rows = g.out_channels * 8;
    let mut out = vec![T::zero(); g.batch * g.out_channels * on];
    let mut y = vec![T::zero(); rows * n];
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * n..(b + 1) * g.in_channels * n];
        gemm(
            rows,
            g.in_channels,
            n,
            T::one(),
            w,
            Strides::transposed(rows),
            xb,
            Strides::row_major(n),
            T::zero(),
            &mut y,
            Strides::row_major(n),
        );
        let ob = &mut out[b * g.out_channels * on..(b + 1) * g.out_channels * on];
        for co in 0..g.out_channels {
            let plane = &mut ob[co * on..(co + 1) * on];
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let src = &y[(co * 8 + (kz * 2 + ky) * 2 + kx) * n..][..n];
                        for z in 0..nz {
                            for yy in 0..ny {
                                let srow = &src[(z * ny + yy) * nx..][..nx];
                                let base = ((2 * z + kz) * oy + 2 * yy + ky) * ox + kx;
                                for (xx, &v) in srow.iter().enumerate() {
                                    plane[base + 2 * xx] = v + bias[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gathers `dout` into the `(out·8 × n)` layout used by the forward GEMM.
fn transpose_conv_gather<T: Real>(g: &ConvGeometry, dout_b: &[T], dy: &mut [T]) {
    let n = g.n();
    let [nx, ny, nz] = g.dims;
    let (ox, oy) = (2 * nx, 2 * ny);
    let on = 8 * n;
    for co in 0..g.out_channels {
        let plane = &dout_b[co * on..(co + 1) * on];
        for kz in 0..2 {
            for ky in 0..2 {
                for kx in 0..2 {
                    let dst = &mut dy[(co * 8 + (kz * 2 + ky) * 2 + kx) * n..][..n];
                    for z in 0..nz {
                        for yy in 0..ny {
                            let base = ((2 * z + kz) * oy + 2 * yy + ky) * ox + kx;
                            let drow = &mut dst[(z * ny + yy) * nx..][..nx];
                            for (xx, d) in drow.iter_mut().enumerate() {
                                *d = plane[base + 2 * xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn transpose_conv_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.n();
    let on = 8 * n;
    let rows = g.out_channels * 8;
    let mut dy = vec![T::zero(); rows * n];
    let (mut dx, mut dw, mut db) = (dx, dw, db);
    for b in 0..g.batch {
        let dout_b = &dout[b * g.out_channels * on..(b + 1) * g.out_channels * on];
        if let Some(db) = db.as_deref_mut() {
            for (co, plane) in dout_b.chunks_exact(on).enumerate() {
                db[co] += sum_f64(plane);
            }
        }
        transpose_conv_gather(g, dout_b, &mut dy);
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * g.in_channels * n..(b + 1) * g.in_channels * n];
            gemm(
                g.in_channels,
                n,
                rows,
                T::one(),
                xb,
                Strides::row_major(n),
                &dy,
                Strides::transposed(n),
                T::one(),
                dw,
                Strides::row_major(rows),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * g.in_channels * n..(b + 1) * g.in_channels * n];
            gemm(
                g.in_channels,
                rows,
                n,
                T::one(),
                w,
                Strides::row_major(rows),
                &dy,
                Strides::row_major(n),
                T::one(),
                dxb,
                Strides::row_major(n),
            );
        }
    }
}

/// 2×2×2 max pooling over each (batch, channel) plane. Returns pooled values
/// and the flat input index of each maximum (first index wins ties).
pub fn max_pool2<T: Real>(x: &[T], planes: usize, dims: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let [nx, ny, nz] = dims;
    let (px, py, pz) = (nx / 2, ny / 2, nz / 2);
    let n = nx * ny * nz;
    let pn = px * py * pz;
    let mut out = Vec::with_capacity(planes * pn);
    let mut arg = Vec::with_capacity(planes * pn);
    for p in 0..planes {
        let base = p * n;
        for z in 0..pz {
            for y in 0..py {
                for xx in 0..px {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xx + dx;
                                if x[i] > best || (dz == 0 && dy == 0 && dx == 0) {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn sum_f64<T: Real>(xs: &[T]) -> T {
    T::from_f64_lossy(xs.iter().map(|v| v.to_f64().unwrap()).sum::<f64>())
}
