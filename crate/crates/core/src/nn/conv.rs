//! im2col / col2im for 3D convolutions over `[C, D, H, W]` grids.

use std::ops::Range;

use super::{gemm, gemm_strided, Scalar, Strides};

/// Cubic kernel geometry shared by all three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// 3x3x3, stride 1, zero padding 1: shape preserving.
    pub const SAME3: ConvGeom = ConvGeom {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    /// 1x1x1 pointwise.
    pub const POINTWISE: ConvGeom = ConvGeom {
        kernel: 1,
        stride: 1,
        pad: 0,
    };
    /// 2x2x2, stride 2: halves every spatial dim.
    pub const DOWN2: ConvGeom = ConvGeom {
        kernel: 2,
        stride: 2,
        pad: 0,
    };

    pub fn is_pointwise(&self) -> bool {
        *self == Self::POINTWISE
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.pad;
            if padded < self.kernel {
                return None;
            }
            out[a] = (padded - self.kernel) / self.stride + 1;
        }
        Some(out)
    }
}

/// Valid output range `[lo, hi)` along one axis for stride-1 kernel offset `off`.
fn unit_stride_range(off: isize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (in_len as isize - off).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Expands output rows `rows` (an output row is one `(oz, oy)` line of
/// `od[2]` voxels) of the convolution of `x` (`cin x dims`) into a
/// `(cin * k^3) x (rows.len() * od[2])` matrix.
pub fn im2col_rows<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    g: ConvGeom,
    od: [usize; 3],
    rows: Range<usize>,
    col: &mut [T],
) {
    let [d, h, w] = dims;
    let nc = rows.len() * od[2];
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    assert!(col.len() >= cin * g.taps() * nc);
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let out_row = &mut col[row * nc..(row + 1) * nc];
                    let offx = kx as isize - p;
                    for (i, r) in rows.clone().enumerate() {
                        let (oz, oy) = (r / od[1], r % od[1]);
                        let iz = (oz * s + kz) as isize - p;
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut out_row[i * od[2]..][..od[2]];
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                        if s == 1 {
                            let (lo, hi) = unit_stride_range(offx, w, od[2]);
                            dst[..lo].fill(T::zero());
                            let a = (lo as isize + offx) as usize;
                            dst[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                            dst[hi..].fill(T::zero());
                        } else {
                            for (ox, v) in dst.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + offx;
                                *v = if ix >= 0 && ix < w as isize {
                                    src[ix as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: scatter-adds `col` back into `dx`.
pub fn col2im_rows<T: Scalar>(
    col: &[T],
    cin: usize,
    dims: [usize; 3],
    g: ConvGeom,
    od: [usize; 3],
    rows: Range<usize>,
    dx: &mut [T],
) {
    let [d, h, w] = dims;
    let nc = rows.len() * od[2];
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let in_row = &col[row * nc..(row + 1) * nc];
                    let offx = kx as isize - p;
                    for (i, r) in rows.clone().enumerate() {
                        let (oz, oy) = (r / od[1], r % od[1]);
                        let iz = (oz * s + kz) as isize - p;
                        let iy = (oy * s + ky) as isize - p;
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &in_row[i * od[2]..][..od[2]];
                        let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                        if s == 1 {
                            let (lo, hi) = unit_stride_range(offx, w, od[2]);
                            let a = (lo as isize + offx) as usize;
                            for (dv, &sv) in dst[a..a + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *dv += sv;
                            }
                        } else {
                            for (ox, &sv) in src.iter().enumerate() {
                                let ix = (ox * s) as isize + offx;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += sv;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Shape bookkeeping for one convolution of a `cin x dims` grid into `cout`
/// channels.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub od: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvShape {
    fn kk(&self) -> usize {
        self.cin * self.geom.taps()
    }

    fn ov(&self) -> usize {
        self.od.iter().product()
    }

    /// Output rows per im2col chunk, sized so the chunk buffer stays cache
    /// resident.
    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / (self.kk() * self.od[2]).max(1)).max(1)
    }

    fn chunks(&self) -> impl Iterator<Item = Range<usize>> {
        let rows = self.od[0] * self.od[1];
        let step = self.chunk_rows();
        (0..rows)
            .step_by(step)
            .map(move |r0| r0..(r0 + step).min(rows))
    }
}

/// Elements in one reusable im2col chunk.
const COL_BUDGET: usize = 1 << 17;

/// `out = w * im2col(x)`, with `w` shaped `cout x (cin * k^3)` and `out`
/// shaped `cout x prod(od)`.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], s: ConvShape, out: &mut [T]) {
    conv_into(x, w, s, T::zero(), out);
}

/// `out = w * im2col(x) + beta * out`.
fn conv_into<T: Scalar>(x: &[T], w: &[T], s: ConvShape, beta: T, out: &mut [T]) {
    let (kk, ov, ow) = (s.kk(), s.ov(), s.od[2]);
    if s.geom.is_pointwise() {
        gemm(s.cout, s.cin, ov, w, false, x, false, beta, out);
        return;
    }
    let mut col = vec![T::zero(); kk * s.chunk_rows() * ow];
    for rows in s.chunks() {
        let nc = rows.len() * ow;
        let off = rows.start * ow;
        im2col_rows(x, s.cin, s.dims, s.geom, s.od, rows, &mut col);
        gemm_strided(
            s.cout,
            kk,
            nc,
            w,
            Strides::row_major(kk),
            &col,
            Strides::row_major(nc),
            beta,
            &mut out[off..],
            Strides::row_major(ov),
        );
    }
}

/// Gradients of [`conv_forward`]: accumulates into `dw` and `dx` when given.
pub fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    s: ConvShape,
    dy: &[T],
    mut dw: Option<&mut [T]>,
    mut dx: Option<&mut [T]>,
) {
    let (kk, ov, ow) = (s.kk(), s.ov(), s.od[2]);
    if s.geom.is_pointwise() {
        if let Some(dw) = dw {
            gemm(s.cout, ov, s.cin, dy, false, x, true, T::one(), dw);
        }
        if let Some(dx) = dx {
            gemm(s.cin, s.cout, ov, w, true, dy, false, T::one(), dx);
        }
        return;
    }
    if s.geom == ConvGeom::SAME3 {
        if let Some(dx) = dx.take() {
            // the input gradient of a stride-1 "same" convolution is the same
            // convolution of dy with spatially flipped, channel-swapped weights
            let taps = s.geom.taps();
            let mut wf = vec![T::zero(); w.len()];
            for co in 0..s.cout {
                for ci in 0..s.cin {
                    let src = &w[(co * s.cin + ci) * taps..][..taps];
                    let dst = &mut wf[(ci * s.cout + co) * taps..][..taps];
                    for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                        *d = v;
                    }
                }
            }
            let t = ConvShape {
                cin: s.cout,
                cout: s.cin,
                ..s
            };
            conv_into(dy, &wf, t, T::one(), dx);
        }
    }
    if dw.is_none() && dx.is_none() {
        return;
    }
    let cap = kk * s.chunk_rows() * ow;
    let mut col = vec![T::zero(); if dw.is_some() { cap } else { 0 }];
    let mut dcol = vec![T::zero(); if dx.is_some() { cap } else { 0 }];
    for rows in s.chunks() {
        let nc = rows.len() * ow;
        let off = rows.start * ow;
        if let Some(dw) = dw.as_deref_mut() {
            im2col_rows(x, s.cin, s.dims, s.geom, s.od, rows.clone(), &mut col);
            gemm_strided(
                s.cout,
                nc,
                kk,
                &dy[off..],
                Strides::row_major(ov),
                &col,
                Strides::transposed(nc),
                T::one(),
                dw,
                Strides::row_major(kk),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm_strided(
                kk,
                s.cout,
                nc,
                w,
                Strides::transposed(kk),
                &dy[off..],
                Strides::row_major(ov),
                T::zero(),
                &mut dcol,
                Strides::row_major(nc),
            );
            col2im_rows(&dcol, s.cin, s.dims, s.geom, s.od, rows, dx);
        }
    }
}
