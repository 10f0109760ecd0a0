//! Separable linear resampling along one axis of a dense row-major array.
//!
//! Sample positions follow the half-pixel convention: output index `o` maps to
//! source coordinate `(o + 0.5) * step - 0.5`, clamped to the valid range.

use crate::nn::Scalar;

/// Interpolation stencil for one output index: `(1 - w) * x[lo] + w * x[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

/// Linear taps for resampling `in_len` samples onto `out_len` samples with
/// source step `step` (source units per output sample).
pub fn linear_taps(in_len: usize, out_len: usize, step: f64) -> Vec<Tap> {
    assert!(in_len > 0);
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * step - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, w: src - lo as f64 }
        })
        .collect()
}

/// Nearest-neighbour source index for each output index.
pub fn nearest_taps(in_len: usize, out_len: usize, step: f64) -> Vec<usize> {
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|o| ((o as f64 + 0.5) * step - 0.5).clamp(0.0, max).round() as usize)
        .collect()
}

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Resample `x` (with `shape`) along `axis` using `taps`; the axis length
/// becomes `taps.len()`.
pub fn resample_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize, taps: &[Tap]) -> Vec<T> {
    let (outer, len, inner) = split(shape, axis);
    let out_len = taps.len();
    let mut out = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
        for (j, t) in taps.iter().enumerate() {
            let w1 = T::from_f64(t.w);
            let w0 = T::one() - w1;
            let a = &src[t.lo * inner..(t.lo + 1) * inner];
            let b = &src[t.hi * inner..(t.hi + 1) * inner];
            let d = &mut dst[j * inner..(j + 1) * inner];
            if t.w == 0.0 {
                d.copy_from_slice(a);
            } else {
                for ((d, &a), &b) in d.iter_mut().zip(a).zip(b) {
                    *d = w0 * a + w1 * b;
                }
            }
        }
    }
    out
}

/// Adjoint of [`resample_axis`]: maps a gradient with the resampled shape
/// back onto an array whose `axis` has length `in_len`.
pub fn resample_axis_adjoint<T: Scalar>(
    g: &[T],
    out_shape: &[usize],
    axis: usize,
    in_len: usize,
    taps: &[Tap],
) -> Vec<T> {
    let (outer, out_len, inner) = split(out_shape, axis);
    assert_eq!(out_len, taps.len());
    let mut gx = vec![T::zero(); outer * in_len * inner];
    for o in 0..outer {
        let src = &g[o * out_len * inner..(o + 1) * out_len * inner];
        let dst = &mut gx[o * in_len * inner..(o + 1) * in_len * inner];
        for (j, t) in taps.iter().enumerate() {
            let w1 = T::from_f64(t.w);
            let w0 = T::one() - w1;
            let gj = &src[j * inner..(j + 1) * inner];
            for (i, &v) in gj.iter().enumerate() {
                dst[t.lo * inner + i] += w0 * v;
            }
            if t.w != 0.0 {
                for (i, &v) in gj.iter().enumerate() {
                    dst[t.hi * inner + i] += w1 * v;
                }
            }
        }
    }
    gx
}
