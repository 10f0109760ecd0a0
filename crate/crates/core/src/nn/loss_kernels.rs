//! Loss values and their input gradients, shared by the autodiff graph and
//! the standalone objective functions.

use super::{gemm, Scalar};

/// Per-anchor log-softmax term `-pos + logsumexp(logits)`, stabilised by
/// subtracting the running max. Writes softmax probabilities into `probs`.
fn nll_with_probs(logits: &[f64], pos: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln() - logits[pos]
}

/// A loss value and, when requested, the gradients of both inputs.
pub type PairLoss<T> = (f64, Option<(Vec<T>, Vec<T>)>);

/// Symmetrised InfoNCE over `n` paired rows of `za`, `zb` (each `n x e`).
///
/// Every anchor is scored against its partner (positive) and the `2(n-1)`
/// other sampled rows of both sets (negatives). The returned loss is the sum
/// over anchors, averaged over the two anchor sides, times `scale`.
/// Gradients with respect to `za` and `zb` are returned when requested.
pub fn info_nce<T: Scalar>(
    za: &[T],
    zb: &[T],
    n: usize,
    e: usize,
    tau: f64,
    scale: f64,
    want_grad: bool,
) -> PairLoss<T> {
    let mut sab = vec![T::zero(); n * n];
    let mut saa = vec![T::zero(); n * n];
    let mut sbb = vec![T::zero(); n * n];
    gemm(n, e, n, za, false, za, true, T::zero(), &mut saa);
    gemm(n, e, n, zb, false, zb, true, T::zero(), &mut sbb);
    gemm(n, e, n, za, false, zb, true, T::zero(), &mut sab);

    // candidate layout per anchor: [cross 0..n | same-side j != i]
    let m = 2 * n - 1;
    let mut logits = vec![0.0f64; m];
    let mut probs = vec![0.0f64; m];
    let mut total = 0.0;
    let w = 0.5 * scale;
    let (mut gab, mut gaa, mut gbb) = if want_grad {
        (vec![0.0f64; n * n], vec![0.0f64; n * n], vec![0.0f64; n * n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    for side in 0..2 {
        for i in 0..n {
            for j in 0..n {
                let cross = if side == 0 { sab[i * n + j] } else { sab[j * n + i] };
                logits[j] = cross.as_f64() / tau;
            }
            let same = if side == 0 { &saa } else { &sbb };
            let mut c = n;
            for j in 0..n {
                if j != i {
                    logits[c] = same[i * n + j].as_f64() / tau;
                    c += 1;
                }
            }
            total += nll_with_probs(&logits, i, &mut probs);
            if want_grad {
                for j in 0..n {
                    let g = w * (probs[j] - if j == i { 1.0 } else { 0.0 }) / tau;
                    if side == 0 {
                        gab[i * n + j] += g;
                    } else {
                        gab[j * n + i] += g;
                    }
                }
                let gs = if side == 0 { &mut gaa } else { &mut gbb };
                let mut c = n;
                for j in 0..n {
                    if j != i {
                        gs[i * n + j] += w * probs[c] / tau;
                        c += 1;
                    }
                }
            }
        }
    }
    let loss = w * total;
    if !want_grad {
        return (loss, None);
    }
    // symmetric same-side similarities: S = Z Z^T, so dZ = (G + G^T) Z
    let sym = |g: &[f64]| -> Vec<T> {
        let mut s = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = T::from_f64(g[i * n + j] + g[j * n + i]);
            }
        }
        s
    };
    let gab_t: Vec<T> = gab.iter().map(|&v| T::from_f64(v)).collect();
    let gaa_s = sym(&gaa);
    let gbb_s = sym(&gbb);
    let mut dza = vec![T::zero(); n * e];
    let mut dzb = vec![T::zero(); n * e];
    gemm(n, n, e, &gab_t, false, zb, false, T::zero(), &mut dza);
    gemm(n, n, e, &gaa_s, false, za, false, T::one(), &mut dza);
    gemm(n, n, e, &gab_t, true, za, false, T::zero(), &mut dzb);
    gemm(n, n, e, &gbb_s, false, zb, false, T::one(), &mut dzb);
    (loss, Some((dza, dzb)))
}

/// Mean voxelwise cross-entropy of `k x v` logits against class ids.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[u8],
    k: usize,
    want_grad: bool,
) -> (f64, Option<Vec<T>>) {
    let v = labels.len();
    let mut grad = if want_grad { vec![T::zero(); k * v] } else { Vec::new() };
    let mut total = 0.0;
    let inv = 1.0 / v as f64;
    let mut col = vec![0.0f64; k];
    let mut probs = vec![0.0f64; k];
    for (i, &lab) in labels.iter().enumerate() {
        for c in 0..k {
            col[c] = logits[c * v + i].as_f64();
        }
        total += nll_with_probs(&col, lab as usize, &mut probs);
        if want_grad {
            for c in 0..k {
                let y = if c == lab as usize { 1.0 } else { 0.0 };
                grad[c * v + i] = T::from_f64((probs[c] - y) * inv);
            }
        }
    }
    (total * inv, want_grad.then_some(grad))
}
