//! Contrastive, restorative and hybrid losses on plain arrays.

use ndarray::{ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss_kernels;

/// Tolerance on `|z| = 1` accepted by [`info_nce`].
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// How the per-anchor contrastive terms are combined inside a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    /// Reduction of the contrastive sum over anchors used during training.
    pub contrastive_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda: 10.0,
            contrastive_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::config("loss.tau", "must be positive"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config("loss.lambda", "must be non-negative"));
        }
        Ok(())
    }

    /// Factor applied to the anchor sum for `n` anchors.
    pub fn contrastive_scale(&self, n: usize) -> f64 {
        match self.contrastive_reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_r: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_c: f64, l_r: f64, lambda: f64) -> Self {
        LossReport {
            l_c,
            l_r,
            l_total: hybrid_loss(l_c, l_r, lambda),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_c.is_finite() && self.l_r.is_finite() && self.l_total.is_finite()
    }
}

fn check_unit_rows(z: &ArrayView2<f64>, name: &str) -> Result<()> {
    for (i, row) in z.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!(
                "{name} row {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Symmetrised InfoNCE summed over anchors.
///
/// Anchor `i` of one set is scored against its partner in the other set and
/// against the `2(n-1)` remaining rows of both sets; the sum over anchors is
/// averaged over the two anchor sides. Computed with max-subtracted
/// log-sum-exp.
pub fn info_nce(z_a: ArrayView2<f64>, z_b: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if z_a.shape() != z_b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", z_a.shape(), z_b.shape())));
    }
    let (n, e) = z_a.dim();
    if n == 0 {
        return Err(Error::invalid("info_nce needs at least one pair"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid("tau must be positive"));
    }
    check_unit_rows(&z_a, "z_a")?;
    check_unit_rows(&z_b, "z_b")?;
    let a: Vec<f64> = z_a.iter().copied().collect();
    let b: Vec<f64> = z_b.iter().copied().collect();
    Ok(loss_kernels::info_nce(&a, &b, n, e, tau, 1.0, false).0)
}

fn mean_sq(x: &ArrayView3<f32>, y: &ArrayView3<f32>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty reconstruction target"));
    }
    let s: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / x.len() as f64)
}

/// Mean of the two per-patch mean squared errors. Targets are the
/// unaugmented crops.
pub fn mse_recon(
    x_a: ArrayView3<f32>,
    xhat_a: ArrayView3<f32>,
    x_b: ArrayView3<f32>,
    xhat_b: ArrayView3<f32>,
) -> Result<f64> {
    Ok(0.5 * (mean_sq(&x_a, &xhat_a)? + mean_sq(&x_b, &xhat_b)?))
}

pub fn hybrid_loss(l_c: f64, l_r: f64, lambda: f64) -> f64 {
    l_c + lambda * l_r
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn unit_rows(n: usize, e: usize, rng: &mut impl Rng) -> Array2<f64> {
        let mut z = Array2::from_shape_fn((n, e), |_| rng.random_range(-1.0..1.0));
        for mut row in z.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        z
    }

    /// Direct transcription with explicit exponentials and double loops.
    fn naive(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> f64 {
        let n = za.nrows();
        let d = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| (x.dot(&y) / tau).exp();
        let side = |p: &Array2<f64>, q: &Array2<f64>| {
            let mut total = 0.0;
            for i in 0..n {
                let pos = d(p.row(i), q.row(i));
                let mut den = pos;
                for j in 0..n {
                    if j != i {
                        den += d(p.row(i), p.row(j)) + d(p.row(i), q.row(j));
                    }
                }
                total -= (pos / den).ln();
            }
            total
        };
        0.5 * (side(za, zb) + side(zb, za))
    }

    #[test]
    fn single_pair_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = unit_rows(1, 4, &mut rng);
        let b = unit_rows(1, 4, &mut rng);
        assert_eq!(info_nce(a.view(), b.view(), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=8 {
            for tau in [0.05, 0.1, 0.5] {
                let a = unit_rows(n, 6, &mut rng);
                let b = unit_rows(n, 6, &mut rng);
                let got = info_nce(a.view(), b.view(), tau).unwrap();
                let want = naive(&a, &b, tau);
                assert!((got - want).abs() < 1e-6, "n={n} tau={tau}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn aligned_orthogonal_pairs_beat_orthogonal_positives() {
        // z_a = z_b = [e1, e2]: positive similarity 1, negatives 0
        let aligned = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let l_aligned = info_nce(aligned.view(), aligned.view(), 0.1).unwrap();
        // each anchor: -ln(e^10 / (e^10 + 2))
        let want = -(10f64.exp() / (10f64.exp() + 2.0)).ln() * 2.0;
        assert!((l_aligned - want).abs() < 1e-12);
        // positives orthogonal: z_b rows rotated into e3 / -e3 plane
        let zb = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0]).unwrap();
        let l_orth = info_nce(aligned.view(), zb.view(), 0.1).unwrap();
        assert!(l_aligned > 0.0 && l_aligned < l_orth);
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = Array2::<f64>::zeros((0, 3));
        assert!(info_nce(z.view(), z.view(), 0.1).is_err());
        let z = Array2::from_elem((2, 2), 1.0);
        assert!(info_nce(z.view(), z.view(), 0.1).is_err());
    }

    #[test]
    fn mse_examples() {
        let x = Array3::from_shape_fn((3, 4, 5), |(a, b, c)| (a + b * c) as f32 * 0.1);
        let v = x.view();
        assert_eq!(mse_recon(v, v, v, v).unwrap(), 0.0);
        let y = x.mapv(|v| v + 1.0);
        assert!((mse_recon(v, y.view(), v, y.view()).unwrap() - 1.0).abs() < 1e-6);
        assert!(mse_recon(v, Array3::zeros((3, 4, 4)).view(), v, v).is_err());
    }

    #[test]
    fn mse_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = || Array3::from_shape_fn((4, 5, 6), |_| rng.random_range(-1.0f32..1.0));
        let (a, ha, b, hb) = (r(), r(), r(), r());
        let mut sa = 0.0;
        for (x, y) in a.iter().zip(ha.iter()) {
            sa += ((x - y) as f64) * ((x - y) as f64);
        }
        let mut sb = 0.0;
        for (x, y) in b.iter().zip(hb.iter()) {
            sb += ((x - y) as f64) * ((x - y) as f64);
        }
        let want = (sa / 120.0 + sb / 120.0) / 2.0;
        let got = mse_recon(a.view(), ha.view(), b.view(), hb.view()).unwrap();
        assert!((got - want).abs() < 1e-7);
    }

    #[test]
    fn hybrid_examples() {
        assert_eq!(hybrid_loss(2.0, 0.3, 0.0), 2.0);
        assert!((hybrid_loss(2.0, 0.3, 10.0) - 5.0).abs() < 1e-12);
        let r = LossReport::new(2.0, 0.3, 10.0);
        assert!((r.l_total - (r.l_c + 10.0 * r.l_r)).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nonnegative_symmetric_and_permutation_invariant(seed in any::<u64>(), n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_rows(n, 5, &mut rng);
            let b = unit_rows(n, 5, &mut rng);
            let l = info_nce(a.view(), b.view(), 0.2).unwrap();
            prop_assert!(l >= 0.0);
            let swapped = info_nce(b.view(), a.view(), 0.2).unwrap();
            prop_assert!((l - swapped).abs() < 1e-9);
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let pa = a.select(ndarray::Axis(0), &perm);
            let pb = b.select(ndarray::Axis(0), &perm);
            let lp = info_nce(pa.view(), pb.view(), 0.2).unwrap();
            prop_assert!((l - lp).abs() < 1e-9);
        }

        #[test]
        fn lower_temperature_lowers_loss_when_positives_dominate(seed in any::<u64>(), n in 2usize..8) {
            // positives identical, other rows spread: positives are the most similar pairs
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_rows(n, 16, &mut rng);
            let max_neg = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a.row(i).dot(&a.row(j)))
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(max_neg < 0.9);
            let hi = info_nce(a.view(), a.view(), 0.5).unwrap();
            let lo = info_nce(a.view(), a.view(), 0.1).unwrap();
            prop_assert!(lo < hi);
        }
    }
}
