//! Overlapping patch pairs with exact voxel correspondence, and positive
//! voxel-pair sampling from their overlap.

use ndarray::{s, Array3};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Half-open integer box `[lo, hi)` in volume coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Box3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Box3 {
    pub fn from_origin(origin: [usize; 3], size: [usize; 3]) -> Self {
        Box3 {
            lo: origin,
            hi: std::array::from_fn(|a| origin[a] + size[a]),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a].saturating_sub(self.lo[a]))
    }

    pub fn volume(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.volume() == 0
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn intersect(&self, other: &Box3) -> Box3 {
        let lo = std::array::from_fn(|a| self.lo[a].max(other.lo[a]));
        let hi = std::array::from_fn(|a| self.hi[a].min(other.hi[a]).max(lo[a]));
        Box3 { lo, hi }
    }

    /// The `i`-th voxel in row-major order.
    pub fn voxel(&self, i: usize) -> [usize; 3] {
        let d = self.dims();
        [
            self.lo[0] + i / (d[1] * d[2]),
            self.lo[1] + (i / d[2]) % d[1],
            self.lo[2] + i % d[2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub patch_a: Array3<f32>,
    pub patch_b: Array3<f32>,
    pub origin_a: [usize; 3],
    pub origin_b: [usize; 3],
    pub overlap: Box3,
}

impl PatchPair {
    pub fn patch_size(&self) -> [usize; 3] {
        let s = self.patch_a.shape();
        [s[0], s[1], s[2]]
    }

    pub fn overlap_fraction(&self) -> f64 {
        self.overlap.volume() as f64 / self.patch_a.len() as f64
    }
}

/// `n` corresponding voxels, given in each patch's local frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelBatch {
    pub coords_a: Vec<[usize; 3]>,
    pub coords_b: Vec<[usize; 3]>,
}

impl VoxelBatch {
    pub fn len(&self) -> usize {
        self.coords_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords_a.is_empty()
    }

    /// Negatives faced by each anchor: every other sampled voxel of both
    /// patches.
    pub fn negatives_per_anchor(&self) -> usize {
        2 * self.len().saturating_sub(1)
    }
}

fn crop(volume: &Array3<f32>, origin: [usize; 3], size: [usize; 3]) -> Array3<f32> {
    volume
        .slice(s![
            origin[0]..origin[0] + size[0],
            origin[1]..origin[1] + size[1],
            origin[2]..origin[2] + size[2]
        ])
        .to_owned()
}

fn check_fits(vshape: [usize; 3], size: [usize; 3]) -> Result<()> {
    if size.contains(&0) {
        return Err(Error::invalid("patch size must be >= 1"));
    }
    if (0..3).any(|a| vshape[a] < size[a]) {
        return Err(Error::invalid(format!(
            "volume {vshape:?} smaller than patch {size:?}"
        )));
    }
    Ok(())
}

/// Builds a pair from explicit origins.
pub fn pair_from_origins(
    volume: &Array3<f32>,
    size: [usize; 3],
    origin_a: [usize; 3],
    origin_b: [usize; 3],
) -> Result<PatchPair> {
    let sh = volume.shape();
    let vshape = [sh[0], sh[1], sh[2]];
    check_fits(vshape, size)?;
    for o in [origin_a, origin_b] {
        if (0..3).any(|a| o[a] + size[a] > vshape[a]) {
            return Err(Error::invalid(format!("patch at {o:?} leaves the volume")));
        }
    }
    let overlap = Box3::from_origin(origin_a, size).intersect(&Box3::from_origin(origin_b, size));
    if overlap.is_empty() {
        return Err(Error::invalid("patches do not overlap"));
    }
    Ok(PatchPair {
        patch_a: crop(volume, origin_a, size),
        patch_b: crop(volume, origin_b, size),
        origin_a,
        origin_b,
        overlap,
    })
}

const REJECTION_TRIES: usize = 64;

fn overlap_volume(size: [usize; 3], delta: [i64; 3]) -> usize {
    (0..3)
        .map(|a| (size[a] as i64 - delta[a].abs()).max(0) as usize)
        .product()
}

/// Draws two crops uniformly among all origin pairs whose overlap covers at
/// least `min_overlap_fraction` of the patch volume.
///
/// Rejection sampling is tried first; if it keeps failing, the offset between
/// the crops is drawn exactly from its marginal (each offset weighted by the
/// number of origin pairs realising it), which preserves uniformity.
pub fn sample_patch_pair<R: Rng + ?Sized>(
    volume: &Array3<f32>,
    size: [usize; 3],
    min_overlap_fraction: f64,
    rng: &mut R,
) -> Result<PatchPair> {
    if !(min_overlap_fraction > 0.0 && min_overlap_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "min_overlap_fraction must lie in (0, 1], got {min_overlap_fraction}"
        )));
    }
    let sh = volume.shape();
    let vshape = [sh[0], sh[1], sh[2]];
    check_fits(vshape, size)?;
    let need = min_overlap_fraction * size.iter().product::<usize>() as f64;
    let slack: [usize; 3] = std::array::from_fn(|a| vshape[a] - size[a]);

    for _ in 0..REJECTION_TRIES {
        let oa: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=slack[a]));
        let ob: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=slack[a]));
        let delta = std::array::from_fn(|a| ob[a] as i64 - oa[a] as i64);
        if overlap_volume(size, delta) as f64 >= need {
            return pair_from_origins(volume, size, oa, ob);
        }
    }

    let range: [i64; 3] = std::array::from_fn(|a| (size[a] as i64 - 1).min(slack[a] as i64));
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    for dz in -range[0]..=range[0] {
        for dy in -range[1]..=range[1] {
            for dx in -range[2]..=range[2] {
                let d = [dz, dy, dx];
                if (overlap_volume(size, d) as f64) < need {
                    continue;
                }
                let w: u64 = (0..3)
                    .map(|a| (slack[a] as i64 - d[a].abs() + 1) as u64)
                    .product();
                offsets.push(d);
                weights.push(w);
            }
        }
    }
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Err(Error::invalid(format!(
            "no crop pair in {vshape:?} reaches overlap fraction {min_overlap_fraction}"
        )));
    }
    let mut pick = rng.random_range(0..total);
    let mut delta = offsets[0];
    for (d, &w) in offsets.iter().zip(&weights) {
        if pick < w {
            delta = *d;
            break;
        }
        pick -= w;
    }
    let oa: [usize; 3] = std::array::from_fn(|a| {
        let lo = (-delta[a]).max(0);
        let hi = slack[a] as i64 - delta[a].max(0);
        rng.random_range(lo..=hi) as usize
    });
    let ob = std::array::from_fn(|a| (oa[a] as i64 + delta[a]) as usize);
    pair_from_origins(volume, size, oa, ob)
}

/// Samples `n` distinct overlap voxels uniformly without replacement and
/// expresses them in both patch frames.
pub fn sample_positive_pairs<R: Rng + ?Sized>(
    pair: &PatchPair,
    n: usize,
    rng: &mut R,
) -> Result<VoxelBatch> {
    let total = pair.overlap.volume();
    if n == 0 {
        return Err(Error::invalid("need at least one positive pair"));
    }
    if n > total {
        return Err(Error::invalid(format!(
            "overlap holds {total} voxels, cannot sample {n}"
        )));
    }
    let picks = index::sample(rng, total, n);
    let mut coords_a = Vec::with_capacity(n);
    let mut coords_b = Vec::with_capacity(n);
    for i in picks.iter() {
        let p = pair.overlap.voxel(i);
        coords_a.push(std::array::from_fn(|a| p[a] - pair.origin_a[a]));
        coords_b.push(std::array::from_fn(|a| p[a] - pair.origin_b[a]));
    }
    Ok(VoxelBatch { coords_a, coords_b })
}
