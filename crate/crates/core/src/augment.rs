//! Local augmentations: pixel shuffling inside small boxes, in-painting of
//! boxes, and a random monotone intensity curve.

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchpair::Box3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShuffleSpec {
    pub num_blocks: usize,
    /// Inclusive range of box side lengths, drawn per axis.
    pub block_size_range: [usize; 2],
    pub probability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    UniformNoise,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintSpec {
    pub num_regions: usize,
    pub region_size_range: [usize; 2],
    pub fill: Fill,
    /// Value written by [`Fill::Constant`].
    pub fill_value: f32,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensitySpec {
    /// Interior control points of the curve; the endpoints (0,0) and (1,1)
    /// are always present.
    pub num_control_points: usize,
    pub probability: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub shuffle: ShuffleSpec,
    pub inpaint: InpaintSpec,
    pub intensity: IntensitySpec,
}

impl Default for ShuffleSpec {
    fn default() -> Self {
        ShuffleSpec {
            num_blocks: 10,
            block_size_range: [2, 6],
            probability: 0.8,
        }
    }
}

impl Default for InpaintSpec {
    fn default() -> Self {
        InpaintSpec {
            num_regions: 3,
            region_size_range: [4, 10],
            fill: Fill::UniformNoise,
            fill_value: 0.5,
            probability: 0.5,
        }
    }
}

impl Default for IntensitySpec {
    fn default() -> Self {
        IntensitySpec {
            num_control_points: 6,
            probability: 0.9,
        }
    }
}

impl AugmentationSpec {
    /// All augmentations switched off.
    pub fn disabled() -> Self {
        let mut s = Self::default();
        s.shuffle.probability = 0.0;
        s.inpaint.probability = 0.0;
        s.intensity.probability = 0.0;
        s
    }

    pub fn validate(&self, patch: [usize; 3]) -> Result<()> {
        for (name, p) in [
            ("augment.shuffle.probability", self.shuffle.probability),
            ("augment.inpaint.probability", self.inpaint.probability),
            ("augment.intensity.probability", self.intensity.probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("{p} not in [0, 1]")));
            }
        }
        check_range("augment.shuffle.block_size_range", self.shuffle.block_size_range, patch)?;
        check_range("augment.inpaint.region_size_range", self.inpaint.region_size_range, patch)?;
        if !(0.0..=1.0).contains(&self.inpaint.fill_value) {
            return Err(Error::config("augment.inpaint.fill_value", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_range(field: &str, r: [usize; 2], patch: [usize; 3]) -> Result<()> {
    let min = *patch.iter().min().unwrap();
    if r[0] == 0 || r[0] > r[1] || r[1] > min {
        return Err(Error::config(
            field,
            format!("range {r:?} must satisfy 1 <= lo <= hi <= {min}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPatch {
    pub data: Array3<f32>,
    /// Voxels altered by a local corruption.
    pub touched: Array3<bool>,
    /// Local corruption boxes in application order.
    pub boxes: Vec<Box3>,
    /// Global intensity curve applied before any local corruption.
    pub intensity: Option<MonotoneMap>,
}

impl AugmentedPatch {
    pub fn identity(patch: &Array3<f32>) -> Self {
        AugmentedPatch {
            data: patch.clone(),
            touched: Array3::from_elem(patch.raw_dim(), false),
            boxes: Vec::new(),
            intensity: None,
        }
    }
}

fn dims(a: &Array3<f32>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, patch: [usize; 3], range: [usize; 2]) -> Box3 {
    let size: [usize; 3] = std::array::from_fn(|_| rng.random_range(range[0]..=range[1]));
    let origin = std::array::from_fn(|a| rng.random_range(0..=patch[a] - size[a]));
    Box3::from_origin(origin, size)
}

fn shuffle_into<R: Rng + ?Sized>(out: &mut AugmentedPatch, spec: &ShuffleSpec, rng: &mut R) {
    let shape = dims(&out.data);
    for _ in 0..spec.num_blocks {
        let b = random_box(rng, shape, spec.block_size_range);
        let sl = s![b.lo[0]..b.hi[0], b.lo[1]..b.hi[1], b.lo[2]..b.hi[2]];
        let mut vals: Vec<f32> = out.data.slice(sl).iter().copied().collect();
        vals.shuffle(rng);
        for (dst, v) in out.data.slice_mut(sl).iter_mut().zip(vals) {
            *dst = v;
        }
        out.touched.slice_mut(sl).fill(true);
        out.boxes.push(b);
    }
}

fn inpaint_into<R: Rng + ?Sized>(out: &mut AugmentedPatch, spec: &InpaintSpec, rng: &mut R) {
    let shape = dims(&out.data);
    for _ in 0..spec.num_regions {
        let b = random_box(rng, shape, spec.region_size_range);
        let sl = s![b.lo[0]..b.hi[0], b.lo[1]..b.hi[1], b.lo[2]..b.hi[2]];
        for v in out.data.slice_mut(sl).iter_mut() {
            *v = match spec.fill {
                Fill::UniformNoise => rng.random_range(0.0f32..=1.0),
                Fill::Constant => spec.fill_value,
            };
        }
        out.touched.slice_mut(sl).fill(true);
        out.boxes.push(b);
    }
}

/// Permutes the voxels inside `num_blocks` random boxes. Applied
/// unconditionally; `probability` only matters in [`compose`].
pub fn local_pixel_shuffle<R: Rng + ?Sized>(
    patch: &Array3<f32>,
    spec: &ShuffleSpec,
    rng: &mut R,
) -> Result<AugmentedPatch> {
    check_range("shuffle.block_size_range", spec.block_size_range, dims(patch))?;
    let mut out = AugmentedPatch::identity(patch);
    shuffle_into(&mut out, spec, rng);
    Ok(out)
}

/// Overwrites `num_regions` random boxes with the configured fill. Applied
/// unconditionally; `probability` only matters in [`compose`].
pub fn local_inpaint<R: Rng + ?Sized>(
    patch: &Array3<f32>,
    spec: &InpaintSpec,
    rng: &mut R,
) -> Result<AugmentedPatch> {
    check_range("inpaint.region_size_range", spec.region_size_range, dims(patch))?;
    let mut out = AugmentedPatch::identity(patch);
    inpaint_into(&mut out, spec, rng);
    Ok(out)
}

/// Monotone piecewise-cubic map through sorted control points
/// (Fritsch-Carlson Hermite interpolation).
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneMap {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneMap {
    /// `xs` strictly increasing, `ys` non-decreasing, equal lengths >= 2.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(Error::invalid("need >= 2 control points of equal length"));
        }
        if xs.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) || ys.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("control points must be increasing"));
        }
        let k = xs.len();
        let secant: Vec<f64> = (0..k - 1)
            .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
            .collect();
        let mut m = vec![0.0; k];
        m[0] = secant[0];
        m[k - 1] = secant[k - 2];
        for i in 1..k - 1 {
            m[i] = if secant[i - 1] * secant[i] <= 0.0 {
                0.0
            } else {
                (secant[i - 1] + secant[i]) / 2.0
            };
        }
        for i in 0..k - 1 {
            if secant[i] == 0.0 {
                m[i] = 0.0;
                m[i + 1] = 0.0;
                continue;
            }
            let a = m[i] / secant[i];
            let b = m[i + 1] / secant[i];
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                m[i] = t * a * secant[i];
                m[i + 1] = t * b * secant[i];
            }
        }
        Ok(MonotoneMap { xs, ys, slopes: m })
    }

    /// Random curve on `[0, 1]` with `interior` control points.
    pub fn random<R: Rng + ?Sized>(interior: usize, rng: &mut R) -> Self {
        let mut xs: Vec<f64> = (0..interior).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut ys: Vec<f64> = (0..interior).map(|_| rng.random_range(0.0..1.0)).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let mut px = vec![0.0];
        let mut py = vec![0.0];
        for (x, y) in xs.into_iter().zip(ys) {
            if x > *px.last().unwrap() + 1e-6 && x < 1.0 - 1e-6 {
                px.push(x);
                py.push(y);
            }
        }
        px.push(1.0);
        py.push(1.0);
        MonotoneMap::new(px, py).expect("sorted control points")
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.xs.len();
        let x = x.clamp(self.xs[0], self.xs[k - 1]);
        let i = match self.xs.partition_point(|&v| v <= x) {
            0 => 0,
            p => (p - 1).min(k - 2),
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let y = h00 * self.ys[i]
            + h10 * h * self.slopes[i]
            + h01 * self.ys[i + 1]
            + h11 * h * self.slopes[i + 1];
        y.clamp(self.ys[i], self.ys[i + 1])
    }

    pub fn apply(&self, v: f32) -> f32 {
        self.eval(v.clamp(0.0, 1.0) as f64).clamp(0.0, 1.0) as f32
    }
}

/// Applies a random monotone intensity curve voxelwise. Global, so no voxel
/// is marked as touched.
pub fn nonlinear_intensity<R: Rng + ?Sized>(
    patch: &Array3<f32>,
    spec: &IntensitySpec,
    rng: &mut R,
) -> AugmentedPatch {
    let map = MonotoneMap::random(spec.num_control_points, rng);
    apply_map(patch, map)
}

pub fn apply_map(patch: &Array3<f32>, map: MonotoneMap) -> AugmentedPatch {
    let mut out = AugmentedPatch::identity(patch);
    out.data.mapv_inplace(|v| map.apply(v));
    out.intensity = Some(map);
    out
}

/// Intensity curve, then shuffling, then in-painting, each with its own
/// probability. A Bernoulli draw is made for every stage so the stream
/// consumption does not depend on earlier outcomes.
pub fn compose<R: Rng + ?Sized>(
    patch: &Array3<f32>,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<AugmentedPatch> {
    spec.validate(dims(patch))?;
    let do_int = rng.random_bool(spec.intensity.probability);
    let do_shuf = rng.random_bool(spec.shuffle.probability);
    let do_inp = rng.random_bool(spec.inpaint.probability);
    let mut out = if do_int {
        nonlinear_intensity(patch, &spec.intensity, rng)
    } else {
        AugmentedPatch::identity(patch)
    };
    if do_shuf {
        shuffle_into(&mut out, &spec.shuffle, rng);
    }
    if do_inp {
        inpaint_into(&mut out, &spec.inpaint, rng);
    }
    Ok(out)
}
