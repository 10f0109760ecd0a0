//! Volumes, the `.vvol` container, preprocessing pipelines and the synthetic
//! data generator.
//!
//! Arrays are indexed `(z, y, x)` with `z` slowest; spacings follow the same
//! axis order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{linear_taps, nearest_taps, resample_axis};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Mri,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Millimetres per voxel along `(z, y, x)`.
    pub spacing: [f32; 3],
    pub modality: Modality,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3], modality: Modality) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::invalid("volume dimensions must be >= 1"));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume {
            data,
            spacing,
            modality,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub labels: Array3<u8>,
    pub num_classes: usize,
}

impl LabeledVolume {
    pub fn new(volume: Volume, labels: Array3<u8>, num_classes: usize) -> Result<Self> {
        if labels.shape() != volume.data.shape() {
            return Err(Error::shape(format!(
                "labels {:?} vs volume {:?}",
                labels.shape(),
                volume.data.shape()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::invalid("num_classes must be in 1..=256"));
        }
        if let Some(&m) = labels.iter().max() {
            if m as usize >= num_classes {
                return Err(Error::invalid(format!(
                    "label {m} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(LabeledVolume {
            volume,
            labels,
            num_classes,
        })
    }
}

pub const MRI_SPACING: [f32; 3] = [1.5, 1.5, 1.5];
/// 1 x 1 mm in-plane, 2 mm between slices, in `(z, y, x)` order.
pub const CT_SPACING: [f32; 3] = [2.0, 1.0, 1.0];
pub const MRI_PERCENTILES: (f64, f64) = (0.01, 99.9);
pub const MRI_CROP_THRESHOLD: f32 = 0.3;
pub const CT_CROP_THRESHOLD_HU: f32 = -500.0;
pub const CT_WINDOW_HU: (f32, f32) = (-1350.0, 1000.0);

fn resampled_len(n: usize, from: f32, to: f32) -> usize {
    ((n as f64 * from as f64 / to as f64).round() as usize).max(1)
}

fn dims(a: &Array3<impl Clone>) -> [usize; 3] {
    let s = a.shape();
    [s[0], s[1], s[2]]
}

/// Trilinear resampling from `spacing` to `target` spacing.
pub fn resample(data: &Array3<f32>, spacing: [f32; 3], target: [f32; 3]) -> Array3<f32> {
    let mut shape = dims(data);
    let mut flat: Vec<f32> = data.iter().copied().collect();
    for a in 0..3 {
        let n = resampled_len(shape[a], spacing[a], target[a]);
        if n == shape[a] && spacing[a] == target[a] {
            continue;
        }
        let taps = linear_taps(shape[a], n, target[a] as f64 / spacing[a] as f64);
        flat = resample_axis(&flat, &shape, a, &taps);
        shape[a] = n;
    }
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), flat).expect("resampled shape")
}

/// Nearest-neighbour resampling for label maps.
pub fn resample_labels(labels: &Array3<u8>, spacing: [f32; 3], target: [f32; 3]) -> Array3<u8> {
    let src = dims(labels);
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let n = resampled_len(src[a], spacing[a], target[a]);
            nearest_taps(src[a], n, target[a] as f64 / spacing[a] as f64)
        })
        .collect();
    Array3::from_shape_fn((idx[0].len(), idx[1].len(), idx[2].len()), |(z, y, x)| {
        labels[[idx[0][z], idx[1][y], idx[2][x]]]
    })
}

/// Percentile `p` in `[0, 100]` with linear interpolation between order
/// statistics.
pub fn percentile(values: &[f32], p: f64) -> f32 {
    assert!(!values.is_empty());
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let w = pos - lo as f64;
    (v[lo] as f64 * (1.0 - w) + v[hi] as f64 * w) as f32
}

/// Half-open bounding box `[lo, hi)` of voxels strictly above `threshold`.
pub fn bounding_box(data: &Array3<f32>, threshold: f32) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in data.indexed_iter() {
        if v > threshold {
            any = true;
            for (a, c) in [z, y, x].into_iter().enumerate() {
                lo[a] = lo[a].min(c);
                hi[a] = hi[a].max(c + 1);
            }
        }
    }
    any.then_some((lo, hi))
}

fn crop_to<T: Clone>(data: &Array3<T>, lo: [usize; 3], hi: [usize; 3]) -> Array3<T> {
    data.slice(s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]).to_owned()
}

fn ensure_finite(v: &Volume) -> Result<()> {
    if let Some(bad) = v.data.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("input intensity {bad}")));
    }
    Ok(())
}

fn expect_modality(v: &Volume, m: Modality) -> Result<()> {
    if v.modality != m {
        return Err(Error::invalid(format!(
            "expected {m:?} volume, got {:?}",
            v.modality
        )));
    }
    Ok(())
}

/// Clips to `[lo, hi]` and maps affinely onto `[0, 1]`.
fn window(data: &mut Array3<f32>, lo: f32, hi: f32) -> Result<()> {
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::DegenerateRange(format!("window [{lo}, {hi}]")));
    }
    let (l, span) = (lo as f64, hi as f64 - lo as f64);
    data.mapv_inplace(|v| ((v.clamp(lo, hi) as f64 - l) / span).clamp(0.0, 1.0) as f32);
    Ok(())
}

/// MRI recipe: resample to 1.5 mm isotropic, clip to the 0.01 / 99.9
/// percentiles and rescale to `[0, 1]`, then crop to voxels above 0.3.
pub fn preprocess_mri(raw: &Volume) -> Result<Volume> {
    expect_modality(raw, Modality::Mri)?;
    ensure_finite(raw)?;
    let mut data = resample(&raw.data, raw.spacing, MRI_SPACING);
    let flat = data.as_slice().expect("standard layout");
    let lo = percentile(flat, MRI_PERCENTILES.0);
    let hi = percentile(flat, MRI_PERCENTILES.1);
    window(&mut data, lo, hi)?;
    let (blo, bhi) =
        bounding_box(&data, MRI_CROP_THRESHOLD).ok_or(Error::EmptyCrop(MRI_CROP_THRESHOLD))?;
    Volume::new(crop_to(&data, blo, bhi), MRI_SPACING, Modality::Mri)
}

/// CT recipe: resample to 1 x 1 x 2 mm, crop to voxels above -500 HU, clip
/// to [-1350, 1000] HU and rescale to `[0, 1]`.
pub fn preprocess_ct(raw: &Volume) -> Result<Volume> {
    expect_modality(raw, Modality::Ct)?;
    ensure_finite(raw)?;
    let data = resample(&raw.data, raw.spacing, CT_SPACING);
    let (blo, bhi) =
        bounding_box(&data, CT_CROP_THRESHOLD_HU).ok_or(Error::EmptyCrop(CT_CROP_THRESHOLD_HU))?;
    let mut data = crop_to(&data, blo, bhi);
    window(&mut data, CT_WINDOW_HU.0, CT_WINDOW_HU.1)?;
    Volume::new(data, CT_SPACING, Modality::Ct)
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

pub const MIN_SYNTHETIC_DIM: usize = 32;
const FRACTION_BOUNDS: (f64, f64) = (0.005, 0.60);

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn random<R: Rng>(rng: &mut R, shape: [usize; 3], voxels: f64) -> Self {
        let aspect: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.4));
        let base = (3.0 * voxels / (4.0 * std::f64::consts::PI * aspect.iter().product::<f64>()))
            .cbrt();
        let radii = std::array::from_fn(|a| (base * aspect[a]).max(1.5));
        let center = std::array::from_fn(|a| {
            let n = shape[a] as f64;
            rng.random_range(0.25 * n..0.75 * n)
        });
        Ellipsoid { center, radii }
    }

    fn bounds(&self, shape: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let lo = std::array::from_fn(|a| (self.center[a] - self.radii[a]).floor().max(0.0) as usize);
        let hi = std::array::from_fn(|a| {
            ((self.center[a] + self.radii[a]).ceil() as usize + 1).min(shape[a])
        });
        (lo, hi)
    }
}

fn paint_labels<R: Rng>(rng: &mut R, shape: [usize; 3], num_classes: usize) -> Array3<u8> {
    let mut labels = Array3::<u8>::zeros((shape[0], shape[1], shape[2]));
    let total = (shape[0] * shape[1] * shape[2]) as f64;
    let organs = num_classes - 1;
    for k in 1..=organs {
        let frac = 0.70 / organs as f64 * rng.random_range(0.8..1.2);
        // main body plus a smaller lobe
        let main = Ellipsoid::random(rng, shape, 0.75 * frac * total);
        let mut lobe = Ellipsoid::random(rng, shape, 0.25 * frac * total);
        #[allow(clippy::needless_range_loop)]
        for a in 0..3 {
            let shift = rng.random_range(-0.8..0.8) * main.radii[a];
            lobe.center[a] = (main.center[a] + shift).clamp(0.0, shape[a] as f64 - 1.0);
        }
        for e in [&main, &lobe] {
            let (lo, hi) = e.bounds(shape);
            for z in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for x in lo[2]..hi[2] {
                        if e.contains([z as f64, y as f64, x as f64]) {
                            labels[[z, y, x]] = k as u8;
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Fraction of voxels carrying each class id.
pub fn class_fractions(labels: &Array3<u8>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels.iter() {
        counts[l as usize] += 1;
    }
    let n = labels.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Deterministic labelled volume of ellipsoid-union "organs" with
/// class-specific intensity and texture, Gaussian noise and a smooth
/// multiplicative bias field. Intensities lie in `[0, 1]`.
pub fn generate_synthetic_volume(
    seed: u64,
    shape: [usize; 3],
    num_classes: usize,
) -> Result<LabeledVolume> {
    if shape.iter().any(|&d| d < MIN_SYNTHETIC_DIM) {
        return Err(Error::invalid(format!(
            "synthetic volume dims must be >= {MIN_SYNTHETIC_DIM}, got {shape:?}"
        )));
    }
    let max_classes = 1 + shape.iter().min().unwrap() / 4;
    if num_classes < 2 || num_classes > max_classes.min(256) {
        return Err(Error::invalid(format!(
            "shape {shape:?} supports 2..={max_classes} classes, requested {num_classes}"
        )));
    }
    let mut rng = rng::stream(seed, &[0x5e9_d47a]);
    let mut labels = None;
    for _ in 0..256 {
        let cand = paint_labels(&mut rng, shape, num_classes);
        let fr = class_fractions(&cand, num_classes);
        if fr
            .iter()
            .all(|&f| f > FRACTION_BOUNDS.0 && f < FRACTION_BOUNDS.1)
        {
            labels = Some(cand);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::invalid(format!(
            "could not place {num_classes} classes in {shape:?} within fraction bounds"
        ))
    })?;

    let organs = num_classes - 1;
    let means: Vec<f64> = (0..num_classes)
        .map(|k| {
            let base = if k == 0 {
                0.12
            } else if organs == 1 {
                0.6
            } else {
                0.3 + 0.6 * (k - 1) as f64 / (organs - 1) as f64
            };
            base + rng.random_range(-0.03..0.03)
        })
        .collect();
    // per-class texture: amplitude and spatial frequency of an internal pattern
    let texture: Vec<(f64, [f64; 3], f64)> = (0..num_classes)
        .map(|k| {
            let amp = if k == 0 { 0.0 } else { rng.random_range(0.02..0.06) };
            let freq = std::array::from_fn(|_| rng.random_range(0.3..1.2));
            (amp, freq, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let bias_freq: [f64; 3] = std::array::from_fn(|a| {
        rng.random_range(0.5..1.5) * std::f64::consts::PI / shape[a] as f64
    });
    let bias_phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, 0.035).expect("valid normal");

    let mut data = Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
    for ((z, y, x), v) in data.indexed_iter_mut() {
        let k = labels[[z, y, x]] as usize;
        let p = [z as f64, y as f64, x as f64];
        let (amp, freq, phase) = texture[k];
        let tex = amp * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).sin();
        let bias = 1.0
            + 0.08
                * (0..3)
                    .map(|a| (bias_freq[a] * p[a] + bias_phase[a]).sin())
                    .product::<f64>();
        let value = (means[k] + tex) * bias + noise.sample(&mut rng);
        *v = value.clamp(0.0, 1.0) as f32;
    }
    let volume = Volume::new(data, [1.0; 3], Modality::Synthetic)?;
    LabeledVolume::new(volume, labels, num_classes)
}

// ---------------------------------------------------------------------------
// .vvol container
// ---------------------------------------------------------------------------

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 12 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

fn header(dtype: DType, shape: [usize; 3], spacing: [f32; 3]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(VVOL_MAGIC);
    buf.extend_from_slice(&VVOL_VERSION.to_le_bytes());
    buf.push(dtype as u8);
    for d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

struct Parsed<'a> {
    shape: [usize; 3],
    spacing: [f32; 3],
    payload: &'a [u8],
}

fn parse<'a>(path: &Path, bytes: &'a [u8], want: DType) -> Result<Parsed<'a>> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != VVOL_MAGIC {
        return Err(fmt("bad magic, expected VVOL".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VVOL_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let dtype = bytes[8];
    if dtype != want as u8 {
        return Err(fmt(format!("dtype {dtype}, expected {}", want as u8)));
    }
    let shape = [u32_at(9) as usize, u32_at(13) as usize, u32_at(17) as usize];
    let spacing = [21, 25, 29].map(|o| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
    if shape.contains(&0) {
        return Err(fmt(format!("zero dimension in {shape:?}")));
    }
    if spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(fmt(format!("non-positive spacing {spacing:?}")));
    }
    let expected = HEADER_LEN + shape.iter().product::<usize>() * want.size();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(fmt(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    Ok(Parsed {
        shape,
        spacing,
        payload: &bytes[HEADER_LEN..],
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let mut buf = header(DType::F32, v.shape(), v.spacing);
    buf.reserve(v.data.len() * 4);
    for x in v.data.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path.as_ref(), &buf)
}

/// Loads an intensity volume. The container does not record modality; the
/// result is tagged [`Modality::Synthetic`], use [`Volume::with_modality`]
/// to retag.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let p = parse(path, &bytes, DType::F32)?;
    let data: Vec<f32> = p
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let arr = Array3::from_shape_vec((p.shape[0], p.shape[1], p.shape[2]), data)
        .expect("payload length checked");
    Volume::new(arr, p.spacing, Modality::Synthetic)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &Array3<u8>, spacing: [f32; 3]) -> Result<()> {
    let mut buf = header(DType::U8, dims(labels), spacing);
    buf.extend(labels.iter().copied());
    write_file(path.as_ref(), &buf)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(Array3<u8>, [f32; 3])> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let p = parse(path, &bytes, DType::U8)?;
    let arr = Array3::from_shape_vec((p.shape[0], p.shape[1], p.shape[2]), p.payload.to_vec())
        .expect("payload length checked");
    Ok((arr, p.spacing))
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Paths relative to the manifest directory.
    pub image: String,
    pub labels: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub volumes: Vec<ManifestEntry>,
}

/// Generates `count` labelled volumes into `dir` with a manifest. Volume `i`
/// uses a seed derived from `(seed, i)`.
pub fn write_synthetic_dataset(
    dir: &Path,
    count: usize,
    shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<Manifest> {
    use rayon::prelude::*;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<ManifestEntry> = (0..count)
        .into_par_iter()
        .map(|i| {
            let lv = generate_synthetic_volume(rng::derive_seed(seed, &[i as u64]), shape, num_classes)?;
            let image = format!("vol_{i:04}.vvol");
            let labels = format!("vol_{i:04}_labels.vvol");
            save_volume(dir.join(&image), &lv.volume)?;
            save_labels(dir.join(&labels), &lv.labels, lv.volume.spacing)?;
            Ok(ManifestEntry {
                image,
                labels: Some(labels),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        num_classes,
        volumes: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.volumes.is_empty() {
        return Err(Error::Format {
            path,
            reason: "manifest lists no volumes".into(),
        });
    }
    Ok(m)
}

/// Intensity volumes listed in the manifest of `dir`.
pub fn load_images(dir: &Path) -> Result<Vec<Volume>> {
    read_manifest(dir)?
        .volumes
        .iter()
        .map(|e| load_volume(dir.join(&e.image)))
        .collect()
}

/// Labelled volumes listed in the manifest of `dir`; every entry must have
/// a label map.
pub fn load_labeled(dir: &Path) -> Result<Vec<LabeledVolume>> {
    let m = read_manifest(dir)?;
    m.volumes
        .iter()
        .map(|e| {
            let labels = e.labels.as_ref().ok_or_else(|| Error::Format {
                path: dir.join(MANIFEST_FILE),
                reason: format!("{} has no label map", e.image),
            })?;
            let v = load_volume(dir.join(&e.image))?;
            let (l, _) = load_labels(dir.join(labels))?;
            LabeledVolume::new(v, l, m.num_classes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_bbox(data: &Array3<f32>, t: f32) -> Option<([usize; 3], [usize; 3])> {
        let pts: Vec<[usize; 3]> = data
            .indexed_iter()
            .filter(|(_, &v)| v > t)
            .map(|((z, y, x), _)| [z, y, x])
            .collect();
        if pts.is_empty() {
            return None;
        }
        let lo = std::array::from_fn(|a| pts.iter().map(|p| p[a]).min().unwrap());
        let hi = std::array::from_fn(|a| pts.iter().map(|p| p[a]).max().unwrap() + 1);
        Some((lo, hi))
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [3.0f32, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(percentile(&v, 50.0), 2.5);
    }

    #[test]
    fn ramp_crop_keeps_exactly_voxels_above_threshold() {
        let n = 8;
        let data = Array3::from_shape_fn((n, n, n), |(z, y, x)| ((z + y + x) as f32) / (3 * (n - 1)) as f32);
        let raw = Volume::new(data, MRI_SPACING, Modality::Mri).unwrap();
        let out = preprocess_mri(&raw).unwrap();
        // after percentile windowing the scaled ramp is recomputed for the oracle
        let resampled = resample(&raw.data, raw.spacing, MRI_SPACING);
        let mut scaled = resampled.clone();
        let flat = resampled.as_slice().unwrap();
        window(&mut scaled, percentile(flat, 0.01), percentile(flat, 99.9)).unwrap();
        let (lo, hi) = brute_bbox(&scaled, 0.3).unwrap();
        assert_eq!(out.shape(), [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]);
        assert_eq!(out.data, crop_to(&scaled, lo, hi));
        // every voxel above threshold survived the crop
        let above_in = scaled.iter().filter(|&&v| v > 0.3).count();
        let above_out = out.data.iter().filter(|&&v| v > 0.3).count();
        assert_eq!(above_in, above_out);
    }

    #[test]
    fn uniform_mri_spans_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array3::from_shape_fn((12, 12, 12), |_| rng.random_range(0.0f32..1.0));
        let raw = Volume::new(data, MRI_SPACING, Modality::Mri).unwrap();
        let out = preprocess_mri(&raw).unwrap();
        let min = out.data.iter().copied().fold(f32::INFINITY, f32::min);
        let max = out.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn constant_mri_is_degenerate() {
        let raw = Volume::new(Array3::from_elem((4, 4, 4), 7.0), MRI_SPACING, Modality::Mri).unwrap();
        assert!(matches!(preprocess_mri(&raw), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn non_finite_and_wrong_modality_rejected() {
        let mut data = Array3::from_elem((4, 4, 4), 1.0f32);
        data[[1, 1, 1]] = f32::NAN;
        let raw = Volume::new(data, MRI_SPACING, Modality::Mri).unwrap();
        assert!(matches!(preprocess_mri(&raw), Err(Error::NonFinite(_))));
        let ct = raw.clone().with_modality(Modality::Ct);
        assert!(preprocess_mri(&ct).is_err());
    }

    #[test]
    fn ct_air_only_is_empty_crop() {
        let raw = Volume::new(Array3::from_elem((4, 4, 4), -1000.0), CT_SPACING, Modality::Ct).unwrap();
        assert!(matches!(preprocess_ct(&raw), Err(Error::EmptyCrop(_))));
    }

    #[test]
    fn ct_window_endpoints_and_midpoint() {
        let mut data = Array3::from_elem((2, 2, 2), 0.0f32);
        data[[0, 0, 0]] = -1350.0;
        data[[0, 0, 1]] = 1000.0;
        data[[0, 1, 0]] = -175.0;
        data[[1, 1, 1]] = 3000.0;
        data[[1, 0, 0]] = -2000.0;
        let raw = Volume::new(data, CT_SPACING, Modality::Ct).unwrap();
        let out = preprocess_ct(&raw).unwrap();
        assert_eq!(out.shape(), [2, 2, 2]);
        assert_eq!(out.data[[0, 0, 0]], 0.0);
        assert_eq!(out.data[[0, 0, 1]], 1.0);
        assert_eq!(out.data[[0, 1, 0]], 0.5);
        assert_eq!(out.data[[1, 1, 1]], 1.0);
        assert_eq!(out.data[[1, 0, 0]], 0.0);
    }

    #[test]
    fn ct_matches_elementwise_oracle_on_random_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Array3::from_shape_fn((16, 16, 16), |_| rng.random_range(-2000.0f32..2500.0));
        let raw = Volume::new(data.clone(), CT_SPACING, Modality::Ct).unwrap();
        let out = preprocess_ct(&raw).unwrap();
        let (lo, hi) = brute_bbox(&data, -500.0).unwrap();
        let cropped = crop_to(&data, lo, hi);
        assert_eq!(out.shape(), dims(&cropped));
        for (o, &r) in out.data.iter().zip(cropped.iter()) {
            let expect = ((r.clamp(-1350.0, 1000.0) as f64 + 1350.0) / 2350.0) as f32;
            assert_eq!(*o, expect);
        }
    }

    #[test]
    fn resampling_changes_grid_by_spacing_ratio() {
        let data = Array3::from_shape_fn((4, 6, 6), |(z, _, _)| z as f32);
        let out = resample(&data, [3.0, 1.0, 1.0], MRI_SPACING);
        assert_eq!(dims(&out), [8, 4, 4]);
        // linear ramp stays monotone along z
        for z in 1..8 {
            assert!(out[[z, 0, 0]] >= out[[z - 1, 0, 0]]);
        }
        let labels = Array3::from_shape_fn((4, 6, 6), |(z, _, _)| z as u8);
        let lab = resample_labels(&labels, [3.0, 1.0, 1.0], MRI_SPACING);
        assert_eq!(dims(&lab), [8, 4, 4]);
        assert!(lab.iter().all(|&l| l < 4));
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_sensitive() {
        let a = generate_synthetic_volume(5, [32, 32, 32], 4).unwrap();
        let b = generate_synthetic_volume(5, [32, 32, 32], 4).unwrap();
        let c = generate_synthetic_volume(6, [32, 32, 32], 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.labels, c.labels);
        assert!(a.volume.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synthetic_class_fractions_within_bounds() {
        for seed in 0..6 {
            for k in [2, 3, 5] {
                let lv = generate_synthetic_volume(seed, [40, 36, 32], k).unwrap();
                for (c, f) in class_fractions(&lv.labels, k).into_iter().enumerate() {
                    assert!(f > 0.005 && f < 0.60, "seed {seed} k {k} class {c}: {f}");
                }
            }
        }
    }

    #[test]
    fn vvol_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Array3::from_shape_fn((3, 5, 4), |_| rng.random_range(-1e3f32..1e3));
        let v = Volume::new(data, [0.7, 1.25, 3.0], Modality::Synthetic).unwrap();
        let p = dir.path().join("v.vvol");
        save_volume(&p, &v).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.spacing, v.spacing);
        assert!(back.data.iter().zip(v.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bytes = std::fs::read(&p).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Truncated { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        std::fs::write(&p, &v2).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_labels(&p).is_err());

        let labels = Array3::from_shape_fn((3, 5, 4), |(z, y, x)| ((z + y + x) % 4) as u8);
        let lp = dir.path().join("l.vvol");
        save_labels(&lp, &labels, [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), (labels, [1.0, 2.0, 3.0]));
    }

    #[test]
    fn dataset_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic_dataset(dir.path(), 2, [32, 32, 32], 3, 4).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let lv = load_labeled(dir.path()).unwrap();
        assert_eq!(lv.len(), 2);
        let direct = generate_synthetic_volume(rng::derive_seed(4, &[1]), [32, 32, 32], 3).unwrap();
        assert_eq!(lv[1].labels, direct.labels);
        assert_eq!(lv[1].volume.data, direct.volume.data);
    }

    #[test]
    fn synthetic_rejects_small_shapes() {
        assert!(generate_synthetic_volume(0, [16, 32, 32], 3).is_err());
        assert!(generate_synthetic_volume(0, [32, 32, 32], 12).is_err());
        assert!(generate_synthetic_volume(0, [32, 32, 32], 1).is_err());
    }
}
