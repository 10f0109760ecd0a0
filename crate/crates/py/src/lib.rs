//! Python bindings. Volumes and patches cross the boundary as nested lists
//! indexed `[z][y][x]`; embeddings as lists of rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelpair::augment::{compose, AugmentationSpec};
use voxelpair::backbone;
use voxelpair::checkpoint;
use voxelpair::config::RunConfig;
use voxelpair::downstream::{self, FinetuneSchedule};
use voxelpair::nn::Tensor;
use voxelpair::objectives;
use voxelpair::patchpair;
use voxelpair::trainer;
use voxelpair::volio::{self, Modality};
use voxelpair::Error;

type Grid<T> = Vec<Vec<Vec<T>>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid_to_array<T: Copy>(g: Grid<T>) -> PyResult<Array3<T>> {
    let d = g.len();
    let h = g.first().map_or(0, Vec::len);
    let w = g.first().and_then(|p| p.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(d * h * w);
    for plane in g {
        if plane.len() != h {
            return Err(PyValueError::new_err("ragged nested list"));
        }
        for row in plane {
            if row.len() != w {
                return Err(PyValueError::new_err("ragged nested list"));
            }
            flat.extend(row);
        }
    }
    Array3::from_shape_vec((d, h, w), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array_to_grid<T: Copy>(a: &Array3<T>) -> Grid<T> {
    a.outer_iter()
        .map(|p| p.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let e = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != e) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Array2::from_shape_vec((n, e), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn tensor_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let e = t.shape()[1];
    t.data().chunks(e).map(<[f32]>::to_vec).collect()
}

/// A 3D intensity image with voxel spacing in millimetres.
#[pyclass(name = "Volume", module = "voxelpair_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: volio::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, spacing = (1.0, 1.0, 1.0)))]
    fn new(data: Grid<f32>, spacing: (f32, f32, f32)) -> PyResult<Self> {
        let arr = grid_to_array(data)?;
        let inner = volio::Volume::new(arr, [spacing.0, spacing.1, spacing.2], Modality::Synthetic)
            .map_err(to_py)?;
        Ok(PyVolume { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.shape();
        (d, h, w)
    }

    #[getter]
    fn spacing(&self) -> (f32, f32, f32) {
        let s = self.inner.spacing;
        (s[0], s[1], s[2])
    }

    fn tolist(&self) -> Grid<f32> {
        array_to_grid(&self.inner.data)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volio::save_volume(path, &self.inner).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVolume {
            inner: volio::load_volume(path).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?}, spacing={:?})", self.inner.shape(), self.inner.spacing)
    }
}

/// Feature-pyramid architecture hyper-parameters.
#[pyclass(name = "PyramidConfig", module = "voxelpair_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPyramidConfig {
    inner: backbone::PyramidConfig,
}

#[pymethods]
impl PyPyramidConfig {
    #[new]
    #[pyo3(signature = (num_scales = 4, base_channels = 16, proj_channels = 16, embed_dim = 64, balanced = true))]
    fn new(
        num_scales: usize,
        base_channels: usize,
        proj_channels: usize,
        embed_dim: usize,
        balanced: bool,
    ) -> PyResult<Self> {
        let inner = backbone::PyramidConfig {
            num_scales,
            base_channels,
            proj_channels,
            embed_dim,
            balanced,
        };
        inner.validate().map_err(to_py)?;
        Ok(PyPyramidConfig { inner })
    }

    #[getter]
    fn num_scales(&self) -> usize {
        self.inner.num_scales
    }

    #[getter]
    fn proj_channels(&self) -> usize {
        self.inner.proj_channels
    }

    #[getter]
    fn balanced(&self) -> bool {
        self.inner.balanced
    }

    /// Width each level contributes to the voxel representation.
    fn level_widths(&self) -> Vec<usize> {
        self.inner.level_widths()
    }

    fn representation_len(&self) -> usize {
        self.inner.representation_len()
    }
}

/// Backbone with projection and reconstruction heads.
#[pyclass(name = "Model", module = "voxelpair_py")]
pub struct PyModel {
    inner: backbone::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyPyramidConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: backbone::Model::new(config.inner.clone(), seed).map_err(to_py)?,
        })
    }

    /// Loads the backbone stored in a pretraining checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ckpt = checkpoint::load(&path).map_err(to_py)?;
        let arch = RunConfig::from_toml_str(&ckpt.config_toml, &[])
            .map_err(to_py)?
            .model_config();
        Ok(PyModel {
            inner: trainer::model_from_checkpoint(&ckpt, &arch).map_err(to_py)?,
        })
    }

    #[getter]
    fn config(&self) -> PyPyramidConfig {
        PyPyramidConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Returns `(j, h, z)` for the voxels at `coords` of `patch`: the
    /// concatenated representation, the head output and its normalised form.
    #[allow(clippy::type_complexity)]
    fn embed(
        &self,
        patch: Grid<f32>,
        coords: Vec<(usize, usize, usize)>,
    ) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let patch = grid_to_array(patch)?;
        let coords: Vec<[usize; 3]> = coords.into_iter().map(|(z, y, x)| [z, y, x]).collect();
        let (j, h, z) = self.inner.embed(&patch, &coords).map_err(to_py)?;
        Ok((tensor_rows(&j), tensor_rows(&h), tensor_rows(&z)))
    }

    fn reconstruct(&self, patch: Grid<f32>) -> PyResult<Grid<f32>> {
        let patch = grid_to_array(patch)?;
        Ok(array_to_grid(&self.inner.reconstruct(&patch).map_err(to_py)?))
    }
}

/// Generates a labelled synthetic volume. Returns `(volume, labels)`.
#[pyfunction]
fn generate_synthetic_volume(
    seed: u64,
    shape: (usize, usize, usize),
    num_classes: usize,
) -> PyResult<(PyVolume, Grid<u8>)> {
    let lv = volio::generate_synthetic_volume(seed, [shape.0, shape.1, shape.2], num_classes)
        .map_err(to_py)?;
    Ok((PyVolume { inner: lv.volume }, array_to_grid(&lv.labels)))
}

#[pyfunction]
fn load_labels(path: PathBuf) -> PyResult<Grid<u8>> {
    let (labels, _) = volio::load_labels(path).map_err(to_py)?;
    Ok(array_to_grid(&labels))
}

/// Symmetrised InfoNCE summed over anchors for unit-norm rows.
#[pyfunction]
#[pyo3(signature = (z_a, z_b, tau = 0.1))]
fn info_nce(z_a: Vec<Vec<f64>>, z_b: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let (a, b) = (rows_to_array(z_a)?, rows_to_array(z_b)?);
    objectives::info_nce(a.view(), b.view(), tau).map_err(to_py)
}

#[pyfunction]
fn mse_recon(x_a: Grid<f32>, xhat_a: Grid<f32>, x_b: Grid<f32>, xhat_b: Grid<f32>) -> PyResult<f64> {
    let [xa, ha, xb, hb] = [x_a, xhat_a, x_b, xhat_b].map(grid_to_array);
    objectives::mse_recon(xa?.view(), ha?.view(), xb?.view(), hb?.view()).map_err(to_py)
}

/// Samples two overlapping crops and `n` corresponding voxels. Returns a
/// dict with the crop origins and the voxel coordinates in each crop frame.
#[pyfunction]
#[pyo3(signature = (volume, patch_size, n, seed, min_overlap_fraction = 0.25))]
fn sample_patch_pair(
    py: Python<'_>,
    volume: &PyVolume,
    patch_size: (usize, usize, usize),
    n: usize,
    seed: u64,
    min_overlap_fraction: f64,
) -> PyResult<Py<PyAny>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = [patch_size.0, patch_size.1, patch_size.2];
    let pair = patchpair::sample_patch_pair(&volume.inner.data, size, min_overlap_fraction, &mut rng)
        .map_err(to_py)?;
    let batch = patchpair::sample_positive_pairs(&pair, n, &mut rng).map_err(to_py)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("origin_a", pair.origin_a.to_vec())?;
    out.set_item("origin_b", pair.origin_b.to_vec())?;
    out.set_item("coords_a", batch.coords_a.iter().map(|c| c.to_vec()).collect::<Vec<_>>())?;
    out.set_item("coords_b", batch.coords_b.iter().map(|c| c.to_vec()).collect::<Vec<_>>())?;
    out.set_item("patch_a", array_to_grid(&pair.patch_a))?;
    out.set_item("patch_b", array_to_grid(&pair.patch_b))?;
    Ok(out.into_any().unbind())
}

/// Applies the default augmentation chain. Returns `(data, touched)`.
#[pyfunction]
#[pyo3(signature = (patch, seed, intensity = true))]
fn augment(patch: Grid<f32>, seed: u64, intensity: bool) -> PyResult<(Grid<f32>, Grid<bool>)> {
    let patch = grid_to_array(patch)?;
    let mut spec = AugmentationSpec::default();
    if !intensity {
        spec.intensity.probability = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = compose(&patch, &spec, &mut rng).map_err(to_py)?;
    Ok((array_to_grid(&out.data), array_to_grid(&out.touched)))
}

/// Dice of a label map against ground truth. Returns `(overall, per_class)`.
#[pyfunction]
fn dice_score(
    pred: Grid<u8>,
    truth: Grid<u8>,
    num_classes: usize,
) -> PyResult<(f64, BTreeMap<String, f64>)> {
    let r = downstream::dice_score(&grid_to_array(pred)?, &grid_to_array(truth)?, num_classes)
        .map_err(to_py)?;
    Ok((r.overall, r.per_class))
}

/// Backbone learning rate of the default fine-tuning schedule at `step`.
#[pyfunction]
fn backbone_lr(step: u64) -> f64 {
    FinetuneSchedule::default().backbone_lr(step)
}

/// Runs pretraining from a TOML config with `key=value` overrides and
/// returns the total loss of every step run.
#[pyfunction]
#[pyo3(signature = (config, overrides = Vec::new(), resume = false))]
fn pretrain(py: Python<'_>, config: PathBuf, overrides: Vec<String>, resume: bool) -> PyResult<Vec<f64>> {
    py.detach(|| {
        let cfg = RunConfig::from_file(&config, &overrides)?;
        let volumes = volio::load_images(&cfg.paths.data)?;
        let out = trainer::run_pretraining(&cfg, &volumes, &cfg.paths.out, resume)?;
        Ok(out.records.iter().map(|r| r.loss.l_total).collect())
    })
    .map_err(to_py)
}

#[pymodule]
fn voxelpair_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyPyramidConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic_volume, m)?)?;
    m.add_function(wrap_pyfunction!(load_labels, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(mse_recon, m)?)?;
    m.add_function(wrap_pyfunction!(sample_patch_pair, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(backbone_lr, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    Ok(())
}
