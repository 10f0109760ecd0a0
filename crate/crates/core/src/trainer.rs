//! Pretraining: batch assembly, hybrid loss, Adam updates, checkpoints and
//! metric logging.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{compose, AugmentationSpec, AugmentedPatch};
use crate::backbone::{patch_tensor, Model, PyramidConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{Objective, RunConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::objectives::LossReport;
use crate::patchpair::{sample_patch_pair, sample_positive_pairs, PatchPair, VoxelBatch};
use crate::rng;
use crate::volio::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub pairs_per_batch: usize,
    pub voxels_per_pair: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub checkpoint_every: u64,
    pub patch_size: [usize; 3],
    pub min_overlap_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            pairs_per_batch: 4,
            voxels_per_pair: 256,
            lr: 3e-4,
            optimizer: Optimizer::Adam,
            checkpoint_every: 500,
            patch_size: [32, 32, 32],
            min_overlap_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("trainer.steps", "must be >= 1"));
        }
        if self.pairs_per_batch == 0 {
            return Err(Error::config("trainer.pairs_per_batch", "must be >= 1"));
        }
        if self.voxels_per_pair < 2 {
            return Err(Error::config("trainer.voxels_per_pair", "must be >= 2"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config("trainer.lr", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("trainer.checkpoint_every", "must be >= 1"));
        }
        if !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction <= 1.0) {
            return Err(Error::config("trainer.min_overlap_fraction", "must lie in (0, 1]"));
        }
        let patch: usize = self.patch_size.iter().product();
        let min_overlap = (self.min_overlap_fraction * patch as f64).ceil() as usize;
        if min_overlap < self.voxels_per_pair {
            return Err(Error::config(
                "trainer.voxels_per_pair",
                format!("exceeds the guaranteed overlap of {min_overlap} voxels"),
            ));
        }
        Ok(())
    }
}

/// One training pair: the crops, their two augmented views and the sampled
/// corresponding voxels.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub pair: PatchPair,
    pub view_a: AugmentedPatch,
    pub view_b: AugmentedPatch,
    pub voxels: VoxelBatch,
}

/// Random streams are derived from `(seed, step, index)`, so the result is
/// independent of which worker prepares it.
pub fn prepare_pair(
    volumes: &[Volume],
    cfg: &TrainConfig,
    aug: &AugmentationSpec,
    seed: u64,
    step: u64,
    index: usize,
) -> Result<PairSample> {
    if volumes.is_empty() {
        return Err(Error::invalid("empty pretraining dataset"));
    }
    let mut r = rng::stream(seed, &[1, step, index as u64, 0]);
    let v = &volumes[rand::Rng::random_range(&mut r, 0..volumes.len())];
    let pair = sample_patch_pair(&v.data, cfg.patch_size, cfg.min_overlap_fraction, &mut r)?;
    let voxels = sample_positive_pairs(&pair, cfg.voxels_per_pair, &mut r)?;
    let view_a = compose(&pair.patch_a, aug, &mut rng::stream(seed, &[1, step, index as u64, 1]))?;
    let view_b = compose(&pair.patch_b, aug, &mut rng::stream(seed, &[1, step, index as u64, 2]))?;
    Ok(PairSample {
        pair,
        view_a,
        view_b,
        voxels,
    })
}

pub fn prepare_batch(
    volumes: &[Volume],
    cfg: &TrainConfig,
    aug: &AugmentationSpec,
    seed: u64,
    step: u64,
) -> Result<Vec<PairSample>> {
    (0..cfg.pairs_per_batch)
        .into_par_iter()
        .map(|i| prepare_pair(volumes, cfg, aug, seed, step, i))
        .collect()
}

/// Builds the loss graph of one pair. Returns the graph, the root node and
/// the loss values.
pub fn pair_graph<'p, T: Scalar>(
    model: &'p Model<T>,
    sample: &PairSample,
    obj: &Objective,
) -> Result<(Graph<'p, T>, NodeId, LossReport)> {
    let mut g = Graph::new(&model.params);
    let mut finest = Vec::new();
    let mut z = Vec::new();
    for (view, coords) in [
        (&sample.view_a, &sample.voxels.coords_a),
        (&sample.view_b, &sample.voxels.coords_b),
    ] {
        let x = g.constant(patch_tensor(&view.data));
        let levels = model.fpn_forward(&mut g, x)?;
        finest.push(levels[0]);
        if obj.contrastive {
            let bal = model.project_scales(&mut g, &levels)?;
            let j = model.gather_voxel_reps(&mut g, &bal, coords)?;
            z.push(model.projection_head(&mut g, j)?.1);
        }
    }
    let mut terms = Vec::new();
    let mut l_c = 0.0;
    let mut l_r = 0.0;
    if obj.contrastive {
        let scale = obj.loss.contrastive_scale(sample.voxels.len());
        let c = g.info_nce(z[0], z[1], obj.loss.tau, scale)?;
        l_c = g.value(c).item().as_f64();
        terms.push((c, 1.0));
    }
    let lambda = if obj.restorative { obj.loss.lambda } else { 0.0 };
    if obj.restorative {
        let mut parts = Vec::new();
        for (f, target) in finest.iter().zip([&sample.pair.patch_a, &sample.pair.patch_b]) {
            let xhat = model.reconstruct_head(&mut g, *f)?;
            let t = g.constant(patch_tensor(target));
            parts.push((g.mse(xhat, t)?, 0.5));
        }
        let r = g.weighted_sum(&parts);
        l_r = g.value(r).item().as_f64();
        terms.push((r, lambda));
    }
    let root = g.weighted_sum(&terms);
    Ok((g, root, LossReport::new(l_c, l_r, lambda)))
}

/// Loss and parameter gradients averaged over the pairs of a batch.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[PairSample],
    obj: &Objective,
) -> Result<(LossReport, Gradients<T>)> {
    let per_pair: Vec<(LossReport, Gradients<T>)> = batch
        .par_iter()
        .map(|s| {
            let (g, root, rep) = pair_graph(model, s, obj)?;
            Ok((rep, g.backward(root)))
        })
        .collect::<Result<_>>()?;
    let w = 1.0 / batch.len() as f64;
    let mut grads = Gradients::empty(model.params.len());
    let (mut c, mut r, mut t) = (0.0, 0.0, 0.0);
    for (rep, g) in &per_pair {
        grads.accumulate(g, w);
        c += w * rep.l_c;
        r += w * rep.l_r;
        t += w * rep.l_total;
    }
    Ok((
        LossReport {
            l_c: c,
            l_r: r,
            l_total: t,
        },
        grads,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossReport,
    pub wall_ms: f64,
}

/// Model, optimiser state and step counter of a pretraining run.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    /// Completed updates.
    pub step: u64,
}

const MODEL_STREAM: u64 = 0x6d6f64;

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(
            config.model_config(),
            rng::derive_seed(config.seed, &[MODEL_STREAM]),
        )?;
        let adam = Adam::new(&model.params);
        Ok(Trainer {
            config,
            model,
            adam,
            step: 0,
        })
    }

    pub fn train_step(&mut self, volumes: &[Volume]) -> Result<StepRecord> {
        let start = Instant::now();
        let cfg = &self.config;
        let batch = prepare_batch(volumes, &cfg.trainer, &cfg.augmentation(), cfg.seed, self.step)?;
        let (loss, grads) = batch_gradients(&self.model, &batch, &cfg.objective())?;
        let next = self.step + 1;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step: next,
                detail: format!(
                    "l_c={} l_r={} l_total={} finite_grads={}",
                    loss.l_c,
                    loss.l_r,
                    loss.l_total,
                    grads.all_finite()
                ),
            });
        }
        let lr = cfg.trainer.lr;
        self.adam.step(&mut self.model.params, &grads, |_| lr);
        self.step = next;
        Ok(StepRecord {
            step: next,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let mut counters = Vec::new();
        for (_, name, t) in self.model.params.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (id, name, _) in self.model.params.iter() {
            let (m, v, t) = self.adam.moments(id);
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
            counters.push((format!("adam.t.{name}"), t));
        }
        Checkpoint {
            step: self.step,
            config_toml: self.config.to_toml(),
            tensors,
            counters,
        }
    }

    /// Restores a run. With `config`, the run continues under that
    /// configuration, which must describe the same architecture.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let saved = RunConfig::from_toml_str(&ckpt.config_toml, &[])?;
        let config = match config {
            Some(c) => {
                check_same_arch(&saved.model_config(), &c.model_config())?;
                c
            }
            None => saved,
        };
        let model = model_from_checkpoint(ckpt, &config.model_config())?;
        let mut adam = Adam::new(&model.params);
        for (id, name, t) in model.params.iter() {
            let get = |prefix: &str| -> Result<Tensor<f32>> {
                let m = ckpt.tensor(&format!("{prefix}.{name}")).ok_or_else(|| {
                    Error::ArchitectureMismatch(format!("checkpoint lacks {prefix}.{name}"))
                })?;
                if m.shape() != t.shape() {
                    return Err(Error::ArchitectureMismatch(format!("{prefix}.{name} shape")));
                }
                Ok(m.clone())
            };
            let count = ckpt.counter(&format!("adam.t.{name}")).unwrap_or(0);
            adam.set_moments(id, get("adam.m")?, get("adam.v")?, count);
        }
        Ok(Trainer {
            config,
            model,
            adam,
            step: ckpt.step,
        })
    }
}

pub fn check_same_arch(saved: &PyramidConfig, wanted: &PyramidConfig) -> Result<()> {
    if saved != wanted {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint has {saved:?}, configuration requests {wanted:?}"
        )));
    }
    Ok(())
}

/// Model parameters stored in a checkpoint, validated against `arch`.
pub fn model_from_checkpoint(ckpt: &Checkpoint, arch: &PyramidConfig) -> Result<Model<f32>> {
    let saved = RunConfig::from_toml_str(&ckpt.config_toml, &[])?;
    check_same_arch(&saved.model_config(), arch)?;
    let mut model = Model::<f32>::new(arch.clone(), 0)?;
    load_params(&mut model.params, ckpt)?;
    Ok(model)
}

fn load_params(params: &mut ParamStore<f32>, ckpt: &Checkpoint) -> Result<()> {
    for id in 0..params.len() {
        let name = params.name(id).to_string();
        let t = ckpt
            .tensor(&name)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("checkpoint lacks {name}")))?;
        if t.shape() != params.get(id).shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Files produced by [`run_pretraining`].
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_step: u64,
    /// Records produced by this invocation.
    pub records: Vec<StepRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.vpck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Runs pretraining into `out_dir`, writing the resolved config, one JSON
/// line per step and atomic checkpoints every `checkpoint_every` steps and
/// at the end. With `resume`, continues from the checkpoint in `out_dir`
/// if one exists.
pub fn run_pretraining(
    config: &RunConfig,
    volumes: &[Volume],
    out_dir: &Path,
    resume: bool,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if volumes.is_empty() {
        return Err(Error::invalid("empty pretraining dataset"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = checkpoint::load(&ckpt_path)?;
        Trainer::from_checkpoint(&ckpt, Some(config.clone()))?
    } else {
        Trainer::new(config.clone())?
    };
    // keep only records covered by the restored state
    let kept: Vec<StepRecord> = if trainer.step > 0 && metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step <= trainer.step)
            .collect()
    } else {
        Vec::new()
    };
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    checkpoint::write_atomic(&metrics_path, text.as_bytes())?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let steps = config.trainer.steps;
    let mut records = Vec::new();
    while trainer.step < steps {
        let rec = trainer.train_step(volumes)?;
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&metrics_path, e))?;
        if rec.step % config.trainer.checkpoint_every == 0 || rec.step == steps {
            checkpoint::save(&ckpt_path, &trainer.to_checkpoint())?;
        }
        records.push(rec);
    }
    if records.is_empty() && !ckpt_path.exists() {
        checkpoint::save(&ckpt_path, &trainer.to_checkpoint())?;
    }
    Ok(PretrainOutcome {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        final_step: trainer.step,
        records,
    })
}
