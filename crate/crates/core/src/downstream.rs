//! Downstream segmentation: linear probing, fine-tuning with a
//! freeze-then-ramp schedule, sliding-window inference, Dice scoring and
//! the k-fold evaluation protocol.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{patch_tensor, Model, PyramidConfig, INIT_GAIN};
use crate::error::{Error, Result};
use crate::nn::{Adam, ConvGeom, Gradients, Graph, NodeId, Tensor};
use crate::rng;
use crate::volio::{save_labels, LabeledVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSchedule {
    /// Total fine-tuning updates.
    pub steps: u64,
    pub freeze_steps: u64,
    pub ramp_steps: u64,
    pub lr_backbone_start: f64,
    pub lr_backbone_end: f64,
    pub lr_head: f64,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        FinetuneSchedule {
            steps: 600,
            freeze_steps: 200,
            ramp_steps: 100,
            lr_backbone_start: 3e-5,
            lr_backbone_end: 3e-4,
            lr_head: 3e-4,
        }
    }
}

impl FinetuneSchedule {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("finetune.lr_backbone_start", self.lr_backbone_start),
            ("finetune.lr_backbone_end", self.lr_backbone_end),
            ("finetune.lr_head", self.lr_head),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if self.ramp_steps == 0 {
            return Err(Error::config("finetune.ramp_steps", "must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("finetune.steps", "must be >= 1"));
        }
        Ok(())
    }

    /// Backbone learning rate for update `step` (0-based): zero while
    /// frozen, then `start * (end / start)^(r / ramp)` for ramp step `r`,
    /// then `end`.
    pub fn backbone_lr(&self, step: u64) -> f64 {
        if step < self.freeze_steps {
            return 0.0;
        }
        let r = step - self.freeze_steps;
        if r >= self.ramp_steps {
            return self.lr_backbone_end;
        }
        let frac = r as f64 / self.ramp_steps as f64;
        self.lr_backbone_start * (self.lr_backbone_end / self.lr_backbone_start).powf(frac)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub folds: usize,
    /// Training crop and inference window.
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub linear_steps: u64,
    pub linear_lr: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            folds: 5,
            patch_size: [32, 32, 32],
            batch_size: 2,
            linear_steps: 600,
            linear_lr: 1e-2,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::config("downstream.folds", "must be >= 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("downstream.batch_size", "must be >= 1"));
        }
        if self.linear_steps == 0 {
            return Err(Error::config("downstream.linear_steps", "must be >= 1"));
        }
        if self.linear_lr.is_nan() || self.linear_lr <= 0.0 {
            return Err(Error::config("downstream.linear_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Frozen backbone, per-level 1x1x1 head.
    Linear,
    /// Non-linear head, backbone frozen then ramped in.
    Finetune,
    /// Fine-tuning architecture from random initialisation at a constant
    /// backbone rate.
    Scratch,
}

/// Backbone plus segmentation head in one parameter store.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub model: Model<f32>,
    pub mode: EvalMode,
    pub num_classes: usize,
}

fn is_head(name: &str) -> bool {
    name.starts_with("linear.") || name.starts_with("seg.")
}

impl SegModel {
    pub fn new(backbone: Model<f32>, mode: EvalMode, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("segmentation needs >= 2 classes"));
        }
        let mut model = backbone;
        let cfg = model.config.clone();
        let k = num_classes;
        match mode {
            EvalMode::Linear => {
                for (s, w) in cfg.level_widths().into_iter().enumerate() {
                    model.params.add_zeros(format!("linear.s{s}.w"), &[k, w, 1, 1, 1]);
                    model.params.add_zeros(format!("linear.s{s}.b"), &[k]);
                }
            }
            EvalMode::Finetune | EvalMode::Scratch => {
                let mut r = rng::stream(seed, &[0x5e9]);
                let c0 = cfg.level_channels(0);
                let hid = cfg.base_channels.max(8);
                for (name, cout, cin, kk) in [
                    ("seg.conv1", hid, c0, 3),
                    ("seg.conv2", hid, hid, 3),
                    ("seg.out", k, hid, 1),
                ] {
                    model.params.add_uniform(
                        format!("{name}.w"),
                        &[cout, cin, kk, kk, kk],
                        cin * kk * kk * kk,
                        INIT_GAIN,
                        &mut r,
                    );
                    model.params.add_zeros(format!("{name}.b"), &[cout]);
                }
            }
        }
        Ok(SegModel {
            model,
            mode,
            num_classes,
        })
    }

    fn conv(&self, g: &mut Graph<f32>, x: NodeId, name: &str, geom: ConvGeom) -> Result<NodeId> {
        let p = &self.model.params;
        let w = g.param(p.id(&format!("{name}.w")).expect("head weight"));
        let b = g.param(p.id(&format!("{name}.b")).expect("head bias"));
        g.conv3d(x, w, Some(b), geom)
    }

    /// Class logits `[K, D, H, W]` for a `[1, D, H, W]` input. With
    /// `freeze_backbone` no gradient reaches backbone parameters.
    pub fn logits(&self, g: &mut Graph<f32>, x: NodeId, freeze_backbone: bool) -> Result<NodeId> {
        let levels = self.model.fpn_forward(g, x)?;
        let full = g.value(x).spatial();
        match self.mode {
            EvalMode::Linear => {
                let bal = self.model.project_scales(g, &levels)?;
                let mut acc: Option<NodeId> = None;
                for (s, &l) in bal.iter().enumerate() {
                    let l = if freeze_backbone { g.stop_gradient(l) } else { l };
                    let y = self.conv(g, l, &format!("linear.s{s}"), ConvGeom::POINTWISE)?;
                    let y = if s == 0 { y } else { g.trilinear(y, full) };
                    acc = Some(match acc {
                        None => y,
                        Some(a) => g.add(a, y)?,
                    });
                }
                Ok(acc.expect("at least two levels"))
            }
            EvalMode::Finetune | EvalMode::Scratch => {
                let f0 = if freeze_backbone {
                    g.stop_gradient(levels[0])
                } else {
                    levels[0]
                };
                let h = self.conv(g, f0, "seg.conv1", ConvGeom::SAME3)?;
                let h = g.silu(h);
                let h = self.conv(g, h, "seg.conv2", ConvGeom::SAME3)?;
                let h = g.silu(h);
                self.conv(g, h, "seg.out", ConvGeom::POINTWISE)
            }
        }
    }

    /// Logits of one patch as `[K, D, H, W]`.
    pub fn patch_logits(&self, patch: &Array3<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new(&self.model.params);
        let x = g.constant(patch_tensor(patch));
        let y = self.logits(&mut g, x, true)?;
        Ok(g.value(y).clone())
    }

    /// Sliding-window prediction with 50% overlap and logit averaging.
    /// Volumes smaller than the window are zero-padded.
    pub fn predict(&self, volume: &Array3<f32>, window: [usize; 3]) -> Result<Array3<u8>> {
        let sh = volume.shape();
        let orig = [sh[0], sh[1], sh[2]];
        let dims: [usize; 3] = std::array::from_fn(|a| orig[a].max(window[a]));
        let mut padded = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
        padded
            .slice_mut(s![..orig[0], ..orig[1], ..orig[2]])
            .assign(volume);
        let k = self.num_classes;
        let vox = dims.iter().product::<usize>();
        let mut sum = vec![0.0f32; k * vox];
        let mut count = vec![0u32; vox];
        let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(dims[a], window[a])).collect();
        for &z in &starts[0] {
            for &y in &starts[1] {
                for &x in &starts[2] {
                    let patch = padded
                        .slice(s![z..z + window[0], y..y + window[1], x..x + window[2]])
                        .to_owned();
                    let l = self.patch_logits(&patch)?;
                    let wv = window.iter().product::<usize>();
                    for dz in 0..window[0] {
                        for dy in 0..window[1] {
                            for dx in 0..window[2] {
                                let local = (dz * window[1] + dy) * window[2] + dx;
                                let global = ((z + dz) * dims[1] + y + dy) * dims[2] + x + dx;
                                count[global] += 1;
                                for c in 0..k {
                                    sum[c * vox + global] += l.data()[c * wv + local];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Array3::from_shape_fn((orig[0], orig[1], orig[2]), |(z, y, x)| {
            let i = (z * dims[1] + y) * dims[2] + x;
            let mut best = 0;
            for c in 1..k {
                if sum[c * vox + i] > sum[best * vox + i] {
                    best = c;
                }
            }
            assert!(count[i] > 0);
            best as u8
        }))
    }
}

/// Window origins with stride `w / 2`, the last one flush with the end.
fn window_starts(n: usize, w: usize) -> Vec<usize> {
    let stride = (w / 2).max(1);
    let mut v: Vec<usize> = (0..=n - w).step_by(stride).collect();
    if *v.last().unwrap() != n - w {
        v.push(n - w);
    }
    v
}

fn random_crop<R: Rng + ?Sized>(
    lv: &LabeledVolume,
    size: [usize; 3],
    rng: &mut R,
) -> Result<(Array3<f32>, Vec<u8>)> {
    let sh = lv.volume.shape();
    if (0..3).any(|a| sh[a] < size[a]) {
        return Err(Error::invalid(format!(
            "labelled volume {sh:?} smaller than training patch {size:?}"
        )));
    }
    let o: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=sh[a] - size[a]));
    let sl = s![o[0]..o[0] + size[0], o[1]..o[1] + size[1], o[2]..o[2] + size[2]];
    Ok((
        lv.volume.data.slice(sl).to_owned(),
        lv.labels.slice(sl).iter().copied().collect(),
    ))
}

/// Learning rates `(backbone, head)` for update `step`.
pub fn learning_rates(
    mode: EvalMode,
    sched: &FinetuneSchedule,
    cfg: &DownstreamConfig,
    step: u64,
) -> (f64, f64) {
    match mode {
        EvalMode::Linear => (0.0, cfg.linear_lr),
        EvalMode::Finetune => (sched.backbone_lr(step), sched.lr_head),
        EvalMode::Scratch => (sched.lr_backbone_end, sched.lr_head),
    }
}

pub fn train_steps(mode: EvalMode, sched: &FinetuneSchedule, cfg: &DownstreamConfig) -> u64 {
    match mode {
        EvalMode::Linear => cfg.linear_steps,
        EvalMode::Finetune | EvalMode::Scratch => sched.steps,
    }
}

/// Trains the head (and, when scheduled, the backbone) with voxelwise
/// cross-entropy on random crops. Returns the loss of every update.
pub fn train_segmentation(
    seg: &mut SegModel,
    data: &[LabeledVolume],
    sched: &FinetuneSchedule,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("no training volumes"));
    }
    if let Some(lv) = data.iter().find(|lv| lv.num_classes != seg.num_classes) {
        return Err(Error::invalid(format!(
            "volume has {} classes, model {}",
            lv.num_classes, seg.num_classes
        )));
    }
    let head: Vec<bool> = (0..seg.model.params.len())
        .map(|id| is_head(seg.model.params.name(id)))
        .collect();
    let mut adam = Adam::new(&seg.model.params);
    let mut losses = Vec::new();
    for step in 0..train_steps(seg.mode, sched, cfg) {
        let (lr_b, lr_h) = learning_rates(seg.mode, sched, cfg, step);
        let mut grads = Gradients::empty(seg.model.params.len());
        let mut loss = 0.0;
        let w = 1.0 / cfg.batch_size as f64;
        for b in 0..cfg.batch_size {
            let mut r = rng::stream(seed, &[2, step, b as u64]);
            let lv = &data[r.random_range(0..data.len())];
            let (patch, labels) = random_crop(lv, cfg.patch_size, &mut r)?;
            let mut g = Graph::new(&seg.model.params);
            let x = g.constant(patch_tensor(&patch));
            let logits = seg.logits(&mut g, x, lr_b == 0.0)?;
            let l = g.cross_entropy(logits, &labels)?;
            loss += w * g.value(l).item() as f64;
            grads.accumulate(&g.backward(l), w);
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                detail: format!("segmentation loss {loss}"),
            });
        }
        adam.step(&mut seg.model.params, &grads, |id| if head[id] { lr_h } else { lr_b });
        losses.push(loss);
    }
    Ok(losses)
}

/// Per-class and overall Dice of one volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    /// Foreground classes present in prediction or truth, keyed `classC`.
    pub per_class: BTreeMap<String, f64>,
    /// Mean over the scored foreground classes; 1.0 when none is present.
    pub overall: f64,
}

pub fn class_key(c: usize) -> String {
    format!("class{c}")
}

pub fn dice_score(pred: &Array3<u8>, truth: &Array3<u8>, num_classes: usize) -> Result<DiceResult> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut p_n = vec![0usize; num_classes];
    let mut t_n = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!("label out of range for {num_classes} classes")));
        }
        p_n[p] += 1;
        t_n[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 1..num_classes {
        let den = p_n[c] + t_n[c];
        if den > 0 {
            per_class.insert(class_key(c), 2.0 * inter[c] as f64 / den as f64);
        }
    }
    let overall = if per_class.is_empty() {
        1.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(DiceResult { per_class, overall })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_volumes: Vec<usize>,
    pub test_volumes: Vec<usize>,
    pub per_volume: Vec<DiceResult>,
    /// Per-class mean over the test volumes that score the class.
    pub per_class: BTreeMap<String, f64>,
    /// Mean of per-volume overall Dice.
    pub overall: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub mode: EvalMode,
    pub num_classes: usize,
    pub k_folds: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    /// Mean and population standard deviation of fold overall Dice.
    pub mean: f64,
    pub std: f64,
    pub per_class_mean: BTreeMap<String, f64>,
}

/// Test indices of each fold: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} volumes cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[3]));
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn class_means(results: &[&DiceResult]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in results {
        for (k, &v) in &r.per_class {
            let e = acc.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Aggregates per-volume scores into fold and protocol summaries.
pub fn summarise(
    mode: EvalMode,
    num_classes: usize,
    seed: u64,
    folds: Vec<FoldResult>,
) -> ProtocolResult {
    let overall: Vec<f64> = folds.iter().map(|f| f.overall).collect();
    let (mean, std) = mean_std(&overall);
    let all: Vec<&DiceResult> = folds.iter().flat_map(|f| f.per_volume.iter()).collect();
    ProtocolResult {
        mode,
        num_classes,
        k_folds: folds.len(),
        seed,
        per_class_mean: class_means(&all),
        folds,
        mean,
        std,
    }
}

pub fn fold_result(
    fold: usize,
    train_volumes: Vec<usize>,
    test_volumes: Vec<usize>,
    per_volume: Vec<DiceResult>,
    final_train_loss: f64,
) -> FoldResult {
    let overall = per_volume.iter().map(|d| d.overall).sum::<f64>() / per_volume.len() as f64;
    let refs: Vec<&DiceResult> = per_volume.iter().collect();
    FoldResult {
        fold,
        train_volumes,
        test_volumes,
        per_class: class_means(&refs),
        per_volume,
        overall,
        final_train_loss,
    }
}

/// Prediction file of test volume `index` in fold `fold`.
pub fn prediction_path(dir: &Path, fold: usize, index: usize) -> std::path::PathBuf {
    dir.join(format!("fold{fold}")).join(format!("vol_{index:04}_pred.vvol"))
}

/// k-fold protocol: for every fold, trains a fresh head (and backbone copy)
/// on the other folds and scores the held-out volumes. `pretrained` is
/// required for `Finetune`, optional for `Linear` (random backbone when
/// absent) and must be absent for `Scratch`. With `pred_dir`, predictions
/// are written per fold.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_protocol(
    pretrained: Option<&Model<f32>>,
    arch: &PyramidConfig,
    mode: EvalMode,
    data: &[LabeledVolume],
    sched: &FinetuneSchedule,
    cfg: &DownstreamConfig,
    seed: u64,
    pred_dir: Option<&Path>,
) -> Result<ProtocolResult> {
    sched.validate()?;
    cfg.validate()?;
    match (mode, pretrained) {
        (EvalMode::Finetune, None) => {
            return Err(Error::invalid("fine-tuning needs a pretrained backbone"))
        }
        (EvalMode::Scratch, Some(_)) => {
            return Err(Error::invalid("training from scratch takes no pretrained backbone"))
        }
        _ => {}
    }
    if let Some(m) = pretrained {
        if &m.config != arch {
            return Err(Error::ArchitectureMismatch(format!(
                "backbone {:?} vs requested {arch:?}",
                m.config
            )));
        }
    }
    let num_classes = data
        .first()
        .ok_or_else(|| Error::invalid("no labelled volumes"))?
        .num_classes;
    let assignment = fold_assignment(data.len(), cfg.folds, seed)?;
    let mut folds = Vec::new();
    for (f, test) in assignment.iter().enumerate() {
        let train: Vec<usize> = (0..data.len()).filter(|i| !test.contains(i)).collect();
        let backbone = match pretrained {
            Some(m) => m.clone(),
            None => Model::new(arch.clone(), rng::derive_seed(seed, &[4, f as u64]))?,
        };
        let mut seg = SegModel::new(backbone, mode, num_classes, rng::derive_seed(seed, &[5, f as u64]))?;
        let train_set: Vec<LabeledVolume> = train.iter().map(|&i| data[i].clone()).collect();
        let losses = train_segmentation(
            &mut seg,
            &train_set,
            sched,
            cfg,
            rng::derive_seed(seed, &[6, f as u64]),
        )?;
        let mut per_volume = Vec::new();
        for &i in test {
            let pred = seg.predict(&data[i].volume.data, cfg.patch_size)?;
            if let Some(dir) = pred_dir {
                let p = prediction_path(dir, f, i);
                let parent = p.parent().expect("fold directory");
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                save_labels(&p, &pred, data[i].volume.spacing)?;
            }
            per_volume.push(dice_score(&pred, &data[i].labels, num_classes)?);
        }
        folds.push(fold_result(
            f,
            train,
            test.clone(),
            per_volume,
            losses.last().copied().unwrap_or(f64::NAN),
        ));
    }
    Ok(summarise(mode, num_classes, seed, folds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::generate_synthetic_volume;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn tiny_arch() -> PyramidConfig {
        PyramidConfig {
            num_scales: 2,
            base_channels: 4,
            proj_channels: 4,
            embed_dim: 4,
            balanced: true,
        }
    }

    #[test]
    fn schedule_values() {
        let s = FinetuneSchedule {
            steps: 100,
            freeze_steps: 15,
            ramp_steps: 12,
            ..Default::default()
        };
        for t in 0..15 {
            assert_eq!(s.backbone_lr(t), 0.0);
        }
        assert_eq!(s.backbone_lr(15), 3e-5);
        assert_eq!(s.backbone_lr(27), 3e-4);
        assert_eq!(s.backbone_lr(80), 3e-4);
        let mid = s.backbone_lr(21);
        assert!((mid - (3e-5f64 * 3e-4).sqrt()).abs() < 1e-15);
        assert!((mid - 9.4868e-5).abs() < 1e-8);
        for t in 15..27 {
            assert!(s.backbone_lr(t + 1) >= s.backbone_lr(t));
        }
    }

    #[test]
    fn window_starts_cover_volume() {
        assert_eq!(window_starts(32, 16), vec![0, 8, 16]);
        assert_eq!(window_starts(20, 16), vec![0, 4]);
        assert_eq!(window_starts(16, 16), vec![0]);
    }

    #[test]
    fn dice_examples() {
        let a = Array3::from_shape_fn((4, 4, 4), |(z, _, _)| (z % 3) as u8);
        let r = dice_score(&a, &a, 3).unwrap();
        assert_eq!(r.overall, 1.0);
        assert!(r.per_class.values().all(|&v| v == 1.0));
        let p = Array3::from_shape_fn((4, 4, 4), |(z, _, _)| if z < 2 { 1 } else { 0 });
        let t = Array3::from_shape_fn((4, 4, 4), |(z, _, _)| if z >= 2 { 1 } else { 0 });
        assert_eq!(dice_score(&p, &t, 2).unwrap().overall, 0.0);
        assert!(dice_score(&p, &Array3::zeros((4, 4, 3)), 2).is_err());
        let empty = Array3::zeros((2, 2, 2));
        let r = dice_score(&empty, &empty, 4).unwrap();
        assert!(r.per_class.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn dice_matches_set_oracle(seed in any::<u64>(), k in 2usize..5) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = Array3::from_shape_fn((3, 4, 5), |_| r.random_range(0..k as u8));
            let t = Array3::from_shape_fn((3, 4, 5), |_| r.random_range(0..k as u8));
            let res = dice_score(&p, &t, k).unwrap();
            let sym = dice_score(&t, &p, k).unwrap();
            prop_assert_eq!(&res, &sym);
            for c in 1..k {
                let ps: HashSet<_> = p.indexed_iter().filter(|(_, &v)| v as usize == c).map(|(i, _)| i).collect();
                let ts: HashSet<_> = t.indexed_iter().filter(|(_, &v)| v as usize == c).map(|(i, _)| i).collect();
                let den = ps.len() + ts.len();
                match res.per_class.get(&class_key(c)) {
                    Some(&d) => {
                        let want = 2.0 * ps.intersection(&ts).count() as f64 / den as f64;
                        prop_assert!((d - want).abs() < 1e-12);
                        prop_assert!((0.0..=1.0).contains(&d));
                    }
                    None => prop_assert_eq!(den, 0),
                }
            }
        }
    }

    #[test]
    fn linear_head_is_zero_and_blocks_backbone_gradients() {
        let m = Model::<f32>::new(tiny_arch(), 0).unwrap();
        let seg = SegModel::new(m, EvalMode::Linear, 3, 0).unwrap();
        let patch = Array3::from_shape_fn((8, 8, 8), |(z, y, x)| ((z + y * x) % 5) as f32 / 5.0);
        let l = seg.patch_logits(&patch).unwrap();
        assert_eq!(l.shape(), &[3, 8, 8, 8]);
        assert!(l.data().iter().all(|&v| v == 0.0));
        let mut g = Graph::new(&seg.model.params);
        let x = g.constant(patch_tensor(&patch));
        let y = seg.logits(&mut g, x, true).unwrap();
        let labels = vec![1u8; 512];
        let loss = g.cross_entropy(y, &labels).unwrap();
        let grads = g.backward(loss);
        for (id, name, _) in seg.model.params.iter() {
            let has = grads.param(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
            assert_eq!(has, is_head(name), "{name}");
        }
    }

    fn small_data(n: usize) -> Vec<LabeledVolume> {
        (0..n)
            .map(|i| generate_synthetic_volume(i as u64, [32, 32, 32], 3).unwrap())
            .collect()
    }

    fn quick_cfg() -> (FinetuneSchedule, DownstreamConfig) {
        (
            FinetuneSchedule {
                steps: 6,
                freeze_steps: 3,
                ramp_steps: 2,
                ..Default::default()
            },
            DownstreamConfig {
                folds: 2,
                patch_size: [16, 16, 16],
                batch_size: 1,
                linear_steps: 4,
                linear_lr: 1e-2,
            },
        )
    }

    #[test]
    fn frozen_backbone_unchanged_during_freeze_and_linear() {
        let data = small_data(2);
        let (mut sched, cfg) = quick_cfg();
        sched.steps = sched.freeze_steps;
        let base = Model::<f32>::new(tiny_arch(), 1).unwrap();
        for mode in [EvalMode::Finetune, EvalMode::Linear] {
            let mut seg = SegModel::new(base.clone(), mode, 3, 0).unwrap();
            train_segmentation(&mut seg, &data, &sched, &cfg, 0).unwrap();
            for (id, name, t) in base.params.iter() {
                assert_eq!(t.data(), seg.model.params.get(id).data(), "{name}");
            }
        }
    }

    #[test]
    fn protocol_is_deterministic_and_recomputable() {
        let data = small_data(4);
        let (sched, cfg) = quick_cfg();
        let base = Model::<f32>::new(tiny_arch(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = evaluate_protocol(Some(&base), &tiny_arch(), EvalMode::Finetune, &data, &sched, &cfg, 9, Some(dir.path())).unwrap();
        let b = evaluate_protocol(Some(&base), &tiny_arch(), EvalMode::Finetune, &data, &sched, &cfg, 9, None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.folds.len(), 2);
        // recompute from stored predictions
        let mut fold_means = Vec::new();
        for f in &a.folds {
            let mut s = 0.0;
            for &i in &f.test_volumes {
                let (pred, _) = crate::volio::load_labels(prediction_path(dir.path(), f.fold, i)).unwrap();
                s += dice_score(&pred, &data[i].labels, 3).unwrap().overall;
            }
            fold_means.push(s / f.test_volumes.len() as f64);
        }
        let (m, sd) = mean_std(&fold_means);
        assert_eq!(m, a.mean);
        assert_eq!(sd, a.std);
        assert!(evaluate_protocol(None, &tiny_arch(), EvalMode::Finetune, &data, &sched, &cfg, 9, None).is_err());
        assert!(evaluate_protocol(Some(&base), &tiny_arch(), EvalMode::Scratch, &data, &sched, &cfg, 9, None).is_err());
    }

    #[test]
    fn fold_assignment_properties() {
        let f = fold_assignment(7, 3, 1).unwrap();
        assert_eq!(f, fold_assignment(7, 3, 1).unwrap());
        let mut all: Vec<usize> = f.concat();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(fold_assignment(2, 3, 1).is_err());
        let same = vec![0.7; 4];
        assert_eq!(mean_std(&same), (0.7, 0.0));
    }

    #[test]
    fn prediction_handles_small_volumes() {
        let m = Model::<f32>::new(tiny_arch(), 0).unwrap();
        let seg = SegModel::new(m, EvalMode::Scratch, 3, 0).unwrap();
        let v = Array3::from_elem((6, 20, 9), 0.3f32);
        let p = seg.predict(&v, [8, 8, 8]).unwrap();
        assert_eq!(p.shape(), &[6, 20, 9]);
    }
}
