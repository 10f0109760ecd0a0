//! Feature pyramid network with balancing projections, the projection head
//! and the reconstruction head.
//!
//! Grids are `[C, D, H, W]` tensors. Level `s` of the pyramid has spatial size
//! `patch / 2^s` and `base_channels * 2^s` channels.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvGeom, Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::rng;

/// Channels of the hidden layer in the reconstruction head.
pub const RECON_HIDDEN: usize = 8;
/// Guard inside `sqrt(|h|^2 + eps)` when normalising embeddings.
pub const NORM_EPS: f64 = 1e-12;

/// Uniform init bound multiplier: `U(-g/sqrt(fan_in), g/sqrt(fan_in))` with
/// `g = sqrt(6)` gives weight variance `2 / fan_in`.
pub const INIT_GAIN: f64 = 2.449_489_742_783_178;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub num_scales: usize,
    pub base_channels: usize,
    pub proj_channels: usize,
    pub embed_dim: usize,
    /// Project every level to `proj_channels` before concatenation. When
    /// false, raw levels are concatenated and fine levels are under-weighted.
    pub balanced: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            num_scales: 4,
            base_channels: 16,
            proj_channels: 16,
            embed_dim: 64,
            balanced: true,
        }
    }
}

impl PyramidConfig {
    /// Unbalanced reference architecture used when the architectural
    /// modification is ablated: one level deeper, half the width, no
    /// balancing projection.
    pub fn unbalanced_reference(&self) -> Self {
        PyramidConfig {
            num_scales: self.num_scales + 1,
            base_channels: (self.base_channels / 2).max(1),
            balanced: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 2 {
            return Err(Error::config("model.num_scales", "must be >= 2"));
        }
        if self.num_scales > 8 {
            return Err(Error::config("model.num_scales", "must be <= 8"));
        }
        for (f, v) in [
            ("model.base_channels", self.base_channels),
            ("model.proj_channels", self.proj_channels),
            ("model.embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn level_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Width contributed by each level to the voxel representation.
    pub fn level_widths(&self) -> Vec<usize> {
        (0..self.num_scales)
            .map(|s| {
                if self.balanced {
                    self.proj_channels
                } else {
                    self.level_channels(s)
                }
            })
            .collect()
    }

    pub fn representation_len(&self) -> usize {
        self.level_widths().iter().sum()
    }

    pub fn head_hidden(&self) -> usize {
        2 * self.embed_dim
    }

    /// Patch sides must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.num_scales - 1)
    }

    pub fn check_patch(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::shape(format!(
                "patch {dims:?} not divisible by 2^(num_scales-1) = {d}"
            )));
        }
        Ok(())
    }
}

/// Ordered pyramid levels, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.shape().to_vec()).collect()
    }
}

/// Backbone, projections and heads with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: PyramidConfig,
    pub params: ParamStore<T>,
}

fn conv_shape(cout: usize, cin: usize, k: usize) -> [usize; 5] {
    [cout, cin, k, k, k]
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: He-uniform weights, zero biases.
    pub fn new(config: PyramidConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[0xb4c_b0e]);
        let mut p = ParamStore::new();
        let mut conv = |p: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize| {
            p.add_uniform(
                format!("{name}.w"),
                &conv_shape(cout, cin, k),
                cin * k * k * k,
                INIT_GAIN,
                &mut rng,
            );
            p.add_zeros(format!("{name}.b"), &[cout]);
        };
        let c = |s| config.level_channels(s);
        conv(&mut p, "fpn.stem", c(0), 1, 3);
        for s in 0..config.num_scales {
            if s > 0 {
                conv(&mut p, &format!("fpn.enc.{s}.down"), c(s), c(s - 1), 2);
            }
            conv(&mut p, &format!("fpn.enc.{s}.conv1"), c(s), c(s), 3);
        }
        for s in 0..config.num_scales - 1 {
            conv(&mut p, &format!("fpn.dec.{s}.lateral"), c(s), c(s + 1), 1);
            conv(&mut p, &format!("fpn.dec.{s}.conv1"), c(s), c(s), 3);
        }
        if config.balanced {
            for s in 0..config.num_scales {
                conv(&mut p, &format!("proj.s{s}"), config.proj_channels, c(s), 1);
            }
        }
        let (l, h, e) = (config.representation_len(), config.head_hidden(), config.embed_dim);
        let mut linear = |p: &mut ParamStore<T>, name: &str, out: usize, inp: usize| {
            p.add_uniform(format!("{name}.w"), &[out, inp], inp, INIT_GAIN, &mut rng);
            p.add_zeros(format!("{name}.b"), &[out]);
        };
        linear(&mut p, "head.fc1", h, l);
        linear(&mut p, "head.fc2", h, h);
        linear(&mut p, "head.fc3", e, h);
        let mut conv = |p: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize| {
            p.add_uniform(
                format!("{name}.w"),
                &conv_shape(cout, cin, k),
                cin * k * k * k,
                INIT_GAIN,
                &mut rng,
            );
            p.add_zeros(format!("{name}.b"), &[cout]);
        };
        conv(&mut p, "recon.conv1", RECON_HIDDEN, c(0), 3);
        conv(&mut p, "recon.conv2", 1, RECON_HIDDEN, 1);
        Ok(Model { config, params: p })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> NodeId {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(id)
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, name: &str, geom: ConvGeom) -> Result<NodeId> {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.conv3d(x, w, Some(b), geom)
    }

    /// `x + conv3(silu(x))`
    fn residual(&self, g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId> {
        let a = g.silu(x);
        let r = self.conv(g, a, name, ConvGeom::SAME3)?;
        g.add(x, r)
    }

    /// Encoder with strided downsampling, then a top-down pathway with
    /// lateral connections. Returns levels finest first. `x` is `[1, D, H, W]`.
    pub fn fpn_forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<Vec<NodeId>> {
        let xv = g.value(x);
        if xv.shape().len() != 4 || xv.channels() != 1 {
            return Err(Error::shape(format!(
                "fpn input must be [1, D, H, W], got {:?}",
                xv.shape()
            )));
        }
        self.config.check_patch(xv.spatial())?;
        let s_n = self.config.num_scales;
        let mut enc = Vec::with_capacity(s_n);
        let stem = self.conv(g, x, "fpn.stem", ConvGeom::SAME3)?;
        enc.push(self.residual(g, stem, "fpn.enc.0.conv1")?);
        for s in 1..s_n {
            let a = g.silu(enc[s - 1]);
            let d = self.conv(g, a, &format!("fpn.enc.{s}.down"), ConvGeom::DOWN2)?;
            enc.push(self.residual(g, d, &format!("fpn.enc.{s}.conv1"))?);
        }
        let mut out = vec![0; s_n];
        out[s_n - 1] = enc[s_n - 1];
        for s in (0..s_n - 1).rev() {
            let lat = self.conv(g, out[s + 1], &format!("fpn.dec.{s}.lateral"), ConvGeom::POINTWISE)?;
            let up = g.upsample_nearest2(lat);
            let t = g.add(enc[s], up)?;
            out[s] = self.residual(g, t, &format!("fpn.dec.{s}.conv1"))?;
        }
        Ok(out)
    }

    /// Independent 1x1x1 projection of every level to `proj_channels`.
    /// Identity for the unbalanced configuration.
    pub fn project_scales(&self, g: &mut Graph<T>, levels: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.config.balanced {
            return Ok(levels.to_vec());
        }
        levels
            .iter()
            .enumerate()
            .map(|(s, &l)| self.conv(g, l, &format!("proj.s{s}"), ConvGeom::POINTWISE))
            .collect()
    }

    /// Representation `j` per coordinate: level `s` read at `coord / 2^s`,
    /// concatenated finest first. Output `[n, representation_len]`.
    pub fn gather_voxel_reps(
        &self,
        g: &mut Graph<T>,
        levels: &[NodeId],
        coords: &[[usize; 3]],
    ) -> Result<NodeId> {
        g.gather(levels, coords)
    }

    /// Three-layer MLP followed by row normalisation. Returns `(h, z)`.
    pub fn projection_head(&self, g: &mut Graph<T>, j: NodeId) -> Result<(NodeId, NodeId)> {
        let mut x = j;
        for (i, name) in ["head.fc1", "head.fc2", "head.fc3"].iter().enumerate() {
            let w = self.p(g, &format!("{name}.w"));
            let b = self.p(g, &format!("{name}.b"));
            x = g.linear(x, w, Some(b))?;
            if i < 2 {
                x = g.silu(x);
            }
        }
        let z = g.normalize_rows(x, NORM_EPS);
        Ok((x, z))
    }

    /// Two convolutions mapping the finest raw level to a one-channel image.
    pub fn reconstruct_head(&self, g: &mut Graph<T>, finest: NodeId) -> Result<NodeId> {
        let h = self.conv(g, finest, "recon.conv1", ConvGeom::SAME3)?;
        let a = g.silu(h);
        self.conv(g, a, "recon.conv2", ConvGeom::POINTWISE)
    }

    /// Inference helper: raw pyramid levels for one patch.
    pub fn pyramid(&self, patch: &Array3<f32>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(patch_tensor(patch));
        let levels = self.fpn_forward(&mut g, x)?;
        Ok(FeaturePyramid {
            levels: levels.iter().map(|&l| g.value(l).clone()).collect(),
        })
    }

    /// Inference helper: balanced levels for one patch.
    pub fn balanced_pyramid(&self, patch: &Array3<f32>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(patch_tensor(patch));
        let levels = self.fpn_forward(&mut g, x)?;
        let j = self.project_scales(&mut g, &levels)?;
        Ok(FeaturePyramid {
            levels: j.iter().map(|&l| g.value(l).clone()).collect(),
        })
    }

    /// Inference helper: `(j, h, z)` rows for the given coordinates.
    pub fn embed(
        &self,
        patch: &Array3<f32>,
        coords: &[[usize; 3]],
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(patch_tensor(patch));
        let levels = self.fpn_forward(&mut g, x)?;
        let bal = self.project_scales(&mut g, &levels)?;
        let j = self.gather_voxel_reps(&mut g, &bal, coords)?;
        let (h, z) = self.projection_head(&mut g, j)?;
        Ok((g.value(j).clone(), g.value(h).clone(), g.value(z).clone()))
    }

    /// Inference helper: reconstruction of one patch, `[D, H, W]`.
    pub fn reconstruct(&self, patch: &Array3<f32>) -> Result<Array3<f32>> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(patch_tensor(patch));
        let levels = self.fpn_forward(&mut g, x)?;
        let r = self.reconstruct_head(&mut g, levels[0])?;
        let v = g.value(r);
        let [d, h, w] = v.spatial();
        let data = v.data().iter().map(|x| x.as_f64() as f32).collect();
        Ok(Array3::from_shape_vec((d, h, w), data).expect("recon shape"))
    }
}

/// `[1, D, H, W]` tensor from a patch.
pub fn patch_tensor<T: Scalar>(patch: &Array3<f32>) -> Tensor<T> {
    let s = patch.shape();
    Tensor::from_vec(
        &[1, s[0], s[1], s[2]],
        patch.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}
