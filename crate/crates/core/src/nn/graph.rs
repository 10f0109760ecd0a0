//! Define-by-run reverse-mode autodiff over dense tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass,
//! records every operation, and [`Graph::backward`] returns gradients for the
//! parameters and variable leaves that influence the root.

use std::collections::HashMap;

use super::conv::{conv_backward, conv_forward, ConvGeom, ConvShape};
use super::{gemm, loss_kernels, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::interp::{linear_taps, resample_axis, resample_axis_adjoint, Tap};

pub type NodeId = usize;

enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Add(NodeId, NodeId),
    Silu(NodeId),
    UpsampleNearest2(NodeId),
    Trilinear {
        x: NodeId,
        taps: [Vec<Tap>; 3],
    },
    Gather {
        levels: Vec<NodeId>,
        coords: Vec<[usize; 3]>,
    },
    ConcatChannels(Vec<NodeId>),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    NormalizeRows {
        x: NodeId,
        eps: f64,
    },
    InfoNce {
        za: NodeId,
        zb: NodeId,
        tau: f64,
        scale: f64,
    },
    Mse {
        pred: NodeId,
        target: Tensor<T>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<u8>,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    variables: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Empty gradient set for a store with `num_params` entries.
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            params: (0..num_params).map(|_| None).collect(),
            variables: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn variable(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.variables.get(&id)
    }

    /// Adds `other * weight` parameter-wise.
    pub fn accumulate(&mut self, other: &Gradients<T>, weight: f64) {
        let w = T::from_f64(weight);
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => {
                    for (a, &b) in d.data_mut().iter_mut().zip(src.data()) {
                        *a += w * b;
                    }
                }
                None => {
                    let mut s = src.clone();
                    s.scale(w);
                    *dst = Some(s);
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::is_finite)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id];
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => self.params.get(*pid),
            (_, Some(v)) => v,
            _ => unreachable!("node {id} has no value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        self.nodes.len() - 1
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(t),
            needs_grad: false,
        });
        self.nodes.len() - 1
    }

    /// Input whose gradient is reported by [`Gradients::variable`].
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Variable,
            value: Some(t),
            needs_grad: true,
        });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let n = self.nodes.len() - 1;
        self.param_nodes.insert(id, n);
        n
    }

    /// Copies the value of `x` into a constant node, cutting gradient flow.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// 3D convolution of a `[Cin, D, H, W]` grid with weights
    /// `[Cout, Cin, k, k, k]` and optional bias `[Cout]`.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 4 || wv.shape().len() != 5 {
            return Err(Error::shape("conv3d expects [C,D,H,W] input and 5D weights"));
        }
        let cin = xv.channels();
        let cout = wv.shape()[0];
        if wv.shape()[1] != cin || wv.shape()[2..] != [geom.kernel; 3] {
            return Err(Error::shape(format!(
                "conv3d weights {:?} incompatible with {} input channels",
                wv.shape(),
                cin
            )));
        }
        let dims = xv.spatial();
        let od = geom
            .out_dims(dims)
            .ok_or_else(|| Error::shape(format!("conv3d input {dims:?} smaller than kernel")))?;
        let ov = od.iter().product::<usize>();
        let mut out = vec![T::zero(); cout * ov];
        let shape = ConvShape {
            cin,
            cout,
            dims,
            od,
            geom,
        };
        conv_forward(xv.data(), wv.data(), shape, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != cout {
                return Err(Error::shape("conv3d bias length differs from output channels"));
            }
            for (c, chunk) in out.chunks_mut(ov).enumerate() {
                for v in chunk {
                    *v += bv[c];
                }
            }
        }
        let t = Tensor::from_vec(&[cout, od[0], od[1], od[2]], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv { x, w, b, geom }, t, &inputs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let t = Tensor::from_vec(xv.shape(), data);
        self.push(Op::Silu(x), t, &[x])
    }

    /// Nearest-neighbour 2x upsampling of a `[C, D, H, W]` grid.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.channels();
        let [d, h, w] = xv.spatial();
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let src = xv.data();
        let mut out = vec![T::zero(); c * od * oh * ow];
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let s = &src[((ch * d + z / 2) * h + y / 2) * w..][..w];
                    let dst = &mut out[((ch * od + z) * oh + y) * ow..][..ow];
                    for (x2, v) in dst.iter_mut().enumerate() {
                        *v = s[x2 / 2];
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[c, od, oh, ow], out);
        self.push(Op::UpsampleNearest2(x), t, &[x])
    }

    /// Trilinear resize of a `[C, D, H, W]` grid to spatial size `to`.
    pub fn trilinear(&mut self, x: NodeId, to: [usize; 3]) -> NodeId {
        let xv = self.value(x);
        let c = xv.channels();
        let from = xv.spatial();
        let taps: [Vec<Tap>; 3] = std::array::from_fn(|a| {
            linear_taps(from[a], to[a], from[a] as f64 / to[a] as f64)
        });
        let mut shape = [c, from[0], from[1], from[2]];
        let mut data = xv.data().to_vec();
        for a in 0..3 {
            data = resample_axis(&data, &shape, a + 1, &taps[a]);
            shape[a + 1] = to[a];
        }
        let t = Tensor::from_vec(&shape, data);
        self.push(Op::Trilinear { x, taps }, t, &[x])
    }

    /// Reads, for every coordinate, the feature vector of each level `s` at
    /// `coord >> s` and concatenates them in level order. Output `[n, sum C_s]`.
    pub fn gather(&mut self, levels: &[NodeId], coords: &[[usize; 3]]) -> Result<NodeId> {
        let mut width = 0;
        for (s, &l) in levels.iter().enumerate() {
            let v = self.value(l);
            if v.shape().len() != 4 {
                return Err(Error::shape("gather expects [C,D,H,W] levels"));
            }
            let dims = v.spatial();
            for c in coords {
                if (0..3).any(|a| (c[a] >> s) >= dims[a]) {
                    return Err(Error::invalid(format!(
                        "coordinate {c:?} outside level {s} of size {dims:?}"
                    )));
                }
            }
            width += v.channels();
        }
        let n = coords.len();
        let mut out = vec![T::zero(); n * width];
        let mut offset = 0;
        for (s, &l) in levels.iter().enumerate() {
            let v = self.value(l);
            let ch = v.channels();
            let [d, h, w] = v.spatial();
            let vol = d * h * w;
            for (i, c) in coords.iter().enumerate() {
                let idx = ((c[0] >> s) * h + (c[1] >> s)) * w + (c[2] >> s);
                for k in 0..ch {
                    out[i * width + offset + k] = v.data()[k * vol + idx];
                }
            }
            offset += ch;
        }
        let t = Tensor::from_vec(&[n, width], out);
        Ok(self.push(
            Op::Gather {
                levels: levels.to_vec(),
                coords: coords.to_vec(),
            },
            t,
            levels,
        ))
    }

    /// Channel concatenation of `[C_i, D, H, W]` grids with equal spatial size.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let dims = self.value(xs[0]).spatial();
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let v = self.value(x);
            if v.spatial() != dims {
                return Err(Error::shape("concat_channels spatial mismatch"));
            }
            c += v.channels();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], data);
        Ok(self.push(Op::ConcatChannels(xs.to_vec()), t, xs))
    }

    /// `x w^T + b` for rows `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape(format!(
                "linear {:?} x {:?}^T",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(n, i, o, xv.data(), false, wv.data(), true, T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let t = Tensor::from_vec(&[n, o], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear { x, w, b }, t, &inputs))
    }

    /// Row-wise `h / sqrt(|h|^2 + eps)`.
    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let e = xv.shape()[1];
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(e) {
            let r = (row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() + eps).sqrt();
            for v in row.iter_mut() {
                *v = T::from_f64(v.as_f64() / r);
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(Op::NormalizeRows { x, eps }, t, &[x])
    }

    /// Symmetrised InfoNCE between paired rows, see [`loss_kernels::info_nce`].
    pub fn info_nce(&mut self, za: NodeId, zb: NodeId, tau: f64, scale: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(za), self.value(zb));
        if av.shape() != bv.shape() || av.shape().len() != 2 {
            return Err(Error::shape("info_nce expects equal [n, e] inputs"));
        }
        let (n, e) = (av.shape()[0], av.shape()[1]);
        let (loss, _) = loss_kernels::info_nce(av.data(), bv.data(), n, e, tau, scale, false);
        Ok(self.push(
            Op::InfoNce { za, zb, tau, scale },
            Tensor::scalar(T::from_f64(loss)),
            &[za, zb],
        ))
    }

    /// Mean squared error against a constant target with the same element count.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let pv = self.value(pred);
        let tv = self.value(target).clone();
        if pv.numel() != tv.numel() {
            return Err(Error::shape(format!(
                "mse {:?} vs {:?}",
                pv.shape(),
                tv.shape()
            )));
        }
        let loss = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&p, &t)| (p.as_f64() - t.as_f64()).powi(2))
            .sum::<f64>()
            / pv.numel() as f64;
        Ok(self.push(
            Op::Mse { pred, target: tv },
            Tensor::scalar(T::from_f64(loss)),
            &[pred],
        ))
    }

    /// Mean voxelwise cross-entropy of `[K, D, H, W]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
        let lv = self.value(logits);
        let k = lv.channels();
        if lv.numel() != k * labels.len() {
            return Err(Error::shape("cross_entropy label count differs from logits"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::invalid(format!("label {bad} >= {k} classes")));
        }
        let (loss, _) = loss_kernels::cross_entropy(lv.data(), labels, k, false);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(T::from_f64(loss)),
            &[logits],
        ))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v: f64 = terms
            .iter()
            .map(|&(id, w)| w * self.value(id).item().as_f64())
            .sum();
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(
            Op::WeightedSum(terms.to_vec()),
            Tensor::scalar(T::from_f64(v)),
            &inputs,
        )
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from the scalar `root`.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        let mut out = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::from_vec(
            self.value(root).shape(),
            vec![T::one(); self.value(root).numel()],
        ));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let ng = |i: NodeId| self.nodes[i].needs_grad;
            match &node.op {
                Op::Constant => {}
                Op::Variable => {
                    out.variables.insert(id, g);
                }
                Op::Param(pid) => out.params[*pid] = Some(g),
                Op::Conv { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let cin = xv.channels();
                    let cout = wv.shape()[0];
                    let dims = xv.spatial();
                    let od = geom.out_dims(dims).unwrap();
                    let ov = od.iter().product::<usize>();
                    let dy = g.data();
                    if let Some(b) = b {
                        if ng(*b) {
                            let db: Vec<T> = dy.chunks(ov).map(|c| c.iter().copied().sum()).collect();
                            Self::accumulate(&mut grads, *b, Tensor::from_vec(&[cout], db));
                        }
                    }
                    let shape = ConvShape {
                        cin,
                        cout,
                        dims,
                        od,
                        geom: *geom,
                    };
                    let mut dw = ng(*w).then(|| vec![T::zero(); wv.numel()]);
                    let mut dx = ng(*x).then(|| vec![T::zero(); xv.numel()]);
                    conv_backward(xv.data(), wv.data(), shape, dy, dw.as_deref_mut(), dx.as_deref_mut());
                    if let Some(dw) = dw {
                        Self::accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), dw));
                    }
                    if let Some(dx) = dx {
                        Self::accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                    }
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if ng(*b) {
                        Self::accumulate(&mut grads, *b, g);
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let dx = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| {
                            let s = sigmoid(v);
                            gy * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    Self::accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::UpsampleNearest2(x) => {
                    let xv = self.value(*x);
                    let c = xv.channels();
                    let [d, h, w] = xv.spatial();
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![T::zero(); xv.numel()];
                    let gd = g.data();
                    for ch in 0..c {
                        for z in 0..2 * d {
                            for y in 0..oh {
                                let src = &gd[((ch * 2 * d + z) * oh + y) * ow..][..ow];
                                let dst = &mut dx[((ch * d + z / 2) * h + y / 2) * w..][..w];
                                for (x2, &v) in src.iter().enumerate() {
                                    dst[x2 / 2] += v;
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::Trilinear { x, taps } => {
                    let xv = self.value(*x);
                    let from = xv.spatial();
                    let mut shape = g.shape().to_vec();
                    let mut data = g.into_data();
                    for a in (0..3).rev() {
                        data = resample_axis_adjoint(&data, &shape, a + 1, from[a], &taps[a]);
                        shape[a + 1] = from[a];
                    }
                    Self::accumulate(&mut grads, *x, Tensor::from_vec(&shape, data));
                }
                Op::Gather { levels, coords } => {
                    let width = g.shape()[1];
                    let gd = g.data();
                    let mut offset = 0;
                    for (s, &l) in levels.iter().enumerate() {
                        let v = self.value(l);
                        let ch = v.channels();
                        if ng(l) {
                            let [_, h, w] = v.spatial();
                            let vol = v.numel() / ch;
                            let mut dl = vec![T::zero(); v.numel()];
                            for (i, c) in coords.iter().enumerate() {
                                let idx = ((c[0] >> s) * h + (c[1] >> s)) * w + (c[2] >> s);
                                for k in 0..ch {
                                    dl[k * vol + idx] += gd[i * width + offset + k];
                                }
                            }
                            Self::accumulate(&mut grads, l, Tensor::from_vec(v.shape(), dl));
                        }
                        offset += ch;
                    }
                }
                Op::ConcatChannels(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let v = self.value(x);
                        let n = v.numel();
                        if ng(x) {
                            let part = g.data()[offset..offset + n].to_vec();
                            Self::accumulate(&mut grads, x, Tensor::from_vec(v.shape(), part));
                        }
                        offset += n;
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    let dy = g.data();
                    if ng(*x) {
                        let mut dx = vec![T::zero(); n * i];
                        gemm(n, o, i, dy, false, wv.data(), false, T::zero(), &mut dx);
                        Self::accumulate(&mut grads, *x, Tensor::from_vec(&[n, i], dx));
                    }
                    if ng(*w) {
                        let mut dw = vec![T::zero(); o * i];
                        gemm(o, n, i, dy, true, xv.data(), false, T::zero(), &mut dw);
                        Self::accumulate(&mut grads, *w, Tensor::from_vec(&[o, i], dw));
                    }
                    if let Some(b) = b {
                        if ng(*b) {
                            let mut db = vec![T::zero(); o];
                            for row in dy.chunks(o) {
                                for (d, &v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                            Self::accumulate(&mut grads, *b, Tensor::from_vec(&[o], db));
                        }
                    }
                }
                Op::NormalizeRows { x, eps } => {
                    let xv = self.value(*x);
                    let e = xv.shape()[1];
                    let mut dx = vec![T::zero(); xv.numel()];
                    for ((h, gy), d) in xv
                        .data()
                        .chunks(e)
                        .zip(g.data().chunks(e))
                        .zip(dx.chunks_mut(e))
                    {
                        let r2 = h.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() + eps;
                        let r = r2.sqrt();
                        let hg: f64 = h.iter().zip(gy).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for ((dv, &hv), &gv) in d.iter_mut().zip(h).zip(gy) {
                            *dv = T::from_f64(gv.as_f64() / r - hv.as_f64() * hg / (r2 * r));
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                Op::InfoNce { za, zb, tau, scale } => {
                    let (av, bv) = (self.value(*za), self.value(*zb));
                    let (n, e) = (av.shape()[0], av.shape()[1]);
                    let up = g.item();
                    let (_, gr) =
                        loss_kernels::info_nce(av.data(), bv.data(), n, e, *tau, *scale, true);
                    let (mut da, mut db) = gr.unwrap();
                    for v in da.iter_mut().chain(db.iter_mut()) {
                        *v *= up;
                    }
                    if ng(*za) {
                        Self::accumulate(&mut grads, *za, Tensor::from_vec(&[n, e], da));
                    }
                    if ng(*zb) {
                        Self::accumulate(&mut grads, *zb, Tensor::from_vec(&[n, e], db));
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let k = T::from_f64(2.0 / pv.numel() as f64) * g.item();
                    let dp = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| k * (p - t))
                        .collect();
                    Self::accumulate(&mut grads, *pred, Tensor::from_vec(pv.shape(), dp));
                }
                Op::CrossEntropy { logits, labels } => {
                    let lv = self.value(*logits);
                    let (_, gr) = loss_kernels::cross_entropy(lv.data(), labels, lv.channels(), true);
                    let mut dl = Tensor::from_vec(lv.shape(), gr.unwrap());
                    dl.scale(g.item());
                    Self::accumulate(&mut grads, *logits, dl);
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        if ng(t) {
                            let v = T::from_f64(w) * g.item();
                            Self::accumulate(&mut grads, t, Tensor::scalar(v));
                        }
                    }
                }
            }
        }
        out
    }
}
