//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters are pulled in
//! from a [`ParamStore`] by name; asking for the same name twice returns the
//! same [`Var`], so a parameter used in several places accumulates gradient
//! from all of them. No op mutates its inputs.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, GroupStats, PoolKind};
use super::{ParamStore, Shape, Tensor};
use crate::error::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Deliberate defects used to prove that the verification machinery notices
/// broken gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// ReLU passes gradient through where its input was negative.
    pub broken_relu_backward: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats,
    },
    Relu(Var),
    Add(Var, Var),
    Softmax(Var),
    Mix {
        parts: Vec<Var>,
        weights: Var,
    },
    Concat(Vec<Var>),
    Pool {
        x: Var,
        stride: usize,
        kind: PoolKind,
        arg: Vec<usize>,
    },
    Subsample {
        x: Var,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    /// Scalar with gradients precomputed at forward time.
    Fused {
        name: &'static str,
        inputs: Vec<Var>,
        local: Vec<Vec<f32>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Softmax(_) => "softmax",
            Op::Mix { .. } => "mix",
            Op::Concat(_) => "concat",
            Op::Pool { kind: PoolKind::Max, .. } => "max_pool",
            Op::Pool { kind: PoolKind::Avg, .. } => "avg_pool",
            Op::Subsample { .. } => "subsample",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Sum(_) => "sum",
            Op::Fused { name, .. } => name,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every recorded leaf reachable from the loss.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.by_var.get(&v).map(Vec::as_slice)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    leaf_names: HashMap<Var, String>,
    faults: Faults,
    conv_count: usize,
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_faults(faults: Faults) -> Self {
        Tape {
            faults,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `conv2d` ops recorded so far.
    pub fn conv_count(&self) -> usize {
        self.conv_count
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers (once) and returns the parameter `name` from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, TensorError> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        let v = self.push(Tensor::new(t.shape(), t.data().to_vec())?, Op::Leaf);
        self.params.insert(name.to_string(), v);
        self.leaf_names.insert(v, name.to_string());
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bad = |msg: String| Err(TensorError::InvalidArgument(format!("conv2d: {msg}")));
        if groups == 0 || !xs.c().is_multiple_of(groups) {
            return bad(format!("groups {groups} must divide input channels {}", xs.c()));
        }
        if !ws.n().is_multiple_of(groups) {
            return bad(format!("groups {groups} must divide output channels {}", ws.n()));
        }
        if ws.c() * groups != xs.c() {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if ws.h() != ws.w() || !(ws.h() == 1 || ws.h() == 3) {
            return bad(format!("kernel must be 1x1 or 3x3, got {}x{}", ws.h(), ws.w()));
        }
        if !(1..=3).contains(&dilation) {
            return bad(format!("dilation must be 1, 2 or 3, got {dilation}"));
        }
        if stride == 0 {
            return bad("stride must be positive".into());
        }
        if let Some(b) = b {
            if self.shape(b).numel() != ws.n() {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: ws,
                    right: self.shape(b),
                });
            }
        }
        let geom = ConvGeom {
            stride,
            dilation,
            groups,
        };
        let (data, ys) = kernels::conv2d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            ws,
            b.map(|b| self.value(b).data()),
            geom,
        );
        self.conv_count += 1;
        let t = Tensor::new(ys, data)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if groups == 0 || groups > xs.c() || !xs.c().is_multiple_of(groups) {
            return Err(TensorError::InvalidArgument(format!(
                "group_norm: {groups} groups incompatible with {} channels",
                xs.c()
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "group_norm: eps must be positive, got {eps}"
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p).numel() != xs.c() {
                return Err(TensorError::ShapeMismatch {
                    op: "group_norm affine",
                    left: xs,
                    right: self.shape(p),
                });
            }
        }
        let (data, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            xs,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = Tensor::new(xs, data)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|a| a.max(0.0)).collect())
            .expect("same shape");
        self.push(t, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b)))
    }

    /// Softmax over all elements of `x` (treated as a flat vector).
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let logits: Vec<f64> = v.data().iter().map(|a| *a as f64).collect();
        let probs = super::softmax(&logits)?;
        let t = Tensor::new(v.shape(), probs.into_iter().map(|p| p as f32).collect())?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// `sum_i weights[i] * parts[i]`; `weights` must hold one element per part.
    pub fn mix(&mut self, parts: &[Var], weights: Var) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("mix"))?;
        let shape = self.shape(first);
        let ws = self.shape(weights);
        if ws.numel() != parts.len() {
            return Err(TensorError::InvalidArgument(format!(
                "mix: {} weights for {} parts",
                ws.numel(),
                parts.len()
            )));
        }
        let mut out = vec![0.0f32; shape.numel()];
        for (i, p) in parts.iter().enumerate() {
            if self.shape(*p) != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "mix",
                    left: shape,
                    right: self.shape(*p),
                });
            }
            let wv = self.value(weights).data()[i];
            for (o, x) in out.iter_mut().zip(self.value(*p).data()) {
                *o += wv * x;
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Mix {
                parts: parts.to_vec(),
                weights,
            },
        ))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(*parts.first().ok_or(TensorError::Empty("concat"))?);
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s,
                });
            }
            channels += s.c();
        }
        let out_shape = Shape::new(first.n(), channels, first.h(), first.w());
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n() {
            for p in parts {
                let v = self.value(*p);
                let per = v.shape().c() * v.shape().plane();
                out.extend_from_slice(&v.data()[n * per..(n + 1) * per]);
            }
        }
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat(parts.to_vec())))
    }

    pub fn pool3x3(&mut self, x: Var, stride: usize, kind: PoolKind) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument("pool: stride must be positive".into()));
        }
        let v = self.value(x);
        let (data, ys, arg) = kernels::pool3x3_forward(v.data(), v.shape(), stride, kind);
        Ok(self.push(
            Tensor::new(ys, data)?,
            Op::Pool {
                x,
                stride,
                kind,
                arg,
            },
        ))
    }

    /// Keeps every `stride`-th row and column.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument(
                "subsample: stride must be positive".into(),
            ));
        }
        let v = self.value(x);
        let s = v.shape();
        let ys = Shape::new(s.n(), s.c(), s.h().div_ceil(stride), s.w().div_ceil(stride));
        let mut out = Vec::with_capacity(ys.numel());
        for nc in 0..s.n() * s.c() {
            for oy in 0..ys.h() {
                for ox in 0..ys.w() {
                    out.push(v.data()[nc * s.plane() + oy * stride * s.w() + ox * stride]);
                }
            }
        }
        Ok(self.push(Tensor::new(ys, out)?, Op::Subsample { x, stride }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let plane = s.plane();
        let out: Vec<f32> = v
            .data()
            .chunks(plane)
            .map(|c| (c.iter().map(|a| *a as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let t = Tensor::new(Shape::new(s.n(), s.c(), 1, 1), out).expect("pooled shape");
        self.push(t, Op::GlobalAvgPool(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|a| *a as f64).sum::<f64>();
        self.push(Tensor::full(Shape::scalar(), total as f32), Op::Sum(x))
    }

    /// Records a scalar whose derivative with respect to each input is known
    /// up front. `local[i]` must be shaped like `inputs[i]`.
    pub fn fused_scalar(
        &mut self,
        name: &'static str,
        value: f64,
        inputs: Vec<Var>,
        local: Vec<Vec<f32>>,
    ) -> Result<Var, TensorError> {
        if inputs.len() != local.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{name}: {} inputs but {} local gradients",
                inputs.len(),
                local.len()
            )));
        }
        for (v, g) in inputs.iter().zip(&local) {
            if self.shape(*v).numel() != g.len() {
                return Err(TensorError::InvalidArgument(format!(
                    "{name}: local gradient length {} for input of shape {}",
                    g.len(),
                    self.shape(*v)
                )));
            }
        }
        Ok(self.push(
            Tensor::full(Shape::scalar(), value as f32),
            Op::Fused {
                name,
                inputs,
                local,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, TensorError> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(TensorError::NotScalar(ls));
        }
        let lv = self.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "loss value at node #{} ({})",
                loss.0,
                self.nodes[loss.0].op.name()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite(format!(
                    "gradient at node #{i} ({})",
                    self.nodes[i].op.name()
                )));
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                out.by_var.insert(Var(i), g);
            }
        }
        Ok(out)
    }

    /// Writes gradients into `store`; parameters the loss does not touch get
    /// zeros.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (v, name) in &self.leaf_names {
            if let Some(g) = grads.get(*v) {
                store.get_mut(name)?.set_grad(g.to_vec())?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (dx, dw, db) = kernels::conv2d_backward(
                    xv.data(),
                    xv.shape(),
                    wv.data(),
                    wv.shape(),
                    g,
                    node.value.shape(),
                    *geom,
                    b.is_some(),
                );
                add_into(&mut grads[x.0], &dx);
                add_into(&mut grads[w.0], &dw);
                if let (Some(b), Some(db)) = (b, db) {
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xv = self.value(*x);
                let (dx, dg, db) = kernels::group_norm_backward(
                    xv.data(),
                    xv.shape(),
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                    g,
                );
                add_into(&mut grads[x.0], &dx);
                add_into(&mut grads[gamma.0], &dg);
                add_into(&mut grads[beta.0], &db);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx: Vec<f32> = if self.faults.broken_relu_backward {
                    g.to_vec()
                } else {
                    g.iter()
                        .zip(xv)
                        .map(|(gv, a)| if *a > 0.0 { *gv } else { 0.0 })
                        .collect()
                };
                add_into(&mut grads[x.0], &dx);
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], g);
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let dot: f64 = s.iter().zip(g).map(|(a, b)| *a as f64 * *b as f64).sum();
                let dx: Vec<f32> = s
                    .iter()
                    .zip(g)
                    .map(|(sv, gv)| (*sv as f64 * (*gv as f64 - dot)) as f32)
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Mix { parts, weights } => {
                let wv = self.value(*weights).data();
                let mut dw = vec![0.0f32; parts.len()];
                for (k, p) in parts.iter().enumerate() {
                    let pv = self.value(*p).data();
                    dw[k] = pv
                        .iter()
                        .zip(g)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum::<f64>() as f32;
                    let dp: Vec<f32> = g.iter().map(|gv| gv * wv[k]).collect();
                    add_into(&mut grads[p.0], &dp);
                }
                add_into(&mut grads[weights.0], &dw);
            }
            Op::Concat(parts) => {
                let n = node.value.shape().n();
                let mut offset = 0;
                let per_total = node.value.shape().c() * node.value.shape().plane();
                for p in parts {
                    let s = self.shape(*p);
                    let per = s.c() * s.plane();
                    let mut dp = Vec::with_capacity(s.numel());
                    for b in 0..n {
                        dp.extend_from_slice(&g[b * per_total + offset..][..per]);
                    }
                    offset += per;
                    add_into(&mut grads[p.0], &dp);
                }
            }
            Op::Pool {
                x,
                stride,
                kind,
                arg,
            } => {
                let dx = kernels::pool3x3_backward(
                    self.shape(*x),
                    node.value.shape(),
                    *stride,
                    *kind,
                    arg,
                    g,
                );
                add_into(&mut grads[x.0], &dx);
            }
            Op::Subsample { x, stride } => {
                let s = self.shape(*x);
                let ys = node.value.shape();
                let mut dx = vec![0.0f32; s.numel()];
                let mut k = 0;
                for nc in 0..s.n() * s.c() {
                    for oy in 0..ys.h() {
                        for ox in 0..ys.w() {
                            dx[nc * s.plane() + oy * stride * s.w() + ox * stride] += g[k];
                            k += 1;
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s.plane();
                let scale = 1.0 / plane as f32;
                let dx: Vec<f32> = (0..s.numel()).map(|i| g[i / plane] * scale).collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.shape(*x).numel()];
                add_into(&mut grads[x.0], &dx);
            }
            Op::Fused { inputs, local, .. } => {
                for (v, lg) in inputs.iter().zip(local) {
                    let dx: Vec<f32> = lg.iter().map(|a| a * g[0]).collect();
                    add_into(&mut grads[v.0], &dx);
                }
            }
        }
    }
}
