use std::f64::consts::LN_10;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside every normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics support of a mean/variance normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// One mean/variance per time step, taken across channels.
    Channel,
    /// A single mean/variance over all channels and time steps.
    Global,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        w: Var,
        x: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv1d {
        x: Var,
        k: Var,
        width: usize,
        stride: usize,
    },
    ConvTranspose1d {
        x: Var,
        basis: Var,
        stride: usize,
    },
    Depthwise {
        x: Var,
        k: Var,
        dilation: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        kind: NormKind,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Var, Var),
    Repeat(Var),
    TrimCols(Var),
    Sum(Var),
    NegSiSdr {
        est: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of executed operations; node order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is kept by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `w (out × in) · x (in × time)`.
    pub fn matmul(&mut self, w: Var, x: Var) -> Result<Var> {
        let (o, i) = self.shape(w);
        let (xi, t) = self.shape(x);
        if i != xi {
            return Err(Error::shape("matmul", format!("{o}x{i} · {xi}x{t}")));
        }
        let mut out = Tensor::zeros(o, t);
        gemm(o, i, t, self.value(w).data(), false, self.value(x).data(), false, 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMul { w, x }, &[w, x]))
    }

    /// Adds a per-row bias column `b (rows × 1)` to every column of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(b) != (r, 1) {
            return Err(Error::shape("add_bias", format!("{:?} bias for {r}x{c}", self.shape(b))));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (row, bv) in out.data_mut().chunks_exact_mut(c.max(1)).zip(&bias) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// Per-timestep affine map across channels.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(w, x)?;
        self.add_bias(y, b)
    }

    /// Dense layer on a column vector.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(x).1 != 1 {
            return Err(Error::shape("dense", "input must be a column vector"));
        }
        self.pointwise_conv(x, w, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(r, c, data)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.shape(x);
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(Tensor::new(r, cols, data).unwrap(), Op::Scale(x, c), &[x])
    }

    /// Valid cross-correlation: `x (c_in × T)`, `k (c_out × c_in·width)`.
    pub fn conv1d(&mut self, x: Var, k: Var, width: usize, stride: usize) -> Result<Var> {
        let (c_in, t) = self.shape(x);
        let (c_out, kw) = self.shape(k);
        if width == 0 || stride == 0 || kw != c_in * width {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {c_out}x{kw} for {c_in} channels, width {width}, stride {stride}"),
            ));
        }
        if t < width {
            return Err(Error::shape("conv1d", format!("time {t} < width {width}")));
        }
        let t_out = (t - width) / stride + 1;
        let cols = im2col(self.value(x), width, stride, t_out);
        let mut out = Tensor::zeros(c_out, t_out);
        gemm(c_out, c_in * width, t_out, self.value(k).data(), false, &cols, false, 0.0, out.data_mut());
        Ok(self.push(out, Op::Conv1d { x, k, width, stride }, &[x, k]))
    }

    /// Overlap-add of basis rows weighted by `x (c_in × frames)`; adjoint of
    /// [`Graph::conv1d`] with one input channel.
    pub fn conv_transpose1d(&mut self, x: Var, basis: Var, stride: usize) -> Result<Var> {
        let (c_in, frames) = self.shape(x);
        let (bc, width) = self.shape(basis);
        if bc != c_in || stride == 0 || frames == 0 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("basis {bc}x{width} for input {c_in}x{frames}, stride {stride}"),
            ));
        }
        let len = (frames - 1) * stride + width;
        let mut cols = vec![0.0; width * frames];
        gemm(width, c_in, frames, self.value(basis).data(), true, self.value(x).data(), false, 0.0, &mut cols);
        let mut out = vec![0.0; len];
        for l in 0..width {
            let row = &cols[l * frames..(l + 1) * frames];
            for (f, v) in row.iter().enumerate() {
                out[f * stride + l] += v;
            }
        }
        Ok(self.push(Tensor::row(out), Op::ConvTranspose1d { x, basis, stride }, &[x, basis]))
    }

    /// Per-channel dilated convolution with symmetric zero padding; time length preserved.
    pub fn depthwise_conv1d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (c, t) = self.shape(x);
        let (kc, width) = self.shape(k);
        if kc != c {
            return Err(Error::shape("depthwise_conv1d", format!("{kc} kernels for {c} channels")));
        }
        if width % 2 == 0 {
            return Err(Error::shape("depthwise_conv1d", format!("kernel width {width} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::shape("depthwise_conv1d", "dilation must be >= 1"));
        }
        let mut out = Tensor::zeros(c, t);
        {
            let xv = self.value(x).data();
            let kv = self.value(k).data();
            let o = out.data_mut();
            for ch in 0..c {
                let xr = &xv[ch * t..(ch + 1) * t];
                let orow = &mut o[ch * t..(ch + 1) * t];
                for j in 0..width {
                    let w = kv[ch * width + j];
                    let (dst, src) = tap_ranges(j, width, dilation, t);
                    for (ov, xv) in orow[dst].iter_mut().zip(&xr[src]) {
                        *ov += w * xv;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Depthwise { x, k, dilation }, &[x, k]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        self.push(Tensor::new(r, c, data).unwrap(), Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        self.push(Tensor::new(r, c, data).unwrap(), Op::Sigmoid(x), &[x])
    }

    /// Parametric ReLU with one slope per channel (`slope: rows × 1`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(slope) != (r, 1) {
            return Err(Error::shape("prelu", format!("{:?} slopes for {r} channels", self.shape(slope))));
        }
        let a = self.value(slope).data();
        let mut out = self.value(x).clone();
        for (row, &s) in out.data_mut().chunks_exact_mut(c.max(1)).zip(a) {
            row.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::Prelu { x, slope }, &[x, slope]))
    }

    /// Mean/variance normalization with per-channel gain and bias (`rows × 1`).
    pub fn norm(&mut self, x: Var, gain: Var, bias: Var, kind: NormKind) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 || self.shape(gain) != (r, 1) || self.shape(bias) != (r, 1) {
            return Err(Error::shape("norm", format!("gain/bias must be {r}x1")));
        }
        let xv = self.value(x).data();
        let (normed, inv_std) = match kind {
            NormKind::Channel => channel_stats(xv, r, c),
            NormKind::Global => global_stats(xv),
        };
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(r * c);
        for ch in 0..r {
            out.extend(normed[ch * c..(ch + 1) * c].iter().map(|n| n * g[ch] + b[ch]));
        }
        let out = Tensor::new(r, c, out)?;
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gain,
                bias,
                kind,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn channelwise_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.norm(x, gain, bias, NormKind::Channel)
    }

    pub fn global_layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.norm(x, gain, bias, NormKind::Global)
    }

    /// Stacks `a` over `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ta) = self.shape(a);
        let (rb, tb) = self.shape(b);
        if ta != tb {
            return Err(Error::shape("concat_channels", format!("time {ta} vs {tb}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(ra + rb, ta, data)?, Op::Concat(a, b), &[a, b]))
    }

    /// Tiles a column vector across `time` columns.
    pub fn repeat_vector(&mut self, v: Var, time: usize) -> Result<Var> {
        let (d, c) = self.shape(v);
        if c != 1 {
            return Err(Error::shape("repeat_vector", "input must be a column vector"));
        }
        let data = self
            .value(v)
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, time))
            .collect();
        Ok(self.push(Tensor::new(d, time, data)?, Op::Repeat(v), &[v]))
    }

    /// First `len` columns.
    pub fn trim_cols(&mut self, x: Var, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len > c {
            return Err(Error::shape("trim_cols", format!("{len} > {c} columns")));
        }
        let src = self.value(x);
        let data = (0..r).flat_map(|i| src.row_slice(i)[..len].iter().copied()).collect();
        Ok(self.push(Tensor::new(r, len, data)?, Op::TrimCols(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Negative scale-invariant SDR (dB) of `est` against a constant target,
    /// both zero-meaned; uncapped.
    pub fn neg_si_sdr(&mut self, est: Var, target: &[f64]) -> Result<Var> {
        let e = self.value(est).data();
        if e.len() != target.len() || e.len() < 2 {
            return Err(Error::shape(
                "neg_si_sdr",
                format!("estimate of {} samples vs target of {}", e.len(), target.len()),
            ));
        }
        let target = zero_mean(target);
        let tt: f64 = target.iter().map(|v| v * v).sum();
        if tt <= 0.0 {
            return Err(Error::invalid("SI-SDR reference has zero power after mean removal"));
        }
        let parts = SiSdrParts::new(&zero_mean(e), &target, tt);
        let loss = -parts.db();
        Ok(self.push(Tensor::scalar(loss), Op::NegSiSdr { est, target }, &[est]))
    }

    /// Hash of the sign pattern of every ReLU/PReLU input on the tape. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu(x) | Op::Prelu { x, .. } => x,
                _ => continue,
            };
            for chunk in self.value(x).data().chunks(64) {
                let bits = chunk.iter().enumerate().fold(0u64, |b, (i, v)| b | (u64::from(*v > 0.0) << i));
                h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", format!("loss has shape {:?}, expected scalar", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { w, x } => {
                let (o, i) = val(*w).shape();
                let t = val(*x).cols();
                if needs(*w) {
                    let dw = grad_slot(grads, *w, (o, i));
                    gemm(o, t, i, g.data(), false, val(*x).data(), true, 1.0, dw.data_mut());
                }
                if needs(*x) {
                    let dx = grad_slot(grads, *x, (i, t));
                    gemm(i, o, t, val(*w).data(), true, g.data(), false, 1.0, dx.data_mut());
                }
            }
            Op::AddBias { x, b } => {
                let (r, c) = g.shape();
                if needs(*b) {
                    let db = grad_slot(grads, *b, (r, 1));
                    for (slot, row) in db.data_mut().iter_mut().zip(g.data().chunks_exact(c.max(1))) {
                        *slot += row.iter().sum::<f64>();
                    }
                }
                if needs(*x) {
                    grad_slot(grads, *x, (r, c)).add_assign(g);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        grad_slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let o = val(other).data();
                        let slot = grad_slot(grads, v, g.shape());
                        for ((s, gv), ov) in slot.data_mut().iter_mut().zip(g.data()).zip(o) {
                            *s += gv * ov;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let slot = grad_slot(grads, *x, g.shape());
                    for (s, gv) in slot.data_mut().iter_mut().zip(g.data()) {
                        *s += gv * c;
                    }
                }
            }
            Op::Conv1d { x, k, width, stride } => {
                let (c_in, t) = val(*x).shape();
                let (c_out, kw) = val(*k).shape();
                let t_out = g.cols();
                let cols = im2col(val(*x), *width, *stride, t_out);
                if needs(*k) {
                    let dk = grad_slot(grads, *k, (c_out, kw));
                    gemm(c_out, t_out, kw, g.data(), false, &cols, true, 1.0, dk.data_mut());
                }
                if needs(*x) {
                    let mut dcols = vec![0.0; kw * t_out];
                    gemm(kw, c_out, t_out, val(*k).data(), true, g.data(), false, 0.0, &mut dcols);
                    let dx = grad_slot(grads, *x, (c_in, t));
                    col2im_add(&dcols, dx, *width, *stride, t_out);
                }
            }
            Op::ConvTranspose1d { x, basis, stride } => {
                let (c_in, frames) = val(*x).shape();
                let width = val(*basis).cols();
                let gd = g.data();
                let mut dcols = vec![0.0; width * frames];
                for l in 0..width {
                    for f in 0..frames {
                        dcols[l * frames + f] = gd[f * stride + l];
                    }
                }
                if needs(*x) {
                    let dx = grad_slot(grads, *x, (c_in, frames));
                    gemm(c_in, width, frames, val(*basis).data(), false, &dcols, false, 1.0, dx.data_mut());
                }
                if needs(*basis) {
                    let db = grad_slot(grads, *basis, (c_in, width));
                    gemm(c_in, frames, width, val(*x).data(), false, &dcols, true, 1.0, db.data_mut());
                }
            }
            Op::Depthwise { x, k, dilation } => {
                let (c, t) = val(*x).shape();
                let width = val(*k).cols();
                let gd = g.data();
                if needs(*k) {
                    let xv = val(*x).data();
                    let dk = grad_slot(grads, *k, (c, width));
                    let dkd = dk.data_mut();
                    for ch in 0..c {
                        let xr = &xv[ch * t..(ch + 1) * t];
                        let gr = &gd[ch * t..(ch + 1) * t];
                        for j in 0..width {
                            let (dst, src) = tap_ranges(j, width, *dilation, t);
                            dkd[ch * width + j] +=
                                gr[dst].iter().zip(&xr[src]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if needs(*x) {
                    let kv = val(*k).data();
                    let dx = grad_slot(grads, *x, (c, t));
                    let dxd = dx.data_mut();
                    for ch in 0..c {
                        let gr = &gd[ch * t..(ch + 1) * t];
                        let dr = &mut dxd[ch * t..(ch + 1) * t];
                        for j in 0..width {
                            let w = kv[ch * width + j];
                            let (dst, src) = tap_ranges(j, width, *dilation, t);
                            for (d, gv) in dr[src].iter_mut().zip(&gr[dst]) {
                                *d += w * gv;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xv = val(*x).data();
                    let slot = grad_slot(grads, *x, g.shape());
                    for ((s, gv), xv) in slot.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *xv > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = node.value.data();
                    let slot = grad_slot(grads, *x, g.shape());
                    for ((s, gv), y) in slot.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *s += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Prelu { x, slope } => {
                let (r, c) = val(*x).shape();
                let xv = val(*x).data();
                let a = val(*slope).data();
                if needs(*slope) {
                    let ds = grad_slot(grads, *slope, (r, 1));
                    for (ch, d) in ds.data_mut().iter_mut().enumerate() {
                        let row = ch * c..(ch + 1) * c;
                        *d += xv[row.clone()]
                            .iter()
                            .zip(&g.data()[row])
                            .filter(|(x, _)| **x <= 0.0)
                            .map(|(x, g)| x * g)
                            .sum::<f64>();
                    }
                }
                if needs(*x) {
                    let dx = grad_slot(grads, *x, (r, c));
                    let dxd = dx.data_mut();
                    for ch in 0..r {
                        for i in ch * c..(ch + 1) * c {
                            dxd[i] += if xv[i] > 0.0 { g.data()[i] } else { a[ch] * g.data()[i] };
                        }
                    }
                }
            }
            Op::Norm {
                x,
                gain,
                bias,
                kind,
                normed,
                inv_std,
            } => {
                let (r, c) = val(*x).shape();
                let gd = g.data();
                if needs(*gain) {
                    let dg = grad_slot(grads, *gain, (r, 1));
                    for (ch, d) in dg.data_mut().iter_mut().enumerate() {
                        let row = ch * c..(ch + 1) * c;
                        *d += gd[row.clone()].iter().zip(&normed[row]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if needs(*bias) {
                    let db = grad_slot(grads, *bias, (r, 1));
                    for (ch, d) in db.data_mut().iter_mut().enumerate() {
                        *d += gd[ch * c..(ch + 1) * c].iter().sum::<f64>();
                    }
                }
                if needs(*x) {
                    let gain_v = val(*gain).data();
                    let dn: Vec<f64> = (0..r * c).map(|i| gd[i] * gain_v[i / c]).collect();
                    let dx = grad_slot(grads, *x, (r, c));
                    norm_backward(*kind, &dn, normed, inv_std, r, c, dx.data_mut());
                }
            }
            Op::Concat(a, b) => {
                let ra = val(*a).rows();
                let t = g.cols();
                let (ga, gb) = g.data().split_at(ra * t);
                if needs(*a) {
                    let slot = grad_slot(grads, *a, (ra, t));
                    slot.data_mut().iter_mut().zip(ga).for_each(|(s, v)| *s += v);
                }
                if needs(*b) {
                    let slot = grad_slot(grads, *b, (g.rows() - ra, t));
                    slot.data_mut().iter_mut().zip(gb).for_each(|(s, v)| *s += v);
                }
            }
            Op::Repeat(v) => {
                if needs(*v) {
                    let t = g.cols();
                    let slot = grad_slot(grads, *v, (g.rows(), 1));
                    for (s, row) in slot.data_mut().iter_mut().zip(g.data().chunks_exact(t.max(1))) {
                        *s += row.iter().sum::<f64>();
                    }
                }
            }
            Op::TrimCols(x) => {
                if needs(*x) {
                    let (r, c) = val(*x).shape();
                    let len = g.cols();
                    let slot = grad_slot(grads, *x, (r, c));
                    for i in 0..r {
                        let dst = &mut slot.data_mut()[i * c..i * c + len];
                        dst.iter_mut().zip(g.row_slice(i)).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let gv = g.item();
                    let slot = grad_slot(grads, *x, val(*x).shape());
                    slot.data_mut().iter_mut().for_each(|s| *s += gv);
                }
            }
            Op::NegSiSdr { est, target } => {
                if needs(*est) {
                    let e = zero_mean(val(*est).data());
                    let tt: f64 = target.iter().map(|v| v * v).sum();
                    let parts = SiSdrParts::new(&e, target, tt);
                    let gv = g.item();
                    let mut d: Vec<f64> = parts.grad_db(&e, target).into_iter().map(|v| -v * gv).collect();
                    let mean = d.iter().sum::<f64>() / d.len() as f64;
                    d.iter_mut().for_each(|v| *v -= mean);
                    let slot = grad_slot(grads, *est, val(*est).shape());
                    slot.data_mut().iter_mut().zip(&d).for_each(|(s, v)| *s += v);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Projection energies of a zero-mean estimate onto a zero-mean target.
struct SiSdrParts {
    alpha: f64,
    proj: f64,
    resid: f64,
}

impl SiSdrParts {
    fn new(e: &[f64], t: &[f64], tt: f64) -> Self {
        let dot: f64 = e.iter().zip(t).map(|(a, b)| a * b).sum();
        let ee: f64 = e.iter().map(|v| v * v).sum();
        let proj = dot * dot / tt;
        SiSdrParts {
            alpha: dot / tt,
            proj,
            resid: ee - proj,
        }
    }

    fn db(&self) -> f64 {
        10.0 * (self.proj / self.resid).log10()
    }

    /// d(dB)/de for the zero-mean estimate `e`.
    fn grad_db(&self, e: &[f64], t: &[f64]) -> Vec<f64> {
        let k = 10.0 / LN_10;
        e.iter()
            .zip(t)
            .map(|(&ev, &tv)| {
                let dproj = 2.0 * self.alpha * tv;
                k * (dproj / self.proj - (2.0 * ev - dproj) / self.resid)
            })
            .collect()
    }
}

/// Destination/source index ranges of kernel tap `j` for a length-`t` row.
fn tap_ranges(
    j: usize,
    width: usize,
    dilation: usize,
    t: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let half = (width - 1) / 2;
    let off = (j as isize - half as isize) * dilation as isize;
    let lo = (-off).max(0) as usize;
    let hi = (t as isize - off.max(0)).max(0) as usize;
    if lo >= hi {
        return (0..0, 0..0);
    }
    let src_lo = (lo as isize + off) as usize;
    (lo..hi, src_lo..src_lo + (hi - lo))
}

fn im2col(x: &Tensor, width: usize, stride: usize, t_out: usize) -> Vec<f64> {
    let (c_in, _) = x.shape();
    let mut cols = vec![0.0; c_in * width * t_out];
    for ci in 0..c_in {
        let xr = x.row_slice(ci);
        for j in 0..width {
            let dst = &mut cols[(ci * width + j) * t_out..(ci * width + j + 1) * t_out];
            for (f, d) in dst.iter_mut().enumerate() {
                *d = xr[f * stride + j];
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], dx: &mut Tensor, width: usize, stride: usize, t_out: usize) {
    let (c_in, t) = dx.shape();
    let d = dx.data_mut();
    for ci in 0..c_in {
        for j in 0..width {
            let src = &dcols[(ci * width + j) * t_out..(ci * width + j + 1) * t_out];
            for (f, v) in src.iter().enumerate() {
                d[ci * t + f * stride + j] += v;
            }
        }
    }
}

fn channel_stats(x: &[f64], r: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c.max(1)) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c.max(1)) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / r as f64 + NORM_EPS).sqrt()).collect();
    let mut normed = Vec::with_capacity(r * c);
    for row in x.chunks_exact(c.max(1)) {
        normed.extend(row.iter().zip(&mean).zip(&inv).map(|((v, m), i)| (v - m) * i));
    }
    (normed, inv)
}

fn global_stats(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), vec![inv])
}

fn norm_backward(kind: NormKind, dn: &[f64], n: &[f64], inv: &[f64], r: usize, c: usize, dx: &mut [f64]) {
    match kind {
        NormKind::Channel => {
            let mut m1 = vec![0.0; c];
            let mut m2 = vec![0.0; c];
            for ch in 0..r {
                for t in 0..c {
                    let i = ch * c + t;
                    m1[t] += dn[i];
                    m2[t] += dn[i] * n[i];
                }
            }
            for ch in 0..r {
                for t in 0..c {
                    let i = ch * c + t;
                    dx[i] += inv[t] * (dn[i] - m1[t] / r as f64 - n[i] * m2[t] / r as f64);
                }
            }
        }
        NormKind::Global => {
            let count = dn.len() as f64;
            let m1 = dn.iter().sum::<f64>() / count;
            let m2 = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / count;
            for i in 0..dn.len() {
                dx[i] += inv[0] * (dn[i] - m1 - n[i] * m2);
            }
        }
    }
}
