//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive operation of a forward pass in
//! topological order; [`Tape::backward`] replays the records in reverse,
//! accumulating vector-Jacobian products into every leaf. Gradients add
//! across fan-out, each node is visited exactly once, and leaves that are
//! not on the path to the loss receive zero gradients.
//!
//! The tape is single-owner and built per forward pass; only first-order
//! gradients are supported.

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::tensor::{idx4, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Conv2d { x: usize, k: usize, b: usize, stride: usize, padding: Padding },
    Affine { x: usize, w: usize, b: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    LeakyRelu { x: usize },
    Softmax { x: usize },
    GlobalAvgPool { x: usize },
    ChannelMean { x: usize },
    Upsample2x { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddConst { x: usize },
    Concat { a: usize, b: usize },
    Dot { a: usize, b: usize },
    Mean { x: usize },
    Sum { x: usize },
    MulChannelGate { x: usize, g: usize },
    MulSpatialGate { x: usize, g: usize },
    MulScalarNode { x: usize, s: usize },
    AddScalarNode { x: usize, s: usize },
    ChunkBroadcast { s: usize, chunk: usize },
    SliceScalar { x: usize, idx: usize },
    CrossEntropy { logits: usize, labels: usize },
    L1 { a: usize, b: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Saved forward intermediates (softmax probabilities for the
    /// cross-entropy node).
    saved: Option<Tensor>,
}

/// Records a forward pass and computes reverse-mode gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, saved: Option<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Registers a parameter tensor; gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Registers a non-differentiable input (data, targets, indicators).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false, None)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Per-frame 2-D convolution of `x [l,h,w,c_in]` with shared weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 4 {
            return Err(Error::Dimension(format!(
                "tape conv2d expects [l,h,w,c], got {:?}",
                xv.shape()
            )));
        }
        let (l, h, w, ci) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let frame_len = h * w * ci;
        let mut frames = Vec::with_capacity(l);
        for f in 0..l {
            let frame = Tensor::new(
                vec![h, w, ci],
                xv.data()[f * frame_len..(f + 1) * frame_len].to_vec(),
            )?;
            frames.push(ops::conv2d(
                &frame,
                &self.nodes[kernel.0].value,
                &self.nodes[bias.0].value,
                stride,
                padding,
            )?);
        }
        let os = frames[0].shape().to_vec();
        let mut data = Vec::with_capacity(l * frames[0].len());
        for fr in &frames {
            data.extend_from_slice(fr.data());
        }
        let value = Tensor::new(vec![l, os[0], os[1], os[2]], data)?;
        let needs = self.needs(x.0) || self.needs(kernel.0) || self.needs(bias.0);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                k: kernel.0,
                b: bias.0,
                stride,
                padding,
            },
            needs,
            None,
        ))
    }

    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let value = ops::affine(
            &self.nodes[x.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        )?;
        let needs = self.needs(x.0) || self.needs(weight.0) || self.needs(bias.0);
        Ok(self.push(
            value,
            Op::Affine {
                x: x.0,
                w: weight.0,
                b: bias.0,
            },
            needs,
            None,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(&self.nodes[x.0].value);
        let needs = self.needs(x.0);
        self.push(value, Op::Sigmoid { x: x.0 }, needs, None)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = ops::tanh(&self.nodes[x.0].value);
        let needs = self.needs(x.0);
        self.push(value, Op::Tanh { x: x.0 }, needs, None)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let value = ops::leaky_relu(&self.nodes[x.0].value);
        let needs = self.needs(x.0);
        self.push(value, Op::LeakyRelu { x: x.0 }, needs, None)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax(&self.nodes[x.0].value)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Softmax { x: x.0 }, needs, None))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = ops::global_avg_pool(&self.nodes[x.0].value)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::GlobalAvgPool { x: x.0 }, needs, None))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let value = ops::channel_mean(&self.nodes[x.0].value)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::ChannelMean { x: x.0 }, needs, None))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = ops::upsample_nearest_2x(&self.nodes[x.0].value)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Upsample2x { x: x.0 }, needs, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, needs, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, needs, None))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.scale(c);
        let needs = self.needs(x.0);
        self.push(value, Op::Scale { x: x.0, c }, needs, None)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + c);
        let needs = self.needs(x.0);
        self.push(value, Op::AddConst { x: x.0 }, needs, None)
    }

    /// Concatenation of two rank-1 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.rank() != 1 || bv.rank() != 1 {
            return Err(Error::Dimension(format!(
                "concat expects vectors, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Tensor::new(vec![data.len()], data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Concat { a: a.0, b: b.0 }, needs, None))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes[a.0].value.dot(&self.nodes[b.0].value)?);
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Dot { a: a.0, b: b.0 }, needs, None))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.mean());
        let needs = self.needs(x.0);
        self.push(value, Op::Mean { x: x.0 }, needs, None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = 0.0;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(acc), Op::Sum { x: x.0 }, needs, None)
    }

    /// `x[l,h,w,c] * gate[c]` with the gate broadcast over positions.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gate.0].value;
        if xv.rank() != 4 || gv.rank() != 1 || gv.len() != xv.shape()[3] {
            return Err(Error::Dimension(format!(
                "channel gate {:?} does not match features {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let c = gv.len();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= gv.data()[i % c];
        }
        let needs = self.needs(x.0) || self.needs(gate.0);
        Ok(self.push(out, Op::MulChannelGate { x: x.0, g: gate.0 }, needs, None))
    }

    /// `x[l,h,w,c] * gate[l,h,w]` with the gate broadcast over channels.
    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gate.0].value;
        if xv.rank() != 4 || gv.shape() != &xv.shape()[..3] {
            return Err(Error::Dimension(format!(
                "spatial gate {:?} does not match features {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let c = xv.shape()[3];
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= gv.data()[i / c];
        }
        let needs = self.needs(x.0) || self.needs(gate.0);
        Ok(self.push(out, Op::MulSpatialGate { x: x.0, g: gate.0 }, needs, None))
    }

    /// Broadcast-multiplies a tensor by a scalar node.
    pub fn mul_scalar_node(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.nodes[s.0].value.scalar_value()?;
        let value = self.nodes[x.0].value.scale(sv);
        let needs = self.needs(x.0) || self.needs(s.0);
        Ok(self.push(value, Op::MulScalarNode { x: x.0, s: s.0 }, needs, None))
    }

    /// Broadcast-adds a scalar node to a tensor.
    pub fn add_scalar_node(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.nodes[s.0].value.scalar_value()?;
        let value = self.nodes[x.0].value.map(|v| v + sv);
        let needs = self.needs(x.0) || self.needs(s.0);
        Ok(self.push(value, Op::AddScalarNode { x: x.0, s: s.0 }, needs, None))
    }

    /// Expands the `G` values of `s` (flattened) to length `out_len`,
    /// each value covering a contiguous chunk of `ceil(out_len / G)`
    /// coordinates.
    pub fn chunk_broadcast(&mut self, s: Var, out_len: usize) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.is_empty() {
            return Err(Error::Dimension(
                "chunk_broadcast needs a non-empty source".into(),
            ));
        }
        let chunk = out_len.div_ceil(sv.len());
        let mut data = vec![0.0; out_len];
        for (i, v) in data.iter_mut().enumerate() {
            *v = sv.data()[i / chunk];
        }
        let value = Tensor::new(vec![out_len], data)?;
        let needs = self.needs(s.0);
        Ok(self.push(value, Op::ChunkBroadcast { s: s.0, chunk }, needs, None))
    }

    /// Extracts the element at flat offset `idx` as a scalar node.
    pub fn slice_scalar(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if idx >= xv.len() {
            return Err(Error::Dimension(format!(
                "slice_scalar index {} of {:?}",
                idx,
                xv.shape()
            )));
        }
        let value = Tensor::scalar(xv.data()[idx]);
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::SliceScalar { x: x.0, idx }, needs, None))
    }

    /// Mean pixel-wise softmax cross-entropy of logits `[l,h,w,C]`
    /// against integer labels `[l,h,w]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Var) -> Result<Var> {
        let (probs, loss) =
            ops::softmax_xent_forward(&self.nodes[logits.0].value, &self.nodes[labels.0].value)?;
        let needs = self.needs(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.0,
            },
            needs,
            Some(probs),
        ))
    }

    /// Mean absolute error between two same-shaped tensors.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = ops::mean_absolute_error(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::scalar(loss), Op::L1 { a: a.0, b: b.0 }, needs, None))
    }

    /// Reverse pass from a scalar loss node.
    ///
    /// Returns gradient buffers for every node that required one; query
    /// with [`Gradients::wrt`]. Leaves not on the path to the loss get
    /// zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let go = grads[id].take().unwrap();
            self.propagate(id, &go, &mut grads)?;
            grads[id] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: usize,
        update: impl FnOnce(&mut Tensor),
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[target].value.shape()));
        }
        update(slot.as_mut().unwrap());
    }

    fn propagate(&self, id: usize, go: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            } => self.conv2d_backward(id, *x, *k, *b, *stride, *padding, go, grads),
            Op::Affine { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let n = xv.len();
                let m = go.len();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += go.data()[j] * wv.data()[i * m + j];
                        }
                        gx.data_mut()[i] += acc;
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for i in 0..n {
                        for j in 0..m {
                            gw.data_mut()[i * m + j] += xv.data()[i] * go.data()[j];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..m {
                        gb.data_mut()[j] += go.data()[j];
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..y.len() {
                        let s = y.data()[i];
                        gx.data_mut()[i] += go.data()[i] * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..y.len() {
                        let t = y.data()[i];
                        gx.data_mut()[i] += go.data()[i] * (1.0 - t * t);
                    }
                });
            }
            Op::LeakyRelu { x } => {
                let xv = &self.nodes[*x].value;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..xv.len() {
                        let slope = if xv.data()[i] >= 0.0 { 1.0 } else { ops::LEAKY_SLOPE };
                        gx.data_mut()[i] += go.data()[i] * slope;
                    }
                });
            }
            Op::Softmax { x } => {
                let y = &self.nodes[id].value;
                let mut inner = 0.0;
                for i in 0..y.len() {
                    inner += go.data()[i] * y.data()[i];
                }
                self.accumulate(grads, *x, |gx| {
                    for i in 0..y.len() {
                        gx.data_mut()[i] += y.data()[i] * (go.data()[i] - inner);
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let positions = (xs[0] * xs[1] * xs[2]) as f64;
                let c = xs[3];
                self.accumulate(grads, *x, |gx| {
                    for (i, g) in gx.data_mut().iter_mut().enumerate() {
                        *g += go.data()[i % c] / positions;
                    }
                });
            }
            Op::ChannelMean { x } => {
                let c = self.nodes[*x].value.shape()[3];
                self.accumulate(grads, *x, |gx| {
                    for (i, g) in gx.data_mut().iter_mut().enumerate() {
                        *g += go.data()[i / c] / c as f64;
                    }
                });
            }
            Op::Upsample2x { x } => {
                let os = self.nodes[id].value.shape().to_vec();
                let xs = self.nodes[*x].value.shape().to_vec();
                self.accumulate(grads, *x, |gx| {
                    for f in 0..os[0] {
                        for y in 0..os[1] {
                            for xcol in 0..os[2] {
                                for ci in 0..os[3] {
                                    gx.data_mut()[idx4(&xs, f, y / 2, xcol / 2, ci)] +=
                                        go.data()[idx4(&os, f, y, xcol, ci)];
                                }
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (g, &v) in ga.data_mut().iter_mut().zip(go.data()) {
                        *g += v;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (g, &v) in gb.data_mut().iter_mut().zip(go.data()) {
                        *g += v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..go.len() {
                        ga.data_mut()[i] += go.data()[i] * bv.data()[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..go.len() {
                        gb.data_mut()[i] += go.data()[i] * av.data()[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |gx| {
                    for (g, &v) in gx.data_mut().iter_mut().zip(go.data()) {
                        *g += c * v;
                    }
                });
            }
            Op::AddConst { x, .. } => {
                self.accumulate(grads, *x, |gx| {
                    for (g, &v) in gx.data_mut().iter_mut().zip(go.data()) {
                        *g += v;
                    }
                });
            }
            Op::Concat { a, b } => {
                let alen = self.nodes[*a].value.len();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..alen {
                        ga.data_mut()[i] += go.data()[i];
                    }
                });
                let blen = self.nodes[*b].value.len();
                self.accumulate(grads, *b, |gb| {
                    for i in 0..blen {
                        gb.data_mut()[i] += go.data()[alen + i];
                    }
                });
            }
            Op::Dot { a, b } => {
                let g = go.data()[0];
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bv.len() {
                        ga.data_mut()[i] += g * bv.data()[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..av.len() {
                        gb.data_mut()[i] += g * av.data()[i];
                    }
                });
            }
            Op::Mean { x } => {
                let g = go.data()[0] / self.nodes[*x].value.len() as f64;
                self.accumulate(grads, *x, |gx| {
                    for v in gx.data_mut() {
                        *v += g;
                    }
                });
            }
            Op::Sum { x } => {
                let g = go.data()[0];
                self.accumulate(grads, *x, |gx| {
                    for v in gx.data_mut() {
                        *v += g;
                    }
                });
            }
            Op::MulChannelGate { x, g } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*g].value;
                let c = gv.len();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..go.len() {
                        gx.data_mut()[i] += go.data()[i] * gv.data()[i % c];
                    }
                });
                self.accumulate(grads, *g, |gg| {
                    for i in 0..go.len() {
                        gg.data_mut()[i % c] += go.data()[i] * xv.data()[i];
                    }
                });
            }
            Op::MulSpatialGate { x, g } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*g].value;
                let c = xv.shape()[3];
                self.accumulate(grads, *x, |gx| {
                    for i in 0..go.len() {
                        gx.data_mut()[i] += go.data()[i] * gv.data()[i / c];
                    }
                });
                self.accumulate(grads, *g, |gg| {
                    for i in 0..go.len() {
                        gg.data_mut()[i / c] += go.data()[i] * xv.data()[i];
                    }
                });
            }
            Op::MulScalarNode { x, s } => {
                let xv = &self.nodes[*x].value;
                let sv = self.nodes[*s].value.data()[0];
                self.accumulate(grads, *x, |gx| {
                    for (g, &v) in gx.data_mut().iter_mut().zip(go.data()) {
                        *g += sv * v;
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    let mut acc = 0.0;
                    for i in 0..go.len() {
                        acc += go.data()[i] * xv.data()[i];
                    }
                    gs.data_mut()[0] += acc;
                });
            }
            Op::AddScalarNode { x, s } => {
                self.accumulate(grads, *x, |gx| {
                    for (g, &v) in gx.data_mut().iter_mut().zip(go.data()) {
                        *g += v;
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    let mut acc = 0.0;
                    for &v in go.data() {
                        acc += v;
                    }
                    gs.data_mut()[0] += acc;
                });
            }
            Op::ChunkBroadcast { s, chunk } => {
                let chunk = *chunk;
                self.accumulate(grads, *s, |gs| {
                    for i in 0..go.len() {
                        gs.data_mut()[i / chunk] += go.data()[i];
                    }
                });
            }
            Op::SliceScalar { x, idx } => {
                let idx = *idx;
                let g = go.data()[0];
                self.accumulate(grads, *x, |gx| {
                    gx.data_mut()[idx] += g;
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let probs = self.nodes[id].saved.as_ref().expect("saved probs");
                let labelsv = &self.nodes[*labels].value;
                let classes = probs.shape()[3];
                let pixels = probs.len() / classes;
                let g = go.data()[0] / pixels as f64;
                self.accumulate(grads, *logits, |gl| {
                    for p in 0..pixels {
                        let target = labelsv.data()[p] as usize;
                        for ci in 0..classes {
                            let indicator = if ci == target { 1.0 } else { 0.0 };
                            gl.data_mut()[p * classes + ci] +=
                                g * (probs.data()[p * classes + ci] - indicator);
                        }
                    }
                });
            }
            Op::L1 { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let n = av.len() as f64;
                let g = go.data()[0] / n;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..av.len() {
                        let diff = av.data()[i] - bv.data()[i];
                        ga.data_mut()[i] += g * sign(diff);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..av.len() {
                        let diff = av.data()[i] - bv.data()[i];
                        gb.data_mut()[i] -= g * sign(diff);
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        out_id: usize,
        x: usize,
        k: usize,
        b: usize,
        stride: usize,
        padding: Padding,
        go: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = &self.nodes[x].value;
        let kv = &self.nodes[k].value;
        let os = self.nodes[out_id].value.shape().to_vec();
        let xs = xv.shape().to_vec();
        let ks = kv.shape().to_vec();
        let (l, h, w) = (xs[0], xs[1], xs[2]);
        let (kh, kw, c_in, c_out) = (ks[0], ks[1], ks[2], ks[3]);
        let (oh, ow) = (os[1], os[2]);
        let (pad_h, pad_w) = match padding {
            Padding::Same => (
                ((((oh - 1) * stride + kh).saturating_sub(h)) / 2) as isize,
                ((((ow - 1) * stride + kw).saturating_sub(w)) / 2) as isize,
            ),
            Padding::Valid => (0, 0),
        };

        // Bias: plain sum of output gradients per channel.
        self.accumulate(grads, b, |gb| {
            for f in 0..l {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for oc in 0..c_out {
                            gb.data_mut()[oc] += go.data()[idx4(&os, f, oy, ox, oc)];
                        }
                    }
                }
            }
        });

        let needs_x = self.nodes[x].needs_grad;
        let needs_k = self.nodes[k].needs_grad;
        if !needs_x && !needs_k {
            return;
        }
        let mut gx = if needs_x { Some(Tensor::zeros(&xs)) } else { None };
        let mut gk = if needs_k { Some(Tensor::zeros(&ks)) } else { None };
        for f in 0..l {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base_y = (oy * stride) as isize - pad_h;
                    let base_x = (ox * stride) as isize - pad_w;
                    for oc in 0..c_out {
                        let g = go.data()[idx4(&os, f, oy, ox, oc)];
                        for dy in 0..kh {
                            let iy = base_y + dy as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let ix = base_x + dx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                for ic in 0..c_in {
                                    let xi = idx4(&xs, f, iy as usize, ix as usize, ic);
                                    let ki = idx4(&ks, dy, dx, ic, oc);
                                    if let Some(gx) = gx.as_mut() {
                                        gx.data_mut()[xi] += g * kv.data()[ki];
                                    }
                                    if let Some(gk) = gk.as_mut() {
                                        gk.data_mut()[ki] += g * xv.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gxv) = gx {
            self.accumulate(grads, x, |t| {
                for (a, &v) in t.data_mut().iter_mut().zip(gxv.data()) {
                    *a += v;
                }
            });
        }
        if let Some(gkv) = gk {
            self.accumulate(grads, k, |t| {
                for (a, &v) in t.data_mut().iter_mut().zip(gkv.data()) {
                    *a += v;
                }
            });
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the
    /// variable was not on the path to the loss.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(var).shape()),
        }
    }
}
