//! Reverse-mode differentiation over a recorded op sequence.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and hands back a gradient for every leaf that asked
//! for one. Tapes are single-use: once backward has run, the graph is stale
//! and recording or differentiating again is a contract violation. Distinct
//! tapes share no state and may live on distinct threads.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

pub const BN_MOMENTUM: f32 = 0.99;
pub const BN_EPS: f32 = 1e-3;

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::ones(vec![channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

#[derive(Clone, Debug)]
struct BnSaved {
    train: bool,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    DepthwiseConv { stride: usize, padding: Padding },
    PointwiseConv,
    BiasAdd,
    UpsampleNearest { factor: usize },
    BatchNorm(Box<BnSaved>),
    Relu,
    Sigmoid,
    ConcatChannels { ca: usize, cb: usize },
    Add,
    Sub,
    Mul,
    Div,
    AffineScalar { scale: f32 },
    Mean,
}

struct Entry {
    op: Op,
    inputs: Vec<ValueId>,
    value: Tensor,
    wants_grad: bool,
}

/// Gradient per tape value, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    finalized: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records a differentiable leaf (a parameter or input under study).
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Records a leaf that never receives a gradient (targets, fixed windows).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Tensor, wants_grad: bool) -> ValueId {
        assert!(
            !self.finalized,
            "recording on a tape after backward ran (stale graph)"
        );
        let wants = wants_grad || inputs.iter().any(|&i| self.entries[i.0].wants_grad);
        self.entries.push(Entry {
            op,
            inputs,
            value,
            wants_grad: wants,
        });
        ValueId(self.entries.len() - 1)
    }

    fn wants(&self, id: ValueId) -> bool {
        self.entries[id.0].wants_grad
    }

    // --- layer ops ---

    pub fn depthwise_conv(
        &mut self,
        x: ValueId,
        k: ValueId,
        stride: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        let y = kernels::depthwise_forward(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(Op::DepthwiseConv { stride, padding }, vec![x, k], y, false))
    }

    pub fn pointwise_conv(&mut self, x: ValueId, k: ValueId) -> Result<ValueId> {
        let y = kernels::pointwise_forward(self.value(x), self.value(k))?;
        Ok(self.push(Op::PointwiseConv, vec![x, k], y, false))
    }

    /// Depthwise convolution followed by a 1x1 pointwise convolution.
    pub fn conv_separable(
        &mut self,
        x: ValueId,
        depthwise: ValueId,
        pointwise: ValueId,
        stride: usize,
        padding: Padding,
    ) -> Result<ValueId> {
        let mid = self.depthwise_conv(x, depthwise, stride, padding)?;
        self.pointwise_conv(mid, pointwise)
    }

    pub fn bias_add(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let y = kernels::bias_add_forward(self.value(x), self.value(b))?;
        Ok(self.push(Op::BiasAdd, vec![x, b], y, false))
    }

    pub fn upsample_nearest(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        let y = kernels::upsample_forward(self.value(x), factor)?;
        Ok(self.push(Op::UpsampleNearest { factor }, vec![x], y, false))
    }

    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<ValueId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if state.channels() != c {
            return Err(Error::shape(format!(
                "batch_norm state has {} channels, input has {c}",
                state.channels()
            )));
        }
        let m = n * h * w;
        if m == 0 {
            return Err(Error::contract("batch_norm on a zero-size batch"));
        }
        let eps = state.eps;
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BnMode::Train => {
                let xd = self.value(x).data();
                let hw = h * w;
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for (plane, chunk) in xd.chunks(hw).enumerate() {
                    let acc: f64 = chunk.iter().map(|&v| v as f64).sum();
                    mean[plane % c] += acc;
                }
                for v in &mut mean {
                    *v /= m as f64;
                }
                for (plane, chunk) in xd.chunks(hw).enumerate() {
                    let mu = mean[plane % c];
                    let acc: f64 = chunk.iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).sum();
                    var[plane % c] += acc;
                }
                for v in &mut var {
                    *v /= m as f64;
                }
                let mean: Vec<f32> = mean.into_iter().map(|v| v as f32).collect();
                let var: Vec<f32> = var.into_iter().map(|v| v as f32).collect();
                // Exponential moving average over batch statistics.
                let mom = state.momentum;
                for ((rm, rv), (&bm, &bv)) in state
                    .running_mean
                    .data_mut()
                    .iter_mut()
                    .zip(state.running_var.data_mut().iter_mut())
                    .zip(mean.iter().zip(var.iter()))
                {
                    *rm = mom * *rm + (1.0 - mom) * bm;
                    *rv = mom * *rv + (1.0 - mom) * bv;
                }
                (mean, var)
            }
            BnMode::Infer => (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let hw = h * w;
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut y = Tensor::zeros(vec![n, c, h, w]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for plane in 0..n * c {
                let ch = plane % c;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in plane * hw..(plane + 1) * hw {
                    yd[i] = g * (xd[i] - mu) * is + b;
                }
            }
        }
        let saved = BnSaved {
            train: mode == BnMode::Train,
            mean,
            inv_std,
        };
        Ok(self.push(Op::BatchNorm(Box::new(saved)), vec![x, gamma, beta], y, false))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu, vec![x], y, false)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let y = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid, vec![x], y, false)
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let y = kernels::concat_forward(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        Ok(self.push(Op::ConcatChannels { ca, cb }, vec![a, b], y, false))
    }

    // --- elementwise and reduction ops ---

    fn binary(&mut self, op: Op, a: ValueId, b: ValueId, f: impl Fn(f32, f32) -> f32) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, vec![a, b], t, false))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, x: ValueId, scale: f32, shift: f32) -> ValueId {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(Op::AffineScalar { scale }, vec![x], y, false)
    }

    /// Mean over all elements, as a scalar tensor.
    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(Op::Mean, vec![x], y, false)
    }

    // --- reverse pass ---

    /// Distributes `loss_gradient` from `output` back to every leaf that
    /// wants a gradient. Consumes the graph: the tape is finalized afterwards.
    pub fn backward(&mut self, output: ValueId, loss_gradient: &Tensor) -> Result<Gradients> {
        if self.finalized {
            return Err(Error::contract(
                "backward on a stale graph (tape already consumed)",
            ));
        }
        if loss_gradient.shape() != self.value(output).shape() {
            return Err(Error::shape(format!(
                "loss gradient shape {:?} != output shape {:?}",
                loss_gradient.shape(),
                self.value(output).shape()
            )));
        }
        self.finalized = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.entries.len()).map(|_| None).collect();
        grads[output.0] = Some(loss_gradient.clone());

        for id in (0..=output.0).rev() {
            if matches!(self.entries[id].op, Op::Leaf) || !self.entries[id].wants_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            let inputs = self.entries[id].inputs.clone();
            match &self.entries[id].op {
                Op::Leaf => unreachable!(),
                Op::DepthwiseConv { stride, padding } => {
                    let (x, k) = (inputs[0], inputs[1]);
                    let (dx, dk) = kernels::depthwise_backward(
                        self.value(x),
                        self.value(k),
                        &dy,
                        *stride,
                        *padding,
                        self.wants(x),
                        self.wants(k),
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if let Some(dk) = dk {
                        accumulate(&mut grads, k, dk);
                    }
                }
                Op::PointwiseConv => {
                    let (x, k) = (inputs[0], inputs[1]);
                    let (dx, dk) = kernels::pointwise_backward(
                        self.value(x),
                        self.value(k),
                        &dy,
                        self.wants(x),
                        self.wants(k),
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if let Some(dk) = dk {
                        accumulate(&mut grads, k, dk);
                    }
                }
                Op::BiasAdd => {
                    let (x, b) = (inputs[0], inputs[1]);
                    if self.wants(b) {
                        let db = kernels::bias_add_backward_bias(&dy, self.value(b).numel())?;
                        accumulate(&mut grads, b, db);
                    }
                    if self.wants(x) {
                        accumulate(&mut grads, x, dy);
                    }
                }
                Op::UpsampleNearest { factor } => {
                    let dx = kernels::upsample_backward(&dy, *factor)?;
                    accumulate(&mut grads, inputs[0], dx);
                }
                Op::BatchNorm(saved) => {
                    let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                    let (dx, dg, db) = bn_backward(
                        self.value(x),
                        self.value(gamma),
                        saved,
                        &dy,
                        self.wants(x),
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if self.wants(gamma) {
                        accumulate(&mut grads, gamma, dg);
                    }
                    if self.wants(beta) {
                        accumulate(&mut grads, beta, db);
                    }
                }
                Op::Relu => {
                    let x = inputs[0];
                    let xd = self.value(x).data();
                    // Subgradient 0 at exactly 0.
                    let dx = Tensor::new(
                        dy.shape().to_vec(),
                        dy.data()
                            .iter()
                            .zip(xd)
                            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                            .collect(),
                    )?;
                    accumulate(&mut grads, x, dx);
                }
                Op::Sigmoid => {
                    let yd = self.entries[id].value.data();
                    let dx = Tensor::new(
                        dy.shape().to_vec(),
                        dy.data()
                            .iter()
                            .zip(yd)
                            .map(|(&g, &y)| g * y * (1.0 - y))
                            .collect(),
                    )?;
                    accumulate(&mut grads, inputs[0], dx);
                }
                Op::ConcatChannels { ca, cb } => {
                    let (da, db) = kernels::concat_backward(&dy, *ca, *cb)?;
                    if self.wants(inputs[0]) {
                        accumulate(&mut grads, inputs[0], da);
                    }
                    if self.wants(inputs[1]) {
                        accumulate(&mut grads, inputs[1], db);
                    }
                }
                Op::Add => {
                    if self.wants(inputs[1]) {
                        accumulate(&mut grads, inputs[1], dy.clone());
                    }
                    if self.wants(inputs[0]) {
                        accumulate(&mut grads, inputs[0], dy);
                    }
                }
                Op::Sub => {
                    if self.wants(inputs[1]) {
                        accumulate(&mut grads, inputs[1], dy.map(|v| -v));
                    }
                    if self.wants(inputs[0]) {
                        accumulate(&mut grads, inputs[0], dy);
                    }
                }
                Op::Mul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    if self.wants(a) {
                        let da = elementwise(&dy, self.value(b), |g, y| g * y);
                        accumulate(&mut grads, a, da);
                    }
                    if self.wants(b) {
                        let db = elementwise(&dy, self.value(a), |g, x| g * x);
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Div => {
                    let (a, b) = (inputs[0], inputs[1]);
                    if self.wants(a) {
                        let da = elementwise(&dy, self.value(b), |g, y| g / y);
                        accumulate(&mut grads, a, da);
                    }
                    if self.wants(b) {
                        let av = self.value(a).data();
                        let bv = self.value(b).data();
                        let db = Tensor::new(
                            dy.shape().to_vec(),
                            dy.data()
                                .iter()
                                .zip(av.iter().zip(bv))
                                .map(|(&g, (&x, &y))| -g * x / (y * y))
                                .collect(),
                        )?;
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::AffineScalar { scale } => {
                    let s = *scale;
                    accumulate(&mut grads, inputs[0], dy.map(|v| s * v));
                }
                Op::Mean => {
                    let x = inputs[0];
                    let n = self.value(x).numel();
                    let g = dy.item() / n as f32;
                    accumulate(&mut grads, x, Tensor::full(self.value(x).shape().to_vec(), g));
                }
            }
        }

        // Non-leaf gradients were consumed as we went; what remains belongs
        // to leaves (and to values upstream of the chosen output, which stay None).
        Ok(Gradients { grads })
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("elementwise shapes verified at forward time")
}

fn accumulate(grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn bn_backward(
    x: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
    dy: &Tensor,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let dyd = dy.data();
    let gd = gamma.data();

    // Per-channel sums of dy and dy * x_hat.
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for plane in 0..n * c {
        let ch = plane % c;
        let (mu, is) = (saved.mean[ch] as f64, saved.inv_std[ch] as f64);
        let mut s = 0.0f64;
        let mut sx = 0.0f64;
        for i in plane * hw..(plane + 1) * hw {
            let g = dyd[i] as f64;
            s += g;
            sx += g * ((xd[i] as f64 - mu) * is);
        }
        sum_dy[ch] += s;
        sum_dy_xhat[ch] += sx;
    }

    let dgamma = Tensor::new(vec![c], sum_dy_xhat.iter().map(|&v| v as f32).collect())?;
    let dbeta = Tensor::new(vec![c], sum_dy.iter().map(|&v| v as f32).collect())?;

    let dx = if want_dx {
        let mut dx = Tensor::zeros(vec![n, c, h, w]);
        let dxd = dx.data_mut();
        for plane in 0..n * c {
            let ch = plane % c;
            let (mu, is, g) = (saved.mean[ch] as f64, saved.inv_std[ch] as f64, gd[ch] as f64);
            if saved.train {
                let k = g * is / m;
                for i in plane * hw..(plane + 1) * hw {
                    let xhat = (xd[i] as f64 - mu) * is;
                    dxd[i] = (k * (m * dyd[i] as f64 - sum_dy[ch] - xhat * sum_dy_xhat[ch])) as f32;
                }
            } else {
                let k = g * is;
                for i in plane * hw..(plane + 1) * hw {
                    dxd[i] = (k * dyd[i] as f64) as f32;
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    Ok((dx, dgamma, dbeta))
}

/// Graph construction abstracted over the evaluator, so the same network
/// description can run on a differentiating [`Tape`] or on the plain f64
/// evaluator the gradient checker probes with.
pub trait Recorder {
    type Id: Copy;

    fn constant(&mut self, t: Tensor) -> Self::Id;
    fn shape_of(&self, id: Self::Id) -> &[usize];
    fn scalar_value(&self, id: Self::Id) -> f64;

    fn depthwise_conv(&mut self, x: Self::Id, k: Self::Id, stride: usize, padding: Padding) -> Result<Self::Id>;
    fn pointwise_conv(&mut self, x: Self::Id, k: Self::Id) -> Result<Self::Id>;
    fn bias_add(&mut self, x: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn upsample_nearest(&mut self, x: Self::Id, factor: usize) -> Result<Self::Id>;
    fn batch_norm(&mut self, x: Self::Id, gamma: Self::Id, beta: Self::Id, state: &mut BatchNormState, mode: BnMode) -> Result<Self::Id>;
    fn relu(&mut self, x: Self::Id) -> Self::Id;
    fn sigmoid(&mut self, x: Self::Id) -> Self::Id;
    fn concat_channels(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn add(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn sub(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn mul(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn div(&mut self, a: Self::Id, b: Self::Id) -> Result<Self::Id>;
    fn affine(&mut self, x: Self::Id, scale: f32, shift: f32) -> Self::Id;
    fn mean(&mut self, x: Self::Id) -> Self::Id;
}

impl Recorder for Tape {
    type Id = ValueId;

    fn constant(&mut self, t: Tensor) -> ValueId {
        Tape::constant(self, t)
    }
    fn shape_of(&self, id: ValueId) -> &[usize] {
        self.value(id).shape()
    }
    fn scalar_value(&self, id: ValueId) -> f64 {
        self.value(id).item() as f64
    }
    fn depthwise_conv(&mut self, x: ValueId, k: ValueId, stride: usize, padding: Padding) -> Result<ValueId> {
        Tape::depthwise_conv(self, x, k, stride, padding)
    }
    fn pointwise_conv(&mut self, x: ValueId, k: ValueId) -> Result<ValueId> {
        Tape::pointwise_conv(self, x, k)
    }
    fn bias_add(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        Tape::bias_add(self, x, b)
    }
    fn upsample_nearest(&mut self, x: ValueId, factor: usize) -> Result<ValueId> {
        Tape::upsample_nearest(self, x, factor)
    }
    fn batch_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, state: &mut BatchNormState, mode: BnMode) -> Result<ValueId> {
        Tape::batch_norm(self, x, gamma, beta, state, mode)
    }
    fn relu(&mut self, x: ValueId) -> ValueId {
        Tape::relu(self, x)
    }
    fn sigmoid(&mut self, x: ValueId) -> ValueId {
        Tape::sigmoid(self, x)
    }
    fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        Tape::concat_channels(self, a, b)
    }
    fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        Tape::add(self, a, b)
    }
    fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        Tape::sub(self, a, b)
    }
    fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        Tape::mul(self, a, b)
    }
    fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        Tape::div(self, a, b)
    }
    fn affine(&mut self, x: ValueId, scale: f32, shift: f32) -> ValueId {
        Tape::affine(self, x, scale, shift)
    }
    fn mean(&mut self, x: ValueId) -> ValueId {
        Tape::mean(self, x)
    }
}

// --- pure single-op entry points ---
//
// Each records on a scratch tape so there is exactly one implementation of
// every operation.

pub fn conv_separable(
    x: &Tensor,
    depthwise: &Tensor,
    pointwise: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let mid = kernels::depthwise_forward(x, depthwise, stride, padding)?;
    kernels::pointwise_forward(&mid, pointwise)
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    kernels::upsample_forward(x, factor)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    kernels::concat_forward(a, b)
}

/// Normalizes with batch statistics (train) or running statistics (infer);
/// train mode updates the running statistics in place.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, mode: BnMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let g = tape.constant(state.gamma.clone());
    let b = tape.constant(state.beta.clone());
    let y = tape.batch_norm(xid, g, b, state, mode)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.5]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.5]);
        assert!(relu(&Tensor::full(vec![4], -3.0)).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::new(vec![2], vec![0.5, 7.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
        assert!((sigmoid(&Tensor::scalar(20.0)).item() - 1.0).abs() < 1e-8);
        // Fixed from an independent high-precision evaluation of 1/(1+e^-1).
        assert!((sigmoid(&Tensor::scalar(1.0)).item() - 0.731_058_6).abs() < 1e-6);
    }

    #[test]
    fn identity_depthwise_plus_identity_pointwise_is_identity() {
        let x = Tensor::from_fn(vec![1, 2, 4, 4], |i| (i as f32).sin() * 0.5 + 0.5);
        // Centered delta per channel.
        let mut dw = Tensor::zeros(vec![2, 3, 3]);
        dw.data_mut()[4] = 1.0;
        dw.data_mut()[9 + 4] = 1.0;
        let pw = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv_separable(&x, &dw, &pw, 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let x = Tensor::from_fn(vec![2, 3, 5, 5], |i| i as f32);
        let dw = Tensor::zeros(vec![3, 3, 3]);
        let pw = Tensor::zeros(vec![4, 3]);
        let y = conv_separable(&x, &dw, &pw, 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    /// Direct nested-loop summation, written independently of the engine.
    fn conv_oracle_single(
        x: &[f32],
        (h, w): (usize, usize),
        k: &[f32],
        ksz: usize,
        stride: usize,
    ) -> Vec<f32> {
        // Same padding, matching ceil(in/stride) output extents.
        let ho = h.div_ceil(stride);
        let wo = w.div_ceil(stride);
        let pad_h = ((ho - 1) * stride + ksz).saturating_sub(h) / 2;
        let pad_w = ((wo - 1) * stride + ksz).saturating_sub(w) / 2;
        let mut out = vec![0.0; ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for i in 0..ksz {
                    for j in 0..ksz {
                        let ih = (oh * stride + i) as isize - pad_h as isize;
                        let iw = (ow * stride + j) as isize - pad_w as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                            acc += x[ih as usize * w + iw as usize] * k[i * ksz + j];
                        }
                    }
                }
                out[oh * wo + ow] = acc;
            }
        }
        out
    }

    #[test]
    fn strided_box_kernel_matches_nested_loop_oracle() {
        // 1x1x4x4 ramp, 3x3 box depthwise kernel, pointwise weight 1.0, stride 2.
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f32);
        let dw = Tensor::ones(vec![1, 3, 3]);
        let pw = Tensor::ones(vec![1, 1]);
        let y = conv_separable(&x, &dw, &pw, 2, Padding::Same).unwrap();
        let expected = conv_oracle_single(x.data(), (4, 4), &vec![1.0; 9], 3, 2);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for (got, want) in y.data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn batch_norm_constant_input_normalizes_to_beta() {
        let x = Tensor::full(vec![2, 1, 2, 2], 0.7);
        let mut state = BatchNormState::new(1);
        let y = batch_norm(&x, &mut state, BnMode::Train).unwrap();
        // Zero variance: output collapses to beta = 0 (within eps tolerance).
        assert!(y.data().iter().all(|&v| v.abs() < 1e-4), "{:?}", y.data());
    }

    #[test]
    fn batch_norm_gamma_zero_beta_five_is_constant_five() {
        let x = Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f32 * 0.05);
        let mut state = BatchNormState::new(2);
        state.gamma = Tensor::zeros(vec![2]);
        state.beta = Tensor::full(vec![2], 5.0);
        let y = batch_norm(&x, &mut state, BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batch_norm_matches_two_pass_statistics_oracle() {
        // Batch of two 1-channel 2x2 maps with known values.
        let vals = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let x = Tensor::new(vec![2, 1, 2, 2], vals.clone()).unwrap();
        let mut state = BatchNormState::new(1);
        let y = batch_norm(&x, &mut state, BnMode::Train).unwrap();
        // Independent two-pass mean/variance.
        let mean: f32 = vals.iter().sum::<f32>() / 8.0;
        let var: f32 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
        for (got, v) in y.data().iter().zip(&vals) {
            let want = (v - mean) / (var + state.eps).sqrt();
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        // Running statistics moved toward the batch statistics.
        let rm = state.running_mean.data()[0];
        assert!((rm - 0.01 * mean).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_infer_is_frozen_affine() {
        let mut state = BatchNormState::new(1);
        state.running_mean = Tensor::full(vec![1], 0.25);
        state.running_var = Tensor::full(vec![1], 0.5);
        let x = Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f32);
        let before = state.clone();
        let y = batch_norm(&x, &mut state, BnMode::Infer).unwrap();
        // Infer mode never touches running statistics.
        assert_eq!(state.running_mean, before.running_mean);
        assert_eq!(state.running_var, before.running_var);
        // Applying the affine twice composes affinely (direct computation).
        let y2 = batch_norm(&y, &mut state, BnMode::Infer).unwrap();
        let a = 1.0 / (0.5f32 + state.eps).sqrt();
        let b = -0.25 * a;
        for (&got, &xv) in y2.data().iter().zip(x.data()) {
            let want = a * (a * xv + b) + b;
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_on_stale_tape_is_a_contract_violation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let _ = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.backward(y, &Tensor::scalar(1.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_of_square_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.mean(sq);
        let mut grads = tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        let g = grads.take(x).unwrap();
        for (gv, xv) in g.data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((gv - 2.0 * xv / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(vec![1, 2, 2, 2], 1.0));
        let b = tape.leaf(Tensor::full(vec![1, 3, 2, 2], 2.0));
        let y = tape.concat_channels(a, b).unwrap();
        let m = tape.mean(y);
        let mut grads = tape.backward(m, &Tensor::scalar(1.0)).unwrap();
        let da = grads.take(a).unwrap();
        let db = grads.take(b).unwrap();
        assert_eq!(da.shape(), &[1, 2, 2, 2]);
        assert_eq!(db.shape(), &[1, 3, 2, 2]);
        let n = 20.0;
        assert!(da.data().iter().all(|&v| (v - 1.0 / n).abs() < 1e-7));
        assert!(db.data().iter().all(|&v| (v - 1.0 / n).abs() < 1e-7));
    }

    #[test]
    fn ops_are_deterministic_across_runs() {
        let x = Tensor::from_fn(vec![2, 4, 8, 8], |i| ((i * 2654435761) % 1000) as f32 / 1000.0);
        let dw = Tensor::from_fn(vec![4, 3, 3], |i| (i as f32* 0.21).sin());
        let pw = Tensor::from_fn(vec![6, 4], |i| (i as f32 * 0.13).cos());
        let a = conv_separable(&x, &dw, &pw, 2, Padding::Same).unwrap();
        let b = conv_separable(&x, &dw, &pw, 2, Padding::Same).unwrap();
        assert_eq!(a, b);
    }
}
