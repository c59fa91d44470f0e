//! Central finite-difference verification of every backward pass.
//!
//! Each named check builds a small scalar network around one operation and
//! compares the tape's analytic gradient against central differences over a
//! seeded sample of coordinates. The probed forward runs on [`F64Eval`], a
//! plain f64 evaluator of the same graph, so the difference quotient is not
//! drowned by f32 evaluation noise on coordinates with small gradients; the
//! division uses the actually-realized step, not the nominal one.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{BatchNormState, BnMode, Padding, Recorder, Tape};
use crate::error::{Error, Result};
use crate::loss::{self, LossWeights, SsimConfig};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub epsilon: f32,
    /// Coordinates sampled per checked tensor (all of them when smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            epsilon: 1e-3,
            max_coords: 200,
            seed: 0,
        }
    }
}

/// Max over sampled coordinates of
/// |analytic - central difference| / max(|analytic|, |central|, 1e-8).
pub fn finite_difference_check(
    forward: &mut dyn FnMut(&Tensor) -> Result<f64>,
    params: &Tensor,
    analytic: &Tensor,
    cfg: &FdConfig,
) -> Result<f32> {
    if cfg.epsilon <= 0.0 {
        return Err(Error::contract("finite-difference epsilon must be positive"));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::shape(format!(
            "analytic gradient shape {:?} != params shape {:?}",
            analytic.shape(),
            params.shape()
        )));
    }
    let base = forward(params)?;
    if !base.is_finite() {
        return Err(Error::contract(format!("non-finite forward value {base}")));
    }

    let mut coords: Vec<usize> = (0..params.numel()).collect();
    if coords.len() > cfg.max_coords {
        let mut rng = rng_from_seed(cfg.seed);
        coords.shuffle(&mut rng);
        coords.truncate(cfg.max_coords);
    }

    let mut max_rel = 0.0f32;
    let mut probe = params.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.epsilon;
        let hi = probe.data()[i];
        let plus = forward(&probe)?;
        probe.data_mut()[i] = orig - cfg.epsilon;
        let lo = probe.data()[i];
        let minus = forward(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::contract("non-finite forward value during probing"));
        }
        let central = ((plus - minus) / (hi - lo) as f64) as f32;
        let a = analytic.data()[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

// --- f64 reference evaluator ---

struct Val {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Val {
    fn dims4(&self) -> (usize, usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

/// Immediate f64 evaluation of the same graph a [`Tape`] would record.
/// Boundary handling is written directly against padded coordinates rather
/// than through materialized pad buffers, so it exercises the conventions
/// independently of the f32 kernels.
pub struct F64Eval {
    vals: Vec<Val>,
}

impl F64Eval {
    pub fn new() -> Self {
        F64Eval { vals: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.vals.push(Val { shape, data });
        self.vals.len() - 1
    }

    fn val(&self, id: usize) -> &Val {
        &self.vals[id]
    }

    fn binary(&mut self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Result<usize> {
        let (va, vb) = (&self.vals[a], &self.vals[b]);
        if va.shape != vb.shape {
            return Err(Error::shape("f64 eval: elementwise shape mismatch".to_string()));
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape.clone();
        Ok(self.push(shape, data))
    }
}

impl Default for F64Eval {
    fn default() -> Self {
        Self::new()
    }
}

fn same_pad_before(input: usize, kernel: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    ((out - 1) * stride + kernel).saturating_sub(input) / 2
}

impl Recorder for F64Eval {
    type Id = usize;

    fn constant(&mut self, t: Tensor) -> usize {
        let data = t.data().iter().map(|&v| v as f64).collect();
        self.push(t.shape().to_vec(), data)
    }

    fn shape_of(&self, id: usize) -> &[usize] {
        &self.vals[id].shape
    }

    fn scalar_value(&self, id: usize) -> f64 {
        self.vals[id].data[0]
    }

    fn depthwise_conv(&mut self, x: usize, k: usize, stride: usize, padding: Padding) -> Result<usize> {
        let (n, c, h, w) = self.val(x).dims4();
        let (kh, kw) = (self.val(k).shape[1], self.val(k).shape[2]);
        let (ho, wo, pt, pl) = match padding {
            Padding::Same => (
                h.div_ceil(stride),
                w.div_ceil(stride),
                same_pad_before(h, kh, stride),
                same_pad_before(w, kw, stride),
            ),
            Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
        };
        let mut out = vec![0.0f64; n * c * ho * wo];
        for item in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f64;
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (oh * stride + i) as isize - pt as isize;
                                let iw = (ow * stride + j) as isize - pl as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    let xv = self.val(x).data
                                        [((item * c + ch) * h + ih as usize) * w + iw as usize];
                                    let kv = self.val(k).data[(ch * kh + i) * kw + j];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((item * c + ch) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        Ok(self.push(vec![n, c, ho, wo], out))
    }

    fn pointwise_conv(&mut self, x: usize, k: usize) -> Result<usize> {
        let (n, c, h, w) = self.val(x).dims4();
        let co = self.val(k).shape[0];
        let hw = h * w;
        let mut out = vec![0.0f64; n * co * hw];
        for item in 0..n {
            for oc in 0..co {
                for p in 0..hw {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        acc += self.val(k).data[oc * c + ic] * self.val(x).data[(item * c + ic) * hw + p];
                    }
                    out[(item * co + oc) * hw + p] = acc;
                }
            }
        }
        Ok(self.push(vec![n, co, h, w], out))
    }

    fn bias_add(&mut self, x: usize, b: usize) -> Result<usize> {
        let (n, c, h, w) = self.val(x).dims4();
        let hw = h * w;
        let mut out = self.val(x).data.clone();
        for item in 0..n {
            for ch in 0..c {
                let bv = self.val(b).data[ch];
                for p in 0..hw {
                    out[(item * c + ch) * hw + p] += bv;
                }
            }
        }
        Ok(self.push(vec![n, c, h, w], out))
    }

    fn upsample_nearest(&mut self, x: usize, factor: usize) -> Result<usize> {
        let (n, c, h, w) = self.val(x).dims4();
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0f64; n * c * ho * wo];
        for plane in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    out[(plane * ho + oh) * wo + ow] =
                        self.val(x).data[(plane * h + oh / factor) * w + ow / factor];
                }
            }
        }
        Ok(self.push(vec![n, c, ho, wo], out))
    }

    fn batch_norm(
        &mut self,
        x: usize,
        gamma: usize,
        beta: usize,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<usize> {
        let (n, c, h, w) = self.val(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for item in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            mean[ch] += self.val(x).data[(item * c + ch) * hw + p];
                        }
                    }
                }
                for v in &mut mean {
                    *v /= m;
                }
                for item in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let d = self.val(x).data[(item * c + ch) * hw + p] - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                for v in &mut var {
                    *v /= m;
                }
                let mom = state.momentum;
                for ch in 0..c {
                    let rm = &mut state.running_mean.data_mut()[ch];
                    *rm = mom * *rm + (1.0 - mom) * mean[ch] as f32;
                    let rv = &mut state.running_var.data_mut()[ch];
                    *rv = mom * *rv + (1.0 - mom) * var[ch] as f32;
                }
                (mean, var)
            }
            BnMode::Infer => (
                state.running_mean.data().iter().map(|&v| v as f64).collect(),
                state.running_var.data().iter().map(|&v| v as f64).collect(),
            ),
        };
        let eps = state.eps as f64;
        let mut out = vec![0.0f64; n * c * hw];
        for item in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let (g, b) = (self.val(gamma).data[ch], self.val(beta).data[ch]);
                for p in 0..hw {
                    let at = (item * c + ch) * hw + p;
                    out[at] = g * (self.val(x).data[at] - mean[ch]) * inv + b;
                }
            }
        }
        Ok(self.push(vec![n, c, h, w], out))
    }

    fn relu(&mut self, x: usize) -> usize {
        let data = self.val(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.val(x).shape.clone();
        self.push(shape, data)
    }

    fn sigmoid(&mut self, x: usize) -> usize {
        let data = self.val(x).data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.val(x).shape.clone();
        self.push(shape, data)
    }

    fn concat_channels(&mut self, a: usize, b: usize) -> Result<usize> {
        let (n, ca, h, w) = self.val(a).dims4();
        let cb = self.val(b).shape[1];
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for item in 0..n {
            out.extend_from_slice(&self.val(a).data[item * ca * hw..(item + 1) * ca * hw]);
            out.extend_from_slice(&self.val(b).data[item * cb * hw..(item + 1) * cb * hw]);
        }
        Ok(self.push(vec![n, ca + cb, h, w], out))
    }

    fn add(&mut self, a: usize, b: usize) -> Result<usize> {
        self.binary(a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: usize, b: usize) -> Result<usize> {
        self.binary(a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: usize, b: usize) -> Result<usize> {
        self.binary(a, b, |x, y| x * y)
    }
    fn div(&mut self, a: usize, b: usize) -> Result<usize> {
        self.binary(a, b, |x, y| x / y)
    }

    fn affine(&mut self, x: usize, scale: f32, shift: f32) -> usize {
        let (s, t) = (scale as f64, shift as f64);
        let data = self.val(x).data.iter().map(|&v| s * v + t).collect();
        let shape = self.val(x).shape.clone();
        self.push(shape, data)
    }

    fn mean(&mut self, x: usize) -> usize {
        let m = self.val(x).data.iter().sum::<f64>() / self.val(x).data.len() as f64;
        self.push(vec![1], vec![m])
    }
}

// --- op scenarios ---

#[derive(Clone)]
enum CheckOp {
    Depthwise { stride: usize, padding: Padding },
    Pointwise,
    Separable { stride: usize },
    BiasAdd,
    Upsample { factor: usize },
    BatchNorm { mode: BnMode },
    Relu,
    Sigmoid,
    Concat,
    Elementwise,
    Loss { weights: LossWeights },
}

/// One op wrapped in a fixed-weight scalar head, with `slot` marking the
/// differentiated input.
struct OpNet {
    op: CheckOp,
    tensors: Vec<Tensor>,
    slot: usize,
    head_seed: u64,
}

impl OpNet {
    fn params(&self) -> &Tensor {
        &self.tensors[self.slot]
    }

    fn build<R: Recorder>(&self, rec: &mut R, p: R::Id) -> Result<R::Id> {
        let ids: Vec<R::Id> = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if i == self.slot { p } else { rec.constant(t.clone()) })
            .collect();
        let y = match &self.op {
            CheckOp::Depthwise { stride, padding } => rec.depthwise_conv(ids[0], ids[1], *stride, *padding)?,
            CheckOp::Pointwise => rec.pointwise_conv(ids[0], ids[1])?,
            CheckOp::Separable { stride } => {
                let mid = rec.depthwise_conv(ids[0], ids[1], *stride, Padding::Same)?;
                rec.pointwise_conv(mid, ids[2])?
            }
            CheckOp::BiasAdd => rec.bias_add(ids[0], ids[1])?,
            CheckOp::Upsample { factor } => rec.upsample_nearest(ids[0], *factor)?,
            CheckOp::BatchNorm { mode } => {
                let mut state = BatchNormState::new(self.tensors[1].numel());
                state.running_mean = Tensor::full(vec![state.channels()], 0.4);
                state.running_var = Tensor::full(vec![state.channels()], 0.2);
                rec.batch_norm(ids[0], ids[1], ids[2], &mut state, *mode)?
            }
            CheckOp::Relu => rec.relu(ids[0]),
            CheckOp::Sigmoid => rec.sigmoid(ids[0]),
            CheckOp::Concat => rec.concat_channels(ids[0], ids[1])?,
            CheckOp::Elementwise => {
                // y = (p * (p + o)) / (o + (0.5p + 0.8)), all terms positive.
                let sum = rec.add(ids[0], ids[1])?;
                let num = rec.mul(ids[0], sum)?;
                let shifted = rec.affine(ids[0], 0.5, 0.8);
                let den = rec.add(ids[1], shifted)?;
                rec.div(num, den)?
            }
            CheckOp::Loss { weights } => {
                return loss::loss_on_tape(rec, ids[0], ids[1], *weights, &SsimConfig::default());
            }
        };
        // Weighted-mean head: every output coordinate contributes with its
        // own fixed sensitivity.
        let w = uniform(rec.shape_of(y).to_vec(), 0.5, 1.5, self.head_seed);
        let wid = rec.constant(w);
        let wy = rec.mul(y, wid)?;
        Ok(rec.mean(wy))
    }
}

fn uniform(shape: Vec<usize>, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in [-1, -margin] u [margin, 1], clear of the relu kink.
fn uniform_away_from_zero(shape: Vec<usize>, margin: f32, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn check_net(net: &OpNet, cfg: &FdConfig) -> Result<f32> {
    let params = net.params().clone();
    let mut tape = Tape::new();
    let p = tape.leaf(params.clone());
    let out = net.build(&mut tape, p)?;
    let mut grads = tape.backward(out, &Tensor::scalar(1.0))?;
    let analytic = grads
        .take(p)
        .ok_or_else(|| Error::contract("no gradient reached the checked tensor"))?;

    let mut forward = |t: &Tensor| -> Result<f64> {
        let mut ev = F64Eval::new();
        let p = ev.constant(t.clone());
        let out = net.build(&mut ev, p)?;
        Ok(ev.scalar_value(out))
    };
    finite_difference_check(&mut forward, &params, &analytic, cfg)
}

pub struct GradCheckReport {
    pub name: &'static str,
    pub max_rel_error: f32,
    pub tolerance: f32,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

const LAYER_TOL: f32 = 1e-3;
const LOSS_TOL: f32 = 5e-3;
/// Step for piecewise-linear ops, where central differences are exact.
const EPS_LINEAR: f32 = 1e-2;
/// Step for smooth nonlinear ops.
const EPS_SMOOTH: f32 = 3e-3;

pub const OP_NAMES: &[&str] = &[
    "depthwise_conv",
    "pointwise_conv",
    "conv_separable",
    "bias_add",
    "upsample_nearest",
    "batch_norm_train",
    "batch_norm_infer",
    "relu",
    "sigmoid",
    "concat_channels",
    "elementwise",
    "mse_loss",
    "ssim_loss",
    "combined_loss",
];

/// Runs one named check; `tolerance` overrides the built-in threshold.
pub fn check_op(name: &str, tolerance: Option<f32>) -> Result<GradCheckReport> {
    let lin = FdConfig { epsilon: EPS_LINEAR, ..Default::default() };
    let smooth = FdConfig { epsilon: EPS_SMOOTH, ..Default::default() };

    // Convolution weights are kept positive so no sampled coordinate sits in
    // a near-cancellation of path products, where a relative comparison
    // carries no signal.
    let (static_name, default_tol, nets): (&'static str, f32, Vec<(OpNet, FdConfig)>) = match name {
        "depthwise_conv" => {
            let x = uniform(vec![2, 3, 10, 10], 0.1, 1.0, 10);
            let k = uniform(vec![3, 3, 3], 0.1, 0.6, 11);
            let strided = OpNet {
                op: CheckOp::Depthwise { stride: 2, padding: Padding::Same },
                tensors: vec![x.clone(), k.clone()],
                slot: 0,
                head_seed: 12,
            };
            let valid = OpNet {
                op: CheckOp::Depthwise { stride: 1, padding: Padding::Valid },
                tensors: vec![x, k],
                slot: 1,
                head_seed: 13,
            };
            ("depthwise_conv", LAYER_TOL, vec![(strided, lin), (valid, lin)])
        }
        "pointwise_conv" => {
            let x = uniform(vec![2, 4, 8, 8], 0.1, 1.0, 20);
            let k = uniform(vec![5, 4], 0.1, 0.6, 21);
            let nets = (0..2)
                .map(|slot| {
                    (
                        OpNet {
                            op: CheckOp::Pointwise,
                            tensors: vec![x.clone(), k.clone()],
                            slot,
                            head_seed: 22 + slot as u64,
                        },
                        lin,
                    )
                })
                .collect();
            ("pointwise_conv", LAYER_TOL, nets)
        }
        "conv_separable" => {
            let x = uniform(vec![2, 3, 8, 8], 0.1, 1.0, 30);
            let dw = uniform(vec![3, 3, 3], 0.1, 0.6, 31);
            let pw = uniform(vec![4, 3], 0.1, 0.6, 32);
            let nets = (0..3)
                .map(|slot| {
                    (
                        OpNet {
                            op: CheckOp::Separable { stride: 2 },
                            tensors: vec![x.clone(), dw.clone(), pw.clone()],
                            slot,
                            head_seed: 33 + slot as u64,
                        },
                        lin,
                    )
                })
                .collect();
            ("conv_separable", LAYER_TOL, nets)
        }
        "bias_add" => {
            let x = uniform(vec![2, 4, 6, 6], 0.1, 1.0, 40);
            let b = uniform(vec![4], -0.5, 0.5, 41);
            let nets = (0..2)
                .map(|slot| {
                    (
                        OpNet {
                            op: CheckOp::BiasAdd,
                            tensors: vec![x.clone(), b.clone()],
                            slot,
                            head_seed: 42 + slot as u64,
                        },
                        lin,
                    )
                })
                .collect();
            ("bias_add", LAYER_TOL, nets)
        }
        "upsample_nearest" => {
            let x = uniform(vec![2, 3, 5, 7], 0.1, 1.0, 50);
            let net = OpNet {
                op: CheckOp::Upsample { factor: 2 },
                tensors: vec![x],
                slot: 0,
                head_seed: 51,
            };
            ("upsample_nearest", LAYER_TOL, vec![(net, lin)])
        }
        "batch_norm_train" | "batch_norm_infer" => {
            let mode = if name == "batch_norm_train" { BnMode::Train } else { BnMode::Infer };
            let x = uniform(vec![2, 3, 6, 6], 0.0, 1.0, 60);
            let gamma = uniform(vec![3], 0.5, 1.5, 61);
            let beta = uniform(vec![3], -0.5, 0.5, 62);
            let nets = (0..3)
                .map(|slot| {
                    (
                        OpNet {
                            op: CheckOp::BatchNorm { mode },
                            tensors: vec![x.clone(), gamma.clone(), beta.clone()],
                            slot,
                            head_seed: 63 + slot as u64,
                        },
                        smooth,
                    )
                })
                .collect();
            let label = if mode == BnMode::Train { "batch_norm_train" } else { "batch_norm_infer" };
            (label, LAYER_TOL, nets)
        }
        "relu" => {
            let x = uniform_away_from_zero(vec![2, 4, 8, 8], 12.0 * EPS_LINEAR, 70);
            let net = OpNet {
                op: CheckOp::Relu,
                tensors: vec![x],
                slot: 0,
                head_seed: 71,
            };
            ("relu", LAYER_TOL, vec![(net, lin)])
        }
        "sigmoid" => {
            let x = uniform(vec![2, 4, 8, 8], -2.0, 2.0, 80);
            let net = OpNet {
                op: CheckOp::Sigmoid,
                tensors: vec![x],
                slot: 0,
                head_seed: 81,
            };
            ("sigmoid", LAYER_TOL, vec![(net, smooth)])
        }
        "concat_channels" => {
            let a = uniform(vec![2, 2, 6, 6], 0.1, 1.0, 90);
            let b = uniform(vec![2, 3, 6, 6], 0.1, 1.0, 91);
            let nets = (0..2)
                .map(|slot| {
                    (
                        OpNet {
                            op: CheckOp::Concat,
                            tensors: vec![a.clone(), b.clone()],
                            slot,
                            head_seed: 92 + slot as u64,
                        },
                        lin,
                    )
                })
                .collect();
            ("concat_channels", LAYER_TOL, nets)
        }
        "elementwise" => {
            let x = uniform(vec![2, 3, 4, 4], 0.3, 1.0, 100);
            let o = uniform(vec![2, 3, 4, 4], 0.3, 1.0, 101);
            let net = OpNet {
                op: CheckOp::Elementwise,
                tensors: vec![x, o],
                slot: 0,
                head_seed: 102,
            };
            ("elementwise", LAYER_TOL, vec![(net, smooth)])
        }
        "mse_loss" => {
            let pred = uniform(vec![1, 3, 12, 12], 0.0, 1.0, 110);
            let target = uniform(vec![1, 3, 12, 12], 0.0, 1.0, 111);
            let net = OpNet {
                op: CheckOp::Loss { weights: LossWeights { mse: 1.0, ssim: 0.0 } },
                tensors: vec![pred, target],
                slot: 0,
                head_seed: 112,
            };
            ("mse_loss", LOSS_TOL, vec![(net, lin)])
        }
        "ssim_loss" => {
            let pred = uniform(vec![1, 2, 16, 16], 0.0, 1.0, 120);
            let target = uniform(vec![1, 2, 16, 16], 0.0, 1.0, 121);
            let net = OpNet {
                op: CheckOp::Loss { weights: LossWeights { mse: 0.0, ssim: 1.0 } },
                tensors: vec![pred, target],
                slot: 0,
                head_seed: 122,
            };
            ("ssim_loss", LOSS_TOL, vec![(net, smooth)])
        }
        "combined_loss" => {
            let pred = uniform(vec![1, 2, 16, 16], 0.0, 1.0, 130);
            let target = uniform(vec![1, 2, 16, 16], 0.0, 1.0, 131);
            let net = OpNet {
                op: CheckOp::Loss { weights: LossWeights::default() },
                tensors: vec![pred, target],
                slot: 0,
                head_seed: 132,
            };
            ("combined_loss", LOSS_TOL, vec![(net, smooth)])
        }
        other => {
            return Err(Error::contract(format!(
                "unknown gradcheck op '{other}'; known: all, {}",
                OP_NAMES.join(", ")
            )))
        }
    };

    let mut max_err = 0.0f32;
    for (net, cfg) in &nets {
        max_err = max_err.max(check_net(net, cfg)?);
    }
    Ok(GradCheckReport {
        name: static_name,
        max_rel_error: max_err,
        tolerance: tolerance.unwrap_or(default_tol),
    })
}

/// Runs every check (or one, when `op` names it).
pub fn run(op: Option<&str>, tolerance: Option<f32>) -> Result<Vec<GradCheckReport>> {
    match op {
        Some("all") | None => OP_NAMES.iter().map(|n| check_op(n, tolerance)).collect(),
        Some(name) => Ok(vec![check_op(name, tolerance)?]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum(x^2), analytic gradient 2x.
        let x = uniform(vec![4, 5], -1.0, 1.0, 1);
        let analytic = x.map(|v| 2.0 * v);
        let mut forward = |t: &Tensor| -> Result<f64> {
            Ok(t.data().iter().map(|&v| (v as f64) * (v as f64)).sum())
        };
        let err = finite_difference_check(&mut forward, &x, &analytic, &FdConfig::default()).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn relu_sum_away_from_kink_checks_out() {
        let x = uniform_away_from_zero(vec![6, 6], 0.05, 2);
        let analytic = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mut forward = |t: &Tensor| -> Result<f64> {
            Ok(t.data().iter().map(|&v| v.max(0.0) as f64).sum())
        };
        let err = finite_difference_check(&mut forward, &x, &analytic, &FdConfig::default()).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_forward_is_a_contract_violation() {
        let x = Tensor::scalar(1.0);
        let analytic = Tensor::scalar(1.0);
        let mut forward = |_: &Tensor| -> Result<f64> { Ok(f64::NAN) };
        assert!(matches!(
            finite_difference_check(&mut forward, &x, &analytic, &FdConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ssim_loss_fd_on_32x32_images() {
        // SSIM loss between two random 32x32 images w.r.t. the first.
        let pred = uniform(vec![1, 1, 32, 32], 0.0, 1.0, 3);
        let target = uniform(vec![1, 1, 32, 32], 0.0, 1.0, 4);
        let net = OpNet {
            op: CheckOp::Loss { weights: LossWeights { mse: 0.0, ssim: 1.0 } },
            tensors: vec![pred, target],
            slot: 0,
            head_seed: 5,
        };
        let cfg = FdConfig { epsilon: EPS_SMOOTH, ..Default::default() };
        let err = check_net(&net, &cfg).unwrap();
        assert!(err < 5e-3, "{err}");
    }

    #[test]
    fn f64_eval_agrees_with_f32_forward() {
        // The probing evaluator must describe the same function the tape does.
        for name in ["conv_separable", "batch_norm_train", "ssim_loss"] {
            let report = check_op(name, None).unwrap();
            // check_op already compares analytic-vs-FD; here it suffices that
            // it ran without a gross disagreement.
            assert!(report.max_rel_error < 0.1, "{name}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn every_op_passes_at_default_tolerances() {
        for report in run(None, None).unwrap() {
            assert!(
                report.passed(),
                "{}: {} >= {}",
                report.name,
                report.max_rel_error,
                report.tolerance
            );
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert!(check_op("warp_drive", None).is_err());
    }
}
