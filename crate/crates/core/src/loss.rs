//! Reconstruction losses and image-quality metrics: MSE, PSNR, windowed
//! SSIM, and the weighted MSE+SSIM training loss.
//!
//! SSIM statistics are taken over sliding windows that never cross the
//! image border, per channel, and averaged over all valid centers. The
//! same construction is recorded on a tape when the loss must be
//! differentiated, so the metric and the loss cannot drift apart.

use crate::autodiff::{Padding, Recorder, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowWeights {
    Uniform,
    Gaussian { sigma: f32 },
}

#[derive(Clone, Copy, Debug)]
pub struct SsimConfig {
    /// Window radius N; the window spans (2N+1) x (2N+1) pixels.
    pub window_radius: usize,
    pub weights: WindowWeights,
    pub k1: f32,
    pub k2: f32,
    /// Dynamic range L of the image values.
    pub dynamic_range: f32,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_radius: 5,
            weights: WindowWeights::Gaussian { sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn uniform(window_radius: usize) -> Self {
        SsimConfig {
            window_radius,
            weights: WindowWeights::Uniform,
            ..Default::default()
        }
    }

    pub fn window_size(&self) -> usize {
        2 * self.window_radius + 1
    }

    pub fn c1(&self) -> f32 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f32 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// The normalized window, shared by every channel: [channels, k, k].
    fn window_kernel(&self, channels: usize) -> Tensor {
        let k = self.window_size();
        let r = self.window_radius as f32;
        let mut w = vec![0.0f32; k * k];
        match self.weights {
            WindowWeights::Uniform => w.fill(1.0),
            WindowWeights::Gaussian { sigma } => {
                for i in 0..k {
                    for j in 0..k {
                        let d2 = (i as f32 - r).powi(2) + (j as f32 - r).powi(2);
                        w[i * k + j] = (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        let sum: f32 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        let mut data = Vec::with_capacity(channels * k * k);
        for _ in 0..channels {
            data.extend_from_slice(&w);
        }
        Tensor::new(vec![channels, k, k], data).expect("window kernel shape")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub mse: f32,
    pub ssim: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mse: 1.0, ssim: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.mse < 0.0 || self.ssim < 0.0 {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if self.mse == 0.0 && self.ssim == 0.0 {
            return Err(Error::contract("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Mse,
    Ssim,
    Combined,
}

impl LossMode {
    /// The effective term weights for this mode.
    pub fn effective_weights(&self, w: LossWeights) -> LossWeights {
        match self {
            LossMode::Mse => LossWeights { mse: w.mse, ssim: 0.0 },
            LossMode::Ssim => LossWeights { mse: 0.0, ssim: w.ssim.max(1.0) },
            LossMode::Combined => w,
        }
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric over mismatched shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over all elements of (a - b)^2, accumulated in f64.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    Ok(mse64(a, b)? as f32)
}

fn mse64(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// 10 * log10(max^2 / mse); a zero MSE reports the infinite-PSNR sentinel.
pub fn psnr(a: &Tensor, b: &Tensor, max_value: f32) -> Result<f32> {
    if max_value <= 0.0 {
        return Err(Error::contract("psnr max_value must be positive"));
    }
    Ok(psnr_from_mse(mse64(a, b)?, max_value as f64))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f32 {
    if mse <= 0.0 {
        return f32::INFINITY;
    }
    (10.0 * (max_value * max_value / mse).log10()) as f32
}

fn view_nchw(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims_nchw()?;
    Tensor::new(vec![n, c, h, w], t.data().to_vec())
}

/// Records the mean SSIM of two same-shaped NCHW images on any evaluator.
///
/// Statistics come from valid-position window means computed as a depthwise
/// convolution against the fixed window kernel, so the whole expression is
/// differentiable when recorded on a tape.
pub fn ssim_on_tape<R: Recorder>(
    tape: &mut R,
    img_a: R::Id,
    img_b: R::Id,
    cfg: &SsimConfig,
) -> Result<R::Id> {
    let (c, h, w) = match *tape.shape_of(img_a) {
        [_, c, h, w] => (c, h, w),
        ref other => return Err(Error::shape(format!("ssim expects NCHW, got {other:?}"))),
    };
    let k = cfg.window_size();
    if h < k || w < k {
        return Err(Error::contract(format!(
            "image {h}x{w} smaller than the {k}x{k} SSIM window"
        )));
    }
    let win = tape.constant(cfg.window_kernel(c));
    let (c1, c2) = (cfg.c1(), cfg.c2());

    let mu_a = tape.depthwise_conv(img_a, win, 1, Padding::Valid)?;
    let mu_b = tape.depthwise_conv(img_b, win, 1, Padding::Valid)?;
    let aa = tape.mul(img_a, img_a)?;
    let bb = tape.mul(img_b, img_b)?;
    let ab = tape.mul(img_a, img_b)?;
    let m_aa = tape.depthwise_conv(aa, win, 1, Padding::Valid)?;
    let m_bb = tape.depthwise_conv(bb, win, 1, Padding::Valid)?;
    let m_ab = tape.depthwise_conv(ab, win, 1, Padding::Valid)?;

    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(m_aa, mu_a2)?;
    let var_b = tape.sub(m_bb, mu_b2)?;
    let cov = tape.sub(m_ab, mu_ab)?;

    // ((2*mu_a*mu_b + c1) * (2*cov + c2)) / ((mu_a^2 + mu_b^2 + c1) * (var_a + var_b + c2))
    let num_l = tape.affine(mu_ab, 2.0, c1);
    let num_r = tape.affine(cov, 2.0, c2);
    let num = tape.mul(num_l, num_r)?;
    let mu_b2_c1 = tape.affine(mu_b2, 1.0, c1);
    let den_l = tape.add(mu_a2, mu_b2_c1)?;
    let var_b_c2 = tape.affine(var_b, 1.0, c2);
    let den_r = tape.add(var_a, var_b_c2)?;
    let den = tape.mul(den_l, den_r)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// Mean SSIM over valid window centers and channels, in [-1, 1].
pub fn ssim_mean(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f32> {
    check_same_shape(a, b)?;
    let mut tape = Tape::new();
    let ia = tape.constant(view_nchw(a)?);
    let ib = tape.constant(view_nchw(b)?);
    let s = ssim_on_tape(&mut tape, ia, ib, cfg)?;
    Ok(tape.value(s).item())
}

/// Records `w.mse * MSE(pred, target) + w.ssim * (1 - SSIM(pred, target))`,
/// building only the branches whose weight is nonzero.
pub fn loss_on_tape<R: Recorder>(
    tape: &mut R,
    pred: R::Id,
    target: R::Id,
    weights: LossWeights,
    cfg: &SsimConfig,
) -> Result<R::Id> {
    weights.validate()?;
    let mut total: Option<R::Id> = None;
    if weights.mse > 0.0 {
        let d = tape.sub(pred, target)?;
        let sq = tape.mul(d, d)?;
        let m = tape.mean(sq);
        total = Some(tape.affine(m, weights.mse, 0.0));
    }
    if weights.ssim > 0.0 {
        let s = ssim_on_tape(tape, pred, target, cfg)?;
        // w * (1 - s)
        let term = tape.affine(s, -weights.ssim, weights.ssim);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::contract("no active loss term"))
}

/// The scalar combined loss without a graph, for reporting.
pub fn combined_loss(pred: &Tensor, target: &Tensor, weights: LossWeights, cfg: &SsimConfig) -> Result<f32> {
    weights.validate()?;
    let mut total = 0.0f64;
    if weights.mse > 0.0 {
        total += weights.mse as f64 * mse64(pred, target)?;
    }
    if weights.ssim > 0.0 {
        total += weights.ssim as f64 * (1.0 - ssim_mean(pred, target, cfg)? as f64);
    }
    Ok(total as f32)
}
