//! Forward and backward computations for every layer operation.
//!
//! These are plain functions over [`Tensor`]s; the tape in the parent module
//! records which of them ran and replays the backward halves in reverse.
//! Convolutions parallelize over independent output planes, which keeps
//! results bitwise identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so the output extent is ceil(in/stride).
    Same,
    /// No padding; the kernel never leaves the input.
    Valid,
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Same => Ok(input.div_ceil(stride)),
        Padding::Valid => {
            if input < kernel {
                Err(Error::shape(format!(
                    "valid convolution needs input >= kernel, got {input} < {kernel}"
                )))
            } else {
                Ok((input - kernel) / stride + 1)
            }
        }
    }
}

/// (before, after) zero-pad amounts along one axis; the extra pixel of an odd
/// total goes after, matching the usual same-padding convention.
fn pad_amounts(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            (total / 2, total - total / 2)
        }
    }
}

fn depthwise_dims(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    match *k.shape() {
        [kc, kh, kw] => {
            if kc != c {
                return Err(Error::shape(format!(
                    "depthwise kernel count {kc} != input channels {c}"
                )));
            }
            Ok((n, c, h, w, kh, kw))
        }
        ref other => Err(Error::shape(format!(
            "depthwise kernels must be [channels, kh, kw], got {other:?}"
        ))),
    }
}

/// Zero-pads the spatial axes of an NCHW tensor.
fn pad_spatial(x: &Tensor, pt: usize, pb: usize, pl: usize, pr: usize) -> Tensor {
    if pt == 0 && pb == 0 && pl == 0 && pr == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.dims4().expect("pad_spatial on non-4d tensor");
    let (hp, wp) = (h + pt + pb, w + pl + pr);
    let mut out = Tensor::zeros(vec![n, c, hp, wp]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for row in 0..h {
            let s = plane * h * w + row * w;
            let d = plane * hp * wp + (row + pt) * wp + pl;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Per-channel spatial convolution (depthwise, multiplier 1).
pub fn depthwise_forward(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::contract("stride must be positive"));
    }
    let (n, c, h, w, kh, kw) = depthwise_dims(x, k)?;
    let ho = conv_out_extent(h, kh, stride, padding)?;
    let wo = conv_out_extent(w, kw, stride, padding)?;
    let (pt, pb) = pad_amounts(h, kh, stride, padding);
    let (pl, pr) = pad_amounts(w, kw, stride, padding);
    let xp = pad_spatial(x, pt, pb, pl, pr);
    let (hp, wp) = (h + pt + pb, w + pl + pr);

    let mut y = Tensor::zeros(vec![n, c, ho, wo]);
    let xpd = xp.data();
    let kd = k.data();
    y.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(plane, out)| {
            let ch = plane % c;
            let xplane = &xpd[plane * hp * wp..(plane + 1) * hp * wp];
            let kern = &kd[ch * kh * kw..(ch + 1) * kh * kw];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f32;
                    for i in 0..kh {
                        let row = &xplane[(oh * stride + i) * wp + ow * stride..];
                        let krow = &kern[i * kw..i * kw + kw];
                        for (j, &kv) in krow.iter().enumerate() {
                            acc += row[j] * kv;
                        }
                    }
                    out[oh * wo + ow] = acc;
                }
            }
        });
    Ok(y)
}

/// Gradients of [`depthwise_forward`] with respect to the input and kernel.
pub fn depthwise_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: Padding,
    want_dx: bool,
    want_dk: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (n, c, h, w, kh, kw) = depthwise_dims(x, k)?;
    let (_, _, ho, wo) = dy.dims4()?;
    let (pt, pb) = pad_amounts(h, kh, stride, padding);
    let (pl, pr) = pad_amounts(w, kw, stride, padding);
    let (hp, wp) = (h + pt + pb, w + pl + pr);
    let xp = pad_spatial(x, pt, pb, pl, pr);
    let xpd = xp.data();
    let kd = k.data();
    let dyd = dy.data();

    // Each plane owns its padded-dx buffer and kernel partial; partials are
    // reduced in plane order afterwards so the sum is deterministic.
    let per_plane: Vec<(Vec<f32>, Vec<f64>)> = (0..n * c)
        .into_par_iter()
        .map(|plane| {
            let ch = plane % c;
            let xplane = &xpd[plane * hp * wp..(plane + 1) * hp * wp];
            let kern = &kd[ch * kh * kw..(ch + 1) * kh * kw];
            let dyplane = &dyd[plane * ho * wo..(plane + 1) * ho * wo];
            let mut dxp = if want_dx { vec![0.0f32; hp * wp] } else { Vec::new() };
            let mut dkp = if want_dk { vec![0.0f64; kh * kw] } else { Vec::new() };
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dyplane[oh * wo + ow];
                    if g == 0.0 {
                        continue;
                    }
                    let base = (oh * stride) * wp + ow * stride;
                    for i in 0..kh {
                        for j in 0..kw {
                            let at = base + i * wp + j;
                            if want_dx {
                                dxp[at] += kern[i * kw + j] * g;
                            }
                            if want_dk {
                                dkp[i * kw + j] += (xplane[at] * g) as f64;
                            }
                        }
                    }
                }
            }
            (dxp, dkp)
        })
        .collect();

    let dx = if want_dx {
        let mut dx = Tensor::zeros(vec![n, c, h, w]);
        let dxd = dx.data_mut();
        for (plane, (dxp, _)) in per_plane.iter().enumerate() {
            for row in 0..h {
                let s = (row + pt) * wp + pl;
                let d = plane * h * w + row * w;
                for col in 0..w {
                    dxd[d + col] = dxp[s + col];
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    let dk = if want_dk {
        let mut dk = vec![0.0f64; c * kh * kw];
        for (plane, (_, dkp)) in per_plane.iter().enumerate() {
            let ch = plane % c;
            for (i, v) in dkp.iter().enumerate() {
                dk[ch * kh * kw + i] += v;
            }
        }
        Some(Tensor::new(
            vec![c, kh, kw],
            dk.into_iter().map(|v| v as f32).collect(),
        )?)
    } else {
        None
    };

    Ok((dx, dk))
}

fn pointwise_dims(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    match *k.shape() {
        [co, ci] => {
            if ci != c {
                return Err(Error::shape(format!(
                    "pointwise kernel input channels {ci} != feature channels {c}"
                )));
            }
            Ok((n, c, h, w, co))
        }
        ref other => Err(Error::shape(format!(
            "pointwise kernels must be [out_channels, in_channels], got {other:?}"
        ))),
    }
}

/// 1x1 cross-channel convolution; kernel is [out_channels, in_channels].
pub fn pointwise_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, c, h, w, co) = pointwise_dims(x, k)?;
    let hw = h * w;
    let mut y = Tensor::zeros(vec![n, co, h, w]);
    let xd = x.data();
    let kd = k.data();
    y.data_mut()
        .par_chunks_mut(co * hw)
        .enumerate()
        .for_each(|(item, yb)| {
            let xb = &xd[item * c * hw..(item + 1) * c * hw];
            for (oc, yplane) in yb.chunks_mut(hw).enumerate() {
                let krow = &kd[oc * c..(oc + 1) * c];
                for (ic, &kv) in krow.iter().enumerate() {
                    let xplane = &xb[ic * hw..(ic + 1) * hw];
                    for (yv, &xv) in yplane.iter_mut().zip(xplane) {
                        *yv += kv * xv;
                    }
                }
            }
        });
    Ok(y)
}

/// Gradients of [`pointwise_forward`].
pub fn pointwise_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    want_dx: bool,
    want_dk: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (n, c, h, w, co) = pointwise_dims(x, k)?;
    let hw = h * w;
    let xd = x.data();
    let kd = k.data();
    let dyd = dy.data();

    let dx = if want_dx {
        let mut dx = Tensor::zeros(vec![n, c, h, w]);
        dx.data_mut()
            .par_chunks_mut(c * hw)
            .enumerate()
            .for_each(|(item, dxb)| {
                let dyb = &dyd[item * co * hw..(item + 1) * co * hw];
                for oc in 0..co {
                    let dyplane = &dyb[oc * hw..(oc + 1) * hw];
                    let krow = &kd[oc * c..(oc + 1) * c];
                    for (ic, &kv) in krow.iter().enumerate() {
                        let dxplane = &mut dxb[ic * hw..(ic + 1) * hw];
                        for (dv, &gv) in dxplane.iter_mut().zip(dyplane) {
                            *dv += kv * gv;
                        }
                    }
                }
            });
        Some(dx)
    } else {
        None
    };

    let dk = if want_dk {
        let partials: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|item| {
                let xb = &xd[item * c * hw..(item + 1) * c * hw];
                let dyb = &dyd[item * co * hw..(item + 1) * co * hw];
                let mut part = vec![0.0f64; co * c];
                for oc in 0..co {
                    let dyplane = &dyb[oc * hw..(oc + 1) * hw];
                    for ic in 0..c {
                        let xplane = &xb[ic * hw..(ic + 1) * hw];
                        let mut acc = 0.0f64;
                        for (&gv, &xv) in dyplane.iter().zip(xplane) {
                            acc += (gv * xv) as f64;
                        }
                        part[oc * c + ic] = acc;
                    }
                }
                part
            })
            .collect();
        let mut dk = vec![0.0f64; co * c];
        for part in &partials {
            for (acc, v) in dk.iter_mut().zip(part) {
                *acc += v;
            }
        }
        Some(Tensor::new(
            vec![co, c],
            dk.into_iter().map(|v| v as f32).collect(),
        )?)
    } else {
        None
    };

    Ok((dx, dk))
}

/// Adds a per-channel bias to an NCHW tensor.
pub fn bias_add_forward(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if b.shape() != [c] {
        return Err(Error::shape(format!(
            "bias length {:?} != channel count {c}",
            b.shape()
        )));
    }
    let hw = h * w;
    let bd = b.data();
    let mut y = x.clone();
    for (plane, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
        let bv = bd[plane % c];
        for v in chunk {
            *v += bv;
        }
    }
    let _ = n;
    Ok(y)
}

/// Gradient of the bias in [`bias_add_forward`]; the input gradient is `dy` itself.
pub fn bias_add_backward_bias(dy: &Tensor, channels: usize) -> Result<Tensor> {
    let (_, c, h, w) = dy.dims4()?;
    debug_assert_eq!(c, channels);
    let hw = h * w;
    let mut db = vec![0.0f64; c];
    for (plane, chunk) in dy.data().chunks(hw).enumerate() {
        let acc: f64 = chunk.iter().map(|&v| v as f64).sum();
        db[plane % c] += acc;
    }
    Tensor::new(vec![c], db.into_iter().map(|v| v as f32).collect())
}

/// Nearest-neighbor upsampling: each cell becomes a factor x factor block.
pub fn upsample_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::contract("upsample factor must be >= 1"));
    }
    let (n, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut y = Tensor::zeros(vec![n, c, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..n * c {
        for oh in 0..ho {
            let src = plane * h * w + (oh / factor) * w;
            let dst = plane * ho * wo + oh * wo;
            for ow in 0..wo {
                yd[dst + ow] = xd[src + ow / factor];
            }
        }
    }
    Ok(y)
}

/// Backward of nearest-neighbor upsampling: block sums flow to the source cell.
pub fn upsample_backward(dy: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.dims4()?;
    if factor == 1 {
        return Ok(dy.clone());
    }
    let (h, w) = (ho / factor, wo / factor);
    let mut dx = Tensor::zeros(vec![n, c, h, w]);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for plane in 0..n * c {
        for oh in 0..ho {
            let dst = plane * h * w + (oh / factor) * w;
            let src = plane * ho * wo + oh * wo;
            for ow in 0..wo {
                dxd[dst + ow / factor] += dyd[src + ow];
            }
        }
    }
    Ok(dx)
}

/// Concatenates two NCHW tensors along the channel axis, `a` first.
pub fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if na != nb || ha != hb || wa != wb {
        return Err(Error::shape(format!(
            "concat_channels needs equal batch and spatial extents, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(vec![na, ca + cb, ha, wa]);
    let plane = ha * wa;
    let yd = y.data_mut();
    for item in 0..na {
        let dst = item * (ca + cb) * plane;
        yd[dst..dst + ca * plane]
            .copy_from_slice(&a.data()[item * ca * plane..(item + 1) * ca * plane]);
        yd[dst + ca * plane..dst + (ca + cb) * plane]
            .copy_from_slice(&b.data()[item * cb * plane..(item + 1) * cb * plane]);
    }
    Ok(y)
}

/// Splits an upstream gradient back into the two concatenated shapes.
pub fn concat_backward(dy: &Tensor, ca: usize, cb: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dy.dims4()?;
    debug_assert_eq!(c, ca + cb);
    let plane = h * w;
    let mut da = Tensor::zeros(vec![n, ca, h, w]);
    let mut db = Tensor::zeros(vec![n, cb, h, w]);
    for item in 0..n {
        let src = item * c * plane;
        da.data_mut()[item * ca * plane..(item + 1) * ca * plane]
            .copy_from_slice(&dy.data()[src..src + ca * plane]);
        db.data_mut()[item * cb * plane..(item + 1) * cb * plane]
            .copy_from_slice(&dy.data()[src + ca * plane..src + c * plane]);
    }
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |i| i as f32 * 0.1)
    }

    #[test]
    fn same_padding_preserves_extent_at_stride_1() {
        let x = ramp(vec![1, 2, 5, 7]);
        let k = Tensor::ones(vec![2, 3, 3]);
        let y = depthwise_forward(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 7]);
    }

    #[test]
    fn stride_2_halves_by_ceiling() {
        let x = ramp(vec![1, 1, 5, 8]);
        let k = Tensor::ones(vec![1, 3, 3]);
        let y = depthwise_forward(&x, &k, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 4]);
    }

    #[test]
    fn valid_rejects_small_input() {
        let x = ramp(vec![1, 1, 2, 2]);
        let k = Tensor::ones(vec![1, 3, 3]);
        assert!(depthwise_forward(&x, &k, 1, Padding::Valid).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = ramp(vec![1, 2, 4, 4]);
        let k = Tensor::ones(vec![3, 3, 3]);
        assert!(depthwise_forward(&x, &k, 1, Padding::Same).is_err());
        let pk = Tensor::ones(vec![4, 3]);
        assert!(pointwise_forward(&x, &pk).is_err());
    }

    #[test]
    fn pointwise_mixes_channels() {
        // x has channel 0 = 1s, channel 1 = 2s; kernel sums them.
        let mut x = Tensor::zeros(vec![1, 2, 2, 2]);
        x.data_mut()[..4].fill(1.0);
        x.data_mut()[4..].fill(2.0);
        let k = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = pointwise_forward(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_forward(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn upsample_index_map_is_exact() {
        // Every output pixel must equal its source pixel.
        let x = ramp(vec![1, 3, 5, 7]);
        let f = 2;
        let y = upsample_forward(&x, f).unwrap();
        let xd = x.dims4().unwrap();
        let yd4 = y.dims4().unwrap();
        for c in 0..3 {
            for oh in 0..5 * f {
                for ow in 0..7 * f {
                    assert_eq!(y.at4(yd4, 0, c, oh, ow), x.at4(xd, 0, c, oh / f, ow / f));
                }
            }
        }
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = ramp(vec![2, 2, 3, 3]);
        let b = ramp(vec![2, 3, 3, 3]);
        let y = concat_forward(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3, 3]);
        let (da, db) = concat_backward(&y, 2, 3).unwrap();
        assert_eq!(da, a);
        assert_eq!(db, b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = ramp(vec![1, 1, 3, 3]);
        let b = ramp(vec![1, 1, 4, 3]);
        assert!(concat_forward(&a, &b).is_err());
    }
}
