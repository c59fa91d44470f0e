//! Median and bilateral denoising baselines.
//!
//! Both filters replicate edge pixels at the border and preserve the [0,1]
//! range (each output is a median or a convex combination of inputs).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MEDIAN_KERNEL: usize = 3;
pub const DEFAULT_BILATERAL_RADIUS: usize = 4;
pub const DEFAULT_BILATERAL_SIGMA_SPATIAL: f32 = 2.0;
pub const DEFAULT_BILATERAL_SIGMA_RANGE: f32 = 0.1;

#[inline]
fn clamp_coord(v: isize, max: usize) -> usize {
    v.clamp(0, max as isize - 1) as usize
}

/// Per-channel spatial median over an odd kernel x kernel window.
pub fn median_filter(img: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::contract(format!("median kernel must be odd, got {kernel}")));
    }
    if kernel == 1 {
        return Ok(img.clone());
    }
    let (n, c, h, w) = img.dims_nchw()?;
    let r = (kernel / 2) as isize;
    let mut out = img.clone();
    let mut window = Vec::with_capacity(kernel * kernel);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = clamp_coord(y as isize + dy, h);
                        let sx = clamp_coord(x as isize + dx, w);
                        window.push(img.data()[base + sy * w + sx]);
                    }
                }
                window.sort_by(|a, b| a.total_cmp(b));
                out.data_mut()[base + y * w + x] = window[window.len() / 2];
            }
        }
    }
    Ok(out)
}

/// Edge-preserving smoothing: each output pixel is the normalized sum of
/// window neighbors weighted by spatial and photometric proximity.
pub fn bilateral_filter(
    img: &Tensor,
    sigma_spatial: f32,
    sigma_range: f32,
    radius: usize,
) -> Result<Tensor> {
    if sigma_spatial <= 0.0 || sigma_range <= 0.0 {
        return Err(Error::contract("bilateral sigmas must be positive"));
    }
    if radius == 0 {
        return Err(Error::contract("bilateral radius must be >= 1"));
    }
    let (n, c, h, w) = img.dims_nchw()?;
    let r = radius as isize;
    let side = 2 * radius + 1;
    let mut spatial = vec![0.0f32; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = (dy * dy + dx * dx) as f32;
            spatial[((dy + r) as usize) * side + (dx + r) as usize] =
                (-d2 / (2.0 * sigma_spatial * sigma_spatial)).exp();
        }
    }
    let inv_2sr2 = 1.0 / (2.0 * sigma_range * sigma_range);
    let mut out = img.clone();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                let center = img.data()[base + y * w + x];
                let mut num = 0.0f32;
                let mut den = 0.0f32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = clamp_coord(y as isize + dy, h);
                        let sx = clamp_coord(x as isize + dx, w);
                        let v = img.data()[base + sy * w + sx];
                        let d = v - center;
                        let wgt = spatial[((dy + r) as usize) * side + (dx + r) as usize]
                            * (-d * d * inv_2sr2).exp();
                        num += wgt * v;
                        den += wgt;
                    }
                }
                out.data_mut()[base + y * w + x] = num / den;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::psnr;

    #[test]
    fn constants_are_fixed_points() {
        let img = Tensor::full(vec![3, 12, 12], 0.42);
        assert_eq!(median_filter(&img, 3).unwrap(), img);
        let blurred = bilateral_filter(&img, 2.0, 0.1, 4).unwrap();
        for &v in blurred.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn kernel_one_is_identity_and_even_kernels_are_rejected() {
        let img = Tensor::from_fn(vec![1, 5, 5], |i| (i % 7) as f32 / 7.0);
        assert_eq!(median_filter(&img, 1).unwrap(), img);
        assert!(median_filter(&img, 4).is_err());
    }

    #[test]
    fn median_removes_an_impulse() {
        let mut img = Tensor::full(vec![1, 9, 9], 0.5);
        img.data_mut()[4 * 9 + 4] = 1.0;
        let out = median_filter(&img, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn median_matches_sort_based_oracle() {
        // 5x5 ramp with two impulses; per-pixel brute-force median oracle.
        let mut img = Tensor::from_fn(vec![1, 5, 5], |i| i as f32 / 25.0);
        img.data_mut()[7] = 1.0;
        img.data_mut()[18] = 0.0;
        let out = median_filter(&img, 3).unwrap();
        for y in 0..5usize {
            for x in 0..5usize {
                let mut window = Vec::new();
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let sy = (y as i32 + dy).clamp(0, 4) as usize;
                        let sx = (x as i32 + dx).clamp(0, 4) as usize;
                        window.push(img.data()[sy * 5 + sx]);
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(out.data()[y * 5 + x], window[4], "at ({x},{y})");
            }
        }
    }

    #[test]
    fn huge_sigma_range_reduces_to_gaussian_blur() {
        let img = Tensor::from_fn(vec![1, 12, 12], |i| ((i * 31) % 97) as f32 / 97.0);
        let out = bilateral_filter(&img, 2.0, 1e6, 4).unwrap();
        // Independent plain Gaussian blur with the same window and edge
        // replication.
        let r = 4isize;
        for y in 0..12usize {
            for x in 0..12usize {
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (y as isize + dy).clamp(0, 11) as usize;
                        let sx = (x as isize + dx).clamp(0, 11) as usize;
                        let wgt = (-((dy * dy + dx * dx) as f64) / (2.0 * 4.0)).exp();
                        num += wgt * img.data()[sy * 12 + sx] as f64;
                        den += wgt;
                    }
                }
                let want = (num / den) as f32;
                let got = out.data()[y * 12 + x];
                assert!((got - want).abs() < 1e-4, "({x},{y}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn bilateral_preserves_a_step_edge() {
        // Left half 0, right half 1; a small sigma_range must not bleed
        // across the edge.
        let img = Tensor::from_fn(vec![1, 16, 16], |i| if i % 16 < 8 { 0.0 } else { 1.0 });
        let out = bilateral_filter(&img, 2.0, 0.05, 4).unwrap();
        for (&got, &orig) in out.data().iter().zip(img.data()) {
            assert!((got - orig).abs() < 0.05, "{got} vs {orig}");
        }
    }

    #[test]
    fn bilateral_rejects_bad_parameters() {
        let img = Tensor::zeros(vec![1, 8, 8]);
        assert!(bilateral_filter(&img, 0.0, 0.1, 2).is_err());
        assert!(bilateral_filter(&img, 1.0, 0.0, 2).is_err());
        assert!(bilateral_filter(&img, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn median_improves_psnr_on_salt_and_pepper() {
        let clean = Tensor::from_fn(vec![3, 32, 32], |i| {
            0.3 + 0.4 * ((i / 3 % 32) as f32 / 32.0)
        });
        let noisy = crate::degrade::salt_pepper(&clean, 0.1, 7).unwrap();
        let restored = median_filter(&noisy, 3).unwrap();
        let before = psnr(&noisy, &clean, 1.0).unwrap();
        let after = psnr(&restored, &clean, 1.0).unwrap();
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn filters_preserve_unit_range() {
        let img = Tensor::from_fn(vec![3, 16, 16], |i| (i % 2) as f32);
        for out in [
            median_filter(&img, 5).unwrap(),
            bilateral_filter(&img, 2.0, 0.1, 3).unwrap(),
        ] {
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
