//! Frame-quality degradation: statistical noise models, occluding
//! artifacts, and the five-level parameter schedule.
//!
//! Every process is a pure function of (image, parameters, seed); the same
//! seed reproduces the same corruption bit for bit.

use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

/// Scale applied to the schedule's sigma^2 column to land on the
/// normalized [0,1] intensity scale (table value v means variance v/100).
pub const SIGMA_SQUARED_SCALE: f32 = 1e-2;
pub const DEFAULT_POISSON_PEAK: f32 = 255.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub sigma_squared_scale: f32,
    pub poisson_peak: f32,
    /// Apply every statistical noise instead of one chosen uniformly.
    pub stack_noises: bool,
    pub artifact_fill: f32,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            sigma_squared_scale: SIGMA_SQUARED_SCALE,
            poisson_peak: DEFAULT_POISSON_PEAK,
            stack_noises: false,
            artifact_fill: 0.0,
        }
    }
}

/// A noise level (0-4) expanded into concrete parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub level: u8,
    pub salt_pepper_amount: f32,
    pub gaussian_variance: f32,
    pub speckle_variance: f32,
    /// Inclusive artifact-count range; (0, 0) means none.
    pub artifact_count_range: (u32, u32),
    pub poisson_enabled: bool,
    pub rng_seed: u64,
}

/// amount, sigma^2 (table units), artifact range per level 1..=4.
const LEVEL_TABLE: [(f32, f32, (u32, u32)); 4] = [
    (0.1, 1.0, (1, 13)),
    (0.2, 4.0, (13, 25)),
    (0.3, 9.0, (25, 37)),
    (0.4, 16.0, (37, 49)),
];

impl DegradationSpec {
    pub fn for_level(level: u8, seed: u64, cfg: &DegradeConfig) -> Result<Self> {
        if level > 4 {
            return Err(Error::contract(format!("noise level {level} outside 0..4")));
        }
        if level == 0 {
            return Ok(DegradationSpec {
                level,
                salt_pepper_amount: 0.0,
                gaussian_variance: 0.0,
                speckle_variance: 0.0,
                artifact_count_range: (0, 0),
                poisson_enabled: false,
                rng_seed: seed,
            });
        }
        let (amount, sigma2, artifacts) = LEVEL_TABLE[level as usize - 1];
        Ok(DegradationSpec {
            level,
            salt_pepper_amount: amount,
            gaussian_variance: sigma2 * cfg.sigma_squared_scale,
            speckle_variance: sigma2 * cfg.sigma_squared_scale,
            artifact_count_range: artifacts,
            poisson_enabled: true,
            rng_seed: seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArtifactKind {
    BlankRegion,
    LineGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// One placed occluder, clamped fully inside the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPlacement {
    pub kind: ArtifactKind,
    /// Top-left corner (column, row).
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub orientation: Option<Orientation>,
    pub fill: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AppliedNoise {
    Gaussian { variance: f32, seed: u64 },
    Speckle { variance: f32, seed: u64 },
    SaltPepper { amount: f32, seed: u64 },
    Poisson { peak: f32, seed: u64 },
}

/// Everything needed to replay or audit one degraded frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub spec: DegradationSpec,
    pub noises: Vec<AppliedNoise>,
    pub placements: Vec<ArtifactPlacement>,
}

/// Additive zero-mean Gaussian noise, clipped back into [0,1].
pub fn gaussian_noise(img: &Tensor, variance: f32, seed: u64) -> Result<Tensor> {
    if variance < 0.0 {
        return Err(Error::contract("gaussian variance must be >= 0"));
    }
    if variance == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0f32, variance.sqrt()).expect("finite std");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Multiplicative noise x + n*x, n zero-mean Gaussian, clipped to [0,1].
pub fn speckle_noise(img: &Tensor, variance: f32, seed: u64) -> Result<Tensor> {
    if variance < 0.0 {
        return Err(Error::contract("speckle variance must be >= 0"));
    }
    if variance == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0f32, variance.sqrt()).expect("finite std");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng) * *v).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Replaces a fraction `amount` of pixel positions (channel-shared, chosen
/// without replacement) with 0.0 or 1.0, a fair coin each.
pub fn salt_pepper(img: &Tensor, amount: f32, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&amount) {
        return Err(Error::contract("salt-and-pepper amount must be in [0,1]"));
    }
    if amount == 0.0 {
        return Ok(img.clone());
    }
    let (n, c, h, w) = img.dims_nchw()?;
    let hw = h * w;
    let count = ((amount as f64 * hw as f64).round() as usize).min(hw);
    let mut rng = rng_from_seed(seed);
    let mut out = img.clone();
    for item in 0..n {
        let picks = rand::seq::index::sample(&mut rng, hw, count);
        for p in picks {
            let value = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            for ch in 0..c {
                out.data_mut()[((item * c + ch) * h + p / w) * w + p % w] = value;
            }
        }
    }
    Ok(out)
}

/// Per-pixel Poisson resampling: clip(Poisson(x * peak) / peak, 0, 1).
pub fn poisson_noise(img: &Tensor, peak: f32, seed: u64) -> Result<Tensor> {
    if peak <= 0.0 {
        return Err(Error::contract("poisson peak must be positive"));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        let lambda = (*v).max(0.0) as f64 * peak as f64;
        *v = if lambda > 0.0 {
            let sample: f64 = Poisson::new(lambda).expect("positive lambda").sample(&mut rng);
            ((sample / peak as f64) as f32).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    Ok(out)
}

/// Min/max fraction of the image side a blank-region side spans.
const REGION_SIDE_MIN: f32 = 0.04;
const REGION_SIDE_MAX: f32 = 0.12;
const LINE_GROUP_MAX: usize = 3;

/// Places `count` artifacts (fair coin between blank rectangles and
/// full-span line groups) at seeded-random positions.
pub fn add_artifacts(
    img: &Tensor,
    count: u32,
    seed: u64,
    fill: f32,
) -> Result<(Tensor, Vec<ArtifactPlacement>)> {
    let (n, c, h, w) = img.dims_nchw()?;
    let mut rng = rng_from_seed(seed);
    let mut out = img.clone();
    let mut placements = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let placement = if rng.gen_bool(0.5) {
            let rw = sample_side(&mut rng, w);
            let rh = sample_side(&mut rng, h);
            let x = rng.gen_range(0..=w - rw);
            let y = rng.gen_range(0..=h - rh);
            ArtifactPlacement {
                kind: ArtifactKind::BlankRegion,
                x,
                y,
                width: rw,
                height: rh,
                orientation: None,
                fill,
            }
        } else {
            let thickness = rng.gen_range(1..=LINE_GROUP_MAX);
            if rng.gen_bool(0.5) {
                let t = thickness.min(h);
                let y = rng.gen_range(0..=h - t);
                ArtifactPlacement {
                    kind: ArtifactKind::LineGroup,
                    x: 0,
                    y,
                    width: w,
                    height: t,
                    orientation: Some(Orientation::Horizontal),
                    fill,
                }
            } else {
                let t = thickness.min(w);
                let x = rng.gen_range(0..=w - t);
                ArtifactPlacement {
                    kind: ArtifactKind::LineGroup,
                    x,
                    y: 0,
                    width: t,
                    height: h,
                    orientation: Some(Orientation::Vertical),
                    fill,
                }
            }
        };
        for item in 0..n {
            for ch in 0..c {
                for row in placement.y..placement.y + placement.height {
                    let base = ((item * c + ch) * h + row) * w;
                    out.data_mut()[base + placement.x..base + placement.x + placement.width]
                        .fill(fill);
                }
            }
        }
        placements.push(placement);
    }
    Ok((out, placements))
}

fn sample_side(rng: &mut impl Rng, extent: usize) -> usize {
    let lo = (REGION_SIDE_MIN * extent as f32).round().max(1.0) as usize;
    let hi = (REGION_SIDE_MAX * extent as f32).round().max(1.0) as usize;
    rng.gen_range(lo..=hi.max(lo)).min(extent)
}

/// Applies the level's statistical noise (one chosen uniformly, or all when
/// stacking) followed by its artifacts. Level 0 returns the frame unchanged.
pub fn degrade_with_record(
    img: &Tensor,
    level: u8,
    seed: u64,
    cfg: &DegradeConfig,
) -> Result<(Tensor, DegradationRecord)> {
    let spec = DegradationSpec::for_level(level, seed, cfg)?;
    if level == 0 {
        return Ok((
            img.clone(),
            DegradationRecord {
                spec,
                noises: vec![],
                placements: vec![],
            },
        ));
    }

    let mut rng = rng_from_seed(derive_seed(seed, 0));
    let all = [
        AppliedNoise::Gaussian { variance: spec.gaussian_variance, seed: derive_seed(seed, 1) },
        AppliedNoise::Speckle { variance: spec.speckle_variance, seed: derive_seed(seed, 2) },
        AppliedNoise::SaltPepper { amount: spec.salt_pepper_amount, seed: derive_seed(seed, 3) },
        AppliedNoise::Poisson { peak: cfg.poisson_peak, seed: derive_seed(seed, 4) },
    ];
    let noises: Vec<AppliedNoise> = if cfg.stack_noises {
        all.to_vec()
    } else {
        vec![all[rng.gen_range(0..all.len())]]
    };

    let mut out = img.clone();
    for noise in &noises {
        out = match *noise {
            AppliedNoise::Gaussian { variance, seed } => gaussian_noise(&out, variance, seed)?,
            AppliedNoise::Speckle { variance, seed } => speckle_noise(&out, variance, seed)?,
            AppliedNoise::SaltPepper { amount, seed } => salt_pepper(&out, amount, seed)?,
            AppliedNoise::Poisson { peak, seed } => poisson_noise(&out, peak, seed)?,
        };
    }

    let (lo, hi) = spec.artifact_count_range;
    let count = rng_from_seed(derive_seed(seed, 5)).gen_range(lo..=hi);
    let (out, placements) = add_artifacts(&out, count, derive_seed(seed, 6), cfg.artifact_fill)?;
    Ok((out, DegradationRecord { spec, noises, placements }))
}

/// [`degrade_with_record`] without the applied-noise audit trail.
pub fn degrade_at_level(
    img: &Tensor,
    level: u8,
    seed: u64,
    cfg: &DegradeConfig,
) -> Result<(Tensor, DegradationSpec, Vec<ArtifactPlacement>)> {
    let (out, record) = degrade_with_record(img, level, seed, cfg)?;
    Ok((out, record.spec, record.placements))
}
