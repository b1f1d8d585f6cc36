//! Geometric + intensity augmentation.
//!
//! One rigid transform (rotation, isotropic scale, optional horizontal
//! flip) is drawn per sample and applied to the image with bilinear
//! resampling and to the mask with nearest-neighbor resampling, so the
//! pair stays aligned. Intensity jitter multiplies the image only. All
//! draws come from a stream seeded per sample, making the result
//! independent of batch order or prefetching.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SegmentationSample;
use crate::metrics::LabelMask;

/// Augmentation ranges; the default matches mild medical-imaging practice.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Maximum absolute rotation in degrees (draw is uniform in ±this).
    pub rotate_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub hflip: bool,
    /// Relative intensity jitter; factor drawn uniformly in 1±this.
    pub intensity_jitter: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate_deg: 15.0,
            scale_lo: 0.9,
            scale_hi: 1.1,
            hflip: true,
            intensity_jitter: 0.1,
        }
    }
}

impl AugmentPolicy {
    /// The policy under which `augment` is the identity function.
    pub fn identity() -> Self {
        AugmentPolicy {
            rotate_deg: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            hflip: false,
            intensity_jitter: 0.0,
        }
    }
}

/// Inverse-map a destination pixel to source coordinates for a rotation
/// by `angle` and scale `s` about the image center.
fn source_coords(
    r: usize,
    c: usize,
    center: (f64, f64),
    cos_a: f64,
    sin_a: f64,
    inv_scale: f64,
) -> (f64, f64) {
    let dy = r as f64 - center.0;
    let dx = c as f64 - center.1;
    // Inverse of scale-then-rotate: rotate by −angle, then divide by s.
    let sy = (cos_a * dy - sin_a * dx) * inv_scale + center.0;
    let sx = (sin_a * dy + cos_a * dx) * inv_scale + center.1;
    (sy, sx)
}

fn warp_image(src: &Array2<f32>, angle_rad: f64, scale: f64) -> Array2<f32> {
    let (h, w) = src.dim();
    let center = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos_a, sin_a) = (angle_rad.cos(), angle_rad.sin());
    let inv_scale = 1.0 / scale;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = source_coords(r, c, center, cos_a, sin_a, inv_scale);
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
            return 0.0;
        }
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = (sy - y0 as f64) as f32;
        let wx = (sx - x0 as f64) as f32;
        let top = src[(y0, x0)] * (1.0 - wx) + src[(y0, x1)] * wx;
        let bot = src[(y1, x0)] * (1.0 - wx) + src[(y1, x1)] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

fn warp_mask(src: &LabelMask, angle_rad: f64, scale: f64) -> LabelMask {
    let (h, w) = src.dim();
    let center = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (cos_a, sin_a) = (angle_rad.cos(), angle_rad.sin());
    let inv_scale = 1.0 / scale;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (sy, sx) = source_coords(r, c, center, cos_a, sin_a, inv_scale);
        let ry = sy.round();
        let rx = sx.round();
        if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
            return 0;
        }
        src[(ry as usize, rx as usize)]
    })
}

fn hflip_image(src: &Array2<f32>) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(r, c)| src[(r, w - 1 - c)])
}

fn hflip_mask(src: &LabelMask) -> LabelMask {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(r, c)| src[(r, w - 1 - c)])
}

/// Apply one random augmentation. Deterministic in `seed`; the identity
/// policy returns the sample bitwise-unchanged.
pub fn augment(sample: &SegmentationSample, policy: &AugmentPolicy, seed: u64) -> SegmentationSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fixed draw order keeps the stream stable across policy settings.
    let angle_deg = if policy.rotate_deg > 0.0 {
        rng.random_range(-policy.rotate_deg..=policy.rotate_deg)
    } else {
        0.0
    };
    let scale = if policy.scale_hi > policy.scale_lo {
        rng.random_range(policy.scale_lo..=policy.scale_hi)
    } else {
        policy.scale_lo
    };
    let flip = policy.hflip && rng.random_bool(0.5);
    let jitter = if policy.intensity_jitter > 0.0 {
        rng.random_range(1.0 - policy.intensity_jitter..=1.0 + policy.intensity_jitter)
    } else {
        1.0
    };

    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if angle_deg != 0.0 || scale != 1.0 {
        let angle = angle_deg.to_radians();
        image = warp_image(&image, angle, scale);
        mask = warp_mask(&mask, angle, scale);
    }
    if flip {
        image = hflip_image(&image);
        mask = hflip_mask(&mask);
    }
    if jitter != 1.0 {
        let j = jitter as f32;
        image.mapv_inplace(|v| (v * j).clamp(0.0, 1.0));
    }
    SegmentationSample {
        image,
        mask,
        identifier: sample.identifier.clone(),
        subject_id: sample.subject_id.clone(),
    }
}
