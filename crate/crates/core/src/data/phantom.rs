//! Synthetic abdominal-slice phantom generator.
//!
//! Each phantom is an axial-slice caricature: an elliptical body whose
//! outer band is subcutaneous fat (class 2), fat blobs inside the cavity
//! (visceral, class 1), and optionally one organ blob (class 3). Classes
//! carry distinct intensity bands plus Gaussian noise, so the layout is
//! learnable but not trivial. Everything is deterministic per seed.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::metrics::LabelMask;

pub const CLASS_VAT: u8 = 1;
pub const CLASS_SAT: u8 = 2;
pub const CLASS_ORGAN: u8 = 3;

/// Margin (in normalized body radius) between the subcutaneous band and
/// anything drawn in the cavity, keeping the band strictly enclosing.
const RING_MARGIN: f64 = 0.06;

const BG_INTENSITY: f64 = 0.02;
const TISSUE_INTENSITY: f64 = 0.52;
const SAT_INTENSITY: f64 = 0.30;
const VAT_INTENSITY: f64 = 0.38;
const ORGAN_INTENSITY: f64 = 0.68;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Gaussian intensity noise (standard deviation, image units).
    pub noise: f64,
    /// Relative jitter applied to every radius and offset.
    pub deformation: f64,
    pub vat_blobs: usize,
    /// Include the organ blob (class 3).
    pub organ: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 64,
            width: 64,
            noise: 0.03,
            deformation: 0.15,
            vat_blobs: 3,
            organ: true,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!(
                "phantom size must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(Error::config("phantom noise must be in 0..=0.2"));
        }
        if !(0.0..=0.5).contains(&self.deformation) {
            return Err(Error::config("phantom deformation must be in 0..=0.5"));
        }
        if self.vat_blobs == 0 {
            return Err(Error::config("phantom needs at least one visceral blob"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        4
    }
}

/// Body-ellipse parameters, exposed so containment invariants can be
/// checked from outside.
#[derive(Clone, Copy, Debug)]
pub struct PhantomGeometry {
    pub center: (f64, f64),
    /// Body ellipse radii (y, x) in pixels.
    pub radii: (f64, f64),
    /// Inner edge of the subcutaneous band, in normalized radius.
    pub ring_inner: f64,
}

impl PhantomGeometry {
    /// Normalized elliptical radius of a pixel (1.0 = body boundary).
    pub fn r_norm(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 - self.center.0) / self.radii.0;
        let dx = (x as f64 - self.center.1) / self.radii.1;
        (dy * dy + dx * dx).sqrt()
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<SegmentationSample> {
    Ok(generate_with_geometry(spec)?.0)
}

pub fn generate_with_geometry(spec: &PhantomSpec) -> Result<(SegmentationSample, PhantomGeometry)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    fn jitter(rng: &mut ChaCha8Rng, deformation: f64, base: f64) -> f64 {
        let u: f64 = rng.random_range(-1.0..=1.0);
        base * (1.0 + deformation * u)
    }
    let d = spec.deformation;

    let cy = h as f64 / 2.0 + jitter(&mut rng, d, 0.04 * h as f64) - 0.04 * h as f64;
    let cx = w as f64 / 2.0 + jitter(&mut rng, d, 0.04 * w as f64) - 0.04 * w as f64;
    let ry = jitter(&mut rng, d, 0.40 * h as f64);
    let rx = jitter(&mut rng, d, 0.44 * w as f64);
    let ring_inner = jitter(&mut rng, d, 0.78).clamp(0.68, 0.88);
    let geom = PhantomGeometry { center: (cy, cx), radii: (ry, rx), ring_inner };

    let mut mask = LabelMask::zeros((h, w));
    // Subcutaneous band.
    for y in 0..h {
        for x in 0..w {
            let r = geom.r_norm(y, x);
            if r <= 1.0 && r > ring_inner {
                mask[(y, x)] = CLASS_SAT;
            }
        }
    }

    let cavity_limit = ring_inner - RING_MARGIN;

    // Organ blob, offset toward the upper-left like a liver.
    if spec.organ {
        let ocy = cy - jitter(&mut rng, d, 0.22 * ry);
        let ocx = cx - jitter(&mut rng, d, 0.30 * rx);
        let ory = jitter(&mut rng, d, 0.30 * ry);
        let orx = jitter(&mut rng, d, 0.28 * rx);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - ocy) / ory;
                let dx = (x as f64 - ocx) / orx;
                if dy * dy + dx * dx <= 1.0 && geom.r_norm(y, x) <= cavity_limit {
                    mask[(y, x)] = CLASS_ORGAN;
                }
            }
        }
    }

    // Visceral blobs on remaining cavity background.
    for _ in 0..spec.vat_blobs {
        let mut center = None;
        for _ in 0..30 {
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let t: f64 = rng.random_range(0.05..0.55);
            let by = cy + t * ring_inner * ry * phi.sin();
            let bx = cx + t * ring_inner * rx * phi.cos();
            let (iy, ix) = (by.round() as usize, bx.round() as usize);
            if iy < h && ix < w && mask[(iy, ix)] == 0 && geom.r_norm(iy, ix) <= cavity_limit {
                center = Some((by, bx));
                break;
            }
        }
        let bry = jitter(&mut rng, d, 0.13 * ry).max(1.5);
        let brx = jitter(&mut rng, d, 0.13 * rx).max(1.5);
        if let Some((by, bx)) = center {
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 - by) / bry;
                    let dx = (x as f64 - bx) / brx;
                    if dy * dy + dx * dx <= 1.0
                        && geom.r_norm(y, x) <= cavity_limit
                        && mask[(y, x)] == 0
                    {
                        mask[(y, x)] = CLASS_VAT;
                    }
                }
            }
        }
    }
    // Guarantee a visceral region even if every blob draw was rejected:
    // a small patch right of center is always cavity (the organ sits
    // left of center) and well inside the band.
    if !mask.iter().any(|&v| v == CLASS_VAT) {
        let py = cy.round() as usize;
        let px = (cx + 0.30 * ring_inner * rx).round() as usize;
        for y in py.saturating_sub(1)..=(py + 1).min(h - 1) {
            for x in px.saturating_sub(1)..=(px + 1).min(w - 1) {
                if mask[(y, x)] == 0 && geom.r_norm(y, x) <= cavity_limit {
                    mask[(y, x)] = CLASS_VAT;
                }
            }
        }
    }

    // Intensities: per-class band + gentle vertical shading + noise.
    let mut image = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let base = if geom.r_norm(y, x) > 1.0 {
                BG_INTENSITY
            } else {
                match mask[(y, x)] {
                    CLASS_VAT => VAT_INTENSITY,
                    CLASS_SAT => SAT_INTENSITY,
                    CLASS_ORGAN => ORGAN_INTENSITY,
                    _ => TISSUE_INTENSITY,
                }
            };
            let shade = 0.04 * ((y as f64 - cy) / h as f64);
            let n: f64 = rng.sample(StandardNormal);
            image[(y, x)] = (base + shade + spec.noise * n).clamp(0.0, 1.0) as f32;
        }
    }

    let sample = SegmentationSample {
        image,
        mask,
        identifier: format!("phantom-{:08}", spec.seed),
        subject_id: format!("ph{:08}", spec.seed),
    };
    Ok((sample, geom))
}

/// Write `n` phantoms (seeds `base.seed..base.seed+n`) into the standard
/// `images/` + `masks/` layout under `dir`.
pub fn materialize_phantoms(dir: &Path, base: &PhantomSpec, n: usize) -> Result<()> {
    base.validate()?;
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for i in 0..n {
        let spec = PhantomSpec { seed: base.seed + i as u64, ..base.clone() };
        let sample = generate_phantom(&spec)?;
        let (h, w) = sample.image.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        let mut msk = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = (sample.image[(y, x)] * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
                msk.put_pixel(x as u32, y as u32, image::Luma([sample.mask[(y, x)]]));
            }
        }
        let stem = format!("p{i:04}");
        let img_path = images.join(format!("{stem}.png"));
        let msk_path = masks.join(format!("{stem}.png"));
        img.save(&img_path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", img_path.display())))?;
        msk.save(&msk_path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", msk_path.display())))?;
    }
    Ok(())
}
