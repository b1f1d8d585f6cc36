//! Dataset ingestion: paired image/mask directories, preprocessing,
//! deterministic grouped splitting, and per-sample seeding.
//!
//! Directory layout contract: `images/<stem>.png` and `masks/<stem>.png`
//! with matching stems. Images are 8- or 16-bit grayscale; masks are
//! single-channel integer class ids (0 = background). The stem's prefix
//! before its last `_`-separated token is the subject grouping key
//! (`subj01_slice003` → subject `subj01`; a stem without `_` is its own
//! subject).

pub mod augment;
pub mod phantom;

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::LabelMask;

/// A preprocessed sample: image in [0,1], integer mask, provenance.
#[derive(Clone, Debug)]
pub struct SegmentationSample {
    pub image: Array2<f32>,
    pub mask: LabelMask,
    pub identifier: String,
    pub subject_id: String,
}

/// Result of scanning a dataset directory: valid raw pairs plus itemized
/// pairing problems and skipped-file warnings.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<SegmentationSample>,
    pub pairing_errors: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn subject_id_from_stem(stem: &str) -> String {
    match stem.rsplit_once('_') {
        Some((prefix, _)) => prefix.to_string(),
        None => stem.to_string(),
    }
}

fn read_gray_image(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?;
    let arr = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                g.get_pixel(c as u32, r as u32).0[0] as f32
            })
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                g.get_pixel(c as u32, r as u32).0[0] as f32
            })
        }
        other => {
            let g = other.to_luma16();
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                g.get_pixel(c as u32, r as u32).0[0] as f32
            })
        }
    };
    Ok(arr)
}

fn read_mask(path: &Path, num_classes: usize) -> Result<LabelMask> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read mask {}: {e}", path.display())))?;
    let values: Array2<u16> = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                g.get_pixel(c as u32, r as u32).0[0] as u16
            })
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                g.get_pixel(c as u32, r as u32).0[0]
            })
        }
        _ => {
            return Err(Error::data(format!(
                "mask {} is not single-channel grayscale",
                path.display()
            )))
        }
    };
    if let Some(&v) = values.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::data(format!(
            "mask {} contains class id {v} outside 0..{num_classes}",
            path.display()
        )));
    }
    Ok(values.mapv(|v| v as u8))
}

/// Scan `root/images` + `root/masks`, pair by stem, and read the pairs.
/// Pairing problems are itemized, unreadable files skipped with warnings;
/// invalid class ids are a hard error naming the file.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<LoadReport> {
    load_pairs(&root.join("images"), &root.join("masks"), num_classes)
}

/// Same pairing/read logic as [`load_dataset`], with the two directories
/// given explicitly.
pub fn load_pairs(images_dir: &Path, masks_dir: &Path, num_classes: usize) -> Result<LoadReport> {
    for dir in [images_dir, masks_dir] {
        if !dir.is_dir() {
            return Err(Error::data(format!("missing dataset directory {}", dir.display())));
        }
    }
    let list_stems = |dir: &Path| -> Result<Vec<String>> {
        let mut stems = Vec::new();
        for entry in std::fs::read_dir(dir)
            .map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?
        {
            let path = entry.map_err(|e| Error::data(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        Ok(stems)
    };
    let image_stems = list_stems(images_dir)?;
    let mask_stems = list_stems(masks_dir)?;

    let mut report = LoadReport::default();
    for stem in &mask_stems {
        if image_stems.binary_search(stem).is_err() {
            report.pairing_errors.push(format!("mask {stem}.png has no matching image"));
        }
    }
    for stem in &image_stems {
        if mask_stems.binary_search(stem).is_err() {
            report.pairing_errors.push(format!("image {stem}.png has no matching mask"));
            continue;
        }
        let image_path = images_dir.join(format!("{stem}.png"));
        let mask_path = masks_dir.join(format!("{stem}.png"));
        let image = match read_gray_image(&image_path) {
            Ok(a) => a,
            Err(Error::Data(msg)) => {
                report.warnings.push(msg);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mask = read_mask(&mask_path, num_classes)?;
        if image.dim() != mask.dim() {
            report.pairing_errors.push(format!(
                "{stem}.png: image {:?} and mask {:?} shapes differ",
                image.dim(),
                mask.dim()
            ));
            continue;
        }
        report.samples.push(SegmentationSample {
            image,
            mask,
            identifier: image_path.display().to_string(),
            subject_id: subject_id_from_stem(stem),
        });
    }
    Ok(report)
}

/// Bilinear resample (pixel-center convention, edges clamped).
pub fn bilinear_resize(src: &Array2<f32>, target: (usize, usize)) -> Array2<f32> {
    let (sh, sw) = src.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return src.clone();
    }
    let ry = sh as f64 / th as f64;
    let rx = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let sy = ((r as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64);
        let sx = ((c as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let x1 = (x0 + 1).min(sw - 1);
        let wy = (sy - y0 as f64) as f32;
        let wx = (sx - x0 as f64) as f32;
        let top = src[(y0, x0)] * (1.0 - wx) + src[(y0, x1)] * wx;
        let bot = src[(y1, x0)] * (1.0 - wx) + src[(y1, x1)] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Nearest-neighbor resample; label values are preserved exactly.
pub fn nearest_resize(src: &LabelMask, target: (usize, usize)) -> LabelMask {
    let (sh, sw) = src.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return src.clone();
    }
    let ry = sh as f64 / th as f64;
    let rx = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(r, c)| {
        let sy = (((r as f64 + 0.5) * ry - 0.5).round().max(0.0) as usize).min(sh - 1);
        let sx = (((c as f64 + 0.5) * rx - 0.5).round().max(0.0) as usize).min(sw - 1);
        src[(sy, sx)]
    })
}

/// Resize (bilinear image / nearest mask) and min–max normalize to [0,1].
/// Returns the sample and whether the image was degenerate-constant
/// (normalized to all zeros).
pub fn preprocess(
    image: &Array2<f32>,
    mask: &LabelMask,
    target: (usize, usize),
    identifier: &str,
    subject_id: &str,
) -> (SegmentationSample, bool) {
    let mut img = bilinear_resize(image, target);
    let msk = nearest_resize(mask, target);
    let min = img.iter().copied().fold(f32::INFINITY, f32::min);
    let max = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let constant = max <= min;
    if constant {
        img.fill(0.0);
    } else {
        let span = max - min;
        img.mapv_inplace(|v| (v - min) / span);
    }
    (
        SegmentationSample {
            image: img,
            mask: msk,
            identifier: identifier.to_string(),
            subject_id: subject_id.to_string(),
        },
        constant,
    )
}

/// Mix a global seed, sample index, and epoch into one stream seed
/// (splitmix64 finalizer) so augmentation is order-independent.
pub fn sample_seed(global_seed: u64, sample_index: usize, epoch: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    // Chain sequentially (not XOR of independent mixes) so swapping the
    // roles of two inputs cannot produce the same seed.
    let mut z = mix(global_seed ^ 0xa076_1d64_78bd_642f);
    z = mix(z ^ sample_index as u64);
    mix(z ^ epoch as u64)
}

/// Deterministic grouped split. Subjects (not samples) are shuffled by
/// `seed` and allocated by floor(ratio·subjects) for validation and test,
/// with the remainder going to train; no subject straddles splits.
pub fn split(
    samples: Vec<SegmentationSample>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    let (tr, va, te) = ratios;
    if tr < 0.0 || va < 0.0 || te < 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::usage(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let mut subjects: Vec<String> = Vec::new();
    for s in &samples {
        if !subjects.contains(&s.subject_id) {
            subjects.push(s.subject_id.clone());
        }
    }
    subjects.sort();
    if subjects.len() < 3 {
        return Err(Error::usage(format!(
            "grouped split needs at least 3 subjects, found {}",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let n = subjects.len();
    let n_val = (va * n as f64).floor() as usize;
    let n_test = (te * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let train_set = &subjects[..n_train];
    let val_set = &subjects[n_train..n_train + n_val];

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        if train_set.contains(&s.subject_id) {
            train.push(s);
        } else if val_set.contains(&s.subject_id) {
            val.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_subject(subject: &str, tag: usize) -> SegmentationSample {
        SegmentationSample {
            image: Array2::zeros((4, 4)),
            mask: LabelMask::zeros((4, 4)),
            identifier: format!("{subject}_{tag}"),
            subject_id: subject.to_string(),
        }
    }

    #[test]
    fn subject_ids_derive_from_stem_prefix() {
        assert_eq!(subject_id_from_stem("subj01_slice003"), "subj01");
        assert_eq!(subject_id_from_stem("a_b_c"), "a_b");
        assert_eq!(subject_id_from_stem("p0042"), "p0042");
    }

    #[test]
    fn split_100_single_subject_samples_is_70_20_10() {
        let samples: Vec<_> =
            (0..100).map(|i| sample_with_subject(&format!("s{i:03}"), i)).collect();
        let (tr, va, te) = split(samples, (0.7, 0.2, 0.1), 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 20, 10));
    }

    #[test]
    fn split_10_samples_rounds_to_7_2_1() {
        let samples: Vec<_> = (0..10).map(|i| sample_with_subject(&format!("s{i}"), i)).collect();
        let (tr, va, te) = split(samples, (0.7, 0.2, 0.1), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 2, 1));
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let samples: Vec<_> = (0..30)
            .map(|i| sample_with_subject(&format!("s{}", i % 10), i))
            .collect();
        let ids = |v: &[SegmentationSample]| -> Vec<String> {
            v.iter().map(|s| s.identifier.clone()).collect()
        };
        let (a1, b1, c1) = split(samples.clone(), (0.7, 0.2, 0.1), 9).unwrap();
        let (a2, b2, c2) = split(samples.clone(), (0.7, 0.2, 0.1), 9).unwrap();
        assert_eq!(ids(&a1), ids(&a2));
        assert_eq!(ids(&b1), ids(&b2));
        assert_eq!(ids(&c1), ids(&c2));
        assert_eq!(a1.len() + b1.len() + c1.len(), 30);
        let mut all: Vec<String> = ids(&a1);
        all.extend(ids(&b1));
        all.extend(ids(&c1));
        all.sort();
        let mut expect: Vec<String> = samples.iter().map(|s| s.identifier.clone()).collect();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_respects_subjects() {
        let samples: Vec<_> = (0..40)
            .map(|i| sample_with_subject(&format!("s{}", i % 8), i))
            .collect();
        let (tr, va, te) = split(samples, (0.5, 0.25, 0.25), 3).unwrap();
        let subjects = |v: &[SegmentationSample]| -> std::collections::HashSet<String> {
            v.iter().map(|s| s.subject_id.clone()).collect()
        };
        let (a, b, c) = (subjects(&tr), subjects(&va), subjects(&te));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn split_with_too_few_subjects_is_a_usage_error() {
        let samples = vec![sample_with_subject("a", 0), sample_with_subject("b", 1)];
        let err = split(samples, (0.7, 0.2, 0.1), 0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let samples: Vec<_> = (0..5).map(|i| sample_with_subject(&format!("s{i}"), i)).collect();
        assert!(split(samples, (0.7, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn preprocess_halves_512_to_256_and_normalizes() {
        let image = Array2::from_shape_fn((512, 512), |(r, c)| (r + c) as f32);
        let mask = LabelMask::from_shape_fn((512, 512), |(r, _)| (r / 256) as u8);
        let (s, constant) = preprocess(&image, &mask, (256, 256), "id", "subj");
        assert!(!constant);
        assert_eq!(s.image.dim(), (256, 256));
        assert_eq!(s.mask.dim(), (256, 256));
        let min = s.image.iter().copied().fold(f32::INFINITY, f32::min);
        let max = s.image.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn preprocess_constant_image_becomes_all_zeros() {
        let image = Array2::from_elem((8, 8), 5.0f32);
        let mask = LabelMask::zeros((8, 8));
        let (s, constant) = preprocess(&image, &mask, (8, 8), "id", "subj");
        assert!(constant);
        assert!(s.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_resize_never_invents_labels() {
        let mask = LabelMask::from_shape_fn((31, 17), |(r, c)| ((r * c) % 4) as u8);
        let before: std::collections::HashSet<u8> = mask.iter().copied().collect();
        for target in [(8, 8), (64, 64), (13, 29)] {
            let resized = nearest_resize(&mask, target);
            assert_eq!(resized.dim(), target);
            assert!(resized.iter().all(|v| before.contains(v)));
        }
    }

    #[test]
    fn bilinear_resize_preserves_constant_images_and_value_range() {
        let image = Array2::from_elem((10, 10), 0.25f32);
        let out = bilinear_resize(&image, (23, 7));
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let ramp = Array2::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f32);
        let out = bilinear_resize(&ramp, (9, 9));
        let (lo, hi) = (0.0, 255.0);
        assert!(out.iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn sample_seed_mixing_is_stable_and_spread_out() {
        assert_eq!(sample_seed(1, 2, 3), sample_seed(1, 2, 3));
        let mut seen = std::collections::HashSet::new();
        for g in 0..4u64 {
            for i in 0..8usize {
                for e in 0..8usize {
                    seen.insert(sample_seed(g, i, e));
                }
            }
        }
        assert_eq!(seen.len(), 4 * 8 * 8, "seed mixing collided");
    }

    #[test]
    fn loader_round_trip_with_orphans_and_bad_class_ids() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        let gray = |v: u8| image::GrayImage::from_pixel(6, 6, image::Luma([v]));
        for stem in ["a_1", "a_2", "b_1"] {
            gray(100).save(root.join(format!("images/{stem}.png"))).unwrap();
            gray(1).save(root.join(format!("masks/{stem}.png"))).unwrap();
        }
        gray(3).save(root.join("images/orphan.png")).unwrap();

        let report = load_dataset(root, 4).unwrap();
        assert_eq!(report.samples.len(), 3);
        assert_eq!(report.pairing_errors.len(), 1);
        assert!(report.pairing_errors[0].contains("orphan"));
        assert_eq!(report.samples[0].subject_id, "a");

        // A mask with out-of-range ids must fail hard, naming the file.
        gray(9).save(root.join("masks/bad.png")).unwrap();
        gray(0).save(root.join("images/bad.png")).unwrap();
        let err = load_dataset(root, 4).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("bad.png"));
    }

    #[test]
    fn loader_missing_masks_directory_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        let err = load_dataset(dir.path(), 4).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("masks"));
    }

    #[test]
    fn loader_empty_directories_yield_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let report = load_dataset(dir.path(), 4).unwrap();
        assert!(report.samples.is_empty());
        assert!(report.pairing_errors.is_empty());
        assert!(report.warnings.is_empty());
    }
}
