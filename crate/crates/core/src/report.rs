//! Qualitative report rendering: for every sample, one row of five panels
//! in fixed column order — original image, ground-truth masks, predicted
//! masks, mask differences, and the prediction overlaid on the image.
//!
//! Colors are fixed so reports are comparable across runs:
//! - classes use the palette from [`class_color`] (class 0 is black);
//! - the difference panel marks false positives (predicted foreground on
//!   true background) in red, false negatives (missed foreground) in
//!   blue, and confusions between two foreground classes in yellow;
//! - the overlay blends 55% grayscale image with 45% class color on
//!   labeled pixels.

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::metrics::LabelMask;

/// Width of the separator strip between adjacent panels, in pixels.
pub const PANEL_GAP: u32 = 2;
pub const PANEL_COUNT: u32 = 5;

const GAP_COLOR: Rgb<u8> = Rgb([200, 200, 200]);
pub const FALSE_POSITIVE_COLOR: Rgb<u8> = Rgb([255, 70, 70]);
pub const FALSE_NEGATIVE_COLOR: Rgb<u8> = Rgb([70, 110, 255]);
pub const CONFUSION_COLOR: Rgb<u8> = Rgb([255, 220, 80]);

const BASE_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],       // background
    [230, 80, 60],   // class 1
    [70, 160, 230],  // class 2
    [110, 200, 90],  // class 3
    [240, 180, 60],  // class 4
    [170, 110, 220], // class 5
    [90, 200, 190],  // class 6
    [230, 120, 180], // class 7
];

/// Fixed color for a class id. The first eight ids come from a hand-picked
/// table; higher ids get a deterministic hue spaced around the color wheel.
pub fn class_color(class_id: u8) -> Rgb<u8> {
    if (class_id as usize) < BASE_PALETTE.len() {
        return Rgb(BASE_PALETTE[class_id as usize]);
    }
    let hue = (class_id as f32 * 47.0) % 360.0;
    Rgb(hsv_to_rgb(hue, 0.75, 0.9))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

fn gray_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn blend(gray: u8, color: Rgb<u8>) -> Rgb<u8> {
    let mix = |c: u8| (0.55 * gray as f32 + 0.45 * c as f32).round() as u8;
    Rgb([mix(color[0]), mix(color[1]), mix(color[2])])
}

fn difference_color(pred: u8, gt: u8) -> Rgb<u8> {
    match (pred, gt) {
        (p, g) if p == g => Rgb([0, 0, 0]),
        (_, 0) => FALSE_POSITIVE_COLOR,
        (0, _) => FALSE_NEGATIVE_COLOR,
        _ => CONFUSION_COLOR,
    }
}

/// Renders one sample as a five-panel row: original | ground truth |
/// prediction | difference | overlay, separated by [`PANEL_GAP`] pixels.
pub fn render_panels(image: &Array2<f32>, gt: &LabelMask, pred: &LabelMask) -> Result<RgbImage> {
    if image.dim() != gt.dim() || gt.dim() != pred.dim() {
        return Err(Error::usage(format!(
            "panel inputs disagree on shape: image {:?}, ground truth {:?}, prediction {:?}",
            image.dim(),
            gt.dim(),
            pred.dim()
        )));
    }
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::usage("panel inputs are empty"));
    }
    let (h32, w32) = (h as u32, w as u32);
    let total_w = PANEL_COUNT * w32 + (PANEL_COUNT - 1) * PANEL_GAP;
    let mut canvas = RgbImage::from_pixel(total_w, h32, GAP_COLOR);
    for y in 0..h {
        for x in 0..w {
            let g = gray_level(image[[y, x]]);
            let gt_id = gt[[y, x]];
            let pred_id = pred[[y, x]];
            let panels = [
                Rgb([g, g, g]),
                class_color(gt_id),
                class_color(pred_id),
                difference_color(pred_id, gt_id),
                if pred_id == 0 { Rgb([g, g, g]) } else { blend(g, class_color(pred_id)) },
            ];
            for (i, px) in panels.into_iter().enumerate() {
                let ox = i as u32 * (w32 + PANEL_GAP) + x as u32;
                canvas.put_pixel(ox, y as u32, px);
            }
        }
    }
    Ok(canvas)
}

/// Extracts panel `index` (0-based, left to right) from a rendered row.
pub fn panel_region(canvas: &RgbImage, index: u32, sample_width: u32) -> RgbImage {
    let x0 = index * (sample_width + PANEL_GAP);
    image::imageops::crop_imm(canvas, x0, 0, sample_width, canvas.height()).to_image()
}
