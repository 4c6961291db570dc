use super::{ItemImage, SilhouetteMask, BACKGROUND};
use crate::error::Result;

/// Foreground threshold used by orientation normalization.
const ORIENTATION_TOLERANCE: f32 = 0.1;

fn background_distance(image: &ItemImage, y: usize, x: usize) -> f32 {
    (0..3)
        .map(|c| (image.get(c, y, x) - BACKGROUND[c]).powi(2))
        .sum::<f32>()
        .sqrt()
}

/// Per-pixel foreground flags: pixels farther than `background_tolerance`
/// (Euclidean, in `[-1, 1]` RGB) from the white background. Never fails, so
/// it also serves for thresholding generator output.
pub fn foreground(image: &ItemImage, background_tolerance: f64) -> Vec<u8> {
    let r = image.resolution;
    let mut mask = vec![0u8; r * r];
    for y in 0..r {
        for x in 0..r {
            if background_distance(image, y, x) as f64 > background_tolerance {
                mask[y * r + x] = 1;
            }
        }
    }
    mask
}

pub fn extract_silhouette(image: &ItemImage, background_tolerance: f64) -> Result<SilhouetteMask> {
    SilhouetteMask::new(foreground(image, background_tolerance), image.resolution)
}

pub fn iou(a: &SilhouetteMask, b: &SilhouetteMask) -> f64 {
    mask_iou(&a.mask, &b.mask)
}

/// Intersection over union of two 0/1 masks; two empty masks count as 1.
pub fn mask_iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        inter += (p & q) as usize;
        union += (p | q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub(crate) fn mirror_image(image: &ItemImage) -> ItemImage {
    let r = image.resolution;
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                out.pixels[(c * r + y) * r + x] = image.get(c, y, r - 1 - x);
            }
        }
    }
    out
}

pub(crate) fn mirror_mask(mask: &SilhouetteMask) -> SilhouetteMask {
    let r = mask.resolution;
    let mut out = mask.clone();
    for y in 0..r {
        for x in 0..r {
            out.mask[y * r + x] = mask.mask[y * r + r - 1 - x];
        }
    }
    out
}

/// Mirror the image horizontally when its foreground's horizontal centre of
/// mass lies in the left half. Idempotent.
pub fn normalize_orientation(image: &ItemImage) -> ItemImage {
    let r = image.resolution;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in 0..r {
        for x in 0..r {
            if background_distance(image, y, x) > ORIENTATION_TOLERANCE {
                sum += x as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return image.clone();
    }
    let center = (r as f64 - 1.0) / 2.0;
    if sum / (n as f64) < center {
        mirror_image(image)
    } else {
        image.clone()
    }
}
