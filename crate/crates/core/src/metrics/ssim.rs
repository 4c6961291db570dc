//! Windowed SSIM with an 11×11 Gaussian window (σ = 1.5) over valid
//! positions, averaged over windows and channels.

use crate::data::ItemImage;
use crate::error::{shape_err, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

fn gaussian_1d() -> [f64; WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut g = [0.0; WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Per-window means of luminance and contrast-structure terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParts {
    pub ssim: f64,
    /// `(2σxy + C2) / (σx² + σy² + C2)`, the factor free of the means.
    pub cs: f64,
}

/// SSIM of planar images with values in `[0, L]`; `shape = (channels, h, w)`.
pub fn ssim_planes(x: &[f64], y: &[f64], shape: (usize, usize, usize), l: f64) -> Result<SsimParts> {
    let (c, h, w) = shape;
    if x.len() != c * h * w || y.len() != x.len() {
        return shape_err(format!("ssim inputs of {} and {} values for shape {shape:?}", x.len(), y.len()));
    }
    if h < WINDOW || w < WINDOW {
        return shape_err(format!("ssim needs at least {WINDOW}x{WINDOW} pixels, got {h}x{w}"));
    }
    let c1 = (K1 * l).powi(2);
    let c2 = (K2 * l).powi(2);
    let g = gaussian_1d();
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let (mut total, mut total_cs) = (0.0, 0.0);
    for ch in 0..c {
        let px = &x[ch * h * w..(ch + 1) * h * w];
        let py = &y[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    let row = (oy + dy) * w + ox;
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let (a, b) = (px[row + dx], py[row + dx]);
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                total += lum * cs;
                total_cs += cs;
            }
        }
    }
    let n = (c * oh * ow) as f64;
    Ok(SsimParts { ssim: total / n, cs: total_cs / n })
}

fn unit_range(image: &ItemImage) -> Vec<f64> {
    image.pixels.iter().map(|&v| (v as f64 + 1.0) * 0.5).collect()
}

/// SSIM of two item images; pixels in `[-1, 1]` are mapped to `[0, 1]`.
pub fn ssim(x: &ItemImage, y: &ItemImage) -> Result<f64> {
    if x.resolution != y.resolution {
        return shape_err(format!("ssim of {}px and {}px images", x.resolution, y.resolution));
    }
    let r = x.resolution;
    Ok(ssim_planes(&unit_range(x), &unit_range(y), (3, r, r), 1.0)?.ssim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_planes(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = crate::rng::seeded(seed);
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn window_is_normalized() {
        assert!((gaussian_1d().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_is_one() {
        let x = random_planes(1, 3 * 16 * 16);
        let s = ssim_planes(&x, &x, (3, 16, 16), 1.0).unwrap().ssim;
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_images() {
        let zeros = vec![0.0; 3 * 16 * 16];
        let ones = vec![1.0; 3 * 16 * 16];
        let c1 = (K1 * 1.0f64).powi(2);
        let s = ssim_planes(&zeros, &ones, (3, 16, 16), 1.0).unwrap().ssim;
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-6);
        assert!((s - 1.0e-4).abs() < 1e-6);
    }

    #[test]
    fn item_images_map_to_unit_range() {
        let a = ItemImage::blank(16, 0);
        let mut b = a.clone();
        b.pixels.iter_mut().for_each(|v| *v = -1.0);
        let c1 = (K1 * 1.0f64).powi(2);
        assert!((ssim(&a, &b).unwrap() - c1 / (1.0 + c1)).abs() < 1e-6);
        assert!(ssim(&a, &ItemImage::blank(32, 0)).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ssim_planes(&[0.0; 10], &[0.0; 10], (1, 2, 5), 1.0).is_err());
        assert!(ssim_planes(&[0.0; 300], &[0.0; 299], (3, 10, 10), 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let x = random_planes(s1, 2 * 12 * 12);
            let y = random_planes(s2 + 5000, 2 * 12 * 12);
            let a = ssim_planes(&x, &y, (2, 12, 12), 1.0).unwrap().ssim;
            let b = ssim_planes(&y, &x, (2, 12, 12), 1.0).unwrap().ssim;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        // A common constant shift leaves every variance and covariance
        // unchanged, so the contrast-structure factor is invariant. The
        // luminance factor depends on the means themselves and is not.
        #[test]
        fn contrast_structure_ignores_common_shift(seed in 0u64..1000, shift in 0.0f64..0.5) {
            let x: Vec<f64> = random_planes(seed, 12 * 12).iter().map(|v| v * 0.5).collect();
            let y: Vec<f64> = random_planes(seed + 7777, 12 * 12).iter().map(|v| v * 0.5).collect();
            let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let a = ssim_planes(&x, &y, (1, 12, 12), 1.0).unwrap().cs;
            let b = ssim_planes(&xs, &ys, (1, 12, 12), 1.0).unwrap().cs;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
