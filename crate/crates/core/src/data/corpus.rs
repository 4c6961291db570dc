//! Procedural stand-in for a curated outfit corpus.
//!
//! Every outfit samples a style theme (hue family, accent colour, stripe or
//! check texture). Its items are category-specific filled shapes painted with
//! small per-item jitter of that theme on a white background, so items of one
//! outfit look alike while different outfits differ.

use std::f32::consts::PI;

use rand::Rng as _;

use super::silhouette::{mirror_image, mirror_mask, normalize_orientation};
use super::{split_dataset, DatasetSplit, ItemImage, OutfitRecord, SilhouetteMask};
use crate::error::{config_err, Result};
use crate::rng::{substream, tags, Rng};

/// Default category order.
pub const CATEGORY_NAMES: [&str; 4] = ["upper", "bag", "lower", "shoes"];

const SHOE_ARCHETYPE: usize = 3;

#[derive(Debug, Clone, Copy)]
enum Texture {
    Stripes { angle: f32, period: f32, phase: f32 },
    Checks { period: f32 },
}

#[derive(Debug, Clone, Copy)]
struct Theme {
    hue: f32,
    saturation: f32,
    value: f32,
    accent_hue: f32,
    amplitude: f32,
    texture: Texture,
}

impl Theme {
    fn sample(rng: &mut Rng) -> Self {
        let hue = rng.gen::<f32>();
        let texture = if rng.gen_bool(0.5) {
            Texture::Stripes {
                angle: [0.0, 0.25, 0.5, 0.75][rng.gen_range(0..4)] * PI,
                period: rng.gen_range(0.08..0.22),
                phase: rng.gen_range(0.0..(2.0 * PI)),
            }
        } else {
            Texture::Checks { period: rng.gen_range(0.1..0.25) }
        };
        Self {
            hue,
            saturation: rng.gen_range(0.45..0.9),
            value: rng.gen_range(0.3..0.7),
            accent_hue: (hue + rng.gen_range(0.35..0.65)).fract(),
            amplitude: rng.gen_range(0.1..0.5),
            texture,
        }
    }

    fn jitter(&self, rng: &mut Rng) -> Self {
        Self {
            hue: (self.hue + rng.gen_range(-0.03..0.03) + 1.0).fract(),
            saturation: (self.saturation + rng.gen_range(-0.05..0.05)).clamp(0.3, 0.95),
            value: (self.value + rng.gen_range(-0.05..0.05)).clamp(0.2, 0.75),
            ..*self
        }
    }

    /// RGB in `[0, 1]`; every channel stays at or below `value`.
    fn color_at(&self, u: f32, v: f32) -> [f32; 3] {
        let t = match self.texture {
            Texture::Stripes { angle, period, phase } => {
                let s = (u * angle.cos() + v * angle.sin()) / period;
                0.5 + 0.5 * (2.0 * PI * s + phase).sin()
            }
            Texture::Checks { period } => {
                let a = (u / period).floor() as i64 + (v / period).floor() as i64;
                (a.rem_euclid(2)) as f32
            }
        };
        let base = hsv_to_rgb(self.hue, self.saturation, self.value);
        let accent = hsv_to_rgb(self.accent_hue, self.saturation, self.value);
        let w = self.amplitude * t;
        [0, 1, 2].map(|c| base[c] * (1.0 - w) + accent[c] * w)
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
struct ShapeParams {
    scale: f32,
    du: f32,
    dv: f32,
    variant: f32,
    mirrored: bool,
}

impl ShapeParams {
    fn sample(rng: &mut Rng) -> Self {
        Self {
            scale: rng.gen_range(0.85..1.05),
            du: rng.gen_range(-0.04..0.04),
            dv: rng.gen_range(-0.04..0.04),
            variant: rng.gen(),
            mirrored: rng.gen_bool(0.5),
        }
    }
}

/// Whether normalized point `(u, v)` lies inside the archetype's shape.
fn inside(archetype: usize, u: f32, v: f32, p: &ShapeParams) -> bool {
    // Undo the per-item placement so the archetypes can be written in a
    // canonical frame centered at (0.5, 0.5).
    let mut u = (u - 0.5 - p.du) / p.scale + 0.5;
    let v = (v - 0.5 - p.dv) / p.scale + 0.5;
    if p.mirrored {
        u = 1.0 - u;
    }
    let in_rect = |u0: f32, u1: f32, v0: f32, v1: f32| u >= u0 && u <= u1 && v >= v0 && v <= v1;
    let in_ellipse = |cu: f32, cv: f32, ru: f32, rv: f32| {
        let a = (u - cu) / ru;
        let b = (v - cv) / rv;
        a * a + b * b <= 1.0
    };
    match archetype {
        // Upper garment: torso, sleeves and a neck cut-out.
        0 => {
            let sleeve = 0.35 + 0.2 * p.variant;
            let torso = in_rect(0.3, 0.7, 0.2, 0.85);
            let sleeves = (in_rect(0.12, 0.3, 0.2, 0.2 + sleeve) || in_rect(0.7, 0.88, 0.2, 0.2 + sleeve))
                && v >= 0.2;
            (torso || sleeves) && !in_ellipse(0.5, 0.2, 0.09, 0.07)
        }
        // Bag: body plus a handle arc.
        1 => {
            let w = 0.2 + 0.08 * p.variant;
            let body = in_rect(0.5 - w, 0.5 + w, 0.42, 0.85);
            let outer = in_ellipse(0.5, 0.42, 0.17, 0.2);
            let inner = in_ellipse(0.5, 0.42, 0.11, 0.14);
            body || (outer && !inner && v <= 0.42)
        }
        // Lower garment: waistband and two legs with slight flare.
        2 => {
            let flare = 0.04 * p.variant * (v - 0.25).max(0.0);
            let waist = in_rect(0.3, 0.7, 0.08, 0.25);
            let left = in_rect(0.3 - flare, 0.48, 0.25, 0.93);
            let right = in_rect(0.52, 0.7 + flare, 0.25, 0.93);
            waist || left || right
        }
        // Shoe: heel block, sole and a toe extending to the right.
        _ => {
            let toe = 0.18 + 0.06 * p.variant;
            let sole = in_rect(0.1, 0.9, 0.62, 0.7);
            let heel = in_rect(0.1, 0.35, 0.4, 0.62);
            let vamp = in_ellipse(0.9 - toe, 0.62, toe, 0.16) && v <= 0.62;
            sole || heel || vamp
        }
    }
}

fn render_item(
    archetype: usize,
    category: usize,
    theme: &Theme,
    shape: &ShapeParams,
    resolution: usize,
) -> (ItemImage, SilhouetteMask) {
    let r = resolution;
    let mut image = ItemImage::blank(r, category);
    let mut mask = vec![0u8; r * r];
    for y in 0..r {
        for x in 0..r {
            let u = (x as f32 + 0.5) / r as f32;
            let v = (y as f32 + 0.5) / r as f32;
            if inside(archetype, u, v, shape) {
                let rgb = theme.color_at(u, v).map(|c| c * 2.0 - 1.0);
                image.set_rgb(y, x, rgb);
                mask[y * r + x] = 1;
            }
        }
    }
    image.quantize();
    let mask = SilhouetteMask::new(mask, r).expect("archetype shapes occupy 1%..99% of the canvas");
    (image, mask)
}

fn generate_outfit(seed: u64, index: usize, resolution: usize, n_categories: usize) -> OutfitRecord {
    let mut rng = substream(seed, tags::CORPUS, index as u64);
    let theme = Theme::sample(&mut rng);
    let mut items = Vec::with_capacity(n_categories);
    let mut silhouettes = Vec::with_capacity(n_categories);
    for category in 0..n_categories {
        let archetype = category % CATEGORY_NAMES.len();
        let item_theme = theme.jitter(&mut rng);
        let shape = ShapeParams::sample(&mut rng);
        let (mut image, mut mask) = render_item(archetype, category, &item_theme, &shape, resolution);
        if archetype == SHOE_ARCHETYPE {
            let normalized = normalize_orientation(&image);
            if normalized != image {
                debug_assert_eq!(normalized, mirror_image(&image));
                mask = mirror_mask(&mask);
                image = normalized;
            }
        }
        items.push(image);
        silhouettes.push(mask);
    }
    OutfitRecord {
        id: format!("outfit_{index:05}"),
        items,
        silhouettes,
        likes: Some(rng.gen_range(0..1000)),
    }
}

fn check_corpus_args(n_outfits: usize, resolution: usize, n_categories: usize) -> Result<()> {
    crate::config::check_resolution(resolution)?;
    if n_categories < 2 {
        return config_err(format!("n_categories must be at least 2, got {n_categories}"));
    }
    if n_outfits < 2 {
        return config_err(format!("n_outfits must be at least 2, got {n_outfits}"));
    }
    Ok(())
}

/// All records of a synthetic corpus, in index order. Each outfit draws from
/// its own substream of `seed`, so records are independent of `n_outfits`.
pub fn generate_records(
    seed: u64,
    n_outfits: usize,
    resolution: usize,
    n_categories: usize,
) -> Result<Vec<OutfitRecord>> {
    check_corpus_args(n_outfits, resolution, n_categories)?;
    Ok((0..n_outfits)
        .map(|i| generate_outfit(seed, i, resolution, n_categories))
        .collect())
}

/// Synthetic corpus split 80/20.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_outfits: usize,
    resolution: usize,
    n_categories: usize,
) -> Result<DatasetSplit> {
    let records = generate_records(seed, n_outfits, resolution, n_categories)?;
    split_dataset(records, 0.8, seed)
}

/// Mean RGB of an item's foreground pixels, in `[-1, 1]`.
pub fn mean_foreground_color(image: &ItemImage, mask: &SilhouetteMask) -> [f64; 3] {
    let r = image.resolution;
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..r {
        for x in 0..r {
            if mask.mask[y * r + x] == 1 {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += image.get(c, y, x) as f64;
                }
                n += 1;
            }
        }
    }
    sum.map(|s| s / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_silhouette, iou};

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic_corpus(7, 10, 64, 4).unwrap();
        let b = generate_synthetic_corpus(7, 10, 64, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(8, 10, 64, 4).unwrap();
        assert_ne!(a.train[0].items[0], c.train[0].items[0]);
    }

    #[test]
    fn categories_are_permutations() {
        for rec in generate_records(3, 20, 32, 4).unwrap() {
            let mut cats = rec.categories();
            cats.sort_unstable();
            assert_eq!(cats, vec![0, 1, 2, 3]);
            rec.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_records(0, 10, 48, 4).is_err());
        assert!(generate_records(0, 10, 8, 4).is_err());
        assert!(generate_records(0, 10, 64, 1).is_err());
        assert!(generate_records(0, 1, 64, 4).is_err());
    }

    #[test]
    fn items_within_an_outfit_share_a_palette() {
        let records = generate_records(7, 200, 64, 4).unwrap();
        let colors: Vec<Vec<[f64; 3]>> = records
            .iter()
            .map(|r| {
                r.items
                    .iter()
                    .zip(&r.silhouettes)
                    .map(|(i, s)| mean_foreground_color(i, s))
                    .collect()
            })
            .collect();
        let (mut within, mut nw) = (0.0, 0usize);
        for c in &colors {
            for i in 0..c.len() {
                for j in i + 1..c.len() {
                    within += dist(c[i], c[j]);
                    nw += 1;
                }
            }
        }
        let (mut across, mut na) = (0.0, 0usize);
        for a in 0..colors.len() {
            for b in a + 1..colors.len() {
                for ci in &colors[a] {
                    for cj in &colors[b] {
                        across += dist(*ci, *cj);
                        na += 1;
                    }
                }
            }
        }
        let (within, across) = (within / nw as f64, across / na as f64);
        assert!(within < across, "within {within} vs across {across}");
    }

    #[test]
    fn stored_silhouettes_match_thresholded_items() {
        let records = generate_records(11, 100, 64, 4).unwrap();
        for rec in &records {
            for (item, sil) in rec.items.iter().zip(&rec.silhouettes) {
                let extracted = extract_silhouette(item, 0.1).unwrap();
                assert!(iou(&extracted, sil) >= 0.95);
            }
        }
    }

    #[test]
    fn shoes_face_right() {
        for rec in generate_records(5, 30, 64, 4).unwrap() {
            let shoe = &rec.items[3];
            assert_eq!(&normalize_orientation(shoe), shoe);
        }
    }
}
