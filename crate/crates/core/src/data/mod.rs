//! Outfit data model, synthetic corpus, silhouettes and given/target masks.

mod corpus;
mod io;
mod masks;
mod silhouette;
mod split;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use corpus::{generate_synthetic_corpus, generate_records, mean_foreground_color, CATEGORY_NAMES};
pub use io::{manifest_sha256, read_split, write_outfit_grid, write_split};
pub use masks::{enumerate_valid_masks, sample_given_mask, sample_mask_with_count};
pub use silhouette::{extract_silhouette, foreground, iou, mask_iou, normalize_orientation};
pub use split::split_dataset;

/// Background colour of every corpus image, in `[-1, 1]` RGB.
pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

/// One item image, CHW layout, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemImage {
    pub pixels: Vec<f32>,
    pub resolution: usize,
    pub category: usize,
}

impl ItemImage {
    pub fn new(pixels: Vec<f32>, resolution: usize, category: usize) -> Result<Self> {
        crate::config::check_resolution(resolution)?;
        if pixels.len() != 3 * resolution * resolution {
            return shape_err(format!(
                "expected {} pixel values, got {}",
                3 * resolution * resolution,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Input(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { pixels, resolution, category })
    }

    pub fn blank(resolution: usize, category: usize) -> Self {
        let plane = resolution * resolution;
        let mut pixels = Vec::with_capacity(3 * plane);
        for c in BACKGROUND {
            pixels.extend(std::iter::repeat(c).take(plane));
        }
        Self { pixels, resolution, category }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        let r = self.resolution;
        self.pixels[(c * r + y) * r + x]
    }

    #[inline]
    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let r = self.resolution;
        for (c, v) in rgb.into_iter().enumerate() {
            self.pixels[(c * r + y) * r + x] = v;
        }
    }

    /// Snap values onto the 8-bit grid used on disk.
    pub fn quantize(&mut self) {
        for v in &mut self.pixels {
            *v = from_u8(to_u8(*v));
        }
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let r = self.resolution;
        Ok(Tensor::from_slice(&self.pixels, (3, r, r), device)?)
    }

    pub fn from_tensor(t: &Tensor, category: usize) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 || h != w {
            return shape_err(format!("expected a (3, R, R) image tensor, got {:?}", t.dims()));
        }
        let pixels = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self { pixels, resolution: h, category })
    }
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

#[inline]
pub(crate) fn from_u8(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Binary foreground mask of an item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilhouetteMask {
    pub mask: Vec<u8>,
    pub resolution: usize,
}

impl SilhouetteMask {
    pub const MIN_OCCUPANCY: f64 = 0.01;
    pub const MAX_OCCUPANCY: f64 = 0.99;

    pub fn new(mask: Vec<u8>, resolution: usize) -> Result<Self> {
        if mask.len() != resolution * resolution {
            return shape_err(format!(
                "expected {} mask values, got {}",
                resolution * resolution,
                mask.len()
            ));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Input("silhouette mask must be binary".into()));
        }
        let m = Self { mask, resolution };
        let occupancy = m.occupancy();
        if !(Self::MIN_OCCUPANCY..=Self::MAX_OCCUPANCY).contains(&occupancy) {
            return Err(Error::DegenerateMask { occupancy });
        }
        Ok(m)
    }

    pub fn occupancy(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len() as f64
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let r = self.resolution;
        let v: Vec<f32> = self.mask.iter().map(|&m| m as f32).collect();
        Ok(Tensor::from_vec(v, (1, r, r), device)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutfitRecord {
    pub id: String,
    pub items: Vec<ItemImage>,
    pub silhouettes: Vec<SilhouetteMask>,
    pub likes: Option<u64>,
}

impl OutfitRecord {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn resolution(&self) -> usize {
        self.items.first().map(|i| i.resolution).unwrap_or(0)
    }

    pub fn categories(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.category).collect()
    }

    /// Items ordered by category, one per category, with aligned silhouettes.
    pub fn validate(&self) -> Result<()> {
        let n = self.items.len();
        if n == 0 || self.silhouettes.len() != n {
            return shape_err(format!(
                "outfit {}: {} items but {} silhouettes",
                self.id,
                n,
                self.silhouettes.len()
            ));
        }
        let mut seen = vec![false; n];
        for item in &self.items {
            if item.category >= n || std::mem::replace(&mut seen[item.category], true) {
                return Err(Error::Input(format!(
                    "outfit {}: categories {:?} are not a permutation of 0..{n}",
                    self.id,
                    self.categories()
                )));
            }
        }
        let r = self.resolution();
        if self.items.iter().any(|i| i.resolution != r)
            || self.silhouettes.iter().any(|s| s.resolution != r)
        {
            return shape_err(format!("outfit {}: mixed resolutions", self.id));
        }
        Ok(())
    }
}

/// Which items of an outfit are inputs (`true`) versus synthesis targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GivenMask {
    given: Vec<bool>,
}

impl GivenMask {
    pub fn new(given: Vec<bool>) -> Result<Self> {
        let n = given.len();
        let m = given.iter().filter(|&&g| g).count();
        if n < 2 || m == 0 || m == n {
            return Err(Error::Input(format!(
                "given mask {given:?} must mark at least one given and one target item"
            )));
        }
        Ok(Self { given })
    }

    /// Parse `"1,0,0,0"`.
    pub fn parse(text: &str) -> Result<Self> {
        let given = text
            .split(',')
            .map(|s| match s.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::Input(format!("given mask entry `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(given)
    }

    pub fn len(&self) -> usize {
        self.given.len()
    }

    pub fn is_empty(&self) -> bool {
        self.given.is_empty()
    }

    pub fn is_given(&self, i: usize) -> bool {
        self.given[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.given
    }

    pub fn n_given(&self) -> usize {
        self.given.iter().filter(|&&g| g).count()
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.given.iter().enumerate().filter(|(_, &g)| !g).map(|(i, _)| i)
    }

    pub fn to_bits(&self) -> u64 {
        self.given
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &g)| acc | ((g as u64) << i))
    }
}

impl std::fmt::Display for GivenMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: Vec<&str> = self.given.iter().map(|&g| if g { "1" } else { "0" }).collect();
        write!(f, "{}", s.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFiles {
    pub items: Vec<String>,
    pub masks: Vec<String>,
    pub meta: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<OutfitRecord>,
    pub test: Vec<OutfitRecord>,
    pub seed: u64,
    /// Record id to its on-disk files, relative to the corpus root.
    pub manifest: BTreeMap<String, RecordFiles>,
}

/// Stacked tensors for a list of outfits: images `(B, N, 3, R, R)`,
/// silhouettes `(B, N, 1, R, R)` and categories `(B, N)`.
#[derive(Debug, Clone)]
pub struct OutfitTensors {
    pub images: Tensor,
    pub silhouettes: Tensor,
    pub categories: Vec<Vec<usize>>,
}

impl OutfitTensors {
    pub fn from_records(records: &[&OutfitRecord], dtype: DType, device: &Device) -> Result<Self> {
        if records.is_empty() {
            return shape_err("cannot stack zero outfits");
        }
        let mut imgs = Vec::with_capacity(records.len());
        let mut sils = Vec::with_capacity(records.len());
        for rec in records {
            rec.validate()?;
            let items = rec
                .items
                .iter()
                .map(|i| i.to_tensor(device))
                .collect::<Result<Vec<_>>>()?;
            let masks = rec
                .silhouettes
                .iter()
                .map(|s| s.to_tensor(device))
                .collect::<Result<Vec<_>>>()?;
            imgs.push(Tensor::stack(&items, 0)?);
            sils.push(Tensor::stack(&masks, 0)?);
        }
        Ok(Self {
            images: Tensor::stack(&imgs, 0)?.to_dtype(dtype)?,
            silhouettes: Tensor::stack(&sils, 0)?.to_dtype(dtype)?,
            categories: records.iter().map(|r| r.categories()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.categories.len()
    }

    pub fn n_items(&self) -> usize {
        self.categories.first().map(Vec::len).unwrap_or(0)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            self.images.device(),
        )?;
        Ok(Self {
            images: self.images.index_select(&idx, 0)?,
            silhouettes: self.silhouettes.index_select(&idx, 0)?,
            categories: indices.iter().map(|&i| self.categories[i].clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn given_mask_rejects_all_or_nothing() {
        assert!(GivenMask::new(vec![true, true, true, true]).is_err());
        assert!(GivenMask::new(vec![false; 4]).is_err());
        assert!(GivenMask::new(vec![true]).is_err());
        let m = GivenMask::parse("1,0,0,0").unwrap();
        assert_eq!(m.n_given(), 1);
        assert_eq!(m.targets().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(m.to_string(), "1,0,0,0");
        assert!(GivenMask::parse("1,1,1,1").is_err());
        assert!(GivenMask::parse("1,2").is_err());
    }

    #[test]
    fn silhouette_occupancy_bounds() {
        let r = 16;
        assert!(matches!(
            SilhouetteMask::new(vec![0; r * r], r),
            Err(Error::DegenerateMask { .. })
        ));
        assert!(matches!(
            SilhouetteMask::new(vec![1; r * r], r),
            Err(Error::DegenerateMask { .. })
        ));
        let mut m = vec![0; r * r];
        m[..64].fill(1);
        assert!(SilhouetteMask::new(m, r).is_ok());
    }

    #[test]
    fn item_image_validation() {
        assert!(ItemImage::new(vec![0.0; 3 * 16 * 16], 16, 0).is_ok());
        assert!(ItemImage::new(vec![1.5; 3 * 16 * 16], 16, 0).is_err());
        assert!(ItemImage::new(vec![0.0; 3 * 12 * 12], 12, 0).is_err());
    }

    #[test]
    fn quantization_keeps_background_exact() {
        for v in [-1.0f32, 1.0, 0.0] {
            let q = from_u8(to_u8(v));
            // Half of the 2/255 quantization step, plus float slack.
            assert!((q - v).abs() <= 1.0 / 255.0 + 1e-6);
        }
        assert_eq!(from_u8(to_u8(1.0)), 1.0);
        assert_eq!(from_u8(to_u8(-1.0)), -1.0);
    }
}
