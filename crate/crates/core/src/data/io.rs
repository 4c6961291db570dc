//! On-disk corpus layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/{train,test}/<id>/item_<k>.png   8-bit RGB, mapped linearly to [-1, 1]
//! <root>/{train,test}/<id>/mask_<k>.png   8-bit gray, 0 or 255
//! <root>/{train,test}/<id>/meta.json      categories and likes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::split::record_files;
use super::{from_u8, to_u8, DatasetSplit, ItemImage, OutfitRecord, RecordFiles, SilhouetteMask};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    id: String,
    categories: Vec<usize>,
    likes: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    train: Vec<String>,
    test: Vec<String>,
    records: BTreeMap<String, RecordFiles>,
}

pub(crate) fn image_to_rgb(image: &ItemImage) -> RgbImage {
    let r = image.resolution as u32;
    RgbImage::from_fn(r, r, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| to_u8(image.get(c, y, x))))
    })
}

fn rgb_to_image(img: &RgbImage, category: usize) -> Result<ItemImage> {
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::Input(format!("item image is {w}x{h}, expected square")));
    }
    let r = w as usize;
    let mut pixels = vec![0.0f32; 3 * r * r];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * r + y as usize) * r + x as usize] = from_u8(p[c]);
        }
    }
    ItemImage::new(pixels, r, category)
}

fn write_record(root: &Path, rec: &OutfitRecord, files: &RecordFiles) -> Result<()> {
    let meta_path = root.join(&files.meta);
    fs::create_dir_all(meta_path.parent().expect("record files live in a directory"))?;
    for (k, (item, mask)) in rec.items.iter().zip(&rec.silhouettes).enumerate() {
        image_to_rgb(item).save(root.join(&files.items[k]))?;
        let r = mask.resolution as u32;
        let gray = GrayImage::from_fn(r, r, |x, y| {
            Luma([mask.mask[y as usize * mask.resolution + x as usize] * 255])
        });
        gray.save(root.join(&files.masks[k]))?;
    }
    let meta = Meta { id: rec.id.clone(), categories: rec.categories(), likes: rec.likes };
    fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn read_record(root: &Path, files: &RecordFiles) -> Result<OutfitRecord> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(root.join(&files.meta))?)?;
    if meta.categories.len() != files.items.len() || files.items.len() != files.masks.len() {
        return Err(Error::Input(format!("record {} has inconsistent file lists", meta.id)));
    }
    let mut items = Vec::new();
    let mut silhouettes = Vec::new();
    for (k, &cat) in meta.categories.iter().enumerate() {
        let rgb = image::open(root.join(&files.items[k]))?.to_rgb8();
        items.push(rgb_to_image(&rgb, cat)?);
        let gray = image::open(root.join(&files.masks[k]))?.to_luma8();
        let r = gray.width() as usize;
        let mask = gray.pixels().map(|p| (p[0] >= 128) as u8).collect();
        silhouettes.push(SilhouetteMask::new(mask, r)?);
    }
    let rec = OutfitRecord { id: meta.id, items, silhouettes, likes: meta.likes };
    rec.validate()?;
    Ok(rec)
}

pub fn write_split(root: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut records = BTreeMap::new();
    for (name, part) in [("train", &split.train), ("test", &split.test)] {
        for rec in part {
            let files = split.manifest.get(&rec.id).cloned().unwrap_or_else(|| record_files(name, rec));
            write_record(root, rec, &files)?;
            records.insert(rec.id.clone(), files);
        }
    }
    let manifest = Manifest {
        seed: split.seed,
        train: split.train.iter().map(|r| r.id.clone()).collect(),
        test: split.test.iter().map(|r| r.id.clone()).collect(),
        records,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// SHA-256 of a written corpus manifest.
pub fn manifest_sha256(root: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(fs::read(root.join("manifest.json"))?)))
}

/// Save items side by side as one PNG strip.
pub fn write_outfit_grid(path: &Path, items: &[ItemImage]) -> Result<()> {
    let Some(first) = items.first() else {
        return Err(Error::Input("an outfit grid needs at least one item".into()));
    };
    let r = first.resolution as u32;
    let mut grid = RgbImage::new(r * items.len() as u32, r);
    for (k, item) in items.iter().enumerate() {
        if item.resolution as u32 != r {
            return Err(Error::Input("outfit grid items differ in resolution".into()));
        }
        image::imageops::replace(&mut grid, &image_to_rgb(item), (k as u32 * r) as i64, 0);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    grid.save(path)?;
    Ok(())
}

pub fn read_split(root: &Path) -> Result<DatasetSplit> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(root.join("manifest.json"))?)?;
    let load = |ids: &[String]| -> Result<Vec<OutfitRecord>> {
        ids.iter()
            .map(|id| {
                let files = manifest
                    .records
                    .get(id)
                    .ok_or_else(|| Error::Input(format!("manifest lacks files for {id}")))?;
                read_record(root, files)
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
        seed: manifest.seed,
        manifest: manifest.records,
    })
}
