//! Fixed held-aside batch for tracking training progress: the same outfits
//! and the same given masks at every evaluation.

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::losses::l1_loss;
use super::models::Models;
use crate::data::{foreground, mask_iou, sample_given_mask, GivenMask, ItemImage, OutfitRecord, OutfitTensors};
use crate::error::{Error, Result};
use crate::generator::syn_outfit;
use crate::rng::{substream, tags::EVAL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// L1 between the composited and the real outfits.
    pub l1: f64,
    /// Mean IoU between thresholded synthesized targets and their silhouettes.
    pub iou: f64,
}

#[derive(Debug, Clone)]
pub struct Probe {
    tensors: OutfitTensors,
    silhouettes: Vec<Vec<Vec<u8>>>,
    given: Vec<GivenMask>,
    background_tolerance: f64,
}

impl Probe {
    pub fn new(records: &[&OutfitRecord], seed: u64, background_tolerance: f64) -> Result<Self> {
        let tensors = OutfitTensors::from_records(records, DType::F32, &Device::Cpu)?;
        let given = (0..records.len())
            .map(|i| sample_given_mask(&mut substream(seed, EVAL, i as u64), tensors.n_items()))
            .collect::<Result<Vec<_>>>()?;
        let silhouettes = records
            .iter()
            .map(|r| r.silhouettes.iter().map(|s| s.mask.clone()).collect())
            .collect();
        Ok(Self { tensors, silhouettes, given, background_tolerance })
    }

    pub fn given(&self) -> &[GivenMask] {
        &self.given
    }

    pub fn evaluate(&self, models: &Models) -> Result<ProbeResult> {
        let x = &self.tensors;
        let syn = syn_outfit(&models.extractor, &models.generator, &x.images, &x.silhouettes, &self.given, &x.categories)?;
        let l1 = l1_loss(&x.images, &syn.outfit)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, g) in self.given.iter().enumerate() {
            for i in g.targets() {
                let item = ItemImage::from_tensor(&syn.outfit.get(b)?.get(i)?, x.categories[b][i])?;
                total += mask_iou(&foreground(&item, self.background_tolerance), &self.silhouettes[b][i]);
                count += 1;
            }
        }
        if !l1.is_finite() {
            return Err(Error::Numeric(format!("probe L1 is {l1}")));
        }
        Ok(ProbeResult { l1, iou: total / count as f64 })
    }
}
