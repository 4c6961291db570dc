//! Frozen four-tap convolutional feature network used by the perceptual loss
//! and as the feature extractor for FID.
//!
//! Tap `j` is `relu(conv3x3(x))` at resolution `R / 2^j`; taps are separated
//! by 2×2 average pooling. Weights come either from a safetensors file
//! (`tap{j}.weight`, `tap{j}.bias`) or from a fixed seed.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};

use crate::config::{Config, PerceptualBackend};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::global_avg_pool;
use crate::rng::seeded;

pub const N_TAPS: usize = 4;

#[derive(Debug, Clone)]
struct Tap {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct PerceptualNet {
    taps: Vec<Tap>,
    linear: bool,
}

impl PerceptualNet {
    pub fn frozen_random(channels: [usize; N_TAPS], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::random(channels, seed, false, dtype, device)
    }

    /// Same construction without the rectifiers; every tap is linear in the input.
    pub fn linear(channels: [usize; N_TAPS], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::random(channels, seed, true, dtype, device)
    }

    fn random(channels: [usize; N_TAPS], seed: u64, linear: bool, dtype: DType, device: &Device) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded(seed);
        let mut taps = Vec::with_capacity(N_TAPS);
        let mut c_in = 3;
        for &c in &channels {
            // He-style scaling keeps activations of a random ReLU stack in range.
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let w: Vec<f64> = (0..c * c_in * 9).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng) * std).collect();
            taps.push(Tap {
                weight: Tensor::from_vec(w, (c, c_in, 3, 3), device)?.to_dtype(dtype)?,
                bias: Tensor::zeros(c, dtype, device)?,
            });
            c_in = c;
        }
        Ok(Self { taps, linear })
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Input(format!("cannot read perceptual weights {}: {e}", path.display())))?;
        let mut taps = Vec::with_capacity(N_TAPS);
        let mut c_in = 3;
        for j in 0..N_TAPS {
            let get = |k: &str| {
                tensors
                    .get(&format!("tap{j}.{k}"))
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("perceptual weights lack tap{j}.{k}")))
            };
            let weight = get("weight")?.to_dtype(dtype)?;
            let bias = get("bias")?.to_dtype(dtype)?;
            let (c, ci, kh, kw) = weight.dims4()?;
            if ci != c_in || kh != 3 || kw != 3 || bias.dims() != [c] {
                return shape_err(format!("tap{j} has weight {:?} and bias {:?}", weight.dims(), bias.dims()));
            }
            taps.push(Tap { weight, bias });
            c_in = c;
        }
        Ok(Self { taps, linear: false })
    }

    /// The network selected by the loss configuration; `None` when disabled.
    pub fn from_config(cfg: &Config, dtype: DType, device: &Device) -> Result<Option<Self>> {
        let loss = &cfg.loss;
        match loss.perceptual_backend {
            PerceptualBackend::Off => Ok(None),
            PerceptualBackend::FrozenRandom => {
                Ok(Some(Self::frozen_random(loss.perceptual_channels, loss.perceptual_seed, dtype, device)?))
            }
            PerceptualBackend::Pretrained => match &loss.perceptual_weights {
                Some(p) => Ok(Some(Self::load(p, dtype, device)?)),
                None => config_err("perceptual_backend = \"pretrained\" requires loss.perceptual_weights"),
            },
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.weight.dim(0).expect("rank 4")).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.channels().iter().sum()
    }

    /// Feature maps at the four taps for `(B, 3, R, R)` images.
    pub fn taps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != w || h % (1 << (N_TAPS - 1)) != 0 {
            return shape_err(format!("perceptual network cannot tap a {c}x{h}x{w} input"));
        }
        let mut out = Vec::with_capacity(N_TAPS);
        let mut x = images.clone();
        for (j, tap) in self.taps.iter().enumerate() {
            if j > 0 {
                x = x.avg_pool2d(2)?;
            }
            let c = tap.bias.dim(0)?;
            x = x.conv2d(&tap.weight, 1, 1, 1, 1)?.broadcast_add(&tap.bias.reshape((1, c, 1, 1))?)?;
            if !self.linear {
                x = x.relu()?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Globally pooled taps, concatenated: `(B, Σ channels)`.
    pub fn pooled_features(&self, images: &Tensor) -> Result<Tensor> {
        let pooled = self
            .taps(images)?
            .iter()
            .map(global_avg_pool)
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&pooled, D::Minus1)?)
    }
}

/// Sum over taps of the mean absolute feature difference; the mean runs over
/// items as well, so the result is the per-item average.
pub fn perceptual_loss(net: &PerceptualNet, real: &Tensor, synth: &Tensor) -> Result<Tensor> {
    if real.dims() != synth.dims() {
        return shape_err(format!("perceptual inputs differ: {:?} vs {:?}", real.dims(), synth.dims()));
    }
    let a = net.taps(real)?;
    let b = net.taps(synth)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(&b) {
        let term = (x - y)?.abs()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("four taps"))
}
