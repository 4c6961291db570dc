use candle_core::{DType, Device, Module, Tensor, D};

use crate::error::{shape_err, Result};
use crate::nn::{global_avg_pool, leaky_relu, EqConv2d, EqLinear, ParamStore};
use crate::rng::Rng;

pub const N_DOWN: usize = 4;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetDims {
    pub resolution: usize,
    pub channels: usize,
    pub logit_clamp: f64,
}

/// Raw logits. `enc: (B,)`, `dec: (B, R, R)`.
#[derive(Debug, Clone)]
pub struct DisOutput {
    pub enc: Tensor,
    pub dec: Tensor,
    clamp: f64,
}

impl DisOutput {
    pub fn new(enc: Tensor, dec: Tensor, clamp: f64) -> Self {
        Self { enc, dec, clamp }
    }

    pub fn enc_logit(&self) -> candle_core::Result<Tensor> {
        self.enc.clamp(-self.clamp, self.clamp)
    }

    pub fn dec_logit(&self) -> candle_core::Result<Tensor> {
        self.dec.clamp(-self.clamp, self.clamp)
    }

    pub fn enc_prob(&self) -> candle_core::Result<Tensor> {
        candle_nn::ops::sigmoid(&self.enc_logit()?)
    }

    pub fn dec_prob(&self) -> candle_core::Result<Tensor> {
        candle_nn::ops::sigmoid(&self.dec_logit()?)
    }
}

#[derive(Debug)]
pub struct UnetDis {
    params: ParamStore,
    dims: UnetDims,
    stem: EqConv2d,
    down: Vec<EqConv2d>,
    head: EqLinear,
    up: Vec<EqConv2d>,
    out: EqConv2d,
}

impl UnetDis {
    pub fn new(dims: UnetDims, dtype: DType, device: &Device, rng: &mut Rng) -> Result<Self> {
        if dims.resolution < 1 << N_DOWN || dims.resolution % (1 << N_DOWN) != 0 {
            return crate::error::config_err(format!("discriminator needs resolution divisible by {}", 1 << N_DOWN));
        }
        let mut ps = ParamStore::new(dtype, device);
        let ch = |j: usize| dims.channels << j;
        let stem = EqConv2d::new(&mut ps, "stem", 3, ch(0), 3, 1, rng)?;
        let down = (0..N_DOWN)
            .map(|j| EqConv2d::new(&mut ps, &format!("down{j}"), ch(j), ch(j + 1), 3, 2, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = EqLinear::new(&mut ps, "enc_head", ch(N_DOWN), 1, 0.0, rng)?;
        // up[j] merges the upsampled level j+1 with the encoder skip at level j.
        let up = (0..N_DOWN)
            .map(|j| EqConv2d::new(&mut ps, &format!("up{j}"), ch(j + 1) + ch(j), ch(j), 3, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = EqConv2d::new(&mut ps, "dec_head", ch(0), 1, 1, 1, rng)?;
        Ok(Self { params: ps, dims, stem, down, head, up, out })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dims(&self) -> &UnetDims {
        &self.dims
    }

    /// `images: (B, 3, R, R)`.
    pub fn forward(&self, images: &Tensor) -> Result<DisOutput> {
        let (b, c, h, w) = images.dims4()?;
        let r = self.dims.resolution;
        if c != 3 || h != r || w != r {
            return shape_err(format!("discriminator expects 3x{r}x{r} images, got {c}x{h}x{w}"));
        }
        let mut skips = vec![leaky_relu(&self.stem.forward(images)?)?];
        for conv in &self.down {
            let x = leaky_relu(&conv.forward(skips.last().expect("non-empty"))?)?;
            skips.push(x);
        }
        let bottom = skips.pop().expect("non-empty");
        let enc = self.head.forward(&global_avg_pool(&bottom)?)?.squeeze(1)?;
        let mut x = bottom;
        for j in (0..N_DOWN).rev() {
            let (_, _, hh, ww) = x.dims4()?;
            let up = x.upsample_nearest2d(2 * hh, 2 * ww)?;
            x = leaky_relu(&self.up[j].forward(&Tensor::cat(&[&up, &skips[j]], 1)?)?)?;
        }
        let dec = self.out.forward(&x)?.reshape((b, r, r))?;
        Ok(DisOutput::new(enc, dec, self.dims.logit_clamp))
    }
}

fn pixel_sum(x: &Tensor) -> candle_core::Result<Tensor> {
    x.sum(D::Minus1)?.sum(D::Minus1)
}

/// Scalar plus pixel-wise negative log-likelihood, reals toward 1 and fakes
/// toward 0. Pixel terms are summed over the map and averaged over the batch.
pub fn dis_loss(real: &DisOutput, fake: &DisOutput) -> Result<Tensor> {
    let enc = (softplus(&real.enc_logit()?.neg()?)?.mean_all()? + softplus(&fake.enc_logit()?)?.mean_all()?)?;
    let dec = (pixel_sum(&softplus(&real.dec_logit()?.neg()?)?)?.mean_all()?
        + pixel_sum(&softplus(&fake.dec_logit()?)?)?.mean_all()?)?;
    Ok((enc + dec)?)
}

/// Generator side: fakes toward 1 at both heads.
pub fn gan_loss_g(fake: &DisOutput) -> Result<Tensor> {
    let enc = softplus(&fake.enc_logit()?.neg()?)?;
    let dec = pixel_sum(&softplus(&fake.dec_logit()?.neg()?)?)?;
    Ok((enc + dec)?.mean_all()?)
}
