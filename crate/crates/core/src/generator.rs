//! Outfit generator: a learned 4×4 constant refined by silhouette-and-style
//! fusion blocks, two per resolution level, then a 1×1 projection to RGB.

use candle_core::{DType, Device, Module, Tensor, Var, D};

use crate::config::{style_layers, Config};
use crate::data::GivenMask;
use crate::error::{config_err, shape_err, Error, Result};
use crate::extractor::Extractor;
use crate::nn::{leaky_relu, EqConv2d, EqLinear, ParamStore};
use crate::rng::Rng;

pub const DEMOD_EPS: f64 = 1e-8;

/// `w: (O, I, k, k)`, `style: (I,)` already passed through the affine map.
/// Returns `w″[o] = w′[o] / sqrt(Σ w′[o]² + eps)` with `w′[o][i] = style[i]·w[o][i]`.
pub fn modulate_demodulate(w: &Tensor, style: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return config_err(format!("demodulation epsilon must be positive, got {eps}"));
    }
    let (_, i, _, _) = w.dims4()?;
    if style.dims() != [i] {
        return shape_err(format!("style has shape {:?}, weights expect {i} input channels", style.dims()));
    }
    let values = style.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite style vector".into()));
    }
    modulate(w, style, eps)
}

fn modulate(w: &Tensor, style: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, i, _, _) = w.dims4()?;
    let modulated = w.broadcast_mul(&style.reshape((1, i, 1, 1))?)?;
    let norm = (modulated.sqr()?.sum_keepdim((1, 2, 3))? + eps)?.sqrt()?;
    Ok(modulated.broadcast_div(&norm)?)
}

/// Area-average `(B, 1, R, R)` masks down to `size` and re-binarize at 0.5.
pub fn downsample_silhouette(silhouette: &Tensor, size: usize) -> Result<Tensor> {
    let (_, c, r, r2) = silhouette.dims4()?;
    if c != 1 || r != r2 || size == 0 || size > r || r % size != 0 {
        return shape_err(format!("cannot downsample a {r}x{r2} silhouette to {size}x{size}"));
    }
    if size == r {
        return Ok(silhouette.clone());
    }
    let f = r / size;
    let pooled = silhouette.avg_pool2d(f)?;
    Ok(pooled.ge(0.5)?.to_dtype(silhouette.dtype())?)
}

#[derive(Debug, Clone)]
pub struct SsBlock {
    weight: Var,
    scale: f64,
    bias: Var,
    affine: EqLinear,
    upsample: bool,
    in_ch: usize,
    out_ch: usize,
}

impl SsBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        style_dim: usize,
        upsample: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let c = in_ch + 1;
        Ok(Self {
            weight: ps.normal(&format!("{name}.weight"), (out_ch, c, 3, 3), 1.0, rng)?,
            scale: 1.0 / ((c * 9) as f64).sqrt(),
            bias: ps.constant(&format!("{name}.bias"), out_ch, 0.0)?,
            affine: EqLinear::new(ps, &format!("{name}.affine"), style_dim, c, 1.0, rng)?,
            upsample,
            in_ch,
            out_ch,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    /// `features: (B, I, h, w)`, `silhouette: (B, 1, R, R)`, `style: (B, S)`.
    pub fn forward(&self, features: &Tensor, silhouette: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = features.dims4()?;
        if c != self.in_ch {
            return shape_err(format!("block expects {} channels, got {c}", self.in_ch));
        }
        let x = if self.upsample {
            let (_, _, h, w) = features.dims4()?;
            features.upsample_nearest2d(2 * h, 2 * w)?
        } else {
            features.clone()
        };
        let (_, _, h, _) = x.dims4()?;
        if silhouette.dim(0)? != b || style.dim(0)? != b {
            return shape_err("features, silhouettes and styles disagree on batch size");
        }
        let mask = downsample_silhouette(silhouette, h)?;
        let x = Tensor::cat(&[&x, &mask], 1)?;
        let s = self.affine.forward(style)?;
        let w = (self.weight.as_tensor() * self.scale)?;
        let mut outs = Vec::with_capacity(b);
        for k in 0..b {
            let wk = modulate(&w, &s.get(k)?, DEMOD_EPS)?;
            outs.push(x.narrow(0, k, 1)?.conv2d(&wk, 1, 1, 1, 1)?);
        }
        let y = Tensor::cat(&outs, 0)?.broadcast_add(&self.bias.as_tensor().reshape((1, self.out_ch, 1, 1))?)?;
        Ok(leaky_relu(&y)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorDims {
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub style_dim: usize,
}

impl GeneratorDims {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            resolution: cfg.resolution(),
            base_channels: cfg.generator.base_channels,
            max_channels: cfg.generator.max_channels,
            style_dim: cfg.extractor.style_dim,
        }
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.base_channels * self.resolution / res).clamp(1, self.max_channels)
    }
}

#[derive(Debug)]
pub struct Generator {
    params: ParamStore,
    dims: GeneratorDims,
    constant: Var,
    blocks: Vec<SsBlock>,
    to_rgb: EqConv2d,
}

impl Generator {
    pub fn new(dims: GeneratorDims, dtype: DType, device: &Device, rng: &mut Rng) -> Result<Self> {
        let k = style_layers(dims.resolution)?;
        let mut ps = ParamStore::new(dtype, device);
        let c4 = dims.channels(4);
        let constant = ps.normal("constant", (1, c4, 4, 4), 1.0, rng)?;
        let mut blocks = Vec::with_capacity(k);
        let mut res = 4;
        let mut c_in = c4;
        while res <= dims.resolution {
            let c = dims.channels(res);
            blocks.push(SsBlock::new(&mut ps, &format!("block{}", blocks.len()), c_in, c, dims.style_dim, res > 4, rng)?);
            blocks.push(SsBlock::new(&mut ps, &format!("block{}", blocks.len()), c, c, dims.style_dim, false, rng)?);
            c_in = c;
            res *= 2;
        }
        debug_assert_eq!(blocks.len(), k);
        let to_rgb = EqConv2d::new(&mut ps, "to_rgb", c_in, 3, 1, 1, rng)?;
        Ok(Self { params: ps, dims, constant, blocks, to_rgb })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dims(&self) -> &GeneratorDims {
        &self.dims
    }

    pub fn n_styles(&self) -> usize {
        self.blocks.len()
    }

    /// `styles: (B, K, S)`, `silhouettes: (B, 1, R, R)` to images `(B, 3, R, R)` in `[-1, 1]`.
    pub fn synthesize(&self, styles: &Tensor, silhouettes: &Tensor) -> Result<Tensor> {
        let (b, k, s) = styles.dims3()?;
        if k != self.blocks.len() {
            return config_err(format!("generator has {} style layers, got {k} style vectors", self.blocks.len()));
        }
        if s != self.dims.style_dim {
            return shape_err(format!("style vectors have {s} dims, expected {}", self.dims.style_dim));
        }
        let r = self.dims.resolution;
        if silhouettes.dims() != [b, 1, r, r] {
            return shape_err(format!("silhouettes have shape {:?}, expected [{b}, 1, {r}, {r}]", silhouettes.dims()));
        }
        let c4 = self.dims.channels(4);
        let mut x = self.constant.as_tensor().broadcast_as((b, c4, 4, 4))?.contiguous()?;
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, silhouettes, &styles.narrow(1, l, 1)?.squeeze(1)?)?;
        }
        Ok(self.to_rgb.forward(&x)?.tanh()?)
    }
}

/// Result of compositing an outfit from real given items and synthesized targets.
#[derive(Debug, Clone)]
pub struct SynOutfit {
    /// `(B, N, 3, R, R)`: given items are the real tensors, targets are synthesized.
    pub outfit: Tensor,
    /// `(T, 3, R, R)` synthesized targets in (outfit, item) order.
    pub targets: Tensor,
    pub target_index: Vec<(usize, usize)>,
}

/// Flat `b * N + i` indices of every target item.
pub fn target_rows(given: &[GivenMask]) -> Vec<(usize, usize)> {
    given
        .iter()
        .enumerate()
        .flat_map(|(b, g)| g.targets().map(move |i| (b, i)))
        .collect()
}

/// Extract styles from the given items and synthesize every target with its
/// own silhouette. `images: (B, N, 3, R, R)`, `silhouettes: (B, N, 1, R, R)`.
pub fn syn_outfit(
    extractor: &Extractor,
    generator: &Generator,
    images: &Tensor,
    silhouettes: &Tensor,
    given: &[GivenMask],
    categories: &[Vec<usize>],
) -> Result<SynOutfit> {
    let (b, n, c, r, _) = images.dims5()?;
    if silhouettes.dims() != [b, n, 1, r, r] {
        return shape_err(format!("silhouettes have shape {:?}, expected [{b}, {n}, 1, {r}, {r}]", silhouettes.dims()));
    }
    let styles = extractor.extract_styles(images, given, categories)?;
    let (_, _, k, s) = styles.dims4()?;
    let target_index = target_rows(given);
    let rows: Vec<u32> = target_index.iter().map(|&(bi, i)| (bi * n + i) as u32).collect();
    let idx = Tensor::new(rows.as_slice(), images.device())?;
    let target_styles = styles.reshape((b * n, k, s))?.index_select(&idx, 0)?;
    let target_sils = silhouettes.reshape((b * n, 1, r, r))?.index_select(&idx, 0)?;
    let targets = generator.synthesize(&target_styles, &target_sils)?;

    let flat = images.reshape((b * n, c, r, r))?;
    let scattered = flat.zeros_like()?.index_add(&idx, &targets, 0)?;
    let keep: Vec<u8> = (0..b * n).map(|k| given[k / n].is_given(k % n) as u8).collect();
    let keep = Tensor::from_vec(keep, (b * n, 1, 1, 1), images.device())?.broadcast_as((b * n, c, r, r))?;
    let outfit = keep.where_cond(&flat, &scattered)?.reshape((b, n, c, r, r))?;
    Ok(SynOutfit { outfit, targets, target_index })
}

/// Flattened per-channel L2 norms of `(O, ...)` weights.
pub fn output_channel_norms(w: &Tensor) -> Result<Vec<f64>> {
    Ok(w.to_dtype(DType::F64)?.flatten_from(1)?.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::ExtractorDims;
    use crate::nn::gradcheck;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn hand_example() {
        let w = t64(&[1.0, 1.0], &[1, 2, 1, 1]);
        let s = t64(&[2.0, 0.5], &[2]);
        let out = modulate_demodulate(&w, &s, 1e-8).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let norm = 4.25f64.sqrt();
        assert!((out[0] - 2.0 / norm).abs() < 1e-5 && (out[0] - 0.97014).abs() < 1e-5);
        assert!((out[1] - 0.5 / norm).abs() < 1e-5 && (out[1] - 0.24254).abs() < 1e-5);
    }

    #[test]
    fn identity_style_normalizes() {
        let w = t64(&[3.0, 4.0, 0.0, 1.0, 0.0, 0.0], &[2, 3, 1, 1]);
        let out = modulate_demodulate(&w, &t64(&[1.0; 3], &[3]), 1e-8).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect = [0.6, 0.8, 0.0, 1.0, 0.0, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = t64(&[1.0, 1.0], &[1, 2, 1, 1]);
        assert!(matches!(modulate_demodulate(&w, &t64(&[f64::NAN, 1.0], &[2]), 1e-8), Err(Error::Numeric(_))));
        assert!(modulate_demodulate(&w, &t64(&[1.0, 1.0, 1.0], &[3]), 1e-8).is_err());
        assert!(modulate_demodulate(&w, &t64(&[1.0, 1.0], &[2]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn demodulated_norm_is_one(
            w in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 9),
            s in prop::collection::vec(-3.0f64..3.0, 3),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(s.iter().map(|x| x.abs()).fold(0.0, f64::max) > 0.1);
            prop_assume!(w.iter().map(|x| x.abs()).fold(0.0, f64::max) > 0.1);
            let wt = t64(&w, &[2, 3, 3, 3]);
            let out = modulate_demodulate(&wt, &t64(&s, &[3]), 1e-8).unwrap();
            for norm in output_channel_norms(&out).unwrap() {
                // A channel whose modulated weights vanish entirely stays at zero.
                prop_assert!(norm <= 1.0 + 1e-12);
                prop_assert!(norm >= 1.0 - 1e-3 || norm < 1e-3);
            }
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            let out2 = modulate_demodulate(&wt, &t64(&scaled, &[3]), 1e-8).unwrap();
            let diff = (out - out2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            prop_assert!(diff < 1e-6);
        }
    }

    #[test]
    fn silhouette_downsampling() {
        let ones = Tensor::ones((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        for size in [1, 2, 4, 8, 16] {
            let d = downsample_silhouette(&ones, size).unwrap();
            assert_eq!(d.dims(), &[1, 1, size, size]);
            assert!(d.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
        }
        // Left 3 columns of each 4-wide cell are set: 0.75 >= 0.5.
        let v: Vec<f32> = (0..64).map(|k| ((k % 8) % 4 != 3) as u8 as f32).collect();
        let m = Tensor::from_vec(v, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let d = downsample_silhouette(&m, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(d, vec![1.0; 4]);
        assert!(downsample_silhouette(&m, 3).is_err());
        assert!(downsample_silhouette(&m, 16).is_err());
    }

    #[test]
    fn zero_inputs_give_bias_activation() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let block = SsBlock::new(&mut ps, "b", 3, 4, 5, true, &mut seeded(0)).unwrap();
        block.bias.set(&t64(&[0.5, -1.0, 0.0, 2.0], &[4])).unwrap();
        let x = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let sil = Tensor::zeros((2, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let style = ps.normal("style", (2, 5), 1.0, &mut seeded(1)).unwrap().as_tensor().clone();
        let y = block.forward(&x, &sil, &style).unwrap();
        assert_eq!(y.dims(), &[2, 4, 8, 8]);
        let v = y.flatten_from(2).unwrap().to_vec3::<f64>().unwrap();
        let expect = [0.5, -0.2, 0.0, 2.0];
        for b in 0..2 {
            for (o, &e) in expect.iter().enumerate() {
                assert!(v[b][o].iter().all(|&x| (x - e).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zero_style_gives_unit_modulation() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let block = SsBlock::new(&mut ps, "b", 2, 3, 4, false, &mut seeded(0)).unwrap();
        let s = block.affine.forward(&Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 3]);
    }

    fn tiny_gen(resolution: usize, dtype: DType, seed: u64) -> Generator {
        let dims = GeneratorDims { resolution, base_channels: 2, max_channels: 4, style_dim: 3 };
        Generator::new(dims, dtype, &Device::Cpu, &mut seeded(seed)).unwrap()
    }

    fn random(shape: &[usize], dtype: DType, seed: u64) -> Tensor {
        let mut ps = ParamStore::new(dtype, &Device::Cpu);
        ps.uniform("x", shape, 1.0, &mut seeded(seed)).unwrap().as_tensor().clone()
    }

    fn blob_silhouettes(b: usize, r: usize, dtype: DType) -> Tensor {
        let v: Vec<f32> = (0..b * r * r)
            .map(|k| {
                let (y, x) = ((k / r) % r, k % r);
                (y >= r / 4 && y < 3 * r / 4 && x >= r / 4 + k / (r * r) && x < 3 * r / 4) as u8 as f32
            })
            .collect();
        Tensor::from_vec(v, (b, 1, r, r), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    #[test]
    fn synthesis_shapes_range_and_determinism() {
        for (r, k) in [(16, 6), (32, 8)] {
            let g = tiny_gen(r, DType::F32, 1);
            assert_eq!(g.n_styles(), k);
            let styles = random(&[2, k, 3], DType::F32, 2);
            let sil = blob_silhouettes(2, r, DType::F32);
            let a = g.synthesize(&styles, &sil).unwrap();
            assert_eq!(a.dims(), &[2, 3, r, r]);
            let va = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
            let vb = g.synthesize(&styles, &sil).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(va, vb);
            let wrong = random(&[2, k - 1, 3], DType::F32, 2);
            assert!(matches!(g.synthesize(&wrong, &sil), Err(Error::Config(_))));
        }
    }

    #[test]
    fn paper_depth_at_256() {
        let g = tiny_gen(256, DType::F32, 0);
        assert_eq!(g.n_styles(), 14);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = seeded(21);
        let b1 = SsBlock::new(&mut ps, "b1", 2, 3, 4, false, &mut rng).unwrap();
        let b2 = SsBlock::new(&mut ps, "b2", 3, 2, 4, true, &mut rng).unwrap();
        let x = random(&[2, 2, 4, 4], DType::F64, 22);
        let sil = blob_silhouettes(2, 16, DType::F64);
        let style = random(&[2, 4], DType::F64, 23);
        let target = random(&[2, 2, 8, 8], DType::F64, 24);
        let vars = ps.named_vec();
        let report = gradcheck::check(
            || {
                let h = b1.forward(&x, &sil, &style)?;
                let y = b2.forward(&h, &sil, &style)?;
                Ok((y * &target)?.sum_all()?)
            },
            &vars,
            8,
            1e-6,
            &mut seeded(25),
        )
        .unwrap();
        assert!(report.relative_error() < 1e-4, "rel err {} worst {:?}", report.relative_error(), report.worst());
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let g = tiny_gen(16, DType::F64, 31);
        let styles = random(&[2, 6, 3], DType::F64, 32);
        let sil = blob_silhouettes(2, 16, DType::F64);
        let target = random(&[2, 3, 16, 16], DType::F64, 33);
        let report = gradcheck::check(
            || Ok((g.synthesize(&styles, &sil)? * &target)?.sum_all()?),
            &g.params().named_vec(),
            4,
            1e-6,
            &mut seeded(34),
        )
        .unwrap();
        assert!(report.relative_error() < 1e-4, "rel err {} worst {:?}", report.relative_error(), report.worst());
    }

    fn tiny_pair(r: usize) -> (Extractor, Generator) {
        let ed = ExtractorDims {
            resolution: r,
            n_items: 4,
            channels: 2,
            d_v: 4,
            d_cat: 2,
            hidden: 4,
            mlp_layers: 2,
            mlp_width: 4,
            style_dim: 3,
        };
        (Extractor::new(ed, DType::F32, &Device::Cpu, &mut seeded(5)).unwrap(), tiny_gen(r, DType::F32, 6))
    }

    #[test]
    fn composition_keeps_given_items_bit_exact() {
        let (e, g) = tiny_pair(16);
        let images = random(&[2, 4, 3, 16, 16], DType::F32, 7);
        let sils = blob_silhouettes(8, 16, DType::F32).reshape((2, 4, 1, 16, 16)).unwrap();
        let given = vec![GivenMask::parse("1,1,1,0").unwrap(), GivenMask::parse("1,0,0,0").unwrap()];
        let cats = vec![vec![0, 1, 2, 3]; 2];
        let out = syn_outfit(&e, &g, &images, &sils, &given, &cats).unwrap();
        assert_eq!(out.target_index, vec![(0, 3), (1, 1), (1, 2), (1, 3)]);
        let o = out.outfit.to_dtype(DType::F32).unwrap();
        for (b, gm) in given.iter().enumerate() {
            for i in 0..4 {
                let got = o.get(b).unwrap().get(i).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let real = images.get(b).unwrap().get(i).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                if gm.is_given(i) {
                    assert!(got.iter().zip(&real).all(|(a, b)| a.to_bits() == b.to_bits()));
                } else {
                    assert_ne!(got, real);
                }
            }
        }
        // A given item's silhouette does not influence the result.
        let other = blob_silhouettes(8, 16, DType::F32).flip(&[3]).unwrap().reshape((2, 4, 1, 16, 16)).unwrap();
        let keep = Tensor::new(&[1f32, 1., 1., 0., 1., 0., 0., 0.], &Device::Cpu).unwrap().reshape((2, 4, 1, 1, 1)).unwrap();
        let mixed = (other.broadcast_mul(&keep).unwrap() + sils.broadcast_mul(&(1.0 - &keep).unwrap()).unwrap()).unwrap();
        let out2 = syn_outfit(&e, &g, &images, &mixed, &given, &cats).unwrap();
        assert_eq!(
            out.outfit.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            out2.outfit.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
