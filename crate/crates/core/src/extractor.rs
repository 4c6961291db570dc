//! Pyramid style extractor.
//!
//! Given items pass through a three-stage convolutional backbone. At every
//! stage a side branch (conv, global pooling, linear projection) emits a
//! visual embedding `V`; rows of items that are not given are exactly zero.
//! Each `V` is concatenated with a learned category embedding and the item
//! sequence (in category order) is read by a per-scale bidirectional LSTM.
//! Three MLPs turn the middle embeddings of scales 1, 2 and 3 into the
//! first, middle and last groups of the `K` per-layer style vectors.

use candle_core::{DType, Device, Module, Tensor, Var, D};

use crate::config::Config;
use crate::data::GivenMask;
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{global_avg_pool, leaky_relu, EqConv2d, EqLinear, ParamStore};
use crate::rng::Rng;

pub const N_SCALES: usize = 3;

/// Layer counts fed by the three MLPs: first = last = `ceil(5K/14)`, the
/// middle group takes the rest. `(5, 4, 5)` at `K = 14`.
pub fn head_groups(k: usize) -> Result<[usize; 3]> {
    let outer = (5 * k).div_ceil(14);
    if k < 2 * outer {
        return config_err(format!("cannot split {k} style layers into head groups"));
    }
    Ok([outer, k - 2 * outer, outer])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorDims {
    pub resolution: usize,
    pub n_items: usize,
    pub channels: usize,
    pub d_v: usize,
    pub d_cat: usize,
    pub hidden: usize,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub style_dim: usize,
}

impl ExtractorDims {
    pub fn from_config(cfg: &Config) -> Self {
        let e = &cfg.extractor;
        Self {
            resolution: cfg.resolution(),
            n_items: cfg.data.n_categories,
            channels: e.channels,
            d_v: e.d_v,
            d_cat: e.d_cat,
            hidden: e.hidden,
            mlp_layers: e.mlp_layers,
            mlp_width: e.mlp_width,
            style_dim: e.style_dim,
        }
    }

    pub fn n_styles(&self) -> usize {
        crate::config::style_layers(self.resolution).expect("validated resolution")
    }

    pub fn item_embedding_dim(&self) -> usize {
        self.d_v + self.d_cat * self.n_items
    }
}

/// One LSTM direction. Gate order in the stacked weights: input, forget,
/// cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: ps.uniform(&format!("{name}.w_ih"), (4 * hidden, d_in), bound, rng)?,
            w_hh: ps.uniform(&format!("{name}.w_hh"), (4 * hidden, hidden), bound, rng)?,
            bias: ps.uniform(&format!("{name}.bias"), 4 * hidden, bound, rng)?,
            hidden,
        })
    }

    /// Hidden states for each step of `steps` (each `(B, d_in)`), in order.
    pub fn run(&self, steps: &[Tensor]) -> Result<Vec<Tensor>> {
        let Some(first) = steps.first() else { return Ok(vec![]) };
        let b = first.dim(0)?;
        let mut h = Tensor::zeros((b, self.hidden), first.dtype(), first.device())?;
        let mut c = h.clone();
        let w_ih = self.w_ih.as_tensor().t()?;
        let w_hh = self.w_hh.as_tensor().t()?;
        let mut out = Vec::with_capacity(steps.len());
        for x in steps {
            let gates = (x.matmul(&w_ih)? + h.matmul(&w_hh)?)?.broadcast_add(self.bias.as_tensor())?;
            let chunks = gates.chunk(4, 1)?;
            let i = candle_nn::ops::sigmoid(&chunks[0])?;
            let f = candle_nn::ops::sigmoid(&chunks[1])?;
            let g = chunks[2].tanh()?;
            let o = candle_nn::ops::sigmoid(&chunks[3])?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    /// `items: (B, N, d_in) -> (B, N, 2H)`, each position being
    /// `backward hidden ⊕ forward hidden`.
    pub fn run(&self, items: &Tensor) -> Result<Tensor> {
        let (_, n, _) = items.dims3()?;
        let steps: Vec<Tensor> = (0..n).map(|i| items.narrow(1, i, 1)?.squeeze(1)).collect::<candle_core::Result<_>>()?;
        let fwd = self.forward.run(&steps)?;
        let rev: Vec<Tensor> = steps.iter().rev().cloned().collect();
        let mut bwd = self.backward.run(&rev)?;
        bwd.reverse();
        let merged = (0..n)
            .map(|i| Tensor::cat(&[&bwd[i], &fwd[i]], 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::stack(&merged, 1)?)
    }

    /// Same parameters with the two directions exchanged.
    pub fn swapped(&self) -> Self {
        Self { forward: self.backward.clone(), backward: self.forward.clone() }
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    hidden: Vec<EqLinear>,
    heads: Option<EqLinear>,
    n_heads: usize,
}

impl Mlp {
    fn forward(&self, x: &Tensor, style_dim: usize) -> Result<Option<Tensor>> {
        let Some(heads) = &self.heads else { return Ok(None) };
        let mut h = x.clone();
        for layer in &self.hidden {
            h = leaky_relu(&layer.forward(&h)?)?;
        }
        let y = heads.forward(&h)?;
        let mut dims = y.dims()[..y.rank() - 1].to_vec();
        dims.extend([self.n_heads, style_dim]);
        Ok(Some(y.reshape(dims)?))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    main: EqConv2d,
    side: EqConv2d,
    proj: EqLinear,
}

#[derive(Debug)]
pub struct Extractor {
    params: ParamStore,
    dims: ExtractorDims,
    stages: Vec<Stage>,
    categories: Var,
    lstms: Vec<BiLstm>,
    mlps: Vec<Mlp>,
}

impl Extractor {
    pub fn new(dims: ExtractorDims, dtype: DType, device: &Device, rng: &mut Rng) -> Result<Self> {
        let k = dims.n_styles();
        let groups = head_groups(k)?;
        let mut ps = ParamStore::new(dtype, device);
        let mut stages = Vec::with_capacity(N_SCALES);
        let mut c_in = 3;
        for j in 0..N_SCALES {
            let c = dims.channels << j;
            stages.push(Stage {
                main: EqConv2d::new(&mut ps, &format!("stage{j}.main"), c_in, c, 3, 2, rng)?,
                side: EqConv2d::new(&mut ps, &format!("stage{j}.side"), c, c, 3, 1, rng)?,
                proj: EqLinear::new(&mut ps, &format!("stage{j}.proj"), c, dims.d_v, 0.0, rng)?,
            });
            c_in = c;
        }
        let categories = ps.normal("category_table", (dims.n_items, dims.d_cat * dims.n_items), 1.0, rng)?;
        let d_in = dims.item_embedding_dim();
        let mut lstms = Vec::with_capacity(N_SCALES);
        for j in 0..N_SCALES {
            lstms.push(BiLstm {
                forward: Lstm::new(&mut ps, &format!("lstm{j}.fwd"), d_in, dims.hidden, rng)?,
                backward: Lstm::new(&mut ps, &format!("lstm{j}.bwd"), d_in, dims.hidden, rng)?,
            });
        }
        let mut mlps = Vec::with_capacity(N_SCALES);
        for (j, &n_heads) in groups.iter().enumerate() {
            if n_heads == 0 {
                mlps.push(Mlp { hidden: vec![], heads: None, n_heads });
                continue;
            }
            let mut hidden = Vec::new();
            let mut d = 2 * dims.hidden;
            for l in 0..dims.mlp_layers - 1 {
                hidden.push(EqLinear::new(&mut ps, &format!("mlp{j}.fc{l}"), d, dims.mlp_width, 0.0, rng)?);
                d = dims.mlp_width;
            }
            let heads = EqLinear::new(&mut ps, &format!("mlp{j}.heads"), d, n_heads * dims.style_dim, 0.0, rng)?;
            mlps.push(Mlp { hidden, heads: Some(heads), n_heads });
        }
        Ok(Self { params: ps, dims, stages, categories, lstms, mlps })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dims(&self) -> &ExtractorDims {
        &self.dims
    }

    pub fn bilstm(&self, scale: usize) -> &BiLstm {
        &self.lstms[scale]
    }

    fn check_inputs(&self, images: &Tensor, given: &[GivenMask]) -> Result<(usize, usize)> {
        let (b, n, c, h, w) = images.dims5()?;
        let r = self.dims.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::Config(format!(
                "images are {c}x{h}x{w}, backbone is configured for 3x{r}x{r}"
            )));
        }
        if n != self.dims.n_items || given.len() != b || given.iter().any(|g| g.len() != n) {
            return shape_err(format!(
                "expected {} items per outfit and one mask per outfit, got {n} items / {} masks",
                self.dims.n_items,
                given.len()
            ));
        }
        Ok((b, n))
    }

    /// Per-scale visual embeddings `V_j`, each `(B, N, d_v)`.
    pub fn extract_pyramid(&self, images: &Tensor, given: &[GivenMask]) -> Result<Vec<Tensor>> {
        let (b, n) = self.check_inputs(images, given)?;
        let r = self.dims.resolution;
        let flat = images.reshape((b * n, 3, r, r))?;
        let given_rows: Vec<u32> = (0..b * n)
            .filter(|&k| given[k / n].is_given(k % n))
            .map(|k| k as u32)
            .collect();
        let idx = Tensor::new(given_rows.as_slice(), images.device())?;
        // Targets are zero-masked inputs whose embeddings are forced to zero,
        // so only given rows are pushed through the backbone.
        let mut f = flat.index_select(&idx, 0)?;
        let mut out = Vec::with_capacity(N_SCALES);
        for stage in &self.stages {
            f = leaky_relu(&stage.main.forward(&f)?)?;
            let side = global_avg_pool(&leaky_relu(&stage.side.forward(&f)?)?)?;
            let v_given = stage.proj.forward(&side)?;
            let v = Tensor::zeros((b * n, self.dims.d_v), v_given.dtype(), v_given.device())?
                .index_add(&idx, &v_given, 0)?;
            out.push(v.reshape((b, n, self.dims.d_v))?);
        }
        Ok(out)
    }

    /// Category embeddings `(B, N, d_cat * N)`.
    pub fn category_embedding(&self, categories: &[Vec<usize>], device: &Device) -> Result<Tensor> {
        let b = categories.len();
        let n = self.dims.n_items;
        let mut flat = Vec::with_capacity(b * n);
        for cats in categories {
            if cats.len() != n {
                return shape_err(format!("expected {n} categories per outfit, got {}", cats.len()));
            }
            for &c in cats {
                if c >= n {
                    return Err(Error::Input(format!("category {c} out of range 0..{n}")));
                }
                flat.push(c as u32);
            }
        }
        let idx = Tensor::new(flat.as_slice(), device)?;
        Ok(self.categories.as_tensor().index_select(&idx, 0)?.reshape((b, n, ()))?)
    }

    pub fn run_bilstm(&self, items: &Tensor, scale: usize) -> Result<Tensor> {
        let (_, _, d) = items.dims3()?;
        if d != self.dims.item_embedding_dim() {
            return shape_err(format!("item embedding has {d} dims, expected {}", self.dims.item_embedding_dim()));
        }
        self.lstms[scale].run(items)
    }

    /// `(B, N, 2H)` per scale to style codes `(B, N, K, style_dim)`.
    pub fn map_styles(&self, middle: &[Tensor]) -> Result<Tensor> {
        if middle.len() != N_SCALES {
            return shape_err(format!("expected {N_SCALES} middle embeddings, got {}", middle.len()));
        }
        let parts = self
            .mlps
            .iter()
            .zip(middle)
            .map(|(mlp, m)| mlp.forward(m, self.dims.style_dim))
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<Tensor> = parts.into_iter().flatten().collect();
        Ok(Tensor::cat(&parts, 2)?)
    }

    /// Style codes for all N items of every outfit, given items included.
    pub fn extract_styles(&self, images: &Tensor, given: &[GivenMask], categories: &[Vec<usize>]) -> Result<Tensor> {
        let pyramid = self.extract_pyramid(images, given)?;
        let cat = self.category_embedding(categories, images.device())?.to_dtype(images.dtype())?;
        let middle = pyramid
            .iter()
            .enumerate()
            .map(|(j, v)| self.run_bilstm(&Tensor::cat(&[v, &cat], D::Minus1)?, j))
            .collect::<Result<Vec<_>>>()?;
        self.map_styles(&middle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::rng::seeded;

    fn tiny_dims(resolution: usize) -> ExtractorDims {
        ExtractorDims {
            resolution,
            n_items: 4,
            channels: 3,
            d_v: 6,
            d_cat: 2,
            hidden: 8,
            mlp_layers: 2,
            mlp_width: 5,
            style_dim: 4,
        }
    }

    fn random_images(b: usize, r: usize, seed: u64, dtype: DType) -> Tensor {
        let mut rng = seeded(seed);
        let mut ps = ParamStore::new(dtype, &Device::Cpu);
        ps.uniform("x", (b, 4, 3, r, r), 1.0, &mut rng).unwrap().as_tensor().clone()
    }

    fn masks(given: &[&str]) -> Vec<GivenMask> {
        given.iter().map(|s| GivenMask::parse(s).unwrap()).collect()
    }

    #[test]
    fn head_group_rule() {
        assert_eq!(head_groups(14).unwrap(), [5, 4, 5]);
        assert_eq!(head_groups(10).unwrap(), [4, 2, 4]);
        assert_eq!(head_groups(18).unwrap().iter().sum::<usize>(), 18);
        assert_eq!(head_groups(6).unwrap(), [3, 0, 3]);
        assert!(head_groups(1).is_err());
    }

    #[test]
    fn non_given_items_have_zero_embeddings() {
        let e = Extractor::new(tiny_dims(16), DType::F32, &Device::Cpu, &mut seeded(0)).unwrap();
        let x = random_images(2, 16, 1, DType::F32);
        let v = e.extract_pyramid(&x, &masks(&["0,0,0,1", "1,0,1,0"])).unwrap();
        for vj in &v {
            let rows = vj.to_vec3::<f32>().unwrap();
            for (b, given) in [[false, false, false, true], [true, false, true, false]].iter().enumerate() {
                for i in 0..4 {
                    let zero = rows[b][i].iter().all(|&x| x == 0.0);
                    assert_eq!(zero, !given[i], "outfit {b} item {i}");
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_pyramid() {
        let e = Extractor::new(tiny_dims(16), DType::F32, &Device::Cpu, &mut seeded(0)).unwrap();
        for (_, var) in e.params().named() {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let x = random_images(1, 16, 2, DType::F32);
        for v in e.extract_pyramid(&x, &masks(&["1,1,0,1"])).unwrap() {
            assert!(v.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_lstm_has_zero_hiddens() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = seeded(0);
        let bi = BiLstm {
            forward: Lstm::new(&mut ps, "f", 3, 5, &mut rng).unwrap(),
            backward: Lstm::new(&mut ps, "b", 3, 5, &mut rng).unwrap(),
        };
        for (_, v) in ps.named() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let x = ps_random((2, 4, 3), 3);
        let m = bi.run(&x).unwrap();
        assert_eq!(m.dims(), &[2, 4, 10]);
        assert!(m.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    fn ps_random(shape: (usize, usize, usize), seed: u64) -> Tensor {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        ps.uniform("x", shape, 1.0, &mut seeded(seed)).unwrap().as_tensor().clone()
    }

    #[test]
    fn single_step_sequence() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = seeded(4);
        let bi = BiLstm {
            forward: Lstm::new(&mut ps, "f", 3, 5, &mut rng).unwrap(),
            backward: Lstm::new(&mut ps, "b", 3, 5, &mut rng).unwrap(),
        };
        let m = bi.run(&ps_random((1, 1, 3), 5)).unwrap();
        assert_eq!(m.dims(), &[1, 1, 10]);
    }

    #[test]
    fn reversal_with_swapped_directions() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let mut rng = seeded(6);
        let bi = BiLstm {
            forward: Lstm::new(&mut ps, "f", 3, 5, &mut rng).unwrap(),
            backward: Lstm::new(&mut ps, "b", 3, 5, &mut rng).unwrap(),
        };
        let x = ps_random((1, 4, 3), 7);
        let m = bi.run(&x).unwrap().to_vec3::<f64>().unwrap();
        let xr = x.flip(&[1]).unwrap();
        let mr = bi.swapped().run(&xr).unwrap().to_vec3::<f64>().unwrap();
        for i in 0..4 {
            let a = &m[0][i];
            let b = &mr[0][3 - i];
            // Halves trade places: backward ⊕ forward becomes forward ⊕ backward.
            for k in 0..5 {
                assert!((a[k] - b[k + 5]).abs() < 1e-6);
                assert!((a[k + 5] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn style_shape_and_masking_invariance() {
        let e = Extractor::new(tiny_dims(32), DType::F32, &Device::Cpu, &mut seeded(3)).unwrap();
        let x = random_images(1, 32, 8, DType::F32);
        let given = masks(&["1,0,1,0"]);
        let cats = vec![vec![0, 1, 2, 3]];
        let s = e.extract_styles(&x, &given, &cats).unwrap();
        assert_eq!(s.dims(), &[1, 4, 8, 4]);
        let again = e.extract_styles(&x, &given, &cats).unwrap();
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap(), again.flatten_all().unwrap().to_vec1::<f32>().unwrap());

        // Perturb a non-given item's pixels.
        let noise = random_images(1, 32, 9, DType::F32);
        let keep = Tensor::new(&[1f32, 0., 1., 0.], &Device::Cpu).unwrap().reshape((1, 4, 1, 1, 1)).unwrap();
        let x2 = (x.broadcast_mul(&keep).unwrap() + noise.broadcast_mul(&(1.0 - &keep).unwrap()).unwrap()).unwrap();
        let s2 = e.extract_styles(&x2, &given, &cats).unwrap();
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap(), s2.flatten_all().unwrap().to_vec1::<f32>().unwrap());

        // Category sensitivity.
        let s3 = e.extract_styles(&x, &given, &[vec![1, 0, 2, 3]]).unwrap();
        assert_ne!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap(), s3.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn paper_shape_at_256() {
        let mut dims = tiny_dims(256);
        dims.style_dim = 512;
        let e = Extractor::new(dims, DType::F32, &Device::Cpu, &mut seeded(0)).unwrap();
        let x = Tensor::zeros((1, 4, 3, 256, 256), DType::F32, &Device::Cpu).unwrap();
        let s = e.extract_styles(&x, &masks(&["1,0,0,0"]), &[vec![0, 1, 2, 3]]).unwrap();
        assert_eq!(s.dims(), &[1, 4, 14, 512]);
    }

    #[test]
    fn rejects_wrong_resolution() {
        let e = Extractor::new(tiny_dims(16), DType::F32, &Device::Cpu, &mut seeded(0)).unwrap();
        let x = Tensor::zeros((1, 4, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(e.extract_pyramid(&x, &masks(&["1,0,0,0"])), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e = Extractor::new(tiny_dims(16), DType::F64, &Device::Cpu, &mut seeded(11)).unwrap();
        let x = random_images(2, 16, 12, DType::F64);
        let given = masks(&["1,0,1,0", "0,1,1,1"]);
        let cats = vec![vec![0, 1, 2, 3]; 2];
        let vars = e.params().named_vec();
        let report = gradcheck::check(
            || Ok(e.extract_styles(&x, &given, &cats)?.sum_all()?),
            &vars,
            6,
            1e-6,
            &mut seeded(13),
        )
        .unwrap();
        assert!(report.relative_error() < 1e-4, "rel err {} worst {:?}", report.relative_error(), report.worst());
    }
}
