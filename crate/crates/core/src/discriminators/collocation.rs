use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::OutfitRecord;
use crate::error::{shape_err, Error, Result};
use crate::nn::{global_avg_pool, leaky_relu, EqConv2d, ParamStore};
use crate::rng::Rng;

pub const N_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationDims {
    pub resolution: usize,
    pub n_categories: usize,
    pub channels: usize,
    pub embed_dim: usize,
}

impl CollocationDims {
    pub fn feature_dim(&self) -> usize {
        self.channels << (N_STAGES - 1)
    }
}

/// Compact CNN `F` followed by a per-category linear map `T[cat]` into the
/// compatibility space.
#[derive(Debug)]
pub struct CollocationDis {
    params: ParamStore,
    dims: CollocationDims,
    convs: Vec<EqConv2d>,
    maps: Var,
    scale: f64,
}

impl CollocationDis {
    pub fn new(dims: CollocationDims, dtype: DType, device: &Device, rng: &mut Rng) -> Result<Self> {
        let mut ps = ParamStore::new(dtype, device);
        let mut convs = Vec::with_capacity(N_STAGES);
        let mut c_in = 3;
        for j in 0..N_STAGES {
            let c = dims.channels << j;
            convs.push(EqConv2d::new(&mut ps, &format!("conv{j}"), c_in, c, 3, 2, rng)?);
            c_in = c;
        }
        let f = dims.feature_dim();
        let maps = ps.normal("category_maps", (dims.n_categories, dims.embed_dim, f), 1.0, rng)?;
        Ok(Self { params: ps, dims, convs, maps, scale: 1.0 / (f as f64).sqrt() })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dims(&self) -> &CollocationDims {
        &self.dims
    }

    /// Backbone features `(M, D_f)` of `(M, 3, R, R)` images.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let r = self.dims.resolution;
        if c != 3 || h != r || w != r {
            return shape_err(format!("collocation backbone expects 3x{r}x{r} images, got {c}x{h}x{w}"));
        }
        let mut x = images.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?)?;
        }
        Ok(global_avg_pool(&x)?)
    }

    /// `c = T[cat] · F` for features `(M, D_f)`.
    pub fn project(&self, features: &Tensor, categories: &[usize]) -> Result<Tensor> {
        let m = features.dim(0)?;
        if categories.len() != m {
            return shape_err(format!("{m} feature rows but {} categories", categories.len()));
        }
        if let Some(&bad) = categories.iter().find(|&&c| c >= self.dims.n_categories) {
            return Err(Error::Input(format!("unknown category {bad}")));
        }
        let ids: Vec<u32> = categories.iter().map(|&c| c as u32).collect();
        let idx = Tensor::new(ids.as_slice(), features.device())?;
        let maps = (self.maps.as_tensor().index_select(&idx, 0)? * self.scale)?;
        Ok(maps.matmul(&features.unsqueeze(2)?)?.squeeze(2)?)
    }

    pub fn embed_items(&self, images: &Tensor, categories: &[usize]) -> Result<Tensor> {
        self.project(&self.features(images)?, categories)
    }

    /// Item embeddings of whole outfits: `(B, N, 3, R, R) -> (B, N, D_c)`.
    pub fn embed_outfits(&self, outfits: &Tensor, categories: &[Vec<usize>]) -> Result<Tensor> {
        let (b, n, c, h, w) = outfits.dims5()?;
        if categories.len() != b || categories.iter().any(|cs| cs.len() != n) {
            return shape_err("category lists do not match the outfit batch");
        }
        let flat: Vec<usize> = categories.iter().flatten().copied().collect();
        let e = self.embed_items(&outfits.reshape((b * n, c, h, w))?, &flat)?;
        Ok(e.reshape((b, n, self.dims.embed_dim))?)
    }
}

/// Mean over the item axis: `(B, N, D) -> (B, D)`.
pub fn outfit_embedding(items: &Tensor) -> Result<Tensor> {
    Ok(items.mean(1)?)
}

/// Per-outfit `Σ_i ‖c_i − c_o‖²`, shape `(B,)`.
fn spread(items: &Tensor) -> Result<Tensor> {
    let mean = outfit_embedding(items)?.unsqueeze(1)?;
    Ok(items.broadcast_sub(&mean)?.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?)
}

/// Negative terms enter as `-x`, or as the hinge `max(0, m - x)` when a
/// margin is configured.
fn repel(x: &Tensor, margin: Option<f64>) -> Result<Tensor> {
    Ok(match margin {
        None => x.neg()?,
        Some(m) => x.neg()?.affine(1.0, m)?.relu()?,
    })
}

/// Item embeddings `(B, N, D)` of two compatible outfits and one
/// incompatible outfit; batch-averaged.
pub fn collocation_dis_loss(pos1: &Tensor, pos2: &Tensor, neg: &Tensor, margin: Option<f64>) -> Result<Tensor> {
    if pos1.dims() != pos2.dims() || pos1.dims() != neg.dims() {
        return shape_err(format!("embedding shapes differ: {:?} {:?} {:?}", pos1.dims(), pos2.dims(), neg.dims()));
    }
    let diversity = (outfit_embedding(pos1)? - outfit_embedding(pos2)?)?.sqr()?.sum(D::Minus1)?;
    let loss = ((spread(pos1)? + repel(&spread(neg)?, margin)?)? + repel(&diversity, margin)?)?;
    Ok(loss.mean_all()?)
}

/// Generator side: pull the composited outfit together, push the negative apart.
pub fn collocation_g_loss(mixed: &Tensor, neg: &Tensor, margin: Option<f64>) -> Result<Tensor> {
    if mixed.dims() != neg.dims() {
        return shape_err(format!("embedding shapes differ: {:?} {:?}", mixed.dims(), neg.dims()));
    }
    Ok((spread(mixed)? + repel(&spread(neg)?, margin)?)?.mean_all()?)
}

/// For every category position `k` the batch index that supplies it. Sources
/// are pairwise distinct when the batch is at least as large as the outfit,
/// and never all the same otherwise.
pub fn sample_negative_sources(batch: usize, n_items: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(Error::Sampling(format!("negative outfits need a batch of at least 2, got {batch}")));
    }
    if batch >= n_items {
        let mut order: Vec<usize> = (0..batch).collect();
        order.shuffle(rng);
        order.truncate(n_items);
        return Ok(order);
    }
    loop {
        let s: Vec<usize> = (0..n_items).map(|_| rng.gen_range(0..batch)).collect();
        if s.iter().any(|&x| x != s[0]) {
            return Ok(s);
        }
    }
}

/// Incompatible outfit assembled from items of different records, one per category.
pub fn sample_negative_outfit(batch: &[OutfitRecord], rng: &mut Rng) -> Result<OutfitRecord> {
    let n = batch.first().map(|r| r.n_items()).unwrap_or(0);
    let sources = sample_negative_sources(batch.len(), n, rng)?;
    let mut items = Vec::with_capacity(n);
    let mut silhouettes = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for (k, &src) in sources.iter().enumerate() {
        let rec = &batch[src];
        let pos = rec
            .items
            .iter()
            .position(|it| it.category == k)
            .ok_or_else(|| Error::Input(format!("record {} has no item of category {k}", rec.id)))?;
        items.push(rec.items[pos].clone());
        silhouettes.push(rec.silhouettes[pos].clone());
        ids.push(rec.id.as_str());
    }
    let out = OutfitRecord { id: format!("neg[{}]", ids.join(",")), items, silhouettes, likes: None };
    out.validate()?;
    Ok(out)
}

/// `(outfit, item)` rows forming `count` negative outfits from a batch whose
/// per-outfit categories are given; each negative lists its items by category.
pub fn sample_negative_batch(categories: &[Vec<usize>], count: usize, rng: &mut Rng) -> Result<Vec<Vec<(usize, usize)>>> {
    let n = categories.first().map(Vec::len).unwrap_or(0);
    (0..count)
        .map(|_| {
            let sources = sample_negative_sources(categories.len(), n, rng)?;
            sources
                .iter()
                .enumerate()
                .map(|(k, &b)| {
                    let pos = categories[b]
                        .iter()
                        .position(|&c| c == k)
                        .ok_or_else(|| Error::Input(format!("outfit {b} has no item of category {k}")))?;
                    Ok((b, pos))
                })
                .collect()
        })
        .collect()
}

/// Gather `(outfit, item)` rows from `(B, N, ...)` into `(rows.len(), n, ...)`.
pub fn gather_items(outfits: &Tensor, rows: &[Vec<(usize, usize)>]) -> Result<Tensor> {
    let (b, n) = (outfits.dim(0)?, outfits.dim(1)?);
    let flat: Vec<u32> = rows.iter().flatten().map(|&(o, i)| (o * n + i) as u32).collect();
    let idx = Tensor::new(flat.as_slice(), outfits.device())?;
    let mut tail = outfits.dims()[2..].to_vec();
    let mut merged = vec![b * n];
    merged.extend(&tail);
    let picked = outfits.reshape(merged)?.index_select(&idx, 0)?;
    let mut shape = vec![rows.len(), rows.first().map(Vec::len).unwrap_or(0)];
    shape.append(&mut tail);
    Ok(picked.reshape(shape)?)
}
