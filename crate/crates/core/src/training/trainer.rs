use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use super::losses::{l1_loss, mixed_embeddings, total_g_loss, GLossParts, Lambdas};
use super::models::Models;
use super::r1::{next_r1, r1_due, r1_penalty_with_grads};
use crate::config::Config;
use crate::data::{sample_given_mask, GivenMask, OutfitRecord, OutfitTensors};
use crate::discriminators::{
    collocation_dis_loss, collocation_g_loss, dis_loss, gan_loss_g, gather_items, sample_negative_batch,
};
use crate::error::{config_err, Error, Result};
use crate::generator::{syn_outfit, target_rows, SynOutfit};
use crate::nn::{Adam, AdamConfig};
use crate::perceptual::perceptual_loss;
use crate::rng::{substream, tags::BATCH};

pub const LOG_HEADER: &str = "iter, L_dis, L_coll_dis, L_gan, L1, Lvgg, Lcoll, Lg";
pub const LOG_FILE: &str = "train_log.csv";

/// Largest per-pixel move of the finite-difference step inside R1.
const R1_PIXEL_STEP: f64 = 1e-2;

const OPT_D: &str = "opt_d.";
const OPT_C: &str = "opt_c.";
const OPT_G: &str = "opt_g.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub l_dis: f64,
    pub l_coll_dis: f64,
    pub l_gan: f64,
    pub l1: f64,
    pub lvgg: f64,
    pub lcoll: f64,
    pub lg: f64,
    /// R1 penalty, on iterations where it was applied.
    pub r1: Option<f64>,
}

impl LossRecord {
    pub fn line(&self) -> String {
        format!(
            "{}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}",
            self.iter, self.l_dis, self.l_coll_dis, self.l_gan, self.l1, self.lvgg, self.lcoll, self.lg
        )
    }
}

/// Everything sampled for one iteration; a pure function of `(seed, iteration)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationBatch {
    pub indices: Vec<usize>,
    pub given: Vec<GivenMask>,
    /// One incompatible outfit per batch entry, as `(outfit, item)` rows in category order.
    pub negatives: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Dis,
    Collocation,
    Generator,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn add_grads(a: &mut [Option<Tensor>], b: Vec<Option<Tensor>>) -> Result<()> {
    for (x, y) in a.iter_mut().zip(b) {
        *x = match (x.take(), y) {
            (Some(x), Some(y)) => Some((x + y)?),
            (x, y) => x.or(y),
        };
    }
    Ok(())
}

/// True when every given item of the composite is bit-identical to the input.
pub fn given_items_exact(syn: &SynOutfit, images: &Tensor, given: &[GivenMask]) -> Result<bool> {
    let n = images.dim(1)?;
    for (b, g) in given.iter().enumerate() {
        for i in (0..n).filter(|&i| g.is_given(i)) {
            let a = syn.outfit.get(b)?.get(i)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let r = images.get(b)?.get(i)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            if a.iter().zip(&r).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Weighted generator objective on one composited batch:
/// adversarial, L1, perceptual and collocation terms. `neg` holds the
/// (detached) embeddings of incompatible outfits.
pub fn generator_objective(
    m: &Models,
    x: &OutfitTensors,
    syn: &SynOutfit,
    given: &[GivenMask],
    neg: &Tensor,
    cfg: &Config,
) -> Result<(GLossParts, Tensor)> {
    let (b, n, c, r, _) = x.images.dims5()?;
    let gan = gan_loss_g(&m.dis.forward(&syn.targets)?)?;
    let l1 = l1_loss(&x.images, &syn.outfit)?;
    let vgg = match &m.perceptual {
        Some(p) => perceptual_loss(p, &x.images.reshape((b * n, c, r, r))?, &syn.outfit.reshape((b * n, c, r, r))?)?,
        None => Tensor::zeros((), x.images.dtype(), x.images.device())?,
    };
    let mixed = mixed_embeddings(&m.coll, &syn.outfit, given, &x.categories)?;
    let coll = collocation_g_loss(&mixed, neg, cfg.collocation.margin)?;
    let parts = GLossParts { gan, l1, vgg, coll };
    let total = total_g_loss(&parts, Lambdas::from(&cfg.train))?;
    Ok((parts, total))
}

/// Three-phase adversarial training: real/fake discriminator, collocation
/// discriminator, then extractor and generator jointly.
#[derive(Debug)]
pub struct Trainer {
    cfg: Config,
    models: Models,
    opt_d: Adam,
    opt_c: Adam,
    opt_g: Adam,
    train: Vec<OutfitRecord>,
    iteration: u64,
    history: Vec<LossRecord>,
    out_dir: Option<PathBuf>,
    dtype: DType,
    device: Device,
}

impl Trainer {
    pub fn new(cfg: Config, train: Vec<OutfitRecord>) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.resolution();
        let n = cfg.data.n_categories;
        if train.len() < cfg.train.batch_size {
            return config_err(format!(
                "training split has {} outfits, fewer than batch_size {}",
                train.len(),
                cfg.train.batch_size
            ));
        }
        for rec in &train {
            rec.validate()?;
            if rec.resolution() != r || rec.n_items() != n {
                return Err(Error::Input(format!(
                    "record {} is {}px with {} items, config expects {r}px with {n}",
                    rec.id,
                    rec.resolution(),
                    rec.n_items()
                )));
            }
        }
        let dtype = DType::F32;
        let device = Device::Cpu;
        let models = Models::new(&cfg, dtype, &device)?;
        let t = &cfg.train;
        let adam = AdamConfig { lr: t.lr, beta1: t.adam_beta1, beta2: t.adam_beta2, eps: t.adam_eps };
        Ok(Self {
            opt_d: Adam::new(models.dis_params(), adam)?,
            opt_c: Adam::new(models.coll_params(), adam)?,
            opt_g: Adam::new(models.eg_params(), adam)?,
            models,
            cfg,
            train,
            iteration: 0,
            history: Vec::new(),
            out_dir: None,
            dtype,
            device,
        })
    }

    /// Write the loss log and periodic checkpoints under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Continue from a checkpoint directory. A checkpoint written under a
    /// different model configuration is refused unless `force` is set.
    pub fn resume(cfg: Config, train: Vec<OutfitRecord>, ckpt: &Path, force: bool) -> Result<Self> {
        let mut trainer = Self::new(cfg, train)?;
        let hash = trainer.cfg.model_hash();
        let c = load_checkpoint(ckpt, Some(&hash), force, &trainer.device)?;
        let steps = |k: &str| c.manifest.adam_steps.get(k).copied().unwrap_or(0);
        trainer.models.load(&c.tensors)?;
        trainer.opt_d.load_state(OPT_D, &c.tensors, steps(OPT_D))?;
        trainer.opt_c.load_state(OPT_C, &c.tensors, steps(OPT_C))?;
        trainer.opt_g.load_state(OPT_G, &c.tensors, steps(OPT_G))?;
        trainer.iteration = c.manifest.iteration;
        Ok(trainer)
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn optimizers(&self) -> [&Adam; 3] {
        [&self.opt_d, &self.opt_c, &self.opt_g]
    }

    pub fn sample_batch(&self, iteration: u64) -> Result<IterationBatch> {
        let mut rng = substream(self.cfg.train.seed, BATCH, iteration);
        let b = self.cfg.train.batch_size;
        let n = self.cfg.data.n_categories;
        let indices = rand::seq::index::sample(&mut rng, self.train.len(), b).into_vec();
        let given = (0..b).map(|_| sample_given_mask(&mut rng, n)).collect::<Result<Vec<_>>>()?;
        let categories: Vec<Vec<usize>> = indices.iter().map(|&i| self.train[i].categories()).collect();
        let negatives = sample_negative_batch(&categories, b, &mut rng)?;
        Ok(IterationBatch { indices, given, negatives })
    }

    fn tensors(&self, batch: &IterationBatch) -> Result<OutfitTensors> {
        let recs: Vec<&OutfitRecord> = batch.indices.iter().map(|&i| &self.train[i]).collect();
        OutfitTensors::from_records(&recs, self.dtype, &self.device)
    }

    fn finite(&self, name: &str, v: f64) -> Result<f64> {
        if v.is_finite() {
            return Ok(v);
        }
        let iteration = self.iteration + 1;
        if let Some(dir) = &self.out_dir {
            let path = dir.join("ckpt").join(format!("diag_{iteration}"));
            let diag = format!("non-finite {name} = {v} during iteration {iteration}");
            if let Err(e) = self.save_to(&path, Some(diag)) {
                log::error!("could not write diagnostic checkpoint: {e}");
            }
        }
        Err(Error::NonFinite { loss: name.to_string(), iteration })
    }

    pub fn step(&mut self) -> Result<LossRecord> {
        self.step_observed(&mut |_, _| {})
    }

    /// One iteration; `observer` runs after each phase's parameter update.
    pub fn step_observed(&mut self, observer: &mut dyn FnMut(Phase, &Models)) -> Result<LossRecord> {
        let t = self.iteration + 1;
        let batch = self.sample_batch(t)?;
        let x = self.tensors(&batch)?;
        let (b, n, c, r, _) = x.images.dims5()?;
        let margin = self.cfg.collocation.margin;
        let m = &self.models;

        // Extractor and generator are not touched by the two discriminator
        // phases, so one synthesis pass serves all three.
        let syn = syn_outfit(&m.extractor, &m.generator, &x.images, &x.silhouettes, &batch.given, &x.categories)?;
        let every = self.cfg.train.leakage_check_every;
        if every > 0 && t % every == 0 && !given_items_exact(&syn, &x.images, &batch.given)? {
            return Err(Error::Numeric(format!("given items changed by compositing at iteration {t}")));
        }
        let rows: Vec<u32> = target_rows(&batch.given).iter().map(|&(bi, i)| (bi * n + i) as u32).collect();
        let idx = Tensor::new(rows.as_slice(), &self.device)?;
        let flat_real = x.images.reshape((b * n, c, r, r))?;
        let real_targets = flat_real.index_select(&idx, 0)?;

        // Phase 1: real/fake discriminator.
        let out_r = m.dis.forward(&real_targets)?;
        let out_f = m.dis.forward(&syn.targets.detach())?;
        let l_dis_t = dis_loss(&out_r, &out_f)?;
        let l_dis = self.finite("L_dis", scalar(&l_dis_t)?)?;
        let mut grads = self.opt_d.collect(&l_dis_t.backward()?);
        let mut r1 = None;
        if r1_due(t, self.cfg.train.r1_every) {
            let res = r1_penalty_with_grads(
                |x: &Tensor| Ok(m.dis.forward(x)?.enc),
                &real_targets,
                self.cfg.train.r1_gamma,
                self.opt_d.params(),
                R1_PIXEL_STEP,
            )?;
            r1 = Some(self.finite("R1", res.value)?);
            add_grads(&mut grads, res.grads)?;
        }
        self.opt_d.step(&grads)?;
        observer(Phase::Dis, &self.models);
        let m = &self.models;

        // Phase 2: collocation discriminator on real positives and shuffled negatives.
        let pos1 = m.coll.embed_outfits(&x.images, &x.categories)?;
        let rot: Vec<u32> = (0..b).map(|i| ((i + 1) % b) as u32).collect();
        let pos2 = pos1.index_select(&Tensor::new(rot.as_slice(), &self.device)?, 0)?;
        let neg_images = gather_items(&x.images, &batch.negatives)?;
        let neg_cats: Vec<Vec<usize>> = vec![(0..n).collect(); batch.negatives.len()];
        let neg = m.coll.embed_outfits(&neg_images, &neg_cats)?;
        let l_cd_t = collocation_dis_loss(&pos1, &pos2, &neg, margin)?;
        let l_coll_dis = self.finite("L_coll_dis", scalar(&l_cd_t)?)?;
        let grads = self.opt_c.collect(&l_cd_t.backward()?);
        self.opt_c.step(&grads)?;
        observer(Phase::Collocation, &self.models);
        let m = &self.models;

        // Phase 3: extractor and generator against the updated discriminators.
        let neg = m.coll.embed_outfits(&neg_images, &neg_cats)?.detach();
        let (parts, lg_t) = generator_objective(m, &x, &syn, &batch.given, &neg, &self.cfg)?;
        let record = LossRecord {
            iter: t,
            l_dis,
            l_coll_dis,
            l_gan: self.finite("L_gan", scalar(&parts.gan)?)?,
            l1: self.finite("L1", scalar(&parts.l1)?)?,
            lvgg: self.finite("Lvgg", scalar(&parts.vgg)?)?,
            lcoll: self.finite("Lcoll", scalar(&parts.coll)?)?,
            lg: self.finite("Lg", scalar(&lg_t)?)?,
            r1,
        };
        let grads = self.opt_g.collect(&lg_t.backward()?);
        self.opt_g.step(&grads)?;
        observer(Phase::Generator, &self.models);

        self.iteration = t;
        self.history.push(record);
        self.append_log(&record)?;
        let ck = self.cfg.train.ckpt_every;
        if ck > 0 && t % ck == 0 && self.out_dir.is_some() {
            self.save_checkpoint()?;
        }
        Ok(record)
    }

    /// Train until `n_iter` iterations are complete, then checkpoint.
    pub fn run(&mut self, n_iter: u64) -> Result<()> {
        while self.iteration < n_iter {
            let rec = self.step()?;
            if rec.iter % 50 == 0 || rec.iter == 1 {
                log::info!("{}", rec.line());
            }
        }
        if self.out_dir.is_some() {
            self.save_checkpoint()?;
        }
        Ok(())
    }

    fn append_log(&self, rec: &LossRecord) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}")?;
        }
        writeln!(f, "{}", rec.line())?;
        Ok(())
    }

    pub fn checkpoint_tensors(&self) -> HashMap<String, Tensor> {
        let mut t = self.models.snapshot();
        t.extend(self.opt_d.state(OPT_D));
        t.extend(self.opt_c.state(OPT_C));
        t.extend(self.opt_g.state(OPT_G));
        t
    }

    fn manifest(&self, diagnostic: Option<String>) -> CheckpointManifest {
        CheckpointManifest {
            iteration: self.iteration,
            config_hash: self.cfg.model_hash(),
            params_sha256: String::new(),
            adam_steps: BTreeMap::from([
                (OPT_D.to_string(), self.opt_d.steps()),
                (OPT_C.to_string(), self.opt_c.steps()),
                (OPT_G.to_string(), self.opt_g.steps()),
            ]),
            seed: self.cfg.train.seed,
            next_r1: next_r1(self.iteration, self.cfg.train.r1_every),
            diagnostic,
        }
    }

    pub fn save_to(&self, dir: &Path, diagnostic: Option<String>) -> Result<PathBuf> {
        save_checkpoint(dir, &self.checkpoint_tensors(), &self.manifest(diagnostic))
    }

    /// Save under `<out>/ckpt/<iteration>`; requires an output directory.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let Some(dir) = &self.out_dir else {
            return config_err("trainer has no output directory");
        };
        self.save_to(&dir.join("ckpt").join(self.iteration.to_string()), None)
    }
}
