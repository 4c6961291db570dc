use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};

use super::checkpoint::{load_checkpoint, CheckpointManifest};
use crate::config::Config;
use crate::discriminators::{CollocationDims, CollocationDis, UnetDims, UnetDis};
use crate::error::Result;
use crate::extractor::{Extractor, ExtractorDims};
use crate::generator::{Generator, GeneratorDims};
use crate::nn::ParamStore;
use crate::perceptual::PerceptualNet;
use crate::rng::{substream, tags::INIT};

/// Every network of one run. Parameter names in checkpoints carry the
/// prefixes `E.`, `G.`, `D.` and `C.`.
#[derive(Debug)]
pub struct Models {
    pub extractor: Extractor,
    pub generator: Generator,
    pub dis: UnetDis,
    pub coll: CollocationDis,
    pub perceptual: Option<PerceptualNet>,
}

pub const PREFIXES: [&str; 4] = ["E.", "G.", "D.", "C."];

impl Models {
    pub fn new(cfg: &Config, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let r = cfg.resolution();
        Ok(Self {
            extractor: Extractor::new(ExtractorDims::from_config(cfg), dtype, device, &mut substream(seed, INIT, 0))?,
            generator: Generator::new(GeneratorDims::from_config(cfg), dtype, device, &mut substream(seed, INIT, 1))?,
            dis: UnetDis::new(
                UnetDims { resolution: r, channels: cfg.dis.channels, logit_clamp: cfg.dis.logit_clamp },
                dtype,
                device,
                &mut substream(seed, INIT, 2),
            )?,
            coll: CollocationDis::new(
                CollocationDims {
                    resolution: r,
                    n_categories: cfg.data.n_categories,
                    channels: cfg.collocation.channels,
                    embed_dim: cfg.collocation.embed_dim,
                },
                dtype,
                device,
                &mut substream(seed, INIT, 3),
            )?,
            perceptual: PerceptualNet::from_config(cfg, dtype, device)?,
        })
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore); 4] {
        [
            (PREFIXES[0], self.extractor.params()),
            (PREFIXES[1], self.generator.params()),
            (PREFIXES[2], self.dis.params()),
            (PREFIXES[3], self.coll.params()),
        ]
    }

    /// Extractor and generator parameters, trained jointly.
    pub fn eg_params(&self) -> Vec<(String, Var)> {
        let mut v = prefixed(PREFIXES[0], self.extractor.params());
        v.extend(prefixed(PREFIXES[1], self.generator.params()));
        v
    }

    pub fn dis_params(&self) -> Vec<(String, Var)> {
        prefixed(PREFIXES[2], self.dis.params())
    }

    pub fn coll_params(&self) -> Vec<(String, Var)> {
        prefixed(PREFIXES[3], self.coll.params())
    }

    pub fn snapshot(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (prefix, store) in self.stores() {
            for (k, v) in store.snapshot() {
                out.insert(format!("{prefix}{k}"), v);
            }
        }
        out
    }

    /// Networks for `cfg` with weights from a checkpoint directory. A
    /// checkpoint written under another model configuration is refused
    /// unless `force` is set.
    pub fn from_checkpoint(cfg: &Config, dir: &Path, force: bool) -> Result<(Self, CheckpointManifest)> {
        let device = Device::Cpu;
        let c = load_checkpoint(dir, Some(&cfg.model_hash()), force, &device)?;
        let models = Self::new(cfg, DType::F32, &device)?;
        models.load(&c.tensors)?;
        Ok((models, c.manifest))
    }

    /// Load all four parameter sets; nothing is written unless every set validates.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let split: Vec<HashMap<String, Tensor>> = self
            .stores()
            .iter()
            .map(|(prefix, _)| {
                tensors
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                    .collect()
            })
            .collect();
        for ((_, store), part) in self.stores().iter().zip(&split) {
            store.check(part)?;
        }
        for ((_, store), part) in self.stores().iter().zip(&split) {
            store.load(part)?;
        }
        Ok(())
    }
}

fn prefixed(prefix: &str, store: &ParamStore) -> Vec<(String, Var)> {
    store.named_vec().into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}
