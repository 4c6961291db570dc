//! Run configuration.
//!
//! A configuration is a single TOML document whose keys mirror the module
//! layout (`data.resolution`, `train.lr`, ...). Dotted keys and tables are
//! interchangeable. Command-line overrides are applied on the parsed table
//! before deserialization so that every field is fully resolved up front.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub resolution: usize,
    pub n_outfits: usize,
    pub n_categories: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub background_tolerance: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            n_outfits: 200,
            n_categories: 4,
            seed: 7,
            split_ratio: 0.8,
            background_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub d_v: usize,
    pub d_cat: usize,
    pub hidden: usize,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub style_dim: usize,
    /// Channels of the first backbone stage; doubled at each later stage.
    pub channels: usize,
    /// Experimental. Only three scales are supported.
    pub n_scales: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            d_v: 256,
            d_cat: 50,
            hidden: 256,
            mlp_layers: 4,
            mlp_width: 512,
            style_dim: 512,
            channels: 16,
            n_scales: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Channels at full resolution; doubled per halving of resolution.
    pub base_channels: usize,
    pub max_channels: usize,
    /// Defaults to `data.resolution` when unset.
    pub resolution: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            max_channels: 32,
            resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisConfig {
    pub channels: usize,
    pub logit_clamp: f64,
}

impl Default for DisConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            logit_clamp: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollocationConfig {
    pub embed_dim: usize,
    pub channels: usize,
    pub margin: Option<f64>,
}

impl Default for CollocationConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            channels: 8,
            margin: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualBackend {
    /// Weights loaded from `loss.perceptual_weights`.
    Pretrained,
    FrozenRandom,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub perceptual_backend: PerceptualBackend,
    pub perceptual_weights: Option<PathBuf>,
    pub perceptual_seed: u64,
    pub perceptual_channels: [usize; 4],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            perceptual_backend: PerceptualBackend::FrozenRandom,
            perceptual_weights: None,
            perceptual_seed: 1234,
            perceptual_channels: [8, 16, 32, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_iter: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub r1_every: u64,
    pub r1_gamma: f64,
    pub seed: u64,
    pub ckpt_every: u64,
    pub leakage_check_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            n_iter: 2000,
            lr: 0.002,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            lambda1: 100.0,
            lambda2: 10.0,
            lambda3: 10.0,
            r1_every: 16,
            r1_gamma: 10.0,
            seed: 0,
            ckpt_every: 500,
            leakage_check_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    /// The item's own silhouette.
    Real,
    /// A silhouette of the same category drawn from the test pool.
    RandomPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub settings: Vec<usize>,
    pub seed: u64,
    pub mask_source: MaskSource,
    pub predictor_ckpt: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: vec![1, 2, 3],
            seed: 99,
            mask_source: MaskSource::Real,
            predictor_ckpt: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub extractor: ExtractorConfig,
    pub generator: GeneratorConfig,
    pub dis: DisConfig,
    pub collocation: CollocationConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolution(&self) -> usize {
        self.generator.resolution.unwrap_or(self.data.resolution)
    }

    /// Number of style vectors consumed per item: `2 log2(R) - 2`.
    pub fn n_styles(&self) -> usize {
        style_layers(self.resolution()).expect("validated resolution")
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.data.resolution;
        check_resolution(r)?;
        if let Some(g) = self.generator.resolution {
            if g != r {
                return config_err(format!(
                    "generator.resolution {g} does not match data.resolution {r}"
                ));
            }
        }
        if self.data.n_categories < 2 {
            return config_err("data.n_categories must be at least 2");
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return config_err("data.split_ratio must lie in (0, 1)");
        }
        if self.extractor.n_scales != 3 {
            return config_err("extractor.n_scales: only 3 scales are supported");
        }
        if self.extractor.mlp_layers < 1 {
            return config_err("extractor.mlp_layers must be at least 1");
        }
        if self.train.batch_size < 2 {
            return config_err("train.batch_size must be at least 2 (negative outfits mix records)");
        }
        if self.train.r1_every == 0 {
            return config_err("train.r1_every must be positive");
        }
        if self.dis.logit_clamp <= 0.0 {
            return config_err("dis.logit_clamp must be positive");
        }
        if self.loss.perceptual_backend == PerceptualBackend::Pretrained
            && self.loss.perceptual_weights.is_none()
        {
            return config_err("loss.perceptual_backend = pretrained requires loss.perceptual_weights");
        }
        crate::extractor::head_groups(self.n_styles())?;
        Ok(())
    }

    /// Hash of every setting that affects model state. Run-length and
    /// bookkeeping settings are excluded so that a run can be extended.
    pub fn model_hash(&self) -> String {
        let mut c = self.clone();
        c.train.n_iter = 0;
        c.train.ckpt_every = 0;
        c.train.leakage_check_every = 0;
        c.eval = EvalConfig::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn check_resolution(r: usize) -> Result<()> {
    if r < 16 || !r.is_power_of_two() {
        return config_err(format!("resolution {r} must be a power of two >= 16"));
    }
    Ok(())
}

/// `K = 2 log2(R) - 2`: 14 at 256 px and 18 at 1024 px.
pub fn style_layers(resolution: usize) -> Result<usize> {
    check_resolution(resolution)?;
    Ok(2 * resolution.trailing_zeros() as usize - 2)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => config_err(format!("override `{s}` is not of the form key=value")),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return config_err(format!("override `{key}`: `{p}` is not a table")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn style_layer_anchors() {
        assert_eq!(style_layers(256).unwrap(), 14);
        assert_eq!(style_layers(1024).unwrap(), 18);
        assert_eq!(style_layers(64).unwrap(), 10);
        assert!(style_layers(48).is_err());
        assert!(style_layers(8).is_err());
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = Config::from_toml_str("", &[]).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.train.adam_beta1, 0.0);
        assert_eq!(c.train.adam_beta2, 0.99);
        assert_eq!((c.train.lambda1, c.train.lambda2, c.train.lambda3), (100.0, 10.0, 10.0));
        assert_eq!(c.train.r1_every, 16);
        assert_eq!(c.extractor.d_cat, 50);
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "data.resolution = 32\n[train]\nlr = 0.01\n";
        let c = Config::from_toml_str(
            text,
            &[
                ("train.seed".into(), "5".into()),
                ("collocation.margin".into(), "1.5".into()),
                ("eval.mask_source".into(), "random-pool".into()),
            ],
        )
        .unwrap();
        assert_eq!(c.data.resolution, 32);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.collocation.margin, Some(1.5));
        assert_eq!(c.eval.mask_source, MaskSource::RandomPool);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml_str("data.resolution = 48", &[]).is_err());
        assert!(Config::from_toml_str("data.split_ratio = 1.0", &[]).is_err());
        assert!(Config::from_toml_str("data.bogus = 1", &[]).is_err());
        assert!(Config::from_toml_str("extractor.n_scales = 5", &[]).is_err());
        assert!(Config::from_toml_str("generator.resolution = 128", &[]).is_err());
    }

    #[test]
    fn model_hash_ignores_run_length() {
        let a = Config::default();
        let mut b = a.clone();
        b.train.n_iter = 10;
        assert_eq!(a.model_hash(), b.model_hash());
        b.train.lr = 0.1;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut c = Config::default();
        c.collocation.margin = Some(2.0);
        let back = Config::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
