//! Test-split evaluation: for each number of given items, synthesize the
//! remaining items of every test outfit and score SSIM, FID and, across
//! runs, the F²BT tournament.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::f2bt::{f2bt, ScoreTable};
use super::fid::{feature_stats, fid};
use super::ssim::ssim;
use crate::config::{Config, MaskSource, PerceptualBackend};
use crate::data::{sample_mask_with_count, GivenMask, ItemImage, OutfitRecord, OutfitTensors, SilhouetteMask};
use crate::discriminators::CollocationDis;
use crate::error::{Error, Result};
use crate::generator::syn_outfit;
use crate::perceptual::PerceptualNet;
use crate::rng::{substream, tags::EVAL};
use crate::training::{CheckpointManifest, Models};

/// Outfits synthesized per forward pass.
const EVAL_BATCH: usize = 8;

/// Produces composited outfits `(B, N, 3, R, R)` for given masks.
pub trait Synthesizer {
    fn synthesize(&self, x: &OutfitTensors, given: &[GivenMask]) -> Result<Tensor>;
}

impl Synthesizer for Models {
    fn synthesize(&self, x: &OutfitTensors, given: &[GivenMask]) -> Result<Tensor> {
        Ok(syn_outfit(&self.extractor, &self.generator, &x.images, &x.silhouettes, given, &x.categories)?.outfit)
    }
}

/// Returns the ground truth; every metric then takes its ideal value.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSynthesizer;

impl Synthesizer for OracleSynthesizer {
    fn synthesize(&self, x: &OutfitTensors, _given: &[GivenMask]) -> Result<Tensor> {
        Ok(x.images.clone())
    }
}

/// Outfit compatibility score; higher is more compatible.
pub trait Predictor {
    /// Scores for a batch of outfits `(B, N, 3, R, R)`.
    fn score(&self, outfits: &Tensor, categories: &[Vec<usize>]) -> Result<Vec<f64>>;
}

/// Negative mean pairwise Euclidean distance between the item embeddings of
/// a collocation discriminator.
#[derive(Debug, Clone, Copy)]
pub struct CollocationPredictor<'a>(pub &'a CollocationDis);

impl Predictor for CollocationPredictor<'_> {
    fn score(&self, outfits: &Tensor, categories: &[Vec<usize>]) -> Result<Vec<f64>> {
        let emb = self.0.embed_outfits(outfits, categories)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(emb
            .iter()
            .map(|items| {
                let (mut total, mut pairs) = (0.0, 0usize);
                for i in 0..items.len() {
                    for j in i + 1..items.len() {
                        let d: f64 = items[i].iter().zip(&items[j]).map(|(a, b)| (a - b).powi(2)).sum();
                        total += d.sqrt();
                        pairs += 1;
                    }
                }
                -total / pairs.max(1) as f64
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Numbers of given items, one evaluation pass each.
    pub settings: Vec<usize>,
    pub seed: u64,
    pub mask_source: MaskSource,
}

impl From<&Config> for EvalOptions {
    fn from(cfg: &Config) -> Self {
        Self { settings: cfg.eval.settings.clone(), seed: cfg.eval.seed, mask_source: cfg.eval.mask_source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub n_given: usize,
    pub ssim: f64,
    pub fid: f64,
    pub n_targets: usize,
    /// Predictor score per test outfit, in test-split order.
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub name: String,
    pub options: EvalOptions,
    pub n_outfits: usize,
    pub settings: Vec<SettingResult>,
}

/// Given mask for outfit `o` under setting `n_given`; the same for every run.
pub fn eval_mask(seed: u64, n_given: usize, o: usize, n_items: usize) -> Result<GivenMask> {
    sample_mask_with_count(&mut substream(seed, EVAL, ((n_given as u64) << 32) | o as u64), n_items, n_given)
}

/// Silhouettes fed to the generator: each target's own mask, or one of the
/// same category drawn from the test pool.
pub fn eval_silhouettes(
    test: &[OutfitRecord],
    o: usize,
    given: &GivenMask,
    opts: &EvalOptions,
) -> Vec<SilhouetteMask> {
    let rec = &test[o];
    match opts.mask_source {
        MaskSource::Real => rec.silhouettes.clone(),
        MaskSource::RandomPool => {
            let mut rng = substream(opts.seed ^ 0x5eed_9001, EVAL, o as u64);
            (0..rec.n_items())
                .map(|i| {
                    if given.is_given(i) {
                        return rec.silhouettes[i].clone();
                    }
                    let cat = rec.items[i].category;
                    let pool: Vec<&SilhouetteMask> = test
                        .iter()
                        .flat_map(|r| r.items.iter().zip(&r.silhouettes))
                        .filter(|(item, _)| item.category == cat)
                        .map(|(_, s)| s)
                        .collect();
                    pool[rng.gen_range(0..pool.len())].clone()
                })
                .collect()
        }
    }
}

/// Complete test outfit `o` under a caller-chosen mask; given items come
/// back unchanged.
pub fn complete_outfit(
    synth: &dyn Synthesizer,
    test: &[OutfitRecord],
    o: usize,
    given: &GivenMask,
    opts: &EvalOptions,
) -> Result<Vec<ItemImage>> {
    let rec = test.get(o).ok_or_else(|| Error::Input(format!("test split has no outfit {o}")))?;
    if given.len() != rec.n_items() {
        return Err(Error::Input(format!("given mask has {} entries for {} items", given.len(), rec.n_items())));
    }
    let device = Device::Cpu;
    let mut x = OutfitTensors::from_records(&[rec], DType::F32, &device)?;
    let masks = eval_silhouettes(test, o, given, opts)
        .iter()
        .map(|m| m.to_tensor(&device))
        .collect::<Result<Vec<_>>>()?;
    x.silhouettes = Tensor::stack(&masks, 0)?.unsqueeze(0)?.to_dtype(DType::F32)?;
    let out = synth.synthesize(&x, std::slice::from_ref(given))?.get(0)?;
    rec.items
        .iter()
        .enumerate()
        .map(|(i, item)| ItemImage::from_tensor(&out.get(i)?, item.category))
        .collect()
}

/// Evaluate one synthesizer on the test split.
pub fn evaluate_run(
    name: &str,
    synth: &dyn Synthesizer,
    test: &[OutfitRecord],
    opts: &EvalOptions,
    features: &PerceptualNet,
    predictor: Option<&dyn Predictor>,
) -> Result<RunEvaluation> {
    if test.is_empty() {
        return Err(Error::Input("evaluation needs at least one test outfit".into()));
    }
    let device = Device::Cpu;
    let n_items = test[0].n_items();
    let mut settings = Vec::with_capacity(opts.settings.len());
    for &k in &opts.settings {
        let mut ssim_sum = 0.0;
        let mut real_pool = Vec::new();
        let mut synth_pool = Vec::new();
        let mut scores = predictor.map(|_| Vec::with_capacity(test.len()));
        for start in (0..test.len()).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(test.len())).collect();
            let refs: Vec<&OutfitRecord> = idx.iter().map(|&o| &test[o]).collect();
            let given = idx.iter().map(|&o| eval_mask(opts.seed, k, o, n_items)).collect::<Result<Vec<_>>>()?;
            let mut x = OutfitTensors::from_records(&refs, DType::F32, &device)?;
            if opts.mask_source != MaskSource::Real {
                let sils = idx
                    .iter()
                    .zip(&given)
                    .map(|(&o, g)| {
                        let masks = eval_silhouettes(test, o, g, opts)
                            .iter()
                            .map(|m| m.to_tensor(&device))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Tensor::stack(&masks, 0)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                x.silhouettes = Tensor::stack(&sils, 0)?.to_dtype(DType::F32)?;
            }
            let out = synth.synthesize(&x, &given)?;
            for (b, (rec, g)) in refs.iter().zip(&given).enumerate() {
                for i in g.targets() {
                    let t = out.get(b)?.get(i)?;
                    ssim_sum += ssim(&ItemImage::from_tensor(&t, rec.items[i].category)?, &rec.items[i])?;
                    synth_pool.push(t);
                    real_pool.push(x.images.get(b)?.get(i)?);
                }
            }
            if let (Some(p), Some(s)) = (predictor, scores.as_mut()) {
                s.extend(p.score(&out, &x.categories)?);
            }
        }
        let n_targets = synth_pool.len();
        let real = feature_stats(&Tensor::stack(&real_pool, 0)?, features)?;
        let fake = feature_stats(&Tensor::stack(&synth_pool, 0)?, features)?;
        settings.push(SettingResult {
            n_given: k,
            ssim: ssim_sum / n_targets as f64,
            fid: fid(&real, &fake)?,
            n_targets,
            scores,
        });
    }
    Ok(RunEvaluation { name: name.to_string(), options: opts.clone(), n_outfits: test.len(), settings })
}

/// FID feature network for a configuration: the perceptual taps, or the
/// frozen random taps when the perceptual loss is disabled.
pub fn feature_network(cfg: &Config) -> Result<PerceptualNet> {
    let device = Device::Cpu;
    if cfg.loss.perceptual_backend == PerceptualBackend::Off {
        return PerceptualNet::frozen_random(cfg.loss.perceptual_channels, cfg.loss.perceptual_seed, DType::F32, &device);
    }
    Ok(PerceptualNet::from_config(cfg, DType::F32, &device)?.expect("backend is not off"))
}

/// Load a checkpoint's networks for evaluation.
pub fn load_models(cfg: &Config, dir: &Path, force: bool) -> Result<(Models, CheckpointManifest)> {
    Models::from_checkpoint(cfg, dir, force)
}

/// F²BT per run for each setting, `[setting][run]`. Every run must carry
/// predictor scores for the same settings.
pub fn tournament(runs: &[RunEvaluation]) -> Result<Vec<Vec<usize>>> {
    let first = runs.first().ok_or_else(|| Error::Input("no runs to compare".into()))?;
    (0..first.settings.len())
        .map(|s| {
            let mut rows = Vec::with_capacity(runs.len());
            for run in runs {
                let setting = run
                    .settings
                    .get(s)
                    .filter(|r| r.n_given == first.settings[s].n_given)
                    .ok_or_else(|| Error::Input(format!("run {} lacks setting {}", run.name, first.settings[s].n_given)))?;
                let scores = setting
                    .scores
                    .clone()
                    .ok_or_else(|| Error::Input(format!("run {} has no predictor scores", run.name)))?;
                rows.push(scores);
            }
            f2bt(&ScoreTable::new(runs.iter().map(|r| r.name.clone()).collect(), rows)?)
        })
        .collect()
}

/// Score table of one setting across runs.
pub fn score_table(runs: &[RunEvaluation], setting: usize) -> Result<ScoreTable> {
    let rows = runs
        .iter()
        .map(|r| {
            r.settings
                .get(setting)
                .and_then(|s| s.scores.clone())
                .ok_or_else(|| Error::Input(format!("run {} has no scores for setting index {setting}", r.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreTable::new(runs.iter().map(|r| r.name.clone()).collect(), rows)
}

/// Per-setting values plus their average, laid out as columns `1, 2, 3, Avg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run: String,
    pub columns: Vec<String>,
    pub ssim: Vec<f64>,
    pub fid: Vec<f64>,
    pub f2bt: Option<Vec<f64>>,
    pub n_outfits: usize,
    pub seed: u64,
    pub mask_source: MaskSource,
    pub config_hash: Option<String>,
    pub params_sha256: Option<String>,
    pub iteration: Option<u64>,
}

fn with_avg(values: Vec<f64>) -> Vec<f64> {
    let avg = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let mut v = values;
    v.push(avg);
    v
}

impl MetricReport {
    /// `wins` is this run's F²BT count per setting, when a tournament ran.
    pub fn new(run: &RunEvaluation, wins: Option<Vec<usize>>, manifest: Option<&CheckpointManifest>) -> Self {
        let mut columns: Vec<String> = run.settings.iter().map(|s| s.n_given.to_string()).collect();
        columns.push("Avg".into());
        Self {
            run: run.name.clone(),
            columns,
            ssim: with_avg(run.settings.iter().map(|s| s.ssim).collect()),
            fid: with_avg(run.settings.iter().map(|s| s.fid).collect()),
            f2bt: wins.map(|w| with_avg(w.into_iter().map(|x| x as f64).collect())),
            n_outfits: run.n_outfits,
            seed: run.options.seed,
            mask_source: run.options.mask_source,
            config_hash: manifest.map(|m| m.config_hash.clone()),
            params_sha256: manifest.map(|m| m.params_sha256.clone()),
            iteration: manifest.map(|m| m.iteration),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_records;
    use crate::training::trainer::tests::tiny_config;

    fn options(mask_source: MaskSource) -> EvalOptions {
        EvalOptions { settings: vec![1, 2, 3], seed: 4, mask_source }
    }

    fn net() -> PerceptualNet {
        PerceptualNet::frozen_random([4, 4, 4, 4], 1, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn oracle_scores_are_ideal() {
        let test = generate_records(2, 10, 16, 4).unwrap();
        let run = evaluate_run("oracle", &OracleSynthesizer, &test, &options(MaskSource::Real), &net(), None).unwrap();
        for s in &run.settings {
            assert!((s.ssim - 1.0).abs() < 1e-9);
            assert!(s.fid.abs() < 1e-6, "fid {}", s.fid);
            assert_eq!(s.n_targets, 10 * (4 - s.n_given));
        }
        let report = MetricReport::new(&run, None, None);
        assert_eq!(report.columns, vec!["1", "2", "3", "Avg"]);
        assert_eq!(report.ssim.len(), 4);
    }

    #[test]
    fn model_evaluation_is_deterministic_and_tournament_is_consistent() {
        let cfg = tiny_config();
        let test = generate_records(2, 6, 16, 4).unwrap();
        let models = Models::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let pred = CollocationPredictor(&models.coll);
        for source in [MaskSource::Real, MaskSource::RandomPool] {
            let a = evaluate_run("model", &models, &test, &options(source), &net(), Some(&pred)).unwrap();
            let b = evaluate_run("model", &models, &test, &options(source), &net(), Some(&pred)).unwrap();
            assert_eq!(a, b);
            let o = evaluate_run("oracle", &OracleSynthesizer, &test, &options(source), &net(), Some(&pred)).unwrap();
            let wins = tournament(&[a.clone(), o]).unwrap();
            for w in &wins {
                assert!(w.iter().sum::<usize>() <= test.len());
            }
            assert!(a.settings.iter().all(|s| s.ssim < 1.0 && s.fid.is_finite()));
        }
        let lone = evaluate_run("x", &OracleSynthesizer, &test, &options(MaskSource::Real), &net(), None).unwrap();
        assert!(tournament(&[lone]).is_err());
    }

    #[test]
    fn random_pool_keeps_category_and_given_masks() {
        let test = generate_records(3, 12, 16, 4).unwrap();
        let opts = options(MaskSource::RandomPool);
        let g = eval_mask(opts.seed, 1, 0, 4).unwrap();
        let sils = eval_silhouettes(&test, 0, &g, &opts);
        for i in 0..4 {
            if g.is_given(i) {
                assert_eq!(sils[i], test[0].silhouettes[i]);
            } else {
                let cat = test[0].items[i].category;
                assert!(test.iter().any(|r| r.items[i].category == cat && r.silhouettes[i] == sils[i]));
            }
        }
        assert_eq!(sils, eval_silhouettes(&test, 0, &g, &opts));
        assert_eq!(g.n_given(), 1);
    }

    #[test]
    fn completed_outfit_keeps_given_items() {
        let cfg = tiny_config();
        let test = generate_records(2, 5, 16, 4).unwrap();
        let models = Models::new(&cfg, DType::F32, &Device::Cpu).unwrap();
        let given = GivenMask::parse("1,0,1,0").unwrap();
        let items = complete_outfit(&models, &test, 2, &given, &options(MaskSource::RandomPool)).unwrap();
        assert_eq!(items[0], test[2].items[0]);
        assert_eq!(items[2], test[2].items[2]);
        assert_ne!(items[1], test[2].items[1]);
        assert!(complete_outfit(&models, &test, 9, &given, &options(MaskSource::Real)).is_err());
        let short = GivenMask::parse("1,0").unwrap();
        assert!(complete_outfit(&models, &test, 0, &short, &options(MaskSource::Real)).is_err());
    }
}
