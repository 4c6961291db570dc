//! `outfitgan`: corpus generation, training, outfit completion and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric abort,
//! 4 I/O or checkpoint error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use outfitgan::config::{parse_override, MaskSource};
use outfitgan::data::{
    generate_records, manifest_sha256, read_split, split_dataset, write_outfit_grid, write_split, DatasetSplit,
    GivenMask,
};
use outfitgan::metrics::{
    complete_outfit, evaluate_run, feature_network, load_models, score_table, tournament, CollocationPredictor,
    EvalOptions, MetricReport, Predictor,
};
use outfitgan::training::Trainer;
use outfitgan::{Config, Error};
use serde::Serialize;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

/// File name of the resolved configuration written into every output directory.
const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Parser)]
#[command(name = "outfitgan", version, about = "Silhouette- and style-conditioned outfit completion")]
struct Cli {
    /// TOML configuration file; keys may be nested tables or dotted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Seed of the command's own randomness: corpus for synth-data,
    /// initialization and batches for train, masks for generate and eval.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, env = "OUTFITGAN_OUT", default_value = "runs", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskSourceArg {
    Real,
    RandomPool,
}

impl From<MaskSourceArg> for MaskSource {
    fn from(m: MaskSourceArg) -> Self {
        match m {
            MaskSourceArg::Real => MaskSource::Real,
            MaskSourceArg::RandomPool => MaskSource::RandomPool,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic corpus and write the train/test split.
    SynthData,
    /// Train all networks; checkpoints go to `<out>/ckpt/<iter>`.
    Train {
        /// Corpus directory from `synth-data`; regenerated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Iterations to run in this invocation (default: up to `train.n_iter`).
        #[arg(long)]
        iters: Option<u64>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint written under a different model configuration.
        #[arg(long)]
        force: bool,
    },
    /// Complete test outfits from a checkpoint and write one image strip each.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Which items are given, e.g. `1,0,0,0`.
        #[arg(long)]
        given: String,
        #[arg(long, value_enum, default_value = "real")]
        mask_source: MaskSourceArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of test outfits to complete.
        #[arg(long, default_value_t = 4)]
        limit: usize,
        #[arg(long)]
        force: bool,
    },
    /// Score checkpoints on the test split; two or more also run F²BT.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mask_source: Option<MaskSourceArg>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(Error::Json(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Sampling(_) | Error::DegenerateMask { .. } => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Numeric(_) | Error::Shape(_) | Error::Tensor(_) => EXIT_NUMERIC,
        Error::Checkpoint { .. } | Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Csv(_) => EXIT_IO,
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn resolve_config(cli: &Cli) -> std::result::Result<Config, Failure> {
    let overrides = cli.set.iter().map(|s| parse_override(s)).collect::<outfitgan::Result<Vec<_>>>()?;
    let mut cfg = Config::load(cli.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::SynthData => cfg.data.seed = seed,
            Command::Train { .. } => cfg.train.seed = seed,
            Command::Generate { .. } | Command::Eval { .. } => cfg.eval.seed = seed,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(out: &Path, cfg: &Config) -> CmdResult {
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_toml_string())?;
    Ok(())
}

fn load_data(cfg: &Config, dir: Option<&Path>) -> std::result::Result<DatasetSplit, Failure> {
    match dir {
        Some(d) => Ok(read_split(d)?),
        None => {
            let d = &cfg.data;
            let records = generate_records(d.seed, d.n_outfits, d.resolution, d.n_categories)?;
            Ok(split_dataset(records, d.split_ratio, d.seed)?)
        }
    }
}

fn cmd_synth_data(cfg: &Config, out: &Path) -> CmdResult {
    let split = load_data(cfg, None)?;
    write_split(out, &split)?;
    println!("train {} outfits, test {} outfits", split.train.len(), split.test.len());
    println!("manifest sha256 {}", manifest_sha256(out)?);
    Ok(())
}

fn cmd_train(
    cfg: Config,
    out: &Path,
    data: Option<&Path>,
    iters: Option<u64>,
    resume: Option<&Path>,
    force: bool,
) -> CmdResult {
    let split = load_data(&cfg, data)?;
    let n_iter = cfg.train.n_iter;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(cfg, split.train, ckpt, force)?,
        None => Trainer::new(cfg, split.train)?,
    }
    .with_output(out);
    let start = trainer.iteration();
    let until = iters.map_or(n_iter, |n| start + n);
    log::info!("training from iteration {start} to {until}");
    trainer.run(until)?;
    let last = trainer.history().last();
    println!("finished at iteration {}", trainer.iteration());
    if let Some(rec) = last {
        println!("{}", outfitgan::training::LOG_HEADER);
        println!("{}", rec.line());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GeneratedOutfit {
    id: String,
    file: String,
    given: String,
    /// Tile indices produced by the generator.
    synthesized: Vec<usize>,
}

fn cmd_generate(cfg: &Config, out: &Path, ckpt: &Path, given: &str, source: MaskSource, data: Option<&Path>, limit: usize, force: bool) -> CmdResult {
    let given = GivenMask::parse(given).map_err(|e| Failure::Usage(e.to_string()))?;
    if given.len() != cfg.data.n_categories {
        return Err(Failure::Usage(format!(
            "--given has {} entries but outfits have {} items",
            given.len(),
            cfg.data.n_categories
        )));
    }
    let split = load_data(cfg, data)?;
    let (models, _) = load_models(cfg, ckpt, force)?;
    let opts = EvalOptions { mask_source: source, ..EvalOptions::from(cfg) };
    let mut listing = Vec::new();
    for o in 0..limit.min(split.test.len()) {
        let items = complete_outfit(&models, &split.test, o, &given, &opts)?;
        let id = split.test[o].id.clone();
        let file = format!("{id}.png");
        write_outfit_grid(&out.join(&file), &items)?;
        listing.push(GeneratedOutfit { id, file, given: given.to_string(), synthesized: given.targets().collect() });
    }
    fs::write(out.join("generate.json"), serde_json::to_string_pretty(&listing)?)?;
    println!("wrote {} outfit strips to {}", listing.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    reports: Vec<MetricReport>,
    /// F²BT counts `[setting][run]`, when at least two runs were compared.
    f2bt: Option<Vec<Vec<usize>>>,
    predictor: String,
}

fn cmd_eval(cfg: &Config, out: &Path, ckpts: &[PathBuf], source: Option<MaskSource>, data: Option<&Path>, force: bool) -> CmdResult {
    let split = load_data(cfg, data)?;
    let mut opts = EvalOptions::from(cfg);
    if let Some(s) = source {
        opts.mask_source = s;
    }
    let loaded = ckpts.iter().map(|c| load_models(cfg, c, force)).collect::<outfitgan::Result<Vec<_>>>()?;
    let held_out = match &cfg.eval.predictor_ckpt {
        Some(p) => Some(load_models(cfg, p, force)?.0),
        None => None,
    };
    let predictor_name = match &cfg.eval.predictor_ckpt {
        Some(p) => p.display().to_string(),
        None => {
            log::warn!("eval.predictor_ckpt unset; scoring compatibility with the first checkpoint's collocation discriminator");
            ckpts[0].display().to_string()
        }
    };
    let coll = held_out.as_ref().map_or(&loaded[0].0.coll, |m| &m.coll);
    let predictor = CollocationPredictor(coll);
    let features = feature_network(cfg)?;
    let runs = loaded
        .iter()
        .zip(ckpts)
        .map(|((models, _), path)| {
            evaluate_run(&path.display().to_string(), models, &split.test, &opts, &features, Some(&predictor as &dyn Predictor))
        })
        .collect::<outfitgan::Result<Vec<_>>>()?;
    let wins = if runs.len() >= 2 {
        Some(tournament(&runs)?)
    } else {
        log::warn!("F²BT needs at least two checkpoints; skipped");
        None
    };
    fs::create_dir_all(out)?;
    if wins.is_some() {
        for (s, setting) in opts.settings.iter().enumerate() {
            let f = fs::File::create(out.join(format!("scores_given{setting}.csv")))?;
            score_table(&runs, s)?.write_csv(f)?;
        }
    }
    let reports: Vec<MetricReport> = runs
        .iter()
        .enumerate()
        .map(|(r, run)| {
            let w = wins.as_ref().map(|w| w.iter().map(|per_setting| per_setting[r]).collect());
            MetricReport::new(run, w, Some(&loaded[r].1))
        })
        .collect();
    for rep in &reports {
        println!("{}  [{}]", rep.run, rep.columns.join(" "));
        println!("  SSIM {}", fmt_row(&rep.ssim));
        println!("  FID  {}", fmt_row(&rep.fid));
        if let Some(f) = &rep.f2bt {
            println!("  F2BT {}", fmt_row(f));
        }
    }
    let report = EvalReport { reports, f2bt: wins, predictor: predictor_name };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn fmt_row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> CmdResult {
    let cfg = resolve_config(&cli)?;
    let out = cli.out.as_path();
    write_resolved(out, &cfg)?;
    match &cli.command {
        Command::SynthData => cmd_synth_data(&cfg, out),
        Command::Train { data, iters, resume, force } => {
            cmd_train(cfg, out, data.as_deref(), *iters, resume.as_deref(), *force)
        }
        Command::Generate { ckpt, given, mask_source, data, limit, force } => {
            cmd_generate(&cfg, out, ckpt, given, (*mask_source).into(), data.as_deref(), *limit, *force)
        }
        Command::Eval { ckpt, mask_source, data, force } => {
            cmd_eval(&cfg, out, ckpt, mask_source.map(Into::into), data.as_deref(), *force)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
