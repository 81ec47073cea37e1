//! `mscn` command-line driver.
//!
//! Every command reads one JSON [`RunConfig`], validates it completely, and
//! only then touches the filesystem. Outputs go under the run's output
//! directory:
//!
//! | command         | writes                                                        |
//! |-----------------|---------------------------------------------------------------|
//! | `gen-data`      | `dataset.mscd`, `manifest.json`                               |
//! | `train`         | `metrics.tsv`, `best_net{1,2}.ckpt`, `final_net{1,2}.ckpt`    |
//! | `eval`          | `report.txt`, `report.kv`                                     |
//! | `purify-report` | `purify_report.tsv`                                           |
//!
//! The top-level `seed` (or `--seed`) drives generation, noise injection and
//! training; the nested `generation.seed` and `train.seed` must be left unset.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, format, DatasetBundle, GenerationSpec, PairRecord};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, RecallReport};
use crate::meta_loop::{fit_train_mixture, train_with_observer, TrainConfig, METRICS_HEADER};
use crate::model::{checkpoint, Network};
use crate::purifier::{posteriors, select_clean, selection_stats, PurifyReport, ReportRow, SelectionStats};

pub const DATASET_FILE: &str = "dataset.mscd";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";
pub const PURIFY_REPORT_FILE: &str = "purify_report.tsv";
pub const THREADS_ENV: &str = "MSCN_THREADS";

const NOISE_SEED_OFFSET: u64 = 1;
const PURIFY_REPORT_STREAM: u64 = 0x5052;

#[derive(Debug, Parser)]
#[command(name = "mscn", version, about = "Noise-robust cross-modal retrieval training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, optionally with injected noise.
    GenData(CommonArgs),
    /// Train two networks; writes metrics and checkpoints.
    Train(CommonArgs),
    /// Recall report for one or more checkpoints (scores are averaged).
    Eval(CommonArgs),
    /// Per-pair mixture posteriors for the training split.
    PurifyReport(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    #[default]
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Input dataset for train/eval/purify-report; defaults to the one
    /// `gen-data` writes into `out_dir`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_generation")]
    pub generation: GenerationSpec,
    #[serde(default)]
    pub noise_ratio: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval_split: EvalSplit,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_generation() -> GenerationSpec {
    GenerationSpec::benchmark(0)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            dataset: None,
            generation: default_generation(),
            noise_ratio: 0.0,
            train: TrainConfig::default(),
            eval_split: EvalSplit::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Seed and output overrides from the command line.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        self
    }

    /// Structural checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.generation.seed != 0 || self.train.seed != 0 {
            return fail("set the top-level `seed`, not generation.seed or train.seed".into());
        }
        self.generation
            .validate()
            .map_err(|e| Error::Config(format!("generation: {e}")))?;
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return fail(format!("noise_ratio must lie in [0, 1], got {}", self.noise_ratio));
        }
        self.train.validate()?;
        if self.out_dir.as_os_str().is_empty() {
            return fail("out_dir must not be empty".into());
        }
        Ok(())
    }

    pub fn generation_spec(&self) -> GenerationSpec {
        GenerationSpec {
            seed: self.seed,
            ..self.generation.clone()
        }
    }

    pub fn noise_seed(&self) -> u64 {
        self.seed.wrapping_add(NOISE_SEED_OFFSET)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join(DATASET_FILE))
    }
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Exit code 1.
    Config(String),
    /// Exit code 2.
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

fn config_err(e: Error) -> Failure {
    match e {
        Error::Config(m) => Failure::Config(m),
        other => Failure::Config(other.to_string()),
    }
}

fn runtime(e: impl Into<Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    configure_threads()?;
    let (args, command) = match &cli.command {
        Command::GenData(a) => (a, "gen-data"),
        Command::Train(a) => (a, "train"),
        Command::Eval(a) => (a, "eval"),
        Command::PurifyReport(a) => (a, "purify-report"),
    };
    let config = RunConfig::load(&args.config)
        .and_then(|c| {
            let c = c.with_overrides(args.seed, args.out.clone());
            c.validate()?;
            Ok(c)
        })
        .map_err(config_err)?;
    match &cli.command {
        Command::GenData(a) => {
            no_checkpoints(a, command)?;
            prepare_out_dir(&config.out_dir)?;
            cmd_gen_data(&config).map_err(runtime)?;
        }
        Command::Train(a) => {
            no_checkpoints(a, command)?;
            require_input(&config.dataset_path())?;
            prepare_out_dir(&config.out_dir)?;
            cmd_train(&config).map_err(runtime)?;
        }
        Command::Eval(a) => {
            let ckpts = checkpoints_or_best(&config, &a.checkpoints, 2)?;
            require_input(&config.dataset_path())?;
            prepare_out_dir(&config.out_dir)?;
            let report = cmd_eval(&config, &ckpts).map_err(runtime)?;
            print!("{}", report.render_text());
        }
        Command::PurifyReport(a) => {
            let ckpts = checkpoints_or_best(&config, &a.checkpoints, 1)?;
            if ckpts.len() != 1 {
                return Err(Failure::Config(format!(
                    "purify-report takes exactly one --checkpoint, got {}",
                    ckpts.len()
                )));
            }
            require_input(&config.dataset_path())?;
            prepare_out_dir(&config.out_dir)?;
            let (report, stats) = cmd_purify_report(&config, &ckpts[0]).map_err(runtime)?;
            println!(
                "admitted {} of {} pairs; precision {:.4} recall {:.4} f1 {:.4}",
                report.admitted(),
                report.rows.len(),
                stats.precision,
                stats.recall,
                stats.f1
            );
        }
    }
    Ok(())
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // A second call in the same process (tests) keeps the first pool.
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        warn!("worker pool already initialised; {THREADS_ENV} ignored");
    }
    Ok(())
}

fn no_checkpoints(args: &CommonArgs, command: &str) -> std::result::Result<(), Failure> {
    if args.checkpoints.is_empty() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{command} does not take --checkpoint")))
    }
}

fn require_input(path: &Path) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("input file {} does not exist", path.display())))
    }
}

/// Explicit checkpoints, or the first `n` best checkpoints of a previous
/// `train` in the output directory.
fn checkpoints_or_best(
    config: &RunConfig,
    given: &[PathBuf],
    n: usize,
) -> std::result::Result<Vec<PathBuf>, Failure> {
    let paths: Vec<PathBuf> = if given.is_empty() {
        (1..=n).map(|k| config.out_dir.join(best_name(k))).collect()
    } else {
        given.to_vec()
    };
    for p in &paths {
        require_input(p)?;
    }
    Ok(paths)
}

fn prepare_out_dir(dir: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn best_name(k: usize) -> String {
    format!("best_net{k}.ckpt")
}

pub fn final_name(k: usize) -> String {
    format!("final_net{k}.ckpt")
}

/// Generates the dataset described by `config` and writes it with its manifest.
pub fn cmd_gen_data(config: &RunConfig) -> Result<DatasetBundle> {
    let clean = datagen::generate_synthetic(&config.generation_spec())?;
    let bundle = datagen::inject_noise(&clean, config.noise_ratio, config.noise_seed())?;
    format::write_dataset(&bundle, &config.out_dir.join(DATASET_FILE))?;
    let manifest = serde_json::to_string_pretty(&bundle.manifest)?;
    fs::write(config.out_dir.join(MANIFEST_FILE), manifest + "\n")?;
    let noisy = bundle.train.iter().filter(|r| !r.clean).count();
    println!(
        "train {} (noisy {noisy}), meta {}, validation {}, test {}; d_img {}, d_txt {}",
        bundle.train.len(),
        bundle.meta.len(),
        bundle.validation.len(),
        bundle.test.len(),
        bundle.d_img(),
        bundle.d_txt()
    );
    Ok(bundle)
}

/// Trains on the configured dataset, streaming metrics and best checkpoints.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let bundle = format::read_dataset(&config.dataset_path())?;
    let train_config = config.train_config();
    let out = &config.out_dir;
    let mut log = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    writeln!(log, "{METRICS_HEADER}")?;
    let outcome = train_with_observer(&bundle, &train_config, |m, nets, improved| {
        writeln!(log, "{}", m.render())?;
        log.flush()?;
        if improved {
            for (k, net) in nets.iter().enumerate() {
                checkpoint::save(net, &out.join(best_name(k + 1)))?;
            }
        }
        Ok(())
    })?;
    for (k, net) in outcome.state.networks().iter().enumerate() {
        checkpoint::save(net, &out.join(final_name(k + 1)))?;
    }
    match &outcome.best {
        Some(b) => println!("best epoch {} validation rsum {:.1}", b.epoch, b.validation.sum()),
        None => warn!("no validation split; only final checkpoints written"),
    }
    Ok(())
}

fn check_dims(net: &Network, bundle: &DatasetBundle) -> Result<()> {
    net.validate()?;
    for (what, expected, got) in [
        ("checkpoint image width", bundle.d_img(), net.main.d_img()),
        ("checkpoint text width", bundle.d_txt(), net.main.d_txt()),
    ] {
        if expected != got {
            return Err(Error::Dimension { what, expected, got });
        }
    }
    Ok(())
}

fn eval_records<'a>(config: &RunConfig, bundle: &'a DatasetBundle) -> &'a [PairRecord] {
    match config.eval_split {
        EvalSplit::Test => &bundle.test,
        EvalSplit::Validation => &bundle.validation,
    }
}

/// Recall report on the configured split, averaging scores over `checkpoints`.
pub fn cmd_eval(config: &RunConfig, checkpoints: &[PathBuf]) -> Result<RecallReport> {
    let bundle = format::read_dataset(&config.dataset_path())?;
    let nets = checkpoints
        .iter()
        .map(|p| {
            let net = checkpoint::load(p)?;
            check_dims(&net, &bundle)?;
            Ok(net)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Network> = nets.iter().collect();
    let report = evaluate(&refs, eval_records(config, &bundle))?;
    fs::write(config.out_dir.join(REPORT_TEXT_FILE), report.render_text())?;
    fs::write(config.out_dir.join(REPORT_KV_FILE), report.render_kv())?;
    info!("rsum {:.1}", report.sum());
    Ok(report)
}

/// Fits the mixture to one checkpoint's training-pair scores and writes the
/// per-pair report.
pub fn cmd_purify_report(config: &RunConfig, ckpt: &Path) -> Result<(PurifyReport, SelectionStats)> {
    let bundle = format::read_dataset(&config.dataset_path())?;
    let net = checkpoint::load(ckpt)?;
    check_dims(&net, &bundle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(PURIFY_REPORT_STREAM);
    let tc = &config.train;
    let (scores, mixture) = fit_train_mixture(&net, &bundle, tc.em_stop, tc.em_max_iters, &mut rng)?;
    let post = posteriors(&mixture, &scores)?;
    let admitted = select_clean(&post);
    let flags: Vec<bool> = bundle.train.iter().map(|r| r.clean).collect();
    let stats = selection_stats(&admitted, &flags);
    let mut is_admitted = vec![false; scores.len()];
    for &i in &admitted {
        is_admitted[i] = true;
    }
    let rows = (0..scores.len())
        .map(|i| ReportRow {
            index: i,
            score: scores[i],
            posterior: post[i],
            admitted: is_admitted[i],
            clean: flags[i],
        })
        .collect();
    let report = PurifyReport::new(&mixture, rows);
    fs::write(config.out_dir.join(PURIFY_REPORT_FILE), report.render())?;
    Ok((report, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in [
            r#"{"sed": 1}"#,
            r#"{"train": {"gama": 0.2}}"#,
            r#"{"generation": {"n_clusters": 2, "pairs_per_cluster": 4, "d_img": 2, "d_txt": 2, "within_cluster_std": 0.1, "noise": 1}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn nested_seeds_are_rejected() {
        let c = RunConfig::from_json(r#"{"train": {"seed": 4}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for c in [
            RunConfig { noise_ratio: 1.5, ..Default::default() },
            RunConfig {
                train: TrainConfig { lr: -1.0, ..Default::default() },
                ..Default::default()
            },
            RunConfig {
                generation: GenerationSpec { n_clusters: 1, ..GenerationSpec::benchmark(0) },
                ..Default::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let c = RunConfig::default().with_overrides(Some(9), Some("x".into()));
        assert_eq!(c.generation_spec().seed, 9);
        assert_eq!(c.train_config().seed, 9);
        assert_eq!(c.noise_seed(), 10);
        assert_eq!(c.dataset_path(), Path::new("x").join(DATASET_FILE));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Config(String::new()).exit_code(), 1);
        assert_eq!(Failure::Runtime(Error::EmptyBatch).exit_code(), 2);
    }
}
