//! Command-line front end. Every command validates its inputs before any
//! compute, writes into its own run directory, holds an advisory lock there
//! and leaves a `FAILED` sentinel behind when it aborts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::continual::{Regime, SequenceRunner};
use crate::data::{make_modality, split, write_preview, ModalitySpec, ToyDataset};
use crate::encoder::MimModel;
use crate::error::{Error, Result};
use crate::evalkit::{heldout_loss, storage_report, RetentionMatrix, StorageEntry};
use crate::inversion::{invert_task, write_trace_csv};
use crate::stats::{capture_stats, StatsArchive};
use crate::training::pretrain;
use crate::util::{derive_seed, write_file};

pub const THREADS_ENV: &str = "INVCOSS_THREADS";
pub const LOCK_FILE: &str = ".lock";
pub const FAILED_FILE: &str = "FAILED";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "invcoss", version, about = "Inversion-driven continual self-supervised learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one task's encoder and capture its feature statistics.
    Pretrain(PretrainArgs),
    /// Synthesize a dataset from a checkpoint and its statistics.
    Invert(InvertArgs),
    /// Run a task sequence under a regime and report retention and storage.
    Continual(ContinualArgs),
    /// Held-out MIM losses of checkpoints on held-out sets.
    Eval(EvalArgs),
    /// Statistics archive bytes against raw replay buffer bytes.
    StorageReport(StorageArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Img,
    Rep,
    Cache,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Index of the configured task to train.
    #[arg(long, default_value_t = 0)]
    pub task: usize,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Overrides the configured sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Overrides the configured preview cap.
    #[arg(long)]
    pub previews: Option<usize>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Args)]
pub struct ContinualArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Overrides the buffer ratio.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// One row per checkpoint.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// One column per held-out dataset.
    #[arg(long)]
    pub heldout: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f32,
    #[arg(long, default_value_t = 7)]
    pub mask_seed: u64,
}

#[derive(Debug, Args)]
pub struct StorageArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Statistics archives, paired in order with `--raw`.
    #[arg(long)]
    pub stats: Vec<PathBuf>,
    /// Raw training datasets.
    #[arg(long)]
    pub raw: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub ratio: f64,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Self as ValueEnum>::from_str(s, false)
    }
}

impl clap::builder::ValueParserFactory for Regime {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Regime>().map_err(|e| e.to_string()))
    }
}

/// Worker cap from the environment; only the single-threaded reference mode
/// exists, so any positive value runs it.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_ablations(cfg: &mut RunConfig, ablate: &[Ablation]) {
    for a in ablate {
        match a {
            Ablation::Img => cfg.inversion.use_img = false,
            Ablation::Rep => cfg.inversion.use_rep = false,
            Ablation::Cache => cfg.inversion.generator.memory_cache = false,
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Advisory lock on a run directory, released on drop.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn open(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let lock = path.join(LOCK_FILE);
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Invalid(format!(
                    "run directory {} is locked by another command ({})",
                    path.display(),
                    lock.display()
                )),
                _ => Error::io(lock.display().to_string(), e),
            })?;
        let failed = path.join(FAILED_FILE);
        if failed.exists() {
            std::fs::remove_file(&failed).map_err(|e| Error::io(failed.display().to_string(), e))?;
        }
        Ok(Self { path: path.to_path_buf() })
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn finish<T>(self, result: Result<T>) -> Result<T> {
        if let Err(e) = &result {
            let _ = std::fs::write(self.join(FAILED_FILE), format!("{e}\n"));
        }
        result
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join(LOCK_FILE));
    }
}

fn echo_config(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO), cfg.to_toml()?.as_bytes())
}

pub fn run(cli: Cli) -> Result<()> {
    thread_cap()?;
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Continual(a) => cmd_continual(a),
        Command::Eval(a) => cmd_eval(a),
        Command::StorageReport(a) => cmd_storage_report(a),
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = load_config(a.common.config.as_deref(), a.common.seed)?;
    let task = cfg.tasks.get(a.task).cloned().ok_or_else(|| {
        Error::Config(format!("task index {} out of range ({} tasks)", a.task, cfg.tasks.len()))
    })?;
    let dir = RunDir::open(&a.common.out)?;
    let result = (|| {
        echo_config(&dir, &cfg)?;
        let spec = ModalitySpec {
            seed: derive_seed(cfg.seed, &format!("task.data.{}", task.name()), task.modality.seed),
            ..task.modality.clone()
        };
        let ds = make_modality(&spec, task.size)?;
        let sp = split(ds.len(), cfg.stage.train_fraction, derive_seed(spec.seed, "split", 0))?;
        let (train, heldout) = (ds.subset(&sp.train)?, ds.subset(&sp.heldout)?);
        train.write(&dir.join("train.ivcs"))?;
        heldout.write(&dir.join("heldout.ivcs"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "encoder.init", 0));
        let model = MimModel::new(cfg.encoder.clone(), &mut rng)?;
        let (model, trace) = pretrain(model, &train.images, &cfg.stage.train, derive_seed(cfg.seed, "stage.train", 0))?;
        model.write(&dir.join("checkpoint.ivcs"))?;
        capture_stats(&model, &train.images, cfg.stage.stats_batch, &task.name())?.write(&dir.join("stats.ivcs"))?;
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in trace.epoch_loss.iter().enumerate() {
            csv.push_str(&format!("{e},{l:e}\n"));
        }
        write_file(&dir.join("loss.csv"), csv.as_bytes())
    })();
    dir.finish(result)
}

fn cmd_invert(a: InvertArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref(), a.common.seed)?;
    apply_ablations(&mut cfg, &a.ablate);
    if let Some(n) = a.samples {
        cfg.inversion.samples = n;
    }
    if let Some(p) = a.previews {
        cfg.preview_cap = p;
    }
    cfg.validate()?;
    require(&a.checkpoint)?;
    require(&a.stats)?;
    let model = MimModel::<f32>::read(&a.checkpoint)?;
    let archive = StatsArchive::read(&a.stats)?;
    archive.check_model(&model)?;
    let dir = RunDir::open(&a.common.out)?;
    let result = (|| {
        echo_config(&dir, &cfg)?;
        let syn = invert_task(&model, &archive, &cfg.inversion, derive_seed(cfg.seed, "invert", 0))?;
        let ds = ToyDataset {
            kind: archive_kind(&cfg, &archive.task),
            images: syn.images.clone(),
            labels: vec![0; syn.images.shape()[0]],
        };
        ds.write(&dir.join("synthetic.ivcs"))?;
        write_trace_csv(&dir.join("trace.csv"), &syn.trace)?;
        let c = model.config();
        let per = c.channels * c.image_size * c.image_size;
        let shown = cfg.preview_cap.min(syn.images.shape()[0]);
        for i in 0..shown {
            let ext = if c.channels == 3 { "ppm" } else { "pgm" };
            let img = &syn.images.data()[i * per..(i + 1) * per];
            write_preview(&dir.join("previews").join(format!("sample{i:03}.{ext}")), img, c.channels, c.image_size)?;
        }
        Ok(())
    })();
    dir.finish(result)
}

/// Modality recorded for a synthetic dataset: the configured task with the
/// archive's id, or the first task.
fn archive_kind(cfg: &RunConfig, task: &str) -> crate::data::ModalityKind {
    cfg.tasks
        .iter()
        .find(|t| t.name() == task)
        .or(cfg.tasks.first())
        .map(|t| t.modality.kind)
        .unwrap_or(crate::data::ModalityKind::Blobs)
}

fn cmd_continual(a: ContinualArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref(), a.common.seed)?;
    apply_ablations(&mut cfg, &a.ablate);
    if let Some(r) = a.regime {
        cfg.regime = r;
    }
    if let Some(r) = a.ratio {
        cfg.stage.buffer_ratio = r;
    }
    cfg.validate()?;
    let dir = RunDir::open(&a.common.out)?;
    let result = (|| {
        echo_config(&dir, &cfg)?;
        let runner = SequenceRunner::new(dir.path.clone(), cfg.sequence(), cfg.regime, cfg.seed)?;
        runner.run()?;
        if cfg.regime != Regime::Joint {
            let entries: Vec<StorageEntry> = (0..cfg.tasks.len())
                .map(|t| StorageEntry {
                    stats: runner.stats_path(t),
                    raw: runner.raw_path(t, "train"),
                    ratio: cfg.stage.buffer_ratio,
                })
                .collect();
            storage_report(&entries, &dir.join("storage"))?.write_csv(&dir.join("storage.csv"))?;
        }
        Ok(())
    })();
    dir.finish(result)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.checkpoint.is_empty() || a.heldout.is_empty() {
        return Err(Error::MissingArtifact(PathBuf::from(if a.checkpoint.is_empty() {
            "<checkpoint list is empty>"
        } else {
            "<held-out list is empty>"
        })));
    }
    for p in a.checkpoint.iter().chain(&a.heldout) {
        require(p)?;
    }
    let dir = RunDir::open(&a.out)?;
    let result = (|| {
        let tasks: Vec<String> = a
            .heldout
            .iter()
            .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let stages: Vec<String> = (0..a.checkpoint.len()).map(|i| format!("checkpoint{i}")).collect();
        let mut m = RetentionMatrix::new(stages, tasks);
        let sets = a
            .heldout
            .iter()
            .map(|p| Ok(ToyDataset::read(p)?.images))
            .collect::<Result<Vec<_>>>()?;
        for (s, p) in a.checkpoint.iter().enumerate() {
            let model = MimModel::<f32>::read(p)?;
            for (t, x) in sets.iter().enumerate() {
                m.set(s, t, heldout_loss(&model, x, a.mask_ratio, a.mask_seed, t as u64)?);
            }
        }
        m.write_csv(&dir.join("retention.csv"))
    })();
    dir.finish(result)
}

fn cmd_storage_report(a: StorageArgs) -> Result<()> {
    if a.stats.is_empty() {
        return Err(Error::MissingArtifact(PathBuf::from("<statistics list is empty>")));
    }
    if a.stats.len() != a.raw.len() {
        return Err(Error::Config(format!(
            "{} statistics archives but {} raw datasets",
            a.stats.len(),
            a.raw.len()
        )));
    }
    if !(0.0..=1.0).contains(&a.ratio) {
        return Err(Error::Config(format!("ratio {} outside [0, 1]", a.ratio)));
    }
    for p in a.stats.iter().chain(&a.raw) {
        require(p)?;
    }
    let dir = RunDir::open(&a.out)?;
    let result = (|| {
        let entries: Vec<StorageEntry> = a
            .stats
            .iter()
            .zip(&a.raw)
            .map(|(s, r)| StorageEntry {
                stats: s.clone(),
                raw: r.clone(),
                ratio: a.ratio,
            })
            .collect();
        storage_report(&entries, &dir.join("storage"))?.write_csv(&dir.join("storage.csv"))
    })();
    dir.finish(result)
}
