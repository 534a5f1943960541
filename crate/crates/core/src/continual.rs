//! Task sequences: synthetic buffer construction from checkpoints and
//! statistics, continual stages with replay, and the reference regimes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::data::{make_modality, split, ModalitySpec, ToyDataset};
use crate::encoder::{EncoderConfig, MimModel};
use crate::error::{Error, Result};
use crate::evalkit::{heldout_loss, RetentionMatrix};
use crate::inversion::{invert_task, write_trace_csv, InversionConfig};
use crate::stats::{capture_stats, StatsArchive};
use crate::training::{train, Replay, TrainSchedule, TrainTrace};
use crate::util::{derive_seed, hash_f32, round_half_up, write_file};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Invcoss,
    Seqssl,
    Joint,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Self::Invcoss => "invcoss",
            Self::Seqssl => "seqssl",
            Self::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invcoss" => Ok(Self::Invcoss),
            "seqssl" => Ok(Self::Seqssl),
            "joint" => Ok(Self::Joint),
            _ => Err(Error::Config(format!("unknown regime `{s}` (expected invcoss, seqssl or joint)"))),
        }
    }
}

/// One task of a sequence: a modality and its dataset size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Task identifier; defaults to the modality name.
    #[serde(default)]
    pub id: String,
    /// Total samples before the train/held-out split.
    pub size: usize,
    #[serde(flatten)]
    pub modality: ModalitySpec,
}

impl TaskSpec {
    pub fn new(modality: ModalitySpec, size: usize) -> Self {
        Self {
            id: String::new(),
            size,
            modality,
        }
    }

    pub fn name(&self) -> String {
        if self.id.is_empty() {
            self.modality.kind.name().to_string()
        } else {
            self.id.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub train: TrainSchedule,
    /// Synthetic samples per previous task as a fraction of its training set.
    pub buffer_ratio: f64,
    pub lambda_replay: f64,
    pub lambda_kd: f64,
    /// Fraction of each task kept for training; the rest is held out.
    pub train_fraction: f64,
    pub stats_batch: usize,
    /// Seed of the fixed evaluation masks.
    pub eval_mask_seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            train: TrainSchedule::default(),
            buffer_ratio: 0.05,
            lambda_replay: 1.0,
            lambda_kd: 0.1,
            train_fraction: 0.8,
            stats_batch: 64,
            eval_mask_seed: 7,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.buffer_ratio) {
            return Err(Error::Config(format!("buffer_ratio {} outside [0, 1]", self.buffer_ratio)));
        }
        if !(self.lambda_replay >= 0.0) || !(self.lambda_kd >= 0.0) {
            return Err(Error::Config("lambda_replay and lambda_kd must be non-negative".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.stats_batch == 0 {
            return Err(Error::Config("stats_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a task sequence needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConfig {
    pub encoder: EncoderConfig,
    pub stage: StageConfig,
    pub inversion: InversionConfig,
    pub tasks: Vec<TaskSpec>,
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.stage.validate()?;
        self.inversion.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        for t in &self.tasks {
            t.modality.validate()?;
            if t.modality.resolution != self.encoder.image_size || t.modality.channels != self.encoder.channels {
                return Err(Error::Config(format!(
                    "task {}: modality {}x{}x{} does not match encoder input",
                    t.name(),
                    t.modality.channels,
                    t.modality.resolution,
                    t.modality.resolution
                )));
            }
            if t.size < 2 {
                return Err(Error::Config(format!("task {}: size must be at least 2", t.name())));
            }
        }
        let mut names: Vec<String> = self.tasks.iter().map(TaskSpec::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.tasks.len() {
            return Err(Error::Config("task ids must be unique".into()));
        }
        Ok(())
    }
}

/// The replay pool `B_T`: synthetic images tagged by source task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBuffer {
    images: Vec<f32>,
    tags: Vec<usize>,
    task_names: Vec<String>,
    sample_shape: [usize; 3],
}

/// One manifest line per source task.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub task: String,
    pub count: usize,
    pub hash: u64,
}

impl SyntheticBuffer {
    pub fn new(sample_shape: [usize; 3]) -> Self {
        Self {
            images: Vec::new(),
            tags: Vec::new(),
            task_names: Vec::new(),
            sample_shape,
        }
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Appends the synthetic set of one task.
    pub fn push(&mut self, task: &str, images: &Tensor<f32>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.sample_shape {
            return Err(Error::Invalid(format!(
                "buffer samples {:?} do not match {:?}",
                s, self.sample_shape
            )));
        }
        let idx = match self.task_names.iter().position(|n| n == task) {
            Some(i) => i,
            None => {
                self.task_names.push(task.to_string());
                self.task_names.len() - 1
            }
        };
        self.images.extend_from_slice(images.data());
        self.tags.extend(std::iter::repeat_n(idx, s[0]));
        Ok(())
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> + '_ {
        self.tags.iter().map(|&i| self.task_names[i].as_str())
    }

    pub fn count(&self, task: &str) -> usize {
        self.tags().filter(|&t| t == task).count()
    }

    pub fn images(&self) -> Result<Tensor<f32>> {
        let [c, h, w] = self.sample_shape;
        Ok(Tensor::new(vec![self.len(), c, h, w], self.images.clone())?)
    }

    pub fn task_images(&self, task: &str) -> Result<Tensor<f32>> {
        let n = self.sample_len();
        let mut data = Vec::new();
        for (i, t) in self.tags().enumerate() {
            if t == task {
                data.extend_from_slice(&self.images[i * n..(i + 1) * n]);
            }
        }
        let [c, h, w] = self.sample_shape;
        Ok(Tensor::new(vec![data.len() / n.max(1), c, h, w], data)?)
    }

    pub fn hash(&self) -> u64 {
        hash_f32(&self.images)
    }

    pub fn manifest(&self) -> Result<Vec<ManifestRow>> {
        self.task_names
            .iter()
            .map(|t| {
                let imgs = self.task_images(t)?;
                Ok(ManifestRow {
                    task: t.clone(),
                    count: imgs.shape()[0],
                    hash: hash_f32(imgs.data()),
                })
            })
            .collect()
    }

    pub fn manifest_csv(&self) -> Result<String> {
        let mut s = String::from("task,count,hash\n");
        for r in self.manifest()? {
            let _ = writeln!(s, "{},{},{:016x}", r.task, r.count, r.hash);
        }
        Ok(s)
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.insert_text("meta.tasks", &self.task_names.join("\n"))?;
        b.insert_tensor("images", self.images()?)?;
        let tags: Vec<f32> = self.tags.iter().map(|&t| t as f32).collect();
        b.insert_tensor("tags", Tensor::new(vec![tags.len()], tags)?)?;
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let names = b.text("meta.tasks")?;
        let task_names: Vec<String> = if names.is_empty() {
            Vec::new()
        } else {
            names.split('\n').map(str::to_string).collect()
        };
        let images = b.tensor("images")?;
        let tags: Vec<usize> = b.tensor("tags")?.data().iter().map(|&t| t as usize).collect();
        let s = images.shape();
        if s.len() != 4 || s[0] != tags.len() || tags.iter().any(|&t| t >= task_names.len()) {
            return Err(Error::Format("buffer tags do not match images".into()));
        }
        Ok(Self {
            images: images.data().to_vec(),
            tags,
            task_names,
            sample_shape: [s[1], s[2], s[3]],
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::read(path)?)
    }
}

/// Synthetic sample count for a task with `n` training samples.
pub fn synthetic_count(ratio: f64, n: u64) -> usize {
    round_half_up(ratio, n as usize)
}

/// Replay batch size for a stage: the buffer's share of the current batch,
/// at least one when the buffer is nonempty.
pub fn replay_batch(batch: usize, buffer: usize, current: usize) -> usize {
    if buffer == 0 {
        return 0;
    }
    round_half_up(buffer as f64 / current.max(1) as f64, batch).max(1)
}

/// Builds `B_T` by inverting the frozen model once per archive. Only the
/// checkpoint and the archives are consulted; sample counts come from the
/// archived sample totals.
pub fn build_buffer(
    frozen: &MimModel<f32>,
    archives: &[StatsArchive],
    ratio: f64,
    inversion: &InversionConfig,
    seed: u64,
) -> Result<(SyntheticBuffer, Vec<crate::inversion::Synthesis>)> {
    let c = frozen.config();
    let mut buffer = SyntheticBuffer::new([c.channels, c.image_size, c.image_size]);
    let mut runs = Vec::new();
    for (t, archive) in archives.iter().enumerate() {
        let n = synthetic_count(ratio, archive.count());
        if n == 0 {
            continue;
        }
        let cfg = InversionConfig {
            samples: n,
            ..inversion.clone()
        };
        let syn = invert_task(frozen, archive, &cfg, derive_seed(seed, "buffer.task", t as u64))?;
        buffer.push(&archive.task, &syn.images)?;
        runs.push(syn);
    }
    Ok((buffer, runs))
}

/// Stage `T`: initializes from `prev` and trains on `data` plus replay.
pub fn continual_stage(
    prev: &MimModel<f32>,
    data: &Tensor<f32>,
    buffer: &SyntheticBuffer,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(MimModel<f32>, TrainTrace)> {
    let mut model = prev.clone();
    let syn = buffer.images()?;
    let replay = (!buffer.is_empty()).then(|| Replay {
        images: &syn,
        teacher: prev,
        lambda_replay: cfg.lambda_replay,
        lambda_kd: cfg.lambda_kd,
        batch_size: replay_batch(cfg.train.batch_size, buffer.len(), data.shape()[0]),
    });
    let trace = train(&mut model, data, &cfg.train, seed, replay)?;
    Ok((model, trace))
}

fn loss_csv(trace: &TrainTrace) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in trace.epoch_loss.iter().enumerate() {
        let _ = writeln!(s, "{e},{l:e}");
    }
    s
}

fn step_csv(trace: &TrainTrace) -> String {
    let mut s = String::from("step,loss,replay,kd\n");
    for (i, l) in trace.step_loss.iter().enumerate() {
        let r = trace.step_replay.get(i).map(|v| format!("{v:e}")).unwrap_or_default();
        let k = trace.step_kd.get(i).map(|v| format!("{v:e}")).unwrap_or_default();
        let _ = writeln!(s, "{i},{l:e},{r},{k}");
    }
    s
}

/// Output of a finished sequence.
#[derive(Clone, Debug)]
pub struct SequenceReport {
    pub regime: Regime,
    pub retention: RetentionMatrix,
    /// Synthetic buffer hash per stage (`None` without a buffer).
    pub buffer_hashes: Vec<Option<u64>>,
    pub checkpoint_hashes: Vec<u64>,
}

/// File-backed sequence runner. Raw task data lives under `raw/`; each stage
/// reads its own raw split plus earlier checkpoints and statistics archives,
/// never earlier raw data.
pub struct SequenceRunner {
    pub dir: PathBuf,
    pub cfg: SequenceConfig,
    pub regime: Regime,
    pub seed: u64,
}

impl SequenceRunner {
    pub fn new(dir: impl Into<PathBuf>, cfg: SequenceConfig, regime: Regime, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            dir: dir.into(),
            cfg,
            regime,
            seed,
        })
    }

    pub fn raw_path(&self, task: usize, part: &str) -> PathBuf {
        self.dir.join("raw").join(format!("task{task}.{part}.ivcs"))
    }

    pub fn stage_dir(&self, stage: usize) -> PathBuf {
        self.dir.join(format!("stage{stage}"))
    }

    pub fn checkpoint_path(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("checkpoint.ivcs")
    }

    pub fn stats_path(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("stats.ivcs")
    }

    pub fn buffer_path(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("buffer.ivcs")
    }

    fn joint_dir(&self) -> PathBuf {
        self.dir.join("joint")
    }

    /// Data seed of a task; independent of its position in the sequence.
    fn data_seed(&self, task: &TaskSpec) -> u64 {
        derive_seed(self.seed, &format!("task.data.{}", task.name()), task.modality.seed)
    }

    /// Generates every task's dataset and writes the train/held-out splits.
    pub fn prepare_data(&self) -> Result<()> {
        for (t, task) in self.cfg.tasks.iter().enumerate() {
            let spec = ModalitySpec {
                seed: self.data_seed(task),
                ..task.modality.clone()
            };
            let ds = make_modality(&spec, task.size)?;
            let sp = split(ds.len(), self.cfg.stage.train_fraction, derive_seed(spec.seed, "split", 0))?;
            ds.subset(&sp.train)?.write(&self.raw_path(t, "train"))?;
            ds.subset(&sp.heldout)?.write(&self.raw_path(t, "heldout"))?;
        }
        Ok(())
    }

    fn init_model(&self) -> Result<MimModel<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "encoder.init", 0));
        MimModel::new(self.cfg.encoder.clone(), &mut rng)
    }

    fn stage_seed(&self, stage: usize) -> u64 {
        derive_seed(self.seed, "stage.train", stage as u64)
    }

    /// Runs one sequential stage (`invcoss` or `seqssl`).
    pub fn run_stage(&self, stage: usize) -> Result<()> {
        if self.regime == Regime::Joint {
            return Err(Error::Invalid("the joint regime has no sequential stages".into()));
        }
        let task = &self.cfg.tasks[stage];
        let data = ToyDataset::read(&self.raw_path(stage, "train"))?;
        let dir = self.stage_dir(stage);
        let (model, trace) = if stage == 0 {
            crate::training::pretrain(self.init_model()?, &data.images, &self.cfg.stage.train, self.stage_seed(0))?
        } else {
            let prev = MimModel::<f32>::read(&self.checkpoint_path(stage - 1))?;
            let c = &self.cfg.encoder;
            let mut buffer = SyntheticBuffer::new([c.channels, c.image_size, c.image_size]);
            if self.regime == Regime::Invcoss {
                let archives = (0..stage)
                    .map(|s| StatsArchive::read(&self.stats_path(s)))
                    .collect::<Result<Vec<_>>>()?;
                let (b, runs) = build_buffer(
                    &prev,
                    &archives,
                    self.cfg.stage.buffer_ratio,
                    &self.cfg.inversion,
                    derive_seed(self.seed, "stage.buffer", stage as u64),
                )?;
                buffer = b;
                for (syn, archive) in runs.iter().zip(&archives) {
                    write_trace_csv(&dir.join(format!("inversion_{}.csv", archive.task)), &syn.trace)?;
                }
                buffer.write(&self.buffer_path(stage))?;
                write_file(&dir.join("buffer_manifest.csv"), buffer.manifest_csv()?.as_bytes())?;
            }
            continual_stage(&prev, &data.images, &buffer, &self.cfg.stage, self.stage_seed(stage))?
        };
        model.write(&self.checkpoint_path(stage))?;
        let archive = capture_stats(&model, &data.images, self.cfg.stage.stats_batch, &task.name())?;
        archive.write(&self.stats_path(stage))?;
        write_file(&dir.join("loss.csv"), loss_csv(&trace).as_bytes())?;
        write_file(&dir.join("steps.csv"), step_csv(&trace).as_bytes())?;
        Ok(())
    }

    /// Single training run over the concatenation of every task.
    pub fn run_joint(&self) -> Result<()> {
        let mut parts = Vec::new();
        for t in 0..self.cfg.tasks.len() {
            parts.push(ToyDataset::read(&self.raw_path(t, "train"))?.images);
        }
        let all = Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())?;
        let (model, trace) =
            crate::training::pretrain(self.init_model()?, &all, &self.cfg.stage.train, self.stage_seed(0))?;
        let dir = self.joint_dir();
        model.write(&dir.join("checkpoint.ivcs"))?;
        write_file(&dir.join("loss.csv"), loss_csv(&trace).as_bytes())?;
        write_file(&dir.join("steps.csv"), step_csv(&trace).as_bytes())?;
        Ok(())
    }

    /// Checkpoints that define the retention rows, with their labels.
    pub fn checkpoints(&self) -> Vec<(String, PathBuf)> {
        match self.regime {
            Regime::Joint => vec![("joint".into(), self.joint_dir().join("checkpoint.ivcs"))],
            _ => (0..self.cfg.tasks.len())
                .map(|s| (format!("stage{s}"), self.checkpoint_path(s)))
                .collect(),
        }
    }

    /// Held-out MIM loss of every completed stage on every task it has seen.
    pub fn evaluate(&self) -> Result<RetentionMatrix> {
        let tasks: Vec<String> = self.cfg.tasks.iter().map(TaskSpec::name).collect();
        let mut heldout = Vec::new();
        for t in 0..tasks.len() {
            heldout.push(ToyDataset::read(&self.raw_path(t, "heldout"))?.images);
        }
        let rows = self.checkpoints();
        let mut m = RetentionMatrix::new(rows.iter().map(|r| r.0.clone()).collect(), tasks);
        for (s, (_, path)) in rows.iter().enumerate() {
            let model = MimModel::<f32>::read(path)?;
            let seen = if self.regime == Regime::Joint { heldout.len() } else { s + 1 };
            for (t, x) in heldout.iter().enumerate().take(seen) {
                let loss = heldout_loss(&model, x, self.cfg.stage.train.mask_ratio, self.cfg.stage.eval_mask_seed, t as u64)?;
                m.set(s, t, loss);
            }
        }
        Ok(m)
    }

    /// Prepares data, runs every stage of the regime and evaluates.
    pub fn run(&self) -> Result<SequenceReport> {
        self.prepare_data()?;
        let mut buffer_hashes = Vec::new();
        let mut checkpoint_hashes = Vec::new();
        if self.regime == Regime::Joint {
            self.run_joint()?;
        } else {
            for s in 0..self.cfg.tasks.len() {
                self.run_stage(s)?;
                let bp = self.buffer_path(s);
                buffer_hashes.push(if bp.exists() { Some(file_hash(&bp)?) } else { None });
            }
        }
        for (_, p) in self.checkpoints() {
            checkpoint_hashes.push(file_hash(&p)?);
        }
        let retention = self.evaluate()?;
        retention.write_csv(&self.dir.join("retention.csv"))?;
        Ok(SequenceReport {
            regime: self.regime,
            retention,
            buffer_hashes,
            checkpoint_hashes,
        })
    }
}

/// FNV-1a of a file's bytes.
pub fn file_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path.display().to_string(), e),
    })?;
    Ok(crate::util::fnv1a(&bytes))
}
