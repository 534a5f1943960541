//! Retention matrices, pool diversity, storage accounting, buffer-size
//! sweeps and a linear probe.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual::{synthetic_count, Regime, SequenceConfig, SequenceRunner};
use crate::data::ToyDataset;
use crate::encoder::{mim_loss, sample_masks, MimModel};
use crate::error::{Error, Result};
use crate::stats::StatsArchive;
use crate::util::{derive_seed, write_file};

/// Held-out MIM loss with masks drawn from a fixed seed, so every stage and
/// regime sees the same masks for a given task.
pub fn heldout_loss(model: &MimModel<f32>, x: &Tensor<f32>, ratio: f32, mask_seed: u64, task: u64) -> Result<f64> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Invalid("held-out set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(mask_seed, "eval.mask", task));
    let masks = sample_masks(model.config(), n, ratio, &mut rng)?;
    mim_loss(model, x, &masks)
}

/// Stage x task held-out losses; cells a stage has not seen stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionMatrix {
    pub stages: Vec<String>,
    pub tasks: Vec<String>,
    cells: Vec<Option<f64>>,
}

impl RetentionMatrix {
    pub fn new(stages: Vec<String>, tasks: Vec<String>) -> Self {
        let cells = vec![None; stages.len() * tasks.len()];
        Self { stages, tasks, cells }
    }

    pub fn set(&mut self, stage: usize, task: usize, loss: f64) {
        self.cells[stage * self.tasks.len() + task] = Some(loss);
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.cells[stage * self.tasks.len() + task]
    }

    /// Loss of `task` under the last stage.
    pub fn final_loss(&self, task: usize) -> Option<f64> {
        self.stages.len().checked_sub(1).and_then(|s| self.get(s, task))
    }

    /// Final loss minus the loss right after the task's own stage.
    pub fn forgetting(&self, task: usize) -> Option<f64> {
        Some(self.final_loss(task)? - self.get(task, task)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,task,loss\n");
        for (i, st) in self.stages.iter().enumerate() {
            for (j, t) in self.tasks.iter().enumerate() {
                if let Some(v) = self.get(i, j) {
                    let _ = writeln!(s, "{st},{t},{v:e}");
                }
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

/// Mean squared cosine similarity over unordered pairs of rows.
pub fn diversity(rows: &Tensor<f32>) -> Result<f64> {
    let s = rows.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Invalid(format!("diversity needs at least two rows, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    let mut unit = Vec::with_capacity(n * d);
    for (i, r) in rows.data().chunks(d).enumerate() {
        let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Invalid(format!("feature row {i} has zero or non-finite norm")));
        }
        unit.extend(r.iter().map(|&v| v as f64 / norm));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = (0..d).map(|k| unit[i * d + k] * unit[j * d + k]).sum();
            total += c * c;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StorageRow {
    pub task: String,
    pub ratio: f64,
    pub buffer_samples: usize,
    pub stats_bytes: u64,
    pub raw_buffer_bytes: u64,
}

impl StorageRow {
    /// Raw-buffer bytes per statistics byte.
    pub fn saving(&self) -> f64 {
        self.raw_buffer_bytes as f64 / self.stats_bytes as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StorageReport {
    pub rows: Vec<StorageRow>,
}

impl StorageReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,ratio,buffer_samples,stats_bytes,raw_buffer_bytes,saving\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4}",
                r.task,
                r.ratio,
                r.buffer_samples,
                r.stats_bytes,
                r.raw_buffer_bytes,
                r.saving()
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

/// Inputs of one storage-report row.
#[derive(Clone, Debug)]
pub struct StorageEntry {
    pub stats: PathBuf,
    /// Raw training split the replay buffer would be drawn from.
    pub raw: PathBuf,
    pub ratio: f64,
}

fn file_len(path: &Path) -> Result<u64> {
    std::fs::metadata(path).map(|m| m.len()).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path.display().to_string(), e),
    })
}

/// Measures the statistics archive against the raw buffer a data-replay
/// method would keep. The raw buffer (the first `round(ratio * N)` training
/// samples) is serialized into `out_dir` and its file size is reported.
pub fn storage_report(entries: &[StorageEntry], out_dir: &Path) -> Result<StorageReport> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        if !e.stats.exists() {
            return Err(Error::MissingArtifact(e.stats.clone()));
        }
        if !e.raw.exists() {
            return Err(Error::MissingArtifact(e.raw.clone()));
        }
        let archive = StatsArchive::read(&e.stats)?;
        let raw = ToyDataset::read(&e.raw)?;
        let k = synthetic_count(e.ratio, raw.len() as u64);
        let idx: Vec<usize> = (0..k).collect();
        let path = out_dir.join(format!("raw_buffer_{}.ivcs", archive.task));
        raw.subset(&idx)?.write(&path)?;
        rows.push(StorageRow {
            task: archive.task.clone(),
            ratio: e.ratio,
            buffer_samples: k,
            stats_bytes: file_len(&e.stats)?,
            raw_buffer_bytes: file_len(&path)?,
        });
    }
    Ok(StorageReport { rows })
}

/// Per-ratio outcome of a buffer-size sweep.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub ratio: f64,
    pub retention: RetentionMatrix,
}

/// Runs the invcoss sequence once per buffer ratio with shared seeds.
pub fn sample_size_sweep(dir: &Path, cfg: &SequenceConfig, ratios: &[f64], seed: u64) -> Result<Vec<SweepResult>> {
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("sweep ratio {r} outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut c = cfg.clone();
        c.stage.buffer_ratio = ratio;
        let runner = SequenceRunner::new(dir.join(format!("ratio_{ratio}")), c, Regime::Invcoss, seed)?;
        let report = runner.run()?;
        out.push(SweepResult {
            ratio,
            retention: report.retention,
        });
    }
    Ok(out)
}

pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut s = String::from("ratio,stage,task,loss\n");
    for r in results {
        let m = &r.retention;
        for (i, st) in m.stages.iter().enumerate() {
            for (j, t) in m.tasks.iter().enumerate() {
                if let Some(v) = m.get(i, j) {
                    let _ = writeln!(s, "{},{st},{t},{v:e}", r.ratio);
                }
            }
        }
    }
    s
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes, d + 1]`, bias last.
    weights: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    /// Full-batch gradient descent on the cross-entropy.
    pub fn fit(features: &Tensor<f32>, labels: &[usize], epochs: usize, lr: f64) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::Invalid(format!(
                "probe features {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let (n, d) = (s[0], s[1]);
        let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
        let x = features.to_f64_vec();
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for row in x.chunks(d) {
            for k in 0..d {
                mean[k] += row[k] / n as f64;
            }
        }
        for row in x.chunks(d) {
            for k in 0..d {
                scale[k] += (row[k] - mean[k]).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|v| *v = 1.0 / v.sqrt().max(1e-8));
        let mut probe = Self {
            mean,
            scale,
            weights: vec![0.0; classes * (d + 1)],
            classes,
        };
        let z: Vec<Vec<f64>> = x.chunks(d).map(|r| probe.standardize(r)).collect();
        let mut grad = vec![0.0; probe.weights.len()];
        for _ in 0..epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (zi, &y) in z.iter().zip(labels) {
                let p = probe.softmax(zi);
                for c in 0..classes {
                    let e = (p[c] - if c == y { 1.0 } else { 0.0 }) / n as f64;
                    let row = &mut grad[c * (d + 1)..(c + 1) * (d + 1)];
                    for k in 0..d {
                        row[k] += e * zi[k];
                    }
                    row[d] += e;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize<V: Copy + Into<f64>>(&self, row: &[V]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| (v.into() - m) * s)
            .collect()
    }

    fn softmax(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let w = &self.weights[c * (d + 1)..(c + 1) * (d + 1)];
                w[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[d]
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let p = self.softmax(&self.standardize(row));
        (0..self.classes)
            .max_by(|&a, &b| p[a].total_cmp(&p[b]))
            .unwrap_or(0)
    }

    pub fn accuracy(&self, features: &Tensor<f32>, labels: &[usize]) -> f64 {
        let d = features.shape()[1];
        let hits = features
            .data()
            .chunks(d)
            .zip(labels)
            .filter(|(r, &y)| self.predict(r) == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor<f32> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn diversity_closed_forms() {
        assert!((diversity(&t(&[&[1.0, 2.0], &[2.0, 4.0], &[0.5, 1.0]])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(diversity(&t(&[&[1.0, 0.0, 0.0], &[0.0, 3.0, 0.0], &[0.0, 0.0, 2.0]])).unwrap(), 0.0);
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((diversity(&t(&[&[1.0, 0.0], &[h, h]])).unwrap() - 0.5).abs() < 1e-7);
        assert!(diversity(&t(&[&[1.0, 0.0]])).is_err());
        assert!(diversity(&t(&[&[1.0, 0.0], &[0.0, 0.0]])).is_err());
    }

    #[test]
    fn retention_csv_skips_unseen_cells() {
        let mut m = RetentionMatrix::new(vec!["s0".into(), "s1".into()], vec!["a".into(), "b".into()]);
        m.set(0, 0, 0.5);
        m.set(1, 0, 0.75);
        m.set(1, 1, 0.25);
        assert_eq!(m.to_csv().lines().count(), 4);
        assert_eq!(m.forgetting(0), Some(0.25));
        assert_eq!(m.final_loss(1), Some(0.25));
        assert_eq!(m.get(0, 1), None);
    }

    #[test]
    fn probe_separates_shifted_clusters() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let off = if y == 0 { -1.0 } else { 1.0 };
            rows.extend([off + 0.1 * (i as f32).sin(), 0.3 * (i as f32).cos()]);
            labels.push(y);
        }
        let x = Tensor::new(vec![40, 2], rows).unwrap();
        let p = LinearProbe::fit(&x, &labels, 200, 0.5).unwrap();
        assert_eq!(p.accuracy(&x, &labels), 1.0);
    }
}
