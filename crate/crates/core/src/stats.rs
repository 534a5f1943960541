//! Per-block feature statistics: Welford capture, archive persistence, and
//! the statistics-matching loss.

use std::path::Path;

use diffcore::{Graph, Real, Tensor, Var};

use crate::bundle::Bundle;
use crate::encoder::{block_features, MimModel};
use crate::error::{Error, Result};

/// Running mean and population variance of `[L, d]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStatistics<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub count: u64,
}

impl<T: Real> LayerStatistics<T> {
    pub fn empty(shape: &[usize]) -> Self {
        Self {
            mean: Tensor::zeros(shape),
            var: Tensor::zeros(shape),
            count: 0,
        }
    }

    /// Folds a `[n, L, d]` batch into the state: the first batch sets the
    /// statistics, later batches use the pooled update with cross term.
    pub fn merge(&mut self, batch: &Tensor<T>) -> Result<()> {
        let shape = batch.shape();
        if shape.len() < 2 || shape[1..] != *self.mean.shape() {
            return Err(diffcore::Error::Shape {
                op: "welford_merge",
                lhs: self.mean.shape().to_vec(),
                rhs: shape.to_vec(),
            }
            .into());
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::Invalid("welford_merge: empty batch".into()));
        }
        let (bm, bv) = batch_moments(batch);
        if self.count == 0 {
            self.mean = bm;
            self.var = bv;
            self.count = n as u64;
            return Ok(());
        }
        let nn = T::lit(self.count as f64);
        let nb = T::lit(n as f64);
        let total = nn + nb;
        let cross = nn * nb / (total * total);
        for (((m, v), &mb), &vb) in self
            .mean
            .data_mut()
            .iter_mut()
            .zip(self.var.data_mut().iter_mut())
            .zip(bm.data())
            .zip(bv.data())
        {
            let dm = *m - mb;
            *v = (nn * *v + nb * vb) / total + cross * dm * dm;
            *m = (nn * *m + nb * mb) / total;
        }
        self.count += n as u64;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> LayerStatistics<U> {
        LayerStatistics {
            mean: self.mean.cast(),
            var: self.var.cast(),
            count: self.count,
        }
    }
}

/// Mean and population variance over axis 0 (two-pass within the batch).
fn batch_moments<T: Real>(batch: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let n = batch.shape()[0];
    let inner: usize = batch.shape()[1..].iter().product();
    let mut mean = vec![T::zero(); inner];
    for row in batch.data().chunks(inner) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m = *m + x;
        }
    }
    let nf = T::lit(n as f64);
    mean.iter_mut().for_each(|m| *m = *m / nf);
    let mut var = vec![T::zero(); inner];
    for row in batch.data().chunks(inner) {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v = *v + (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v = *v / nf);
    let shape = batch.shape()[1..].to_vec();
    (
        Tensor::new(shape.clone(), mean).expect("shape"),
        Tensor::new(shape, var).expect("shape"),
    )
}

/// Saved statistics of one finished task.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsArchive {
    pub blocks: Vec<LayerStatistics<f32>>,
    pub fingerprint: String,
    pub task: String,
}

/// Largest count an f32 record holds exactly.
const MAX_EXACT_COUNT: u64 = 1 << 24;

impl StatsArchive {
    pub fn count(&self) -> u64 {
        self.blocks.first().map_or(0, |b| b.count)
    }

    pub fn check_model<T: Real>(&self, model: &MimModel<T>) -> Result<()> {
        if self.fingerprint != model.fingerprint() {
            return Err(Error::Fingerprint {
                archive: self.fingerprint.clone(),
                model: model.fingerprint(),
            });
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let count = self.count();
        if count > MAX_EXACT_COUNT {
            return Err(Error::Invalid(format!("sample count {count} exceeds exact f32 range")));
        }
        let mut b = Bundle::new();
        b.insert_text("meta.fingerprint", &self.fingerprint)?;
        b.insert_text("meta.task", &self.task)?;
        for (i, s) in self.blocks.iter().enumerate() {
            b.insert_tensor(&format!("block{i}.mean"), s.mean.clone())?;
            b.insert_tensor(&format!("block{i}.var"), s.var.clone())?;
        }
        b.insert_tensor("count", Tensor::scalar(count as f32))?;
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let count = b.tensor("count")?;
        if count.numel() != 1 {
            return Err(Error::Format("`count` must hold one value".into()));
        }
        let count = count.item();
        if !(count >= 0.0) || count.fract() != 0.0 {
            return Err(Error::Format(format!("invalid sample count {count}")));
        }
        let mut blocks = Vec::new();
        while b.contains(&format!("block{}.mean", blocks.len())) {
            let i = blocks.len();
            let mean = b.tensor(&format!("block{i}.mean"))?.clone();
            let var = b.tensor(&format!("block{i}.var"))?.clone();
            if mean.shape() != var.shape() {
                return Err(Error::Format(format!("block{i} mean/var shapes differ")));
            }
            if var.data().iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Format(format!("block{i} has a negative or NaN variance")));
            }
            blocks.push(LayerStatistics {
                mean,
                var,
                count: count as u64,
            });
        }
        if blocks.is_empty() {
            return Err(Error::Format("stats archive holds no blocks".into()));
        }
        Ok(Self {
            blocks,
            fingerprint: b.text("meta.fingerprint")?,
            task: b.text("meta.task")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::read(path)?)
    }
}

/// One evaluation-mode pass over `data` in index order, merged per block.
pub fn capture_stats(
    model: &MimModel<f32>,
    data: &Tensor<f32>,
    batch_size: usize,
    task: &str,
) -> Result<StatsArchive> {
    let n = data.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Invalid("capture_stats: empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("capture_stats: batch size must be positive".into()));
    }
    let cfg = model.config();
    let shape = [cfg.tokens(), cfg.dim];
    let mut states = vec![LayerStatistics::<f64>::empty(&shape); cfg.depth];
    for start in (0..n).step_by(batch_size) {
        let chunk = data.slice_rows(start, batch_size.min(n - start))?;
        for (st, f) in states.iter_mut().zip(block_features(model, &chunk)?) {
            st.merge(&f.cast())?;
        }
    }
    Ok(StatsArchive {
        blocks: states.iter().map(|s| s.cast()).collect(),
        fingerprint: model.fingerprint(),
        task: task.to_string(),
    })
}

/// Per-block batch mean and population variance of `[B, L, d]` graph values.
pub fn batch_stats<T: Real>(g: &mut Graph<T>, feats: Var) -> Result<(Var, Var)> {
    let mu = g.mean_axis(feats, 0)?;
    let centered = g.sub_trailing(feats, mu)?;
    let sq = g.square(centered);
    let var = g.mean_axis(sq, 0)?;
    Ok((mu, var))
}

/// `sum_l ||mu_l(x) - E[mu_l]||_2 + ||var_l(x) - E[var_l]||_2`.
pub fn norm_loss<T: Real>(g: &mut Graph<T>, feats: &[Var], archive: &StatsArchive) -> Result<Var> {
    if feats.len() != archive.blocks.len() {
        return Err(Error::Invalid(format!(
            "norm_loss: {} feature blocks for an archive of {}",
            feats.len(),
            archive.blocks.len()
        )));
    }
    let mut total = None;
    for (&f, st) in feats.iter().zip(&archive.blocks) {
        let (mu, var) = batch_stats(g, f)?;
        let em = g.constant(st.mean.cast());
        let ev = g.constant(st.var.cast());
        let dm = g.sub(mu, em)?;
        let dv = g.sub(var, ev)?;
        let a = g.norm2(dm);
        let b = g.norm2(dv);
        let term = g.add(a, b)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("archive has at least one block"))
}
