//! Encoder training loop: plain MIM pre-training and the continual stage
//! objective with synthetic replay and feature distillation.

use diffcore::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{block_features, mim_forward, sample_masks, MimModel};
use crate::error::{Error, Result};
use crate::params::Binding;
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub mask_ratio: f32,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            warmup_frac: 0.05,
            min_lr_frac: 0.0,
            mask_ratio: 0.75,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train: lr {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::Config("train: warmup_frac and min_lr_frac must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("train: mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        Ok(())
    }

    /// Learning rate for `step` (0-based) out of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil() as usize;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let prog = ((step - warm) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_frac;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos())
    }
}

/// Replay inputs for a continual stage.
pub struct Replay<'a> {
    /// Synthetic images `[N, C, H, W]`.
    pub images: &'a Tensor<f32>,
    /// Frozen previous-stage model, the distillation teacher.
    pub teacher: &'a MimModel<f32>,
    pub lambda_replay: f64,
    pub lambda_kd: f64,
    /// Synthetic samples drawn per step.
    pub batch_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    /// Current-data MIM loss per step.
    pub step_loss: Vec<f64>,
    /// Replay MIM loss per step (empty without replay).
    pub step_replay: Vec<f64>,
    /// Distillation loss per step (empty without replay).
    pub step_kd: Vec<f64>,
    /// Mean current-data MIM loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

/// Mean squared difference of final-block features, teacher side detached.
pub fn kd_loss(
    g: &mut Graph<f32>,
    student: &MimModel<f32>,
    bind: &Binding,
    teacher: &MimModel<f32>,
    x: &Tensor<f32>,
) -> Result<Var> {
    if student.fingerprint() != teacher.fingerprint() {
        return Err(Error::Fingerprint {
            archive: teacher.fingerprint(),
            model: student.fingerprint(),
        });
    }
    let target = block_features(teacher, x)?.pop().expect("depth >= 1");
    let xv = g.constant(x.clone());
    let taps = student.forward_blocks(g, bind, xv)?;
    let t = g.constant(target);
    let d = g.sub(*taps.last().expect("depth >= 1"), t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn numeric(what: &str, epoch: usize, step: usize) -> Error {
    Error::Numeric(format!("non-finite {what} at epoch {epoch}, step {step}"))
}

/// Trains `model` on `data` under `sched`; with `replay`, each step also
/// minimizes the synthetic MIM loss and the distillation loss.
pub fn train(
    model: &mut MimModel<f32>,
    data: &Tensor<f32>,
    sched: &TrainSchedule,
    seed: u64,
    replay: Option<Replay<'_>>,
) -> Result<TrainTrace> {
    sched.validate()?;
    let n = data.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let replay = replay.filter(|r| r.images.shape()[0] > 0);
    let cfg = model.config().clone();
    let per_epoch = n.div_ceil(sched.batch_size);
    let total = per_epoch * sched.epochs;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train.order", 0));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train.mask", 0));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train.replay", 0));
    let mut opt = Adam::new(AdamConfig::with_lr(sched.lr), model.params().tensors());
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..sched.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(sched.batch_size) {
            let batch = data.gather_rows(chunk)?;
            let masks = sample_masks(&cfg, chunk.len(), sched.mask_ratio, &mut mask_rng)?;
            let mut g = Graph::new();
            let bind = model.params().bind(&mut g, true);
            let xv = g.constant(batch);
            let out = mim_forward(&mut g, model, &bind, xv, &masks)?;
            let cur = g.scalar(out.loss);
            if !cur.is_finite() {
                return Err(numeric("MIM loss", epoch, step));
            }
            let mut total_loss = out.loss;
            if let Some(r) = &replay {
                let m = r.images.shape()[0];
                let k = r.batch_size.clamp(1, m);
                let idx: Vec<usize> = rand::seq::index::sample(&mut replay_rng, m, k).into_vec();
                let syn = r.images.gather_rows(&idx)?;
                let syn_masks = sample_masks(&cfg, k, sched.mask_ratio, &mut replay_rng)?;
                let sv = g.constant(syn.clone());
                let rout = mim_forward(&mut g, model, &bind, sv, &syn_masks)?;
                let kd = kd_loss(&mut g, model, &bind, r.teacher, &syn)?;
                let (rl, kl) = (g.scalar(rout.loss), g.scalar(kd));
                if !rl.is_finite() || !kl.is_finite() {
                    return Err(numeric("replay loss", epoch, step));
                }
                trace.step_replay.push(rl);
                trace.step_kd.push(kl);
                let a = g.scale(rout.loss, r.lambda_replay);
                let b = g.scale(kd, r.lambda_kd);
                total_loss = g.add(total_loss, a)?;
                total_loss = g.add(total_loss, b)?;
            }
            g.backward(total_loss)?;
            let grads = model.params().grads(&g, &bind);
            opt.config.lr = sched.lr_at(step, total);
            let names = model.params().names().to_vec();
            opt.step(model.params_mut().tensors_mut(), &grads, &names)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {step}: {e}")))?;
            trace.step_loss.push(cur);
            epoch_sum += cur;
            step += 1;
        }
        trace.epoch_loss.push(epoch_sum / per_epoch as f64);
    }
    Ok(trace)
}

/// MIM pre-training of a single task.
pub fn pretrain(
    mut model: MimModel<f32>,
    data: &Tensor<f32>,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<(MimModel<f32>, TrainTrace)> {
    let trace = train(&mut model, data, sched, seed, None)?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            channels: 1,
            patch: 2,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let s = TrainSchedule {
            lr: 1.0,
            warmup_frac: 0.1,
            ..Default::default()
        };
        assert!((s.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!(s.lr_at(99, 100) < 0.01);
        assert!(s.lr_at(50, 100) < s.lr_at(20, 100));
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MimModel::<f32>::new(tiny(), &mut rng).unwrap();
        let before = m.params().clone();
        let data = Tensor::full(&[4, 1, 8, 8], 0.5);
        let sched = TrainSchedule {
            epochs: 0,
            ..Default::default()
        };
        let (m, trace) = pretrain(m, &data, &sched, 1).unwrap();
        assert_eq!(m.params(), &before);
        assert!(trace.epoch_loss.is_empty());
    }

    #[test]
    fn kd_of_identical_models_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MimModel::<f32>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.25);
        let mut g = Graph::new();
        let b = m.params().bind(&mut g, true);
        let kd = kd_loss(&mut g, &m, &b, &m.clone(), &x).unwrap();
        assert_eq!(g.scalar(kd), 0.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = MimModel::<f32>::new(tiny(), &mut rng).unwrap();
        let data = Tensor::zeros(&[0, 1, 8, 8]);
        assert!(train(&mut m, &data, &TrainSchedule::default(), 0, None).is_err());
    }
}
