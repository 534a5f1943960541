//! Data-free inversion: optimizes generator parameters and latents so a
//! frozen encoder's responses match a task's saved statistics.

use std::fmt::Write as _;
use std::path::Path;

use diffcore::{Adam, AdamConfig, Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_var, mim_forward, sample_masks, MimModel};
use crate::error::{Error, Result};
use crate::invunet::{sample_latents, GenNorm, GeneratorConfig, InvUNet};
use crate::stats::{norm_loss, StatsArchive};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub alpha_norm: f64,
    pub alpha_img: f64,
    pub alpha_rep: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Samples to synthesize; continual runs override it per task.
    pub samples: usize,
    pub generator_lr: f64,
    pub latent_lr: f64,
    /// Batches between generator re-initializations.
    pub reinit_period: usize,
    pub mask_ratio: f32,
    pub use_img: bool,
    pub use_rep: bool,
    pub generator: GeneratorConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            alpha_norm: 1.0,
            alpha_img: 0.1,
            alpha_rep: 0.1,
            steps: 300,
            batch_size: 32,
            samples: 32,
            generator_lr: 2e-4,
            latent_lr: 0.05,
            reinit_period: 1,
            mask_ratio: 0.75,
            use_img: true,
            use_rep: true,
            generator: GeneratorConfig::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("inversion: {m}")));
        for (name, a) in [
            ("alpha_norm", self.alpha_norm),
            ("alpha_img", self.alpha_img),
            ("alpha_rep", self.alpha_rep),
        ] {
            if !(a >= 0.0) || !a.is_finite() {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if self.batch_size == 0 || self.reinit_period == 0 {
            return bad("batch_size and reinit_period must be positive");
        }
        if !(self.generator_lr > 0.0) || !(self.latent_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio outside [0, 1]");
        }
        self.generator.validate()
    }

    fn weights(&self) -> (f64, f64, f64) {
        (
            self.alpha_norm,
            if self.use_img { self.alpha_img } else { 0.0 },
            if self.use_rep { self.alpha_rep } else { 0.0 },
        )
    }
}

/// Detached features of emitted synthetic samples, the repulsion targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePool {
    capacity: usize,
    dim: usize,
    rows: Vec<f32>,
}

impl FeaturePool {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            capacity,
            dim,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.rows.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends `[n, dim]` feature rows.
    pub fn extend(&mut self, feats: &Tensor<f32>) -> Result<()> {
        if feats.shape().len() != 2 || feats.shape()[1] != self.dim {
            return Err(diffcore::Error::Shape {
                op: "pool extend",
                lhs: vec![self.len(), self.dim],
                rhs: feats.shape().to_vec(),
            }
            .into());
        }
        if self.len() + feats.shape()[0] > self.capacity {
            return Err(Error::Invalid(format!(
                "pool capacity {} exceeded by {} new rows",
                self.capacity,
                feats.shape()[0]
            )));
        }
        if !feats.is_finite() {
            return Err(Error::Numeric("non-finite pool features".into()));
        }
        self.rows.extend_from_slice(feats.data());
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.len(), self.dim], self.rows.clone()).expect("shape")
    }
}

/// Mean over the batch of summed absolute vertical and horizontal
/// neighbor differences.
pub fn tv_loss<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Invalid(format!("tv_loss expects [B, C, H, W], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut terms = Vec::new();
    for (axis, len) in [(2, h), (3, w)] {
        if len > 1 {
            let hi = g.narrow(x, axis, 1, len - 1)?;
            let lo = g.narrow(x, axis, 0, len - 1)?;
            let d = g.sub(hi, lo)?;
            let a = g.abs(d);
            terms.push(g.sum(a));
        }
    }
    let total = match terms.as_slice() {
        [] => {
            let z = g.constant(Tensor::scalar(T::zero()));
            return Ok(z);
        }
        [t] => *t,
        [a, c] => g.add(*a, *c)?,
        _ => unreachable!(),
    };
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Unit-normalizes `[P, d]` rows and returns the transposed `[d, P]` matrix.
fn normalized_transpose<T: Real>(pool: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, d) = (pool.shape()[0], pool.shape()[1]);
    let mut out = vec![T::zero(); p * d];
    for (j, row) in pool.data().chunks(d).enumerate() {
        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if !(n > T::zero()) {
            return Err(diffcore::Error::ZeroNorm(j).into());
        }
        for (k, &v) in row.iter().enumerate() {
            out[k * p + j] = v / n;
        }
    }
    Ok(Tensor::new(vec![d, p], out)?)
}

/// `1/(B|P|) sum_i sum_j cos^2(h_i, p_j)`; zero for an empty pool.
pub fn repulsive_loss<T: Real>(g: &mut Graph<T>, h: Var, pool: &Tensor<T>) -> Result<Var> {
    let hs = g.shape(h).to_vec();
    if pool.shape().len() != 2 || hs.len() != 2 || hs[1] != pool.shape()[1] {
        return Err(diffcore::Error::Shape {
            op: "repulsive_loss",
            lhs: hs,
            rhs: pool.shape().to_vec(),
        }
        .into());
    }
    let p = pool.shape()[0];
    if p == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let hn = g.normalize_rows(h)?;
    let pt = g.constant(normalized_transpose(pool)?);
    let cos = g.matmul(hn, pt)?;
    let sq = g.square(cos);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (hs[0] * p) as f64))
}

/// Graph handles of the four objective terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub task: Var,
    pub norm: Var,
    pub img: Var,
    pub rep: Var,
    pub images: Var,
    /// Token-averaged final-block features of the batch.
    pub features: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Terms {
    pub task: f64,
    pub norm: f64,
    pub img: f64,
    pub rep: f64,
    pub total: f64,
}

impl Terms {
    pub fn read<T: Real>(g: &Graph<T>, v: &ObjectiveVars) -> Self {
        Self {
            task: g.scalar(v.task),
            norm: g.scalar(v.norm),
            img: g.scalar(v.img),
            rep: g.scalar(v.rep),
            total: g.scalar(v.total),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.task, self.norm, self.img, self.rep, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Objective on an already generated batch `x`:
/// `L_task + a_norm L_norm + a_img L_img + a_rep L_rep`.
#[allow(clippy::too_many_arguments)]
pub fn objective_on_images<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    frozen: &MimModel<T>,
    archive: &StatsArchive,
    pool: &Tensor<T>,
    cfg: &InversionConfig,
    masks: &[crate::encoder::PatchMask],
) -> Result<ObjectiveVars> {
    archive.check_model(frozen)?;
    let fb = frozen.params().bind(g, false);
    let task = mim_forward(g, frozen, &fb, x, masks)?.loss;
    let taps = frozen.forward_blocks(g, &fb, x)?;
    let norm = norm_loss(g, &taps, archive)?;
    let features = embed_var(g, &taps)?;
    let img = tv_loss(g, x)?;
    let rep = repulsive_loss(g, features, pool)?;
    let (an, ai, ar) = cfg.weights();
    let mut total = task;
    for (term, w) in [(norm, an), (img, ai), (rep, ar)] {
        let s = g.scale(term, w);
        total = g.add(total, s)?;
    }
    Ok(ObjectiveVars {
        total,
        task,
        norm,
        img,
        rep,
        images: x,
        features,
    })
}

/// Full inversion objective evaluated on `G(z)`.
#[allow(clippy::too_many_arguments)]
pub fn inversion_objective<T: Real>(
    g: &mut Graph<T>,
    gen: &InvUNet<T>,
    gen_bind: &crate::params::Binding,
    z: Var,
    frozen: &MimModel<T>,
    archive: &StatsArchive,
    pool: &Tensor<T>,
    cfg: &InversionConfig,
    masks: &[crate::encoder::PatchMask],
) -> Result<ObjectiveVars> {
    archive.check_model(frozen)?;
    let x = gen.generate(g, gen_bind, z)?.images;
    objective_on_images(g, x, frozen, archive, pool, cfg, masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub batch: usize,
    pub terms: Terms,
}

/// Per-batch statistics-term progress.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSummary {
    pub emitted: usize,
    pub initial_norm: f64,
    pub final_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    /// `[N_t, C, H, W]` synthetic images.
    pub images: Tensor<f32>,
    pub pool: FeaturePool,
    pub trace: Vec<TraceRow>,
    pub batches: Vec<BatchSummary>,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut s = String::from("step,batch,L_task,L_norm,L_img,L_rep,total\n");
    for r in rows {
        let t = &r.terms;
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.batch, t.task, t.norm, t.img, t.rep, t.total
        );
    }
    crate::util::write_file(path, s.as_bytes())
}

fn diagnostics(batch: usize, step: usize, t: &Terms) -> Error {
    Error::Numeric(format!(
        "inversion batch {batch}, step {step}: L_task={} L_norm={} L_img={} L_rep={} total={}",
        t.task, t.norm, t.img, t.rep, t.total
    ))
}

/// Synthesizes `cfg.samples` images from a frozen encoder and its archive.
pub fn invert_task(
    frozen: &MimModel<f32>,
    archive: &StatsArchive,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<Synthesis> {
    cfg.validate()?;
    archive.check_model(frozen)?;
    let ecfg = frozen.config();
    let gcfg = &cfg.generator;
    if gcfg.output_size != ecfg.image_size || gcfg.output_channels != ecfg.channels {
        return Err(Error::Config(format!(
            "generator output {}x{}x{} does not match encoder input {}x{}x{}",
            gcfg.output_channels, gcfg.output_size, gcfg.output_size, ecfg.channels, ecfg.image_size, ecfg.image_size
        )));
    }
    let n_total = cfg.samples;
    let mut pool = FeaturePool::new(ecfg.dim, n_total);
    let mut images = Vec::with_capacity(n_total * ecfg.channels * ecfg.image_size * ecfg.image_size);
    let mut trace = Vec::new();
    let mut batches = Vec::new();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "inversion.mask", 0));
    let mut gen = InvUNet::<f32>::new(gcfg.clone(), &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "inversion.gen", 0)))?;
    let mut gen_opt = Adam::new(AdamConfig::with_lr(cfg.generator_lr), gen.params().tensors());
    let mut emitted = 0;
    let mut batch = 0;
    while emitted < n_total {
        if batch > 0 && batch % cfg.reinit_period == 0 {
            gen.reinit(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "inversion.gen", batch as u64)));
            gen_opt = Adam::new(AdamConfig::with_lr(cfg.generator_lr), gen.params().tensors());
        }
        let want = cfg.batch_size.min(n_total - emitted);
        // batch statistics are undefined for one sample: generate two, emit one
        let b = if want == 1 && gcfg.norm == GenNorm::Batch { 2 } else { want };
        let mut latent_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "inversion.z", batch as u64));
        let mut z = vec![sample_latents::<f32>(b, gcfg.latent_dim, &mut latent_rng)];
        let mut z_opt = Adam::new(AdamConfig::with_lr(cfg.latent_lr), &z);
        let pool_t = pool.to_tensor();
        let mut initial_norm = f64::NAN;
        for step in 0..cfg.steps {
            let mut g = Graph::new();
            let gb = gen.params().bind(&mut g, true);
            let zv = g.leaf(z[0].clone());
            let masks = sample_masks(ecfg, b, cfg.mask_ratio, &mut mask_rng)?;
            let obj = inversion_objective(&mut g, &gen, &gb, zv, frozen, archive, &pool_t, cfg, &masks)?;
            let terms = Terms::read(&g, &obj);
            if !terms.is_finite() {
                return Err(diagnostics(batch, step, &terms));
            }
            if step == 0 {
                initial_norm = terms.norm;
            }
            trace.push(TraceRow { step, batch, terms });
            g.backward(obj.total)?;
            let grads = gen.params().grads(&g, &gb);
            let names = gen.params().names().to_vec();
            gen_opt
                .step(gen.params_mut().tensors_mut(), &grads, &names)
                .map_err(|e| Error::Numeric(format!("inversion batch {batch}, step {step}: {e}")))?;
            let zg = g.grad(zv).expect("latent is a leaf");
            z_opt
                .step(&mut z, &[zg], &["z".to_string()])
                .map_err(|e| Error::Numeric(format!("inversion batch {batch}, step {step}: {e}")))?;
        }
        // emission pass with the final parameters and latents
        let mut g = Graph::new();
        let gb = gen.params().bind(&mut g, false);
        let zv = g.constant(z[0].clone());
        let x = gen.generate(&mut g, &gb, zv)?.images;
        let fb = frozen.params().bind(&mut g, false);
        let taps = frozen.forward_blocks(&mut g, &fb, x)?;
        let nl = norm_loss(&mut g, &taps, archive)?;
        let feats = embed_var(&mut g, &taps)?;
        let final_norm = g.scalar(nl);
        if !final_norm.is_finite() {
            return Err(Error::Numeric(format!("inversion batch {batch}: non-finite final L_norm")));
        }
        if cfg.steps == 0 {
            initial_norm = final_norm;
        }
        let keep = g.value(x).slice_rows(0, want)?;
        pool.extend(&g.value(feats).slice_rows(0, want)?)?;
        images.extend_from_slice(keep.data());
        emitted += want;
        batches.push(BatchSummary {
            emitted: want,
            initial_norm,
            final_norm,
        });
        batch += 1;
    }
    Ok(Synthesis {
        images: Tensor::new(ecfg.image_shape(n_total).to_vec(), images)?,
        pool,
        trace,
        batches,
    })
}
