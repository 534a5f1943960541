//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `INVCOSS_ACCEPT=1,4,6` restricts the run to the listed criteria and
//! `INVCOSS_ACCEPT_DIR` keeps the artifacts in a fixed directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use diffcore::{grad_check_floor, Graph, NormKind, Real, Tensor, Upsample, Var};
use invcoss::config::RunConfig;
use invcoss::continual::{file_hash, Regime, SequenceConfig, SequenceReport, SequenceRunner};
use invcoss::encoder::{mim_forward, sample_masks, EncoderConfig, MimModel, PatchMask};
use invcoss::evalkit::{diversity, sample_size_sweep, storage_report, StorageEntry};
use invcoss::inversion::{inversion_objective, invert_task, objective_on_images, repulsive_loss, tv_loss, InversionConfig};
use invcoss::invunet::{Activation, GenNorm, GeneratorConfig, InvUNet, ProjectorNorm, UpsampleMode};
use invcoss::params::Binding;
use invcoss::stats::{capture_stats, norm_loss, LayerStatistics, StatsArchive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEEDS: [u64; 3] = [0, 1, 2];
const SMOOTH_TOL: f64 = 1e-4;
const KINK_TOL: f64 = 1e-3;
const KINK_MARGIN: f64 = 0.1;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const WELFORD_F64_TOL: f64 = 1e-10;
const WELFORD_F32_TOL: f64 = 1e-4;
const CLOSED_FORM_TOL: f64 = 1e-6;
const DESCENT_FACTOR: f64 = 0.5;
const SYNTHESIS_BUDGET: Duration = Duration::from_secs(600);
const SYNTHESIS_SAMPLES: usize = 100;
const REPULSION_SAMPLES: usize = 64;
const REPULSION_BATCH: usize = 16;
const REPULSION_GAIN: f64 = 0.10;
const RETENTION_MARGIN: f64 = 0.10;
const JOINT_FACTOR: f64 = 1.25;
const SEQUENCE_BUDGET: Duration = Duration::from_secs(45 * 60);
const STORAGE_RATIO: f64 = 5.0;
const SWEEP: [f64; 2] = [0.01, 0.10];

type Verdict = Result<String, String>;

fn log(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

fn mins(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

// ---------------------------------------------------------------- runs

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Order {
    Forward,
    Reversed,
}

struct Outcome {
    dir: PathBuf,
    report: SequenceReport,
    elapsed: Duration,
}

/// Lazily executed, memoized sequence runs shared between criteria.
struct Lab {
    root: PathBuf,
    base: RunConfig,
    runs: HashMap<(Order, u64, &'static str), Outcome>,
}

impl Lab {
    fn sequence(&self, order: Order) -> SequenceConfig {
        let mut cfg = self.base.sequence();
        if order == Order::Reversed {
            cfg.tasks.reverse();
        }
        cfg
    }

    fn dir(&self, order: Order, seed: u64, regime: Regime) -> PathBuf {
        self.root.join(format!("{order:?}").to_lowercase()).join(format!("seed{seed}")).join(regime.name())
    }

    fn run(&mut self, order: Order, seed: u64, regime: Regime) -> &Outcome {
        let key = (order, seed, regime.name());
        if !self.runs.contains_key(&key) {
            let dir = self.dir(order, seed, regime);
            log(&format!("running {} {order:?} seed {seed}", regime.name()));
            let t = Instant::now();
            let runner = SequenceRunner::new(&dir, self.sequence(order), regime, seed).expect("valid sequence");
            let report = runner.run().expect("sequence run");
            let elapsed = t.elapsed();
            log(&format!("  done in {}", mins(elapsed)));
            self.runs.insert(key, Outcome { dir, report, elapsed });
        }
        &self.runs[&key]
    }

    fn runner(&self, order: Order, seed: u64, regime: Regime) -> SequenceRunner {
        SequenceRunner::new(self.dir(order, seed, regime), self.sequence(order), regime, seed).unwrap()
    }

    /// Held-out loss of the sequence's first task after the last stage.
    fn first_task_loss(&mut self, order: Order, seed: u64, regime: Regime) -> f64 {
        let m = &self.run(order, seed, regime).report.retention;
        match regime {
            Regime::Joint => m.get(0, 0),
            _ => m.final_loss(0),
        }
        .expect("first task evaluated")
    }

    /// Frozen blobs encoder and its archive after the first stage.
    fn blobs_stage0(&mut self) -> (MimModel<f32>, StatsArchive) {
        self.run(Order::Forward, 0, Regime::Seqssl);
        let r = self.runner(Order::Forward, 0, Regime::Seqssl);
        (
            MimModel::read(&r.checkpoint_path(0)).unwrap(),
            StatsArchive::read(&r.stats_path(0)).unwrap(),
        )
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn copy_tree(from: &Path, to: &Path) {
    for (rel, bytes) in snapshot(from) {
        let p = to.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
}

fn differing(a: &Path, b: &Path) -> Vec<String> {
    let (x, y) = (snapshot(a), snapshot(b));
    let keys: BTreeSet<&PathBuf> = x.keys().chain(y.keys()).collect();
    keys.into_iter()
        .filter(|k| x.get(*k) != y.get(*k))
        .map(|k| k.display().to_string())
        .collect()
}

// ---------------------------------------------------------------- 1: gradients

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(KINK_MARGIN..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = g.constant(Tensor::new(shape, w).unwrap());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Smallest absolute neighbour difference of `[B, C, H, W]` images.
fn tv_margin(x: &Tensor<f64>) -> f64 {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let d = x.data();
    let mut m = f64::INFINITY;
    for p in 0..s[0] * s[1] {
        for i in 0..h {
            for j in 0..w {
                let v = d[(p * h + i) * w + j];
                if i + 1 < h {
                    m = m.min((d[(p * h + i + 1) * w + j] - v).abs());
                }
                if j + 1 < w {
                    m = m.min((d[(p * h + i) * w + j + 1] - v).abs());
                }
            }
        }
    }
    m
}

struct GradSuite {
    checked: usize,
    worst: (f64, String),
    failures: Vec<String>,
}

impl GradSuite {
    fn check(&mut self, name: &str, f: impl Fn(&mut Graph<f64>, &[Var]) -> diffcore::Result<Var>, pt: &[Tensor<f64>], tol: f64) {
        self.checked += 1;
        // exactly vanishing coordinates (key biases, conv biases ahead of
        // batch normalization) compare absolutely below the floor
        match grad_check_floor(f, pt, 1e-5, 1e-5) {
            Ok(r) => {
                if r.max_rel_err > self.worst.0 {
                    self.worst = (r.max_rel_err, name.to_string());
                }
                if !(r.max_rel_err < tol) {
                    self.failures.push(format!("{name} {:.2e}", r.max_rel_err));
                }
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }
}

fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 4,
        channels: 1,
        patch: 2,
        dim: 4,
        depth: 2,
        heads: 2,
        mlp_ratio: 1,
    }
}

fn micro_generator() -> GeneratorConfig {
    GeneratorConfig {
        latent_dim: 3,
        bottleneck_size: 2,
        channels: vec![2, 3],
        output_size: 4,
        output_channels: 1,
        upsample: UpsampleMode::Bilinear,
        norm: GenNorm::Batch,
        activation: Activation::Gelu,
        leaky_slope: 0.2,
        projector_norm: ProjectorNorm::Layer,
        projector_activation: Activation::Gelu,
        memory_cache: true,
    }
}

fn op_checks(s: &mut GradSuite) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let a2 = rand_t(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[4, 5], -1.0, 1.0);
    s.check("matmul", |g, v| { let y = g.matmul(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), b], SMOOTH_TOL);
    let bb = rand_t(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let bt = rand_t(&mut rng, &[2, 5, 4], -1.0, 1.0);
    s.check("bmm", |g, v| { let y = g.bmm(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), bb], SMOOTH_TOL);
    s.check("bmm_nt", |g, v| { let y = g.bmm_nt(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), bt], SMOOTH_TOL);

    let x = rand_t(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
    let w = rand_t(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let bias = rand_t(&mut rng, &[2], -1.0, 1.0);
    for pad in [0, 1] {
        s.check("conv2d", |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), pad)?; Ok(weighted_sum(g, y)) }, &[x.clone(), w.clone(), bias.clone()], SMOOTH_TOL);
    }
    for mode in [Upsample::Nearest, Upsample::Bilinear] {
        s.check("upsample2x", |g, v| { let y = g.upsample2x(v[0], mode)?; Ok(weighted_sum(g, y)) }, &[x.clone()], SMOOTH_TOL);
    }
    let gamma = rand_t(&mut rng, &[4], -1.0, 1.0);
    let beta = rand_t(&mut rng, &[4], -1.0, 1.0);
    s.check("layer_norm", |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; Ok(weighted_sum(g, y)) }, &[a.clone(), gamma, beta], SMOOTH_TOL);
    let gc = rand_t(&mut rng, &[3], -1.0, 1.0);
    let bc = rand_t(&mut rng, &[3], -1.0, 1.0);
    for kind in [NormKind::Batch, NormKind::Instance] {
        s.check("channel_norm", |g, v| { let y = g.channel_norm(kind, v[0], v[1], v[2], 1e-5)?; Ok(weighted_sum(g, y)) }, &[x.clone(), gc.clone(), bc.clone()], SMOOTH_TOL);
    }

    type Unary = fn(&mut Graph<f64>, Var) -> Var;
    let unary: [(&str, Unary); 7] = [
        ("gelu", |g, x| g.gelu(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("square", |g, x| g.square(x)),
        ("scale", |g, x| g.scale(x, -2.5)),
        ("add_scalar", |g, x| g.add_scalar(x, 0.7)),
        ("sqrt", |g, x| { let s = g.square(x); let s = g.add_scalar(s, 0.1); g.sqrt(s) }),
    ];
    for (name, f) in unary {
        s.check(name, |g, v| { let y = f(g, v[0]); Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
    }
    s.check("softmax", |g, v| { let y = g.softmax(v[0])?; Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
    s.check("add", |g, v| { let y = g.add(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), a2.clone()], SMOOTH_TOL);
    s.check("sub", |g, v| { let y = g.sub(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), a2.clone()], SMOOTH_TOL);
    s.check("mul", |g, v| { let y = g.mul(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), a2.clone()], SMOOTH_TOL);
    let t = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    s.check("add_trailing", |g, v| { let y = g.add_trailing(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), t.clone()], SMOOTH_TOL);
    s.check("sub_trailing", |g, v| { let y = g.sub_trailing(v[0], v[1])?; Ok(weighted_sum(g, y)) }, &[a.clone(), t], SMOOTH_TOL);
    for axis in 0..3 {
        s.check("sum_axis", |g, v| { let y = g.sum_axis(v[0], axis)?; Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
        s.check("mean_axis", |g, v| { let y = g.mean_axis(v[0], axis)?; Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
        s.check("concat", |g, v| { let y = g.concat(&[v[0], v[1]], axis)?; Ok(weighted_sum(g, y)) }, &[a.clone(), a2.clone()], SMOOTH_TOL);
    }
    s.check("mean", |g, v| { let y = g.square(v[0]); Ok(g.mean(y)) }, &[a.clone()], SMOOTH_TOL);
    s.check("norm2", |g, v| Ok(g.norm2(v[0])), &[a.clone()], SMOOTH_TOL);
    let rows = rand_t(&mut rng, &[4, 5], -1.0, 1.0);
    s.check("normalize_rows", |g, v| { let y = g.normalize_rows(v[0])?; Ok(weighted_sum(g, y)) }, &[rows], SMOOTH_TOL);
    s.check("reshape", |g, v| { let y = g.reshape(v[0], &[6, 4])?; Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
    s.check("permute", |g, v| { let y = g.permute(v[0], &[2, 0, 1])?; Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
    s.check("transpose", |g, v| { let y = g.transpose(v[0])?; Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
    s.check("narrow", |g, v| { let y = g.narrow(v[0], 2, 1, 2)?; Ok(weighted_sum(g, y)) }, &[a.clone()], SMOOTH_TOL);
    let mask: Vec<bool> = (0..24).map(|i| i % 3 != 1).collect();
    s.check("masked_select", |g, v| { let y = g.masked_select(v[0], &mask)?; Ok(weighted_sum(g, y)) }, &[a], SMOOTH_TOL);

    let k = away_from_zero(&mut rng, &[3, 7]);
    let kinked: [(&str, Unary); 3] = [
        ("abs", |g, x| g.abs(x)),
        ("relu", |g, x| g.relu(x)),
        ("leaky_relu", |g, x| g.leaky_relu(x, 0.2)),
    ];
    for (name, f) in kinked {
        s.check(name, |g, v| { let y = f(g, v[0]); Ok(weighted_sum(g, y)) }, &[k.clone()], KINK_TOL);
    }
}

fn archive_for(model: &MimModel<f32>, seed: u64) -> StatsArchive {
    let data = rand_t(&mut ChaCha8Rng::seed_from_u64(seed), &model.config().image_shape(12), 0.0, 1.0).cast();
    capture_stats(model, &data, 5, "micro").unwrap()
}

fn fixed_masks(cfg: &EncoderConfig, b: usize, seed: u64) -> Vec<PatchMask> {
    sample_masks(cfg, b, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn loss_checks(s: &mut GradSuite) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let x = (0..)
        .map(|_| rand_t(&mut rng, &[2, 1, 3, 3], 0.0, 4.0))
        .find(|x| tv_margin(x) > KINK_MARGIN)
        .unwrap();
    s.check("total variation", |g, v| Ok(tv_loss(g, v[0]).unwrap()), &[x], KINK_TOL);

    let h = rand_t(&mut rng, &[3, 5], -1.0, 1.0);
    let pool = rand_t(&mut rng, &[4, 5], -1.0, 1.0);
    s.check("repulsive", |g, v| Ok(repulsive_loss(g, v[0], &pool).unwrap()), &[h], SMOOTH_TOL);

    let blocks = (0..2)
        .map(|_| LayerStatistics {
            mean: rand_t(&mut rng, &[2, 3], -1.0, 1.0).cast(),
            var: rand_t(&mut rng, &[2, 3], 0.1, 1.0).cast(),
            count: 10,
        })
        .collect();
    let archive = StatsArchive {
        blocks,
        fingerprint: "x".into(),
        task: "t".into(),
    };
    let f0 = rand_t(&mut rng, &[3, 2, 3], -2.0, 2.0);
    let f1 = rand_t(&mut rng, &[3, 2, 3], -2.0, 2.0);
    s.check("statistics matching", |g, v| Ok(norm_loss(g, v, &archive).unwrap()), &[f0, f1], SMOOTH_TOL);

    let cfg = micro_encoder();
    let model32 = MimModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let model = model32.cast::<f64>();
    let x = rand_t(&mut rng, &cfg.image_shape(2), 0.0, 1.0);
    let masks = fixed_masks(&cfg, 2, 7);
    let mut point = vec![x];
    point.extend(model.params().tensors().iter().cloned());
    s.check(
        "masked image modeling",
        |g, v| {
            let bind = Binding::from_vars(v[1..].to_vec());
            Ok(mim_forward(g, &model, &bind, v[0], &masks).unwrap().loss)
        },
        &point,
        SMOOTH_TOL,
    );

    let archive = archive_for(&model32, 9);
    let pool = rand_t(&mut rng, &[3, cfg.dim], -1.0, 1.0);
    let masks = fixed_masks(&cfg, 3, 11);
    let x = (0..)
        .map(|_| rand_t(&mut rng, &cfg.image_shape(3), 0.0, 1.0))
        .find(|x| tv_margin(x) > KINK_MARGIN)
        .unwrap();
    let icfg = InversionConfig::default();
    s.check(
        "weighted objective",
        |g, v| Ok(objective_on_images(g, v[0], &model, &archive, &pool, &icfg, &masks).unwrap().total),
        &[x],
        SMOOTH_TOL,
    );

    let icfg = InversionConfig {
        generator: micro_generator(),
        ..Default::default()
    };
    let pool = rand_t(&mut rng, &[2, cfg.dim], -1.0, 1.0);
    let masks = fixed_masks(&cfg, 2, 15);
    let (gen, z) = (0..)
        .map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(100 + s);
            let gen = InvUNet::<f64>::new(micro_generator(), &mut r).unwrap();
            let z = rand_t(&mut r, &[2, 3], -1.0, 1.0);
            (gen, z)
        })
        .find(|(gen, z)| {
            let mut g = Graph::new();
            let b = gen.params().bind(&mut g, false);
            let zv = g.constant(z.clone());
            let x = gen.generate(&mut g, &b, zv).unwrap().images;
            tv_margin(g.value(x)) > 0.02
        })
        .unwrap();
    let mut point = vec![z];
    point.extend(gen.params().tensors().iter().cloned());
    s.check(
        "objective through generator",
        |g, v| {
            let bind = Binding::from_vars(v[1..].to_vec());
            Ok(inversion_objective(g, &gen, &bind, v[0], &model, &archive, &pool, &icfg, &masks).unwrap().total)
        },
        &point,
        SMOOTH_TOL,
    );
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let mut s = GradSuite {
        checked: 0,
        worst: (0.0, String::new()),
        failures: Vec::new(),
    };
    op_checks(&mut s);
    loss_checks(&mut s);
    let elapsed = t.elapsed();
    let detail = format!(
        "{} checks, worst rel err {:.2e} ({}), {:.1} s",
        s.checked,
        s.worst.0,
        s.worst.1,
        elapsed.as_secs_f64()
    );
    if !s.failures.is_empty() {
        return Err(format!("{detail}; failing: {}", s.failures.join(", ")));
    }
    if elapsed >= GRAD_BUDGET {
        return Err(format!("{detail}; over the {} s budget", GRAD_BUDGET.as_secs()));
    }
    Ok(detail)
}

// ---------------------------------------------------------------- 2: statistics oracle

fn welford_oracle() -> Verdict {
    const ROWS: usize = 10_000;
    const SHAPE: [usize; 2] = [4, 6];
    let inner = SHAPE[0] * SHAPE[1];
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cols: Vec<(f64, f64)> = (0..inner)
        .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.1..3.0)))
        .collect();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..ROWS)
        .flat_map(|_| cols.iter().map(|&(m, s)| m + s * unit.sample(&mut rng)).collect::<Vec<_>>())
        .collect();

    let mut mean = vec![0.0; inner];
    for row in data.chunks(inner) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= ROWS as f64);
    let mut var = vec![0.0; inner];
    for row in data.chunks(inner) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
    }
    var.iter_mut().for_each(|v| *v /= ROWS as f64);

    fn rel<T: Real>(got: &Tensor<T>, want: &[f64]) -> f64 {
        let scale = want.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        got.to_f64_vec().iter().zip(want).fold(0.0f64, |a, (g, w)| a.max((g - w).abs())) / scale
    }
    fn merged<T: Real>(data: &[f64], cuts: &[usize], shape: [usize; 2]) -> LayerStatistics<T> {
        let inner = shape[0] * shape[1];
        let mut st = LayerStatistics::<T>::empty(&shape);
        for w in cuts.windows(2) {
            let rows = &data[w[0] * inner..w[1] * inner];
            let b = Tensor::<f64>::from_f64(&[w[1] - w[0], shape[0], shape[1]], rows).unwrap();
            st.merge(&b.cast()).unwrap();
        }
        st
    }

    let mut worst = (0.0f64, 0.0f64);
    let mut part_rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..50 {
        let parts = part_rng.random_range(2..200);
        let mut cuts: Vec<usize> = (0..parts - 1).map(|_| part_rng.random_range(1..ROWS)).collect();
        cuts.extend([0, ROWS]);
        cuts.sort_unstable();
        cuts.dedup();
        let s64 = merged::<f64>(&data, &cuts, SHAPE);
        let s32 = merged::<f32>(&data, &cuts, SHAPE);
        let e64 = rel(&s64.mean, &mean).max(rel(&s64.var, &var));
        let e32 = rel(&s32.mean, &mean).max(rel(&s32.var, &var));
        worst = (worst.0.max(e64), worst.1.max(e32));
        if s64.count != ROWS as u64 || !(e64 < WELFORD_F64_TOL) || !(e32 < WELFORD_F32_TOL) {
            return Err(format!("partition {trial}: f64 {e64:.2e}, f32 {e32:.2e}"));
        }
    }
    let elapsed = t.elapsed();
    let detail = format!("50 partitions, worst f64 {:.2e}, f32 {:.2e}, {:.1} s", worst.0, worst.1, elapsed.as_secs_f64());
    if elapsed >= Duration::from_secs(60) {
        return Err(format!("{detail}; over the 60 s budget"));
    }
    Ok(detail)
}

// ---------------------------------------------------------------- 3: closed forms

fn closed_forms() -> Verdict {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let tv = tv_loss(&mut g, x).unwrap();
    let tv = g.scalar(tv);
    let s = 0.5f64.sqrt();
    let h = g.constant(Tensor::new(vec![1, 2], vec![s, s]).unwrap());
    let pool = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let rep = repulsive_loss(&mut g, h, &pool).unwrap();
    let rep = g.scalar(rep);

    let cfg = micro_encoder();
    let model = MimModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    let data = rand_t(&mut ChaCha8Rng::seed_from_u64(17), &cfg.image_shape(6), 0.0, 1.0).cast::<f32>();
    let archive = capture_stats(&model, &data, 6, "t").unwrap();
    let m64 = model.cast::<f64>();
    let mut g = Graph::<f64>::new();
    let b = m64.params().bind(&mut g, false);
    let xv = g.constant(data.cast());
    let taps = m64.forward_blocks(&mut g, &b, xv).unwrap();
    let nl = norm_loss(&mut g, &taps, &archive).unwrap();
    let nl = g.scalar(nl);
    let empty: Vec<PatchMask> = fixed_masks(&cfg, 6, 0)
        .into_iter()
        .map(|m| PatchMask {
            bits: vec![false; m.bits.len()],
            ratio: 0.0,
            ..m
        })
        .collect();
    let out = mim_forward(&mut g, &m64, &b, xv, &empty).unwrap();
    let mim = g.scalar(out.loss);

    let detail = format!("tv {tv}, repulsive {rep}, matched norm {nl:.1e}, empty-mask MIM {mim}");
    let ok = (tv - 6.0).abs() < CLOSED_FORM_TOL
        && (rep - 0.5).abs() < CLOSED_FORM_TOL
        && nl.abs() < CLOSED_FORM_TOL
        && mim.abs() < CLOSED_FORM_TOL;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 4, 5: inversion

fn inversion_descent(lab: &mut Lab) -> Verdict {
    let (model, archive) = lab.blobs_stage0();
    let cfg = InversionConfig {
        samples: SYNTHESIS_SAMPLES,
        ..lab.base.inversion.clone()
    };
    log(&format!("synthesizing {SYNTHESIS_SAMPLES} blobs images"));
    let t = Instant::now();
    let syn = invert_task(&model, &archive, &cfg, 0).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let ratios: Vec<String> = syn
        .batches
        .iter()
        .map(|b| format!("{:.3}", b.final_norm / b.initial_norm))
        .collect();
    let descended = syn.batches.iter().all(|b| b.final_norm < DESCENT_FACTOR * b.initial_norm);
    let detail = format!(
        "{} batches, final/initial L_norm [{}], {} for {} images",
        syn.batches.len(),
        ratios.join(", "),
        mins(elapsed),
        syn.images.shape()[0]
    );
    if descended && elapsed < SYNTHESIS_BUDGET && syn.images.shape()[0] == SYNTHESIS_SAMPLES {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn repulsion_ablation(lab: &mut Lab) -> Verdict {
    let (model, archive) = lab.blobs_stage0();
    let mut rows = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let mut div = [0.0; 2];
        for (i, use_rep) in [true, false].into_iter().enumerate() {
            let cfg = InversionConfig {
                samples: REPULSION_SAMPLES,
                batch_size: REPULSION_BATCH,
                use_rep,
                ..lab.base.inversion.clone()
            };
            log(&format!("repulsion seed {seed}, L_rep {}", if use_rep { "on" } else { "off" }));
            let syn = invert_task(&model, &archive, &cfg, seed).map_err(|e| e.to_string())?;
            div[i] = diversity(&syn.pool.to_tensor()).map_err(|e| e.to_string())?;
        }
        let gain = 1.0 - div[0] / div[1];
        ok &= gain >= REPULSION_GAIN;
        rows.push(format!("seed {seed}: {:.4} vs {:.4} ({:+.1}%)", div[0], div[1], -100.0 * gain));
    }
    let detail = format!("diversity with vs without L_rep: {}", rows.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 6, 9, 11: retention

fn retention(lab: &mut Lab, order: Order, with_joint: bool) -> Verdict {
    let mut rows = Vec::new();
    let mut ok = true;
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let inv = lab.first_task_loss(order, seed, Regime::Invcoss);
        slowest = slowest.max(lab.run(order, seed, Regime::Invcoss).elapsed);
        let seq = lab.first_task_loss(order, seed, Regime::Seqssl);
        let margin = 1.0 - inv / seq;
        ok &= margin >= RETENTION_MARGIN;
        let mut row = format!("seed {seed}: invcoss {inv:.4}, seqssl {seq:.4} (margin {:.1}%)", 100.0 * margin);
        if with_joint {
            let joint = lab.first_task_loss(order, seed, Regime::Joint);
            ok &= inv <= JOINT_FACTOR * joint;
            row += &format!(", joint {joint:.4} (x{:.2})", inv / joint);
        }
        rows.push(row);
    }
    let first = lab.sequence(order).tasks[0].name();
    let mut detail = format!("{first} held-out loss after the last stage; {}", rows.join("; "));
    if with_joint {
        detail += &format!("; slowest invcoss sequence {}", mins(slowest));
        ok &= slowest < SEQUENCE_BUDGET;
    }
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sample_size(lab: &mut Lab) -> Verdict {
    let seed = SEEDS[0];
    let seq = lab.first_task_loss(Order::Forward, seed, Regime::Seqssl);
    let default_ratio = lab.base.stage.buffer_ratio;
    let mut points = vec![(default_ratio, lab.first_task_loss(Order::Forward, seed, Regime::Invcoss))];
    log(&format!("sweeping buffer ratios {SWEEP:?}"));
    let swept = sample_size_sweep(&lab.root.join("sweep"), &lab.sequence(Order::Forward), &SWEEP, seed)
        .map_err(|e| format!("sweep failed: {e}"))?;
    for r in &swept {
        points.push((r.ratio, r.retention.final_loss(0).ok_or("missing first-task loss")?));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let smallest = points[0];
    let detail = format!(
        "seqssl {seq:.4}; invcoss {}",
        points
            .iter()
            .map(|(r, l)| format!("{:.0}%: {l:.4}", 100.0 * r))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if points.len() == 3 && smallest.0 == SWEEP[0] && smallest.1 < seq {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 7: raw-data-free

/// Reruns the last invcoss stage in a copy whose earlier raw data is gone.
fn raw_data_free(lab: &mut Lab) -> Verdict {
    lab.run(Order::Forward, 0, Regime::Invcoss);
    let orig = lab.runner(Order::Forward, 0, Regime::Invcoss);
    let last = orig.cfg.tasks.len() - 1;
    let copy_dir = lab.root.join("raw-free");
    let _ = std::fs::remove_dir_all(&copy_dir);
    copy_tree(&orig.dir.join("raw"), &copy_dir.join("raw"));
    for s in 0..last {
        copy_tree(&orig.stage_dir(s), &copy_dir.join(format!("stage{s}")));
    }
    let copy = SequenceRunner::new(&copy_dir, orig.cfg.clone(), Regime::Invcoss, 0).unwrap();
    let mut removed = 0;
    for t in 0..last {
        for part in ["train", "heldout"] {
            std::fs::remove_file(copy.raw_path(t, part)).map_err(|e| e.to_string())?;
            removed += 1;
        }
    }
    log("rerunning the last invcoss stage without earlier raw data");
    copy.run_stage(last).map_err(|e| format!("stage {last} failed without raw data: {e}"))?;
    let diff = differing(&orig.stage_dir(last), &copy.stage_dir(last));
    let buffer = file_hash(&copy.buffer_path(last)).map_err(|e| e.to_string())?;
    let detail = format!(
        "{removed} raw files removed; stage {last} artifacts {} (buffer hash {buffer:016x})",
        if diff.is_empty() { "byte-identical".to_string() } else { format!("differ: {}", diff.join(", ")) }
    );
    if diff.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 8: storage

fn storage(lab: &mut Lab) -> Verdict {
    lab.run(Order::Forward, 0, Regime::Invcoss);
    let r = lab.runner(Order::Forward, 0, Regime::Invcoss);
    let ratio = lab.base.stage.buffer_ratio;
    let entries: Vec<StorageEntry> = (0..r.cfg.tasks.len())
        .map(|t| StorageEntry {
            stats: r.stats_path(t),
            raw: r.raw_path(t, "train"),
            ratio,
        })
        .collect();
    let out = lab.root.join("storage");
    std::fs::create_dir_all(&out).unwrap();
    let report = storage_report(&entries, &out).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut rows = Vec::new();
    for (row, e) in report.rows.iter().zip(&entries) {
        let stats_len = std::fs::metadata(&e.stats).unwrap().len();
        let raw_len = std::fs::metadata(out.join(format!("raw_buffer_{}.ivcs", row.task))).unwrap().len();
        let exact = stats_len == row.stats_bytes && raw_len == row.raw_buffer_bytes;
        ok &= exact && row.saving() > STORAGE_RATIO;
        rows.push(format!(
            "{}: {} samples, {} B raw vs {} B stats, ratio {:.2}{}",
            row.task,
            row.buffer_samples,
            row.raw_buffer_bytes,
            row.stats_bytes,
            row.saving(),
            if exact { "" } else { " (size mismatch)" }
        ));
    }
    let detail = rows.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 10: determinism

fn cli(args: &[&Path]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_invcoss"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("invcoss {:?}: {}", args, String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn determinism(lab: &mut Lab) -> Verdict {
    let mut checked = Vec::new();
    let mut diffs = Vec::new();
    for regime in [Regime::Seqssl, Regime::Joint] {
        let first = lab.run(Order::Forward, 0, regime).dir.clone();
        let again = lab.root.join("rerun").join(regime.name());
        let _ = std::fs::remove_dir_all(&again);
        log(&format!("rerunning {}", regime.name()));
        SequenceRunner::new(&again, lab.sequence(Order::Forward), regime, 0)
            .unwrap()
            .run()
            .map_err(|e| e.to_string())?;
        checked.push(format!("{} sequence", regime.name()));
        diffs.extend(differing(&first, &again).into_iter().map(|f| format!("{}/{f}", regime.name())));
    }

    lab.run(Order::Forward, 0, Regime::Invcoss);
    let orig = lab.runner(Order::Forward, 0, Regime::Invcoss);
    let copy_dir = lab.root.join("rerun").join("invcoss");
    let _ = std::fs::remove_dir_all(&copy_dir);
    copy_tree(&orig.dir.join("raw"), &copy_dir.join("raw"));
    copy_tree(&orig.stage_dir(0), &copy_dir.join("stage0"));
    let copy = SequenceRunner::new(&copy_dir, orig.cfg.clone(), Regime::Invcoss, 0).unwrap();
    log("rerunning invcoss stage 1");
    copy.run_stage(1).map_err(|e| e.to_string())?;
    checked.push("invcoss stage 1".into());
    diffs.extend(differing(&orig.stage_dir(1), &copy.stage_dir(1)).into_iter().map(|f| format!("invcoss/stage1/{f}")));

    let cfg_path = lab.root.join("rerun").join("config.toml");
    std::fs::write(&cfg_path, lab.base.to_toml().unwrap()).unwrap();
    let p = |s: &str| PathBuf::from(s);
    let mut pre = Vec::new();
    for name in ["pretrain-a", "pretrain-b"] {
        let out = lab.root.join("rerun").join(name);
        let _ = std::fs::remove_dir_all(&out);
        log(&format!("cli {name}"));
        cli(&[&p("pretrain"), &p("--config"), &cfg_path, &p("--out"), &out])?;
        pre.push(out);
    }
    checked.push("cli pretrain".into());
    diffs.extend(differing(&pre[0], &pre[1]).into_iter().map(|f| format!("pretrain/{f}")));
    let mut ev = Vec::new();
    for name in ["eval-a", "eval-b"] {
        let out = lab.root.join("rerun").join(name);
        let _ = std::fs::remove_dir_all(&out);
        cli(&[
            &p("eval"),
            &p("--out"),
            &out,
            &p("--checkpoint"),
            &pre[0].join("checkpoint.ivcs"),
            &p("--heldout"),
            &pre[0].join("heldout.ivcs"),
        ])?;
        ev.push(out);
    }
    checked.push("cli eval".into());
    diffs.extend(differing(&ev[0], &ev[1]).into_iter().map(|f| format!("eval/{f}")));

    let detail = format!("reran {}", checked.join(", "));
    if diffs.is_empty() {
        Ok(format!("{detail}; all artifacts bit-identical"))
    } else {
        Err(format!("{detail}; differing: {}", diffs.join(", ")))
    }
}

// ---------------------------------------------------------------- driver

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let selected: Option<Vec<usize>> = std::env::var("INVCOSS_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let (_tmp, root) = match std::env::var_os("INVCOSS_ACCEPT_DIR") {
        Some(d) => (None, PathBuf::from(d)),
        None => {
            let t = tempfile::TempDir::new().expect("temporary directory");
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    let mut lab = Lab {
        root,
        base: RunConfig::default(),
        runs: HashMap::new(),
    };

    type Criterion = (usize, &'static str, fn(&mut Lab) -> Verdict);
    let criteria: [Criterion; 11] = [
        (1, "gradient suite", |_| gradient_suite()),
        (2, "statistics oracle", |_| welford_oracle()),
        (3, "closed-form losses", |_| closed_forms()),
        (4, "inversion descent", inversion_descent),
        (5, "repulsion ablation", repulsion_ablation),
        (6, "retention", |l| retention(l, Order::Forward, true)),
        (7, "raw-data-free", raw_data_free),
        (8, "storage ratio", storage),
        (9, "sample-size sweep", sample_size),
        (10, "determinism", determinism),
        (11, "order robustness", |l| retention(l, Order::Reversed, false)),
    ];
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !want(n) {
            continue;
        }
        log(&format!("criterion {n}: {name}"));
        let t = Instant::now();
        let verdict = f(&mut lab);
        let line = match &verdict {
            Ok(d) => format!("criterion {n:>2} {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                format!("criterion {n:>2} {name}: FAIL ({d})")
            }
        };
        log(&format!("  {} after {}", if verdict.is_ok() { "pass" } else { "fail" }, mins(t.elapsed())));
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary ({} total):", mins(start.elapsed()));
    for l in &lines {
        println!("{l}");
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
