//! Procedural toy modalities standing in for imaging modalities.

use std::path::Path;

use diffcore::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::error::{Error, Result};
use crate::util::{derive_seed, hash_f32};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityKind {
    Blobs,
    Stripes,
    CheckerNoise,
}

impl ModalityKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Stripes => "stripes",
            Self::CheckerNoise => "checker-noise",
        }
    }
}

impl std::str::FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "stripes" => Ok(Self::Stripes),
            "checker-noise" => Ok(Self::CheckerNoise),
            _ => Err(Error::Config(format!("unknown modality `{s}`"))),
        }
    }
}

/// Generative process of one modality. Parameters of other kinds are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub resolution: usize,
    pub channels: usize,
    /// Inclusive range of bump counts.
    pub blob_count: [usize; 2],
    /// Range of bump standard deviations in pixels.
    pub blob_width: [f32; 2],
    /// Inclusive range of integer stripe frequencies (cycles per image).
    pub stripe_freq: [usize; 2],
    /// Candidate checker cell sizes in pixels.
    pub checker_cells: Vec<usize>,
    /// Standard deviation of additive pixel noise for checker-noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for ModalitySpec {
    fn default() -> Self {
        Self::new(ModalityKind::Blobs, 0)
    }
}

impl ModalitySpec {
    pub fn new(kind: ModalityKind, seed: u64) -> Self {
        Self {
            kind,
            resolution: 32,
            channels: 1,
            blob_count: [1, 3],
            blob_width: [2.0, 4.0],
            stripe_freq: [2, 6],
            checker_cells: vec![2, 4, 8],
            noise: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("modality {}: {m}", self.kind.name())));
        if self.resolution == 0 || self.channels == 0 {
            return bad("resolution and channels must be positive");
        }
        match self.kind {
            ModalityKind::Blobs => {
                let [lo, hi] = self.blob_width;
                if self.blob_count[0] == 0 || self.blob_count[0] > self.blob_count[1] {
                    return bad("blob_count must be a nonempty range of positive counts");
                }
                if !(lo > 0.0) || lo > hi || !hi.is_finite() {
                    return bad("blob_width must be a nonempty positive range");
                }
            }
            ModalityKind::Stripes => {
                let [lo, hi] = self.stripe_freq;
                if lo == 0 || lo > hi || 2 * hi >= self.resolution {
                    return bad("stripe_freq must be a nonempty range below the Nyquist limit");
                }
            }
            ModalityKind::CheckerNoise => {
                if self.checker_cells.is_empty() || self.checker_cells.contains(&0) {
                    return bad("checker_cells must be nonempty positive sizes");
                }
                if !(self.noise >= 0.0) || !self.noise.is_finite() {
                    return bad("noise must be finite and non-negative");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub kind: ModalityKind,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    /// Latent label per sample, used only by evaluation probes.
    pub labels: Vec<u32>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hash(&self) -> u64 {
        hash_f32(self.images.data())
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            kind: self.kind,
            images: self.images.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.insert_text("meta.kind", self.kind.name())?;
        b.insert_tensor("images", self.images.clone())?;
        let labels: Vec<f32> = self.labels.iter().map(|&l| l as f32).collect();
        b.insert_tensor("labels", Tensor::new(vec![labels.len()], labels)?)?;
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let kind = b.text("meta.kind")?.parse()?;
        let images = b.tensor("images")?.clone();
        let labels: Vec<u32> = b.tensor("labels")?.data().iter().map(|&l| l as u32).collect();
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Format(format!(
                "dataset images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { kind, images, labels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::read(path)?)
    }
}

fn blob_image(spec: &ModalitySpec, rng: &mut ChaCha8Rng, out: &mut [f32]) -> u32 {
    let s = spec.resolution;
    let count = rng.random_range(spec.blob_count[0]..=spec.blob_count[1]);
    let [wlo, whi] = spec.blob_width;
    let mut bumps = Vec::with_capacity(count);
    for _ in 0..count {
        let w = if wlo < whi { rng.random_range(wlo..whi) } else { wlo };
        let margin = w.min(s as f32 / 2.0 - 0.5);
        let cy = rng.random_range(margin..=(s as f32 - 1.0 - margin));
        let cx = rng.random_range(margin..=(s as f32 - 1.0 - margin));
        let amp = rng.random_range(0.6f32..1.0);
        bumps.push((cy, cx, w, amp));
    }
    for y in 0..s {
        for x in 0..s {
            let v: f32 = bumps
                .iter()
                .map(|&(cy, cx, w, a)| {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    a * (-d2 / (2.0 * w * w)).exp()
                })
                .sum();
            out[y * s + x] = v.clamp(0.0, 1.0);
        }
    }
    count as u32
}

fn stripe_image(spec: &ModalitySpec, rng: &mut ChaCha8Rng, out: &mut [f32]) -> (u32, usize) {
    let s = spec.resolution;
    let f = rng.random_range(spec.stripe_freq[0]..=spec.stripe_freq[1]);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, sn) = (theta.cos(), theta.sin());
    let k = std::f64::consts::TAU * f as f64 / s as f64;
    for y in 0..s {
        for x in 0..s {
            let t = k * (x as f64 * c + y as f64 * sn) + phase;
            out[y * s + x] = (0.5 + 0.5 * t.cos()) as f32;
        }
    }
    let bucket = ((theta / (std::f64::consts::PI / 4.0)) as u32).min(3);
    (bucket, f)
}

fn checker_image(spec: &ModalitySpec, rng: &mut ChaCha8Rng, out: &mut [f32]) -> u32 {
    let s = spec.resolution;
    let ci = rng.random_range(0..spec.checker_cells.len());
    let cell = spec.checker_cells[ci];
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let flip = rng.random_bool(0.5) as usize;
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).expect("validated noise");
    for y in 0..s {
        for x in 0..s {
            let parity = ((y + oy) / cell + (x + ox) / cell + flip) % 2;
            let base = if parity == 0 { 0.25 } else { 0.75 };
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            out[y * s + x] = (base + n).clamp(0.0, 1.0);
        }
    }
    ci as u32
}

/// Samples `n` images; channels beyond the first repeat the first.
pub fn make_modality(spec: &ModalitySpec, n: usize) -> Result<ToyDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    let (s, c) = (spec.resolution, spec.channels);
    let plane = s * s;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, spec.kind.name(), 0));
    let mut data = vec![0.0f32; n * c * plane];
    let mut labels = Vec::with_capacity(n);
    let mut buf = vec![0.0f32; plane];
    for i in 0..n {
        let label = match spec.kind {
            ModalityKind::Blobs => blob_image(spec, &mut rng, &mut buf),
            ModalityKind::Stripes => stripe_image(spec, &mut rng, &mut buf).0,
            ModalityKind::CheckerNoise => checker_image(spec, &mut rng, &mut buf),
        };
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            data[off..off + plane].copy_from_slice(&buf);
        }
        labels.push(label);
    }
    Ok(ToyDataset {
        kind: spec.kind,
        images: Tensor::new(vec![n, c, s, s], data)?,
        labels,
    })
}

/// Stripe images together with their integer frequencies.
pub fn make_stripes_with_freq(spec: &ModalitySpec, n: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    spec.validate()?;
    let s = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "stripes-freq", 0));
    let mut data = vec![0.0f32; n * s * s];
    let mut freqs = Vec::with_capacity(n);
    for i in 0..n {
        let (_, f) = stripe_image(spec, &mut rng, &mut data[i * s * s..(i + 1) * s * s]);
        freqs.push(f);
    }
    Ok((Tensor::new(vec![n, 1, s, s], data)?, freqs))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Random disjoint split with `round(ratio * n)` training indices.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let k = (ratio * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::Invalid(format!(
            "split of {n} samples at ratio {ratio} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0)));
    let heldout = idx.split_off(k);
    Ok(Split { train: idx, heldout })
}

/// Quantizes `[0, 1]` to 8 bits with round-half-up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Writes one `[C, H, W]` image as binary PGM (C = 1) or PPM (C = 3).
pub fn write_preview(path: &Path, image: &[f32], channels: usize, size: usize) -> Result<()> {
    let plane = size * size;
    let (magic, c) = match channels {
        3 => ("P6", 3),
        _ => ("P5", 1),
    };
    let mut out = format!("{magic}\n{size} {size}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(image[ch * plane + p]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
