//! Masked-image-modeling transformer.
//!
//! Masked patches are zeroed in pixel space and the whole image goes through
//! the encoder; the loss is the squared reconstruction error over masked
//! pixels only. Every transformer block output is exposed as a tap for
//! feature statistics.

use diffcore::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};
use crate::util::fnv1a;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("depth, channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Token count `L`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.image_size, self.image_size]
    }

    /// Architecture identity; statistics are only valid for a model with the
    /// same fingerprint.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "mim:img={};c={};p={};d={};depth={};heads={};mlp={}",
            self.image_size, self.channels, self.patch, self.dim, self.depth, self.heads, self.mlp_ratio
        );
        format!("{:016x}", fnv1a(canon.as_bytes()))
    }
}

/// Binary patch mask; `true` marks a masked patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub ratio: f32,
    pub bits: Vec<bool>,
}

impl PatchMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Masks exactly `floor(ratio * rows * cols)` patches chosen uniformly
/// without replacement.
pub fn sample_mask(grid: (usize, usize), ratio: f32, rng: &mut impl Rng) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let total = grid.0 * grid.1;
    let k = ((ratio as f64) * total as f64).floor() as usize;
    let mut bits = vec![false; total];
    for i in rand::seq::index::sample(rng, total, k.min(total)) {
        bits[i] = true;
    }
    Ok(PatchMask {
        rows: grid.0,
        cols: grid.1,
        ratio,
        bits,
    })
}

pub fn sample_masks(
    cfg: &EncoderConfig,
    batch: usize,
    ratio: f32,
    rng: &mut impl Rng,
) -> Result<Vec<PatchMask>> {
    (0..batch)
        .map(|_| sample_mask((cfg.grid(), cfg.grid()), ratio, rng))
        .collect()
}

/// Per-pixel mask `[B, C, H, W]` with 1 on masked patches.
pub fn mask_pixels<T: Real>(cfg: &EncoderConfig, masks: &[PatchMask]) -> Result<Tensor<T>> {
    let (s, p, g) = (cfg.image_size, cfg.patch, cfg.grid());
    let mut out = Vec::with_capacity(masks.len() * cfg.channels * s * s);
    for m in masks {
        if m.rows != g || m.cols != g {
            return Err(Error::Invalid(format!(
                "mask grid {}x{} does not match patch grid {g}x{g}",
                m.rows, m.cols
            )));
        }
        for _ in 0..cfg.channels {
            for y in 0..s {
                for x in 0..s {
                    out.push(if m.bits[(y / p) * g + x / p] { T::one() } else { T::zero() });
                }
            }
        }
    }
    Ok(Tensor::new(cfg.image_shape(masks.len()).to_vec(), out)?)
}

struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// The encoder/decoder `f_t`.
pub struct MimModel<T> {
    config: EncoderConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Real> Clone for MimModel<T> {
    fn clone(&self) -> Self {
        let mut m = Self::skeleton(self.config.clone());
        m.params = self.params.clone();
        m
    }
}

/// Graph handles produced by one encoder forward pass.
pub struct EncoderOutput {
    /// `[B, C, H, W]` pixel reconstruction.
    pub reconstruction: Var,
    /// One `[B, L, d]` residual-stream tensor per block.
    pub blocks: Vec<Var>,
}

pub struct MimOutput {
    pub reconstruction: Var,
    /// Squared error over masked pixels divided by the masked pixel count.
    pub loss: Var,
    /// Unnormalized squared error over masked pixels.
    pub sse: Var,
    pub masked_pixels: usize,
}

impl<T: Real> MimModel<T> {
    /// Builds the parameter layout, initialized deterministically from `rng`.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::init(config, rng))
    }

    fn skeleton(config: EncoderConfig) -> Self {
        // layout-only construction; parameter values are overwritten
        Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
    }

    fn init(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let pd = config.patch_dim();
        let mut p = ParamSet::new();
        let patch_w = p.push_uniform("patch.w", &[pd, d], pd, rng);
        let patch_b = p.push_const("patch.b", &[d], 0.0);
        let pos = p.push_normal("pos", &[config.tokens(), d], 0.02, rng);
        let blocks = (0..config.depth)
            .map(|i| BlockIds {
                ln1_g: p.push_const(format!("block{i}.ln1.g"), &[d], 1.0),
                ln1_b: p.push_const(format!("block{i}.ln1.b"), &[d], 0.0),
                qkv_w: p.push_uniform(format!("block{i}.qkv.w"), &[d, 3 * d], d, rng),
                qkv_b: p.push_const(format!("block{i}.qkv.b"), &[3 * d], 0.0),
                proj_w: p.push_uniform(format!("block{i}.proj.w"), &[d, d], d, rng),
                proj_b: p.push_const(format!("block{i}.proj.b"), &[d], 0.0),
                ln2_g: p.push_const(format!("block{i}.ln2.g"), &[d], 1.0),
                ln2_b: p.push_const(format!("block{i}.ln2.b"), &[d], 0.0),
                fc1_w: p.push_uniform(format!("block{i}.fc1.w"), &[d, hidden], d, rng),
                fc1_b: p.push_const(format!("block{i}.fc1.b"), &[hidden], 0.0),
                fc2_w: p.push_uniform(format!("block{i}.fc2.w"), &[hidden, d], hidden, rng),
                fc2_b: p.push_const(format!("block{i}.fc2.b"), &[d], 0.0),
            })
            .collect();
        let norm_g = p.push_const("norm.g", &[d], 1.0);
        let norm_b = p.push_const("norm.b", &[d], 0.0);
        let head_w = p.push_uniform("head.w", &[d, pd], d, rng);
        let head_b = p.push_const("head.b", &[pd], 0.0);
        Self {
            config,
            params: p,
            layout: Layout {
                patch_w,
                patch_b,
                pos,
                blocks,
                norm_g,
                norm_b,
                head_w,
                head_b,
            },
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn cast<U: Real>(&self) -> MimModel<U> {
        let mut m = MimModel::<U>::skeleton(self.config.clone());
        m.params = self.params.cast();
        m
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.config.image_shape(shape.first().copied().unwrap_or(0));
        if shape != want || shape[0] == 0 {
            return Err(diffcore::Error::Shape {
                op: "encoder input",
                lhs: shape.to_vec(),
                rhs: want.to_vec(),
            }
            .into());
        }
        Ok(())
    }

    fn patchify(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let (b, gr, p) = (g.shape(x)[0], c.grid(), c.patch);
        let v = g.reshape(x, &[b, c.channels, gr, p, gr, p])?;
        let v = g.permute(v, &[0, 2, 4, 1, 3, 5])?;
        Ok(g.reshape(v, &[b, c.tokens(), c.patch_dim()])?)
    }

    fn unpatchify(&self, g: &mut Graph<T>, t: Var) -> Result<Var> {
        let c = &self.config;
        let (b, gr, p) = (g.shape(t)[0], c.grid(), c.patch);
        let v = g.reshape(t, &[b, gr, gr, c.channels, p, p])?;
        let v = g.permute(v, &[0, 3, 1, 4, 2, 5])?;
        Ok(g.reshape(v, &[b, c.channels, c.image_size, c.image_size])?)
    }

    fn linear(g: &mut Graph<T>, bind: &Binding, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = g.matmul(x, bind.get(w))?;
        Ok(g.add_trailing(y, bind.get(b))?)
    }

    fn block(&self, g: &mut Graph<T>, bind: &Binding, ids: &BlockIds, x: Var) -> Result<Var> {
        let c = &self.config;
        let (b, l, d, h) = (g.shape(x)[0], c.tokens(), c.dim, c.heads);
        let dh = d / h;
        let n1 = g.layer_norm(x, bind.get(ids.ln1_g), bind.get(ids.ln1_b), LN_EPS)?;
        let qkv = Self::linear(g, bind, n1, ids.qkv_w, ids.qkv_b)?;
        let qkv = g.reshape(qkv, &[b, l, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut heads = [qkv; 3];
        for (i, slot) in heads.iter_mut().enumerate() {
            let s = g.narrow(qkv, 0, i, 1)?;
            *slot = g.reshape(s, &[b * h, l, dh])?;
        }
        let [q, k, v] = heads;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores)?;
        let ctx = g.bmm(att, v)?;
        let ctx = g.reshape(ctx, &[b, h, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        let attn = Self::linear(g, bind, ctx, ids.proj_w, ids.proj_b)?;
        let x = g.add(x, attn)?;
        let n2 = g.layer_norm(x, bind.get(ids.ln2_g), bind.get(ids.ln2_b), LN_EPS)?;
        let hdn = Self::linear(g, bind, n2, ids.fc1_w, ids.fc1_b)?;
        let hdn = g.gelu(hdn);
        let mlp = Self::linear(g, bind, hdn, ids.fc2_w, ids.fc2_b)?;
        Ok(g.add(x, mlp)?)
    }

    /// Full forward: patch embedding, blocks, reconstruction head.
    pub fn forward(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<EncoderOutput> {
        let blocks = self.forward_blocks(g, bind, x)?;
        let lay = &self.layout;
        let last = *blocks.last().expect("depth >= 1");
        let n = g.layer_norm(last, bind.get(lay.norm_g), bind.get(lay.norm_b), LN_EPS)?;
        let tok = Self::linear(g, bind, n, lay.head_w, lay.head_b)?;
        let reconstruction = self.unpatchify(g, tok)?;
        Ok(EncoderOutput {
            reconstruction,
            blocks,
        })
    }

    /// Forward through the transformer blocks only (no head).
    pub fn forward_blocks(&self, g: &mut Graph<T>, bind: &Binding, x: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(x))?;
        let lay = &self.layout;
        let tokens = self.patchify(g, x)?;
        let emb = Self::linear(g, bind, tokens, lay.patch_w, lay.patch_b)?;
        let mut h = g.add_trailing(emb, bind.get(lay.pos))?;
        let mut taps = Vec::with_capacity(lay.blocks.len());
        for ids in &lay.blocks {
            h = self.block(g, bind, ids, h)?;
            taps.push(h);
        }
        Ok(taps)
    }

    pub fn write_to(&self, bundle: &mut Bundle) -> Result<()> {
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        bundle.insert_text("meta.kind", "mim-encoder")?;
        bundle.insert_text("meta.config", &cfg)?;
        bundle.insert_text("meta.fingerprint", &self.fingerprint())?;
        self.params.write_to(bundle, "enc.")
    }

    pub fn read_from(bundle: &Bundle) -> Result<Self> {
        let cfg: EncoderConfig = toml::from_str(&bundle.text("meta.config")?)
            .map_err(|e| Error::Format(format!("encoder config record: {e}")))?;
        cfg.validate()?;
        let mut m = Self::skeleton(cfg);
        m.params.read_from(bundle, "enc.")?;
        Ok(m)
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        self.write_to(&mut b)?;
        Ok(b)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        self.to_bundle()?.write(path)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&Bundle::read(path)?)
    }
}

/// Squared error between `recon` and `target` over pixels where `mask` is 1.
pub fn masked_mse<T: Real>(
    g: &mut Graph<T>,
    recon: Var,
    target: Var,
    mask: Var,
    masked_pixels: usize,
) -> Result<(Var, Var)> {
    let diff = g.sub(recon, target)?;
    let diff = g.mul(diff, mask)?;
    let sq = g.square(diff);
    let sse = g.sum(sq);
    let loss = g.scale(sse, 1.0 / masked_pixels.max(1) as f64);
    Ok((loss, sse))
}

/// Masked-image-modeling loss: `|| (f(x * (1-M)) - x) * M ||^2` over masked pixels.
pub fn mim_forward<T: Real>(
    g: &mut Graph<T>,
    model: &MimModel<T>,
    bind: &Binding,
    x: Var,
    masks: &[PatchMask],
) -> Result<MimOutput> {
    let cfg = model.config();
    model.check_input(g.shape(x))?;
    if masks.len() != g.shape(x)[0] {
        return Err(Error::Invalid(format!(
            "{} masks for a batch of {}",
            masks.len(),
            g.shape(x)[0]
        )));
    }
    if let Some(i) = masks.iter().position(|m| m.ratio > 0.0 && m.count() == 0) {
        return Err(Error::Invalid(format!(
            "mask {i} requests ratio {} but masks no patches",
            masks[i].ratio
        )));
    }
    let pix: Tensor<T> = mask_pixels(cfg, masks)?;
    let keep = Tensor::new(
        pix.shape().to_vec(),
        pix.data().iter().map(|&m| T::one() - m).collect(),
    )?;
    let masked_pixels = masks.iter().map(|m| m.count()).sum::<usize>() * cfg.patch * cfg.patch * cfg.channels;
    let mask = g.constant(pix);
    let keep = g.constant(keep);
    let input = g.mul(x, keep)?;
    let out = model.forward(g, bind, input)?;
    let (loss, sse) = masked_mse(g, out.reconstruction, x, mask, masked_pixels)?;
    Ok(MimOutput {
        reconstruction: out.reconstruction,
        loss,
        sse,
        masked_pixels,
    })
}

const EVAL_CHUNK: usize = 64;

/// Evaluation-mode block outputs, one `[B, L, d]` tensor per block.
pub fn block_features<T: Real>(model: &MimModel<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    model.check_input(x.shape())?;
    let n = x.shape()[0];
    let mut parts: Vec<Vec<Tensor<T>>> = vec![Vec::new(); model.config.depth];
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = x.slice_rows(start, EVAL_CHUNK.min(n - start))?;
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g, false);
        let xv = g.constant(chunk);
        let taps = model.forward_blocks(&mut g, &bind, xv)?;
        for (p, t) in parts.iter_mut().zip(taps) {
            p.push(g.value(t).clone());
        }
    }
    parts
        .iter()
        .map(|p| Ok(Tensor::stack_rows(&p.iter().collect::<Vec<_>>())?))
        .collect()
}

/// Token-averaged final-block features `[B, d]` of a graph batch.
pub fn embed_var<T: Real>(g: &mut Graph<T>, blocks: &[Var]) -> Result<Var> {
    let last = *blocks
        .last()
        .ok_or_else(|| Error::Invalid("no block outputs".into()))?;
    Ok(g.mean_axis(last, 1)?)
}

/// Token-averaged final-block features `[B, d]`.
pub fn embed<T: Real>(model: &MimModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    model.check_input(x.shape())?;
    let n = x.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let chunk = x.slice_rows(start, EVAL_CHUNK.min(n - start))?;
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g, false);
        let xv = g.constant(chunk);
        let taps = model.forward_blocks(&mut g, &bind, xv)?;
        let e = embed_var(&mut g, &taps)?;
        parts.push(g.value(e).clone());
    }
    Ok(Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())?)
}

/// Mean masked-MIM loss over a dataset with caller-provided masks (one per
/// image), evaluated in chunks. Each chunk's loss is weighted by its masked
/// pixel count so the result equals the dataset-level normalized loss.
pub fn mim_loss<T: Real>(model: &MimModel<T>, x: &Tensor<T>, masks: &[PatchMask]) -> Result<f64> {
    model.check_input(x.shape())?;
    let n = x.shape()[0];
    let (mut sse, mut count) = (0.0, 0usize);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(n - start);
        let chunk = x.slice_rows(start, len)?;
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g, false);
        let xv = g.constant(chunk);
        let out = mim_forward(&mut g, model, &bind, xv, &masks[start..start + len])?;
        sse += g.scalar(out.sse);
        count += out.masked_pixels;
    }
    Ok(if count == 0 { 0.0 } else { sse / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            channels: 1,
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask((8, 8), 0.0, &mut rng).unwrap().count(), 0);
        assert_eq!(sample_mask((8, 8), 1.0, &mut rng).unwrap().count(), 64);
        assert_eq!(sample_mask((8, 8), 0.75, &mut rng).unwrap().count(), 48);
        assert_eq!(sample_mask((3, 3), 0.5, &mut rng).unwrap().count(), 4);
        assert!(sample_mask((8, 8), 1.5, &mut rng).is_err());
        assert!(sample_mask((8, 8), -0.1, &mut rng).is_err());
        assert!(sample_mask((8, 8), f32::NAN, &mut rng).is_err());
    }

    #[test]
    fn shapes_and_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig::default();
        let m = MimModel::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::full(&cfg.image_shape(2), 0.5);
        let feats = block_features(&m, &x).unwrap();
        assert_eq!(feats.len(), 4);
        assert!(feats.iter().all(|f| f.shape() == [2, 64, 64]));
        let mut g = Graph::new();
        let b = m.params().bind(&mut g, false);
        let xv = g.constant(x);
        let out = m.forward(&mut g, &b, xv).unwrap();
        assert_eq!(g.shape(out.reconstruction), &[2, 1, 32, 32]);
    }

    #[test]
    fn rejects_bad_config_and_input() {
        let mut cfg = tiny();
        cfg.image_size = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(MimModel::<f32>::new(cfg, &mut rng).is_err());
        let m = MimModel::<f32>::new(tiny(), &mut rng).unwrap();
        assert!(block_features(&m, &Tensor::zeros(&[1, 1, 8, 4])).is_err());
    }

    #[test]
    fn patchify_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = tiny();
        cfg.channels = 2;
        let m = MimModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let data: Vec<f64> = (0..2 * 2 * 64).map(|i| i as f64).collect();
        let x = Tensor::new(cfg.image_shape(2).to_vec(), data).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = m.patchify(&mut g, xv).unwrap();
        assert_eq!(g.shape(t), &[2, 4, 32]);
        // token 1 of image 0 is the top-right 4x4 block of both channels
        let tok = &g.value(t).data()[32..64];
        assert_eq!(tok[0], 4.0);
        assert_eq!(tok[16], 64.0 + 4.0);
        let back = m.unpatchify(&mut g, t).unwrap();
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn empty_mask_gives_zero_loss_and_copy_head_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let m = MimModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::full(&cfg.image_shape(2), 0.3);
        let masks = sample_masks(&cfg, 2, 0.0, &mut rng).unwrap();
        assert_eq!(mim_loss(&m, &x, &masks).unwrap(), 0.0);

        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let masks = sample_masks(&cfg, 2, 0.75, &mut rng).unwrap();
        let mk = g.constant(mask_pixels(&cfg, &masks).unwrap());
        let (loss, sse) = masked_mse(&mut g, xv, xv, mk, 24).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
        assert_eq!(g.scalar(sse), 0.0);
    }

    #[test]
    fn nonzero_ratio_without_masked_patches_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny();
        let m = MimModel::<f32>::new(cfg.clone(), &mut rng).unwrap();
        // 4 patches at ratio 0.1 floors to zero masked patches
        let masks = sample_masks(&cfg, 1, 0.1, &mut rng).unwrap();
        assert!(mim_loss(&m, &Tensor::zeros(&cfg.image_shape(1)), &masks).is_err());
    }

    #[test]
    fn model_bundle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MimModel::<f32>::new(tiny(), &mut rng).unwrap();
        let b = m.to_bundle().unwrap();
        let back = MimModel::<f32>::read_from(&Bundle::from_bytes(&b.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.fingerprint(), m.fingerprint());
        assert_eq!(back.to_bundle().unwrap().to_bytes(), b.to_bytes());
    }

    #[test]
    fn same_seed_same_params() {
        let a = MimModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = MimModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
