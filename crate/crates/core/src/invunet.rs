//! InvUNet: a dual-stream generator. The latent is projected into the
//! bottleneck, a memory-cache branch upsamples it into multi-scale priors,
//! and an inversion branch consumes each prior through a skip connection.

use diffcore::{Graph, NormKind, Real, Tensor, Upsample, Var};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenNorm {
    Batch,
    Instance,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorNorm {
    Layer,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Gelu,
    Relu,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub bottleneck_size: usize,
    /// Decoder channels from the output stage down to the bottleneck; the
    /// last entry is the bottleneck width.
    pub channels: Vec<usize>,
    pub output_size: usize,
    pub output_channels: usize,
    pub upsample: UpsampleMode,
    pub norm: GenNorm,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub projector_norm: ProjectorNorm,
    pub projector_activation: Activation,
    /// Disabling the memory-cache branch leaves a plain bottom-to-top decoder.
    pub memory_cache: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            bottleneck_size: 4,
            channels: vec![16, 32, 64, 128],
            output_size: 32,
            output_channels: 1,
            upsample: UpsampleMode::Bilinear,
            norm: GenNorm::Batch,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.2,
            projector_norm: ProjectorNorm::Layer,
            projector_activation: Activation::Gelu,
            memory_cache: true,
        }
    }
}

impl GeneratorConfig {
    /// The full-size 2D layout: 14x14x256 bottleneck up to 224x224x3.
    pub fn paper_2d() -> Self {
        Self {
            latent_dim: 128,
            bottleneck_size: 14,
            channels: vec![16, 32, 64, 128, 256],
            output_size: 224,
            output_channels: 3,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return bad("channels need at least two positive entries".into());
        }
        if self.latent_dim == 0 || self.bottleneck_size == 0 || self.output_channels == 0 {
            return bad("latent_dim, bottleneck_size and output_channels must be positive".into());
        }
        let want = self.bottleneck_size << self.stages();
        if want != self.output_size {
            return bad(format!(
                "output size {} is not bottleneck {} x 2^{}",
                self.output_size,
                self.bottleneck_size,
                self.stages()
            ));
        }
        if !(self.leaky_slope >= 0.0) {
            return bad("leaky_slope must be non-negative".into());
        }
        Ok(())
    }
}

struct ConvNorm {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

struct UpBlock {
    first: ConvNorm,
    second: ConvNorm,
}

struct Layout {
    proj_w: ParamId,
    proj_b: ParamId,
    proj_g: ParamId,
    proj_beta: ParamId,
    cache: Vec<UpBlock>,
    inversion: Vec<UpBlock>,
    out_w: ParamId,
    out_b: ParamId,
}

pub struct InvUNet<T> {
    config: GeneratorConfig,
    params: ParamSet<T>,
    layout: Layout,
}

impl<T: Real> Clone for InvUNet<T> {
    fn clone(&self) -> Self {
        let mut g = Self::init(self.config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        g.params = self.params.clone();
        g
    }
}

/// Graph outputs of one generator pass.
pub struct GeneratorOutput {
    pub images: Var,
    /// Memory-cache outputs per stage, coarse to fine (empty when disabled).
    pub priors: Vec<Var>,
}

fn conv_norm<T: Real>(
    p: &mut ParamSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> ConvNorm {
    ConvNorm {
        w: p.push_uniform(format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng),
        b: p.push_uniform(format!("{name}.b"), &[cout], cin * 9, rng),
        gamma: p.push_const(format!("{name}.gamma"), &[cout], 1.0),
        beta: p.push_const(format!("{name}.beta"), &[cout], 0.0),
    }
}

fn up_block<T: Real>(
    p: &mut ParamSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> UpBlock {
    UpBlock {
        first: conv_norm(p, &format!("{name}.conv1"), cin, cout, rng),
        second: conv_norm(p, &format!("{name}.conv2"), cout, cout, rng),
    }
}

impl<T: Real> InvUNet<T> {
    /// Fresh generator with fan-in scaled uniform weights.
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::init(config, rng))
    }

    fn init(config: GeneratorConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let s = config.stages();
        let ch = &config.channels;
        let bott = config.bottleneck_size * config.bottleneck_size * ch[s];
        let proj_w = p.push_uniform("proj.w", &[config.latent_dim, bott], config.latent_dim, rng);
        let proj_b = p.push_uniform("proj.b", &[bott], config.latent_dim, rng);
        let proj_g = p.push_const("proj.gamma", &[bott], 1.0);
        let proj_beta = p.push_const("proj.beta", &[bott], 0.0);
        // stage i maps channels[s - i] to channels[s - i - 1]
        let mut cache = Vec::new();
        if config.memory_cache {
            for i in 0..s {
                let (cin, cout) = (ch[s - i], ch[s - i - 1]);
                cache.push(up_block(&mut p, &format!("cache{i}"), cin, cout, rng));
            }
        }
        let mut inversion = Vec::new();
        for i in 0..s {
            let (cin, cout) = (ch[s - i], ch[s - i - 1]);
            let skip = if config.memory_cache { cout } else { 0 };
            inversion.push(up_block(&mut p, &format!("inv{i}"), cin + skip, cout, rng));
        }
        let out_w = p.push_uniform("out.w", &[config.output_channels, ch[0], 3, 3], ch[0] * 9, rng);
        let out_b = p.push_uniform("out.b", &[config.output_channels], ch[0] * 9, rng);
        Self {
            config,
            params: p,
            layout: Layout {
                proj_w,
                proj_b,
                proj_g,
                proj_beta,
                cache,
                inversion,
                out_w,
                out_b,
            },
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> InvUNet<U> {
        let mut g = InvUNet::<U>::init(self.config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        g.params = self.params.cast();
        g
    }

    /// Replaces every parameter with a fresh draw from `rng`.
    pub fn reinit(&mut self, rng: &mut impl Rng) {
        *self = Self::init(self.config.clone(), rng);
    }

    fn act(&self, g: &mut Graph<T>, x: Var, a: Activation) -> Var {
        match a {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, self.config.leaky_slope),
        }
    }

    fn conv_norm_act(&self, g: &mut Graph<T>, bind: &Binding, c: &ConvNorm, x: Var) -> Result<Var> {
        let y = g.conv2d(x, bind.get(c.w), Some(bind.get(c.b)), 1)?;
        let y = match self.config.norm {
            GenNorm::Batch => g.channel_norm(NormKind::Batch, y, bind.get(c.gamma), bind.get(c.beta), NORM_EPS)?,
            GenNorm::Instance => {
                g.channel_norm(NormKind::Instance, y, bind.get(c.gamma), bind.get(c.beta), NORM_EPS)?
            }
            GenNorm::None => y,
        };
        Ok(self.act(g, y, self.config.activation))
    }

    fn up(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mode = match self.config.upsample {
            UpsampleMode::Nearest => Upsample::Nearest,
            UpsampleMode::Bilinear => Upsample::Bilinear,
        };
        Ok(g.upsample2x(x, mode)?)
    }

    fn block(&self, g: &mut Graph<T>, bind: &Binding, b: &UpBlock, x: Var) -> Result<Var> {
        let y = self.conv_norm_act(g, bind, &b.first, x)?;
        self.conv_norm_act(g, bind, &b.second, y)
    }

    /// `G(z)`: `[B, latent]` to `[B, C, H, W]` images in `(0, 1)`.
    pub fn generate(&self, g: &mut Graph<T>, bind: &Binding, z: Var) -> Result<GeneratorOutput> {
        let cfg = &self.config;
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != cfg.latent_dim {
            return Err(diffcore::Error::Shape {
                op: "generate",
                lhs: zs,
                rhs: vec![0, cfg.latent_dim],
            }
            .into());
        }
        let b = zs[0];
        if b == 0 || (b == 1 && cfg.norm == GenNorm::Batch) {
            return Err(Error::Invalid(format!(
                "generator batch of {b} with batch normalization needs at least 2 samples"
            )));
        }
        let lay = &self.layout;
        let s = cfg.stages();
        let h = g.matmul(z, bind.get(lay.proj_w))?;
        let h = g.add_trailing(h, bind.get(lay.proj_b))?;
        let h = match cfg.projector_norm {
            ProjectorNorm::Layer => g.layer_norm(h, bind.get(lay.proj_g), bind.get(lay.proj_beta), NORM_EPS)?,
            ProjectorNorm::None => h,
        };
        let h = self.act(g, h, cfg.projector_activation);
        let bottleneck = g.reshape(h, &[b, cfg.channels[s], cfg.bottleneck_size, cfg.bottleneck_size])?;

        let mut priors = Vec::with_capacity(lay.cache.len());
        let mut m = bottleneck;
        for blk in &lay.cache {
            let u = self.up(g, m)?;
            m = self.block(g, bind, blk, u)?;
            priors.push(m);
        }
        let mut x = bottleneck;
        for (i, blk) in lay.inversion.iter().enumerate() {
            let u = self.up(g, x)?;
            let input = match priors.get(i) {
                Some(&p) => g.concat(&[u, p], 1)?,
                None => u,
            };
            x = self.block(g, bind, blk, input)?;
        }
        let y = g.conv2d(x, bind.get(lay.out_w), Some(bind.get(lay.out_b)), 1)?;
        Ok(GeneratorOutput {
            images: g.sigmoid(y),
            priors,
        })
    }
}

/// Standard-normal latents `[batch, dim]`.
pub fn sample_latents<T: Real>(batch: usize, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    let data = (0..batch * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect();
    Tensor::new(vec![batch, dim], data).expect("shape")
}
