//! Run configuration: one TOML document covering every component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::{Regime, SequenceConfig, StageConfig, TaskSpec};
use crate::data::{ModalityKind, ModalitySpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub regime: Regime,
    /// Upper bound on PGM previews written per synthesis.
    pub preview_cap: usize,
    pub encoder: EncoderConfig,
    pub stage: StageConfig,
    pub inversion: InversionConfig,
    pub tasks: Vec<TaskSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tasks = [ModalityKind::Blobs, ModalityKind::Stripes, ModalityKind::CheckerNoise]
            .into_iter()
            .enumerate()
            .map(|(i, k)| TaskSpec::new(ModalitySpec::new(k, i as u64 + 1), 2500))
            .collect();
        Self {
            seed: 0,
            regime: Regime::Invcoss,
            preview_cap: 16,
            encoder: EncoderConfig::default(),
            stage: StageConfig::default(),
            inversion: InversionConfig::default(),
            tasks,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sequence(&self) -> SequenceConfig {
        SequenceConfig {
            encoder: self.encoder.clone(),
            stage: self.stage.clone(),
            inversion: self.inversion.clone(),
            tasks: self.tasks.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.sequence().validate().map_err(as_config)?;
        let (g, e) = (&self.inversion.generator, &self.encoder);
        if g.output_size != e.image_size || g.output_channels != e.channels {
            return Err(Error::Config(format!(
                "generator output {}x{}x{} does not match encoder input {}x{}x{}",
                g.output_channels, g.output_size, g.output_size, e.channels, e.image_size, e.image_size
            )));
        }
        Ok(())
    }
}
