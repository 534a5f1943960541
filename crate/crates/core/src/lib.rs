//! InvCoSS at desk scale: masked-image-modeling pre-training, feature
//! statistics capture, data-free inversion through a dual-stream generator,
//! and continual training with synthetic replay.

pub mod bundle;
pub mod cli;
pub mod config;
pub mod continual;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod inversion;
pub mod invunet;
pub mod params;
pub mod stats;
pub mod training;
pub mod util;

pub use bundle::Bundle;
pub use error::{Error, Result};
