//! Layout-grounded attention refocusing for a toy diffusion sampler.
//!
//! The crate implements inference-time guidance that nudges a denoiser's
//! cross- and self-attention maps toward a bounding-box layout, together
//! with everything needed to exercise the idea end to end at desk scale:
//!
//! - [`attention`]: row-stochastic attention maps, slicing, Gaussian smoothing
//! - [`layout`]: boxes, foreground/background/exclusion coordinate sets,
//!   the `label: (x1, y1, x2, y2)` text format
//! - [`loss`]: the cross-attention (CAR) and self-attention (SAR)
//!   refocusing losses
//! - [`autodiff`]: the reverse-mode tape the losses and denoiser run on
//! - [`denoiser`]: a small trainable UNet with one attention block at 16×16
//! - [`sampler`]: DDIM/DDPM loops with per-step guided latent updates
//! - [`shapes`]: the synthetic shapes world (renderer + dataset generator)
//! - [`metrics`]: an oracle detector and counting/spatial/size/color metrics
//! - [`llm`]: text-to-layout via a chat-completions endpoint or offline stub
//! - [`config`]: the single versioned run configuration

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod layout;
pub mod llm;
pub mod loss;
pub mod metrics;
pub mod sampler;
pub mod shapes;

pub mod checkpoint;
pub mod dataset_io;
pub mod denoiser;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
