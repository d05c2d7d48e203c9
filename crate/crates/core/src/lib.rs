//! Low-dose 2-D PET reconstruction with diffusion priors.
//!
//! The crate bundles a ray-driven projector, a procedural brain phantom,
//! classical MLEM / MAPEM baselines, a small conditional score network with
//! LoRA adapters, and two diffusion-based reconstructors: a posterior sampler
//! guided by an expectation-maximization likelihood gradient (DPS) and a
//! deep-image-prior variant that fine-tunes the network during sampling
//! (DDIP).

pub mod classical;
pub mod ddip_recon;
pub mod diffusion;
pub mod dps_recon;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod score;

pub use error::{Error, Result};
