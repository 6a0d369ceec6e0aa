//! Proactive tamper detection for images: a set of learned noise templates is
//! added to real images before release, and a shallow encoder recovers the
//! template later. Genuine encrypted images score high cosine similarity
//! against the template set; images that passed through a manipulation model
//! lose the template and score low.
//!
//! The crate is organised around a small define-by-run autodiff graph
//! ([`autograd`]) that every differentiable kernel (convolution, batch norm,
//! resampling, spectral energy) plugs into. Training ([`training`]), scoring
//! ([`detection`]) and the ablation studies are deterministic given a seed.

pub mod augment;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod detection;
pub mod error;
pub mod fourier;
pub mod losses;
pub mod manipulate;
pub mod metrics;
pub mod networks;
pub mod oracle;
pub mod par;
pub mod plane;
pub mod real;
pub mod rng;
pub mod template;
pub mod training;

pub use error::Error;
pub use real::Real;

/// Side length of the working resolution. Images and templates are square.
pub const SIDE: usize = 128;

/// Channels of a working image.
pub const CHANNELS: usize = 3;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
