//! Conditional wavelet diffusion for paired 3D volume-to-volume translation.
//!
//! Three co-registered source volumes are transformed with a single-level 3D
//! Haar DWT, stacked along the channel axis and used to condition a denoising
//! diffusion chain that runs entirely in wavelet-coefficient space. The
//! inverse DWT of the final coefficients is the synthesized fourth volume.
//!
//! Module map:
//! - [`wavelet`]: DWT/IDWT, padding to even extents.
//! - [`schedule`]: variance schedules and posterior coefficients.
//! - [`diffusion`]: reverse transition, x0-prediction loss, training inputs.
//! - [`denoiser`]: the time-conditioned 3D U-Net with explicit backprop.
//! - [`sampler`]: conditional sampling and per-case processing.
//! - [`data`]: volume I/O, preprocessing, dataset scanning, toy data.
//! - [`metrics`]: MSE / PSNR / SSIM and report tables.
//! - [`trainer`]: Adam training loop, checkpoints, per-modality registry.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod modality;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
pub use modality::{Modality, NamingProfile};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleParams};
pub use volume::{SpatialMeta, Volume3D};
pub use wavelet::{PaddingRecord, WaveletCoefficients};
