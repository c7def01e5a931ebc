//! Zero-shot recovery of a pixel-level depth map and an all-in-focus image
//! from a single phase-coded capture, given the optics of the imaging system.
//!
//! The pipeline optimizes an implicit generator through a differentiable
//! camera model against the captured image alone: the generator maps a fixed
//! input code to an (image, defocus-map) pair, the camera model re-renders
//! the coded capture from that pair, and the reconstruction loss drives the
//! generator parameters. The converged intermediate outputs are the result.
//!
//! Crate layout:
//! - [`tape`]: minimal reverse-mode autodiff over dense tensors
//! - [`optics`]: phase-mask pupil model, PSF synthesis, defocus/depth mapping
//! - [`camera`]: differentiable camera model + reference acquisition simulator
//! - [`generators`]: DIP-style U-Net, sine MLP, and Fourier-feature generators
//! - [`objectives`]: losses (L2, SSIM, TV) and metrics (PSNR, SSIM, depth RMSE)
//! - [`engine`]: Adam loop, loss schedule, deblur mode, checkpointing
//! - [`synth`]: layered synthetic scene generation

pub mod error;
pub mod bankio;
pub mod camera;
pub mod generators;
pub mod objectives;
pub mod optics;
pub mod fft;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Real};
pub use tensor::TensorData;
