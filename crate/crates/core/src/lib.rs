//! Stereo image deblurring with depth awareness and view aggregation.
//!
//! The crate covers the whole pipeline at desk scale: the rectified-stereo
//! blur geometry, a synthetic stereo-blur dataset generator, the network
//! (per-view deblurring encoder/decoder, bidirectional disparity network and
//! the gated fusion between them), its losses, staged training and the
//! PSNR/SSIM evaluation harness.

pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod kernels;
pub mod losses;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
