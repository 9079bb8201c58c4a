//! Lipschitz-certified amplitude modifiers (LipsAM) for complex spectrograms.
//!
//! The crate is organised bottom-up:
//!
//! - [`signal`]: time-domain signals, a Parseval-tight circular STFT, FFT
//!   circulant operators and audio metrics.
//! - [`network`]: small 1-D/2-D convolutional amplitude maps with manual
//!   backpropagation, Adam and spectral-norm certificates.
//! - [`modifier`]: the AM-SE / AM-RE / LipsAM-SE / LipsAM-RE wrappers.
//! - [`lipschitz`]: Jacobians, operator norms, adversarial search for the
//!   worst-case Jacobian norm and the analytic counterexamples.
//! - [`pnp`]: the Plug-and-Play ADMM dereverberation solver.
//! - [`trainer`]: synthetic corpus, Gaussian-denoising training and evaluation.

pub mod error;
pub mod lipschitz;
pub mod modifier;
pub mod network;
pub mod pnp;
pub mod rng;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
pub use num_complex::Complex64;
