//! Context-aware adversarial training for 3D cross-modality synthesis.
//!
//! A patch-based 3D fully-convolutional generator maps MR patches to CT
//! patches. It is trained against a convolutional discriminator with a
//! weighted sum of an adversarial term, an L2 reconstruction term and an
//! image gradient difference term, then refined with an auto-context
//! cascade in which each stage sees the previous stage's full-volume
//! estimate as a second input channel.
//!
//! The crate is self-contained: [`autodiff`] is a small reverse-mode engine
//! with the handful of layer primitives the two networks need, [`volume`]
//! does patch sampling, tiling and overlap-averaged reconstruction, and
//! [`phantom`] generates paired synthetic volumes to train on.
//!
//! Data-parallel inner loops (per-sample convolution, per-subject
//! inference, dataset generation) run on rayon when the `parallel` feature
//! is enabled (the default) and sequentially otherwise. Both paths produce
//! bitwise-identical results.

pub mod autocontext;
pub mod autodiff;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod selfcheck;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
