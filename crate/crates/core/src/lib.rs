//! Multi-mapping image-to-image translation at desk scale.
//!
//! Images are factored into a spatial content code, a low-dimensional style
//! code with a Gaussian prior, and a domain label. A single conditional
//! generator maps the factors back to pixels, trained against a content-space
//! critic and a multi-scale image critic along two paths: a disentanglement
//! (reconstruction) path and a random cross-domain translation path.
//!
//! The crate ships its own small reverse-mode autodiff engine, the five
//! networks, the training loop, a procedural synthetic benchmark with an
//! analytic oracle, and evaluation metrics.

pub mod autodiff;
pub mod error;
pub mod latent;
pub mod data;
pub mod nets;
pub mod norm;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
