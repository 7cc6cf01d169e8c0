//! Desk-scale diffusion priors over a synthetic joint embedding space.
//!
//! The pipeline mirrors a two-stage text-to-image setup: a small causal
//! transformer prior maps text (and optionally a color histogram token) to
//! an image embedding by denoising diffusion, and an analytic toy decoder
//! inverts embeddings back to attributes and rendered patches. Everything
//! runs on an invertible synthetic stand-in for a CLIP-like space, so each
//! stage has an exact oracle.

pub mod artifacts;
pub mod cli;
pub mod colorlab;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evalx;
pub mod linalg;
pub mod prior;
pub mod sample;
pub mod synthspace;
pub mod tensorio;
pub mod train;
pub mod util;

pub use error::{Error, Result};
