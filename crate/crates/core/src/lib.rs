//! Weakly supervised segmentation of image patches from image-level labels.
//!
//! The pipeline has three phases:
//!
//! 1. A small patch classifier trained with attention dropout and an
//!    explicit high-frequency prompt channel yields class activation maps,
//!    which are post-processed into binary initial masks ([`cam`], [`postproc`]).
//! 2. A promptable segmenter (frozen encoder, trainable mask decoder) is
//!    fine-tuned on the initial masks, prompted with points sampled from the
//!    normalized activation map ([`pepm`], [`segmenter`]).
//! 3. Segmenter masks that agree with the initial masks are kept as pseudo
//!    labels and the re-initialized decoder is retrained on them for a fixed
//!    number of rounds ([`selftrain`]).
//!
//! [`syndata`] provides deterministic synthetic patches with exact masks and
//! [`pipeline`] wires every stage together behind the `epsam` CLI.

pub mod cam;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod nn;
pub mod pepm;
pub mod pipeline;
pub mod postproc;
pub mod report;
pub mod segmenter;
pub mod selftrain;
pub mod syndata;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Patch, PatchLabel};
