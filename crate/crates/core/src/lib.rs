//! Masked video distillation at desk scale.
//!
//! Stage 1 pretrains an image teacher and a video teacher by masked pixel
//! reconstruction. Stage 2 trains a student from scratch to reconstruct the
//! frozen teachers' features at masked token positions, one decoder per
//! teacher. Everything runs on synthetic sprite videos on a CPU.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
