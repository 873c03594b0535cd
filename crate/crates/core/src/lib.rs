//! Quantized diffusion runtime for CPUs.
//!
//! A small dense tensor library with reverse-mode autodiff drives a toy
//! denoising Unet. On top of it sit quantization-aware training with
//! knowledge distillation, a sampler that switches numeric precision per
//! denoising step, and CPU kernels (GroupNorm, fused attention, INT8 GEMM)
//! tuned for the resulting inference workload.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod numerics;
pub mod optim;
pub mod qat;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
