//! Half-selective masked low-rank adapters over frozen, quantized base
//! weights, with a desk-scale trainer, analytic cost model and reporting.
//!
//! The pieces:
//!
//! - [`tensor`]: dense f64 matrices and the seeded counter-based RNG
//! - [`selection`]: binary masks marking the trainable half of each factor
//! - [`quant`]: block-wise 4-bit quantization of the frozen base weights
//! - [`adapter`]: masked low-rank factor pairs and adapted layers
//! - [`train`]: reverse-mode gradients, masked AdamW, activation ledger
//! - [`costmodel`]: parameter and memory accounting for FT / LoRA / LoRA-SP
//! - [`runner`]: synthetic tasks, method comparisons, report emission

pub mod adapter;
pub mod costmodel;
pub mod error;
pub mod quant;
pub mod rng;
pub mod runner;
pub mod selection;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::{RngState, RNG_ALGORITHM};
pub use tensor::Matrix;
