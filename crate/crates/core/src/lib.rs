//! Material recognition from differential viewpoints, at desk scale.
//!
//! The crate implements the full stack needed to study angular-gradient
//! material cues without any external ML framework:
//!
//! - [`tensor`]: dense f32/f64 tensors with reverse-mode autodiff and a
//!   finite-difference checking harness;
//! - [`encoding`]: the differentiable texture encoding layer (soft-assignment
//!   residual encoding against learnable codewords);
//! - [`bilinear`]: bilinear (two-factor) feature combination;
//! - [`angular`]: differential-image formation, two-stream fusion and
//!   multiview combination operators;
//! - [`models`]: the architecture registry (baseline CNN, Deep-TEN and
//!   Bilinear-CNN heads, DEP, DAIN, TEAN) behind one trait;
//! - [`data`]: a synthetic ground-terrain generator with controllable
//!   spatial-vs-angular class signal, dataset ingestion, splits and
//!   augmentation;
//! - [`train`]: SGD with momentum, saturation-based LR decay, staged
//!   fine-tuning, and evaluation reports;
//! - [`checkpoint`]: a versioned binary parameter container with bit-exact
//!   round-trips;
//! - [`reference`]: independent brute-force oracles for the verification
//!   suites.

pub mod angular;
pub mod bilinear;
pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod models;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod train;
