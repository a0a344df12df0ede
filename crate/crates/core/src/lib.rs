//! Core library for trajectory-matching dataset distillation.
//!
//! The pipeline synthesizes a small labeled image set whose short training
//! runs reproduce segments of parameter trajectories recorded from teachers
//! trained on the full dataset. Modules:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors and a reverse-mode
//!   autodiff engine whose backward pass is built from the same primitives,
//!   so meta-gradients through unrolled SGD are exact.
//! - [`model`]: the ConvNet family used for teachers and students.
//! - [`data`]: dataset ingestion, resizing, normalization, synthetic sets.
//! - [`augment`]: seeded differentiable image augmentation.
//! - [`trajectory`]: teacher training and trajectory files.
//! - [`distill`]: the matching loop updating pixels and the learning rate.
//! - [`eval`]: student evaluation, baselines, and the anonymization audit.
//! - [`plots`]: SVG/PNG/CSV artifacts for finished runs.

pub mod augment;
pub mod composites;
pub mod data;
pub mod distill;
pub mod elem;
pub mod envelope;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod plots;
pub mod rng;
pub mod tensor;
pub mod trajectory;

pub use elem::Elem;
pub use error::{Error, Result};
pub use graph::{Graph, NodeRef};
pub use params::{Layout, ParamVector};
pub use tensor::Tensor;
