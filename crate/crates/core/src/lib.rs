//! Near-boundary OOD image synthesis and negative-label detection.
//!
//! The pipeline turns in-distribution images into near-boundary
//! out-of-distribution samples by gradient-guided refinement of diffusion
//! noise, then uses those samples to fine-tune a contrastive detector:
//!
//! 1. mine a negative label set from a lexicon ([`mining`]),
//! 2. extract contextual prompts per image ([`prompt`]),
//! 3. inpaint and iteratively refine noise against an energy objective
//!    ([`diffusion`], [`generate`]),
//! 4. fine-tune an image-side projection ([`proj`]) and a learnable subset
//!    of negative label features ([`labelft`]),
//! 5. score datasets and report AUROC/FPR95 ([`eval`]).
//!
//! Everything runs at desk scale on a procedurally rendered image world
//! ([`world`]) with toy differentiable backends; real encoder/diffusion
//! services plug in behind the same traits.

pub mod archive;
pub mod clip;
pub mod config;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod generate;
pub mod nn;
pub mod prompt;
pub mod recognition;
pub mod scoring;
pub mod seeding;
pub mod world;

pub use archive::{read_archive, write_archive, Archive, TensorData};
pub use config::{BackendKind, RunConfig, SimMode};
pub use embedding::{EmbeddingSource, EmbeddingVector, LabelSpace};
pub use error::{Error, Result};
pub use scoring::{detect, Detection};
