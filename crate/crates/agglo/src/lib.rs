//! # agglo
//!
//! The non-neural machinery of a multi-teacher distillation recipe:
//! token-balanced batching, correctly normalized multi-teacher losses with an
//! asymmetric relational term, isotropic teacher-feature standardization,
//! hierarchical data curation with balanced sampling, entropy-weighted
//! head-ensemble evaluation, linear-CKA specialization analysis, and
//! normalized rotary coordinates.
//!
//! Models and training loops live elsewhere; everything here operates on
//! dense f32 feature matrices ingested from files or built in memory, with
//! f64 accumulation and deterministic, seedable execution throughout.
//!
//! ## Modules
//!
//! - [`packer`] — pack variable-resolution images into token-budgeted
//!   sequences, segment masks, rank balancing, multi-resolution blends.
//! - [`loss`] — per-image and global distillation losses, the relational
//!   (ARKD) loss and its analytic student gradient.
//! - [`phis`] — fit/apply/invert the rotation+scale standardization, Hadamard
//!   constructions, multimodality diagnostic.
//! - [`curation`] — seeded k-means, centroid hierarchies, assignment,
//!   balanced hierarchical sampling.
//! - [`evalkit`] — kNN posteriors, retrieval scores, entropy-weighted
//!   ensembling, top-1 / Recall@1.
//! - [`analysis`] — centered cross-covariance, linear CKA, expert-vs-teacher
//!   alignment matrices.
//! - [`rope`] — aspect-normalized coordinate grids and golden-angle rotary
//!   phases.
//! - [`io`] — the `.emb` binary format, manifests, transform and report
//!   files.
//! - [`cli`] — the `agglo` binary's subcommands over those file formats.
//!
//! ## Examples
//!
//! Each major capability has a runnable example:
//!
//! ```bash
//! cargo run --example pack_images
//! cargo run --example distill_losses
//! cargo run --example standardize_features
//! cargo run --example curate_corpus
//! cargo run --example ensemble_eval
//! cargo run --example expert_alignment
//! cargo run --example rope_grids
//! cargo run --example pipeline
//! ```
//!
//! The same functionality is scriptable through the `agglo` binary; see the
//! README for the subcommand reference.

pub mod analysis;
pub mod cli;
pub mod curation;
pub mod evalkit;
pub mod io;
pub mod loss;
pub mod numeric;
pub mod packer;
pub mod phis;
pub mod rope;
pub mod types;

pub use types::{EmbeddingMatrix, ImageTokenRecord, TeacherConfig};
