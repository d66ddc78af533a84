//! Geometry of contrastive image/text embedding spaces.
//!
//! * [`recovery`]: image-image similarities reconstructed from image-text
//!   similarities, with or without text anchors.
//! * [`projection`]: projection of image embeddings onto the principal axes
//!   of class-name text embeddings.
//! * [`indicators`]: similarity histograms, their overlap, and the modality
//!   gap.
//! * [`tasks`]: retrieval mAP and few-shot / zero-shot classifiers.
//! * [`synthetic`]: seeded ground-truth geometries.
//! * [`io`] and [`cli`]: embedding files, label files, reports, and the
//!   `embspace` command line.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod indicators;
pub mod io;
pub mod projection;
pub mod recovery;
pub mod rng;
pub mod synthetic;
pub mod tasks;

pub use error::{Error, Result};
pub use geometry::{
    cosine_matrix, normalize_rows, EmbeddingSet, LabeledEmbeddingSet, Modality, SimilarityKind,
    SimilarityMatrix,
};
