//! Spatial similarity maps for pooled embedding networks.
//!
//! The cosine similarity between two pooled embeddings decomposes exactly
//! into per-cell contributions over either image's last convolutional grid.
//! This crate computes those maps for average- and max-pooled features and
//! builds on them: class-level maps, region-restricted retrieval, and heatmap
//! overlays. A seeded toy extractor stands in for a real backbone so the whole
//! pipeline runs without an ML framework.

pub mod dataset;
mod interp;
pub mod render;
pub mod retrieval;
pub mod simcore;
pub mod tensor_io;
pub mod toyextract;

pub use retrieval::{
    build_index, group_by_class, query, region_search, search, EmbeddingIndex, RankedResult,
};
pub use simcore::{
    ActivationTensor, Direction, PooledEmbedding, PoolingMode, Region, SimError, SimilarityMap,
};

/// Formats a score the way every text and JSON output does: fixed, nine
/// digits after the point.
pub fn format_score(x: f64) -> String {
    format!("{x:.9}")
}

/// The value a reader recovers from [`format_score`].
pub fn round_score(x: f64) -> f64 {
    format_score(x).parse().expect("formatted float parses")
}
