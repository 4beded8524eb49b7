//! DEGAA: domain-embedding based graph attentional aggregation for open-set
//! domain adaptation with several labelled source domains and several
//! unlabelled target domains.
//!
//! The pipeline has four stages:
//!
//! 1. [`embed`]: train an embedding network episodically over domains and
//!    freeze one kernel mean embedding per domain.
//! 2. [`backbone`]: supervised warm-up of the feature extractor on source
//!    data conditioned on the domain embedding, then per-class centroids.
//! 3. [`openset`]: Local Outlier Factor splits target features into known
//!    and unknown; known ones get nearest-centroid pseudo-labels.
//! 4. [`adapt`]: joint training through the [`gaa`] attention stack with
//!    periodic pseudo-label refresh, and OS / OS* evaluation.
//!
//! [`data`] generates synthetic multi-domain benchmarks and [`pipeline`]
//! wires the stages to disk artifacts and ablation studies.

pub mod adapt;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod gaa;
pub mod numcore;
pub mod openset;
pub mod pipeline;

pub use error::{Error, Result};
