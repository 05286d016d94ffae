//! Gait detection and recognition toolkit for binary silhouette sequences.
//!
//! The pipeline runs in stages: [`synth`] produces procedural walker corpora,
//! [`silio`] handles silhouette/RGB storage and chip normalization, [`dhs`]
//! turns normalized sequences into double-helical signature images, the
//! [`detector`] localizes usable full-body gait intervals on those images,
//! [`gar`] learns identity embeddings from the surviving clips, and
//! [`evalkit`] scores the result. Everything numeric sits on the small
//! reverse-mode [`tensor`] engine; every stage is deterministic for a fixed
//! seed.

pub mod detector;
pub mod dhs;
pub mod evalkit;
pub mod gar;
pub mod silio;
pub mod synth;
pub mod tensor;
