//! memlab: a desk-scale laboratory for cue-triggered memorization in tiny
//! language models.
//!
//! The crate trains small decoder-only transformers to memorize cue→content
//! records, scores recall with exact-match accuracy and a distortion
//! taxonomy, decomposes the residual stream into per-sublayer contributions,
//! and fits single-hidden-layer sigmoidal approximators as a fixed-function
//! baseline.

pub mod corpus;
pub mod eval;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod uat;
pub mod tokenizer;
