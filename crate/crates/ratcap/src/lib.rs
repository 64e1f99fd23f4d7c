//! Retrieval-augmented transformer captioner.
//!
//! Feature grids come in, captions of visually similar items are pulled from
//! an external memory via inner-product kNN search, and a gated decoder mixes
//! local context with the retrieved text while generating.

pub mod metrics;
pub mod model;
pub mod corpus;
pub mod numerics;
pub mod synth;
pub mod retrieval;
pub mod tokenizer;
