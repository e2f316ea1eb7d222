//! Multilingual neural machine translation transfer testbed.
//!
//! Frozen cross-lingual word embeddings feed a multilingual attentional
//! encoder-decoder; translation quality is measured on languages that never
//! appear in a training pair.

pub mod numerics;
pub mod parallel;
pub mod corpus;
pub mod embeddings;
pub mod model;
pub mod search;
pub mod eval;
pub mod trainer;
pub mod synthetic;
pub mod harness;
