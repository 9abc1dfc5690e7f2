//! Trainable tri-source similarity fusion for multilingual fact-checked claim retrieval.
//!
//! Posts and fact-checks each carry a native-language and an English embedding.
//! Six small encoders map them to unit vectors, three cosine matrices are fused
//! with learned weights, and the fused scores rank facts for each post.

pub mod eval;
pub mod fsutil;
pub mod gateway;
pub mod linalg;
pub mod mining;
pub mod model;
pub mod store;
pub mod synth;
pub mod train;
