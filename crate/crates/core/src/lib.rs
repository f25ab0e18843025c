//! Neural dialogue state tracking with a TRADE-style encoder–decoder and an
//! attention-guided generator, trainable from turn-level or sparse labels.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod synth;
pub mod training;
