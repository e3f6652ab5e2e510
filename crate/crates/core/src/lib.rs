//! Relation embeddings for characters in screenplay dialogue.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod optim;
pub mod pipeline;
pub mod real;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use real::Real;

pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Params32 = encoder::Params<f32>;
pub type Params64 = encoder::Params<f64>;
