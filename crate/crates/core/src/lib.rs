//! Unsupervised machine translation with per-language normalizing flows
//! over sentence-level latent codes.

pub mod autograd;
pub mod bleu;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod density;
pub mod error;
pub mod flow;
pub mod noise;
pub mod optim;
pub mod sentrep;
pub mod seq2seq;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
