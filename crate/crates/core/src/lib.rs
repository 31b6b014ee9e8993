//! Desk-scale multimodal retrieval lab.
//!
//! Everything runs on CPU over synthetic corpora with known ground truth:
//! a tape-based autodiff core, a small transformer embedder, contrastive
//! training with hard-negative mining, a cross-encoder reranker, score
//! fusion and distillation, plus evaluation and ablation harnesses.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod miner;
pub mod objectives;
pub mod reranker;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
