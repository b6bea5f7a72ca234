//! A virtual knowledge base built from entity-linked text.
//!
//! Pipeline: a small transformer encodes `[R1]`/`[R2]`-marked entity pairs into
//! relation embeddings, every pair mention becomes a key-value memory entry,
//! and questions are answered by differentiable top-k retrieval over that
//! memory ([`follow`]) or by mixing retrieved entities into a masked-entity
//! prediction ([`lm`]).

pub mod autograd;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod follow;
pub mod lm;
pub mod memory;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Result, VkbError};
