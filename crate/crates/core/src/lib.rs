//! Multi-level augmentation of search conversations, difficulty-adaptive sample
//! selection, and a desk-scale check of the joint ranking/contrastive objective.

pub mod conversation;
pub mod difficulty;
pub mod error;
pub mod graph;
pub mod hashing;
pub mod llm;
pub mod pipeline;
pub mod rules;
pub mod tokens;
pub mod trainer;

pub use conversation::{
    parse_conversation, AugmentedConversation, Conversation, Polarity, Strategy, Turn,
};
pub use error::{BackendError, Error, Result};
pub use graph::DependencyGraph;
pub use tokens::{concat_sequence, concat_turns, tokenize, TokenSequence};
