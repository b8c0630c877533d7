//! Prompt construction, completion backends, response caching and parsing for
//! the LLM-driven strategies.

pub mod backend;
pub mod client;
pub mod mock;
pub mod parse;
pub mod prompt;
pub mod strategies;

pub use backend::{
    CompletionBackend, CompletionRequest, CompletionResponse, EmbeddingBackend, FnBackend,
    TcpBackend, TopicBackend, BACKEND_KEY_ENV,
};
pub use client::{CompletionResult, GenerationSettings, LlmClient, ResponseCache, RetryPolicy};
pub use mock::{MockBackend, SyntheticBackend};
pub use parse::{parse_three_step_response, Payload, StrategyOutput};
pub use prompt::{build_prompt, PromptKind, STEP_MARKERS};
pub use strategies::{
    generate_noisy_turn, identify_dependencies, paraphrase, replace_entities, shift_intent,
    DependencyOutcome,
};
