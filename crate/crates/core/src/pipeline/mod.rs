//! Stage-oriented driver: configuration, resumable artifacts and validation.

mod config;
mod manifest;
mod stages;
mod validate;

pub use config::{BackendConfig, BackendSpec, FilterConfig, PipelineConfig, Preset};
pub use manifest::{digest_of, file_digest, read_jsonl, sha256_hex, StageDir, StageManifest, Status, MANIFEST_FILE};
pub use stages::{
    AugmentRecord, Corpus, DepsRecord, ExportRecord, Pipeline, StageOutcome, StrategyFailure, STAGES,
};
pub use validate::{validate, ValidationReport};
