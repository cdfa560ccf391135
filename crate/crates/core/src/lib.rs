pub mod align;
pub mod backend;
pub mod corpus;
pub mod eval;
pub mod harness;
pub mod parse;
pub mod promptgen;

pub use align::{ground, GroundedPrediction, GroundingReport, MatchMode};
pub use backend::{
    BackendError, CacheKey, CompletionBackend, CompletionRequest, CompletionResult, ProviderKind,
};
pub use corpus::{Corpus, CorpusError, EntitySpan, LabeledExample, Token};
pub use eval::{AggregateReport, Counts, EvalReport};
pub use harness::{HarnessError, ResultRow, RunConfig};
pub use parse::{CandidateEntity, Extraction, ParseError, ParseReport};
pub use promptgen::{DefinitionDoc, Flags, PromptConfig, RenderedPrompt};
