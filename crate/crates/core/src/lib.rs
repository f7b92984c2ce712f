//! Two-stage reranking for persona-grounded dialogue: over-sample candidate
//! responses with top-k sampling, keep the ones most coherent with the
//! history under TF-IDF, then pick the one whose persona entailment is
//! highest.

pub mod analysis;
pub mod baselines;
pub mod coherence;
pub mod consistency;
pub mod dialogue;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod pipeline;
pub mod sampling;

pub use dialogue::{
    Candidate, CoherenceContext, DialogueInstance, NliLabel, PersonaAggregation, PipelineConfig,
    ScoreRecord,
};
pub use error::{Error, Result};
pub use gateway::{connect, Backend, BackendDescriptor, Capability};
pub use pipeline::{run_pipeline, Backends, RerankMode, RunOptions};
pub use sampling::{SamplingMode, SamplingRun};
