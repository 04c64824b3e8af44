//! Retriever distillation against a frozen reader.
//!
//! Two linear projection heads over a dense index are trained so that the
//! retriever's softmax over candidate scores matches the reader's posterior
//! over the same candidates. At inference the reader's per-candidate answer
//! distributions are fused with retrieval weights, and the analysis module
//! splits queries by whether those per-candidate answers agree.

pub mod analysis;
pub mod distill;
pub mod fusion;
pub mod index;
pub mod metrics;
pub mod noise;
pub mod reader;
pub mod synth;
pub mod types;

pub use analysis::{summarize, Summary};
pub use distill::{train_sequential, TrainedHeads, TrainerConfig};
pub use fusion::{predict, predict_all, FusedPrediction, Heads, InferenceConfig, InferenceMode, Reranker};
pub use index::{dual_retrieve, top_k, Index, MergePolicy, ProjectionHead, StorageDtype};
pub use reader::{Reader, ReaderError, ReaderSpec, SimulatedReader, SimulatedReaderParams};
pub use synth::{generate, SynthCorpus, SynthSpec};
pub use types::{
    Candidate, CandidateSet, ClassVocab, Embedding, HeadTag, IndexRecord, Query, TaskKind, TypeError,
};
