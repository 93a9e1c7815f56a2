//! Prompts, Step 1 embeddings, LM pretraining and the fine-tuning loop.

mod corpus;
mod gradcheck;
mod prompt;
mod train;

pub use corpus::{build_corpus, build_vocab, pretrain_lm, CorpusSpec, PretrainConfig, PretrainOutcome};
pub use gradcheck::{full_pipeline_grad_check, GradCheckSetup, PIPELINE_GRAD_FLOOR};
pub use prompt::{build_prompt, category_token_ids, DatasetKind, PromptPlan, PromptTemplate, PromptVariant};
pub use train::{
    accuracy, injection_vectors, label_logits, predict_from_logits,
    batch_loss, embed_graph, first_token_loss, load_theta, node_forward, save_theta, train_dgtl, LogRow, Task,
    TrainConfig, TrainOutcome, THETA_FILE,
};

use crate::gnn::GnnError;
use crate::graphdata::GraphError;
use crate::kv::KvError;
use crate::lm::LmError;
use crate::numerics::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("prompt for node {node} needs {len} tokens, context holds {max}")]
    ContextOverflow { node: usize, len: usize, max: usize },
    #[error("category {0:?} is not a single vocabulary token")]
    CategoryToken(String),
    #[error("label token {id} outside vocabulary of {size}")]
    LabelToken { id: usize, size: usize },
    #[error("node {0} has no label")]
    Unlabeled(usize),
    #[error("empty training split")]
    EmptyTrain,
    #[error("non-finite loss at step {step} (seed {seed})")]
    NonFinite { step: usize, seed: u64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
