//! Tokenizer and decoder-only transformer.
//!
//! The same frozen model embeds node texts (mean of final hidden states),
//! predicts categories from prompts with per-layer injection at reserved
//! positions, and generates explanations.

mod config;
mod frozen;
mod model;
mod vocab;

pub use config::{LmConfig, PositionalScheme, LN_EPS, ROTARY_BASE};
pub use frozen::{FrozenLm, InjectionMap, CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE};
pub use model::{bind, forward, init_weights, lm_loss, logits_rows, BoundLayer, BoundLm, Injection, LayerWeights, LmWeights};
pub use vocab::{Vocab, EOS, NB, PAD, SPECIALS, UNK};

use crate::kv::KvError;
use crate::numerics::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("invalid LM config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("every target position is padding")]
    AllPad,
    #[error("token id {id} outside vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("injection position {position} invalid for sequence of {len} (positions must be increasing)")]
    InjectionPosition { position: usize, len: usize },
    #[error("injection vectors have shape {got:?}, expected [{k}, {d}]")]
    InjectionShape { got: Vec<usize>, k: usize, d: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
}
