//! The immutable, checksummed language model used after pretraining.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{bind, forward, logits_rows, Injection, LmConfig, LmError, LmWeights, Vocab, EOS};
use crate::kv::KvMap;
use crate::numerics::{read_checkpoint, write_checkpoint, Real, Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "lm.ckpt";
pub const CONFIG_FILE: &str = "lm.config";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Concrete injection vectors: row `j` of `vectors` enters at `positions[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionMap<T> {
    pub positions: Vec<usize>,
    pub vectors: Tensor<T>,
}

/// Pretrained model with read-only weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLm<T: Real = f32> {
    config: LmConfig,
    vocab: Vocab,
    weights: LmWeights<T>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LmError + '_ {
    move |source| LmError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl<T: Real> FrozenLm<T> {
    pub fn new(config: LmConfig, vocab: Vocab, weights: LmWeights<T>) -> Result<Self, LmError> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(LmError::Config(format!(
                "vocabulary of {} tokens exceeds vocab_size {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let named: Vec<(String, Tensor<T>)> = weights.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let weights = LmWeights::from_named(&config, named)?;
        Ok(Self { config, vocab, weights })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn weights(&self) -> &LmWeights<T> {
        &self.weights
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> FrozenLm<U> {
        FrozenLm {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            weights: self.weights.cast(),
        }
    }

    /// The weight checkpoint as written to disk.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let named = self.weights.named();
        let refs: Vec<(&str, &Tensor<T>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &refs).expect("writing to memory cannot fail");
        buf
    }

    /// Hex SHA-256 of [`FrozenLm::checkpoint_bytes`].
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.checkpoint_bytes()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), LmError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(CHECKPOINT_FILE);
        fs::write(&p, self.checkpoint_bytes()).map_err(io_err(&p))?;
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, self.config.to_kv().render()).map_err(io_err(&p))?;
        let p = dir.join(VOCAB_FILE);
        fs::write(&p, self.vocab.render()).map_err(io_err(&p))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, LmError> {
        let dir = dir.as_ref();
        let p = dir.join(CONFIG_FILE);
        let config = LmConfig::from_kv(&KvMap::parse(&fs::read_to_string(&p).map_err(io_err(&p))?)?)?;
        let p = dir.join(VOCAB_FILE);
        let vocab = Vocab::parse(&fs::read_to_string(&p).map_err(io_err(&p))?).map_err(LmError::Vocab)?;
        let p = dir.join(CHECKPOINT_FILE);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        let named = read_checkpoint::<T, _>(&mut bytes.as_slice()).map_err(|e| LmError::Checkpoint(e.to_string()))?;
        let weights = LmWeights::from_named(&config, named)?;
        Self::new(config, vocab, weights)
    }

    /// Final hidden states `[T, d]` and next-token logits `[T, V]`.
    pub fn run(&self, tokens: &[usize], injection: Option<&InjectionMap<T>>) -> Result<(Tensor<T>, Tensor<T>), LmError> {
        let mut tape = Tape::new();
        let lm = bind(&mut tape, &self.weights, false);
        let inj = injection.map(|m| (m.positions.as_slice(), tape.leaf(m.vectors.clone(), false)));
        let hidden = forward(
            &mut tape,
            &self.config,
            &lm,
            tokens,
            inj.map(|(positions, vectors)| Injection { positions, vectors }),
        )?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = logits_rows(&mut tape, &lm, hidden, &rows)?;
        Ok((tape.value(hidden).clone(), tape.value(logits).clone()))
    }

    /// Mean of the final hidden states over all positions of `tokens`.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Vec<T>, LmError> {
        let mut tape = Tape::new();
        let lm = bind(&mut tape, &self.weights, false);
        let hidden = forward(&mut tape, &self.config, &lm, tokens, None)?;
        let mean = tape.mean_rows(hidden)?;
        Ok(tape.value(mean).data().to_vec())
    }

    /// Embedding of raw text, without any prompt around it. Texts longer
    /// than the context keep their first `max_positions` tokens.
    pub fn embed_text(&self, text: &str) -> Result<Vec<T>, LmError> {
        let mut ids = self.vocab.tokenize(text);
        ids.truncate(self.config.max_positions);
        self.embed_tokens(&ids)
    }

    /// Greedy decoding (first index wins ties). The injection stays active
    /// at its positions for every step. Stops after `max_new` tokens, at
    /// `<eos>` (not returned), or when the context is full.
    pub fn generate(
        &self,
        prompt: &[usize],
        injection: Option<&InjectionMap<T>>,
        max_new: usize,
    ) -> Result<Vec<usize>, LmError> {
        if prompt.len() > self.config.max_positions {
            return Err(LmError::ContextOverflow {
                len: prompt.len(),
                max: self.config.max_positions,
            });
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.config.max_positions {
            let mut tape = Tape::new();
            let lm = bind(&mut tape, &self.weights, false);
            let inj = injection.map(|m| (m.positions.as_slice(), tape.leaf(m.vectors.clone(), false)));
            let hidden = forward(
                &mut tape,
                &self.config,
                &lm,
                &seq,
                inj.map(|(positions, vectors)| Injection { positions, vectors }),
            )?;
            let logits = logits_rows(&mut tape, &lm, hidden, &[seq.len() - 1])?;
            let next = argmax(tape.value(logits).data());
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value, first index on ties.
pub(crate) fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
