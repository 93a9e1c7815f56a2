//! Pretraining corpus and language-model pretraining.
//!
//! The corpus teaches lexical competence without ever reading node labels:
//! the category attached to a document is derived from keyword classes.
//! Document kinds:
//! - 0-hop prompt of a node text, answered with its keyword's category;
//! - neighbor prompt with `<nb>` slots, answered the same way;
//! - neighbor prompt whose slots hold keywords, answered with the slot
//!   keyword majority (which always outvotes the text's own keyword);
//! - short sentences pairing a keyword with its category.

use super::{build_prompt, category_token_ids, PipelineError, PromptTemplate, PromptVariant};
use crate::graphdata::{Lexicon, TAGraph};
use crate::lm::{bind, init_weights, lm_loss, FrozenLm, LmConfig, Vocab, EOS};
use crate::numerics::{Adam, AdamConfig, AdamOutcome, SeededRng, Tape, Tensor};

const EXPLAIN_OWN: &str = "the text of this node mentions";
const EXPLAIN_NEIGHBORS: &str = "the neighbors of this node are mostly about";
const PAIR: &str = "is a term of";

/// Vocabulary: specials, category names, then template, lexicon,
/// explanation and node-text words in that order.
pub fn build_vocab(graph: &TAGraph, lexicon: &Lexicon, template: &PromptTemplate) -> Vocab {
    let explain = [EXPLAIN_OWN, EXPLAIN_NEIGHBORS, PAIR];
    let words = template
        .words()
        .into_iter()
        .chain(lexicon.keywords.iter().flatten().map(String::as_str))
        .chain(lexicon.filler.iter().map(String::as_str))
        .chain(explain.iter().flat_map(|s| s.split_whitespace()))
        .chain(graph.texts().iter().flat_map(|t| t.split_whitespace()));
    Vocab::build(graph.categories(), words)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub docs: usize,
    /// Mixture weights of (0-hop, `<nb>` slots, keyword slots, keyword pairs).
    pub mix: [f64; 4],
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            docs: 4000,
            mix: [0.3, 0.2, 0.4, 0.1],
            seed: 0,
        }
    }
}

/// Token sequences for pretraining, each ending in `<eos>`.
pub fn build_corpus(
    graph: &TAGraph,
    lexicon: &Lexicon,
    template: &PromptTemplate,
    vocab: &Vocab,
    max_positions: usize,
    spec: &CorpusSpec,
) -> Result<Vec<Vec<usize>>, PipelineError> {
    let cats = graph.categories();
    if lexicon.categories.as_slice() != cats {
        return Err(PipelineError::Config("lexicon categories differ from the graph's".into()));
    }
    let cat_ids = category_token_ids(vocab, cats)?;
    let n_classes = cats.len();
    let kw_ids: Vec<Vec<usize>> = lexicon
        .keywords
        .iter()
        .map(|set| set.iter().map(|k| vocab.tokenize(k)[0]).collect())
        .collect();
    let dot = vocab.tokenize(".");
    let own_explain = vocab.tokenize(EXPLAIN_OWN);
    let nb_explain = vocab.tokenize(EXPLAIN_NEIGHBORS);
    let pair = vocab.tokenize(PAIR);
    let mut rng = SeededRng::new(spec.seed);
    let n = graph.node_count();
    let k = template.slots;

    let mut docs = Vec::with_capacity(spec.docs);
    while docs.len() < spec.docs {
        let kind = rng.categorical(&spec.mix);
        if kind == 3 {
            let c = rng.below(n_classes);
            let kw = kw_ids[c][rng.below(kw_ids[c].len())];
            let mut doc = vec![kw];
            doc.extend(&pair);
            doc.push(cat_ids[c]);
            doc.extend(&dot);
            doc.push(EOS);
            docs.push(doc);
            continue;
        }
        let u = rng.below(n);
        let text = graph.text(u);
        let Some(own) = lexicon.text_keyword_class(text) else {
            continue;
        };
        let own_kw = vocab.tokenize(text).into_iter().find(|&t| kw_ids[own].contains(&t));
        let variant = if kind == 0 {
            PromptVariant::ZeroHop
        } else {
            PromptVariant::Neighbors
        };
        let mut plan = build_prompt(vocab, template, cats, u, text, None, variant, max_positions)?;
        let mut doc = std::mem::take(&mut plan.tokens);
        let label;
        let mut explain;
        if kind == 2 && k > 0 {
            let major = rng.below(n_classes);
            let count = k / 2 + 1 + rng.below(k - k / 2);
            let mut slots: Vec<usize> = (0..k)
                .map(|i| {
                    let c = if i < count || n_classes == 1 {
                        major
                    } else {
                        let o = rng.below(n_classes - 1);
                        if o >= major {
                            o + 1
                        } else {
                            o
                        }
                    };
                    kw_ids[c][rng.below(kw_ids[c].len())]
                })
                .collect();
            rng.shuffle(&mut slots);
            for (&pos, kw) in plan.reserved.iter().zip(slots) {
                doc[pos] = kw;
            }
            label = major;
            explain = nb_explain.clone();
            explain.push(cat_ids[major]);
        } else {
            label = own;
            explain = own_explain.clone();
            explain.extend(own_kw);
        }
        doc.push(cat_ids[label]);
        doc.extend(&dot);
        doc.extend(explain);
        doc.extend(&dot);
        doc.push(EOS);
        doc.truncate(max_positions);
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub lm: FrozenLm<f32>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Train all LM weights by next-token cross-entropy, then freeze.
pub fn pretrain_lm(
    config: &LmConfig,
    vocab: Vocab,
    corpus: &[Vec<usize>],
    pcfg: &PretrainConfig,
) -> Result<PretrainOutcome, PipelineError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(PipelineError::Config("empty pretraining corpus".into()));
    }
    if pcfg.batch_size == 0 {
        return Err(PipelineError::Config("batch_size must be positive".into()));
    }
    let mut weights = init_weights::<f32>(config, pcfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: pcfg.lr,
            ..Default::default()
        },
        weights.named().into_iter().map(|(_, t)| t),
    );
    let mut rng = SeededRng::derived(pcfg.seed, 1);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(pcfg.steps);
    for step in 0..pcfg.steps {
        let mut batch = Vec::with_capacity(pcfg.batch_size);
        while batch.len() < pcfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = {
            let mut tape = Tape::new();
            let lm = bind(&mut tape, &weights, true);
            let mut total = None;
            for &i in &batch {
                let l = lm_loss(&mut tape, config, &lm, &corpus[i])?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
            let value = tape.value(loss).item() as f64;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = lm
                .vars()
                .into_iter()
                .zip(weights.named())
                .map(|(v, (_, t))| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            (value, grads)
        };
        if !loss.is_finite() {
            return Err(PipelineError::NonFinite { step, seed: pcfg.seed });
        }
        let mut params = weights.tensors_mut();
        if adam.step(&mut params, &grads)? == AdamOutcome::SkippedNonFinite {
            return Err(PipelineError::NonFinite { step, seed: pcfg.seed });
        }
        losses.push(loss);
    }
    let lm = FrozenLm::new(config.clone(), vocab, weights)?;
    Ok(PretrainOutcome { lm, losses })
}
