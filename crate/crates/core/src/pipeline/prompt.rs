//! Prompt rendering with reserved neighbor slots and a response template.
//!
//! A prompt is
//! `intro <text> . neighbor_intro <nb> x K . task_intro c1 , c2 , ... . question response`
//! and the label is supervised at the position right after `response`.
//! Words and punctuation are separated by spaces so the whitespace
//! tokenizer sees every symbol; multi-word category names are single
//! tokens.

use std::str::FromStr;

use super::PipelineError;
use crate::lm::{Vocab, NB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Citation,
    Ecommerce,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Citation => "citation",
            Self::Ecommerce => "ecommerce",
            Self::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "citation" => Ok(Self::Citation),
            "ecommerce" => Ok(Self::Ecommerce),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!("unknown dataset kind {other:?}")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Text segments around the node content, neighbor slots and categories.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub kind: DatasetKind,
    pub intro: String,
    pub neighbor_intro: String,
    pub task_intro: String,
    pub question: String,
    pub response: String,
    /// Number of reserved neighbor slots (one per channel).
    pub slots: usize,
}

impl PromptTemplate {
    pub fn new(kind: DatasetKind, slots: usize) -> Self {
        let (thing, intro, neighbor_intro, response_basis) = match kind {
            DatasetKind::Citation => (
                "paper",
                "here is a paper title and abstract :",
                "some information about the references cited in this paper :",
                "based on the content of the paper ,",
            ),
            DatasetKind::Ecommerce => (
                "book",
                "here is a book description and title :",
                "some information about the books frequently purchased together :",
                "based on the information of the book ,",
            ),
            DatasetKind::Synthetic => (
                "node",
                "here is a node text :",
                "some information about the neighbors of this node :",
                "based on the content of the node ,",
            ),
        };
        Self {
            kind,
            intro: intro.into(),
            neighbor_intro: neighbor_intro.into(),
            task_intro: "task : there are following categories :".into(),
            question: format!(
                "which category does this {thing} belong to ? output the most 1 possible category of this {thing} ."
            ),
            response: format!("{response_basis} the most appropriate category for this {thing} would be"),
            slots,
        }
    }

    /// Every template word, for vocabulary construction.
    pub fn words(&self) -> Vec<&str> {
        [&self.intro, &self.neighbor_intro, &self.task_intro, &self.question, &self.response]
            .iter()
            .flat_map(|s| s.split_whitespace())
            .chain([".", ","])
            .collect()
    }
}

/// Whether the neighbor segment is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptVariant {
    /// Neighbor segment with K reserved `<nb>` slots.
    Neighbors,
    /// Neighbor segment omitted entirely.
    ZeroHop,
}

/// Tokenized prompt for one node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptPlan {
    /// Prompt through the response template (label not included).
    pub tokens: Vec<usize>,
    /// Reserved slot indices, strictly increasing; empty for 0-hop.
    pub reserved: Vec<usize>,
    /// Index the label token would occupy: `tokens.len()`.
    pub label_position: usize,
    pub label_token: Option<usize>,
}

impl PromptPlan {
    /// Row whose next-token logits predict the label.
    pub fn predict_row(&self) -> usize {
        self.label_position - 1
    }
}

/// Vocabulary id of each category, which must be a single token.
pub fn category_token_ids(vocab: &Vocab, categories: &[String]) -> Result<Vec<usize>, PipelineError> {
    categories
        .iter()
        .map(|c| {
            let ids = vocab.tokenize(c);
            match ids.as_slice() {
                [id] if vocab.token(*id) == c.split_whitespace().collect::<Vec<_>>().join(" ") => Ok(*id),
                _ => Err(PipelineError::CategoryToken(c.clone())),
            }
        })
        .collect()
}

/// Render and tokenize the prompt of one node. The node text is truncated
/// from the end if the prompt would exceed `max_positions - 1` tokens (one
/// position is kept for the label).
#[allow(clippy::too_many_arguments)]
pub fn build_prompt(
    vocab: &Vocab,
    template: &PromptTemplate,
    categories: &[String],
    node: usize,
    text: &str,
    label: Option<usize>,
    variant: PromptVariant,
    max_positions: usize,
) -> Result<PromptPlan, PipelineError> {
    let cat_ids = category_token_ids(vocab, categories)?;
    let dot = vocab.tokenize(".");
    let comma = vocab.tokenize(",");

    let head = vocab.tokenize(&template.intro);
    let body = vocab.tokenize(text);
    let mut tail = dot.clone();
    let mut reserved_offsets = Vec::new();
    if variant == PromptVariant::Neighbors {
        tail.extend(vocab.tokenize(&template.neighbor_intro));
        for _ in 0..template.slots {
            reserved_offsets.push(tail.len());
            tail.push(NB);
        }
        tail.extend(&dot);
    }
    tail.extend(vocab.tokenize(&template.task_intro));
    for (i, &c) in cat_ids.iter().enumerate() {
        if i > 0 {
            tail.extend(&comma);
        }
        tail.push(c);
    }
    tail.extend(&dot);
    tail.extend(vocab.tokenize(&template.question));
    tail.extend(vocab.tokenize(&template.response));

    let budget = max_positions.saturating_sub(1);
    let fixed = head.len() + tail.len();
    if fixed + 1 > budget {
        return Err(PipelineError::ContextOverflow {
            node,
            len: fixed + body.len() + 1,
            max: max_positions,
        });
    }
    let keep = body.len().min(budget - fixed);
    let mut tokens = head;
    tokens.extend(&body[..keep]);
    let base = tokens.len();
    tokens.extend(tail);
    let reserved = reserved_offsets.iter().map(|o| base + o).collect();
    let label_token = match label {
        Some(l) => Some(*cat_ids.get(l).ok_or(PipelineError::Unlabeled(node))?),
        None => None,
    };
    Ok(PromptPlan {
        label_position: tokens.len(),
        tokens,
        reserved,
        label_token,
    })
}
