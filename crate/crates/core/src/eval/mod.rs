//! Metrics, the 0-hop, w/o-disen and GCN baselines, seed aggregation and
//! explanation generation.

mod gcn;

pub use gcn::{bag_of_words, run_gcn_reference, GcnConfig};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::gnn::DisentangledParams;
use crate::graphdata::{Split, TAGraph};
use crate::lm::{FrozenLm, InjectionMap};
use crate::numerics::Real;
use crate::pipeline::{
    injection_vectors, label_logits, predict_from_logits, train_dgtl, PipelineError, PromptTemplate, PromptVariant,
    Task, TrainConfig, TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{generations} generations for {gold} gold labels")]
    LengthMismatch { generations: usize, gold: usize },
    #[error("unknown method {0:?} (expected dgtl, 0hop, wo_disen or gcn)")]
    UnknownMethod(String),
    #[error("no reports to aggregate")]
    NoReports,
    #[error("cannot aggregate {0}")]
    Mixed(String),
    #[error("node {0} has no label")]
    Unlabeled(usize),
}

impl From<crate::numerics::TensorError> for EvalError {
    fn from(e: crate::numerics::TensorError) -> Self {
        Self::Pipeline(e.into())
    }
}

impl From<crate::lm::LmError> for EvalError {
    fn from(e: crate::lm::LmError) -> Self {
        Self::Pipeline(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dgtl,
    ZeroHop,
    WoDisen,
    Gcn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dgtl, Method::ZeroHop, Method::WoDisen, Method::Gcn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dgtl => "dgtl",
            Self::ZeroHop => "0hop",
            Self::WoDisen => "wo_disen",
            Self::Gcn => "gcn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::UnknownMethod(s.to_string()))
    }
}

/// Test-set result of one method under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    /// Accuracy in percent.
    pub score: f64,
    pub class_totals: Vec<usize>,
    pub class_correct: Vec<usize>,
    /// Wall time; kept out of the rendered report so reruns are identical.
    pub runtime_secs: f64,
}

impl EvalReport {
    pub const HEADER: &'static str = "dataset\tmethod\tseed\tscore\tcorrect\ttotal\tper_class";

    /// Score the predictions of `nodes` against their labels.
    pub fn from_predictions(
        dataset: &str,
        method: Method,
        seed: u64,
        labels: &[Option<usize>],
        n_classes: usize,
        nodes: &[usize],
        predictions: &[usize],
    ) -> Result<Self, EvalError> {
        let mut class_totals = vec![0; n_classes];
        let mut class_correct = vec![0; n_classes];
        for (&u, &p) in nodes.iter().zip(predictions) {
            let y = labels[u].ok_or(EvalError::Unlabeled(u))?;
            class_totals[y] += 1;
            if p == y {
                class_correct[y] += 1;
            }
        }
        let total: usize = class_totals.iter().sum();
        let correct: usize = class_correct.iter().sum();
        let score = if total == 0 {
            0.0
        } else {
            100.0 * correct as f64 / total as f64
        };
        Ok(Self {
            dataset: dataset.to_string(),
            method,
            seed,
            score,
            class_totals,
            class_correct,
            runtime_secs: 0.0,
        })
    }

    pub fn correct(&self) -> usize {
        self.class_correct.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.class_totals.iter().sum()
    }

    /// One TSV row (no trailing newline); per-class cells are `correct/total`.
    pub fn render(&self) -> String {
        let per_class: Vec<String> = self
            .class_correct
            .iter()
            .zip(&self.class_totals)
            .map(|(c, t)| format!("{c}/{t}"))
            .collect();
        format!(
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{}",
            self.dataset,
            self.method,
            self.seed,
            self.score,
            self.correct(),
            self.total(),
            per_class.join(",")
        )
    }
}

/// Header plus one row per report.
pub fn render_reports(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.render());
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation of one method's scores across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub dataset: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single seed.
    pub std: f64,
}

impl Aggregate {
    pub fn render(&self) -> String {
        format!(
            "{} {}: {:.2} ± {:.2} over {} seed{}",
            self.dataset,
            self.method,
            self.mean,
            self.std,
            self.seeds.len(),
            if self.seeds.len() == 1 { "" } else { "s" }
        )
    }
}

pub fn aggregate(reports: &[EvalReport]) -> Result<Aggregate, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    if let Some(r) = reports.iter().find(|r| r.dataset != first.dataset || r.method != first.method) {
        return Err(EvalError::Mixed(format!(
            "{}/{} with {}/{}",
            first.dataset, first.method, r.dataset, r.method
        )));
    }
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.score).sum::<f64>() / n;
    let std = if reports.len() < 2 {
        0.0
    } else {
        (reports.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Aggregate {
        dataset: first.dataset.clone(),
        method: first.method,
        seeds: reports.iter().map(|r| r.seed).collect(),
        mean,
        std,
    })
}

/// Category index predicted for node `u`: argmax over the category tokens
/// at the label position, lower index on ties.
pub fn predict_node<T: Real>(
    lm: &FrozenLm<T>,
    task: &Task<T>,
    params: Option<&DisentangledParams<T>>,
    u: usize,
) -> Result<usize, EvalError> {
    let logits = label_logits(lm, task, params, &[u])?;
    Ok(predict_from_logits(&logits[0], &task.category_ids))
}

/// Predictions for many nodes at once.
pub fn predict_nodes<T: Real>(
    lm: &FrozenLm<T>,
    task: &Task<T>,
    params: Option<&DisentangledParams<T>>,
    nodes: &[usize],
) -> Result<Vec<usize>, EvalError> {
    Ok(label_logits(lm, task, params, nodes)?
        .iter()
        .map(|l| predict_from_logits(l, &task.category_ids))
        .collect())
}

/// Text before the first sentence terminator.
fn first_sentence(text: &str) -> &str {
    match text.find(['.', '!', '?']) {
        Some(i) => &text[..i],
        None => text,
    }
}

/// Percent of generations whose first sentence contains the gold category
/// string, ignoring case.
pub fn exact_match(generations: &[String], gold: &[String]) -> Result<f64, EvalError> {
    if generations.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            generations: generations.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = generations
        .iter()
        .zip(gold)
        .filter(|(g, y)| {
            first_sentence(g)
                .to_lowercase()
                .contains(&y.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        })
        .count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

/// Greedy continuation after the response template, detokenized. With
/// `params`, the node's injection stays active during decoding.
pub fn explain<T: Real>(
    lm: &FrozenLm<T>,
    task: &Task<T>,
    params: Option<&DisentangledParams<T>>,
    u: usize,
    max_tokens: usize,
) -> Result<String, EvalError> {
    let plan = &task.plans[u];
    let injection = match params {
        Some(p) if !plan.reserved.is_empty() => Some(InjectionMap {
            positions: plan.reserved.clone(),
            vectors: injection_vectors(task, p, &[u])?.remove(0),
        }),
        _ => None,
    };
    let ids = lm.generate(&plan.tokens, injection.as_ref(), max_tokens)?;
    Ok(lm.vocab().detokenize(&ids))
}

/// Accuracy of the frozen LM on prompts without any neighbor segment.
pub fn run_0hop(
    dataset: &str,
    graph: &TAGraph,
    split: &Split,
    lm: &FrozenLm<f32>,
    template: &PromptTemplate,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let task = Task::new(graph, lm, template, PromptVariant::ZeroHop)?;
    let preds = predict_nodes(lm, &task, None, &split.test)?;
    let mut r = EvalReport::from_predictions(
        dataset,
        Method::ZeroHop,
        seed,
        graph.labels(),
        graph.categories().len(),
        &split.test,
        &preds,
    )?;
    r.runtime_secs = start.elapsed().as_secs_f64();
    Ok(r)
}

/// Train the disentangled GNN on `split.train` and score `split.test`.
pub fn run_dgtl(
    dataset: &str,
    task: &Task<f32>,
    split: &Split,
    lm: &FrozenLm<f32>,
    config: &TrainConfig,
) -> Result<(EvalReport, TrainOutcome), EvalError> {
    run_trained(dataset, Method::Dgtl, task, split, lm, config)
}

/// The same pipeline with every channel on the binary adjacency (`delta = 1`).
pub fn run_wo_disen(
    dataset: &str,
    task: &Task<f32>,
    split: &Split,
    lm: &FrozenLm<f32>,
    config: &TrainConfig,
) -> Result<(EvalReport, TrainOutcome), EvalError> {
    let config = TrainConfig {
        delta: 1.0,
        ..config.clone()
    };
    run_trained(dataset, Method::WoDisen, task, split, lm, &config)
}

fn run_trained(
    dataset: &str,
    method: Method,
    task: &Task<f32>,
    split: &Split,
    lm: &FrozenLm<f32>,
    config: &TrainConfig,
) -> Result<(EvalReport, TrainOutcome), EvalError> {
    let start = Instant::now();
    let outcome = train_dgtl(lm, task, &split.train, &[], config)?;
    let preds = predict_nodes(lm, task, Some(&outcome.params), &split.test)?;
    let n_classes = task.category_ids.len();
    let mut r = EvalReport::from_predictions(dataset, method, config.seed, &task.labels, n_classes, &split.test, &preds)?;
    r.runtime_secs = start.elapsed().as_secs_f64();
    Ok((r, outcome))
}
