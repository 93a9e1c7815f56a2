//! Step 1 cache, node forward with injection, and the fine-tuning loop.

use std::fs;
use std::path::Path;
use std::time::Instant;

use super::{build_prompt, category_token_ids, PipelineError, PromptPlan, PromptTemplate, PromptVariant};
use crate::gnn::{bind_params, disentangled_forward, BoundParams, DisentangledParams};
use crate::graphdata::{EdgeIndex, TAGraph};
use crate::kv::KvMap;
use crate::lm::{bind, forward, logits_rows, BoundLm, FrozenLm, Injection};
use crate::numerics::{read_checkpoint, write_checkpoint, Adam, AdamConfig, AdamOutcome, Real, SeededRng, Tape, Tensor, Var};

pub const THETA_FILE: &str = "theta.ckpt";
const THETA_CONFIG_FILE: &str = "theta.config";

/// Mean-pooled final hidden states of every node text, `[n, d]`.
pub fn embed_graph<T: Real>(lm: &FrozenLm<T>, graph: &TAGraph) -> Result<Tensor<T>, PipelineError> {
    let d = lm.config().d_model;
    let mut data = Vec::with_capacity(graph.node_count() * d);
    for u in 0..graph.node_count() {
        data.extend(lm.embed_text(graph.text(u))?);
    }
    Ok(Tensor::matrix(graph.node_count(), d, data)?)
}

/// Everything about a graph that stays fixed while training: edge list,
/// cached text embeddings, prompts and category token ids.
#[derive(Debug, Clone)]
pub struct Task<T> {
    pub edges: EdgeIndex,
    pub h0: Tensor<T>,
    pub plans: Vec<PromptPlan>,
    pub category_ids: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    pub variant: PromptVariant,
}

impl<T: Real> Task<T> {
    pub fn new(
        graph: &TAGraph,
        lm: &FrozenLm<T>,
        template: &PromptTemplate,
        variant: PromptVariant,
    ) -> Result<Self, PipelineError> {
        let h0 = embed_graph(lm, graph)?;
        Self::with_embeddings(graph, lm, template, variant, h0)
    }

    /// Reuse an existing embedding cache (e.g. to switch prompt variant).
    pub fn with_embeddings(
        graph: &TAGraph,
        lm: &FrozenLm<T>,
        template: &PromptTemplate,
        variant: PromptVariant,
        h0: Tensor<T>,
    ) -> Result<Self, PipelineError> {
        let vocab = lm.vocab();
        let category_ids = category_token_ids(vocab, graph.categories())?;
        let plans = (0..graph.node_count())
            .map(|u| {
                build_prompt(
                    vocab,
                    template,
                    graph.categories(),
                    u,
                    graph.text(u),
                    graph.label(u),
                    variant,
                    lm.config().max_positions,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            edges: graph.edge_index(),
            h0,
            plans,
            category_ids,
            labels: graph.labels().to_vec(),
            variant,
        })
    }

    pub fn node_count(&self) -> usize {
        self.plans.len()
    }
}

/// Logits `[1, V]` at the position that predicts the label.
pub fn node_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    lm: &FrozenLm<T>,
    bound: &BoundLm,
    plan: &PromptPlan,
    injection: Option<Var>,
) -> Result<Var, PipelineError> {
    let inj = match injection {
        Some(v) if !plan.reserved.is_empty() => Some(Injection {
            positions: &plan.reserved,
            vectors: v,
        }),
        Some(_) => return Err(PipelineError::Config("injection given for a prompt without slots".into())),
        None => None,
    };
    let hidden = forward(tape, lm.config(), bound, &plan.tokens, inj)?;
    Ok(logits_rows(tape, bound, hidden, &[plan.predict_row()])?)
}

/// Cross-entropy of the label token under the full-vocabulary softmax.
pub fn first_token_loss<T: Real>(tape: &mut Tape<'_, T>, logits: Var, label_token: usize) -> Result<Var, PipelineError> {
    let v = tape.value(logits).cols();
    if label_token >= v {
        return Err(PipelineError::LabelToken {
            id: label_token,
            size: v,
        });
    }
    Ok(tape.cross_entropy(logits, &[Some(label_token)])?)
}

/// Mean first-token loss over `nodes`, with the GNN run once for the batch.
/// Returns the loss and the per-node logits.
pub fn batch_loss<'w, T: Real>(
    tape: &mut Tape<'w, T>,
    lm: &'w FrozenLm<T>,
    params: &BoundParams,
    task: &'w Task<T>,
    nodes: &[usize],
) -> Result<(Var, Vec<Var>), PipelineError> {
    if nodes.is_empty() {
        return Err(PipelineError::EmptyTrain);
    }
    let bound = bind(tape, lm.weights(), false);
    let h0 = tape.constant(&task.h0);
    let inj = disentangled_forward(tape, params, h0, &task.edges, nodes)?;
    let mut total = None;
    let mut all_logits = Vec::with_capacity(nodes.len());
    for (&u, &h) in nodes.iter().zip(&inj) {
        let plan = &task.plans[u];
        let label = plan.label_token.ok_or(PipelineError::Unlabeled(u))?;
        let logits = node_forward(tape, lm, &bound, plan, Some(h))?;
        let l = first_token_loss(tape, logits, label)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
        all_logits.push(logits);
    }
    let loss = tape.scale(total.expect("nonempty"), 1.0 / nodes.len() as f64)?;
    Ok((loss, all_logits))
}

/// Injection blocks `[K, d]` of `nodes` under `params`, as plain tensors.
pub fn injection_vectors<T: Real>(
    task: &Task<T>,
    params: &DisentangledParams<T>,
    nodes: &[usize],
) -> Result<Vec<Tensor<T>>, PipelineError> {
    let mut tape = Tape::new();
    let b = bind_params(&mut tape, params);
    let h0 = tape.constant(&task.h0);
    let inj = disentangled_forward(&mut tape, &b, h0, &task.edges, nodes)?;
    Ok(inj.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Full-vocabulary logits at the label position for each node. With
/// `params`, the node's injection is applied at its reserved slots.
pub fn label_logits<T: Real>(
    lm: &FrozenLm<T>,
    task: &Task<T>,
    params: Option<&DisentangledParams<T>>,
    nodes: &[usize],
) -> Result<Vec<Vec<T>>, PipelineError> {
    let inj = match params {
        Some(p) if !nodes.is_empty() => Some(injection_vectors(task, p, nodes)?),
        _ => None,
    };
    let mut out = Vec::with_capacity(nodes.len());
    for (j, &u) in nodes.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, lm.weights(), false);
        let h = inj.as_ref().map(|v| tape.leaf(v[j].clone(), false));
        let logits = node_forward(&mut tape, lm, &bound, &task.plans[u], h)?;
        out.push(tape.value(logits).data().to_vec());
    }
    Ok(out)
}

/// Argmax over the category tokens (first index on ties).
pub fn predict_from_logits<T: Real>(logits: &[T], category_ids: &[usize]) -> usize {
    let mut best = 0;
    for (c, &id) in category_ids.iter().enumerate() {
        if logits[id] > logits[category_ids[best]] {
            best = c;
        }
    }
    best
}

/// Fraction of `nodes` whose predicted category equals their label.
pub fn accuracy<T: Real>(
    lm: &FrozenLm<T>,
    task: &Task<T>,
    params: Option<&DisentangledParams<T>>,
    nodes: &[usize],
) -> Result<f64, PipelineError> {
    if nodes.is_empty() {
        return Ok(0.0);
    }
    let logits = label_logits(lm, task, params, nodes)?;
    let hits = nodes
        .iter()
        .zip(&logits)
        .filter(|(&u, l)| task.labels[u] == Some(predict_from_logits(l, &task.category_ids)))
        .count();
    Ok(hits as f64 / nodes.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of channels and reserved slots.
    pub k: usize,
    pub d_ch: usize,
    pub delta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Log (and evaluate) every this many steps; 0 logs only at the end.
    pub eval_every: usize,
    pub seed: u64,
    /// Stop when the mean loss of the last `plateau_window` steps improves
    /// on the window before by a relative margin below `plateau_tol`.
    pub early_stop: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Standard deviation of the initial injection projections.
    pub p_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d_ch: 32,
            delta: 0.8,
            lr: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            eval_every: 100,
            seed: 0,
            early_stop: true,
            plateau_window: 200,
            plateau_tol: 1e-4,
            p_init_std: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 || self.d_ch == 0 || self.batch_size == 0 || self.max_steps == 0 {
            return Err(PipelineError::Config("k, d_ch, batch_size and max_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(PipelineError::Config(format!("delta {} outside [0, 1]", self.delta)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(PipelineError::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.early_stop && self.plateau_window == 0 {
            return Err(PipelineError::Config("plateau_window must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("k", self.k);
        m.set("d_ch", self.d_ch);
        m.set("delta", self.delta);
        m.set("lr", self.lr);
        m.set("batch_size", self.batch_size);
        m.set("max_steps", self.max_steps);
        m.set("eval_every", self.eval_every);
        m.set("seed", self.seed);
        m.set("early_stop", self.early_stop);
        m.set("plateau_window", self.plateau_window);
        m.set("plateau_tol", self.plateau_tol);
        m.set("p_init_std", self.p_init_std);
        m
    }

    pub fn update_from(&mut self, m: &KvMap) -> Result<(), PipelineError> {
        m.read_into("k", &mut self.k)?;
        m.read_into("d_ch", &mut self.d_ch)?;
        m.read_into("delta", &mut self.delta)?;
        m.read_into("lr", &mut self.lr)?;
        m.read_into("batch_size", &mut self.batch_size)?;
        m.read_into("max_steps", &mut self.max_steps)?;
        m.read_into("eval_every", &mut self.eval_every)?;
        m.read_into("seed", &mut self.seed)?;
        m.read_into("early_stop", &mut self.early_stop)?;
        m.read_into("plateau_window", &mut self.plateau_window)?;
        m.read_into("plateau_tol", &mut self.plateau_tol)?;
        m.read_into("p_init_std", &mut self.p_init_std)?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean batch loss since the previous row.
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_secs: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step\tloss\ttrain_acc\ttest_acc\twall_secs";

    pub fn render(&self) -> String {
        let test = self.test_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        format!(
            "{}\t{:.6}\t{:.4}\t{}\t{:.3}",
            self.step, self.loss, self.train_acc, test, self.wall_secs
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DisentangledParams<f32>,
    pub log: Vec<LogRow>,
    /// Mean batch loss of every step taken.
    pub losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Fine-tune the disentangled GNN against the frozen LM. Batches are drawn
/// without replacement within each epoch; the LM is bound as constants, so
/// Adam only ever sees the channel tensors.
pub fn train_dgtl(
    lm: &FrozenLm<f32>,
    task: &Task<f32>,
    train: &[usize],
    test: &[usize],
    config: &TrainConfig,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    if train.is_empty() {
        return Err(PipelineError::EmptyTrain);
    }
    if task.variant != PromptVariant::Neighbors || task.plans.iter().any(|p| p.reserved.len() != config.k) {
        return Err(PipelineError::Config(format!("prompts must carry exactly k = {} slots", config.k)));
    }
    if let Some(&u) = train.iter().find(|&&u| task.labels.get(u).copied().flatten().is_none()) {
        return Err(PipelineError::Unlabeled(u));
    }
    let d = lm.config().d_model;
    let mut params = DisentangledParams::<f32>::init(
        config.k,
        task.h0.cols(),
        config.d_ch,
        d,
        config.delta,
        config.p_init_std,
        config.seed,
    )?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        params.tensors(),
    );
    let mut rng = SeededRng::derived(config.seed, 2);
    let mut order = train.to_vec();
    let mut cursor = order.len();
    let start = Instant::now();
    let mut losses = Vec::with_capacity(config.max_steps);
    let mut log = Vec::new();
    let mut since_log = Vec::new();
    let mut stopped_early = false;

    for step in 1..=config.max_steps {
        if cursor >= order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let mut batch = order[cursor..end].to_vec();
        cursor = end;
        batch.sort_unstable();

        let (loss, grads) = {
            let mut tape = Tape::new();
            let b = bind_params(&mut tape, &params);
            let (loss, _) = batch_loss(&mut tape, lm, &b, task, &batch)?;
            let value = tape.value(loss).item() as f64;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = b
                .vars()
                .into_iter()
                .zip(params.tensors())
                .map(|(v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            (value, grads)
        };
        if !loss.is_finite() {
            return Err(PipelineError::NonFinite { step, seed: config.seed });
        }
        let mut tensors = params.tensors_mut();
        if adam.step(&mut tensors, &grads)? == AdamOutcome::SkippedNonFinite {
            return Err(PipelineError::NonFinite { step, seed: config.seed });
        }
        losses.push(loss);
        since_log.push(loss);

        let w = config.plateau_window;
        let plateau = config.early_stop && losses.len() >= 2 * w && {
            let n = losses.len();
            let prev: f64 = losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
            let cur: f64 = losses[n - w..].iter().sum::<f64>() / w as f64;
            (prev - cur) / prev.abs().max(1e-12) < config.plateau_tol
        };
        let last = plateau || step == config.max_steps;
        if last || (config.eval_every > 0 && step % config.eval_every == 0) {
            let train_acc = accuracy(lm, task, Some(&params), train)?;
            let test_acc = if test.is_empty() {
                None
            } else {
                Some(accuracy(lm, task, Some(&params), test)?)
            };
            log.push(LogRow {
                step,
                loss: since_log.iter().sum::<f64>() / since_log.len() as f64,
                train_acc,
                test_acc,
                wall_secs: start.elapsed().as_secs_f64(),
            });
            since_log.clear();
        }
        if plateau {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        losses,
        stopped_early,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `theta.ckpt` (channel tensors) and `theta.config` (delta) to `dir`.
pub fn save_theta(params: &DisentangledParams<f32>, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let named = params.named();
    let refs: Vec<(&str, &Tensor<f32>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &refs).expect("writing to memory cannot fail");
    let p = dir.join(THETA_FILE);
    fs::write(&p, buf).map_err(io_err(&p))?;
    let mut kv = KvMap::new();
    kv.set("delta", params.delta);
    kv.set("k", params.k());
    let p = dir.join(THETA_CONFIG_FILE);
    fs::write(&p, kv.render()).map_err(io_err(&p))?;
    Ok(())
}

pub fn load_theta(dir: impl AsRef<Path>) -> Result<DisentangledParams<f32>, PipelineError> {
    let dir = dir.as_ref();
    let p = dir.join(THETA_CONFIG_FILE);
    let kv = KvMap::parse(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
    let delta: f64 = kv.require("delta")?;
    let p = dir.join(THETA_FILE);
    let bytes = fs::read(&p).map_err(io_err(&p))?;
    let named = read_checkpoint::<f32, _>(&mut bytes.as_slice()).map_err(io_err(&p))?;
    let params = DisentangledParams::from_named(named, delta)?;
    let k: usize = kv.require("k")?;
    if params.k() != k {
        return Err(PipelineError::Config(format!("theta.config says k = {k}, checkpoint has {}", params.k())));
    }
    Ok(params)
}
