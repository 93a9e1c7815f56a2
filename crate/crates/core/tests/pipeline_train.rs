use dgtl::gnn::{bound_from_vars, DisentangledParams};
use dgtl::graphdata::{gen_synthetic_tag, Lexicon, SyntheticMode, SyntheticSpec, TAGraph};
use dgtl::lm::{bind, init_weights, lm_loss, logits_rows, forward, FrozenLm, LmConfig, PositionalScheme, NB};
use dgtl::numerics::{grad_check, Adam, AdamConfig, GradCheckOptions, SeededRng, Tape, Tensor};
use dgtl::pipeline::{
    batch_loss, build_prompt, build_vocab, first_token_loss, injection_vectors, label_logits, load_theta, save_theta,
    train_dgtl, DatasetKind, PipelineError, PIPELINE_GRAD_FLOOR, PromptTemplate, PromptVariant, Task, TrainConfig,
};
use dgtl::gnn::bind_params;

const K: usize = 8;

fn template() -> PromptTemplate {
    PromptTemplate::new(DatasetKind::Synthetic, K)
}

fn small_graph(seed: u64) -> TAGraph {
    gen_synthetic_tag(&SyntheticSpec {
        n_nodes: 12,
        n_classes: 3,
        mode: SyntheticMode::TextInformative,
        keyword_purity: 1.0,
        avg_degree: 3.0,
        seed,
    })
    .unwrap()
}

fn path_graph(texts: &[&str]) -> TAGraph {
    let lex = Lexicon::standard(3);
    let n = texts.len();
    TAGraph::new(
        texts.iter().map(|s| s.to_string()).collect(),
        (0..n - 1).map(|i| (i, i + 1)),
        (0..n).map(|i| Some(i % 3)).collect(),
        lex.categories,
    )
    .unwrap()
}

/// Random LM over the graph vocabulary, with weights scaled up so that the
/// loss surface is far from flat.
fn lm_for(graph: &TAGraph, seed: u64) -> FrozenLm<f64> {
    let vocab = build_vocab(graph, &Lexicon::standard(graph.categories().len()), &template());
    let cfg = LmConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        mlp_dim: 16,
        vocab_size: vocab.len(),
        max_positions: 128,
        positional: PositionalScheme::AbsoluteLearned,
    };
    let mut w = init_weights::<f64>(&cfg, seed);
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    for t in w.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.normal(0.0, 0.2);
        }
    }
    FrozenLm::new(cfg, vocab, w).unwrap()
}

fn params_for(lm: &FrozenLm<f64>, delta: f64, p_std: f64, seed: u64) -> DisentangledParams<f64> {
    let d = lm.config().d_model;
    DisentangledParams::init(K, d, 4, d, delta, p_std, seed).unwrap()
}

fn batch_value(lm: &FrozenLm<f64>, task: &Task<f64>, params: &DisentangledParams<f64>, nodes: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let b = bind_params(&mut tape, params);
    let (loss, _) = batch_loss(&mut tape, lm, &b, task, nodes).unwrap();
    tape.value(loss).item()
}

#[test]
fn prompts_are_deterministic_with_k_slots() {
    let g = small_graph(0);
    let lm = lm_for(&g, 0);
    let t = template();
    for u in 0..g.node_count() {
        let a = build_prompt(lm.vocab(), &t, g.categories(), u, g.text(u), g.label(u), PromptVariant::Neighbors, 128)
            .unwrap();
        let b = build_prompt(lm.vocab(), &t, g.categories(), u, g.text(u), g.label(u), PromptVariant::Neighbors, 128)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.iter().filter(|&&x| x == NB).count(), K);
        assert_eq!(a.reserved.len(), K);
        assert!(a.reserved.iter().all(|&p| a.tokens[p] == NB));
        assert_eq!(a.label_position, a.tokens.len());
        let z = build_prompt(lm.vocab(), &t, g.categories(), u, g.text(u), g.label(u), PromptVariant::ZeroHop, 128)
            .unwrap();
        assert!(z.reserved.is_empty());
        assert!(!z.tokens.contains(&NB));
    }
}

#[test]
fn zero_projection_matches_plain_neighbor_prompt() {
    let g = small_graph(1);
    let lm = lm_for(&g, 1);
    let task = Task::new(&g, &lm, &template(), PromptVariant::Neighbors).unwrap();
    let mut params = params_for(&lm, 0.8, 0.0, 3);
    for ch in &params.channels {
        assert_eq!(ch.p.max_abs(), 0.0);
    }
    let nodes: Vec<usize> = (0..g.node_count()).collect();
    let with = label_logits(&lm, &task, Some(&params), &nodes).unwrap();
    let without = label_logits(&lm, &task, None, &nodes).unwrap();
    for (a, b) in with.iter().zip(&without) {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "diff {diff}");
    }
    params.channels[0].p = Tensor::full(params.channels[0].p.shape(), 1.0);
    let moved = label_logits(&lm, &task, Some(&params), &nodes).unwrap();
    assert!(moved.iter().zip(&without).any(|(a, b)| a != b));
}

#[test]
fn first_token_loss_reference_values() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.leaf(Tensor::zeros(&[1, 512]), false);
    let l = first_token_loss(&mut tape, uniform, 17).unwrap();
    assert!((tape.value(l).item() - 512f64.ln()).abs() < 1e-12);

    let mut sharp = Tensor::zeros(&[1, 512]);
    sharp.set(0, 5, 200.0);
    let sharp = tape.leaf(sharp, false);
    let l = first_token_loss(&mut tape, sharp, 5).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);

    assert!(matches!(
        first_token_loss(&mut tape, uniform, 512),
        Err(PipelineError::LabelToken { id: 512, size: 512 })
    ));
}

#[test]
fn first_token_loss_agrees_with_lm_loss_on_one_target() {
    let g = small_graph(2);
    let lm = lm_for(&g, 2);
    let tokens = [7, 9];
    let mut tape = Tape::new();
    let bound = bind(&mut tape, lm.weights(), false);
    let reference = lm_loss(&mut tape, lm.config(), &bound, &tokens).unwrap();
    let hidden = forward(&mut tape, lm.config(), &bound, &tokens, None).unwrap();
    let logits = logits_rows(&mut tape, &bound, hidden, &[0]).unwrap();
    let l = first_token_loss(&mut tape, logits, 9).unwrap();
    assert!((tape.value(l).item() - tape.value(reference).item()).abs() < 1e-12);
}

#[test]
fn one_small_adam_step_lowers_the_loss() {
    let mut failures = 0;
    for seed in 0..20 {
        let g = small_graph(100 + seed);
        let lm = lm_for(&g, seed);
        let task = Task::new(&g, &lm, &template(), PromptVariant::Neighbors).unwrap();
        let mut params = params_for(&lm, 0.8, 0.3, seed);
        let nodes: Vec<usize> = (0..g.node_count()).collect();
        let before = batch_value(&lm, &task, &params, &nodes);
        let grads: Vec<Tensor<f64>> = {
            let mut tape = Tape::new();
            let b = bind_params(&mut tape, &params);
            let (loss, _) = batch_loss(&mut tape, &lm, &b, &task, &nodes).unwrap();
            let mut g = tape.backward(loss).unwrap();
            b.vars()
                .into_iter()
                .zip(params.tensors())
                .map(|(v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        };
        let mut adam = Adam::new(
            AdamConfig {
                lr: 1e-4,
                ..Default::default()
            },
            params.tensors(),
        );
        adam.step(&mut params.tensors_mut(), &grads).unwrap();
        let after = batch_value(&lm, &task, &params, &nodes);
        if after >= before {
            failures += 1;
        }
    }
    assert!(failures <= 2, "{failures} of 20 steps did not lower the loss");
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let g = path_graph(&[
        "rule learning inductive logic",
        "theory bounds proof",
        "case based retrieval",
        "rule learning decision",
        "theory complexity",
        "case based analogy",
    ]);
    let g = TAGraph::new(
        g.texts().to_vec(),
        [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5)],
        g.labels().to_vec(),
        g.categories().to_vec(),
    )
    .unwrap();
    let lm = lm_for(&g, 4);
    let task = Task::new(&g, &lm, &template(), PromptVariant::Neighbors).unwrap();
    let mut params = params_for(&lm, 0.6, 0.5, 4);
    // Random biases keep every ReLU pre-activation away from zero.
    let mut rng = SeededRng::new(40);
    for ch in &mut params.channels {
        for (t, std) in [(&mut ch.b1, 0.5), (&mut ch.b2, 0.5)] {
            for x in t.data_mut() {
                *x += rng.normal(0.0, std);
            }
        }
    }
    let nodes = [0usize, 2, 3, 5];
    let tensors: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let report = grad_check(
        |tape, vars| -> Result<_, PipelineError> {
            let b = bound_from_vars(vars, params.delta)?;
            Ok(batch_loss(tape, &lm, &b, &task, &nodes)?.0)
        },
        &tensors,
        GradCheckOptions {
            floor: PIPELINE_GRAD_FLOOR,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.coords_checked >= 200);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn injection_sees_exactly_two_hops() {
    let texts = [
        "rule learning inductive",
        "theory bounds",
        "case based retrieval",
        "rule learning decision",
        "theory complexity",
    ];
    let g = path_graph(&texts);
    let lm = lm_for(&g, 5);
    let params = params_for(&lm, 0.8, 0.5, 5);
    let base = Task::new(&g, &lm, &template(), PromptVariant::Neighbors).unwrap();
    let h = injection_vectors(&base, &params, &[0]).unwrap();
    for (node, reachable) in [(1, true), (2, true), (3, false), (4, false)] {
        let changed = g.with_text(node, "case based analogy memory").unwrap();
        let task = Task::new(&changed, &lm, &template(), PromptVariant::Neighbors).unwrap();
        let h2 = injection_vectors(&task, &params, &[0]).unwrap();
        let diff = h[0].data().iter().zip(h2[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert_eq!(diff > 0.0, reachable, "node {node}: diff {diff}");
    }
}

#[test]
fn theta_round_trips_through_disk() {
    let g = small_graph(6);
    let lm = lm_for(&g, 6).cast::<f32>();
    let params = DisentangledParams::<f32>::init(K, 8, 4, 8, 0.7, 0.3, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_theta(&params, dir.path()).unwrap();
    let back = load_theta(dir.path()).unwrap();
    assert_eq!(back.delta, params.delta);
    assert_eq!(back.named().len(), params.named().len());
    for ((na, a), (nb, b)) in params.named().iter().zip(back.named()) {
        assert_eq!(na, &nb);
        assert_eq!(a.data(), b.data());
    }
    let task = Task::new(&g, &lm, &template(), PromptVariant::Neighbors).unwrap();
    let nodes: Vec<usize> = (0..g.node_count()).collect();
    assert_eq!(
        label_logits(&lm, &task, Some(&params), &nodes).unwrap(),
        label_logits(&lm, &task, Some(&back), &nodes).unwrap()
    );
}

#[test]
fn training_updates_theta_and_never_the_lm() {
    let g = small_graph(7);
    let lm = lm_for(&g, 7).cast::<f32>();
    let before = lm.checksum();
    let task = Task::new(&g, &lm, &template(), PromptVariant::Neighbors).unwrap();
    let cfg = TrainConfig {
        d_ch: 4,
        max_steps: 5,
        eval_every: 0,
        seed: 7,
        ..Default::default()
    };
    let out = train_dgtl(&lm, &task, &[0, 1, 2, 3], &[4, 5], &cfg).unwrap();
    assert_eq!(lm.checksum(), before);
    assert_eq!(out.losses.len(), 5);
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.params.tensors().len(), 7 * K);
    let init = DisentangledParams::<f32>::init(K, 8, 4, 8, cfg.delta, cfg.p_init_std, cfg.seed).unwrap();
    assert!(init.tensors().iter().zip(out.params.tensors()).any(|(a, b)| a.data() != b.data()));
}

#[test]
fn training_rejects_bad_inputs() {
    let g = small_graph(8);
    let lm = lm_for(&g, 8).cast::<f32>();
    let task = Task::new(&g, &lm, &template(), PromptVariant::Neighbors).unwrap();
    let cfg = TrainConfig {
        d_ch: 4,
        max_steps: 2,
        ..Default::default()
    };
    assert!(matches!(train_dgtl(&lm, &task, &[], &[], &cfg), Err(PipelineError::EmptyTrain)));
    let wrong_k = TrainConfig { k: 4, ..cfg.clone() };
    assert!(matches!(train_dgtl(&lm, &task, &[0], &[], &wrong_k), Err(PipelineError::Config(_))));
    let zero_hop = Task::new(&g, &lm, &template(), PromptVariant::ZeroHop).unwrap();
    assert!(matches!(train_dgtl(&lm, &zero_hop, &[0], &[], &cfg), Err(PipelineError::Config(_))));
    let bad_delta = TrainConfig { delta: 1.5, ..cfg };
    assert!(matches!(train_dgtl(&lm, &task, &[0], &[], &bad_delta), Err(PipelineError::Config(_))));
}

