//! End-to-end gradient verification on a small random fixture.

use super::{batch_loss, build_vocab, DatasetKind, PipelineError, PromptTemplate, PromptVariant, Task};
use crate::gnn::{bound_from_vars, DisentangledParams};
use crate::graphdata::{Lexicon, TAGraph};
use crate::lm::{init_weights, FrozenLm, LmConfig, PositionalScheme};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, SeededRng, Tensor};

/// Relative-error denominator floor for the full pipeline. Central
/// differences of a loss near `ln V` carry about 1e-10 of rounding noise at
/// ε = 1e-5, so gradients below the floor are judged by absolute error
/// (1e-9 at a 1e-4 tolerance).
pub const PIPELINE_GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSetup {
    pub nodes: usize,
    pub k: usize,
    pub d_ch: usize,
    pub delta: f64,
    pub positional: PositionalScheme,
    /// Check at most this many θ coordinates; `None` checks all.
    pub max_coords: Option<usize>,
    /// Central-difference step.
    pub epsilon: f64,
    /// Relative-error denominator floor.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            nodes: 6,
            k: 8,
            d_ch: 4,
            delta: 0.6,
            positional: PositionalScheme::AbsoluteLearned,
            max_coords: None,
            epsilon: 1e-5,
            floor: PIPELINE_GRAD_FLOOR,
            seed: 0,
        }
    }
}

/// Ring graph with seeded chords, random 64-bit LM and random θ; checks the
/// gradient of the mean first-token loss over all nodes against central
/// differences.
pub fn full_pipeline_grad_check(setup: &GradCheckSetup) -> Result<GradCheckReport, PipelineError> {
    let n = setup.nodes;
    if n < 3 {
        return Err(PipelineError::Config("gradcheck needs at least 3 nodes".into()));
    }
    let mut rng = SeededRng::new(setup.seed);
    let lex = Lexicon::standard(3);
    let texts: Vec<String> = (0..n).map(|u| lex.make_text(&mut rng, u % 3, None)).collect();
    let mut edges: Vec<(usize, usize)> = (0..n).map(|u| (u, (u + 1) % n)).collect();
    for _ in 0..n / 2 {
        let (u, v) = (rng.below(n), rng.below(n));
        if u != v {
            edges.push((u, v));
        }
    }
    let graph = TAGraph::new(texts, edges, (0..n).map(|u| Some(u % 3)).collect(), lex.categories.clone())?;

    let template = PromptTemplate::new(DatasetKind::Synthetic, setup.k);
    let vocab = build_vocab(&graph, &lex, &template);
    let cfg = LmConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        mlp_dim: 16,
        vocab_size: vocab.len(),
        max_positions: 128,
        positional: setup.positional,
    };
    let mut weights = init_weights::<f64>(&cfg, setup.seed);
    for t in weights.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.normal(0.0, 0.2);
        }
    }
    let lm = FrozenLm::new(cfg, vocab, weights)?;
    let task = Task::new(&graph, &lm, &template, PromptVariant::Neighbors)?;

    let mut params = DisentangledParams::<f64>::init(setup.k, 8, setup.d_ch, 8, setup.delta, 0.5, setup.seed)?;
    // Random biases keep ReLU pre-activations away from the kink at zero.
    for ch in &mut params.channels {
        for b in [&mut ch.b1, &mut ch.b2] {
            for x in b.data_mut() {
                *x = rng.normal(0.0, 0.5);
            }
        }
    }
    let nodes: Vec<usize> = (0..n).collect();
    let tensors: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    grad_check(
        |tape, vars| -> Result<_, PipelineError> {
            let b = bound_from_vars(vars, setup.delta)?;
            Ok(batch_loss(tape, &lm, &b, &task, &nodes)?.0)
        },
        &tensors,
        GradCheckOptions {
            epsilon: setup.epsilon,
            max_coords: setup.max_coords,
            seed: setup.seed,
            floor: setup.floor,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fixture_passes_for_both_schemes() {
        for positional in [PositionalScheme::AbsoluteLearned, PositionalScheme::Rotary] {
            let r = full_pipeline_grad_check(&GradCheckSetup {
                k: 2,
                positional,
                max_coords: Some(60),
                ..Default::default()
            })
            .unwrap();
            assert_eq!(r.coords_checked, 60);
            assert!(r.max_rel_error < 1e-4, "{positional}: {r:?}");
        }
    }

    #[test]
    fn larger_steps_leave_only_truncation_error() {
        // Rounding noise falls as 1/epsilon; at 1e-3 even tiny gradients are
        // compared relatively and the analytic error stays far below 1e-4.
        let r = full_pipeline_grad_check(&GradCheckSetup {
            k: 2,
            max_coords: Some(60),
            epsilon: 1e-3,
            floor: 1e-7,
            ..Default::default()
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn rejects_tiny_graphs() {
        let s = GradCheckSetup {
            nodes: 2,
            ..Default::default()
        };
        assert!(matches!(full_pipeline_grad_check(&s), Err(PipelineError::Config(_))));
    }
}
