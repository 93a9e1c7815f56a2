//! Reference two-layer GCN on bag-of-words features.

use std::collections::BTreeMap;
use std::time::Instant;

use super::{EvalError, EvalReport, Method};
use crate::graphdata::{Split, TAGraph};
use crate::numerics::{Adam, AdamConfig, SeededRng, Tape, Tensor};
use crate::pipeline::PipelineError;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            lr: 0.01,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Row-normalized word counts over the sorted set of words in all texts.
pub fn bag_of_words(graph: &TAGraph) -> Tensor<f64> {
    let mut index = BTreeMap::new();
    for t in graph.texts() {
        for w in t.split_whitespace() {
            index.entry(w.to_string()).or_insert(0usize);
        }
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let mut x = Tensor::zeros(&[graph.node_count(), index.len()]);
    for (u, t) in graph.texts().iter().enumerate() {
        let words: Vec<&str> = t.split_whitespace().collect();
        for w in &words {
            let j = index[*w];
            x.set(u, j, x.at(u, j) + 1.0 / words.len() as f64);
        }
    }
    x
}

/// Symmetric-normalized propagation `D^-1/2 (A + I) D^-1/2` as an edge list
/// with self loops: `(src, dst, coefficient)`.
fn propagation(graph: &TAGraph) -> (Vec<usize>, Vec<usize>, Tensor<f64>) {
    let n = graph.node_count();
    let deg: Vec<f64> = (0..n).map(|u| graph.degree(u) as f64 + 1.0).collect();
    let e = graph.edge_index();
    let mut src = e.src;
    let mut dst = e.dst;
    src.extend(0..n);
    dst.extend(0..n);
    let coef = src.iter().zip(&dst).map(|(&s, &d)| 1.0 / (deg[s] * deg[d]).sqrt()).collect();
    let coef = Tensor::matrix(src.len(), 1, coef).expect("column shape");
    (src, dst, coef)
}

fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.normal(0.0, std))
}

/// Train `softmax(Â ReLU(Â X W1 + b1) W2 + b2)` with full-batch Adam on the
/// training nodes and report test accuracy.
pub fn run_gcn_reference(
    dataset: &str,
    graph: &TAGraph,
    split: &Split,
    config: &GcnConfig,
) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    if split.train.is_empty() {
        return Err(PipelineError::EmptyTrain.into());
    }
    let targets: Vec<Option<usize>> = split
        .train
        .iter()
        .map(|&u| graph.label(u).ok_or(EvalError::Unlabeled(u)).map(Some))
        .collect::<Result<_, _>>()?;
    let x = bag_of_words(graph);
    let (src, dst, coef) = propagation(graph);
    let n = graph.node_count();
    let c = graph.categories().len();
    let mut rng = SeededRng::new(config.seed);
    let mut params = vec![
        glorot(x.cols(), config.hidden, &mut rng),
        Tensor::zeros(&[1, config.hidden]),
        glorot(config.hidden, c, &mut rng),
        Tensor::zeros(&[1, c]),
    ];
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &params,
    );

    let forward = |tape: &mut Tape<'_, f64>, p: &[crate::numerics::Var]| -> Result<_, EvalError> {
        let xv = tape.leaf(x.clone(), false);
        let cv = tape.leaf(coef.clone(), false);
        let mut h = xv;
        for layer in 0..2 {
            let z = tape.matmul(h, p[2 * layer])?;
            let msgs = tape.gather_rows(z, &src)?;
            let msgs = tape.mul(msgs, cv)?;
            let agg = tape.scatter_add_rows(msgs, &dst, n)?;
            h = tape.add(agg, p[2 * layer + 1])?;
            if layer == 0 {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    };

    for _ in 0..config.epochs {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let logits = forward(&mut tape, &vars)?;
        let train_logits = tape.gather_rows(logits, &split.train)?;
        let loss = tape.cross_entropy(train_logits, &targets)?;
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&params)
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        adam.step(&mut refs, &grads)?;
    }

    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let logits = forward(&mut tape, &vars)?;
    let logits = tape.value(logits);
    let preds: Vec<usize> = split
        .test
        .iter()
        .map(|&u| super::predict_from_logits(logits.row_slice(u), &(0..c).collect::<Vec<_>>()))
        .collect();
    let mut r = EvalReport::from_predictions(dataset, Method::Gcn, config.seed, graph.labels(), c, &split.test, &preds)?;
    r.runtime_secs = start.elapsed().as_secs_f64();
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_of_words_rows_sum_to_one() {
        let g = TAGraph::new(
            vec!["b a a".into(), "c".into()],
            [(0, 1)],
            vec![Some(0), Some(1)],
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let x = bag_of_words(&g);
        assert_eq!(x.shape(), &[2, 3]);
        assert_eq!(x.row_slice(0), &[2.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(x.row_slice(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn propagation_is_symmetric_normalized() {
        let g = TAGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            [(0, 1), (1, 2)],
            vec![None; 3],
            vec!["x".into()],
        )
        .unwrap();
        let (src, dst, coef) = propagation(&g);
        let mut dense = [[0.0; 3]; 3];
        for ((&s, &d), &w) in src.iter().zip(&dst).zip(coef.data()) {
            dense[d][s] += w;
        }
        let r6 = 1.0 / 6f64.sqrt();
        let want = [[0.5, r6, 0.0], [r6, 1.0 / 3.0, r6], [0.0, r6, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
    }
}
