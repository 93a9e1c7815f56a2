//! Disentangled graph-text learning for node classification on
//! text-attributed graphs.
//!
//! A small decoder-only language model is pretrained and frozen. Node texts
//! are embedded by mean-pooling its final hidden states; K parallel two-layer
//! GNN channels, each with its own learned edge weighting, turn those
//! embeddings into per-node vectors that are added into the query, key and
//! value projections of every attention layer at K reserved prompt
//! positions. Only the GNN parameters are trained, by the cross-entropy of
//! the first response token.
//!
//! Modules, bottom-up:
//! - [`kv`]: `key=value` configuration files
//! - [`numerics`]: tensors, reverse-mode differentiation, Adam, gradient checks
//! - [`graphdata`]: text-attributed graphs, splits, synthetic generators
//! - [`lm`]: tokenizer and decoder-only transformer with injection
//! - [`gnn`]: disentangled multi-channel GNN
//! - [`pipeline`]: prompts, pretraining and the fine-tuning loop
//! - [`eval`]: metrics, baselines and explanations

pub mod kv;
pub mod numerics;
pub mod graphdata;
pub mod lm;
pub mod gnn;
pub mod pipeline;
pub mod eval;
