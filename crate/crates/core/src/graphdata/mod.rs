//! Text-attributed graphs: data model, on-disk format, semi-supervised
//! splits and synthetic generators.

mod io;
mod split;
mod synthetic;

use std::collections::BTreeSet;
use std::path::PathBuf;

use thiserror::Error;

pub use io::{load_split, load_tag, save_split, save_tag};
pub use split::{make_split, Split};
pub use synthetic::{gen_synthetic_tag, Lexicon, SyntheticMode, SyntheticSpec, ROLE_WORDS};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("{file}:{line}: label {label:?} is not a declared category")]
    UnknownLabel { file: String, line: usize, label: String },
    #[error("{file}:{line}: edge endpoint {node} does not exist")]
    DanglingEdge { file: String, line: usize, node: usize },
    #[error("{file}:{line}: self-edge on node {node}")]
    SelfEdge { file: String, line: usize, node: usize },
    #[error("node {0} has empty text")]
    EmptyText(usize),
    #[error("node {node} out of range (graph has {count} nodes)")]
    NodeOutOfRange { node: usize, count: usize },
    #[error("label {label} of node {node} out of range ({count} categories)")]
    LabelOutOfRange { node: usize, label: usize, count: usize },
    #[error("category {category:?} has {have} labeled nodes, need {need}")]
    InsufficientClass { category: String, have: usize, need: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Undirected graph whose nodes carry text and an optional category label.
#[derive(Debug, Clone, PartialEq)]
pub struct TAGraph {
    texts: Vec<String>,
    adjacency: Vec<Vec<usize>>,
    labels: Vec<Option<usize>>,
    categories: Vec<String>,
}

/// Directed message-passing edges: both orientations of every undirected
/// edge, sorted by destination then source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub node_count: usize,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

impl TAGraph {
    /// Validate and build. Duplicate and reversed edges collapse to one.
    pub fn new(
        texts: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<Option<usize>>,
        categories: Vec<String>,
    ) -> Result<Self, GraphError> {
        let n = texts.len();
        if labels.len() != n {
            return Err(GraphError::InvalidSpec(format!("{} labels for {n} nodes", labels.len())));
        }
        for (i, t) in texts.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(GraphError::EmptyText(i));
            }
        }
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l >= categories.len() {
                    return Err(GraphError::LabelOutOfRange {
                        node: i,
                        label: l,
                        count: categories.len(),
                    });
                }
            }
        }
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (u, v) in edges {
            for x in [u, v] {
                if x >= n {
                    return Err(GraphError::NodeOutOfRange { node: x, count: n });
                }
            }
            if u == v {
                return Err(GraphError::SelfEdge {
                    file: String::from("<memory>"),
                    line: 0,
                    node: u,
                });
            }
            adj[u].insert(v);
            adj[v].insert(u);
        }
        Ok(Self {
            texts,
            adjacency: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
            labels,
            categories,
        })
    }

    pub fn node_count(&self) -> usize {
        self.texts.len()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn text(&self, u: usize) -> &str {
        &self.texts[u]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, u: usize) -> Option<usize> {
        self.labels[u]
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Sorted neighbor set of `u`.
    pub fn neighbors(&self, u: usize) -> Result<&[usize], GraphError> {
        self.adjacency.get(u).map(|v| v.as_slice()).ok_or(GraphError::NodeOutOfRange {
            node: u,
            count: self.node_count(),
        })
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency[u].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges as `(u, v)` with `u < v`, in sorted order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, nb)| nb.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    pub fn edge_index(&self) -> EdgeIndex {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (u, nb) in self.adjacency.iter().enumerate() {
            for &v in nb {
                src.push(v);
                dst.push(u);
            }
        }
        EdgeIndex {
            src,
            dst,
            node_count: self.node_count(),
        }
    }

    /// Relabel nodes: node `u` of `self` becomes node `perm[u]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.node_count();
        let mut texts = vec![String::new(); n];
        let mut labels = vec![None; n];
        for u in 0..n {
            texts[perm[u]] = self.texts[u].clone();
            labels[perm[u]] = self.labels[u];
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::new(texts, edges, labels, self.categories.clone())
    }

    /// Copy with one node's text replaced.
    pub fn with_text(&self, u: usize, text: impl Into<String>) -> Result<Self, GraphError> {
        let text = text.into();
        if u >= self.node_count() {
            return Err(GraphError::NodeOutOfRange {
                node: u,
                count: self.node_count(),
            });
        }
        if text.trim().is_empty() {
            return Err(GraphError::EmptyText(u));
        }
        let mut g = self.clone();
        g.texts[u] = text;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> TAGraph {
        TAGraph::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            [(0, 1), (1, 2)],
            vec![Some(0), Some(1), None, Some(0)],
            vec!["x".into(), "y".into()],
        )
        .unwrap()
    }

    #[test]
    fn chain_neighbors() {
        let g = chain();
        assert_eq!(g.neighbors(1).unwrap(), &[0, 2]);
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        assert!(chain().neighbors(3).unwrap().is_empty());
    }

    #[test]
    fn reversed_duplicate_collapses() {
        let g = TAGraph::new(vec!["a".into(), "b".into()], [(0, 1), (1, 0), (0, 1)], vec![None, None], vec![]).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn out_of_range_neighbor_query() {
        assert!(matches!(chain().neighbors(9), Err(GraphError::NodeOutOfRange { .. })));
    }

    #[test]
    fn rejects_self_edges_empty_text_bad_labels() {
        let cats = vec!["x".to_string()];
        assert!(TAGraph::new(vec!["a".into()], [(0, 0)], vec![None], cats.clone()).is_err());
        assert!(TAGraph::new(vec![" ".into()], [], vec![None], cats.clone()).is_err());
        assert!(TAGraph::new(vec!["a".into()], [], vec![Some(1)], cats).is_err());
    }

    #[test]
    fn edge_index_has_both_orientations() {
        let e = chain().edge_index();
        assert_eq!(e.len(), 4);
        let pairs: Vec<_> = e.src.iter().zip(&e.dst).map(|(&s, &d)| (s, d)).collect();
        assert_eq!(pairs, vec![(1, 0), (0, 1), (2, 1), (1, 2)]);
    }

    #[test]
    fn permutation_preserves_structure() {
        let g = chain();
        let p = g.permuted(&[3, 2, 1, 0]).unwrap();
        assert_eq!(p.neighbors(2).unwrap(), &[1, 3]);
        assert_eq!(p.text(0), "d");
        assert_eq!(p.label(3), Some(0));
    }
}
