use std::collections::BTreeSet;

use super::{GraphError, TAGraph};
use crate::numerics::SeededRng;

/// Disjoint train/test node sets over labeled nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Seed that produced the split; `None` when read from disk.
    pub seed: Option<u64>,
}

impl Split {
    pub fn validate(&self, graph: &TAGraph) -> Result<(), GraphError> {
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        if train.len() != self.train.len() {
            return Err(GraphError::InvalidSplit("duplicate train node".into()));
        }
        let mut test = BTreeSet::new();
        for &u in &self.test {
            if train.contains(&u) || !test.insert(u) {
                return Err(GraphError::InvalidSplit(format!("node {u} appears twice")));
            }
        }
        for &u in self.train.iter().chain(&self.test) {
            if u >= graph.node_count() {
                return Err(GraphError::NodeOutOfRange {
                    node: u,
                    count: graph.node_count(),
                });
            }
            if graph.label(u).is_none() {
                return Err(GraphError::InvalidSplit(format!("node {u} is unlabeled")));
            }
        }
        Ok(())
    }

    /// Training nodes per category.
    pub fn train_class_counts(&self, graph: &TAGraph) -> Vec<usize> {
        let mut counts = vec![0; graph.categories().len()];
        for &u in &self.train {
            if let Some(l) = graph.label(u) {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// `per_class` training nodes from every category, then `test_size` test
/// nodes from the remaining labeled pool. `test_size = None` takes
/// `min(1000, remaining / 2)`.
pub fn make_split(graph: &TAGraph, per_class: usize, test_size: Option<usize>, seed: u64) -> Result<Split, GraphError> {
    let k = graph.categories().len();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for u in 0..graph.node_count() {
        if let Some(l) = graph.label(u) {
            pools[l].push(u);
        }
    }
    for (c, pool) in pools.iter().enumerate() {
        if pool.len() < per_class {
            return Err(GraphError::InsufficientClass {
                category: graph.categories()[c].clone(),
                have: pool.len(),
                need: per_class,
            });
        }
    }
    let mut rng = SeededRng::new(seed);
    let mut train = Vec::with_capacity(per_class * k);
    let mut rest = Vec::new();
    for pool in &mut pools {
        rng.shuffle(pool);
        train.extend_from_slice(&pool[..per_class]);
        rest.extend_from_slice(&pool[per_class..]);
    }
    rest.sort_unstable();
    rng.shuffle(&mut rest);
    let size = test_size.unwrap_or_else(|| (rest.len() / 2).min(1000));
    if size > rest.len() {
        return Err(GraphError::InvalidSplit(format!(
            "test size {size} exceeds the {} remaining labeled nodes",
            rest.len()
        )));
    }
    let mut test = rest[..size].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        test,
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(classes: usize, per: usize) -> TAGraph {
        let n = classes * per;
        TAGraph::new(
            (0..n).map(|i| format!("node {i}")).collect(),
            [],
            (0..n).map(|i| Some(i % classes)).collect(),
            (0..classes).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn seven_classes_twenty_each() {
        let g = balanced(7, 60);
        let s = make_split(&g, 20, None, 1).unwrap();
        assert_eq!(s.train.len(), 140);
        assert_eq!(s.train_class_counts(&g), vec![20; 7]);
        assert_eq!(s.test.len(), (420 - 140) / 2);
        s.validate(&g).unwrap();
    }

    #[test]
    fn three_classes_twenty_each() {
        let g = balanced(3, 50);
        let s = make_split(&g, 20, Some(30), 4).unwrap();
        assert_eq!(s.train.len(), 60);
        assert_eq!(s.test.len(), 30);
    }

    #[test]
    fn deterministic_under_seed() {
        let g = balanced(3, 50);
        assert_eq!(make_split(&g, 20, None, 9).unwrap(), make_split(&g, 20, None, 9).unwrap());
        assert_ne!(make_split(&g, 20, None, 9).unwrap(), make_split(&g, 20, None, 10).unwrap());
    }

    #[test]
    fn deficient_category_is_named() {
        let g = balanced(3, 10);
        match make_split(&g, 20, None, 0) {
            Err(GraphError::InsufficientClass { category, have, need }) => {
                assert_eq!((category.as_str(), have, need), ("c0", 10, 20));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unlabeled_nodes_never_sampled() {
        let mut labels: Vec<Option<usize>> = (0..60).map(|i| Some(i % 2)).collect();
        for l in labels.iter_mut().skip(40) {
            *l = None;
        }
        let g = TAGraph::new((0..60).map(|i| format!("t{i}")).collect(), [], labels, vec!["a".into(), "b".into()]).unwrap();
        let s = make_split(&g, 5, None, 3).unwrap();
        assert!(s.train.iter().chain(&s.test).all(|&u| u < 40));
    }
}
