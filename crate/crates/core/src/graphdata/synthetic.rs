//! Planted-community text-attributed graphs for desk-scale experiments.
//!
//! Every node text is a handful of filler words plus exactly one class
//! keyword. Three generators:
//!
//! - [`SyntheticMode::TextInformative`]: homophilous communities; the node's
//!   own keyword comes from its label's keyword set with probability
//!   `keyword_purity`, otherwise from another class.
//! - [`SyntheticMode::StructureOnly`]: the own keyword is independent of the
//!   label, yet the label is the plurality keyword class among the
//!   neighbors. Nodes are stratified over (label, keyword class) pairs, so
//!   the joint table is as flat as `n` allows. Within a label community,
//!   "hub" nodes (keyword class == label) are wired to each other and every
//!   other member ("spoke") attaches to several hubs. Edges never cross
//!   communities except for a little noise, and a repair pass adds
//!   hub edges until every node's neighbor plurality equals its label.
//! - [`SyntheticMode::TwoRelation`]: two planted relations with opposite
//!   label correlation. Every text carries a role word (`alpha`/`beta`) and
//!   a keyword independent of its label. The first relation is the
//!   structure-only hub layout restricted to one role: same-role neighbors
//!   always name the label by plurality. The second links each node to
//!   other-role hubs of one distractor class, one edge fewer than it sends
//!   to its own hubs, so the distractor keyword crowds the neighborhood
//!   unless the two relations are told apart. `keyword_purity` is unused.

use super::{GraphError, TAGraph};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticMode {
    TextInformative,
    StructureOnly,
    TwoRelation,
}

impl SyntheticMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::TextInformative => "text_informative",
            Self::StructureOnly => "structure_only",
            Self::TwoRelation => "two_relation",
        }
    }
}

impl std::str::FromStr for SyntheticMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text_informative" => Ok(Self::TextInformative),
            "structure_only" => Ok(Self::StructureOnly),
            "two_relation" => Ok(Self::TwoRelation),
            other => Err(format!("unknown synthetic mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_nodes: usize,
    pub n_classes: usize,
    pub mode: SyntheticMode,
    pub keyword_purity: f64,
    pub avg_degree: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_nodes: 300,
            n_classes: 3,
            mode: SyntheticMode::StructureOnly,
            keyword_purity: 1.0,
            avg_degree: 6.0,
            seed: 0,
        }
    }
}

const NAMED: [(&str, [&str; 8]); 7] = [
    ("case based", ["precedent", "retrieval", "analogy", "casebase", "adaptation", "similarity", "exemplar", "recall"]),
    ("genetic algorithms", ["mutation", "crossover", "chromosome", "fitness", "population", "genome", "selection", "evolution"]),
    ("neural networks", ["neuron", "backpropagation", "perceptron", "synapse", "activation", "hidden", "layer", "connectionist"]),
    ("probabilistic methods", ["bayesian", "probability", "likelihood", "posterior", "prior", "inference", "markov", "belief"]),
    ("reinforcement learning", ["reward", "policy", "agent", "qlearning", "exploration", "bellman", "return", "episode"]),
    ("rule learning", ["rules", "induction", "clauses", "decision", "lists", "covering", "antecedent", "horn"]),
    ("theory", ["theorem", "bound", "complexity", "proof", "pac", "sample", "lemma", "learnability"]),
];

const FILLER: [&str; 40] = [
    "we", "propose", "a", "new", "approach", "to", "the", "problem", "of", "this", "work", "study", "results", "show",
    "that", "our", "method", "model", "data", "using", "present", "an", "analysis", "experiments", "improve",
    "performance", "on", "several", "tasks", "general", "framework", "simple", "efficient", "novel", "setting",
    "describe", "system", "evaluate", "compare", "with",
];

/// Role words of the two-relation generator.
pub const ROLE_WORDS: [&str; 2] = ["alpha", "beta"];

/// Category names, per-class keyword sets (8 each, disjoint) and filler words.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub categories: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    pub filler: Vec<String>,
}

impl Lexicon {
    /// Cora's seven category names first; further classes get generated names.
    pub fn standard(n_classes: usize) -> Self {
        let mut categories = Vec::with_capacity(n_classes);
        let mut keywords = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            if let Some((name, kws)) = NAMED.get(c) {
                categories.push(name.to_string());
                keywords.push(kws.iter().map(|s| s.to_string()).collect());
            } else {
                categories.push(format!("topic{c}"));
                keywords.push((0..8).map(|j| format!("term{c}x{j}")).collect());
            }
        }
        Self {
            categories,
            keywords,
            filler: FILLER.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn keyword_class(&self, word: &str) -> Option<usize> {
        self.keywords.iter().position(|set| set.iter().any(|k| k == word))
    }

    /// Keyword classes in order of appearance.
    pub fn keyword_classes_in(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().filter_map(|w| self.keyword_class(w)).collect()
    }

    /// Class of the first keyword in `text`.
    pub fn text_keyword_class(&self, text: &str) -> Option<usize> {
        text.split_whitespace().find_map(|w| self.keyword_class(w))
    }

    /// Filler words with one keyword of class `class` at a random position.
    pub fn make_text(&self, rng: &mut SeededRng, class: usize, extra: Option<&str>) -> String {
        let n = 4 + rng.below(4);
        let mut words: Vec<&str> = (0..n).map(|_| self.filler[rng.below(self.filler.len())].as_str()).collect();
        let kw = &self.keywords[class][rng.below(self.keywords[class].len())];
        let at = rng.below(words.len() + 1);
        words.insert(at, kw);
        if let Some(e) = extra {
            let at = rng.below(words.len() + 1);
            words.insert(at, e);
        }
        words.join(" ")
    }
}

/// Index of the unique maximum, `None` on ties or all zeros.
pub(crate) fn plurality(counts: &[usize]) -> Option<usize> {
    let max = *counts.iter().max()?;
    if max == 0 || counts.iter().filter(|&&c| c == max).count() != 1 {
        return None;
    }
    counts.iter().position(|&c| c == max)
}

pub fn gen_synthetic_tag(spec: &SyntheticSpec) -> Result<TAGraph, GraphError> {
    if spec.n_classes < 2 {
        return Err(GraphError::InvalidSpec("need at least 2 classes".into()));
    }
    if spec.avg_degree < 2.0 {
        return Err(GraphError::InvalidSpec("avg_degree must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&spec.keyword_purity) {
        return Err(GraphError::InvalidSpec("keyword_purity must lie in [0, 1]".into()));
    }
    if spec.n_nodes < 2 * spec.n_classes {
        return Err(GraphError::InvalidSpec("fewer than two nodes per class".into()));
    }
    let lex = Lexicon::standard(spec.n_classes);
    let mut rng = SeededRng::new(spec.seed);
    match spec.mode {
        SyntheticMode::TextInformative => text_informative(spec, &lex, &mut rng),
        SyntheticMode::StructureOnly => structure_only(spec, &lex, &mut rng),
        SyntheticMode::TwoRelation => two_relation(spec, &lex, &mut rng),
    }
}

fn stratified_labels(n: usize, classes: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

fn impure_keyword(label: usize, purity: f64, classes: usize, rng: &mut SeededRng) -> usize {
    if rng.bernoulli(purity) {
        label
    } else {
        let other = rng.below(classes - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    }
}

fn by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); classes];
    for (u, &l) in labels.iter().enumerate() {
        out[l].push(u);
    }
    out
}

struct EdgeSet {
    adj: Vec<std::collections::BTreeSet<usize>>,
}

impl EdgeSet {
    fn new(n: usize) -> Self {
        Self {
            adj: vec![Default::default(); n],
        }
    }

    fn add(&mut self, u: usize, v: usize) -> bool {
        if u == v || self.adj[u].contains(&v) {
            return false;
        }
        self.adj[u].insert(v);
        self.adj[v].insert(u);
        true
    }

    fn remove(&mut self, u: usize, v: usize) {
        self.adj[u].remove(&v);
        self.adj[v].remove(&u);
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(u, s)| s.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
            .collect()
    }
}

/// Attach `u` to a random member of `pool`, retrying a few times on
/// duplicates or self-loops.
fn attach(edges: &mut EdgeSet, u: usize, pool: &[usize], rng: &mut SeededRng) -> bool {
    if pool.is_empty() {
        return false;
    }
    for _ in 0..16 {
        let v = pool[rng.below(pool.len())];
        if edges.add(u, v) {
            return true;
        }
    }
    false
}

fn text_informative(spec: &SyntheticSpec, lex: &Lexicon, rng: &mut SeededRng) -> Result<TAGraph, GraphError> {
    let (n, k) = (spec.n_nodes, spec.n_classes);
    let labels = stratified_labels(n, k, rng);
    let kw: Vec<usize> = labels.iter().map(|&y| impure_keyword(y, spec.keyword_purity, k, rng)).collect();
    let texts: Vec<String> = kw.iter().map(|&c| lex.make_text(rng, c, None)).collect();
    let groups = by_class(&labels, k);
    let mut edges = EdgeSet::new(n);
    let picks = (spec.avg_degree / 2.0).round().max(1.0) as usize;
    for u in 0..n {
        for _ in 0..picks {
            let target = if rng.bernoulli(0.9) {
                labels[u]
            } else {
                impure_keyword(labels[u], 0.0, k, rng)
            };
            attach(&mut edges, u, &groups[target], rng);
        }
    }
    TAGraph::new(texts, edges.pairs(), labels.into_iter().map(Some).collect(), lex.categories.clone())
}

fn structure_only(spec: &SyntheticSpec, lex: &Lexicon, rng: &mut SeededRng) -> Result<TAGraph, GraphError> {
    let (n, k) = (spec.n_nodes, spec.n_classes);
    if n < 2 * k * k {
        return Err(GraphError::InvalidSpec(format!(
            "structure_only needs at least {} nodes for {k} classes (two per label/keyword pair)",
            2 * k * k
        )));
    }
    // Stratify over (label, keyword) pairs.
    let mut types: Vec<usize> = (0..n).map(|i| i % (k * k)).collect();
    rng.shuffle(&mut types);
    let labels: Vec<usize> = types.iter().map(|t| t / k).collect();
    let kw: Vec<usize> = types.iter().map(|t| t % k).collect();
    let mut hubs = vec![Vec::new(); k];
    let mut spokes = vec![Vec::new(); k];
    for u in 0..n {
        if labels[u] == kw[u] {
            hubs[labels[u]].push(u);
        } else {
            spokes[labels[u]].push(u);
        }
    }

    // Degree budget: spokes attach to `m_s` hubs, hubs pick hub partners so
    // the mean degree lands near `avg_degree`.
    let f_spoke = (k - 1) as f64 / k as f64;
    let m_s = ((spec.avg_degree / 2.0).round() as usize).max(2);
    let m_h = (((spec.avg_degree - 2.0 * f_spoke * m_s as f64) * k as f64 / 2.0).round() as usize).max(1);
    let mut edges = EdgeSet::new(n);
    for c in 0..k {
        for &u in &spokes[c] {
            for _ in 0..m_s {
                attach(&mut edges, u, &hubs[c], rng);
            }
            // occasional same-community spoke link
            if rng.bernoulli(0.2) {
                attach(&mut edges, u, &spokes[c], rng);
            }
        }
        for &h in &hubs[c] {
            for _ in 0..m_h {
                attach(&mut edges, h, &hubs[c], rng);
            }
        }
    }
    // sparse cross-community noise
    let noise = (0.02 * n as f64 * spec.avg_degree / 2.0).round() as usize;
    for _ in 0..noise {
        let (u, v) = (rng.below(n), rng.below(n));
        edges.add(u, v);
    }

    repair_plurality(&mut edges, &labels, &kw, k, |_, _| true, |u| &hubs[labels[u]], rng)?;

    let texts: Vec<String> = kw.iter().map(|&c| lex.make_text(rng, c, None)).collect();
    TAGraph::new(texts, edges.pairs(), labels.into_iter().map(Some).collect(), lex.categories.clone())
}

fn two_relation(spec: &SyntheticSpec, lex: &Lexicon, rng: &mut SeededRng) -> Result<TAGraph, GraphError> {
    let (n, k) = (spec.n_nodes, spec.n_classes);
    let cells = 2 * k * k;
    if n < 2 * cells {
        return Err(GraphError::InvalidSpec(format!(
            "two_relation needs at least {} nodes for {k} classes (two per label/keyword/role triple)",
            2 * cells
        )));
    }
    // Stratify over (label, keyword, role).
    let mut types: Vec<usize> = (0..n).map(|i| i % cells).collect();
    rng.shuffle(&mut types);
    let labels: Vec<usize> = types.iter().map(|t| t / (2 * k)).collect();
    let kw: Vec<usize> = types.iter().map(|t| (t / 2) % k).collect();
    let roles: Vec<usize> = types.iter().map(|t| t % 2).collect();
    // hubs[c][r]: label and keyword c, role r.
    let mut hubs = vec![vec![Vec::new(); 2]; k];
    for u in 0..n {
        if labels[u] == kw[u] {
            hubs[labels[u]][roles[u]].push(u);
        }
    }

    let f_spoke = (k - 1) as f64 / k as f64;
    let m_s = ((spec.avg_degree / 2.0).round() as usize).max(2);
    let m_h = (((spec.avg_degree - 2.0 * f_spoke * m_s as f64) * k as f64 / 2.0).round() as usize).max(1);
    let cross = m_s - 1;
    let mut edges = EdgeSet::new(n);
    for u in 0..n {
        let (y, r) = (labels[u], roles[u]);
        // First relation: own label, own role.
        let own = if kw[u] == y { m_h } else { m_s };
        for _ in 0..own {
            attach(&mut edges, u, &hubs[y][r], rng);
        }
        // Second relation: hubs of one distractor class with the other role.
        let c = impure_keyword(y, 0.0, k, rng);
        for _ in 0..cross {
            attach(&mut edges, u, &hubs[c][1 - r], rng);
        }
    }
    repair_plurality(
        &mut edges,
        &labels,
        &kw,
        k,
        |u, v| roles[u] == roles[v],
        |u| &hubs[labels[u]][roles[u]],
        rng,
    )?;

    let texts: Vec<String> = (0..n)
        .map(|u| lex.make_text(rng, kw[u], Some(ROLE_WORDS[roles[u]])))
        .collect();
    TAGraph::new(texts, edges.pairs(), labels.into_iter().map(Some).collect(), lex.categories.clone())
}

/// Add hub edges until, for every node, the keyword plurality over the
/// neighbors selected by `counts` is its label. New partners come from
/// `pool(u)`; once that is exhausted, an edge to a counted non-hub
/// neighbor with a competing keyword is dropped instead.
fn repair_plurality<'a>(
    edges: &mut EdgeSet,
    labels: &[usize],
    kw: &[usize],
    k: usize,
    counts: impl Fn(usize, usize) -> bool,
    pool: impl Fn(usize) -> &'a [usize],
    rng: &mut SeededRng,
) -> Result<(), GraphError> {
    let n = labels.len();
    for round in 0.. {
        let failing: Vec<usize> = (0..n)
            .filter(|&u| {
                let mut c = vec![0; k];
                for &v in edges.adj[u].iter().filter(|&&v| counts(u, v)) {
                    c[kw[v]] += 1;
                }
                plurality(&c) != Some(labels[u])
            })
            .collect();
        if failing.is_empty() {
            return Ok(());
        }
        if round > 4 * n {
            return Err(GraphError::InvalidSpec("could not make every label the neighbor-keyword plurality".into()));
        }
        for u in failing {
            let free: Vec<usize> = pool(u)
                .iter()
                .copied()
                .filter(|&h| h != u && !edges.adj[u].contains(&h))
                .collect();
            if !free.is_empty() {
                edges.add(u, free[rng.below(free.len())]);
                continue;
            }
            let rivals: Vec<usize> = edges.adj[u]
                .iter()
                .copied()
                .filter(|&v| counts(u, v) && kw[v] != labels[u] && kw[v] != labels[v])
                .collect();
            if rivals.is_empty() {
                return Err(GraphError::InvalidSpec(format!(
                    "node {u}: cannot establish its label as the neighbor-keyword plurality"
                )));
            }
            edges.remove(u, rivals[rng.below(rivals.len())]);
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: SyntheticMode) -> SyntheticSpec {
        SyntheticSpec {
            mode,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_single_class_and_low_degree() {
        let mut s = spec(SyntheticMode::StructureOnly);
        s.n_classes = 1;
        assert!(gen_synthetic_tag(&s).is_err());
        let mut s = spec(SyntheticMode::TextInformative);
        s.avg_degree = 1.0;
        assert!(gen_synthetic_tag(&s).is_err());
        let mut s = spec(SyntheticMode::StructureOnly);
        s.n_nodes = 10;
        assert!(gen_synthetic_tag(&s).is_err());
    }

    #[test]
    fn every_text_has_exactly_one_keyword() {
        let lex = Lexicon::standard(3);
        for mode in [SyntheticMode::TextInformative, SyntheticMode::StructureOnly, SyntheticMode::TwoRelation] {
            let g = gen_synthetic_tag(&spec(mode)).unwrap();
            for t in g.texts() {
                assert_eq!(lex.keyword_classes_in(t).len(), 1, "{t}");
            }
        }
    }

    #[test]
    fn pure_text_informative_keyword_is_label() {
        let g = gen_synthetic_tag(&spec(SyntheticMode::TextInformative)).unwrap();
        let lex = Lexicon::standard(3);
        for u in 0..g.node_count() {
            assert_eq!(lex.text_keyword_class(g.text(u)), g.label(u));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(SyntheticMode::StructureOnly);
        assert_eq!(gen_synthetic_tag(&s).unwrap(), gen_synthetic_tag(&s).unwrap());
    }

    #[test]
    fn keyword_sets_are_disjoint() {
        let lex = Lexicon::standard(9);
        let mut all: Vec<&String> = lex.keywords.iter().flatten().collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert!(lex.keywords.iter().all(|k| k.len() == 8));
        assert!(lex.filler.iter().all(|w| lex.keyword_class(w).is_none()));
    }

    #[test]
    fn plurality_ties_are_none() {
        assert_eq!(plurality(&[2, 3, 1]), Some(1));
        assert_eq!(plurality(&[2, 2, 1]), None);
        assert_eq!(plurality(&[0, 0]), None);
    }
}
