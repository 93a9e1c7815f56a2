use dgtl::graphdata::{
    gen_synthetic_tag, load_split, load_tag, make_split, save_split, save_tag, Lexicon, SyntheticMode, SyntheticSpec,
    ROLE_WORDS,
};
use proptest::prelude::*;

fn structure_only(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_nodes: 300,
        n_classes: 3,
        mode: SyntheticMode::StructureOnly,
        keyword_purity: 1.0,
        avg_degree: 6.0,
        seed,
    }
}

/// Joint counts of (own keyword class, label).
fn contingency(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let g = gen_synthetic_tag(spec).unwrap();
    let lex = Lexicon::standard(spec.n_classes);
    let mut t = vec![vec![0.0; spec.n_classes]; spec.n_classes];
    for u in 0..g.node_count() {
        let k = lex.text_keyword_class(g.text(u)).unwrap();
        t[k][g.label(u).unwrap()] += 1.0;
    }
    t
}

fn mutual_information(t: &[Vec<f64>]) -> f64 {
    let n: f64 = t.iter().flatten().sum();
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (c * n / (rows[i] * cols[j])).ln();
            }
        }
    }
    mi
}

fn chi_square(t: &[Vec<f64>]) -> f64 {
    let n: f64 = t.iter().flatten().sum();
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut x = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            let e = rows[i] * cols[j] / n;
            x += (c - e).powi(2) / e;
        }
    }
    x
}

#[test]
fn structure_only_own_keyword_carries_no_label_information() {
    for seed in 0..5 {
        let mi = mutual_information(&contingency(&structure_only(seed)));
        assert!(mi < 0.01, "seed {seed}: MI {mi}");
    }
}

#[test]
fn structure_only_passes_chi_square_independence() {
    // Critical value of chi-square with (3-1)^2 = 4 degrees of freedom at 0.05.
    const CRIT_DF4_P05: f64 = 9.487729;
    for seed in 0..5 {
        let x = chi_square(&contingency(&structure_only(seed)));
        assert!(x < CRIT_DF4_P05, "seed {seed}: chi2 {x}");
    }
}

#[test]
fn structure_only_neighbor_majority_recovers_labels() {
    for seed in 0..5 {
        let spec = structure_only(seed);
        let g = gen_synthetic_tag(&spec).unwrap();
        let lex = Lexicon::standard(3);
        let mut correct = 0;
        for u in 0..g.node_count() {
            let mut counts = [0usize; 3];
            for &v in g.neighbors(u).unwrap() {
                counts[lex.text_keyword_class(g.text(v)).unwrap()] += 1;
            }
            let max = *counts.iter().max().unwrap();
            let winners: Vec<usize> = (0..3).filter(|&c| counts[c] == max).collect();
            if winners == [g.label(u).unwrap()] {
                correct += 1;
            }
        }
        let acc = correct as f64 / g.node_count() as f64;
        assert!(acc >= 0.95, "seed {seed}: majority oracle {acc}");
    }
}

#[test]
fn structure_only_is_homophilous_with_target_degree() {
    let g = gen_synthetic_tag(&structure_only(1)).unwrap();
    let within = g.edges().filter(|&(u, v)| g.label(u) == g.label(v)).count();
    let total = g.edge_count();
    assert!(within as f64 / total as f64 > 0.9, "{within}/{total}");
    let mean_degree = 2.0 * total as f64 / g.node_count() as f64;
    assert!((4.0..=10.0).contains(&mean_degree), "mean degree {mean_degree}");
}

#[test]
fn text_informative_pure_keywords_determine_labels() {
    let spec = SyntheticSpec {
        mode: SyntheticMode::TextInformative,
        ..structure_only(4)
    };
    let g = gen_synthetic_tag(&spec).unwrap();
    let lex = Lexicon::standard(3);
    let hits = (0..g.node_count())
        .filter(|&u| lex.text_keyword_class(g.text(u)) == g.label(u))
        .count();
    assert_eq!(hits, g.node_count());
}

#[test]
fn infeasible_structure_only_is_rejected() {
    let spec = SyntheticSpec {
        n_nodes: 12,
        ..structure_only(0)
    };
    assert!(gen_synthetic_tag(&spec).is_err());
}

fn role(text: &str) -> usize {
    let found: Vec<usize> = text
        .split_whitespace()
        .filter_map(|w| ROLE_WORDS.iter().position(|r| *r == w))
        .collect();
    assert_eq!(found.len(), 1, "{text}");
    found[0]
}

#[test]
fn two_relation_roles_separate_the_relations() {
    for seed in 0..5 {
        let spec = SyntheticSpec {
            mode: SyntheticMode::TwoRelation,
            ..structure_only(seed)
        };
        let g = gen_synthetic_tag(&spec).unwrap();
        let lex = Lexicon::standard(3);
        let roles: Vec<usize> = (0..g.node_count()).map(|u| role(g.text(u))).collect();
        let kw: Vec<usize> = (0..g.node_count())
            .map(|u| lex.text_keyword_class(g.text(u)).unwrap())
            .collect();
        let (mut same_plural, mut all_plural) = (0, 0);
        for u in 0..g.node_count() {
            let y = g.label(u).unwrap();
            let mut same = vec![0; 3];
            let mut all = vec![0; 3];
            for &v in g.neighbors(u).unwrap() {
                all[kw[v]] += 1;
                if roles[v] == roles[u] {
                    same[kw[v]] += 1;
                    assert_eq!(g.label(v), Some(y), "same-role edge {u}-{v} crosses labels");
                } else {
                    assert_ne!(g.label(v), Some(y), "cross-role edge {u}-{v} joins one label");
                }
            }
            let strict = |c: &[usize]| c.iter().enumerate().all(|(j, &x)| j == y || x < c[y]);
            same_plural += strict(&same) as usize;
            all_plural += strict(&all) as usize;
        }
        assert_eq!(same_plural, g.node_count());
        // Without roles the neighborhood is a much weaker cue.
        assert!(all_plural < g.node_count() * 9 / 10, "seed {seed}: {all_plural}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn save_load_round_trip(seed in 0u64..1000, mode in 0usize..3, classes in 2usize..5) {
        let mode = [SyntheticMode::TextInformative, SyntheticMode::StructureOnly, SyntheticMode::TwoRelation][mode];
        let spec = SyntheticSpec { n_nodes: 120, n_classes: classes, mode, keyword_purity: 0.7, avg_degree: 6.0, seed };
        let g = gen_synthetic_tag(&spec).unwrap();
        let d = tempfile::tempdir().unwrap();
        save_tag(&g, d.path()).unwrap();
        let back = load_tag(d.path()).unwrap();
        prop_assert_eq!(&back, &g);

        let split = make_split(&g, 5, None, seed).unwrap();
        save_split(&split, d.path()).unwrap();
        let loaded = load_split(d.path(), &back).unwrap().unwrap();
        prop_assert_eq!(&loaded.train, &split.train);
        prop_assert_eq!(&loaded.test, &split.test);
    }
}

