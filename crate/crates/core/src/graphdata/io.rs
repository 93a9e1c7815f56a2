//! Dataset directory format.
//!
//! - `categories.txt`: one category per line; line order defines indices.
//! - `nodes.tsv`: `node_id<TAB>label<TAB>text`, label is a category name or
//!   `?`; backslash, TAB, CR and LF inside fields are escaped as `\\`, `\t`,
//!   `\r`, `\n`. Node ids must be `0..n` in order.
//! - `edges.tsv`: `u<TAB>v` per line.
//! - `split.tsv` (optional): `node_id<TAB>train|test`.

use std::fs;
use std::path::Path;

use super::{GraphError, Split, TAGraph};

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), GraphError> {
    fs::write(path, contents).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub(crate) fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(ch) = it.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match it.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.is_empty())
}

fn malformed(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Malformed {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_tag(dir: impl AsRef<Path>) -> Result<TAGraph, GraphError> {
    let dir = dir.as_ref();
    let categories: Vec<String> = lines(&read(&dir.join("categories.txt"))?)
        .map(|(_, l)| l.to_string())
        .collect();

    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines(&read(&dir.join("nodes.tsv"))?) {
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(malformed("nodes.tsv", ln, "expected node_id, label, text"));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| malformed("nodes.tsv", ln, format!("bad node id {:?}", fields[0])))?;
        if id != texts.len() {
            return Err(malformed("nodes.tsv", ln, format!("node id {id} out of order, expected {}", texts.len())));
        }
        let label_name = unescape(fields[1]).ok_or_else(|| malformed("nodes.tsv", ln, "bad escape in label"))?;
        let label = if label_name == "?" {
            None
        } else {
            Some(categories.iter().position(|c| *c == label_name).ok_or(GraphError::UnknownLabel {
                file: "nodes.tsv".into(),
                line: ln,
                label: label_name,
            })?)
        };
        let text = unescape(fields[2]).ok_or_else(|| malformed("nodes.tsv", ln, "bad escape in text"))?;
        if text.trim().is_empty() {
            return Err(malformed("nodes.tsv", ln, "empty text"));
        }
        texts.push(text);
        labels.push(label);
    }

    let n = texts.len();
    let mut edges = Vec::new();
    for (ln, line) in lines(&read(&dir.join("edges.tsv"))?) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(malformed("edges.tsv", ln, "expected u, v"));
        }
        let mut ends = [0usize; 2];
        for (k, f) in fields.iter().enumerate() {
            ends[k] = f
                .parse()
                .map_err(|_| malformed("edges.tsv", ln, format!("bad node id {f:?}")))?;
            if ends[k] >= n {
                return Err(GraphError::DanglingEdge {
                    file: "edges.tsv".into(),
                    line: ln,
                    node: ends[k],
                });
            }
        }
        if ends[0] == ends[1] {
            return Err(GraphError::SelfEdge {
                file: "edges.tsv".into(),
                line: ln,
                node: ends[0],
            });
        }
        edges.push((ends[0], ends[1]));
    }
    TAGraph::new(texts, edges, labels, categories)
}

pub fn save_tag(graph: &TAGraph, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut cats = String::new();
    for c in graph.categories() {
        cats.push_str(c);
        cats.push('\n');
    }
    write(&dir.join("categories.txt"), &cats)?;

    let mut nodes = String::new();
    for u in 0..graph.node_count() {
        let label = match graph.label(u) {
            Some(l) => escape(&graph.categories()[l]),
            None => "?".to_string(),
        };
        nodes.push_str(&format!("{u}\t{label}\t{}\n", escape(graph.text(u))));
    }
    write(&dir.join("nodes.tsv"), &nodes)?;

    let mut edges = String::new();
    for (u, v) in graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(&dir.join("edges.tsv"), &edges)
}

pub fn save_split(split: &Split, dir: impl AsRef<Path>) -> Result<(), GraphError> {
    let mut rows: Vec<(usize, &str)> = split.train.iter().map(|&u| (u, "train")).collect();
    rows.extend(split.test.iter().map(|&u| (u, "test")));
    rows.sort_unstable();
    let body: String = rows.iter().map(|(u, s)| format!("{u}\t{s}\n")).collect();
    write(&dir.as_ref().join("split.tsv"), &body)
}

/// Read `split.tsv` if present.
pub fn load_split(dir: impl AsRef<Path>, graph: &TAGraph) -> Result<Option<Split>, GraphError> {
    let path = dir.as_ref().join("split.tsv");
    if !path.exists() {
        return Ok(None);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (ln, line) in lines(&read(&path)?) {
        let (id, kind) = line
            .split_once('\t')
            .ok_or_else(|| malformed("split.tsv", ln, "expected node_id, train|test"))?;
        let id: usize = id.parse().map_err(|_| malformed("split.tsv", ln, "bad node id"))?;
        if id >= graph.node_count() {
            return Err(GraphError::DanglingEdge {
                file: "split.tsv".into(),
                line: ln,
                node: id,
            });
        }
        match kind {
            "train" => train.push(id),
            "test" => test.push(id),
            other => return Err(malformed("split.tsv", ln, format!("unknown set {other:?}"))),
        }
    }
    let split = Split { train, test, seed: None };
    split.validate(graph)?;
    Ok(Some(split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, cats: &str, nodes: &str, edges: &str) {
        fs::write(dir.join("categories.txt"), cats).unwrap();
        fs::write(dir.join("nodes.tsv"), nodes).unwrap();
        fs::write(dir.join("edges.tsv"), edges).unwrap();
    }

    #[test]
    fn two_node_fixture() {
        let d = tempfile::tempdir().unwrap();
        write_fixture(d.path(), "a\nb\n", "0\ta\thello\n1\t?\tworld\n", "0\t1\n");
        let g = load_tag(d.path()).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.label(1), None);
    }

    #[test]
    fn reversed_edges_dedupe() {
        let d = tempfile::tempdir().unwrap();
        write_fixture(d.path(), "a\n", "0\ta\tx\n1\ta\ty\n", "0\t1\n1\t0\n");
        let g = load_tag(d.path()).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(0).unwrap(), &[1]);
    }

    #[test]
    fn cora_shaped_categories() {
        let d = tempfile::tempdir().unwrap();
        let cats = "case based\ngenetic algorithms\nneural networks\nprobabilistic methods\nreinforcement learning\nrule learning\ntheory\n";
        write_fixture(d.path(), cats, "0\ttheory\tsome paper\n", "");
        assert_eq!(load_tag(d.path()).unwrap().categories().len(), 7);
    }

    #[test]
    fn error_paths_carry_line_numbers() {
        let d = tempfile::tempdir().unwrap();
        write_fixture(d.path(), "a\n", "0\ta\tx\n1\tzzz\ty\n", "");
        assert!(matches!(load_tag(d.path()), Err(GraphError::UnknownLabel { line: 2, .. })));

        write_fixture(d.path(), "a\n", "0\ta\tx\n1\ta\ty\n", "0\t1\n1\t5\n");
        assert!(matches!(load_tag(d.path()), Err(GraphError::DanglingEdge { line: 2, node: 5, .. })));

        write_fixture(d.path(), "a\n", "0\ta\tx\n", "0\t0\n");
        assert!(matches!(load_tag(d.path()), Err(GraphError::SelfEdge { .. })));

        write_fixture(d.path(), "a\n", "0\ta\n", "");
        assert!(matches!(load_tag(d.path()), Err(GraphError::Malformed { line: 1, .. })));

        write_fixture(d.path(), "a\n", "0\ta\tx\n", "");
        fs::remove_file(d.path().join("edges.tsv")).unwrap();
        assert!(matches!(load_tag(d.path()), Err(GraphError::Io { .. })));
    }

    #[test]
    fn escapes_survive_round_trip() {
        let s = "tab\there\nnew\\line\r";
        assert_eq!(unescape(&escape(s)).unwrap(), s);
        assert!(!escape(s).contains('\t'));
        assert!(unescape("bad\\q").is_none());
    }
}
