use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "n_layers=1\nd_model=16\nn_heads=2\nmlp_dim=32\nmax_positions=128\npretrain_steps=20\n\
                    corpus_docs=100\nmax_steps=10\neval_every=5\nd_ch=4\n";

fn dgtl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgtl"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dgtl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// The single stderr line of a failed run, which must name `class`.
fn fails_with(dir: &Path, args: &[&str], class: &str) {
    let out = dgtl(dir, args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{class}]: ")), "{err}");
}

/// Dataset `data` and a tiny pretrained LM `lm` under `dir`.
fn setup(dir: &Path) {
    fs::write(dir.join("tiny.txt"), TINY).unwrap();
    ok(dir, &["gen-data", "--nodes", "120", "--seed", "1", "--out", "data"]);
    ok(dir, &["pretrain", "--config", "tiny.txt", "--dataset", "data", "--out", "lm"]);
}

#[test]
fn gen_data_writes_the_format_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(d, &["gen-data", "--mode", "structure_only", "--nodes", "300", "--classes", "3", "--seed", "7", "--out", out]);
    }
    for f in ["nodes.tsv", "edges.tsv", "categories.txt", "split.tsv"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    assert!(manifest.starts_with("command=gen-data\n"));
    assert!(manifest.contains("\nseed=7\n") && manifest.contains("\nmode=structure_only\n"));
}

#[test]
fn bad_inputs_fail_with_one_classified_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fails_with(d, &["gen-data", "--classes", "1", "--out", "x"], "invalid_spec");
    fails_with(d, &["gen-data", "--bogus"], "usage");
    fails_with(d, &["gen-data", "--set", "max_stpes=3", "--out", "x"], "config");
    fails_with(d, &["gen-data"], "config");
    fails_with(d, &["train", "--dataset", "nowhere", "--lm-checkpoint", "lm", "--out", "t"], "dataset");
    ok(d, &["gen-data", "--nodes", "120", "--out", "data"]);
    fails_with(d, &["train", "--dataset", "data", "--lm-checkpoint", "lm", "--out", "t"], "missing_checkpoint");
    fs::write(d.join("data/categories.txt"), "alpha\nbeta\ngamma\n").unwrap();
    let nodes = fs::read_to_string(d.join("data/nodes.tsv")).unwrap();
    let relabeled = nodes
        .replace("\tcase based\t", "\talpha\t")
        .replace("\tgenetic algorithms\t", "\tbeta\t")
        .replace("\tneural networks\t", "\tgamma\t");
    fs::write(d.join("data/nodes.tsv"), relabeled).unwrap();
    fails_with(d, &["pretrain", "--dataset", "data", "--out", "lm"], "lexicon_mismatch");
}

#[test]
fn train_then_eval_over_five_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let lm_manifest = fs::read_to_string(d.join("lm/manifest.txt")).unwrap();
    assert!(lm_manifest.contains("result.lm_checksum="));

    ok(d, &["train", "--config", "tiny.txt", "--dataset", "data", "--lm-checkpoint", "lm", "--out", "theta"]);
    for f in ["theta.ckpt", "train_log.tsv", "manifest.txt"] {
        assert!(d.join("theta").join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(d.join("theta/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let args = [
        "eval", "--config", "tiny.txt", "--dataset", "data", "--lm-checkpoint", "lm", "--method", "dgtl", "--seeds", "5",
        "--out", "ev",
    ];
    let stdout = ok(d, &args);
    assert!(stdout.contains("data dgtl: ") && stdout.contains(" ± ") && stdout.contains("over 5 seeds"), "{stdout}");
    let report = fs::read_to_string(d.join("ev/report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 6);
    assert!(report.starts_with("dataset\tmethod\tseed\tscore\t"));

    let args = [
        "eval", "--config", "tiny.txt", "--dataset", "data", "--lm-checkpoint", "lm", "--theta-checkpoint", "theta",
        "--out", "ev_theta",
    ];
    ok(d, &args);
}

#[test]
fn zero_hop_needs_no_theta() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = ok(d, &["eval", "--dataset", "data", "--lm-checkpoint", "lm", "--method", "0hop", "--out", "ev"]);
    assert!(out.contains("data 0hop: "), "{out}");
    let out = ok(d, &["eval", "--dataset", "data", "--method", "gcn", "--set", "gcn_epochs=20", "--out", "gcn"]);
    assert!(out.contains("data gcn: "), "{out}");
}

#[test]
fn tampered_lm_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let p = d.join("lm/manifest.txt");
    let m = fs::read_to_string(&p).unwrap();
    fs::write(&p, m.replace("result.lm_checksum=", "result.lm_checksum=00")).unwrap();
    fails_with(d, &["train", "--config", "tiny.txt", "--dataset", "data", "--lm-checkpoint", "lm", "--out", "t"], "checksum_mismatch");
}

#[test]
fn manifest_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["train", "--config", "tiny.txt", "--dataset", "data", "--lm-checkpoint", "lm", "--method", "wo_disen", "--out", "a"]);
    ok(d, &["train", "--config", "a/manifest.txt", "--out", "b"]);
    assert_eq!(fs::read(d.join("a/theta.ckpt")).unwrap(), fs::read(d.join("b/theta.ckpt")).unwrap());
    let a = fs::read_to_string(d.join("a/manifest.txt")).unwrap();
    let b = fs::read_to_string(d.join("b/manifest.txt")).unwrap();
    assert_eq!(a.replace("out=a\n", "out=b\n"), b);
    assert!(a.contains("\nmethod=wo_disen\n"));
    fails_with(d, &["eval", "--config", "a/manifest.txt", "--out", "c"], "config");
}

#[test]
fn explain_writes_one_line_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["train", "--config", "tiny.txt", "--dataset", "data", "--lm-checkpoint", "lm", "--out", "theta"]);
    let args = [
        "explain", "--dataset", "data", "--lm-checkpoint", "lm", "--theta-checkpoint", "theta", "--node-ids", "0,5,9",
        "--out", "ex",
    ];
    ok(d, &args);
    let text = fs::read_to_string(d.join("ex/explanations.tsv")).unwrap();
    let ids: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ids, ["0", "5", "9"]);
    fails_with(d, &["explain", "--dataset", "data", "--lm-checkpoint", "lm", "--node-ids", "999", "--out", "ex"], "config");
}

#[test]
fn gradcheck_passes_on_six_nodes_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["gradcheck", "--nodes", "6", "--set", "max_coords=300", "--out", "gc"]);
    let err: f64 = out.strip_prefix("max_rel_error=").unwrap().split('\t').next().unwrap().parse().unwrap();
    assert!(err < 1e-4, "{out}");
    assert!(fs::read_to_string(d.join("gc/manifest.txt")).unwrap().contains("result.coords=300"));
    // A step this small leaves only rounding noise in the differences.
    let args = ["gradcheck", "--set", "max_coords=100", "--set", "epsilon=1e-9", "--set", "floor=1e-12"];
    fails_with(d, &args, "gradcheck_failed");
}
