//! One function per subcommand. Each reads the resolved settings, writes its
//! artifacts and a manifest to `out`, and reports failures by class.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dgtl::eval::{
    aggregate, explain, predict_nodes, render_reports, run_0hop, run_dgtl, run_gcn_reference, run_wo_disen,
    EvalError, EvalReport, GcnConfig, Method,
};
use dgtl::gnn::DisentangledParams;
use dgtl::graphdata::{
    gen_synthetic_tag, load_split, load_tag, make_split, save_split, save_tag, GraphError, Lexicon, Split,
    SyntheticSpec, TAGraph,
};
use dgtl::kv::KvMap;
use dgtl::lm::{FrozenLm, CHECKPOINT_FILE};
use dgtl::pipeline::{
    build_corpus, build_vocab, full_pipeline_grad_check, load_theta, pretrain_lm, save_theta, train_dgtl, CorpusSpec,
    DatasetKind, GradCheckSetup, LogRow, PipelineError, PretrainConfig, PromptTemplate, PromptVariant, Task,
    THETA_FILE,
};

use crate::config::{self, get, path, Cmd, MANIFEST_FILE, RESULT_PREFIX};
use crate::failure::{Failure, ResultExt};

/// Gradient checks at or above this relative error fail.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn run(cmd: Cmd, file: Option<&Path>, overrides: &KvMap) -> Result<(), Failure> {
    let m = config::resolve(cmd, file, overrides)?;
    match cmd {
        Cmd::GenData => gen_data(&m),
        Cmd::Pretrain => pretrain(&m),
        Cmd::Train => train(&m),
        Cmd::Eval => eval(&m),
        Cmd::Explain => explain_nodes(&m),
        Cmd::GradCheck => gradcheck(&m),
    }
}

fn graph_failure(e: GraphError) -> Failure {
    let class = match e {
        GraphError::InvalidSpec(_) => "invalid_spec",
        GraphError::Io { .. } => "io",
        _ => "dataset",
    };
    Failure { class, error: e.into() }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    let class = match e {
        PipelineError::Io { .. } => "io",
        PipelineError::Config(_) | PipelineError::Kv(_) | PipelineError::ContextOverflow { .. } => "config",
        PipelineError::Graph(_) | PipelineError::Unlabeled(_) | PipelineError::EmptyTrain => "dataset",
        PipelineError::NonFinite { .. } => "non_finite",
        _ => "runtime",
    };
    Failure { class, error: e.into() }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Pipeline(p) => pipeline_failure(p),
        EvalError::Unlabeled(_) => Failure { class: "dataset", error: e.into() },
        e => Failure { class: "runtime", error: e.into() },
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn out_dir(m: &KvMap) -> Result<PathBuf, Failure> {
    let out = path(m, "out")?;
    fs::create_dir_all(&out).map_err(|e| Failure::new("io", format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn write_manifest(out: &Path, cmd: Cmd, m: &KvMap, results: &KvMap) -> Result<(), Failure> {
    write(&out.join(MANIFEST_FILE), config::manifest(cmd, m, results))
}

struct Data {
    name: String,
    dir: PathBuf,
    graph: TAGraph,
    kind: DatasetKind,
}

fn load_data(m: &KvMap) -> Result<Data, Failure> {
    let dir = path(m, "dataset")?;
    if !dir.is_dir() {
        return Err(Failure::new("dataset", format!("dataset directory {} does not exist", dir.display())));
    }
    let graph = load_tag(&dir).map_err(graph_failure)?;
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Data {
        name,
        dir,
        graph,
        kind: get(m, "dataset_kind")?,
    })
}

fn split_for(m: &KvMap, data: &Data, seed: u64) -> Result<Split, Failure> {
    match m.get("split").unwrap_or("seeded") {
        "seeded" => make_split(&data.graph, get(m, "per_class")?, None, seed).map_err(graph_failure),
        "file" => load_split(&data.dir, &data.graph)
            .map_err(graph_failure)?
            .ok_or_else(|| Failure::new("dataset", format!("{} has no split.tsv", data.dir.display()))),
        other => Err(Failure::new("config", format!("split must be seeded or file, got {other:?}"))),
    }
}

/// Load the frozen LM and check it against the checksum recorded by the
/// config (a rerun manifest) or by the checkpoint's own manifest.
fn load_lm(m: &KvMap) -> Result<(FrozenLm<f32>, String), Failure> {
    let dir = path(m, "lm_checkpoint")?;
    if !dir.join(CHECKPOINT_FILE).is_file() {
        return Err(Failure::new("missing_checkpoint", format!("no LM checkpoint in {}", dir.display())));
    }
    let lm = FrozenLm::<f32>::load(&dir).class("checkpoint")?;
    let sum = lm.checksum();
    let key = format!("{RESULT_PREFIX}lm_checksum");
    let expected = match m.get(&key) {
        Some(s) => Some(s.to_string()),
        None => fs::read_to_string(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|t| KvMap::parse(&t).ok())
            .and_then(|k| k.get(&key).map(str::to_string)),
    };
    if let Some(e) = expected {
        if e != sum {
            return Err(Failure::new(
                "checksum_mismatch",
                format!("LM in {} has checksum {sum}, expected {e}", dir.display()),
            ));
        }
    }
    Ok((lm, sum))
}

fn check_unchanged(lm: &FrozenLm<f32>, before: &str) -> Result<(), Failure> {
    let after = lm.checksum();
    if after != before {
        return Err(Failure::new(
            "checksum_mismatch",
            format!("frozen LM changed during the run: {before} -> {after}"),
        ));
    }
    Ok(())
}

fn load_theta_opt(m: &KvMap) -> Result<Option<DisentangledParams<f32>>, Failure> {
    let Some(dir) = m.get("theta_checkpoint").map(PathBuf::from) else {
        return Ok(None);
    };
    if !dir.join(THETA_FILE).is_file() {
        return Err(Failure::new("missing_checkpoint", format!("no theta checkpoint in {}", dir.display())));
    }
    load_theta(&dir).map(Some).map_err(|e| Failure {
        class: "checkpoint",
        error: e.into(),
    })
}

fn gen_data(m: &KvMap) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        n_nodes: get(m, "nodes")?,
        n_classes: get(m, "classes")?,
        mode: get(m, "mode")?,
        keyword_purity: get(m, "purity")?,
        avg_degree: get(m, "degree")?,
        seed: get(m, "seed")?,
    };
    let graph = gen_synthetic_tag(&spec).map_err(graph_failure)?;
    let out = out_dir(m)?;
    save_tag(&graph, &out).map_err(graph_failure)?;
    let split = make_split(&graph, get(m, "per_class")?, None, spec.seed).map_err(graph_failure)?;
    save_split(&split, &out).map_err(graph_failure)?;
    let mut r = KvMap::new();
    r.set("node_count", graph.node_count());
    r.set("edge_count", graph.edge_count());
    write_manifest(&out, Cmd::GenData, m, &r)?;
    println!(
        "{} nodes, {} edges, {} classes -> {}",
        graph.node_count(),
        graph.edge_count(),
        spec.n_classes,
        out.display()
    );
    Ok(())
}

fn pretrain(m: &KvMap) -> Result<(), Failure> {
    let data = load_data(m)?;
    let cats = data.graph.categories();
    let lex = Lexicon::standard(cats.len());
    if lex.categories != cats {
        return Err(Failure::new(
            "lexicon_mismatch",
            format!("categories {cats:?} differ from the standard lexicon {:?}", lex.categories),
        ));
    }
    let seed: u64 = get(m, "seed")?;
    let template = PromptTemplate::new(data.kind, get(m, "k")?);
    let vocab = build_vocab(&data.graph, &lex, &template);
    let cfg = config::lm_config(m, vocab.len())?;
    let spec = CorpusSpec {
        docs: get(m, "corpus_docs")?,
        seed,
        ..Default::default()
    };
    let corpus =
        build_corpus(&data.graph, &lex, &template, &vocab, cfg.max_positions, &spec).map_err(pipeline_failure)?;
    let pcfg = PretrainConfig {
        steps: get(m, "pretrain_steps")?,
        batch_size: get(m, "pretrain_batch_size")?,
        lr: get(m, "pretrain_lr")?,
        seed,
    };
    let outcome = pretrain_lm(&cfg, vocab, &corpus, &pcfg).map_err(pipeline_failure)?;
    let out = out_dir(m)?;
    outcome.lm.save(&out).class("io")?;
    let mut log = String::from("step\tloss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        log.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    write(&out.join("pretrain_log.tsv"), log)?;
    let sum = outcome.lm.checksum();
    let mut r = KvMap::new();
    r.set("lm_checksum", &sum);
    r.set("vocab_size", cfg.vocab_size);
    r.set("final_loss", format!("{:.6}", outcome.losses.last().copied().unwrap_or(f64::NAN)));
    write_manifest(&out, Cmd::Pretrain, m, &r)?;
    println!("pretrained {} steps, vocab {}, checksum {sum}", pcfg.steps, cfg.vocab_size);
    Ok(())
}

fn trained_method(m: &KvMap) -> Result<Method, Failure> {
    let method: Method = get(m, "method")?;
    match method {
        Method::Dgtl | Method::WoDisen => Ok(method),
        other => Err(Failure::new("config", format!("train supports dgtl and wo_disen, not {other}"))),
    }
}

fn train(m: &KvMap) -> Result<(), Failure> {
    let method = trained_method(m)?;
    let data = load_data(m)?;
    let (lm, sum) = load_lm(m)?;
    let mut cfg = config::train_config(m)?;
    if method == Method::WoDisen {
        cfg.delta = 1.0;
    }
    let template = PromptTemplate::new(data.kind, cfg.k);
    let task = Task::new(&data.graph, &lm, &template, PromptVariant::Neighbors).map_err(pipeline_failure)?;
    let split = split_for(m, &data, cfg.seed)?;
    let outcome = train_dgtl(&lm, &task, &split.train, &split.test, &cfg).map_err(pipeline_failure)?;
    check_unchanged(&lm, &sum)?;

    let out = out_dir(m)?;
    save_theta(&outcome.params, &out).map_err(pipeline_failure)?;
    let mut log = format!("{}\n", LogRow::HEADER);
    for row in &outcome.log {
        log.push_str(&row.render());
        log.push('\n');
    }
    write(&out.join("train_log.tsv"), log)?;
    let last = outcome.log.last().expect("training logs its final step");
    let mut r = KvMap::new();
    r.set("lm_checksum", &sum);
    r.set("steps", outcome.losses.len());
    r.set("stopped_early", outcome.stopped_early);
    r.set("final_loss", format!("{:.6}", last.loss));
    r.set("train_acc", format!("{:.4}", last.train_acc));
    if let Some(a) = last.test_acc {
        r.set("test_acc", format!("{a:.4}"));
    }
    write_manifest(&out, Cmd::Train, m, &r)?;
    println!(
        "{method}: {} steps, loss {:.4}, train acc {:.4}, test acc {}",
        outcome.losses.len(),
        last.loss,
        last.train_acc,
        last.test_acc.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

fn eval(m: &KvMap) -> Result<(), Failure> {
    let method: Method = get(m, "method")?;
    let seed: u64 = get(m, "seed")?;
    let seeds: usize = get(m, "seeds")?;
    if seeds == 0 {
        return Err(Failure::new("config", "seeds must be positive"));
    }
    let data = load_data(m)?;
    let lm = match method {
        Method::Gcn => None,
        _ => Some(load_lm(m)?),
    };
    let theta = match method {
        Method::Dgtl | Method::WoDisen => load_theta_opt(m)?,
        _ => None,
    };
    let mut cfg = config::train_config(m)?;
    if let Some(t) = &theta {
        if t.k() != cfg.k {
            return Err(Failure::new("config", format!("theta has k = {}, config says {}", t.k(), cfg.k)));
        }
        if method == Method::WoDisen && t.delta != 1.0 {
            return Err(Failure::new("config", format!("wo_disen needs delta = 1, theta has {}", t.delta)));
        }
    }
    let template = PromptTemplate::new(data.kind, cfg.k);
    let task = match (&lm, method) {
        (Some((lm, _)), Method::Dgtl | Method::WoDisen) => {
            Some(Task::new(&data.graph, lm, &template, PromptVariant::Neighbors).map_err(pipeline_failure)?)
        }
        _ => None,
    };

    let mut reports: Vec<EvalReport> = Vec::with_capacity(seeds);
    for s in seed..seed + seeds as u64 {
        let split = split_for(m, &data, s)?;
        let report = match (method, &lm, &task, &theta) {
            (Method::Gcn, ..) => {
                let g = GcnConfig {
                    hidden: get(m, "gcn_hidden")?,
                    lr: get(m, "gcn_lr")?,
                    epochs: get(m, "gcn_epochs")?,
                    seed: s,
                };
                run_gcn_reference(&data.name, &data.graph, &split, &g).map_err(eval_failure)?
            }
            (Method::ZeroHop, Some((lm, _)), ..) => {
                run_0hop(&data.name, &data.graph, &split, lm, &template, s).map_err(eval_failure)?
            }
            (_, Some((lm, _)), Some(task), Some(theta)) => {
                let start = Instant::now();
                let preds = predict_nodes(lm, task, Some(theta), &split.test).map_err(eval_failure)?;
                let c = data.graph.categories().len();
                let mut r =
                    EvalReport::from_predictions(&data.name, method, s, data.graph.labels(), c, &split.test, &preds)
                        .map_err(eval_failure)?;
                r.runtime_secs = start.elapsed().as_secs_f64();
                r
            }
            (_, Some((lm, _)), Some(task), None) => {
                cfg.seed = s;
                let run = if method == Method::Dgtl { run_dgtl } else { run_wo_disen };
                run(&data.name, task, &split, lm, &cfg).map_err(eval_failure)?.0
            }
            _ => unreachable!("the LM and task are loaded for every LM method"),
        };
        eprintln!("seed {s}: {:.2}", report.score);
        reports.push(report);
    }
    if let Some((lm, sum)) = &lm {
        check_unchanged(lm, sum)?;
    }

    let out = out_dir(m)?;
    let agg = aggregate(&reports).map_err(eval_failure)?;
    write(&out.join("report.tsv"), render_reports(&reports))?;
    write(&out.join("summary.txt"), format!("{}\n", agg.render()))?;
    let mut timing = String::from("seed\truntime_secs\n");
    for r in &reports {
        timing.push_str(&format!("{}\t{:.3}\n", r.seed, r.runtime_secs));
    }
    write(&out.join("timing.tsv"), timing)?;
    let mut r = KvMap::new();
    if let Some((_, sum)) = &lm {
        r.set("lm_checksum", sum);
    }
    r.set("mean", format!("{:.4}", agg.mean));
    r.set("std", format!("{:.4}", agg.std));
    write_manifest(&out, Cmd::Eval, m, &r)?;
    println!("{}", agg.render());
    Ok(())
}

fn explain_nodes(m: &KvMap) -> Result<(), Failure> {
    let data = load_data(m)?;
    let (lm, sum) = load_lm(m)?;
    let theta = load_theta_opt(m)?;
    let k = match &theta {
        Some(t) => t.k(),
        None => get(m, "k")?,
    };
    let template = PromptTemplate::new(data.kind, k);
    let variant = if theta.is_some() {
        PromptVariant::Neighbors
    } else {
        PromptVariant::ZeroHop
    };
    let task = Task::new(&data.graph, &lm, &template, variant).map_err(pipeline_failure)?;
    let nodes: Vec<usize> = match m.get("explain_nodes") {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::new("config", format!("explain_nodes {list:?}: {e}")))?,
        None => {
            let split = split_for(m, &data, get(m, "seed")?)?;
            let count: usize = get(m, "explain_count")?;
            split.test.into_iter().take(count).collect()
        }
    };
    if let Some(&u) = nodes.iter().find(|&&u| u >= data.graph.node_count()) {
        return Err(Failure::new(
            "config",
            format!("node {u} out of range ({} nodes)", data.graph.node_count()),
        ));
    }
    let max_tokens: usize = get(m, "explain_tokens")?;
    let mut body = String::new();
    for &u in &nodes {
        let text = explain(&lm, &task, theta.as_ref(), u, max_tokens).map_err(eval_failure)?;
        let line = format!("{u}\t{text}");
        println!("{line}");
        body.push_str(&line);
        body.push('\n');
    }
    let out = out_dir(m)?;
    write(&out.join("explanations.tsv"), body)?;
    let mut r = KvMap::new();
    r.set("lm_checksum", &sum);
    write_manifest(&out, Cmd::Explain, m, &r)
}

fn gradcheck(m: &KvMap) -> Result<(), Failure> {
    let max_coords: usize = get(m, "max_coords")?;
    let setup = GradCheckSetup {
        nodes: get(m, "nodes")?,
        k: get(m, "k")?,
        d_ch: get(m, "d_ch")?,
        delta: get(m, "delta")?,
        positional: get(m, "positional_scheme")?,
        max_coords: (max_coords > 0).then_some(max_coords),
        epsilon: get(m, "epsilon")?,
        floor: get(m, "floor")?,
        seed: get(m, "seed")?,
    };
    let start = Instant::now();
    let report = full_pipeline_grad_check(&setup).map_err(pipeline_failure)?;
    let worst = report.worst.map_or_else(|| "-".to_string(), |(p, i)| format!("{p}:{i}"));
    println!(
        "max_rel_error={:.3e}\tcoords={}\tworst={worst}\tsecs={:.1}",
        report.max_rel_error,
        report.coords_checked,
        start.elapsed().as_secs_f64()
    );
    if m.contains("out") {
        let out = out_dir(m)?;
        let mut r = KvMap::new();
        r.set("max_rel_error", format!("{:.6e}", report.max_rel_error));
        r.set("coords", report.coords_checked);
        write_manifest(&out, Cmd::GradCheck, m, &r)?;
    }
    if !(report.max_rel_error < GRAD_TOLERANCE) {
        return Err(Failure::new(
            "gradcheck_failed",
            format!("max relative error {:.3e} >= {GRAD_TOLERANCE:e}", report.max_rel_error),
        ));
    }
    Ok(())
}
