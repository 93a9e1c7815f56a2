//! `dgtl`: generate synthetic graphs, pretrain and freeze the LM, train and
//! evaluate the disentangled GNN, explain predictions, check gradients.
//!
//! Settings resolve as flags over `--config` over defaults; every run writes
//! `manifest.txt`, which can be passed back as `--config` to repeat it.
//! Failures print one `error[<class>]: <message>` line and exit nonzero.

mod commands;
mod config;
mod failure;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dgtl::kv::KvMap;

use config::Cmd;
use failure::Failure;

#[derive(Parser)]
#[command(name = "dgtl", version, about = "Disentangled graph-text learning on text-attributed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic text-attributed graph with a seeded split.
    GenData(GenDataArgs),
    /// Pretrain the language model on a dataset's vocabulary and freeze it.
    Pretrain(PretrainArgs),
    /// Train the disentangled GNN against the frozen LM.
    Train(TrainArgs),
    /// Score a method over one or more seeded splits.
    Eval(EvalArgs),
    /// Generate label-plus-explanation text for nodes.
    Explain(ExplainArgs),
    /// Verify end-to-end gradients against central differences.
    #[command(name = "gradcheck")]
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct Base {
    /// key=value settings file; a run's manifest.txt also works.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any setting, e.g. `--set max_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long, value_parser = ["text_informative", "structure_only", "two_relation"])]
    mode: Option<String>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = ["absolute_learned", "rotary"])]
    positional: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["dgtl", "wo_disen"])]
    method: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    /// Score this trained θ instead of training one per seed.
    #[arg(long)]
    theta_checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["dgtl", "0hop", "wo_disen", "gcn"])]
    method: Option<String>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    /// Without θ the prompt carries the node's own text only.
    #[arg(long)]
    theta_checkpoint: Option<PathBuf>,
    /// Comma-separated node ids; defaults to the first test nodes.
    #[arg(long)]
    node_ids: Option<String>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    base: Base,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, value_parser = ["absolute_learned", "rotary"])]
    positional: Option<String>,
}

struct Overrides(KvMap);

impl Overrides {
    fn new(base: &Base) -> Result<Self, Failure> {
        let mut m = KvMap::new();
        for s in &base.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::new("config", format!("--set expects KEY=VALUE, got {s:?}")))?;
            m.set(k.trim(), v.trim());
        }
        let mut o = Self(m);
        o.opt("seed", base.seed);
        o.path("out", &base.out);
        Ok(o)
    }

    fn opt(&mut self, key: &str, v: Option<impl Display>) {
        if let Some(v) = v {
            self.0.set(key, v);
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.opt(key, v.as_ref().map(|p| p.display()));
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    let (cmd, base, o) = match command {
        Command::GenData(a) => {
            let mut o = Overrides::new(&a.base)?;
            o.opt("mode", a.mode);
            o.opt("nodes", a.nodes);
            o.opt("classes", a.classes);
            (Cmd::GenData, a.base, o)
        }
        Command::Pretrain(a) => {
            let mut o = Overrides::new(&a.base)?;
            o.path("dataset", &a.dataset);
            o.opt("positional_scheme", a.positional);
            (Cmd::Pretrain, a.base, o)
        }
        Command::Train(a) => {
            let mut o = Overrides::new(&a.base)?;
            o.path("dataset", &a.dataset);
            o.path("lm_checkpoint", &a.lm_checkpoint);
            o.opt("method", a.method);
            (Cmd::Train, a.base, o)
        }
        Command::Eval(a) => {
            let mut o = Overrides::new(&a.base)?;
            o.path("dataset", &a.dataset);
            o.path("lm_checkpoint", &a.lm_checkpoint);
            o.path("theta_checkpoint", &a.theta_checkpoint);
            o.opt("method", a.method);
            o.opt("seeds", a.seeds);
            (Cmd::Eval, a.base, o)
        }
        Command::Explain(a) => {
            let mut o = Overrides::new(&a.base)?;
            o.path("dataset", &a.dataset);
            o.path("lm_checkpoint", &a.lm_checkpoint);
            o.path("theta_checkpoint", &a.theta_checkpoint);
            o.opt("explain_nodes", a.node_ids);
            (Cmd::Explain, a.base, o)
        }
        Command::GradCheck(a) => {
            let mut o = Overrides::new(&a.base)?;
            o.opt("nodes", a.nodes);
            o.opt("positional_scheme", a.positional);
            (Cmd::GradCheck, a.base, o)
        }
    };
    commands::run(cmd, base.config.as_deref(), &o.0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", Failure::new("usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::FAILURE
        }
    }
}
