//! Run settings resolved as command-line flags over a config file over
//! per-command defaults. The resolved map is what the manifest records.

use std::fs;
use std::path::{Path, PathBuf};

use dgtl::eval::GcnConfig;
use dgtl::graphdata::SyntheticSpec;
use dgtl::kv::KvMap;
use dgtl::lm::LmConfig;
use dgtl::pipeline::{CorpusSpec, GradCheckSetup, PretrainConfig, TrainConfig};

use crate::failure::{Failure, ResultExt};

pub const MANIFEST_FILE: &str = "manifest.txt";
/// Manifest keys under this prefix record outcomes; as config they are
/// inputs only where a command says so.
pub const RESULT_PREFIX: &str = "result.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmd {
    GenData,
    Pretrain,
    Train,
    Eval,
    Explain,
    GradCheck,
}

impl Cmd {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Pretrain => "pretrain",
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Explain => "explain",
            Self::GradCheck => "gradcheck",
        }
    }

    /// Keys the command reads. Anything else in a config file that is also
    /// some other command's key is ignored; unknown keys are errors.
    pub fn keys(self) -> Vec<&'static str> {
        const DATA: &[&str] = &["dataset", "dataset_kind", "split", "per_class"];
        let mut k: Vec<&str> = vec!["seed", "out"];
        match self {
            Self::GenData => k.extend(["mode", "nodes", "classes", "purity", "degree", "per_class"]),
            Self::Pretrain => {
                k.extend(["dataset", "dataset_kind", "k"]);
                k.extend(LM_KEYS);
                k.extend(PRETRAIN_KEYS);
            }
            Self::Train => {
                k.extend(DATA);
                k.extend(["lm_checkpoint", "method"]);
                k.extend(TRAIN_KEYS);
            }
            Self::Eval => {
                k.extend(DATA);
                k.extend(["lm_checkpoint", "theta_checkpoint", "method", "seeds"]);
                k.extend(TRAIN_KEYS);
                k.extend(GCN_KEYS);
            }
            Self::Explain => {
                k.extend(DATA);
                k.extend(["lm_checkpoint", "theta_checkpoint", "k", "explain_nodes", "explain_count", "explain_tokens"]);
            }
            Self::GradCheck => k.extend(["nodes", "k", "d_ch", "delta", "positional_scheme", "max_coords", "epsilon", "floor"]),
        }
        k
    }

    pub fn defaults(self) -> KvMap {
        let mut m = KvMap::new();
        m.set("seed", 0);
        let data = |m: &mut KvMap| {
            m.set("dataset_kind", "synthetic");
            m.set("split", "seeded");
            m.set("per_class", 20);
        };
        let train = TrainConfig::default().to_kv();
        match self {
            Self::GenData => {
                let s = SyntheticSpec::default();
                m.set("mode", s.mode.name());
                m.set("nodes", s.n_nodes);
                m.set("classes", s.n_classes);
                m.set("purity", s.keyword_purity);
                m.set("degree", s.avg_degree);
                m.set("per_class", 20);
            }
            Self::Pretrain => {
                m.set("dataset_kind", "synthetic");
                m.set("k", TrainConfig::default().k);
                let lm = LmConfig::default().to_kv();
                for key in LM_KEYS {
                    m.set(key, lm.get(key).expect("LmConfig renders every key"));
                }
                let p = PretrainConfig::default();
                m.set("pretrain_steps", p.steps);
                m.set("pretrain_batch_size", p.batch_size);
                m.set("pretrain_lr", p.lr);
                m.set("corpus_docs", CorpusSpec::default().docs);
            }
            Self::Train | Self::Eval => {
                data(&mut m);
                m.merge(&train);
                m.set("method", "dgtl");
                if self == Self::Eval {
                    m.set("seeds", 1);
                    let g = GcnConfig::default();
                    m.set("gcn_hidden", g.hidden);
                    m.set("gcn_lr", g.lr);
                    m.set("gcn_epochs", g.epochs);
                }
            }
            Self::Explain => {
                data(&mut m);
                m.set("k", TrainConfig::default().k);
                m.set("explain_count", 10);
                m.set("explain_tokens", 24);
            }
            Self::GradCheck => {
                let g = GradCheckSetup::default();
                m.set("nodes", g.nodes);
                m.set("k", g.k);
                m.set("d_ch", g.d_ch);
                m.set("delta", g.delta);
                m.set("positional_scheme", g.positional);
                m.set("max_coords", 0);
                m.set("epsilon", g.epsilon);
                m.set("floor", g.floor);
            }
        }
        m.set("seed", 0);
        m
    }
}

const ALL: [Cmd; 6] = [Cmd::GenData, Cmd::Pretrain, Cmd::Train, Cmd::Eval, Cmd::Explain, Cmd::GradCheck];

const LM_KEYS: [&str; 6] = ["n_layers", "n_heads", "d_model", "mlp_dim", "max_positions", "positional_scheme"];
const PRETRAIN_KEYS: [&str; 4] = ["pretrain_steps", "pretrain_batch_size", "pretrain_lr", "corpus_docs"];
const TRAIN_KEYS: [&str; 11] = [
    "k",
    "d_ch",
    "delta",
    "lr",
    "batch_size",
    "max_steps",
    "eval_every",
    "early_stop",
    "plateau_window",
    "plateau_tol",
    "p_init_std",
];
const GCN_KEYS: [&str; 3] = ["gcn_hidden", "gcn_lr", "gcn_epochs"];

/// Defaults, then the config file, then `overrides`, restricted to the keys
/// `cmd` reads.
pub fn resolve(cmd: Cmd, file: Option<&Path>, overrides: &KvMap) -> Result<KvMap, Failure> {
    let mut merged = cmd.defaults();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
        let m = KvMap::parse(&text).class("config")?;
        if let Some(c) = m.get("command") {
            if c != cmd.name() {
                return Err(Failure::new(
                    "config",
                    format!("{} is a manifest of `{c}`, not `{}`", path.display(), cmd.name()),
                ));
            }
        }
        check_known(&m)?;
        merged.merge(&restrict(&m, cmd));
    }
    check_known(overrides)?;
    merged.merge(&restrict(overrides, cmd));
    Ok(merged)
}

fn check_known(m: &KvMap) -> Result<(), Failure> {
    let known: Vec<&str> = ALL.iter().flat_map(|c| c.keys()).collect();
    match m
        .keys()
        .find(|k| *k != "command" && !k.starts_with(RESULT_PREFIX) && !known.contains(k))
    {
        Some(k) => Err(Failure::new("config", format!("unknown key {k:?}"))),
        None => Ok(()),
    }
}

/// Keys of `m` that `cmd` reads, plus result entries.
fn restrict(m: &KvMap, cmd: Cmd) -> KvMap {
    let keys = cmd.keys();
    let mut out = KvMap::new();
    for k in m.keys() {
        if keys.contains(&k) || k.starts_with(RESULT_PREFIX) {
            out.set(k, m.get(k).expect("key from this map"));
        }
    }
    out
}

/// Typed access with the failure class `config`.
pub fn get<V: std::str::FromStr>(m: &KvMap, key: &str) -> Result<V, Failure>
where
    V::Err: std::fmt::Display,
{
    m.require(key).class("config")
}

pub fn path(m: &KvMap, key: &str) -> Result<PathBuf, Failure> {
    m.get(key)
        .map(PathBuf::from)
        .ok_or_else(|| Failure::new("config", format!("missing {key} (pass --{} or set it in --config)", key.replace('_', "-"))))
}

pub fn lm_config(m: &KvMap, vocab_size: usize) -> Result<LmConfig, Failure> {
    let mut c = LmConfig {
        vocab_size,
        ..Default::default()
    };
    c.update_from(m).class("config")?;
    c.vocab_size = vocab_size;
    c.validate().class("config")?;
    Ok(c)
}

pub fn train_config(m: &KvMap) -> Result<TrainConfig, Failure> {
    let mut c = TrainConfig::default();
    c.update_from(m).class("config")?;
    c.validate().class("config")?;
    Ok(c)
}

/// The resolved settings plus outcome entries, with the command recorded so
/// the file can be passed back as `--config`.
pub fn manifest(cmd: Cmd, resolved: &KvMap, results: &KvMap) -> String {
    let mut m = KvMap::new();
    for k in resolved.keys().filter(|k| !k.starts_with(RESULT_PREFIX)) {
        m.set(k, resolved.get(k).expect("key from this map"));
    }
    for k in results.keys() {
        m.set(&format!("{RESULT_PREFIX}{k}"), results.get(k).expect("key from this map"));
    }
    format!("command={}\n{}", cmd.name(), m.render())
}
