//! Transformer weights and the taped forward pass.

use super::{LmConfig, LmError, PositionalScheme, LN_EPS, PAD, ROTARY_BASE};
use crate::numerics::{Real, SeededRng, Tape, Tensor, Var};

/// Weights of one pre-norm block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

/// All LM tensors. `pos_emb` exists only under the absolute scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct LmWeights<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Option<Tensor<T>>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    pub unembed: Tensor<T>,
}

const LAYER_FIELDS: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj", "b_proj",
];

impl<T: Real> LayerWeights<T> {
    fn fields(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

impl<T: Real> LmWeights<T> {
    /// `(checkpoint name, tensor)` in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        if let Some(p) = &self.pos_emb {
            out.push(("pos_emb".to_string(), p));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable tensors in the same order as [`LmWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb];
        if let Some(p) = &mut self.pos_emb {
            out.push(p);
        }
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.unembed);
        out
    }

    pub fn cast<U: Real>(&self) -> LmWeights<U> {
        LmWeights {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.as_ref().map(Tensor::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w_fc: l.w_fc.cast(),
                    b_fc: l.b_fc.cast(),
                    w_proj: l.w_proj.cast(),
                    b_proj: l.b_proj.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            unembed: self.unembed.cast(),
        }
    }

    /// Rebuild from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &LmConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self, LmError> {
        let template = init_weights::<T>(cfg, 0);
        let expected: Vec<(String, Vec<usize>)> = template
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if named.len() != expected.len() {
            return Err(LmError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (en, es)) in named.iter().zip(&expected) {
            if name != en || t.shape() != es.as_slice() {
                return Err(LmError::Checkpoint(format!(
                    "expected {en} {es:?}, found {name} {:?}",
                    t.shape()
                )));
            }
        }
        let mut w = template;
        for (slot, (_, t)) in w.tensors_mut().into_iter().zip(named.drain(..)) {
            *slot = t;
        }
        Ok(w)
    }
}

/// Seeded initialization: N(0, 0.02²) matrices, residual output
/// projections scaled by `1/sqrt(2 * n_layers)`, unit norm gains.
pub fn init_weights<T: Real>(cfg: &LmConfig, seed: u64) -> LmWeights<T> {
    let mut rng = SeededRng::new(seed);
    let (d, m, v) = (cfg.d_model, cfg.mlp_dim, cfg.vocab_size);
    let std = 0.02;
    let resid = std / ((2 * cfg.n_layers) as f64).sqrt();
    let mut normal = |r: usize, c: usize, s: f64| Tensor::from_fn(r, c, |_, _| T::c(rng.normal(0.0, s)));
    let tok_emb = normal(v, d, std);
    let pos_emb = match cfg.positional {
        PositionalScheme::AbsoluteLearned => Some(normal(cfg.max_positions, d, std)),
        PositionalScheme::Rotary => None,
    };
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            ln1_g: Tensor::full(&[1, d], T::one()),
            ln1_b: Tensor::zeros(&[1, d]),
            wq: normal(d, d, std),
            wk: normal(d, d, std),
            wv: normal(d, d, std),
            wo: normal(d, d, resid),
            ln2_g: Tensor::full(&[1, d], T::one()),
            ln2_b: Tensor::zeros(&[1, d]),
            w_fc: normal(d, m, std),
            b_fc: Tensor::zeros(&[1, m]),
            w_proj: normal(m, d, resid),
            b_proj: Tensor::zeros(&[1, d]),
        })
        .collect();
    LmWeights {
        tok_emb,
        pos_emb,
        layers,
        lnf_g: Tensor::full(&[1, d], T::one()),
        lnf_b: Tensor::zeros(&[1, d]),
        unembed: normal(d, v, std),
    }
}

/// Handles of one block's weights on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_fc: Var,
    pub b_fc: Var,
    pub w_proj: Var,
    pub b_proj: Var,
}

/// Handles of all LM weights on a tape.
#[derive(Debug, Clone)]
pub struct BoundLm {
    pub tok_emb: Var,
    pub pos_emb: Option<Var>,
    pub layers: Vec<BoundLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub unembed: Var,
}

impl BoundLm {
    /// Handles in the order of [`LmWeights::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb];
        out.extend(self.pos_emb);
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.wq, l.wk, l.wv, l.wo, l.ln2_g, l.ln2_b, l.w_fc, l.b_fc, l.w_proj, l.b_proj,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b, self.unembed]);
        out
    }
}

/// Borrow `w` onto `tape`, as trainable parameters or as frozen constants.
pub fn bind<'w, T: Real>(tape: &mut Tape<'w, T>, w: &'w LmWeights<T>, trainable: bool) -> BoundLm {
    let mut b = |t: &'w Tensor<T>| if trainable { tape.param(t) } else { tape.constant(t) };
    BoundLm {
        tok_emb: b(&w.tok_emb),
        pos_emb: w.pos_emb.as_ref().map(&mut b),
        layers: w
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_g: b(&l.ln1_g),
                ln1_b: b(&l.ln1_b),
                wq: b(&l.wq),
                wk: b(&l.wk),
                wv: b(&l.wv),
                wo: b(&l.wo),
                ln2_g: b(&l.ln2_g),
                ln2_b: b(&l.ln2_b),
                w_fc: b(&l.w_fc),
                b_fc: b(&l.b_fc),
                w_proj: b(&l.w_proj),
                b_proj: b(&l.b_proj),
            })
            .collect(),
        lnf_g: b(&w.lnf_g),
        lnf_b: b(&w.lnf_b),
        unembed: b(&w.unembed),
    }
}

/// Vectors added at reserved positions: row `j` of `vectors` (`[K, d]`)
/// enters at token index `positions[j]`.
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a> {
    pub positions: &'a [usize],
    pub vectors: Var,
}

fn check_tokens(cfg: &LmConfig, tokens: &[usize]) -> Result<(), LmError> {
    if tokens.is_empty() {
        return Err(LmError::EmptySequence);
    }
    if tokens.len() > cfg.max_positions {
        return Err(LmError::ContextOverflow {
            len: tokens.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(LmError::TokenOutOfRange {
            id,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Final hidden states `[T, d]` (after the last layer norm).
///
/// Per block, with `a = LN1(x)` and `h` the injection (zero away from
/// reserved positions):
/// - absolute: `q = (a + p + h) Wq`, `k = (a + p + h) Wk`
/// - rotary: `q = R (a + h) Wq`, `k = R (a + h) Wk`
/// - both: `v = (a + h) Wv`
///
/// The same `h` enters every block.
pub fn forward<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &LmConfig,
    lm: &BoundLm,
    tokens: &[usize],
    injection: Option<Injection<'_>>,
) -> Result<Var, LmError> {
    check_tokens(cfg, tokens)?;
    let n = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();

    let inj = match injection {
        None => None,
        Some(Injection { positions, vectors }) => {
            let shape = tape.value(vectors).shape().to_vec();
            if shape != [positions.len(), d] {
                return Err(LmError::InjectionShape {
                    got: shape,
                    k: positions.len(),
                    d,
                });
            }
            for (j, &p) in positions.iter().enumerate() {
                if p >= n || (j > 0 && p <= positions[j - 1]) {
                    return Err(LmError::InjectionPosition { position: p, len: n });
                }
            }
            Some(tape.scatter_add_rows(vectors, positions, n)?)
        }
    };
    let pos_rows = match (cfg.positional, lm.pos_emb) {
        (PositionalScheme::AbsoluteLearned, Some(p)) => Some(tape.slice_rows(p, 0, n)?),
        (PositionalScheme::AbsoluteLearned, None) => {
            return Err(LmError::Config("absolute scheme without a position table".into()))
        }
        (PositionalScheme::Rotary, _) => None,
    };
    let positions: Vec<usize> = (0..n).collect();
    let mask: Vec<bool> = (0..n * n).map(|i| i % n > i / n).collect();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = tape.gather_rows(lm.tok_emb, tokens)?;
    for l in &lm.layers {
        let a = tape.layer_norm(x, l.ln1_g, l.ln1_b, LN_EPS)?;
        let av = match inj {
            Some(h) => tape.add(a, h)?,
            None => a,
        };
        let qk_in = match pos_rows {
            Some(p) => tape.add(av, p)?,
            None => av,
        };
        let mut q = tape.matmul(qk_in, l.wq)?;
        let mut k = tape.matmul(qk_in, l.wk)?;
        let v = tape.matmul(av, l.wv)?;
        if cfg.positional == PositionalScheme::Rotary {
            q = tape.rotary(q, hd, &positions, ROTARY_BASE)?;
            k = tape.rotary(k, hd, &positions, ROTARY_BASE)?;
        }
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (s, e) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.masked_fill(scores, mask.clone(), -1e9)?;
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = tape.matmul(cat, l.wo)?;
        x = tape.add(x, o)?;

        let a2 = tape.layer_norm(x, l.ln2_g, l.ln2_b, LN_EPS)?;
        let f = tape.matmul(a2, l.w_fc)?;
        let f = tape.add(f, l.b_fc)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, l.w_proj)?;
        let f = tape.add(f, l.b_proj)?;
        x = tape.add(x, f)?;
    }
    Ok(tape.layer_norm(x, lm.lnf_g, lm.lnf_b, LN_EPS)?)
}

/// Next-token logits `[rows.len(), V]` for the selected positions.
pub fn logits_rows<T: Real>(tape: &mut Tape<'_, T>, lm: &BoundLm, hidden: Var, rows: &[usize]) -> Result<Var, LmError> {
    let sel = if rows.len() == tape.value(hidden).rows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
        hidden
    } else {
        tape.gather_rows(hidden, rows)?
    };
    Ok(tape.matmul(sel, lm.unembed)?)
}

/// Mean next-token cross-entropy; positions whose target is PAD are skipped.
pub fn lm_loss<T: Real>(tape: &mut Tape<'_, T>, cfg: &LmConfig, lm: &BoundLm, tokens: &[usize]) -> Result<Var, LmError> {
    if tokens.len() < 2 {
        return Err(LmError::EmptySequence);
    }
    let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
    if targets.iter().all(Option::is_none) {
        return Err(LmError::AllPad);
    }
    let hidden = forward(tape, cfg, lm, &tokens[..tokens.len() - 1], None)?;
    let rows: Vec<usize> = (0..tokens.len() - 1).collect();
    let logits = logits_rows(tape, lm, hidden, &rows)?;
    Ok(tape.cross_entropy(logits, &targets)?)
}
