//! Disentangled multi-channel graph learning.
//!
//! Each of K channels is a two-layer GNN. Layer one aggregates over the
//! binary adjacency; its output scores every directed edge `v -> u` as
//! `delta + (1 - delta) * sigmoid((h_v S_src) . (h_u S_dst))`, and layer two
//! aggregates over those weights. Aggregation is a weighted mean with an
//! implicit unit self-loop:
//! `m_u = (sum_v A[u,v] h_v + h_u) / (sum_v A[u,v] + 1)`, then
//! `ReLU(m_u W + b)`. Channel outputs are projected by `P` to the LM width
//! and injected at one reserved prompt position each.
//!
//! Row-vector convention throughout: features are rows, weights multiply
//! from the right.

use crate::graphdata::EdgeIndex;
use crate::numerics::{Real, SeededRng, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum GnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("delta {0} outside [0, 1]")]
    Delta(f64),
    #[error("need at least one channel")]
    NoChannels,
    #[error("{0}")]
    Shape(String),
    #[error("node {node} out of range for {count} nodes")]
    NodeOutOfRange { node: usize, count: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Names of a channel's tensors in checkpoints, in storage order.
pub const CHANNEL_FIELDS: [&str; 7] = ["W1", "b1", "W2", "b2", "S_src", "S_dst", "P"];

/// Parameters of one channel. Shapes: `w1 [d_in, d_ch]`, `b1 [1, d_ch]`,
/// `w2 [d_ch, d_ch]`, `b2 [1, d_ch]`, `s_src`/`s_dst [d_ch, d_ch]`,
/// `p [d_ch, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub s_src: Tensor<T>,
    pub s_dst: Tensor<T>,
    pub p: Tensor<T>,
}

impl<T: Real> ChannelParams<T> {
    /// Glorot-normal matrices, zero biases, and a projection with standard
    /// deviation `p_std`.
    pub fn init(d_in: usize, d_ch: usize, d_out: usize, p_std: f64, rng: &mut SeededRng) -> Self {
        let mut glorot = |r: usize, c: usize| {
            let s = (2.0 / (r + c) as f64).sqrt();
            Tensor::from_fn(r, c, |_, _| T::c(rng.normal(0.0, s)))
        };
        let w1 = glorot(d_in, d_ch);
        let w2 = glorot(d_ch, d_ch);
        let s_src = glorot(d_ch, d_ch);
        let s_dst = glorot(d_ch, d_ch);
        let p = Tensor::from_fn(d_ch, d_out, |_, _| T::c(rng.normal(0.0, p_std)));
        Self {
            w1,
            b1: Tensor::zeros(&[1, d_ch]),
            w2,
            b2: Tensor::zeros(&[1, d_ch]),
            s_src,
            s_dst,
            p,
        }
    }

    pub fn fields(&self) -> [&Tensor<T>; 7] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.s_src, &self.s_dst, &self.p]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor<T>; 7] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.s_src,
            &mut self.s_dst,
            &mut self.p,
        ]
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_ch(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.p.cols()
    }

    fn check(&self) -> Result<(), GnnError> {
        let (di, dc, dout) = (self.d_in(), self.d_ch(), self.d_out());
        let want: [(usize, usize); 7] = [(di, dc), (1, dc), (dc, dc), (1, dc), (dc, dc), (dc, dc), (dc, dout)];
        for ((name, t), (r, c)) in CHANNEL_FIELDS.iter().zip(self.fields()).zip(want) {
            if t.shape() != [r, c] {
                return Err(GnnError::Shape(format!("{name} has shape {:?}, expected [{r}, {c}]", t.shape())));
            }
            if !t.is_finite() {
                return Err(GnnError::Shape(format!("{name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ChannelParams<U> {
        ChannelParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            s_src: self.s_src.cast(),
            s_dst: self.s_dst.cast(),
            p: self.p.cast(),
        }
    }
}

/// The trainable set: K channels plus the fixed structure mix `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledParams<T> {
    pub channels: Vec<ChannelParams<T>>,
    pub delta: f64,
}

impl<T: Real> DisentangledParams<T> {
    pub fn new(channels: Vec<ChannelParams<T>>, delta: f64) -> Result<Self, GnnError> {
        if channels.is_empty() {
            return Err(GnnError::NoChannels);
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(GnnError::Delta(delta));
        }
        for c in &channels {
            c.check()?;
            let c0 = &channels[0];
            if (c.d_in(), c.d_ch(), c.d_out()) != (c0.d_in(), c0.d_ch(), c0.d_out()) {
                return Err(GnnError::Shape("channels disagree on dimensions".into()));
            }
        }
        Ok(Self { channels, delta })
    }

    /// Seeded initialization of `k` channels.
    pub fn init(k: usize, d_in: usize, d_ch: usize, d_out: usize, delta: f64, p_std: f64, seed: u64) -> Result<Self, GnnError> {
        let mut rng = SeededRng::new(seed);
        let channels = (0..k).map(|_| ChannelParams::init(d_in, d_ch, d_out, p_std, &mut rng)).collect();
        Self::new(channels, delta)
    }

    pub fn k(&self) -> usize {
        self.channels.len()
    }

    /// `(channel{i}.{field}, tensor)` in storage order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.channels
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                CHANNEL_FIELDS
                    .iter()
                    .zip(c.fields())
                    .map(move |(f, t)| (format!("channel{i}.{f}"), t))
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.channels.iter().flat_map(|c| c.fields()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.channels.iter_mut().flat_map(|c| c.fields_mut()).collect()
    }

    /// Rebuild from checkpoint tensors named as in [`DisentangledParams::named`].
    pub fn from_named(named: Vec<(String, Tensor<T>)>, delta: f64) -> Result<Self, GnnError> {
        if named.is_empty() || named.len() % CHANNEL_FIELDS.len() != 0 {
            return Err(GnnError::Checkpoint(format!("{} tensors is not a whole number of channels", named.len())));
        }
        let mut channels = Vec::new();
        let mut it = named.into_iter().enumerate();
        while let Some((j, (name, w1))) = it.next() {
            let i = j / CHANNEL_FIELDS.len();
            let mut rest = Vec::with_capacity(6);
            rest.push((name, w1));
            for _ in 0..6 {
                rest.push(it.next().expect("length checked").1);
            }
            for (f, (name, _)) in CHANNEL_FIELDS.iter().zip(&rest) {
                let want = format!("channel{i}.{f}");
                if *name != want {
                    return Err(GnnError::Checkpoint(format!("expected {want}, found {name}")));
                }
            }
            let mut t = rest.into_iter().map(|(_, t)| t);
            let mut next = || t.next().expect("seven fields");
            channels.push(ChannelParams {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                s_src: next(),
                s_dst: next(),
                p: next(),
            });
        }
        Self::new(channels, delta)
    }

    pub fn cast<U: Real>(&self) -> DisentangledParams<U> {
        DisentangledParams {
            channels: self.channels.iter().map(ChannelParams::cast).collect(),
            delta: self.delta,
        }
    }
}

/// Handles of one channel's parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundChannel {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub s_src: Var,
    pub s_dst: Var,
    pub p: Var,
}

impl BoundChannel {
    pub fn vars(&self) -> [Var; 7] {
        [self.w1, self.b1, self.w2, self.b2, self.s_src, self.s_dst, self.p]
    }
}

#[derive(Debug, Clone)]
pub struct BoundParams {
    pub channels: Vec<BoundChannel>,
    pub delta: f64,
}

impl BoundParams {
    /// Handles in the order of [`DisentangledParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.channels.iter().flat_map(|c| c.vars()).collect()
    }
}

/// Borrow `params` onto `tape` as trainable leaves.
pub fn bind_params<'w, T: Real>(tape: &mut Tape<'w, T>, params: &'w DisentangledParams<T>) -> BoundParams {
    BoundParams {
        channels: params
            .channels
            .iter()
            .map(|c| BoundChannel {
                w1: tape.param(&c.w1),
                b1: tape.param(&c.b1),
                w2: tape.param(&c.w2),
                b2: tape.param(&c.b2),
                s_src: tape.param(&c.s_src),
                s_dst: tape.param(&c.s_dst),
                p: tape.param(&c.p),
            })
            .collect(),
        delta: params.delta,
    }
}

/// Bind from existing handles (e.g. leaves created by a gradient check);
/// `vars` follows [`DisentangledParams::tensors`] order.
pub fn bound_from_vars(vars: &[Var], delta: f64) -> Result<BoundParams, GnnError> {
    if vars.is_empty() || vars.len() % 7 != 0 {
        return Err(GnnError::Shape(format!("{} handles is not a whole number of channels", vars.len())));
    }
    Ok(BoundParams {
        channels: vars
            .chunks(7)
            .map(|c| BoundChannel {
                w1: c[0],
                b1: c[1],
                w2: c[2],
                b2: c[3],
                s_src: c[4],
                s_dst: c[5],
                p: c[6],
            })
            .collect(),
        delta,
    })
}

/// One aggregation layer: `ReLU(m W + b)` with the self-looped weighted
/// mean `m`. `weights` is `[E, 1]` aligned with `edges`; `None` means all
/// ones (the binary adjacency).
pub fn gnn_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    edges: &EdgeIndex,
    weights: Option<Var>,
    w: Var,
    b: Var,
) -> Result<Var, GnnError> {
    let n = tape.value(h).rows();
    if n != edges.node_count {
        return Err(GnnError::Shape(format!("{n} feature rows for {} nodes", edges.node_count)));
    }
    let m = if edges.is_empty() {
        h
    } else {
        let msgs = tape.gather_rows(h, &edges.src)?;
        let (msgs, wcol) = match weights {
            Some(wv) => (tape.mul(msgs, wv)?, wv),
            None => {
                let ones = tape.leaf(Tensor::full(&[edges.len(), 1], T::one()), false);
                (msgs, ones)
            }
        };
        let agg = tape.scatter_add_rows(msgs, &edges.dst, n)?;
        let num = tape.add(agg, h)?;
        let deg = tape.scatter_add_rows(wcol, &edges.dst, n)?;
        let deg = tape.add_scalar(deg, 1.0)?;
        tape.div(num, deg)?
    };
    let z = tape.matmul(m, w)?;
    let z = tape.add(z, b)?;
    Ok(tape.relu(z)?)
}

/// Weight of every directed edge `src[e] -> dst[e]`, as an `[E, 1]` column.
pub fn edge_weights<T: Real>(
    tape: &mut Tape<'_, T>,
    ch: &BoundChannel,
    h: Var,
    edges: &EdgeIndex,
    delta: f64,
) -> Result<Var, GnnError> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(GnnError::Delta(delta));
    }
    if edges.is_empty() {
        return Err(GnnError::Shape("no edges to weight".into()));
    }
    let a = tape.matmul(h, ch.s_src)?;
    let b = tape.matmul(h, ch.s_dst)?;
    let a = tape.gather_rows(a, &edges.src)?;
    let b = tape.gather_rows(b, &edges.dst)?;
    let prod = tape.mul(a, b)?;
    let score = tape.sum_cols(prod)?;
    let s = tape.sigmoid(score)?;
    let s = tape.scale(s, 1.0 - delta)?;
    Ok(tape.add_scalar(s, delta)?)
}

/// Dense `[n, n]` matrix with `A[u][v]` the weight of the message `v -> u`
/// (zero off the edge set).
pub fn dense_weights<T: Real>(edges: &EdgeIndex, weights: &Tensor<T>) -> Tensor<T> {
    let n = edges.node_count;
    let mut a = Tensor::zeros(&[n, n]);
    for (e, (&s, &d)) in edges.src.iter().zip(&edges.dst).enumerate() {
        a.set(d, s, weights.data()[e]);
    }
    a
}

/// Intermediate results of one channel.
#[derive(Debug, Clone, Copy)]
pub struct ChannelOutput {
    pub h1: Var,
    /// `None` when the graph has no edges.
    pub weights: Option<Var>,
    pub h2: Var,
}

/// Layer one on the binary adjacency, edge weights from its output, layer
/// two on the weighted adjacency.
pub fn channel_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    ch: &BoundChannel,
    h0: Var,
    edges: &EdgeIndex,
    delta: f64,
) -> Result<ChannelOutput, GnnError> {
    let h1 = gnn_layer(tape, h0, edges, None, ch.w1, ch.b1)?;
    let weights = if edges.is_empty() {
        None
    } else {
        Some(edge_weights(tape, ch, h1, edges, delta)?)
    };
    let h2 = gnn_layer(tape, h1, edges, weights, ch.w2, ch.b2)?;
    Ok(ChannelOutput { h1, weights, h2 })
}

/// Injection vectors for each node of `nodes`: one `[K, d_out]` block per
/// node, row `i` from channel `i`. Every channel runs once over the graph.
pub fn disentangled_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    params: &BoundParams,
    h0: Var,
    edges: &EdgeIndex,
    nodes: &[usize],
) -> Result<Vec<Var>, GnnError> {
    if let Some(&u) = nodes.iter().find(|&&u| u >= edges.node_count) {
        return Err(GnnError::NodeOutOfRange {
            node: u,
            count: edges.node_count,
        });
    }
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let mut per_channel = Vec::with_capacity(params.channels.len());
    for ch in &params.channels {
        let out = channel_forward(tape, ch, h0, edges, params.delta)?;
        let rows = tape.gather_rows(out.h2, nodes)?;
        per_channel.push(tape.matmul(rows, ch.p)?);
    }
    let mut blocks = Vec::with_capacity(nodes.len());
    for j in 0..nodes.len() {
        let rows: Vec<Var> = per_channel
            .iter()
            .map(|&c| tape.slice_rows(c, j, j + 1))
            .collect::<Result<_, _>>()?;
        blocks.push(if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> EdgeIndex {
        // 0 - 1 - 2, both orientations, grouped by destination.
        EdgeIndex {
            src: vec![1, 0, 2, 1],
            dst: vec![0, 1, 1, 2],
            node_count: 3,
        }
    }

    #[test]
    fn weighted_mean_matches_hand_arithmetic() {
        let e = path3();
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap(), false);
        // edge (0,1) has weight 0.5 and edge (1,2) weight 1.0.
        let w = tape.leaf(Tensor::matrix(4, 1, vec![0.5, 0.5, 1.0, 1.0]).unwrap(), false);
        let id = tape.leaf(Tensor::scalar(1.0), false);
        let zero = tape.leaf(Tensor::scalar(0.0), false);
        let out = gnn_layer(&mut tape, h, &e, Some(w), id, zero).unwrap();
        // middle: (0.5*1 + 1.0*4 + 2) / (0.5 + 1.0 + 1) = 6.5 / 2.5
        assert!((tape.value(out).at(1, 0) - 2.6).abs() < 1e-12);
        // end node 0: (0.5*2 + 1) / 1.5
        assert!((tape.value(out).at(0, 0) - 2.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_give_plain_neighborhood_mean() {
        let e = path3();
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(3, 1, vec![3.0, 6.0, 9.0]).unwrap(), false);
        let id = tape.leaf(Tensor::scalar(1.0), false);
        let zero = tape.leaf(Tensor::scalar(0.0), false);
        let out = gnn_layer(&mut tape, h, &e, None, id, zero).unwrap();
        assert_eq!(tape.value(out).data(), &[4.5, 6.0, 7.5]);
    }

    #[test]
    fn isolated_node_keeps_its_features() {
        let e = EdgeIndex {
            src: vec![],
            dst: vec![],
            node_count: 2,
        };
        let mut tape = Tape::<f64>::new();
        let h = tape.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap(), false);
        let id = tape.leaf(Tensor::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 }), false);
        let zero = tape.leaf(Tensor::zeros(&[1, 2]), false);
        let out = gnn_layer(&mut tape, h, &e, None, id, zero).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_computed_edge_weight() {
        let e = EdgeIndex {
            src: vec![1, 0],
            dst: vec![0, 1],
            node_count: 2,
        };
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let s_src = tape.leaf(eye.clone(), false);
        let s_dst = tape.leaf(eye, false);
        let dummy = tape.leaf(Tensor::scalar(0.0), false);
        let ch = BoundChannel {
            w1: dummy,
            b1: dummy,
            w2: dummy,
            b2: dummy,
            s_src,
            s_dst,
            p: dummy,
        };
        let h = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap(), false);
        let w = edge_weights(&mut tape, &ch, h, &e, 0.8).unwrap();
        for &x in tape.value(w).data() {
            assert!((x - 0.946212).abs() < 1e-5, "{x}");
        }
        let h = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let w = edge_weights(&mut tape, &ch, h, &e, 0.8).unwrap();
        for &x in tape.value(w).data() {
            assert!((x - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_validation_and_checkpoint_names() {
        assert!(matches!(DisentangledParams::<f64>::init(2, 4, 3, 5, 1.5, 0.1, 0), Err(GnnError::Delta(_))));
        assert!(matches!(DisentangledParams::<f64>::init(0, 4, 3, 5, 0.8, 0.1, 0), Err(GnnError::NoChannels)));
        let p = DisentangledParams::<f32>::init(2, 4, 3, 5, 0.8, 0.1, 0).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "channel0.W1");
        assert_eq!(names[6], "channel0.P");
        assert_eq!(names[13], "channel1.P");
        let owned = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(DisentangledParams::from_named(owned, 0.8).unwrap(), p);
    }
}
