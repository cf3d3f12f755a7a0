//! Five-layer message-passing network over `(F1, F2)` node state.
//!
//! Per layer and per directed edge `src -> dst` the message is
//! `F1[src] - F1[dst]`, scaled by a sigmoid attention score computed from
//! `concat(F1[src], F1[dst])`. Each node aggregates its incoming messages
//! by elementwise max, min, mean and std; the embedding is updated from
//! `concat(F2, agg)` and the coloring estimate from `concat(F1, F2')`
//! through a softmax head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConflictGraph, SoftAssignment};
use crate::nn::tape::{leaky_dot, sigmoid, STD_EPS};
use crate::nn::{mlp_forward, Activation, Checkpoint, Matrix, Mlp, ParamSet, Tape, Var};
use crate::rng;

pub const LAYER_COUNT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub k: usize,
    pub d_embed: usize,
    pub attention_hidden: usize,
    pub update_hidden: usize,
    pub layers: usize,
}

impl Architecture {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            d_embed: 32,
            attention_hidden: 32,
            update_hidden: 64,
            layers: LAYER_COUNT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    pub attention: Mlp,
    pub embed: Mlp,
    pub color: Mlp,
}

#[derive(Clone, Debug)]
pub struct GnnModel {
    arch: Architecture,
    params: ParamSet,
    layers: Vec<GnnLayer>,
}

/// Directed message index of a graph: both orientations of every edge.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub nodes: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl EdgeIndex {
    pub fn new(g: &ConflictGraph) -> Self {
        let mut src = Vec::with_capacity(2 * g.edge_count());
        let mut dst = Vec::with_capacity(2 * g.edge_count());
        for &(u, v) in g.edges() {
            src.extend([u, v]);
            dst.extend([v, u]);
        }
        let n = g.node_count();
        let mut offsets = vec![0usize; n + 1];
        for &d in &dst {
            offsets[d + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut sources = vec![0usize; src.len()];
        for (&s, &d) in src.iter().zip(&dst) {
            sources[fill[d]] = s;
            fill[d] += 1;
        }
        Self {
            nodes: n,
            src: src.into(),
            dst: dst.into(),
            offsets,
            sources,
        }
    }

    /// Sources of the messages arriving at `node`, in message order.
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.sources[self.offsets[node]..self.offsets[node + 1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub f1: SoftAssignment,
    pub f2: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub forward_passes: usize,
    pub init_seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            forward_passes: 10,
            init_seed: 0,
        }
    }
}

impl GnnModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.k == 0 || arch.layers != LAYER_COUNT {
            return Err(Error::InvalidParameter(format!(
                "architecture needs k >= 1 and exactly {LAYER_COUNT} layers, got {arch:?}"
            )));
        }
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, "model-init", 0);
        let k = arch.k;
        let layers = (0..arch.layers)
            .map(|l| {
                Ok(GnnLayer {
                    attention: Mlp::new(
                        &mut params,
                        &format!("layer{l}.attention"),
                        &[2 * k, arch.attention_hidden, 1],
                        Activation::Sigmoid,
                        &mut r,
                    )?,
                    embed: Mlp::new(
                        &mut params,
                        &format!("layer{l}.embed"),
                        &[arch.d_embed + 4 * k, arch.update_hidden, arch.d_embed],
                        Activation::None,
                        &mut r,
                    )?,
                    color: Mlp::new(
                        &mut params,
                        &format!("layer{l}.color"),
                        &[k + arch.d_embed, arch.update_hidden, k],
                        Activation::Softmax,
                        &mut r,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            params,
            layers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn k(&self) -> usize {
        self.arch.k
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layers(&self) -> &[GnnLayer] {
        &self.layers
    }

    fn check_graph(&self, g: &ConflictGraph) -> Result<()> {
        if g.k() != self.arch.k {
            return Err(Error::Contract(format!(
                "model trained for k = {}, graph has k = {}",
                self.arch.k,
                g.k()
            )));
        }
        Ok(())
    }

    fn check_state(&self, edges: &EdgeIndex, f1: &Matrix, f2: &Matrix) -> Result<()> {
        if f1.shape() != (edges.nodes, self.arch.k)
            || f2.shape() != (edges.nodes, self.arch.d_embed)
        {
            return Err(Error::Contract(format!(
                "state shapes {:?}/{:?} do not fit {} nodes, k = {}, d_embed = {}",
                f1.shape(),
                f2.shape(),
                edges.nodes,
                self.arch.k,
                self.arch.d_embed
            )));
        }
        Ok(())
    }

    /// Records one layer on `tape`.
    pub fn layer_on_tape(
        &self,
        layer: usize,
        tape: &mut Tape,
        edges: &EdgeIndex,
        f1: Var,
        f2: Var,
    ) -> Result<(Var, Var)> {
        let l = self.layers.get(layer).ok_or_else(|| {
            Error::Contract(format!("layer {layer} out of {}", self.layers.len()))
        })?;
        let p = &self.params;
        let k = self.arch.k;
        let mut att = l.attention.layer_params();
        let (w0, b0) = att.next().expect("attention input layer");
        let (w1, b1) = att.next().expect("attention output layer");
        let w0 = tape.param(p, w0);
        let top = tape.slice_rows(w0, 0, k)?;
        let bottom = tape.slice_rows(w0, k, 2 * k)?;
        let from_src = tape.matmul(f1, top)?;
        let from_dst = tape.matmul(f1, bottom)?;
        let (b0, w1, b1) = (tape.param(p, b0), tape.param(p, w1), tape.param(p, b1));
        let agg = tape.edge_aggregate(
            f1,
            from_src,
            from_dst,
            b0,
            w1,
            b1,
            edges.src.clone(),
            edges.dst.clone(),
        )?;
        let embed_in = tape.concat(&[f2, agg])?;
        let f2_next = l.embed.forward(tape, p, embed_in)?;
        let color_in = tape.concat(&[f1, f2_next])?;
        let f1_next = l.color.forward(tape, p, color_in)?;
        Ok((f1_next, f2_next))
    }

    /// Records all layers, starting from `f1` and a zero embedding.
    pub fn forward_on_tape(&self, tape: &mut Tape, edges: &EdgeIndex, f1: Var) -> Result<Var> {
        let f1_shape = tape.value(f1).shape();
        let f2 = tape.input(Matrix::zeros(edges.nodes, self.arch.d_embed));
        self.check_state(
            edges,
            &Matrix::zeros(f1_shape.0, f1_shape.1),
            tape.value(f2),
        )?;
        let (mut a, mut b) = (f1, f2);
        for layer in 0..self.layers.len() {
            (a, b) = self.layer_on_tape(layer, tape, edges, a, b)?;
        }
        Ok(a)
    }

    pub fn layer_forward(
        &self,
        layer: usize,
        g: &ConflictGraph,
        state: &NodeState,
    ) -> Result<NodeState> {
        self.check_graph(g)?;
        let edges = EdgeIndex::new(g);
        self.check_state(&edges, state.f1.probs(), &state.f2)?;
        let mut tape = Tape::new();
        let f1 = tape.input(state.f1.probs().clone());
        let f2 = tape.input(state.f2.clone());
        let (a, b) = self.layer_on_tape(layer, &mut tape, &edges, f1, f2)?;
        let f2 = tape.take_value(b);
        Ok(NodeState {
            f1: SoftAssignment::new_unchecked(tape.take_value(a)),
            f2,
        })
    }

    pub fn model_forward(
        &self,
        g: &ConflictGraph,
        f1_init: &SoftAssignment,
    ) -> Result<SoftAssignment> {
        self.check_graph(g)?;
        self.forward_indexed(&EdgeIndex::new(g), f1_init.probs())
            .map(SoftAssignment::new_unchecked)
    }

    /// All layers without recording; same values as [`Self::forward_on_tape`].
    pub(crate) fn forward_indexed(&self, edges: &EdgeIndex, f1: &Matrix) -> Result<Matrix> {
        let mut f2 = Matrix::zeros(edges.nodes, self.arch.d_embed);
        self.check_state(edges, f1, &f2)?;
        let mut f1 = self.layer_plain(&self.layers[0], edges, f1, &mut f2)?;
        for l in &self.layers[1..] {
            f1 = self.layer_plain(l, edges, &f1, &mut f2)?;
        }
        Ok(f1)
    }

    /// One layer evaluated node by node over incoming messages; `f2` is
    /// replaced by the next embedding.
    fn layer_plain(
        &self,
        l: &GnnLayer,
        edges: &EdgeIndex,
        f1: &Matrix,
        f2: &mut Matrix,
    ) -> Result<Matrix> {
        let (n, k, d) = (edges.nodes, self.arch.k, self.arch.d_embed);
        let p = &self.params;
        let mut att = l.attention.layer_params();
        let (w0, b0) = att.next().expect("attention input layer");
        let (w1, b1) = att.next().expect("attention output layer");
        let w0 = p.value(w0);
        let hidden = w0.cols();
        let top = Matrix::from_vec(k, hidden, w0.data()[..k * hidden].to_vec())?;
        let bottom = Matrix::from_vec(k, hidden, w0.data()[k * hidden..].to_vec())?;
        let from_src = f1.matmul(&top)?;
        let from_dst = f1.matmul(&bottom)?;
        let (bias, head) = (p.value(b0).data(), p.value(w1).data());
        let head_bias = p.value(b1).data()[0];

        let width = d + 4 * k;
        let mut embed_in = Matrix::zeros(n, width);
        let mut msgs: Vec<f64> = Vec::new();
        for v in 0..n {
            let row = embed_in.row_mut(v);
            row[..d].copy_from_slice(f2.row(v));
            let incoming = edges.incoming(v);
            if incoming.is_empty() {
                continue;
            }
            let agg = &mut row[d..];
            let (fv, hv) = (f1.row(v), from_dst.row(v));
            msgs.clear();
            for &u in incoming {
                let score = sigmoid(head_bias + leaky_dot(from_src.row(u), hv, bias, head));
                msgs.extend(f1.row(u).iter().zip(fv).map(|(a, b)| (a - b) * score));
            }
            let deg = incoming.len() as f64;
            agg[..k].copy_from_slice(&msgs[..k]);
            agg[k..2 * k].copy_from_slice(&msgs[..k]);
            for (e, m) in msgs.chunks_exact(k).enumerate() {
                for j in 0..k {
                    if e > 0 {
                        if m[j] > agg[j] {
                            agg[j] = m[j];
                        }
                        if m[j] < agg[k + j] {
                            agg[k + j] = m[j];
                        }
                    }
                    agg[2 * k + j] += m[j];
                }
            }
            for j in 0..k {
                agg[2 * k + j] /= deg;
            }
            if incoming.len() >= 2 {
                for m in msgs.chunks_exact(k) {
                    for j in 0..k {
                        let dev = m[j] - agg[2 * k + j];
                        agg[3 * k + j] += dev * dev;
                    }
                }
                for j in 0..k {
                    agg[3 * k + j] = (agg[3 * k + j] / deg + STD_EPS).sqrt();
                }
            }
        }
        *f2 = mlp_forward(&l.embed, p, &embed_in)?;
        let mut color_in = Matrix::zeros(n, k + d);
        for v in 0..n {
            let row = color_in.row_mut(v);
            row[..k].copy_from_slice(f1.row(v));
            row[k..].copy_from_slice(f2.row(v));
        }
        mlp_forward(&l.color, p, &color_in)
    }

    /// Random one-hot start, then `forward_passes` applications of the
    /// model, each fed the previous output. Anchored rows are clamped to
    /// their one-hot before every pass and on the returned state.
    pub fn iterative_inference(
        &self,
        g: &ConflictGraph,
        cfg: &InferenceConfig,
    ) -> Result<SoftAssignment> {
        self.check_graph(g)?;
        if cfg.forward_passes == 0 {
            return Err(Error::InvalidParameter(
                "forward_passes must be at least 1".into(),
            ));
        }
        let edges = EdgeIndex::new(g);
        let mut f1 = random_one_hot(g.node_count(), g.k(), cfg.init_seed);
        for _ in 0..cfg.forward_passes {
            clamp_anchors(g, &mut f1);
            f1 = self.forward_indexed(&edges, &f1)?;
        }
        clamp_anchors(g, &mut f1);
        Ok(SoftAssignment::new_unchecked(f1))
    }

    pub fn fingerprint(&self) -> serde_json::Value {
        serde_json::to_value(self.arch).expect("architecture serializes")
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint::capture(&self.params, self.fingerprint(), meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: Architecture = serde_json::from_value(ck.fingerprint.clone())
            .map_err(|e| Error::Checkpoint(format!("bad architecture fingerprint: {e}")))?;
        let mut model = Self::new(arch, 0)?;
        ck.restore_into(&mut model.params)?;
        Ok(model)
    }
}

/// One uniformly random one-hot row per node.
pub fn random_one_hot(n: usize, k: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, "inference-init", 0);
    let mut m = Matrix::zeros(n, k);
    for v in 0..n {
        m[(v, r.gen_range(0..k))] = 1.0;
    }
    m
}

pub fn clamp_anchors(g: &ConflictGraph, f1: &mut Matrix) {
    for (&node, &color) in g.anchors() {
        let row = f1.row_mut(node);
        row.fill(0.0);
        row[color] = 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::harden;
    use crate::nn::tape::{sigmoid, softmax_in_place, LEAKY_SLOPE, STD_EPS};
    use crate::rng;

    fn small_arch(k: usize) -> Architecture {
        Architecture {
            k,
            d_embed: 4,
            attention_hidden: 5,
            update_hidden: 6,
            layers: LAYER_COUNT,
        }
    }

    fn random_soft(n: usize, k: usize, seed: u64) -> SoftAssignment {
        let mut r = rng::stream(seed, "soft", 0);
        let mut m = Matrix::zeros(n, k);
        for v in 0..n {
            let row = m.row_mut(v);
            for x in row.iter_mut() {
                *x = r.gen_range(-2.0..2.0);
            }
            softmax_in_place(row);
        }
        SoftAssignment::new(m).unwrap()
    }

    /// Dense MLP applied to one row, written out longhand.
    fn mlp_row(model: &GnnModel, m: &Mlp, x: &[f64]) -> Vec<f64> {
        let ps = model.params();
        let layers: Vec<_> = m.layer_params().collect();
        let mut h = x.to_vec();
        for (i, &(w, b)) in layers.iter().enumerate() {
            let (wv, bv) = (ps.value(w), ps.value(b));
            let mut out = vec![0.0; wv.cols()];
            for j in 0..wv.cols() {
                let mut s = bv[(0, j)];
                for (p, &hp) in h.iter().enumerate() {
                    s += hp * wv[(p, j)];
                }
                out[j] = if i + 1 < layers.len() && s <= 0.0 {
                    LEAKY_SLOPE * s
                } else {
                    s
                };
            }
            h = out;
        }
        match m.output_activation() {
            Activation::None => {}
            Activation::Sigmoid => h.iter_mut().for_each(|x| *x = sigmoid(*x)),
            Activation::Softmax => softmax_in_place(&mut h),
        }
        h
    }

    /// Independent straight-line evaluation of one layer.
    fn layer_oracle(
        model: &GnnModel,
        layer: usize,
        g: &ConflictGraph,
        f1: &Matrix,
        f2: &Matrix,
    ) -> (Matrix, Matrix) {
        let l = &model.layers()[layer];
        let (n, k) = (g.node_count(), g.k());
        let mut f2_next = Matrix::zeros(n, f2.cols());
        let mut f1_next = Matrix::zeros(n, k);
        for v in 0..n {
            let mut msgs: Vec<Vec<f64>> = Vec::new();
            for &u in g.neighbors(v) {
                let pair: Vec<f64> = f1.row(u).iter().chain(f1.row(v)).copied().collect();
                let score = mlp_row(model, &l.attention, &pair)[0];
                msgs.push((0..k).map(|c| (f1[(u, c)] - f1[(v, c)]) * score).collect());
            }
            let mut agg = vec![0.0; 4 * k];
            if !msgs.is_empty() {
                let d = msgs.len() as f64;
                for c in 0..k {
                    let col: Vec<f64> = msgs.iter().map(|m| m[c]).collect();
                    let mean = col.iter().sum::<f64>() / d;
                    agg[c] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    agg[k + c] = col.iter().copied().fold(f64::INFINITY, f64::min);
                    agg[2 * k + c] = mean;
                    agg[3 * k + c] = if msgs.len() >= 2 {
                        (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d + STD_EPS).sqrt()
                    } else {
                        0.0
                    };
                }
            }
            let embed_in: Vec<f64> = f2.row(v).iter().chain(&agg).copied().collect();
            let e = mlp_row(model, &l.embed, &embed_in);
            let color_in: Vec<f64> = f1.row(v).iter().chain(&e).copied().collect();
            let c = mlp_row(model, &l.color, &color_in);
            f2_next.row_mut(v).copy_from_slice(&e);
            f1_next.row_mut(v).copy_from_slice(&c);
        }
        (f1_next, f2_next)
    }

    fn perturb_biases(model: &mut GnnModel, seed: u64) {
        let mut r = rng::stream(seed, "bias", 0);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            if model.params().name(id).contains(".b") {
                for x in model.params_mut().value_mut(id).data_mut() {
                    *x = r.gen_range(-0.3..0.3);
                }
            }
        }
    }

    #[test]
    fn layer_matches_straight_line_oracle() {
        let g = ConflictGraph::new(4, 3, [(0, 1), (1, 2), (2, 3), (0, 2)], []).unwrap();
        let mut model = GnnModel::new(Architecture::new(3), 17).unwrap();
        perturb_biases(&mut model, 17);
        let f1 = random_soft(4, 3, 2);
        let mut r = rng::stream(3, "f2", 0);
        let f2 =
            Matrix::from_vec(4, 32, (0..128).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let state = NodeState {
            f1: f1.clone(),
            f2: f2.clone(),
        };
        for layer in 0..LAYER_COUNT {
            let got = model.layer_forward(layer, &g, &state).unwrap();
            let (e1, e2) = layer_oracle(&model, layer, &g, f1.probs(), &f2);
            for (a, b) in got.f1.probs().data().iter().zip(e1.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in got.f2.data().iter().zip(e2.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_only_sees_its_own_state() {
        let g = ConflictGraph::new(1, 3, [], []).unwrap();
        let model = GnnModel::new(small_arch(3), 1).unwrap();
        let f1 = random_soft(1, 3, 4);
        let f2 = Matrix::filled(1, 4, 0.25);
        let state = NodeState {
            f1: f1.clone(),
            f2: f2.clone(),
        };
        let got = model.layer_forward(0, &g, &state).unwrap();
        let mut embed_in = f2.row(0).to_vec();
        embed_in.extend([0.0; 12]);
        let e = mlp_row(&model, &model.layers()[0].embed, &embed_in);
        for (a, b) in got.f2.row(0).iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_neighbors_send_zero_messages() {
        let g = ConflictGraph::new(2, 3, [(0, 1)], []).unwrap();
        let model = GnnModel::new(small_arch(3), 2).unwrap();
        let same = SoftAssignment::new(
            Matrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5]]).unwrap(),
        )
        .unwrap();
        let f2 = Matrix::zeros(2, 4);
        let connected = model
            .layer_forward(
                0,
                &g,
                &NodeState {
                    f1: same.clone(),
                    f2: f2.clone(),
                },
            )
            .unwrap();
        let g0 = ConflictGraph::new(2, 3, [], []).unwrap();
        let isolated = model
            .layer_forward(0, &g0, &NodeState { f1: same, f2 })
            .unwrap();
        assert_eq!(connected, isolated);
    }

    #[test]
    fn zeroed_model_outputs_uniform_rows() {
        let g = ConflictGraph::new(4, 3, [(0, 1), (1, 2)], []).unwrap();
        let mut model = GnnModel::new(Architecture::new(3), 3).unwrap();
        model.params_mut().set_all(0.0);
        let out = model.model_forward(&g, &random_soft(4, 3, 1)).unwrap();
        for v in 0..4 {
            for &p in out.row(v) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_row_stochastic() {
        let (g, _) = crate::instance::generate_planted(25, 3, 0.3, 4).unwrap();
        let model = GnnModel::new(Architecture::new(3), 5).unwrap();
        let f = random_soft(25, 3, 9);
        let a = model.model_forward(&g, &f).unwrap();
        let b = model.model_forward(&g, &f).unwrap();
        assert_eq!(a, b);
        assert!(SoftAssignment::new(a.into_matrix()).is_ok());
    }

    #[test]
    fn untaped_forward_matches_tape() {
        let (g, _) = crate::instance::generate_planted(30, 3, 0.2, 11).unwrap();
        let g = ConflictGraph::new(32, 3, g.edges().iter().copied().chain([(30, 31)]), []).unwrap();
        for arch in [Architecture::new(3), small_arch(3)] {
            let model = GnnModel::new(arch, 12).unwrap();
            let f = random_soft(32, 3, 13);
            let edges = EdgeIndex::new(&g);
            let plain = model.forward_indexed(&edges, f.probs()).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(f.probs().clone());
            let out = model.forward_on_tape(&mut tape, &edges, x).unwrap();
            for (a, b) in plain.data().iter().zip(tape.value(out).data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_pass_inference_is_one_forward_on_the_random_init() {
        let (g, _) = crate::instance::generate_planted(15, 3, 0.4, 8).unwrap();
        let model = GnnModel::new(Architecture::new(3), 6).unwrap();
        let cfg = InferenceConfig {
            forward_passes: 1,
            init_seed: 77,
        };
        let init = SoftAssignment::new(random_one_hot(15, 3, 77)).unwrap();
        assert_eq!(
            model.iterative_inference(&g, &cfg).unwrap(),
            model.model_forward(&g, &init).unwrap()
        );
        let ten = InferenceConfig {
            forward_passes: 10,
            init_seed: 77,
        };
        assert_eq!(
            model.iterative_inference(&g, &ten).unwrap(),
            model.iterative_inference(&g, &ten).unwrap()
        );
        assert!(model
            .iterative_inference(
                &g,
                &InferenceConfig {
                    forward_passes: 0,
                    init_seed: 1
                }
            )
            .is_err());
    }

    #[test]
    fn anchors_survive_inference() {
        let (g, _) = crate::instance::generate_planted(12, 3, 0.5, 2).unwrap();
        let g = g.with_anchors([(0, 2), (5, 1)]).unwrap();
        let model = GnnModel::new(Architecture::new(3), 6).unwrap();
        let out = model
            .iterative_inference(&g, &InferenceConfig::default())
            .unwrap();
        let c = harden(&out);
        assert_eq!((c[0], c[5]), (2, 1));
    }

    #[test]
    fn permutation_equivariance() {
        let (g, _) = crate::instance::generate_planted(18, 3, 0.35, 12).unwrap();
        let model = GnnModel::new(Architecture::new(3), 8).unwrap();
        let f = random_soft(18, 3, 13);
        let mut perm: Vec<usize> = (0..18).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng::stream(1, "perm", 0));
        let gp = g.permuted(&perm).unwrap();
        let mut fp = Matrix::zeros(18, 3);
        for v in 0..18 {
            fp.row_mut(perm[v]).copy_from_slice(f.row(v));
        }
        let out = model.model_forward(&g, &f).unwrap();
        let outp = model
            .model_forward(&gp, &SoftAssignment::new(fp).unwrap())
            .unwrap();
        for v in 0..18 {
            for c in 0..3 {
                assert!((out.row(v)[c] - outp.row(perm[v])[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_restores_identical_model() {
        let model = GnnModel::new(small_arch(3), 21).unwrap();
        let ck = model.to_checkpoint(serde_json::json!({"epochs": 3}));
        let back =
            GnnModel::from_checkpoint(&Checkpoint::from_json(&ck.to_json().unwrap()).unwrap())
                .unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.architecture(), model.architecture());

        let mut wrong = ck.clone();
        wrong.params[0].rows += 1;
        assert!(GnnModel::from_checkpoint(&wrong).is_err());
    }

    #[test]
    fn k_mismatch_is_rejected() {
        let g = ConflictGraph::new(3, 4, [(0, 1)], []).unwrap();
        let model = GnnModel::new(small_arch(3), 1).unwrap();
        assert!(model
            .iterative_inference(&g, &InferenceConfig::default())
            .is_err());
    }
}
