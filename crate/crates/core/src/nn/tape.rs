//! Reverse-mode differentiation over a recorded list of matrix operations.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! list in reverse and accumulates gradients. Parameters enter the tape by
//! copy and their gradients are added into the owning [`ParamSet`].

use std::sync::Arc;

use super::matrix::gemm;
use super::{Matrix, ParamId, ParamSet};
use crate::error::{Error, Result};

/// Negative-side slope of the hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Added to the variance before the square root in std aggregation.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Leaky(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Arc<[usize]>),
    MulCol(Var, Var),
    PairLeaky(Box<PairCache>),
    PairScore(Box<PairCache>, Var, Var),
    EdgeAggregate(Box<EdgeCache>),
    SegmentStats(Box<SegmentCache>),
    Sum(Var),
}

#[derive(Debug)]
struct EdgeCache {
    x: Var,
    pair: PairCache,
    w: Var,
    wb: Var,
    nodes: usize,
    scores: Vec<f64>,
    degree: Vec<usize>,
    arg_max: Vec<usize>,
    arg_min: Vec<usize>,
}

#[derive(Debug)]
struct SegmentCache {
    msgs: Var,
    dst: Arc<[usize]>,
    degree: Vec<usize>,
    arg_max: Vec<usize>,
    arg_min: Vec<usize>,
}

#[derive(Debug)]
struct PairCache {
    a: Var,
    b: Var,
    bias: Var,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    /// Whether any parameter feeds this node.
    requires: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Matrix {
        std::mem::replace(&mut self.nodes[v.0].value, Matrix::zeros(0, 0))
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires = self.op_requires(&op);
        self.nodes.push(Node {
            value,
            op,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn op_requires(&self, op: &Op) -> bool {
        match op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::MulCol(a, b) => self.req(*a) || self.req(*b),
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Leaky(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::Gather(a, _)
            | Op::Sum(a) => self.req(*a),
            Op::Concat(parts) => parts.iter().any(|&p| self.req(p)),
            Op::PairLeaky(c) => self.req(c.a) || self.req(c.b) || self.req(c.bias),
            Op::PairScore(c, w, wb) => {
                self.req(c.a) || self.req(c.b) || self.req(c.bias) || self.req(*w) || self.req(*wb)
            }
            Op::SegmentStats(c) => self.req(c.msgs),
            Op::EdgeAggregate(c) => {
                let p = &c.pair;
                [c.x, p.a, p.b, p.bias, c.w, c.wb]
                    .iter()
                    .any(|&v| self.req(v))
            }
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Matrix::zeros(sa.0, sb.1);
        gemm(false, self.value(a), false, self.value(b), &mut out, 0.0);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb != (1, sa.1) {
            return Err(shape_err("add_bias", sa, sb));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..sa.0 {
            for (x, y) in out.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(sa.0, sa.1, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        Matrix::from_vec(v.rows(), v.cols(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.map(a, |x| alpha * x);
        self.push(out, Op::Scale(a, alpha))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { LEAKY_SLOPE * x });
        self.push(out, Op::Leaky(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat", self.shape(parts[0]), self.shape(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let dst = out.row_mut(i);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} of {r} rows"
            )));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let out = Matrix::from_vec(end - start, c, data)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Output row `i` is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of {r} rows"
            )));
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(index.len(), c);
        for (i, &j) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(j));
        }
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// `leaky(a[src[e]] + b[dst[e]] + bias)` for every pair `e`, with a
    /// `1 x c` bias.
    pub fn pair_leaky(
        &mut self,
        a: Var,
        b: Var,
        bias: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    ) -> Result<Var> {
        self.check_pairs("pair_leaky", a, b, bias, &src, &dst)?;
        let sa = self.shape(a);
        let (va, vb, vc) = (self.value(a), self.value(b), self.value(bias).data());
        let mut data = Vec::with_capacity(src.len() * sa.1);
        for (&i, &j) in src.iter().zip(dst.iter()) {
            let (ra, rb) = (va.row(i), vb.row(j));
            data.extend(ra.iter().zip(rb).zip(vc).map(|((x, y), c)| {
                let z = x + y + c;
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }));
        }
        let out = Matrix::from_vec(src.len(), sa.1, data)?;
        let cache = PairCache {
            a,
            b,
            bias,
            src,
            dst,
        };
        Ok(self.push(out, Op::PairLeaky(Box::new(cache))))
    }

    /// `leaky(a[src[e]] + b[dst[e]] + bias) * w + wb` for every pair `e`,
    /// one column. The hidden rows are recomputed in the backward pass
    /// instead of being stored.
    #[allow(clippy::too_many_arguments)]
    pub fn pair_score(
        &mut self,
        a: Var,
        b: Var,
        bias: Var,
        w: Var,
        wb: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    ) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sw != (sa.1, 1) || self.shape(wb) != (1, 1) {
            return Err(shape_err("pair_score", sa, sw));
        }
        self.check_pairs("pair_score", a, b, bias, &src, &dst)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (vc, vw) = (self.value(bias).data(), self.value(w).data());
        let b0 = self.value(wb).data()[0];
        let data = src
            .iter()
            .zip(dst.iter())
            .map(|(&i, &j)| b0 + leaky_dot(va.row(i), vb.row(j), vc, vw))
            .collect();
        let out = Matrix::from_vec(src.len(), 1, data)?;
        let cache = PairCache {
            a,
            b,
            bias,
            src,
            dst,
        };
        Ok(self.push(out, Op::PairScore(Box::new(cache), w, wb)))
    }

    fn check_pairs(
        &self,
        op: &str,
        a: Var,
        b: Var,
        bias: Var,
        src: &[usize],
        dst: &[usize],
    ) -> Result<()> {
        let (sa, sb, sc) = (self.shape(a), self.shape(b), self.shape(bias));
        if sa.1 != sb.1 || sc != (1, sa.1) {
            return Err(shape_err(op, sa, sb));
        }
        if src.len() != dst.len() {
            return Err(Error::Contract(format!(
                "{op}: {} sources for {} destinations",
                src.len(),
                dst.len()
            )));
        }
        if src.iter().any(|&i| i >= sa.0) || dst.iter().any(|&i| i >= sb.0) {
            return Err(Error::Contract(format!("{op}: index out of range")));
        }
        Ok(())
    }

    /// Attention-weighted message aggregation in one op. With
    /// `score[e] = sigmoid(pair_score(a, b, bias, w, wb)[e])` and
    /// `msg[e] = (x[src[e]] - x[dst[e]]) * score[e]`, returns
    /// `segment_stats(msg, dst, nodes)`. Only the scores are kept for the
    /// backward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_aggregate(
        &mut self,
        x: Var,
        a: Var,
        b: Var,
        bias: Var,
        w: Var,
        wb: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    ) -> Result<Var> {
        let (sx, sa, sw) = (self.shape(x), self.shape(a), self.shape(w));
        if sw != (sa.1, 1) || self.shape(wb) != (1, 1) {
            return Err(shape_err("edge_aggregate", sa, sw));
        }
        if self.shape(b).0 != sx.0 || sa.0 != sx.0 {
            return Err(shape_err("edge_aggregate", sx, sa));
        }
        self.check_pairs("edge_aggregate", a, b, bias, &src, &dst)?;
        let (nodes, c) = sx;
        let (vx, va, vb) = (self.value(x), self.value(a), self.value(b));
        let (vc, vw) = (self.value(bias).data(), self.value(w).data());
        let b0 = self.value(wb).data()[0];
        let scores: Vec<f64> = src
            .iter()
            .zip(dst.iter())
            .map(|(&i, &j)| sigmoid(b0 + leaky_dot(va.row(i), vb.row(j), vc, vw)))
            .collect();
        let mut degree = vec![0usize; nodes];
        let mut arg_max = vec![usize::MAX; nodes * c];
        let mut arg_min = vec![usize::MAX; nodes * c];
        let mut out = Matrix::zeros(nodes, 4 * c);
        let mut msg = vec![0.0; c];
        for (e, (&i, &d)) in src.iter().zip(dst.iter()).enumerate() {
            degree[d] += 1;
            for ((m, p), q) in msg.iter_mut().zip(vx.row(i)).zip(vx.row(d)) {
                *m = (p - q) * scores[e];
            }
            let o = out.row_mut(d);
            for j in 0..c {
                let slot = d * c + j;
                if arg_max[slot] == usize::MAX || msg[j] > o[j] {
                    o[j] = msg[j];
                    arg_max[slot] = e;
                }
                if arg_min[slot] == usize::MAX || msg[j] < o[c + j] {
                    o[c + j] = msg[j];
                    arg_min[slot] = e;
                }
                o[2 * c + j] += msg[j];
            }
        }
        for (d, &deg) in degree.iter().enumerate() {
            if deg > 0 {
                out.row_mut(d)[2 * c..3 * c]
                    .iter_mut()
                    .for_each(|m| *m /= deg as f64);
            }
        }
        for (e, (&i, &d)) in src.iter().zip(dst.iter()).enumerate() {
            if degree[d] < 2 {
                continue;
            }
            let (xi, xd) = (vx.row(i), vx.row(d));
            let o = out.row_mut(d);
            for j in 0..c {
                let dev = (xi[j] - xd[j]) * scores[e] - o[2 * c + j];
                o[3 * c + j] += dev * dev;
            }
        }
        for (d, &deg) in degree.iter().enumerate() {
            if deg >= 2 {
                out.row_mut(d)[3 * c..]
                    .iter_mut()
                    .for_each(|v| *v = (*v / deg as f64 + STD_EPS).sqrt());
            }
        }
        let cache = EdgeCache {
            x,
            pair: PairCache {
                a,
                b,
                bias,
                src,
                dst,
            },
            w,
            wb,
            nodes,
            scores,
            degree,
            arg_max,
            arg_min,
        };
        Ok(self.push(out, Op::EdgeAggregate(Box::new(cache))))
    }

    /// Scales row `i` of `a` by `s[i, 0]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if ss != (sa.0, 1) {
            return Err(shape_err("mul_col", sa, ss));
        }
        let mut out = self.value(a).clone();
        let sv = self.value(s).data().to_vec();
        for (i, &f) in sv.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= f);
        }
        Ok(self.push(out, Op::MulCol(a, s)))
    }

    /// Per-node statistics of the incoming rows of `msgs` (`msgs` row `e`
    /// goes to node `dst[e]`): `[max | min | mean | std]`, width `4 * c`.
    /// Nodes without incoming rows get zeros; nodes with one get std 0;
    /// otherwise std is `sqrt(var + STD_EPS)` with population variance.
    pub fn segment_stats(&mut self, msgs: Var, dst: Arc<[usize]>, nodes: usize) -> Result<Var> {
        let (e, c) = self.shape(msgs);
        if dst.len() != e {
            return Err(Error::Contract(format!(
                "segment_stats: {} destinations for {e} rows",
                dst.len()
            )));
        }
        if let Some(&bad) = dst.iter().find(|&&d| d >= nodes) {
            return Err(Error::Contract(format!(
                "segment_stats: node {bad} >= {nodes}"
            )));
        }
        let m = self.value(msgs);
        let mut degree = vec![0usize; nodes];
        let mut arg_max = vec![usize::MAX; nodes * c];
        let mut arg_min = vec![usize::MAX; nodes * c];
        let mut out = Matrix::zeros(nodes, 4 * c);
        for (row, &d) in dst.iter().enumerate() {
            degree[d] += 1;
            let x = m.row(row);
            let o = out.row_mut(d);
            for j in 0..c {
                let slot = d * c + j;
                if arg_max[slot] == usize::MAX || x[j] > o[j] {
                    o[j] = x[j];
                    arg_max[slot] = row;
                }
                if arg_min[slot] == usize::MAX || x[j] < o[c + j] {
                    o[c + j] = x[j];
                    arg_min[slot] = row;
                }
                o[2 * c + j] += x[j];
            }
        }
        for (d, &deg) in degree.iter().enumerate() {
            if deg > 0 {
                let o = out.row_mut(d);
                for j in 0..c {
                    o[2 * c + j] /= deg as f64;
                }
            }
        }
        for (row, &d) in dst.iter().enumerate() {
            if degree[d] < 2 {
                continue;
            }
            let x = m.row(row);
            let o = out.row_mut(d);
            for j in 0..c {
                let dev = x[j] - o[2 * c + j];
                o[3 * c + j] += dev * dev;
            }
        }
        for (d, &deg) in degree.iter().enumerate() {
            if deg >= 2 {
                let o = out.row_mut(d);
                for j in 0..c {
                    o[3 * c + j] = (o[3 * c + j] / deg as f64 + STD_EPS).sqrt();
                }
            }
        }
        let cache = SegmentCache {
            msgs,
            dst,
            degree,
            arg_max,
            arg_min,
        };
        Ok(self.push(out, Op::SegmentStats(Box::new(cache))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// Backpropagates from a `1 x 1` output and accumulates into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let shape = self.nodes.get(loss.0).map(|n| n.value.shape());
        if shape != Some((1, 1)) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {shape:?}"
            )));
        }
        self.backward_with(loss, Matrix::filled(1, 1, 1.0), params)
    }

    /// Backpropagates an explicit output gradient `seed` from `out`.
    pub fn backward_with(
        &self,
        out: Var,
        seed: Matrix,
        params: &mut ParamSet,
    ) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let node = self
            .nodes
            .get(out.0)
            .ok_or_else(|| Error::Contract(format!("variable {} not on tape", out.0)))?;
        if node.value.shape() != seed.shape() {
            return Err(shape_err("backward seed", node.value.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, params);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>], params: &mut ParamSet) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.grad_mut(*id).add_scaled(g, 1.0),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.req(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm(false, g, true, vb, &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if self.req(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(true, va, false, g, &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(a, bias) => {
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (x, y) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *bias, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale(-1.0);
                accumulate(grads, *b, neg);
            }
            Op::Scale(a, alpha) => {
                let mut d = g.clone();
                d.scale(*alpha);
                accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = elementwise(g, self.value(*a), |gi, x| 2.0 * x * gi);
                accumulate(grads, *a, d);
            }
            Op::Leaky(a) => {
                let d = elementwise(g, self.value(*a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else {
                        LEAKY_SLOPE * gi
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = elementwise(g, &node.value, |gi, y| gi * y * (1.0 - y));
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, x) in d.row_mut(r).iter_mut().enumerate() {
                        *x = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if !self.req(p) {
                        off += c;
                        continue;
                    }
                    let mut d = Matrix::zeros(r, c);
                    for row in 0..r {
                        d.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                    }
                    off += c;
                    accumulate(grads, p, d);
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                d.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
            Op::Gather(a, _) if !self.req(*a) => {}
            Op::Gather(a, index) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (row, &j) in index.iter().enumerate() {
                    for (x, y) in d.row_mut(j).iter_mut().zip(g.row(row)) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::MulCol(a, s) => {
                let (va, vs) = (self.value(*a), self.value(*s));
                let mut da = g.clone();
                let mut ds = Matrix::zeros(vs.rows(), 1);
                for r in 0..va.rows() {
                    let f = vs[(r, 0)];
                    let mut acc = 0.0;
                    for (x, (&gi, &ai)) in
                        da.row_mut(r).iter_mut().zip(g.row(r).iter().zip(va.row(r)))
                    {
                        *x = gi * f;
                        acc += gi * ai;
                    }
                    ds[(r, 0)] = acc;
                }
                accumulate(grads, *a, da);
                accumulate(grads, *s, ds);
            }
            Op::PairLeaky(cache) => {
                let out = &node.value;
                let cols = out.cols();
                let mut dz = Matrix::zeros(out.rows(), cols);
                for (dr, (gr, or)) in dz.data_mut().chunks_exact_mut(cols).zip(
                    g.data()
                        .chunks_exact(cols)
                        .zip(out.data().chunks_exact(cols)),
                ) {
                    for ((d, &gi), &o) in dr.iter_mut().zip(gr).zip(or) {
                        *d = if o > 0.0 { gi } else { LEAKY_SLOPE * gi };
                    }
                }
                let scatter = |index: &[usize], rows: usize| {
                    let mut d = Matrix::zeros(rows, cols);
                    for (e, &i) in index.iter().enumerate() {
                        for (x, y) in d.row_mut(i).iter_mut().zip(dz.row(e)) {
                            *x += y;
                        }
                    }
                    d
                };
                if self.req(cache.a) {
                    accumulate(grads, cache.a, scatter(&cache.src, self.shape(cache.a).0));
                }
                if self.req(cache.b) {
                    accumulate(grads, cache.b, scatter(&cache.dst, self.shape(cache.b).0));
                }
                if self.req(cache.bias) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..dz.rows() {
                        for (x, y) in db.data_mut().iter_mut().zip(dz.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(grads, cache.bias, db);
                }
            }
            Op::PairScore(cache, w, wb) => {
                let (va, vb) = (self.value(cache.a), self.value(cache.b));
                let (vc, vw) = (self.value(cache.bias).data(), self.value(*w).data());
                let cols = vw.len();
                let mut da = self.req(cache.a).then(|| Matrix::zeros(va.rows(), cols));
                let mut db = self.req(cache.b).then(|| Matrix::zeros(vb.rows(), cols));
                let mut dc = vec![0.0; cols];
                let mut dw = vec![0.0; cols];
                let mut dwb = 0.0;
                let mut dz = vec![0.0; cols];
                for (e, (&i, &j)) in cache.src.iter().zip(cache.dst.iter()).enumerate() {
                    let ge = g.data()[e];
                    if ge == 0.0 {
                        continue;
                    }
                    dwb += ge;
                    let (ra, rb) = (va.row(i), vb.row(j));
                    for t in 0..cols {
                        let h = ra[t] + rb[t] + vc[t];
                        let (act, slope) = if h > 0.0 {
                            (h, 1.0)
                        } else {
                            (LEAKY_SLOPE * h, LEAKY_SLOPE)
                        };
                        dw[t] += ge * act;
                        dz[t] = ge * vw[t] * slope;
                        dc[t] += dz[t];
                    }
                    if let Some(d) = da.as_mut() {
                        d.row_mut(i).iter_mut().zip(&dz).for_each(|(x, y)| *x += y);
                    }
                    if let Some(d) = db.as_mut() {
                        d.row_mut(j).iter_mut().zip(&dz).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(d) = da {
                    accumulate(grads, cache.a, d);
                }
                if let Some(d) = db {
                    accumulate(grads, cache.b, d);
                }
                if self.req(cache.bias) {
                    accumulate(
                        grads,
                        cache.bias,
                        Matrix::from_vec(1, cols, dc).expect("width"),
                    );
                }
                if self.req(*w) {
                    accumulate(grads, *w, Matrix::from_vec(cols, 1, dw).expect("width"));
                }
                if self.req(*wb) {
                    accumulate(grads, *wb, Matrix::filled(1, 1, dwb));
                }
            }
            Op::EdgeAggregate(cache) => {
                let p = &cache.pair;
                let (vx, va, vb) = (self.value(cache.x), self.value(p.a), self.value(p.b));
                let (vc, vw) = (self.value(p.bias).data(), self.value(cache.w).data());
                let out = &node.value;
                let (c, hidden) = (vx.cols(), vw.len());
                let mut dx = self.req(cache.x).then(|| Matrix::zeros(cache.nodes, c));
                let mut da = self.req(p.a).then(|| Matrix::zeros(va.rows(), hidden));
                let mut db = self.req(p.b).then(|| Matrix::zeros(vb.rows(), hidden));
                let mut dc = vec![0.0; hidden];
                let mut dw = vec![0.0; hidden];
                let mut dwb = 0.0;
                let mut dz = vec![0.0; hidden];
                for (e, (&i, &d)) in p.src.iter().zip(p.dst.iter()).enumerate() {
                    let deg = cache.degree[d];
                    let (gd, od) = (g.row(d), out.row(d));
                    let (xi, xd) = (vx.row(i), vx.row(d));
                    let score = cache.scores[e];
                    let mut dscore = 0.0;
                    for j in 0..c {
                        let slot = d * c + j;
                        let diff = xi[j] - xd[j];
                        let mut dm = gd[2 * c + j] / deg as f64;
                        if cache.arg_max[slot] == e {
                            dm += gd[j];
                        }
                        if cache.arg_min[slot] == e {
                            dm += gd[c + j];
                        }
                        if deg >= 2 {
                            dm += gd[3 * c + j] * (diff * score - od[2 * c + j])
                                / (deg as f64 * od[3 * c + j]);
                        }
                        dscore += dm * diff;
                        if let Some(dx) = dx.as_mut() {
                            dx[(i, j)] += dm * score;
                            dx[(d, j)] -= dm * score;
                        }
                    }
                    let dlogit = dscore * score * (1.0 - score);
                    if dlogit == 0.0 {
                        continue;
                    }
                    dwb += dlogit;
                    let (ra, rb) = (va.row(i), vb.row(d));
                    for t in 0..hidden {
                        let h = ra[t] + rb[t] + vc[t];
                        let (act, slope) = if h > 0.0 {
                            (h, 1.0)
                        } else {
                            (LEAKY_SLOPE * h, LEAKY_SLOPE)
                        };
                        dw[t] += dlogit * act;
                        dz[t] = dlogit * vw[t] * slope;
                        dc[t] += dz[t];
                    }
                    if let Some(m) = da.as_mut() {
                        m.row_mut(i).iter_mut().zip(&dz).for_each(|(x, y)| *x += y);
                    }
                    if let Some(m) = db.as_mut() {
                        m.row_mut(d).iter_mut().zip(&dz).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(m) = dx {
                    accumulate(grads, cache.x, m);
                }
                if let Some(m) = da {
                    accumulate(grads, p.a, m);
                }
                if let Some(m) = db {
                    accumulate(grads, p.b, m);
                }
                if self.req(p.bias) {
                    accumulate(
                        grads,
                        p.bias,
                        Matrix::from_vec(1, hidden, dc).expect("width"),
                    );
                }
                if self.req(cache.w) {
                    accumulate(
                        grads,
                        cache.w,
                        Matrix::from_vec(hidden, 1, dw).expect("width"),
                    );
                }
                if self.req(cache.wb) {
                    accumulate(grads, cache.wb, Matrix::filled(1, 1, dwb));
                }
            }
            Op::SegmentStats(cache) if !self.req(cache.msgs) => {}
            Op::SegmentStats(cache) => {
                let m = self.value(cache.msgs);
                let c = m.cols();
                let out = &node.value;
                let mut d = Matrix::zeros(m.rows(), c);
                for (row, &dn) in cache.dst.iter().enumerate() {
                    let deg = cache.degree[dn];
                    let (gd, od) = (g.row(dn), out.row(dn));
                    let x = m.row(row);
                    let dr = d.row_mut(row);
                    for j in 0..c {
                        let slot = dn * c + j;
                        let mut acc = gd[2 * c + j] / deg as f64;
                        if cache.arg_max[slot] == row {
                            acc += gd[j];
                        }
                        if cache.arg_min[slot] == row {
                            acc += gd[c + j];
                        }
                        if deg >= 2 {
                            acc += gd[3 * c + j] * (x[j] - od[2 * c + j])
                                / (deg as f64 * od[3 * c + j]);
                        }
                        dr[j] = acc;
                    }
                }
                accumulate(grads, cache.msgs, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(g) => g.add_scaled(&d, 1.0),
        slot @ None => *slot = Some(d),
    }
}

fn elementwise(g: &Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Matrix::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

/// `sum_t leaky(a[t] + b[t] + c[t]) * w[t]`, four independent partial sums.
#[inline]
pub(crate) fn leaky_dot(a: &[f64], b: &[f64], c: &[f64], w: &[f64]) -> f64 {
    #[inline(always)]
    fn term(a: f64, b: f64, c: f64, w: f64) -> f64 {
        let h = a + b + c;
        w * if h > 0.0 { h } else { LEAKY_SLOPE * h }
    }
    let n = w.len();
    let (a, b, c) = (&a[..n], &b[..n], &c[..n]);
    let mut acc = [0.0; 4];
    let quads = a
        .chunks_exact(4)
        .zip(b.chunks_exact(4))
        .zip(c.chunks_exact(4))
        .zip(w.chunks_exact(4));
    for (((qa, qb), qc), qw) in quads {
        for l in 0..4 {
            acc[l] += term(qa[l], qb[l], qc[l], qw[l]);
        }
    }
    for t in n - n % 4..n {
        acc[0] += term(a[t], b[t], c[t], w[t]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
