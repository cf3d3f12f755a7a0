use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::gemm;
use super::tape::{sigmoid, softmax_in_place, LEAKY_SLOPE};
use super::{Matrix, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Softmax,
    Sigmoid,
}

/// Fully connected stack: leaky-rectifier on hidden layers, configurable
/// output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    output: Activation,
}

impl Mlp {
    /// Registers `{name}.w{i}` / `{name}.b{i}` for each layer. Weights get
    /// fan-in scaled uniform values, biases start at zero.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract(format!("bad MLP widths {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            weights.push(params.register_uniform(format!("{name}.w{i}"), pair[0], pair[1], rng)?);
            biases.push(params.register(format!("{name}.b{i}"), Matrix::zeros(1, pair[1]))?);
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            output,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn layer_params(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.weights
            .iter()
            .copied()
            .zip(self.biases.iter().copied())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(Error::Contract(format!(
                "MLP expects input width {}, got {cols}",
                self.input_width()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).cols())?;
        let mut h = x;
        for (i, (w, b)) in self.layer_params().enumerate() {
            let wv = tape.param(params, w);
            let bv = tape.param(params, b);
            h = tape.matmul(h, wv)?;
            h = tape.add_bias(h, bv)?;
            if i + 1 < self.weights.len() {
                h = tape.leaky_relu(h);
            }
        }
        Ok(self.finish(tape, h))
    }

    /// Evaluates the MLP on `concat(x[src[e]], x[dst[e]])` for every pair
    /// `e`, without materializing the concatenated rows: the first layer is
    /// split into the halves acting on each endpoint and applied per node.
    pub fn forward_pairs(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    ) -> Result<Var> {
        let width = tape.value(x).cols();
        self.check_input(2 * width)?;
        let (w0, b0) = (self.weights[0], self.biases[0]);
        let w = tape.param(params, w0);
        let top = tape.slice_rows(w, 0, width)?;
        let bottom = tape.slice_rows(w, width, 2 * width)?;
        let from_src = tape.matmul(x, top)?;
        let from_dst = tape.matmul(x, bottom)?;
        let bv = tape.param(params, b0);
        let layers = self.weights.len();
        if layers == 1 {
            let a = tape.gather_rows(from_src, src)?;
            let b = tape.gather_rows(from_dst, dst)?;
            let h = tape.add(a, b)?;
            let h = tape.add_bias(h, bv)?;
            return Ok(self.finish(tape, h));
        }
        if layers == 2 && self.output_width() == 1 {
            let w1 = tape.param(params, self.weights[1]);
            let b1 = tape.param(params, self.biases[1]);
            let h = tape.pair_score(from_src, from_dst, bv, w1, b1, src, dst)?;
            return Ok(self.finish(tape, h));
        }
        let mut h = tape.pair_leaky(from_src, from_dst, bv, src, dst)?;
        for (i, (w, b)) in self.layer_params().enumerate().skip(1) {
            let wv = tape.param(params, w);
            let bv = tape.param(params, b);
            h = tape.matmul(h, wv)?;
            h = tape.add_bias(h, bv)?;
            if i + 1 < layers {
                h = tape.leaky_relu(h);
            }
        }
        Ok(self.finish(tape, h))
    }

    fn finish(&self, tape: &mut Tape, h: Var) -> Var {
        match self.output {
            Activation::None => h,
            Activation::Softmax => tape.softmax(h),
            Activation::Sigmoid => tape.sigmoid(h),
        }
    }
}

/// Plain evaluation of `m` on `x`.
pub fn mlp_forward(m: &Mlp, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
    m.check_input(x.cols())?;
    let mut h: Option<Matrix> = None;
    let layers = m.weights.len();
    for (i, (w, b)) in m.layer_params().enumerate() {
        let (wv, bv) = (params.value(w), params.value(b));
        let input = h.as_ref().unwrap_or(x);
        let mut out = Matrix::zeros(input.rows(), wv.cols());
        gemm(false, input, false, wv, &mut out, 0.0);
        let bias = bv.data();
        let hidden = i + 1 < layers;
        for row in out.data_mut().chunks_exact_mut(bias.len()) {
            for (o, c) in row.iter_mut().zip(bias) {
                *o += c;
                if hidden && *o <= 0.0 {
                    *o *= LEAKY_SLOPE;
                }
            }
        }
        h = Some(out);
    }
    let mut out = h.expect("at least one layer");
    match m.output {
        Activation::None => {}
        Activation::Softmax => out
            .data_mut()
            .chunks_exact_mut(m.output_width())
            .for_each(softmax_in_place),
        Activation::Sigmoid => out.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x)),
    }
    Ok(out)
}
