use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Matrix,
    grad: Matrix,
}

/// Flat registry of named trainable arrays, each with a gradient buffer of
/// the same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers a `fan_in x fan_out` weight drawn from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, Matrix::from_vec(fan_in, fan_out, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, alpha: f64) {
        for p in &mut self.params {
            p.grad.scale(alpha);
        }
    }

    /// Snapshot of all gradients, in registration order.
    pub fn grads(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    /// `grad += alpha * other` for every parameter.
    pub fn add_grads(&mut self, other: &[Matrix], alpha: f64) {
        for (p, g) in self.params.iter_mut().zip(other) {
            p.grad.add_scaled(g, alpha);
        }
    }

    pub fn set_all(&mut self, value: f64) {
        for p in &mut self.params {
            p.value.fill(value);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.all_finite())
    }
}

/// Uniform fan-in scaled initialization of a parameter layout, deterministic
/// per seed. `layout` lists `(name, fan_in, fan_out)`; biases (`fan_in == 1`
/// by convention of the caller) are also drawn, callers zero them if wanted.
pub fn init_params(layout: &[(&str, usize, usize)], seed: u64) -> Result<ParamSet> {
    let mut rng = rng::stream(seed, "init", 0);
    let mut ps = ParamSet::new();
    for &(name, fan_in, fan_out) in layout {
        ps.register_uniform(name, fan_in, fan_out, &mut rng)?;
    }
    Ok(ps)
}
