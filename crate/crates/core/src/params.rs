//! Named parameter storage and the per-pass forward context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces values by name; every stored parameter must be supplied with
    /// a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(contract_err!(
                "expected {} parameters, got {}",
                self.len(),
                entries.len()
            ));
        }
        for (name, t) in entries {
            let id = self
                .find(name)
                .ok_or_else(|| contract_err!("unknown parameter {name}"))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(contract_err!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[id.0].shape()
                ));
            }
            self.values[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn linear(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Affine map `x W + b` over the last axis of a 2-D input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), init::linear(rng, fan_in, &[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), init::linear(rng, fan_in, &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        ctx.tape.add_row(y, ctx.p(self.b))
    }
}

/// State for one forward pass: the tape, the tape handles of every
/// parameter, and the dropout RNG.
pub struct Ctx {
    pub tape: Tape,
    vars: Vec<Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    /// `track` registers parameters as differentiable leaves.
    pub fn new(store: &ParamStore, track: bool, train: bool, seed: u64) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .values
            .iter()
            .map(|t| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self { tape, vars, train, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mul_const(x, mask)
    }

    /// Gradients aligned with the store's parameter order.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect()
    }
}
