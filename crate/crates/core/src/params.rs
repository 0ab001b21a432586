//! Named trainable parameters and their per-sample bindings onto a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{DiffArray, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every parameter of a network together with a gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<DiffArray<F>>,
    grads: Vec<Vec<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: DiffArray<F>) -> ParamId {
        self.grads.push(vec![F::zero(); value.len()]);
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, DiffArray::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, DiffArray::filled(shape, F::one()))
    }

    /// Normal(0, std) initialisation.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| F::lit(dist.sample(rng))).collect();
        self.add(name, DiffArray::new(shape, data).expect("sized"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(DiffArray::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &DiffArray<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffArray<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Leaves for every parameter, trainable when the tape records gradients.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bindings {
        Bindings(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Leaves for every parameter that never receive a gradient.
    pub fn bind_constant(&self, tape: &mut Tape<F>) -> Bindings {
        Bindings(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Adds `scale` times the tape gradients of the bound leaves into the
    /// accumulator. Leaves without a gradient contribute nothing.
    pub fn accumulate(&mut self, tape: &Tape<F>, bindings: &Bindings, scale: F) {
        for (acc, &var) in self.grads.iter_mut().zip(&bindings.0) {
            if let Some(g) = tape.grad(var) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
        }
    }

    /// Copies values from `other` parameter by parameter, converting precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| {
                    DiffArray::new(
                        v.shape().to_vec(),
                        v.data().iter().map(|x| G::lit(x.as_f64())).collect(),
                    )
                    .expect("same shape")
                })
                .collect(),
            grads: self
                .grads
                .iter()
                .map(|g| vec![G::zero(); g.len()])
                .collect(),
        }
    }

    /// Replaces the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<F>) -> Result<()> {
        let current = &self.values[id.0];
        if current.len() != data.len() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: current.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        self.values[id.0] = DiffArray::new(current.shape().to_vec(), data)?;
        Ok(())
    }

    /// Flat (parameter, element) addressing used by gradient checks.
    pub fn scalar(&self, id: ParamId, index: usize) -> F {
        self.values[id.0].data()[index]
    }

    pub fn set_scalar(&mut self, id: ParamId, index: usize, value: F) {
        self.values[id.0].data_mut()[index] = value;
    }
}

/// Tape leaves of a [`ParamStore`] for one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Bindings over an explicit list of leaves, indexed in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Affine map `x W + b` over rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers a `fan_in -> fan_out` map with Normal(0, 1/sqrt(fan_in)) weights
    /// and a zero bias.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: store.normal(format!("{name}.weight"), vec![fan_in, fan_out], std, rng),
            bias: store.zeros(format!("{name}.bias"), vec![fan_out]),
        }
    }

    /// Same shapes as [`Linear::new`], all zeros.
    pub fn zeroed<F: Real>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.zeros(format!("{name}.weight"), vec![fan_in, fan_out]),
            bias: store.zeros(format!("{name}.bias"), vec![fan_out]),
        }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, b: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.weight))?;
        tape.add(y, b.var(self.bias))
    }

    pub fn in_dim<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn out_dim<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).shape()[1]
    }
}
