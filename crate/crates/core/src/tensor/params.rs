use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Grads, Result, Tape, Tensor, TensorError, Var};

/// Ordered collection of named trainable tensors.
///
/// Insertion order is preserved so checkpoints and optimizer state are laid
/// out deterministically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(())
    }

    /// Xavier-uniform `[fan_in, fan_out]` weight.
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn([fan_in, fan_out], |_| rng.random_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| TensorError::Contract(e.to_string()))?;
        let t = Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng));
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape` as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
            index: self.index.clone(),
            names: self.names.clone(),
        }
    }

    /// Wraps already-recorded `vars`, one per parameter in store order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> BoundParams<'t> {
        assert_eq!(vars.len(), self.tensors.len(), "one var per parameter");
        BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
            names: self.names.clone(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Adds gradients from a backward pass into each parameter's `grad`.
    pub fn accumulate(&mut self, bound: &BoundParams<'_>, grads: &Grads) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            match grads.get(*v) {
                Some(g) => t.accumulate_grad(g)?,
                None if t.grad.is_none() => t.grad = Some(vec![0.0; t.numel()]),
                None => {}
            }
        }
        Ok(())
    }

    /// Scales all stored gradients, e.g. to average over a batch.
    pub fn scale_grads(&mut self, c: f64) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }
}

/// Parameters recorded on one tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: BTreeMap<String, usize>,
    names: Vec<String>,
}

impl<'t> BoundParams<'t> {
    /// Looks up a bound parameter; panics on an unknown name since parameter
    /// names are fixed at model construction.
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }
}
