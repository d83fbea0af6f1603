//! Named parameter storage and small layer helpers shared by every model part.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
///
/// Insertion order is preserved so checkpoints and optimizer state iterate
/// deterministically.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Like [`ParamSet::get`] but failing with a contract error.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(prefix));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Records every parameter on `tape`; those accepted by `trainable`
    /// become differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bindings {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut trained = Vec::new();
        for (name, t) in &self.entries {
            let v = if trainable(name) {
                let v = tape.param(t);
                trained.push((name.clone(), v));
                v
            } else {
                let mut frozen = t.clone();
                frozen.set_requires_grad(false);
                tape.leaf(&frozen)
            };
            vars.insert(name.clone(), v);
        }
        Bindings {
            vars,
            trainable: trained,
        }
    }

    /// Stores the gradients of trainable bindings on their tensors. Trainable
    /// parameters that the loss never reached get a zero gradient.
    pub fn store_grads(&mut self, bindings: &Bindings, grads: &mut Gradients<T>) -> Result<()> {
        for (name, v) in &bindings.trainable {
            let t = self
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            let g = grads.take(*v).unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.clear_grad());
    }
}

/// Tape handles for the parameters of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var)> {
        self.trainable.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// He-style initialization for a `[fan_in, fan_out]` weight.
pub fn he<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(&[fan_in, fan_out], (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Glorot-style initialization for a `[fan_in, fan_out]` weight.
pub fn glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(
        &[fan_in, fan_out],
        (2.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
        rng,
    )
}

/// Registers `{prefix}.weight` (`[fan_in, fan_out]`) and `{prefix}.bias`.
pub fn init_linear<T: Scalar>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    relu_follows: bool,
    rng: &mut impl Rng,
) {
    let w = if relu_follows {
        he(fan_in, fan_out, rng)
    } else {
        glorot(fan_in, fan_out, rng)
    };
    ps.insert(format!("{prefix}.weight"), w);
    ps.insert(format!("{prefix}.bias"), Tensor::zeros([fan_out]));
}

/// `x · W + b` over the last axis of `x`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}.weight"))?;
    let bias = b.var(&format!("{prefix}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, bias)
}

/// Checks that `{name}` exists with the expected shape.
pub fn expect_shape<T: Scalar>(ps: &ParamSet<T>, name: &str, shape: &[usize]) -> Result<()> {
    let t = ps.require(name)?;
    if t.shape() != shape {
        return Err(Error::dim(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Runs `f` on a fresh tape with every parameter frozen and returns the
/// tensor it produces. Convenient for inference and tests.
pub fn evaluate<T: Scalar>(
    ps: &ParamSet<T>,
    f: impl FnOnce(&mut Tape<T>, &Bindings) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = ps.bind(&mut tape, |_| false);
    let out = f(&mut tape, &b)?;
    Ok(tape.to_tensor(out))
}
