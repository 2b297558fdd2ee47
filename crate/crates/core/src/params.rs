//! Named parameter collections and their binding onto a graph.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Ordered, named set of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Records every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, (name, t)) in self.entries.iter().enumerate() {
            let v = if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            };
            vars.push(v);
            index.insert(name.clone(), i);
        }
        Bound { vars, index }
    }

    /// Reads the gradient of every bound tensor; `None` where the graph
    /// produced no adjoint.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Option<Vec<T>>> {
        bound
            .vars
            .iter()
            .map(|&v| g.grad(v).map(<[T]>::to_vec))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Other(format!("unknown parameter {name:?}")))
    }

    /// Points `name` at another graph value, e.g. a probe input.
    pub fn replace(&mut self, name: &str, v: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Other(format!("unknown parameter {name:?}")))?;
        self.vars[i] = v;
        Ok(())
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

/// Convolution with a per-output-channel bias.
pub fn conv_bias<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Var,
    pad: usize,
) -> Result<Var> {
    let y = g.conv2d(x, weight, 1, pad)?;
    let shape = g.shape(y).to_vec();
    let b = g.expand(bias, &shape, &[0, 2, 3])?;
    g.add(y, b)
}
