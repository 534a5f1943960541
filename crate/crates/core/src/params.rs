//! Ordered named parameter storage shared by the encoder and the generator.

use diffcore::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bundle::Bundle;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

/// Graph handles for every parameter of a set, in set order.
pub struct Binding(Vec<Var>);

impl Binding {
    /// Binds caller-placed variables, one per parameter in set order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in scaled uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn push_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn push_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn push_const(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.push(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Places every parameter on `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        Binding(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.leaf(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients for a trainable binding after `g.backward`.
    pub fn grads(&self, g: &Graph<T>, binding: &Binding) -> Vec<Tensor<T>> {
        binding
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Stores each tensor as `{prefix}{name}`.
    pub fn write_to(&self, bundle: &mut Bundle, prefix: &str) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            bundle.insert_tensor(&format!("{prefix}{n}"), t.cast())?;
        }
        Ok(())
    }

    /// Overwrites every tensor from `{prefix}{name}` records; shapes must agree.
    pub fn read_from(&mut self, bundle: &Bundle, prefix: &str) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = bundle.tensor(&format!("{prefix}{n}"))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "`{prefix}{n}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.cast();
        }
        Ok(())
    }
}
