//! Named parameter storage and the handful of layers the policy needs.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, named parameter tensors. Shared immutably between graphs.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a parameter and returns its slot index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::usage(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &*self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn to_tensors(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    /// Replaces all values, keeping names and shapes.
    pub fn set_all(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::dim(format!(
                    "parameter {} shape {:?}, got {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    v.shape()
                )));
            }
        }
        self.values = values.into_iter().map(Arc::new).collect();
        Ok(())
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| g.leaf_shared(Arc::clone(v), requires_grad))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}

/// `U(−1/√fan_in, 1/√fan_in)` initialization.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -b, b, rng)
}

/// `x[B×in] · w[in×out] + b[out]`
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

pub fn conv2d_bias<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_channel_bias(y, b)
}

/// Sinusoidal embedding of an integer timestep: `[sin(k·f_i)…, cos(k·f_i)…]`
/// with `f_i = 10000^(−i/(dim/2))`.
pub fn timestep_embedding<T: Scalar>(k: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| T::lit((k as f64 * f).sin())));
    out.extend(freqs.iter().map(|f| T::lit((k as f64 * f).cos())));
    out.resize(dim, T::zero());
    out
}
