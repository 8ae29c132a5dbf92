//! Named parameter tensors with persistent gradient accumulators.
//!
//! Parameters live outside any [`Graph`]: each step binds them into a fresh
//! graph as leaves, and after `backward` the leaf gradients are folded back
//! in with [`ParamStore::collect_grads`]. The transformer and the compression
//! network are kept in separate stores so that they can be stepped by
//! separate optimizers.

use crate::autograd::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Transformer,
    Compression,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Transformer => "transformer",
            Stream::Compression => "compression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub stream: Stream,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    stream: Stream,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(stream: Stream) -> Self {
        ParamStore {
            stream,
            params: Vec::new(),
        }
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Binds every parameter into `g` as a gradient-requiring leaf; the
    /// returned handles are indexed like the store.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(index, p)| {
                g.param(
                    ParamKey {
                        stream: self.stream,
                        index,
                    },
                    p.value.clone(),
                )
            })
            .collect()
    }

    /// Binds every parameter as a constant (no gradient flows to them).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// Adds this stream's leaf gradients from `g` into the accumulators.
    pub fn collect_grads(&mut self, g: &Graph<T>) {
        for (key, grad) in g.param_grads() {
            if key.stream == self.stream {
                self.params[key.index].grad.add_assign(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.scale_assign(s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.squared_norm()).sum::<f64>().sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            stream: self.stream,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}
