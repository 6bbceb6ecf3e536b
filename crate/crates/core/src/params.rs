//! Named parameter storage with stable iteration order, plus the
//! AdamW optimizer. Insertion order is preserved so checkpoints and
//! optimizer sweeps are bit-reproducible.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::Invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(move |n| (n.as_str(), &self.values[self.index[n]]))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Total elements of parameters whose name matches `pred`.
    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.insert(n, v.cast());
        }
        out
    }

    /// Register every parameter as a trainable graph leaf.
    pub fn bind_trainable(&self, g: &mut Graph<T>) -> Binding {
        let mut map = HashMap::new();
        for (n, v) in self.iter() {
            map.insert(n.to_string(), g.param(v.clone()));
        }
        Binding { map }
    }

    /// Register every parameter as a frozen graph leaf (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Binding {
        let mut map = HashMap::new();
        for (n, v) in self.iter() {
            map.insert(n.to_string(), g.input(v.clone()));
        }
        Binding { map }
    }
}

/// Name -> graph leaf mapping for one built graph.
pub struct Binding {
    map: HashMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by
/// parameter name in store order, giving a fixed update sequence.
pub struct AdamW<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from gradients fetched via `grad_of`. Sweeps
    /// parameters in store order.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grad_of: impl Fn(&str) -> Option<Tensor<T>>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let Some(grad) = grad_of(&name) else { continue };
            let theta = params.get_mut(&name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            let one = T::one();
            for i in 0..theta.len() {
                let gi = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (one - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (one - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = theta.data()[i];
                theta.data_mut()[i] =
                    p - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
            }
        }
    }
}
