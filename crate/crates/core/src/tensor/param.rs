use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub(crate) usize);

/// A learnable tensor with its gradient and AdamW moments.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `None` until a backward pass reaches the parameter.
    pub grad: Option<Tensor<T>>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step: u64,
}

impl<T: Element> Parameter<T> {
    /// Gradient, or zeros when no backward pass reached this parameter.
    pub fn grad_or_zero(&self) -> Tensor<T> {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: None,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            step: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, &b)| *a = *a + b),
            None => {
                p.grad = Some(
                    Tensor::new(p.value.shape(), grad.to_vec())
                        .expect("gradient shaped like its parameter"),
                )
            }
        }
    }
}

/// Per-channel normalization statistics (not learnable).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Default)]
pub struct StatsStore<T> {
    stats: Vec<RunningStats<T>>,
    by_name: HashMap<String, StatsId>,
}

impl<T: Element> StatsStore<T> {
    pub fn new() -> Self {
        StatsStore {
            stats: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> Result<StatsId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate statistics name {name}")));
        }
        let id = StatsId(self.stats.len());
        self.stats.push(RunningStats {
            name: name.clone(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0]
    }

    pub fn get_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0]
    }

    pub fn id(&self, name: &str) -> Option<StatsId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (StatsId, &RunningStats<T>)> {
        self.stats.iter().enumerate().map(|(i, s)| (StatsId(i), s))
    }
}

/// Learnable parameters plus normalization buffers of one model.
#[derive(Debug, Clone, Default)]
pub struct Weights<T> {
    pub params: ParamStore<T>,
    pub stats: StatsStore<T>,
}

impl<T: Element> Weights<T> {
    pub fn new() -> Self {
        Weights {
            params: ParamStore::new(),
            stats: StatsStore::new(),
        }
    }
}
