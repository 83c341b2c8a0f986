//! Named parameter storage shared by every network module.
//!
//! Entries live in a `BTreeMap` so iteration order (and therefore optimizer
//! update order and checkpoint layout) is deterministic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::tensor::{shape_err, KernelError, Tensor};

/// One named parameter tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Name -> tensor map for all networks (`cvae.*`, `scf.*`, `ioc.*`, ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), KernelError> {
        self.insert_with(name, value, true)
    }

    pub fn insert_with(
        &mut self,
        name: &str,
        value: Tensor,
        trainable: bool,
    ) -> Result<(), KernelError> {
        if self.entries.contains_key(name) {
            return Err(KernelError::Contract {
                op: "params",
                detail: format!("duplicate parameter name {name:?}"),
            });
        }
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param, KernelError> {
        self.entries.get(name).ok_or_else(|| KernelError::Contract {
            op: "params",
            detail: format!("unknown parameter {name:?}"),
        })
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, KernelError> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), KernelError> {
        let entry = self.entries.get_mut(name).ok_or_else(|| KernelError::Contract {
            op: "params",
            detail: format!("unknown parameter {name:?}"),
        })?;
        if !entry.value.same_shape(&value) {
            return Err(shape_err(
                "params",
                format!(
                    "{name:?}: stored shape {:?} vs new {:?}",
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value;
        Ok(())
    }

    /// Adds `grad` into the entry's gradient slot (shape-checked).
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<(), KernelError> {
        let entry = self.entries.get_mut(name).ok_or_else(|| KernelError::Contract {
            op: "params",
            detail: format!("unknown parameter {name:?}"),
        })?;
        if !entry.value.same_shape(grad) {
            return Err(shape_err(
                "params",
                format!(
                    "gradient shape {:?} vs parameter {name:?} shape {:?}",
                    grad.shape(),
                    entry.value.shape()
                ),
            ));
        }
        match &mut entry.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => entry.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Clears all gradient slots.
    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Gradient of `name`, or a zero tensor when the parameter was not on
    /// any path to the loss.
    pub fn grad_or_zero(&self, name: &str) -> Result<Tensor, KernelError> {
        let p = self.get(name)?;
        Ok(match &p.grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(p.value.shape().to_vec()),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Read-only snapshot with gradients dropped.
    pub fn snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            out.entries.insert(
                name.clone(),
                Param {
                    value: p.value.clone(),
                    grad: None,
                    trainable: p.trainable,
                },
            );
        }
        out
    }
}

/// Registers parameters with the standard initialization: weight matrices
/// and kernels uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
/// bias-like tensors zero. Draw order follows registration order, so a
/// fixed architecture + seed yields identical parameters.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamInit { store, rng }
    }

    /// Weight with explicit fan-in/fan-out.
    pub fn weight(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<(), KernelError> {
        let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.rng.gen_range(-a..=a));
        }
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    /// `[rows, cols]` weight matrix; fan-in = cols, fan-out = rows.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), KernelError> {
        self.weight(name, alloc::vec![rows, cols], cols, rows)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<(), KernelError> {
        self.store.insert(name, Tensor::zeros(shape))
    }
}
