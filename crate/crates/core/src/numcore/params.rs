use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Gradients, NumError, Scalar, Tensor};

/// A named tensor that an optimizer may update when `trainable` is set.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Accumulated gradient; `None` until the first accumulation after zeroing.
    pub grad: Option<Tensor<T>>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<usize, NumError> {
        if self.index.contains_key(name) {
            return Err(NumError::DuplicateName(name.to_string()));
        }
        let id = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable,
            grad: None,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, id: usize, trainable: bool) {
        self.params[id].trainable = trainable;
    }

    pub fn numel(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }

    pub fn trainable_numel(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    /// Adds a gradient set (indices refer to this set) into the grad buffers.
    /// Gradients for non-trainable parameters are rejected.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<(), NumError> {
        for (id, g) in grads.params() {
            let p = self
                .params
                .get_mut(*id)
                .ok_or(NumError::Index { op: "accumulate", index: *id, bound: 0 })?;
            if !p.trainable {
                return Err(NumError::FrozenGradient(p.name.clone()));
            }
            if g.shape() != p.value.shape() {
                return Err(NumError::Shape {
                    op: "accumulate",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            match &mut p.grad {
                Some(buf) => {
                    for (b, v) in buf.data_mut().iter_mut().zip(g.data()) {
                        *b += *v;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// SHA-256 over names, shapes and raw value bytes of the selected parameters.
    pub fn checksum_where(&self, keep: impl Fn(&Parameter<T>) -> bool) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update(p.name.as_bytes());
            for s in p.value.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            buf.clear();
            for v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }
}
