use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces every value with the same-named tensor from `other`,
    /// rejecting missing names and shape mismatches.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = other.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &self.params {
            match by_name.get(p.name.as_str()) {
                None => return Err(Error::Checkpoint { name: p.name.clone(), reason: "missing".into() }),
                Some(t) if t.shape() != p.value.shape() => {
                    return Err(Error::Checkpoint {
                        name: p.name.clone(),
                        reason: format!("shape {:?} does not match model shape {:?}", t.shape(), p.value.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        for p in &mut self.params {
            p.value = by_name[p.name.as_str()].clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.get(s.id("w").unwrap()).grad.shape(), &[2]);
    }

    #[test]
    fn load_rejects_shape_mismatch_by_name() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        let err = s.load_from(&[("w".into(), Tensor::zeros(&[3]))]).unwrap_err();
        assert!(err.to_string().contains("w"));
        s.load_from(&[("w".into(), Tensor::full(&[2], 1.0))]).unwrap();
        assert_eq!(s.value(ParamId(0)).data(), &[1.0, 1.0]);
    }
}
