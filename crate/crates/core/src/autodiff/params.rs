use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    /// Freezing granularity, e.g. `"backbone"` or `"task"`.
    pub group: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named, uniquely-identified model parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter identifier '{name}'"
            )));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group: group.into(),
            tensor,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn group_scalars(&self, group: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_identifier_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", "backbone", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.add("w", "task", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn group_freezing() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", "backbone", Tensor::zeros(&[2, 2]), true)
            .unwrap();
        s.add("b", "task", Tensor::zeros(&[3]), true).unwrap();
        assert_eq!(s.trainable_scalars(), 7);
        s.set_group_trainable("backbone", false);
        assert_eq!(s.trainable_scalars(), 3);
        assert_eq!(s.group_scalars("backbone"), 4);
    }
}
