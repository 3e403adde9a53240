use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Running statistics are stored here too but are not trainable.
    pub trainable: bool,
}

/// Named, ordered collection of every model tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replace a tensor, keeping its shape.
    pub fn assign(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::Shape {
                name: e.name.clone(),
                expected: e.tensor.shape().to_vec(),
                actual: tensor.shape().to_vec(),
            });
        }
        e.tensor = tensor;
        Ok(())
    }

    /// Overwrite every tensor from `(name, tensor)` pairs, which must cover
    /// this store exactly with matching shapes.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Shape {
                    name: e.name.clone(),
                    expected: e.tensor.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            e.tensor = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }
}
