//! Parameter storage and gradient containers.

use std::fmt;

use crate::error::{AmssError, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Index of a layer inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId(pub usize);

/// Which partition a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Owner {
    Modality(usize),
    Shared,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Modality(k) => write!(f, "modality {k}"),
            Owner::Shared => f.write_str("shared"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub layer: LayerId,
    pub owner: Owner,
}

/// Ordered parameter list. Every mutable access bumps `version`, which lets
/// forward caches detect that they went stale.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    version: u64,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        layer: LayerId,
        owner: Owner,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(AmssError::InvalidInput(format!(
                "duplicate parameter id `{name}`"
            )));
        }
        self.entries.push(ParamEntry {
            name,
            tensor,
            layer,
            owner,
        });
        self.version += 1;
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.version += 1;
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn owner(&self, id: ParamId) -> Owner {
        self.entries[id.0].owner
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Replaces every tensor with the matching one from `other`, requiring
    /// identical ids and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(AmssError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(AmssError::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        self.version += 1;
        Ok(())
    }
}

/// Gradients keyed by [`ParamId`], one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    grads: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape()))
                .collect(),
        }
    }

    pub fn from_tensors(params: &ParamStore, grads: Vec<Tensor>) -> Result<Self> {
        let set = Self { grads };
        set.check_matches(params)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    /// Keys and shapes must match the store exactly.
    pub fn check_matches(&self, params: &ParamStore) -> Result<()> {
        if self.grads.len() != params.len() {
            return Err(AmssError::InvalidInput(format!(
                "gradient set has {} entries, parameter store has {}",
                self.grads.len(),
                params.len()
            )));
        }
        for (id, g) in self.iter() {
            let p = params.get(id);
            if g.shape() != p.shape() {
                return Err(AmssError::Shape {
                    layer: params.name(id).to_string(),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
