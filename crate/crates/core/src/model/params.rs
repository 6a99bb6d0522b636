use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Serialize for ParamStore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let list: Vec<NamedTensor> = self
            .entries
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        list.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamStore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let list = Vec::<NamedTensor>::deserialize(d)?;
        let mut store = ParamStore::default();
        for nt in list {
            let t = Tensor::new(nt.shape, nt.data).map_err(serde::de::Error::custom)?;
            if store.entries.insert(nt.name.clone(), t).is_some() {
                return Err(serde::de::Error::custom(format!("duplicate parameter {}", nt.name)));
            }
        }
        Ok(store)
    }
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Registers every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams<'_> {
        let vars = self.entries.values().map(|t| g.param(t.clone())).collect();
        BoundParams { store: self, vars }
    }

    /// Registers every parameter as an untracked constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams<'_> {
        let vars = self.entries.values().map(|t| g.constant(t.clone())).collect();
        BoundParams { store: self, vars }
    }

    /// All parameters concatenated in store order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.entries.values().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::vector(data)
    }

    /// Views a flat vector (laid out as [`ParamStore::flatten`]) as this
    /// store's parameters, so a scalar loss can be differentiated w.r.t. it.
    pub fn bind_flat(&self, g: &mut Graph, flat: Var) -> Result<BoundParams<'_>> {
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.len());
        for t in self.entries.values() {
            vars.push(g.slice_flat(flat, offset, t.shape())?);
            offset += t.numel();
        }
        Ok(BoundParams { store: self, vars })
    }

    /// Errors listing every name whose presence or shape differs.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => problems.push(format!("{name}: missing")),
                Some(o) if o.shape() != t.shape() => {
                    problems.push(format!("{name}: expected {:?}, found {:?}", t.shape(), o.shape()))
                }
                Some(_) => {}
            }
        }
        for name in other.entries.keys() {
            if !self.entries.contains_key(name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(problems.join("; ")))
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Graph handles for one binding of a [`ParamStore`].
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn get(&self, name: &str) -> Var {
        let idx = self
            .store
            .entries
            .get_index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters backward never reached get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.store
            .entries
            .values()
            .zip(&self.vars)
            .map(|(t, &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
