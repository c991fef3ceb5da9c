//! Named parameter storage shared by every model component.
//!
//! Components hold [`ParamId`] handles; a forward pass binds the whole store
//! onto a [`Graph`] once and resolves handles through [`Bindings`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `graph`, as trainable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Gradients for every parameter after `graph.backward`; parameters the
    /// loss does not depend on get zeros.
    pub fn grads(&self, graph: &Graph, bindings: &Bindings) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bindings.vars)
            .map(|(t, &v)| graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Writes one `<name>.mjt` file per parameter into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            fs::write(dir.join(format!("{name}.mjt")), t.to_bytes())?;
        }
        Ok(())
    }

    /// Overwrites every registered parameter from `<name>.mjt` files in `dir`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let path = dir.join(format!("{name}.mjt"));
            let bytes = fs::read(&path).map_err(|e| {
                TensorError::Format(format!("{}: {e}", path.display()))
            })?;
            let loaded = Tensor::read_from(&bytes[..])?;
            if loaded.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_dir",
                    left: t.shape().to_vec(),
                    right: loaded.shape().to_vec(),
                });
            }
            *t = loaded;
        }
        Ok(())
    }

    /// Name-sorted view, used for stable manifests.
    pub fn sorted(&self) -> BTreeMap<&str, &Tensor> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(&self.tensors)
            .collect()
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Handles in parameter order, e.g. leaves created by a caller.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.add("w", Tensor::vector(&[1.0, 2.0]));
        a.add("b", Tensor::scalar(-3.0));
        a.save_dir(dir.path()).unwrap();

        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[2]));
        b.add("b", Tensor::zeros(&[1]));
        b.load_dir(dir.path()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_shape_change() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.add("w", Tensor::vector(&[1.0, 2.0]));
        a.save_dir(dir.path()).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3]));
        assert!(b.load_dir(dir.path()).is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(0.0));
        s.add("w", Tensor::scalar(0.0));
    }
}
