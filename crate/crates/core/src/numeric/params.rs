use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::serialize::{read_tensors, write_tensors};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Ntm,
    Sig,
}

/// Named parameter tensors of the whole model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn from `N(0, std²)`.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, group, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, group, Tensor::new(shape, vec![value; n]).expect("shape matches"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Named views suitable for [`write_tensors`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_tensors(BufWriter::new(f), &self.named())
    }

    /// Overwrites values of a store with the same layout from `path`.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let loaded = read_tensors(BufReader::new(f))?;
        self.assign(loaded)
    }

    /// Copies values by name; every parameter must be present with its shape.
    pub fn assign(&mut self, named: impl IntoIterator<Item = (String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in named {
            let Some(id) = self.id(&name) else { continue };
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::shape("load parameter", dst.shape(), t.shape()));
            }
            dst.data_mut().copy_from_slice(t.data());
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("parameter {} missing from file", self.names[missing])));
        }
        Ok(())
    }
}

/// A graph bound to a parameter store.
///
/// Parameters enter the graph lazily and at most once, borrowing their
/// values. A frozen session treats every parameter as a constant.
pub struct Session<'s> {
    graph: Graph<'s>,
    store: &'s ParamStore,
    bound: Vec<Option<NodeId>>,
    trainable: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let n = self.graph.leaf_ref(self.store.get(id), self.trainable);
        self.bound[id.0] = Some(n);
        n
    }

    /// Gradients of every bound parameter reached by backward passes so far.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let g = self.graph.grad((*n)?)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

impl<'s> Deref for Session<'s> {
    type Target = Graph<'s>;

    fn deref(&self) -> &Self::Target {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Self::Target {
        &mut self.graph
    }
}
