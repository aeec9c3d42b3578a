//! Named trainable parameters, kept outside any one computation graph.
//!
//! A [`ParamStore`] owns the master copies. Each training step binds every
//! parameter into a fresh [`Graph`] (via [`ParamStore::bind`]), runs forward
//! and backward there, then reads the gradients back out through the binding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Shape};
use crate::scalar::Scalar;

/// Stable handle to one parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

pub struct Param<S> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

/// Ordered collection of uniquely named parameters. Registration order is
/// part of the store's identity: ids, flattened layouts, and optimizer slots
/// all index by it.
pub struct ParamStore<S> {
    entries: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn register(&mut self, name: &str, rows: usize, cols: usize, data: Vec<S>) -> ParamId {
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name: {name}"
        );
        assert_eq!(rows * cols, data.len(), "{name}: data length != {rows}x{cols}");
        self.entries.push(Param { name: name.to_string(), rows, cols, data });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init on `(-b, b)` with `b = sqrt(6 / (rows + cols))`, drawn
    /// from the caller's stream so layouts are reproducible from a seed.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| S::of(rng.gen::<f64>() * 2.0 * bound - bound))
            .collect();
        self.register(name, rows, cols, data)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, rows, cols, vec![S::one(); rows * cols])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        Shape::of(self.entries[id.0].rows, self.entries[id.0].cols)
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Bind every parameter into `g` as a gradient-accumulating leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|p| g.param(Shape::of(p.rows, p.cols), p.data.clone()))
            .collect();
        Bound { ids }
    }

    /// Gradients for every parameter after a backward pass, in registration
    /// order. Parameters the loss never touched get explicit zeros.
    pub fn collect_grads(&self, g: &Graph<S>, bound: &Bound) -> Vec<Vec<S>> {
        self.entries
            .iter()
            .zip(&bound.ids)
            .map(|(p, &id)| match g.grad(id) {
                Some(grad) => grad.to_vec(),
                None => vec![S::zero(); p.rows * p.cols],
            })
            .collect()
    }

    /// All entries of all parameters as one 64-bit vector, in registration
    /// order. Together with [`ParamStore::set_flat`] this is the interface
    /// the finite-difference checker perturbs.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|p| p.data.iter().map(|&v| v.f64()))
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for p in &mut self.entries {
            for v in &mut p.data {
                *v = S::of(flat[at]);
                at += 1;
            }
        }
        assert_eq!(at, flat.len(), "flat vector length mismatch");
    }

    /// Offset of a parameter's first entry in the flattened layout.
    pub fn flat_offset(&self, id: ParamId) -> usize {
        self.entries[..id.0].iter().map(|p| p.rows * p.cols).sum()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Node ids produced by one [`ParamStore::bind`] call, valid only for the
/// graph it was made against.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }
}
