//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation eagerly; [`Var`] is a handle into it.
//! Parameters live in a [`ParamStore`] and enter a graph as leaves, either
//! trainable (gradients collected by [`Graph::backward`]) or frozen.
//! Images use NCHW layout.

mod conv;
mod norm;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use conv::ConvSpec;
pub use ops::concat;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match {} values", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn randn<R: Rng>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>();
        Self { shape, data }
    }

    /// Same values under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Named parameters of one model.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new((**v).clone())).collect(),
        }
    }
}

/// Equal names and values; the store identity is ignored.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| **a == **b) && self.values.len() == other.values.len()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed), names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash over names and exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            n.bytes().for_each(&mut eat);
            for x in &v.data {
                x.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter().map(|v| v.as_ref()))
    }

    fn shared(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.values[id.0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Accumulates gradients for node inputs during the reverse sweep.
pub struct GradSink {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    requires: Vec<bool>,
}

impl GradSink {
    fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Runs `f` on the (lazily zeroed) gradient buffer of node `id`.
    fn with(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.requires[id] {
            return;
        }
        let n = self.sizes[id];
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn add(&mut self, id: usize, grad: &[f64]) {
        self.with(id, |g| g.iter_mut().zip(grad).for_each(|(a, b)| *a += b));
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(u64, ParamId, usize)>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A graph that records values only; every node is a constant.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), backward, requires_grad });
        nodes.len() - 1
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var { g: self, id: self.push_node(value, false, None) }
    }

    /// A differentiable leaf that is not tied to any store.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        Var { g: self, id: self.push_node(value, self.grad_enabled, None) }
    }

    /// Parameter leaf; gradients are reported when `trainable`.
    pub fn param(&self, store: &ParamStore, id: ParamId, trainable: bool) -> Var<'_> {
        let requires = trainable && self.grad_enabled;
        let value = store.shared(id);
        let node = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { value, backward: None, requires_grad: requires });
            nodes.len() - 1
        };
        if requires {
            self.params.borrow_mut().push((store.tag, id, node));
        }
        Var { g: self, id: node }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op result. `backward` is built only when an input needs
    /// gradients.
    pub(crate) fn record<F>(&self, value: Tensor, inputs: &[usize], backward: F) -> Var<'_>
    where
        F: FnOnce() -> BackwardFn,
    {
        let requires = self.grad_enabled && inputs.iter().any(|i| self.requires(*i));
        let bw = if requires { Some(backward()) } else { None };
        Var { g: self, id: self.push_node(value, requires, bw) }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.numel(), 1, "backward needs a scalar output");
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
            sizes: nodes.iter().map(|n| n.value.numel()).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        sink.with(output.id, |g| g[0] = 1.0);
        for id in (0..=output.id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else { continue };
            let Some(grad) = sink.grads[id].take() else { continue };
            bw(&grad, &mut sink);
            sink.grads[id] = Some(grad);
        }
        Grads { node_grads: sink.grads, params: self.params.borrow().clone() }
    }
}

/// Result of a reverse sweep.
pub struct Grads {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl Grads {
    pub fn of(&self, v: Var<'_>) -> Option<&[f64]> {
        self.node_grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of `store` that entered the graph as
    /// trainable, summed over repeated uses.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for (tag, pid, node) in &self.params {
            if *tag != store.tag {
                continue;
            }
            if let Some(g) = &self.node_grads[*node] {
                let slot = out[pid.0].get_or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.requires(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g> {
        let v = self.value();
        Var { g: self.g, id: self.g.push_node((*v).clone(), false, None) }
    }

    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.numel(), 1);
        v.data[0]
    }
}
