//! Reverse-mode differentiation over real tensors.
//!
//! Network code is written once against the [`Graph`] trait. [`Eager`]
//! evaluates immediately and keeps nothing, which is what inference and
//! finite-difference probes want. [`Tape`] records every node so that
//! [`Tape::backward`] can replay the trace in reverse. Complex parameters
//! are just pairs of real tensors here.

mod ops;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

pub use ops::{reflect_index, Axis, Op, BINOMIAL5};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub trait Graph<T: Real> {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;
    fn param(&mut self, id: ParamId) -> Self::Var;
    fn input(&mut self, t: Tensor<T>) -> Self::Var;
    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, stride: usize, pad: usize) -> Result<Self::Var> {
        self.apply(Op::Conv2d { stride, pad }, &[x, w])
    }
    fn conv_transpose2d(&mut self, x: &Self::Var, w: &Self::Var, stride: usize, pad: usize) -> Result<Self::Var> {
        self.apply(Op::ConvTranspose2d { stride, pad }, &[x, w])
    }
    fn add_bias(&mut self, x: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::AddBias, &[x, b])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sub, &[a, b])
    }
    fn scale(&mut self, x: &Self::Var, k: f64) -> Result<Self::Var> {
        self.apply(Op::Scale(k), &[x])
    }
    fn leaky_relu(&mut self, x: &Self::Var, alpha: f64) -> Result<Self::Var> {
        self.apply(Op::LeakyRelu(alpha), &[x])
    }
    fn tanh(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Tanh, &[x])
    }
    fn magnitude(&mut self, re: &Self::Var, im: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Magnitude, &[re, im])
    }
    fn concat(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Concat, &[a, b])
    }
    fn slice_channels(&mut self, x: &Self::Var, start: usize, end: usize) -> Result<Self::Var> {
        self.apply(Op::SliceChannels { start, end }, &[x])
    }
    fn avg_pool2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::AvgPool2, &[x])
    }
    fn upsample_nearest2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::UpsampleNearest2, &[x])
    }
    fn charbonnier(&mut self, a: &Self::Var, b: &Self::Var, eps: f64) -> Result<Self::Var> {
        self.apply(Op::Charbonnier(eps), &[a, b])
    }
    fn mean_abs_diff(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::MeanAbsDiff, &[a, b])
    }
    fn mse(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mse, &[a, b])
    }
    fn sum(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum, &[x])
    }
}

/// Immediate evaluation without a trace.
pub struct Eager<'p, T> {
    params: &'p ParamStore<T>,
    kinks: Option<KinkTrace<'p>>,
}

struct KinkTrace<'p> {
    hash: DefaultHasher,
    record: Option<Vec<Vec<bool>>>,
    replay: Option<(&'p [Vec<bool>], usize)>,
}

impl<'p, T: Real> Eager<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Eager { params, kinks: None }
    }

    fn traced(params: &'p ParamStore<T>, record: bool, replay: Option<&'p [Vec<bool>]>) -> Self {
        Eager {
            params,
            kinks: Some(KinkTrace {
                hash: DefaultHasher::new(),
                record: record.then(Vec::new),
                replay: replay.map(|r| (r, 0)),
            }),
        }
    }

    /// Also fingerprints which side of every non-smooth point each
    /// activation and absolute difference landed on.
    pub fn with_kink_signature(params: &'p ParamStore<T>) -> Self {
        Self::traced(params, false, None)
    }

    /// Fingerprints and keeps the side pattern, one entry per kinked op in
    /// evaluation order; see [`Eager::take_kink_sides`].
    pub fn recording_kink_sides(params: &'p ParamStore<T>) -> Self {
        Self::traced(params, true, None)
    }

    /// Evaluates every kinked op on the sides given, as recorded by a
    /// previous pass over the same graph. The signature still reflects the
    /// sides the inputs actually fall on.
    pub fn on_kink_sides(params: &'p ParamStore<T>, sides: &'p [Vec<bool>]) -> Self {
        Self::traced(params, false, Some(sides))
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|k| k.hash.finish())
    }

    pub fn take_kink_sides(&mut self) -> Vec<Vec<bool>> {
        self.kinks.as_mut().and_then(|k| k.record.take()).unwrap_or_default()
    }
}

impl<T: Real> Graph<T> for Eager<'_, T> {
    type Var = Arc<Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T> {
        v
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        self.params.shared(id)
    }

    fn input(&mut self, t: Tensor<T>) -> Self::Var {
        Arc::new(t)
    }

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| v.as_ref()).collect();
        let Some(k) = self.kinks.as_mut() else {
            return ops::forward(op, &vals).map(Arc::new);
        };
        let Some(sig) = op.kink_argument(&vals) else {
            return ops::forward(op, &vals).map(Arc::new);
        };
        sig.hash(&mut k.hash);
        if let Some((sides, cursor)) = k.replay.as_mut() {
            let Some(pattern) = sides.get(*cursor) else {
                return Err(Error::shape(
                    op.name(),
                    format!("no recorded kink sides for op #{cursor}"),
                ));
            };
            *cursor += 1;
            return ops::forward_on_sides(op, &vals, pattern).map(Arc::new);
        }
        if let Some(rec) = k.record.as_mut() {
            rec.push(sig);
        }
        ops::forward(op, &vals).map(Arc::new)
    }
}

/// Handle of a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Origin {
    Input,
    Param(ParamId),
    Op(Op, Vec<usize>),
}

struct Node<T> {
    origin: Origin,
    value: Arc<Tensor<T>>,
}

/// Recording graph for reverse-mode differentiation.
///
/// The trace is a flat list in evaluation order, so replaying it backwards
/// visits every node after all of its consumers. Re-running the same trace
/// on the same inputs reproduces gradients bit for bit.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<usize>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, origin: Origin, value: Arc<Tensor<T>>) -> NodeId {
        self.nodes.push(Node { origin, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every parameter that
    /// took part in its computation.
    pub fn backward(self, root: NodeId) -> Result<Gradients<T>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", root_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape(), T::one()));
        let mut out = Gradients::new(self.params.len());
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.origin {
                Origin::Input => {}
                Origin::Param(pid) => out.accumulate(*pid, dy),
                Origin::Op(op, inputs) => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.nodes[i].value.as_ref()).collect();
                    let local = ops::backward(*op, &vals, &node.value, &dy)?;
                    for (&i, g) in inputs.iter().zip(local) {
                        if matches!(self.nodes[i].origin, Origin::Input) {
                            continue;
                        }
                        match &mut grads[i] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<T: Real> Graph<T> for Tape<'_, T> {
    type Var = NodeId;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        if let Some(n) = self.param_nodes[id.0] {
            return NodeId(n);
        }
        let node = self.push(Origin::Param(id), self.params.shared(id));
        self.param_nodes[id.0] = Some(node.0);
        node
    }

    fn input(&mut self, t: Tensor<T>) -> Self::Var {
        self.push(Origin::Input, Arc::new(t))
    }

    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
        let value = ops::forward(op, &vals)?;
        Ok(self.push(Origin::Op(op, inputs.iter().map(|v| v.0).collect()), Arc::new(value)))
    }
}
