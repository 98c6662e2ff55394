//! Reverse-mode differentiation over dense real and complex tensors.
//!
//! A [`Graph`] is built once for fixed shapes, then evaluated with
//! [`Graph::forward`] and differentiated with [`Graph::backward`]. Parameters are
//! referenced by name and looked up in a [`ParamStore`] at evaluation time.

mod gradcheck;
pub mod kernels;
mod scalar;
mod tensor;

use std::collections::BTreeMap;


pub use gradcheck::{grad_check, op_suite, GradCheckReport, ParamCheck, SUITE_OPS};
pub use scalar::{DType, Scalar};
pub use tensor::{CTensor, Tensor, Value};

use crate::error::{Error, Result};
use crate::spectral::{half_width, min_resolution, mode_count};
use kernels::{ConvDims, ModeMixDims};

pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// The operation set. Each variant has a forward rule and an adjoint rule.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input(String),
    Param(String),
    Add,
    Scale(f64),
    Hadamard,
    /// Per-pixel linear map `[B,Cin,H,W] × [Cout,Cin] → [B,Cout,H,W]`.
    ChannelMix,
    /// Stride-1 circular cross-correlation with an odd `k×k` kernel `[Cout,Cin,k,k]`.
    Conv2dCircular,
    Rfft2,
    Irfft2,
    /// Complex channel mixing on the retained low modes, weights `[Cout,Cin,modes,2]`.
    ComplexPointwiseMul { modes: usize },
    Silu,
    GroupNorm { groups: usize, eps: f64 },
    MeanReduce,
    /// Adds a `[C]` or `[B,C,1,1]` tensor to every pixel of `[B,C,H,W]`.
    BroadcastAdd,
    /// Per-channel `x·scale[c] + shift[c]`.
    Affine,
    /// 2× area downsampling.
    AvgPool2,
    /// 2× band-limited upsampling.
    SpectralUpsample2,
    ConcatChannels,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input(_) => "input",
            OpKind::Param(_) => "param",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::Hadamard => "hadamard",
            OpKind::ChannelMix => "channel-mix",
            OpKind::Conv2dCircular => "conv2d-circular",
            OpKind::Rfft2 => "rfft2",
            OpKind::Irfft2 => "irfft2",
            OpKind::ComplexPointwiseMul { .. } => "complex-pointwise-mul",
            OpKind::Silu => "silu",
            OpKind::GroupNorm { .. } => "group-norm",
            OpKind::MeanReduce => "mean-reduce",
            OpKind::BroadcastAdd => "broadcast-add",
            OpKind::Affine => "affine",
            OpKind::AvgPool2 => "avg-pool2",
            OpKind::SpectralUpsample2 => "spectral-upsample2",
            OpKind::ConcatChannels => "concat-channels",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    complex: bool,
    label: String,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// One entry per parameter in the store; zeros for parameters the graph never reads.
    pub params: ParamStore<T>,
    pub inputs: BTreeMap<String, Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Option<Value<T>>>,
    scope: String,
    evaluated: bool,
}

fn dims4(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Some((b, c, h, w)),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            outputs: Vec::new(),
            values: Vec::new(),
            scope: String::new(),
            evaluated: false,
        }
    }

    /// Prefix for labels of nodes created afterwards; labels appear in shape errors.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op_kinds(&self) -> impl Iterator<Item = &OpKind> {
        self.nodes.iter().map(|n| &n.op)
    }

    /// Names and shapes of every parameter the graph reads.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                OpKind::Param(name) => Some((name.clone(), n.shape.clone())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>, complex: bool) -> NodeId {
        let label = if self.scope.is_empty() {
            format!("{}#{}", op.name(), self.nodes.len())
        } else {
            format!("{}/{}#{}", self.scope, op.name(), self.nodes.len())
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            complex,
            label,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn next_label(&self, op: &str) -> String {
        if self.scope.is_empty() {
            format!("{op}#{}", self.nodes.len())
        } else {
            format!("{}/{op}#{}", self.scope, self.nodes.len())
        }
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn expect_real(&self, op: &str, id: NodeId) -> Result<()> {
        if self.node(id).complex {
            return Err(Error::shape(self.next_label(op), "expected a real operand"));
        }
        Ok(())
    }

    fn expect_4d(&self, op: &str, id: NodeId) -> Result<(usize, usize, usize, usize)> {
        dims4(&self.node(id).shape).ok_or_else(|| {
            Error::shape(
                self.next_label(op),
                format!("expected a [B,C,H,W] operand, got {:?}", self.node(id).shape),
            )
        })
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(OpKind::Input(name.into()), vec![], shape.to_vec(), false)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(OpKind::Param(name.into()), vec![], shape.to_vec(), false)
    }

    pub fn output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.push((name.into(), id));
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape || na.complex != nb.complex {
            return Err(Error::shape(
                self.next_label(op),
                format!("operand shapes differ: {:?} vs {:?}", na.shape, nb.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let n = self.node(a);
        let (shape, complex) = (n.shape.clone(), n.complex);
        Ok(self.push(OpKind::Add, vec![a, b], shape, complex))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let n = self.node(a);
        let (shape, complex) = (n.shape.clone(), n.complex);
        Ok(self.push(OpKind::Scale(c), vec![a], shape, complex))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("hadamard", a, b)?;
        self.expect_real("hadamard", a)?;
        let shape = self.node(a).shape.clone();
        Ok(self.push(OpKind::Hadamard, vec![a, b], shape, false))
    }

    pub fn channel_mix(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.expect_real("channel-mix", x)?;
        let (b, cin, h, wd) = self.expect_4d("channel-mix", x)?;
        let ws = self.node(w).shape.clone();
        if ws.len() != 2 || ws[1] != cin {
            return Err(Error::shape(
                self.next_label("channel-mix"),
                format!("weight {ws:?} incompatible with {cin} input channels"),
            ));
        }
        Ok(self.push(OpKind::ChannelMix, vec![x, w], vec![b, ws[0], h, wd], false))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.expect_real("conv2d-circular", x)?;
        let (b, cin, h, wd) = self.expect_4d("conv2d-circular", x)?;
        let ws = self.node(w).shape.clone();
        let ok = ws.len() == 4 && ws[1] == cin && ws[2] == ws[3] && ws[2] % 2 == 1 && h == wd;
        if !ok {
            return Err(Error::shape(
                self.next_label("conv2d-circular"),
                format!("kernel {ws:?} incompatible with input {:?} (need odd square kernel, square input)", self.node(x).shape),
            ));
        }
        Ok(self.push(OpKind::Conv2dCircular, vec![x, w], vec![b, ws[0], h, wd], false))
    }

    pub fn rfft2(&mut self, x: NodeId) -> Result<NodeId> {
        self.expect_real("rfft2", x)?;
        let (b, c, h, w) = self.expect_4d("rfft2", x)?;
        if h != w {
            return Err(Error::shape(self.next_label("rfft2"), "input must be square"));
        }
        Ok(self.push(OpKind::Rfft2, vec![x], vec![b, c, h, half_width(h)], true))
    }

    pub fn irfft2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, r, hw) = self.expect_4d("irfft2", x)?;
        if !self.node(x).complex || hw != half_width(r) {
            return Err(Error::shape(
                self.next_label("irfft2"),
                format!("expected a complex half-plane spectrum, got {:?}", self.node(x).shape),
            ));
        }
        Ok(self.push(OpKind::Irfft2, vec![x], vec![b, c, r, r], false))
    }

    /// Retains modes `|m₁| < modes`, `0 ≤ m₂ < modes`; requires `r ≥ 2·modes − 1`.
    pub fn complex_mul(&mut self, x: NodeId, w: NodeId, modes: usize) -> Result<NodeId> {
        let (b, cin, r, hw) = self.expect_4d("complex-pointwise-mul", x)?;
        if !self.node(x).complex || hw != half_width(r) {
            return Err(Error::shape(self.next_label("complex-pointwise-mul"), "expected a complex half-plane spectrum"));
        }
        if modes == 0 {
            return Err(Error::shape(self.next_label("complex-pointwise-mul"), "mode cutoff must be positive"));
        }
        if r < min_resolution(modes) {
            return Err(Error::ResolutionTooLow {
                resolution: r,
                modes,
                required: min_resolution(modes),
            });
        }
        let ws = self.node(w).shape.clone();
        if ws.len() != 4 || ws[1] != cin || ws[2] != mode_count(modes) || ws[3] != 2 {
            return Err(Error::shape(
                self.next_label("complex-pointwise-mul"),
                format!("weight {ws:?} does not match {cin} input channels and {} modes", mode_count(modes)),
            ));
        }
        Ok(self.push(OpKind::ComplexPointwiseMul { modes }, vec![x, w], vec![b, ws[0], r, hw], true))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.expect_real("silu", x)?;
        let shape = self.node(x).shape.clone();
        Ok(self.push(OpKind::Silu, vec![x], shape, false))
    }

    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        self.expect_real("group-norm", x)?;
        let (_, c, _, _) = self.expect_4d("group-norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                self.next_label("group-norm"),
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let shape = self.node(x).shape.clone();
        Ok(self.push(OpKind::GroupNorm { groups, eps }, vec![x], shape, false))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.expect_real("mean-reduce", x)?;
        Ok(self.push(OpKind::MeanReduce, vec![x], vec![1], false))
    }

    pub fn broadcast_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.expect_real("broadcast-add", x)?;
        let (b, c, _, _) = self.expect_4d("broadcast-add", x)?;
        let bs = self.node(bias).shape.clone();
        let ok = bs == [c] || bs == [b, c, 1, 1];
        if !ok {
            return Err(Error::shape(
                self.next_label("broadcast-add"),
                format!("bias {bs:?} must be [{c}] or [{b},{c},1,1]"),
            ));
        }
        let shape = self.node(x).shape.clone();
        Ok(self.push(OpKind::BroadcastAdd, vec![x, bias], shape, false))
    }

    pub fn affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.expect_real("affine", x)?;
        let (_, c, _, _) = self.expect_4d("affine", x)?;
        for id in [scale, shift] {
            if self.node(id).shape != [c] {
                return Err(Error::shape(
                    self.next_label("affine"),
                    format!("per-channel operand {:?} must be [{c}]", self.node(id).shape),
                ));
            }
        }
        let shape = self.node(x).shape.clone();
        Ok(self.push(OpKind::Affine, vec![x, scale, shift], shape, false))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.expect_real("avg-pool2", x)?;
        let (b, c, h, w) = self.expect_4d("avg-pool2", x)?;
        if h != w || h % 2 != 0 {
            return Err(Error::shape(self.next_label("avg-pool2"), format!("resolution {h} is not even")));
        }
        Ok(self.push(OpKind::AvgPool2, vec![x], vec![b, c, h / 2, w / 2], false))
    }

    pub fn spectral_upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        self.expect_real("spectral-upsample2", x)?;
        let (b, c, h, w) = self.expect_4d("spectral-upsample2", x)?;
        if h != w {
            return Err(Error::shape(self.next_label("spectral-upsample2"), "input must be square"));
        }
        Ok(self.push(OpKind::SpectralUpsample2, vec![x], vec![b, c, 2 * h, 2 * w], false))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.expect_real("concat-channels", a)?;
        self.expect_real("concat-channels", b)?;
        let (ba, ca, ha, wa) = self.expect_4d("concat-channels", a)?;
        let (bb, cb, hb, wb) = self.expect_4d("concat-channels", b)?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                self.next_label("concat-channels"),
                format!("cannot concatenate {:?} and {:?}", self.node(a).shape, self.node(b).shape),
            ));
        }
        Ok(self.push(OpKind::ConcatChannels, vec![a, b], vec![ba, ca + cb, ha, wa], false))
    }

    /// Evaluates every node and returns the named outputs.
    pub fn forward(
        &mut self,
        inputs: &BTreeMap<String, Tensor<T>>,
        params: &ParamStore<T>,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        self.evaluated = false;
        let mut values: Vec<Option<Value<T>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                OpKind::Param(name) => {
                    let p = params
                        .get(name)
                        .ok_or_else(|| Error::shape(&node.label, format!("parameter `{name}` is not bound")))?;
                    if p.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            &node.label,
                            format!("parameter `{name}` has shape {:?}, graph expects {:?}", p.shape(), node.shape),
                        ));
                    }
                    None
                }
                OpKind::Input(name) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| Error::shape(&node.label, format!("input `{name}` is not bound")))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            &node.label,
                            format!("input `{name}` has shape {:?}, graph expects {:?}", t.shape(), node.shape),
                        ));
                    }
                    Some(Value::Real(t.clone()))
                }
                _ => Some(eval_node(node, &values, &self.nodes, params)),
            };
            values.push(v);
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.outputs {
            let t = resolve(&values, &self.nodes, params, *id).real().clone();
            out.insert(name.clone(), t);
        }
        self.values = values;
        self.evaluated = true;
        Ok(out)
    }

    /// Propagates seed adjoints on named outputs back to parameters and inputs.
    pub fn backward(
        &mut self,
        seeds: &BTreeMap<String, Tensor<T>>,
        params: &ParamStore<T>,
    ) -> Result<Gradients<T>> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward".into()));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Value<T>>> = vec![None; n];
        for (name, id) in &self.outputs {
            if let Some(seed) = seeds.get(name) {
                if seed.shape() != self.nodes[id.0].shape.as_slice() {
                    return Err(Error::shape(
                        &self.nodes[id.0].label,
                        format!("seed for `{name}` has shape {:?}", seed.shape()),
                    ));
                }
                accumulate(&mut adj[id.0], Value::Real(seed.clone()));
            }
        }
        let mut grads: ParamStore<T> = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        let mut input_grads = BTreeMap::new();
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                OpKind::Param(name) => {
                    if let Some(slot) = grads.get_mut(name) {
                        slot.add_assign(g.real());
                    }
                }
                OpKind::Input(name) => {
                    let g = match g {
                        Value::Real(t) => t,
                        Value::Complex(_) => unreachable!(),
                    };
                    match input_grads.get_mut(name) {
                        None => {
                            input_grads.insert(name.clone(), g);
                        }
                        Some(t) => Tensor::add_assign(t, &g),
                    }
                }
                _ => {
                    let contributions = adjoint_node(node, &g, &self.values, &self.nodes, params);
                    for (id, v) in contributions {
                        accumulate(&mut adj[id.0], v);
                    }
                }
            }
        }
        Ok(Gradients {
            params: grads,
            inputs: input_grads,
        })
    }

    /// Drops cached forward values.
    pub fn clear(&mut self) {
        self.values.clear();
        self.evaluated = false;
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Value<T>>, v: Value<T>) {
    match slot {
        None => *slot = Some(v),
        Some(existing) => existing.accumulate(v),
    }
}

/// Read access to node values, falling back to the parameter store.
struct Env<'a, T> {
    values: &'a [Option<Value<T>>],
    nodes: &'a [Node],
    params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Env<'a, T> {
    fn real(&self, id: NodeId) -> &'a Tensor<T> {
        match &self.values[id.0] {
            Some(Value::Real(t)) => t,
            Some(Value::Complex(_)) => panic!("node {id:?} is complex"),
            None => match &self.nodes[id.0].op {
                OpKind::Param(name) => &self.params[name],
                _ => panic!("node {id:?} has no value"),
            },
        }
    }

    fn complex(&self, id: NodeId) -> &'a CTensor<T> {
        match &self.values[id.0] {
            Some(Value::Complex(t)) => t,
            _ => panic!("node {id:?} is not a complex value"),
        }
    }

    fn shape(&self, id: NodeId) -> &'a [usize] {
        &self.nodes[id.0].shape
    }
}

fn resolve<'a, T: Scalar>(
    values: &'a [Option<Value<T>>],
    nodes: &'a [Node],
    params: &'a ParamStore<T>,
    id: NodeId,
) -> Value<T> {
    let env = Env { values, nodes, params };
    if nodes[id.0].complex {
        Value::Complex(env.complex(id).clone())
    } else {
        Value::Real(env.real(id).clone())
    }
}

fn eval_node<T: Scalar>(node: &Node, values: &[Option<Value<T>>], nodes: &[Node], params: &ParamStore<T>) -> Value<T> {
    let env = Env { values, nodes, params };
    let inp = &node.inputs;
    let shape = &node.shape;
    match &node.op {
        OpKind::Input(_) | OpKind::Param(_) => unreachable!("leaf nodes are bound directly"),
        OpKind::Add => {
            if node.complex {
                let mut out = env.complex(inp[0]).clone();
                out.add_assign(env.complex(inp[1]));
                Value::Complex(out)
            } else {
                let mut out = env.real(inp[0]).clone();
                out.add_assign(env.real(inp[1]));
                Value::Real(out)
            }
        }
        OpKind::Scale(c) => {
            let c = T::of(*c);
            if node.complex {
                let x = env.complex(inp[0]);
                Value::Complex(CTensor::from_vec(shape, x.data().iter().map(|v| *v * c).collect()))
            } else {
                Value::Real(env.real(inp[0]).map(|v| v * c))
            }
        }
        OpKind::Hadamard => {
            let (a, b) = (env.real(inp[0]), env.real(inp[1]));
            Value::Real(Tensor::from_vec(shape, a.data().iter().zip(b.data()).map(|(&p, &q)| p * q).collect()))
        }
        OpKind::ChannelMix | OpKind::Conv2dCircular => {
            let x = env.real(inp[0]);
            let w = env.real(inp[1]);
            let d = conv_dims(env.shape(inp[0]), env.shape(inp[1]));
            let mut out = Tensor::zeros(shape);
            kernels::conv_forward(d, x.data(), w.data(), out.data_mut());
            Value::Real(out)
        }
        OpKind::Rfft2 => {
            let x = env.real(inp[0]);
            let (b, c, r, _) = dims4(x.shape()).unwrap();
            let mut out = CTensor::zeros(shape);
            kernels::rfft2_forward(x.data(), b * c, r, out.data_mut());
            Value::Complex(out)
        }
        OpKind::Irfft2 => {
            let x = env.complex(inp[0]);
            let (b, c, r, _) = dims4(x.shape()).unwrap();
            let mut out = Tensor::zeros(shape);
            kernels::irfft2_forward(x.data(), b * c, r, out.data_mut());
            Value::Real(out)
        }
        OpKind::ComplexPointwiseMul { modes } => {
            let x = env.complex(inp[0]);
            let w = env.real(inp[1]);
            let d = mode_dims(env.shape(inp[0]), env.shape(inp[1]), *modes);
            let mut out = CTensor::zeros(shape);
            kernels::mode_mix_forward(d, x.data(), w.data(), out.data_mut());
            Value::Complex(out)
        }
        OpKind::Silu => {
            let x = env.real(inp[0]);
            let mut out = Tensor::zeros(shape);
            kernels::silu_forward(x.data(), out.data_mut());
            Value::Real(out)
        }
        OpKind::GroupNorm { groups, eps } => {
            let x = env.real(inp[0]);
            let (b, c, h, w) = dims4(shape).unwrap();
            let mut out = Tensor::zeros(shape);
            kernels::group_norm_forward(x.data(), b, c, h * w, *groups, *eps, out.data_mut());
            Value::Real(out)
        }
        OpKind::MeanReduce => {
            let x = env.real(inp[0]);
            let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
            Value::Real(Tensor::scalar(T::of(s / x.len() as f64)))
        }
        OpKind::BroadcastAdd => {
            let x = env.real(inp[0]);
            let bias = env.real(inp[1]);
            let (b, c, h, w) = dims4(shape).unwrap();
            let hw = h * w;
            let per_sample = bias.len() == b * c && bias.shape().len() == 4;
            let mut out = x.clone();
            for bi in 0..b {
                for ci in 0..c {
                    let v = if per_sample { bias.data()[bi * c + ci] } else { bias.data()[ci] };
                    for o in &mut out.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                        *o = *o + v;
                    }
                }
            }
            Value::Real(out)
        }
        OpKind::Affine => {
            let x = env.real(inp[0]);
            let (scale, shift) = (env.real(inp[1]), env.real(inp[2]));
            let (b, c, h, w) = dims4(shape).unwrap();
            let hw = h * w;
            let mut out = x.clone();
            for bi in 0..b {
                for ci in 0..c {
                    let (s, t) = (scale.data()[ci], shift.data()[ci]);
                    for o in &mut out.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                        *o = *o * s + t;
                    }
                }
            }
            Value::Real(out)
        }
        OpKind::AvgPool2 => {
            let x = env.real(inp[0]);
            let (b, c, r, _) = dims4(x.shape()).unwrap();
            let mut out = Tensor::zeros(shape);
            kernels::avg_pool2_forward(x.data(), b * c, r, out.data_mut());
            Value::Real(out)
        }
        OpKind::SpectralUpsample2 => {
            let x = env.real(inp[0]);
            let (b, c, r, _) = dims4(x.shape()).unwrap();
            let mut out = Tensor::zeros(shape);
            kernels::spectral_upsample_forward(x.data(), b * c, r, out.data_mut());
            Value::Real(out)
        }
        OpKind::ConcatChannels => {
            let (a, bt) = (env.real(inp[0]), env.real(inp[1]));
            let (b, ca, h, w) = dims4(a.shape()).unwrap();
            let cb = bt.shape()[1];
            let hw = h * w;
            let mut out = Vec::with_capacity(b * (ca + cb) * hw);
            for bi in 0..b {
                out.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
                out.extend_from_slice(&bt.data()[bi * cb * hw..(bi + 1) * cb * hw]);
            }
            Value::Real(Tensor::from_vec(shape, out))
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> ConvDims {
    let (batch, cin, r, _) = dims4(x).unwrap();
    let k = if w.len() == 4 { w[2] } else { 1 };
    ConvDims {
        batch,
        cin,
        cout: w[0],
        r,
        k,
    }
}

fn mode_dims(x: &[usize], w: &[usize], modes: usize) -> ModeMixDims {
    let (batch, cin, r, _) = dims4(x).unwrap();
    ModeMixDims {
        batch,
        cin,
        cout: w[0],
        r,
        modes,
    }
}

/// Adjoint contributions `(input, cotangent)` of one node given its output cotangent.
fn adjoint_node<T: Scalar>(
    node: &Node,
    g: &Value<T>,
    values: &[Option<Value<T>>],
    nodes: &[Node],
    params: &ParamStore<T>,
) -> Vec<(NodeId, Value<T>)> {
    let env = Env { values, nodes, params };
    let inp = &node.inputs;
    match &node.op {
        OpKind::Input(_) | OpKind::Param(_) => unreachable!(),
        OpKind::Add => vec![(inp[0], g.clone()), (inp[1], g.clone())],
        OpKind::Scale(c) => {
            let c = T::of(*c);
            let v = match g {
                Value::Real(t) => Value::Real(t.map(|v| v * c)),
                Value::Complex(t) => Value::Complex(CTensor::from_vec(t.shape(), t.data().iter().map(|v| *v * c).collect())),
            };
            vec![(inp[0], v)]
        }
        OpKind::Hadamard => {
            let g = g.real();
            let (a, b) = (env.real(inp[0]), env.real(inp[1]));
            let ga = Tensor::from_vec(g.shape(), g.data().iter().zip(b.data()).map(|(&p, &q)| p * q).collect());
            let gb = Tensor::from_vec(g.shape(), g.data().iter().zip(a.data()).map(|(&p, &q)| p * q).collect());
            vec![(inp[0], Value::Real(ga)), (inp[1], Value::Real(gb))]
        }
        OpKind::ChannelMix | OpKind::Conv2dCircular => {
            let x = env.real(inp[0]);
            let w = env.real(inp[1]);
            let d = conv_dims(x.shape(), w.shape());
            let mut gw = Tensor::zeros(w.shape());
            let mut gx = Tensor::zeros(x.shape());
            kernels::conv_backward(d, x.data(), w.data(), g.real().data(), gw.data_mut(), Some(gx.data_mut()));
            vec![(inp[0], Value::Real(gx)), (inp[1], Value::Real(gw))]
        }
        OpKind::Rfft2 => {
            let (b, c, r, _) = dims4(env.shape(inp[0])).unwrap();
            let mut gx = Tensor::zeros(env.shape(inp[0]));
            kernels::rfft2_backward(g.complex().data(), b * c, r, gx.data_mut());
            vec![(inp[0], Value::Real(gx))]
        }
        OpKind::Irfft2 => {
            let (b, c, r, _) = dims4(env.shape(inp[0])).unwrap();
            let mut gx = CTensor::zeros(env.shape(inp[0]));
            kernels::irfft2_backward(g.real().data(), b * c, r, gx.data_mut());
            vec![(inp[0], Value::Complex(gx))]
        }
        OpKind::ComplexPointwiseMul { modes } => {
            let x = env.complex(inp[0]);
            let w = env.real(inp[1]);
            let d = mode_dims(x.shape(), w.shape(), *modes);
            let mut gw = Tensor::zeros(w.shape());
            let mut gx = CTensor::zeros(x.shape());
            kernels::mode_mix_backward(d, x.data(), w.data(), g.complex().data(), gw.data_mut(), Some(gx.data_mut()));
            vec![(inp[0], Value::Complex(gx)), (inp[1], Value::Real(gw))]
        }
        OpKind::Silu => {
            let x = env.real(inp[0]);
            let mut gx = Tensor::zeros(x.shape());
            kernels::silu_backward(x.data(), g.real().data(), gx.data_mut());
            vec![(inp[0], Value::Real(gx))]
        }
        OpKind::GroupNorm { groups, eps } => {
            let x = env.real(inp[0]);
            let (b, c, h, w) = dims4(x.shape()).unwrap();
            let mut gx = Tensor::zeros(x.shape());
            kernels::group_norm_backward(x.data(), g.real().data(), b, c, h * w, *groups, *eps, gx.data_mut());
            vec![(inp[0], Value::Real(gx))]
        }
        OpKind::MeanReduce => {
            let shape = env.shape(inp[0]);
            let n: usize = shape.iter().product();
            let v = g.real().data()[0] / T::of(n as f64);
            vec![(inp[0], Value::Real(Tensor::full(shape, v)))]
        }
        OpKind::BroadcastAdd => {
            let g = g.real();
            let (b, c, h, w) = dims4(g.shape()).unwrap();
            let hw = h * w;
            let bshape = env.shape(inp[1]);
            let per_sample = bshape.len() == 4;
            let mut gb = Tensor::zeros(bshape);
            for bi in 0..b {
                for ci in 0..c {
                    let s = g.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                        .iter()
                        .fold(T::zero(), |a, &v| a + v);
                    let slot = if per_sample { bi * c + ci } else { ci };
                    gb.data_mut()[slot] = gb.data()[slot] + s;
                }
            }
            vec![(inp[0], Value::Real(g.clone())), (inp[1], Value::Real(gb))]
        }
        OpKind::Affine => {
            let g = g.real();
            let x = env.real(inp[0]);
            let scale = env.real(inp[1]);
            let (b, c, h, w) = dims4(g.shape()).unwrap();
            let hw = h * w;
            let mut gx = Tensor::zeros(x.shape());
            let mut gs = Tensor::zeros(&[c]);
            let mut gt = Tensor::zeros(&[c]);
            for bi in 0..b {
                for ci in 0..c {
                    let range = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                    let s = scale.data()[ci];
                    let mut acc_s = T::zero();
                    let mut acc_t = T::zero();
                    for ((o, &gv), &xv) in gx.data_mut()[range.clone()].iter_mut().zip(&g.data()[range.clone()]).zip(&x.data()[range]) {
                        *o = gv * s;
                        acc_s = acc_s + gv * xv;
                        acc_t = acc_t + gv;
                    }
                    gs.data_mut()[ci] = gs.data()[ci] + acc_s;
                    gt.data_mut()[ci] = gt.data()[ci] + acc_t;
                }
            }
            vec![(inp[0], Value::Real(gx)), (inp[1], Value::Real(gs)), (inp[2], Value::Real(gt))]
        }
        OpKind::AvgPool2 => {
            let (b, c, r, _) = dims4(env.shape(inp[0])).unwrap();
            let mut gx = Tensor::zeros(env.shape(inp[0]));
            kernels::avg_pool2_backward(g.real().data(), b * c, r, gx.data_mut());
            vec![(inp[0], Value::Real(gx))]
        }
        OpKind::SpectralUpsample2 => {
            let (b, c, r, _) = dims4(env.shape(inp[0])).unwrap();
            let mut gx = Tensor::zeros(env.shape(inp[0]));
            kernels::spectral_upsample_backward(g.real().data(), b * c, r, gx.data_mut());
            vec![(inp[0], Value::Real(gx))]
        }
        OpKind::ConcatChannels => {
            let g = g.real();
            let (b, _, h, w) = dims4(g.shape()).unwrap();
            let hw = h * w;
            let sa = env.shape(inp[0]);
            let sb = env.shape(inp[1]);
            let (ca, cb) = (sa[1], sb[1]);
            let mut ga = Vec::with_capacity(b * ca * hw);
            let mut gb = Vec::with_capacity(b * cb * hw);
            for bi in 0..b {
                let base = bi * (ca + cb) * hw;
                ga.extend_from_slice(&g.data()[base..base + ca * hw]);
                gb.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
            }
            vec![
                (inp[0], Value::Real(Tensor::from_vec(sa, ga))),
                (inp[1], Value::Real(Tensor::from_vec(sb, gb))),
            ]
        }
    }
}
