//! Static computation graph with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built once for fixed shapes, then evaluated many times
//! against different bindings. Node ids are topologically ordered by
//! construction, forward values are cached for every node, and gradients
//! are propagated in reverse id order with fixed accumulation order, so both
//! passes are bit-deterministic.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry;
use crate::kernels::{self, Shape5};
use crate::tensor::{Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{context}: {source}")]
    Shape {
        context: String,
        source: TensorError,
    },
    #[error("input `{name}` is not bound")]
    UnboundInput { name: String },
    #[error("binding `{name}` has shape {actual:?}, graph declares {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("name `{name}` is already used in this graph")]
    DuplicateName { name: String },
    #[error("non-finite value in node {node} ({op}) at flat index {index}")]
    NonFinite {
        node: NodeId,
        op: &'static str,
        index: usize,
    },
    #[error("loss node {node} must be scalar, has shape {shape:?}")]
    LossNotScalar { node: NodeId, shape: Vec<usize> },
    #[error("affine scale must be positive (node {node})")]
    NonPositiveScale { node: NodeId },
    #[error("no output named `{name}`")]
    UnknownOutput { name: String },
    #[error("labels for node {node} must lie in 0..{classes}")]
    BadLabel { node: NodeId, classes: usize },
}

fn shape_err(context: &str, left: &[usize], right: &[usize]) -> GraphError {
    GraphError::Shape {
        context: context.to_string(),
        source: TensorError::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context: context.to_string(),
        },
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input { name: String },
    Param { name: String },
    Constant { value: Arc<Tensor> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Upsample2(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    GroupNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    },
    GlobalAvgPool(NodeId),
    Warp { source: NodeId, dvf: NodeId },
    AffineMatrix { params: NodeId },
    AffineToDvf { matrix: NodeId, grid: [usize; 3] },
    ForwardDiff { input: NodeId, axis: usize },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Arc<Vec<i32>>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant { .. } => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Neg(..) => "negate",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample2(..) => "upsample2",
            Op::Linear { .. } => "linear",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::GroupNorm { .. } => "group_norm",
            Op::GlobalAvgPool(..) => "global_average_pool",
            Op::Warp { .. } => "trilinear_warp",
            Op::AffineMatrix { .. } => "affine_matrix",
            Op::AffineToDvf { .. } => "affine_to_dvf",
            Op::ForwardDiff { .. } => "forward_diff",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Values bound to the free names (inputs and parameters) of a graph.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    map: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeSet<String>,
    outputs: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id].op.kind()
    }

    /// Names of all `Param` nodes in insertion order.
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { name } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn claim_name(&mut self, name: &str) -> Result<(), GraphError> {
        if !self.names.insert(name.to_string()) {
            return Err(GraphError::DuplicateName {
                name: name.to_string(),
            });
        }
        Ok(())
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        self.claim_name(name)?;
        Ok(self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape,
        ))
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        self.claim_name(name)?;
        Ok(self.push(
            Op::Param {
                name: name.to_string(),
            },
            shape,
        ))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(
            Op::Constant {
                value: Arc::new(value),
            },
            shape,
        )
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn binary_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>, GraphError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(shape_err(what, sa, sb))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.binary_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.binary_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.binary_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.binary_shape(a, b, "div")?;
        Ok(self.push(Op::Div(a, b), s))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Square(a), s)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Sqrt(a), s)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Neg(a), s)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, k), s)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::LeakyRelu(a, slope), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Tanh(a), s)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(shape_err("concat of zero parts", &[], &[]));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat axis out of range", &first, &[axis]));
        }
        let mut total = first[axis];
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(shape_err("concat rank", &first, s));
            }
            for (d, (&a, &b)) in first.iter().zip(s).enumerate() {
                if d != axis && a != b {
                    return Err(shape_err("concat extents", &first, s));
                }
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(shape_err("conv3d rank", &xs, &ws));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(shape_err("conv3d weight layout", &xs, &ws));
        }
        let k = ws[2];
        for &e in &xs[2..] {
            if e + 2 * pad < k {
                return Err(shape_err("conv3d kernel larger than padded input", &xs, &ws));
            }
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(shape_err("conv3d bias", bs, &[ws[0]]));
            }
        }
        let shape = vec![
            xs[0],
            ws[0],
            kernels::conv_out_extent(xs[2], k, stride, pad),
            kernels::conv_out_extent(xs[3], k, stride, pad),
            kernels::conv_out_extent(xs[4], k, stride, pad),
        ];
        Ok(self.push(
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            shape,
        ))
    }

    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return Err(shape_err("upsample2 rank", &xs, &[]));
        }
        let shape = vec![xs[0], xs[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]];
        Ok(self.push(Op::Upsample2(input), shape))
    }

    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, GraphError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err("linear", &xs, &ws));
        }
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            vec![xs[0], ws[0]],
        ))
    }

    pub fn group_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 || groups == 0 || xs[1] % groups != 0 {
            return Err(shape_err("group_norm channels/groups", &xs, &[groups]));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err("group_norm affine shape", self.shape(gamma), &[xs[1]]));
        }
        Ok(self.push(
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            },
            xs,
        ))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 {
            return Err(shape_err("global_average_pool rank", &xs, &[]));
        }
        Ok(self.push(Op::GlobalAvgPool(input), vec![xs[0], xs[1]]))
    }

    pub fn warp(&mut self, source: NodeId, dvf: NodeId) -> Result<NodeId, GraphError> {
        let ss = self.shape(source).to_vec();
        let ds = self.shape(dvf).to_vec();
        if ss.len() != 5 || ds.len() != 5 || ds[1] != 3 || ss[0] != ds[0] || ss[2..] != ds[2..] {
            return Err(shape_err("trilinear_warp", &ss, &ds));
        }
        Ok(self.push(Op::Warp { source, dvf }, ss))
    }

    pub fn affine_matrix(&mut self, params: NodeId) -> Result<NodeId, GraphError> {
        let ps = self.shape(params);
        if ps.iter().product::<usize>() != 15 {
            return Err(shape_err("affine_matrix needs 15 parameters", ps, &[15]));
        }
        Ok(self.push(Op::AffineMatrix { params }, vec![4, 4]))
    }

    pub fn affine_to_dvf(&mut self, matrix: NodeId, grid: [usize; 3]) -> Result<NodeId, GraphError> {
        let ms = self.shape(matrix);
        if ms != [4, 4] {
            return Err(shape_err("affine_to_dvf matrix", ms, &[4, 4]));
        }
        if grid.iter().any(|&e| e < 2) {
            return Err(shape_err("affine_to_dvf grid", &grid, &[2, 2, 2]));
        }
        Ok(self.push(
            Op::AffineToDvf { matrix, grid },
            vec![1, 3, grid[0], grid[1], grid[2]],
        ))
    }

    pub fn forward_diff(&mut self, input: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 5 || axis > 2 {
            return Err(shape_err("forward_diff", &xs, &[axis]));
        }
        Ok(self.push(Op::ForwardDiff { input, axis }, xs))
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Arc<Vec<i32>>,
    ) -> Result<NodeId, GraphError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 5 {
            return Err(shape_err("softmax_cross_entropy rank", &ls, &[]));
        }
        let voxels = ls[0] * ls[2] * ls[3] * ls[4];
        if labels.len() != voxels {
            return Err(shape_err("softmax_cross_entropy labels", &[labels.len()], &[voxels]));
        }
        let id = self.nodes.len();
        if labels.iter().any(|&l| l < 0 || l as usize >= ls[1]) {
            return Err(GraphError::BadLabel {
                node: id,
                classes: ls[1],
            });
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels }, vec![1]))
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId, GraphError> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| GraphError::UnknownOutput {
                name: name.to_string(),
            })
    }

    /// Forward pass: computes and caches a value for every node.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Executed<'_>, GraphError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = self.forward_node(id, node, &values, bindings)?;
            if let Some(index) = value.first_non_finite() {
                return Err(GraphError::NonFinite {
                    node: id,
                    op: node.op.kind(),
                    index,
                });
            }
            if value.shape() != node.shape {
                return Err(shape_err(
                    &format!("internal: node {id} ({})", node.op.kind()),
                    value.shape(),
                    &node.shape,
                ));
            }
            values.push(value);
        }
        Ok(Executed {
            graph: self,
            values,
        })
    }

    fn forward_node(
        &self,
        id: NodeId,
        node: &Node,
        values: &[Tensor],
        bindings: &Bindings,
    ) -> Result<Tensor, GraphError> {
        let v = |i: NodeId| &values[i];
        Ok(match &node.op {
            Op::Input { name } | Op::Param { name } => {
                let t = bindings.get(name).ok_or_else(|| GraphError::UnboundInput {
                    name: name.clone(),
                })?;
                if t.shape() != node.shape {
                    return Err(GraphError::BindingShape {
                        name: name.clone(),
                        expected: node.shape.clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                t.clone()
            }
            Op::Constant { value } => (**value).clone(),
            Op::Add(a, b) => ew_binary(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => ew_binary(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => ew_binary(v(*a), v(*b), |x, y| x * y),
            Op::Div(a, b) => ew_binary(v(*a), v(*b), |x, y| x / y),
            Op::Square(a) => v(*a).map(|x| x * x),
            Op::Sqrt(a) => v(*a).map(f64::sqrt),
            Op::Neg(a) => v(*a).map(|x| -x),
            Op::Scale(a, k) => v(*a).map(|x| k * x),
            Op::Sum(a) => Tensor::scalar(seq_sum(v(*a).data())),
            Op::Mean(a) => {
                let t = v(*a);
                Tensor::scalar(seq_sum(t.data()) / t.numel() as f64)
            }
            Op::Concat { parts, axis } => concat_forward(self, parts, *axis, values),
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = v(*input);
                let w = v(*weight);
                let xs = to5(x.shape());
                let ws = to5(w.shape());
                let b = bias.map(|b| v(b).data());
                let (out, os) = kernels::conv3d_forward(x.data(), &xs, w.data(), &ws, b, *stride, *pad);
                Tensor::new(os.to_vec(), out).expect("conv3d shape")
            }
            Op::Upsample2(a) => {
                let x = v(*a);
                let xs = to5(x.shape());
                let (out, os) = kernels::upsample2_forward(x.data(), &xs);
                Tensor::new(os.to_vec(), out).expect("upsample2 shape")
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = v(*input);
                let w = v(*weight);
                let b = v(*bias);
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[0];
                let out = kernels::linear_forward(x.data(), n, fin, w.data(), fout, b.data());
                Tensor::new(vec![n, fout], out).expect("linear shape")
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                v(*a).map(|x| if x > 0.0 { x } else { s * x })
            }
            Op::Sigmoid(a) => v(*a).map(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Tanh(a) => v(*a).map(f64::tanh),
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let x = v(*input);
                let xs = to5(x.shape());
                let out = kernels::groupnorm_forward(
                    x.data(),
                    &xs,
                    v(*gamma).data(),
                    v(*beta).data(),
                    *groups,
                    *eps,
                );
                Tensor::new(x.shape().to_vec(), out).expect("group_norm shape")
            }
            Op::GlobalAvgPool(a) => {
                let x = v(*a);
                let xs = to5(x.shape());
                let (out, os) = kernels::gap_forward(x.data(), &xs);
                Tensor::new(os, out).expect("gap shape")
            }
            Op::Warp { source, dvf } => {
                let s = v(*source);
                let ss = to5(s.shape());
                let out = kernels::warp_forward(s.data(), &ss, v(*dvf).data());
                Tensor::new(s.shape().to_vec(), out).expect("warp shape")
            }
            Op::AffineMatrix { params } => {
                let p = v(*params).data();
                if p[6] <= 0.0 || p[7] <= 0.0 || p[8] <= 0.0 {
                    return Err(GraphError::NonPositiveScale { node: id });
                }
                let m = geometry::affine_matrix_forward(p);
                let mut data = Vec::with_capacity(16);
                for row in &m {
                    data.extend_from_slice(row);
                }
                Tensor::new(vec![4, 4], data).expect("matrix shape")
            }
            Op::AffineToDvf { matrix, grid } => {
                let m = v(*matrix).data();
                affine_to_dvf_forward(m, *grid)
            }
            Op::ForwardDiff { input, axis } => {
                let x = v(*input);
                let xs = to5(x.shape());
                let out = kernels::forward_diff(x.data(), &xs, *axis);
                Tensor::new(x.shape().to_vec(), out).expect("diff shape")
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let l = v(*logits);
                let ls = to5(l.shape());
                Tensor::scalar(kernels::softmax_ce_forward(l.data(), &ls, labels))
            }
        })
    }
}

fn seq_sum(data: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in data {
        acc += v;
    }
    acc
}

fn to5(shape: &[usize]) -> Shape5 {
    debug_assert_eq!(shape.len(), 5);
    [shape[0], shape[1], shape[2], shape[3], shape[4]]
}

fn ew_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data).expect("ew shape")
    } else if a.is_scalar() {
        let av = a.item();
        b.map(|y| f(av, y))
    } else {
        let bv = b.item();
        a.map(|x| f(x, bv))
    }
}

fn concat_forward(g: &Graph, parts: &[NodeId], axis: usize, values: &[Tensor]) -> Tensor {
    let out_shape = {
        let mut s = g.shape(parts[0]).to_vec();
        s[axis] = parts.iter().map(|&p| g.shape(p)[axis]).sum();
        s
    };
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_axis = out_shape[axis];
    let mut data = vec![0.0; outer * total_axis * inner];
    let mut offset = 0;
    for &p in parts {
        let ps = g.shape(p);
        let pa = ps[axis];
        let src = values[p].data();
        for o in 0..outer {
            let dst_base = (o * total_axis + offset) * inner;
            let src_base = o * pa * inner;
            data[dst_base..dst_base + pa * inner]
                .copy_from_slice(&src[src_base..src_base + pa * inner]);
        }
        offset += pa;
    }
    Tensor::new(out_shape, data).expect("concat shape")
}

fn affine_to_dvf_forward(m: &[f64], grid: [usize; 3]) -> Tensor {
    let [z, y, x] = grid;
    let s = z * y * x;
    let cx = (x - 1) as f64 / 2.0;
    let cy = (y - 1) as f64 / 2.0;
    let cz = (z - 1) as f64 / 2.0;
    let mut data = vec![0.0; 3 * s];
    for zi in 0..z {
        for yi in 0..y {
            for xi in 0..x {
                let q = [xi as f64 - cx, yi as f64 - cy, zi as f64 - cz];
                let idx = (zi * y + yi) * x + xi;
                for row in 0..3 {
                    let ph = m[row * 4] * q[0] + m[row * 4 + 1] * q[1] + m[row * 4 + 2] * q[2]
                        + m[row * 4 + 3];
                    let orig = q[row];
                    data[row * s + idx] = ph - orig;
                }
            }
        }
    }
    Tensor::new(vec![1, 3, z, y, x], data).expect("affine dvf shape")
}

/// Cached forward values for one evaluation of a graph.
#[derive(Debug)]
pub struct Executed<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
}

/// Per-node gradients produced by backpropagation.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter in the graph; parameters the loss does
    /// not reach get zero tensors.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (id, node) in graph.nodes.iter().enumerate() {
            if let Op::Param { name } = &node.op {
                let g = match &self.by_node[id] {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(&node.shape),
                };
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

impl<'g> Executed<'g> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn output(&self, name: &str) -> Result<&Tensor, GraphError> {
        Ok(self.value(self.graph.output_id(name)?))
    }

    /// All named outputs.
    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.graph
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), self.values[*id].clone()))
            .collect()
    }

    /// Reverse-mode pass from a scalar loss node. Seeds the loss gradient
    /// with `seed` (1.0 for plain backpropagation).
    pub fn backpropagate_seeded(
        &self,
        loss: NodeId,
        seed: f64,
    ) -> Result<Gradients, GraphError> {
        let n = self.graph.nodes.len();
        if self.values[loss].numel() != 1 {
            return Err(GraphError::LossNotScalar {
                node: loss,
                shape: self.values[loss].shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss] = Some(Tensor::new(
            self.values[loss].shape().to_vec(),
            vec![seed],
        )
        .expect("seed"));
        for id in (0..=loss).rev() {
            let Some(up) = grads[id].clone() else {
                continue;
            };
            self.backward_node(id, &up, &mut grads)?;
        }
        Ok(Gradients { by_node: grads })
    }

    pub fn backpropagate(&self, loss: NodeId) -> Result<Gradients, GraphError> {
        self.backpropagate_seeded(loss, 1.0)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        contribution: Tensor,
    ) -> Result<(), GraphError> {
        // Constants are detached: no gradient is kept for them.
        if matches!(self.graph.nodes[target].op, Op::Constant { .. }) {
            return Ok(());
        }
        match &mut grads[target] {
            Some(existing) => existing.add_in_place(&contribution).map_err(|e| GraphError::Shape {
                context: format!("gradient accumulation into node {target}"),
                source: e,
            }),
            slot @ None => {
                *slot = Some(contribution);
                Ok(())
            }
        }
    }

    /// Reduces an elementwise gradient to the operand's shape when the
    /// operand was a broadcast scalar.
    fn reduce_for(&self, operand: NodeId, grad: Tensor) -> Tensor {
        let want = self.graph.shape(operand);
        if grad.shape() == want {
            grad
        } else {
            debug_assert_eq!(want.iter().product::<usize>(), 1);
            Tensor::new(want.to_vec(), vec![seq_sum(grad.data())]).expect("reduce")
        }
    }

    fn backward_node(
        &self,
        id: NodeId,
        up: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) -> Result<(), GraphError> {
        let v = |i: NodeId| &self.values[i];
        match &self.graph.nodes[id].op {
            Op::Input { .. } | Op::Param { .. } | Op::Constant { .. } => {}
            Op::Add(a, b) => {
                let ga = self.reduce_for(*a, up.clone());
                let gb = self.reduce_for(*b, up.clone());
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_for(*a, up.clone());
                let gb = self.reduce_for(*b, up.map(|x| -x));
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Mul(a, b) => {
                let ga = self.reduce_for(*a, ew_binary(up, v(*b), |u, y| u * y));
                let gb = self.reduce_for(*b, ew_binary(up, v(*a), |u, x| u * x));
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Div(a, b) => {
                let ga = self.reduce_for(*a, ew_binary(up, v(*b), |u, y| u / y));
                let gb = {
                    let quotient = v(id); // a / b
                    let tmp = ew_binary(quotient, v(*b), |q, y| -q / y);
                    self.reduce_for(*b, ew_binary(up, &tmp, |u, t| u * t))
                };
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Square(a) => {
                let g = ew_binary(up, v(*a), |u, x| u * 2.0 * x);
                self.accumulate(grads, *a, g)?;
            }
            Op::Sqrt(a) => {
                let g = ew_binary(up, v(id), |u, s| u * 0.5 / s);
                self.accumulate(grads, *a, g)?;
            }
            Op::Neg(a) => {
                self.accumulate(grads, *a, up.map(|x| -x))?;
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, up.map(|x| k * x))?;
            }
            Op::Sum(a) => {
                let g = Tensor::full(self.graph.shape(*a), up.item());
                self.accumulate(grads, *a, g)?;
            }
            Op::Mean(a) => {
                let n: usize = self.graph.shape(*a).iter().product();
                let g = Tensor::full(self.graph.shape(*a), up.item() / n as f64);
                self.accumulate(grads, *a, g)?;
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.graph.shape(id);
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.graph.shape(p).to_vec();
                    let pa = ps[*axis];
                    let mut g = vec![0.0; ps.iter().product()];
                    for o in 0..outer {
                        let src_base = (o * total_axis + offset) * inner;
                        let dst_base = o * pa * inner;
                        g[dst_base..dst_base + pa * inner]
                            .copy_from_slice(&up.data()[src_base..src_base + pa * inner]);
                    }
                    offset += pa;
                    self.accumulate(grads, p, Tensor::new(ps, g).expect("concat grad"))?;
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let xs = to5(self.graph.shape(*input));
                let ws = to5(self.graph.shape(*weight));
                let os = to5(self.graph.shape(id));
                let needs_dx = !matches!(self.graph.nodes[*input].op, Op::Constant { .. });
                let needs_dw = !matches!(self.graph.nodes[*weight].op, Op::Constant { .. });
                if needs_dx {
                    let dx = kernels::conv3d_grad_input(
                        up.data(),
                        &os,
                        v(*weight).data(),
                        &ws,
                        &xs,
                        *stride,
                        *pad,
                    );
                    self.accumulate(
                        grads,
                        *input,
                        Tensor::new(xs.to_vec(), dx).expect("conv dx"),
                    )?;
                }
                if needs_dw {
                    let dw = kernels::conv3d_grad_weight(
                        up.data(),
                        &os,
                        v(*input).data(),
                        &xs,
                        &ws,
                        *stride,
                        *pad,
                    );
                    self.accumulate(
                        grads,
                        *weight,
                        Tensor::new(ws.to_vec(), dw).expect("conv dw"),
                    )?;
                }
                if let Some(b) = bias {
                    let db = kernels::conv3d_grad_bias(up.data(), &os);
                    self.accumulate(grads, *b, Tensor::new(vec![os[1]], db).expect("conv db"))?;
                }
            }
            Op::Upsample2(a) => {
                let xs = to5(self.graph.shape(*a));
                let dx = kernels::upsample2_grad_input(up.data(), &xs);
                self.accumulate(grads, *a, Tensor::new(xs.to_vec(), dx).expect("up dx"))?;
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = v(*input);
                let w = v(*weight);
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[0];
                let (dx, dw, db) =
                    kernels::linear_grads(up.data(), x.data(), n, fin, w.data(), fout);
                self.accumulate(grads, *input, Tensor::new(vec![n, fin], dx).expect("lin dx"))?;
                self.accumulate(
                    grads,
                    *weight,
                    Tensor::new(vec![fout, fin], dw).expect("lin dw"),
                )?;
                self.accumulate(grads, *bias, Tensor::new(vec![fout], db).expect("lin db"))?;
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let g = ew_binary(up, v(*a), |u, x| if x > 0.0 { u } else { s * u });
                self.accumulate(grads, *a, g)?;
            }
            Op::Sigmoid(a) => {
                let g = ew_binary(up, v(id), |u, o| u * o * (1.0 - o));
                self.accumulate(grads, *a, g)?;
            }
            Op::Tanh(a) => {
                let g = ew_binary(up, v(id), |u, o| u * (1.0 - o * o));
                self.accumulate(grads, *a, g)?;
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let x = v(*input);
                let xs = to5(x.shape());
                let (dx, dgamma, dbeta) = kernels::groupnorm_backward(
                    up.data(),
                    x.data(),
                    &xs,
                    v(*gamma).data(),
                    *groups,
                    *eps,
                );
                self.accumulate(grads, *input, Tensor::new(xs.to_vec(), dx).expect("gn dx"))?;
                self.accumulate(
                    grads,
                    *gamma,
                    Tensor::new(vec![xs[1]], dgamma).expect("gn dgamma"),
                )?;
                self.accumulate(
                    grads,
                    *beta,
                    Tensor::new(vec![xs[1]], dbeta).expect("gn dbeta"),
                )?;
            }
            Op::GlobalAvgPool(a) => {
                let xs = to5(self.graph.shape(*a));
                let dx = kernels::gap_grad_input(up.data(), &xs);
                self.accumulate(grads, *a, Tensor::new(xs.to_vec(), dx).expect("gap dx"))?;
            }
            Op::Warp { source, dvf } => {
                let ss = to5(self.graph.shape(*source));
                let needs_dsrc = !matches!(self.graph.nodes[*source].op, Op::Constant { .. });
                let needs_ddvf = !matches!(self.graph.nodes[*dvf].op, Op::Constant { .. });
                if needs_dsrc {
                    let dsrc = kernels::warp_grad_source(up.data(), &ss, v(*dvf).data());
                    self.accumulate(
                        grads,
                        *source,
                        Tensor::new(ss.to_vec(), dsrc).expect("warp dsrc"),
                    )?;
                }
                if needs_ddvf {
                    let ddvf =
                        kernels::warp_grad_dvf(up.data(), v(*source).data(), &ss, v(*dvf).data());
                    let ds = self.graph.shape(*dvf).to_vec();
                    self.accumulate(grads, *dvf, Tensor::new(ds, ddvf).expect("warp ddvf"))?;
                }
            }
            Op::AffineMatrix { params } => {
                let partials = geometry::affine_matrix_partials(v(*params).data());
                let mut g = vec![0.0; 15];
                for (pi, pm) in partials.iter().enumerate() {
                    let mut acc = 0.0;
                    for r in 0..4 {
                        for c in 0..4 {
                            acc += up.data()[r * 4 + c] * pm[r][c];
                        }
                    }
                    g[pi] = acc;
                }
                let ps = self.graph.shape(*params).to_vec();
                self.accumulate(grads, *params, Tensor::new(ps, g).expect("affine grad"))?;
            }
            Op::AffineToDvf { matrix, grid } => {
                let [z, y, x] = *grid;
                let s = z * y * x;
                let cx = (x - 1) as f64 / 2.0;
                let cy = (y - 1) as f64 / 2.0;
                let cz = (z - 1) as f64 / 2.0;
                let mut gm = vec![0.0; 16];
                let upd = up.data();
                for zi in 0..z {
                    for yi in 0..y {
                        for xi in 0..x {
                            let q = [xi as f64 - cx, yi as f64 - cy, zi as f64 - cz];
                            let idx = (zi * y + yi) * x + xi;
                            for row in 0..3 {
                                let u = upd[row * s + idx];
                                if u == 0.0 {
                                    continue;
                                }
                                gm[row * 4] += u * q[0];
                                gm[row * 4 + 1] += u * q[1];
                                gm[row * 4 + 2] += u * q[2];
                                gm[row * 4 + 3] += u;
                            }
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *matrix,
                    Tensor::new(vec![4, 4], gm).expect("dvf->matrix grad"),
                )?;
            }
            Op::ForwardDiff { input, axis } => {
                let xs = to5(self.graph.shape(*input));
                let dx = kernels::forward_diff_adjoint(up.data(), &xs, *axis);
                self.accumulate(grads, *input, Tensor::new(xs.to_vec(), dx).expect("diff dx"))?;
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let l = v(*logits);
                let ls = to5(l.shape());
                let dl = kernels::softmax_ce_grad(l.data(), &ls, labels, up.item());
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::new(l.shape().to_vec(), dl).expect("ce grad"),
                )?;
            }
        }
        Ok(())
    }
}
