use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm, Layout};
use crate::tensor::{check_shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Exp,
    /// Natural log; non-positive inputs are a [`TensorError::DomainError`].
    Log,
    /// Natural log of the input clamped into `[lo, hi]`. The gradient is zero
    /// where the clamp is active.
    ClampedLog { lo: f64, hi: f64 },
    /// Subgradient at exactly zero is zero.
    Relu,
    Neg,
    Square,
    /// `x^p`. At `x == 0` the derivative is taken as zero.
    Pow(f64),
    /// `c * x`.
    Scale(f64),
    /// `c - x`.
    RSub(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Data available to a custom operation's backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub input_shapes: Vec<&'a [usize]>,
    pub output: &'a [f64],
    pub output_shape: &'a [usize],
    /// Whether each input wants a gradient; rules may skip the rest.
    pub needs_grad: Vec<bool>,
}

/// Backward rule for an operation whose forward pass was computed outside
/// the tape (convolution, pooling, gradient reversal).
pub trait CustomOp: fmt::Debug + Send {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where `needs_grad` is false.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        /// Output flat index for every input element.
        map: Vec<usize>,
        count: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        a: Var,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
        row_len: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of operations for one forward pass.
///
/// Nodes are appended in execution order, so each operation's inputs always
/// precede it. [`Tape::backward`] walks the nodes once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Leaf built straight from a shape and values.
    pub fn input(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, values, requires_grad)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.input(shape, values, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_deref())
    }

    /// Copies a node out as a standalone tensor (without gradient).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone(), false).expect("tape nodes have valid shapes")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let broadcast = if na.shape == nb.shape {
            false
        } else if nb.shape == [1] {
            true
        } else {
            return Err(TensorError::ShapeMismatch(format!(
                "{kind:?} of {:?} and {:?}",
                na.shape, nb.shape
            )));
        };
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let value: Vec<f64> = if broadcast {
            let s = nb.value[0];
            na.value.iter().map(|&x| f(x, s)).collect()
        } else {
            na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul of {:?} and {:?}",
                na.shape, nb.shape
            )));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut value = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &na.value,
            Layout::Normal,
            &nb.value,
            Layout::Normal,
            0.0,
            &mut value,
        );
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n], value, rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let na = self.node(a)?;
        let value: Vec<f64> = match kind {
            UnaryKind::Exp => na.value.iter().map(|x| x.exp()).collect(),
            UnaryKind::Log => {
                if let Some(&bad) = na.value.iter().find(|&&x| x.is_nan() || x <= 0.0) {
                    return Err(TensorError::DomainError(bad));
                }
                na.value.iter().map(|x| x.ln()).collect()
            }
            UnaryKind::ClampedLog { lo, hi } => {
                na.value.iter().map(|x| x.clamp(lo, hi).ln()).collect()
            }
            UnaryKind::Relu => na.value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            UnaryKind::Neg => na.value.iter().map(|x| -x).collect(),
            UnaryKind::Square => na.value.iter().map(|x| x * x).collect(),
            UnaryKind::Pow(p) => na.value.iter().map(|x| x.powf(p)).collect(),
            UnaryKind::Scale(c) => na.value.iter().map(|x| c * x).collect(),
            UnaryKind::RSub(c) => na.value.iter().map(|x| c - x).collect(),
        };
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        Ok(self.push(shape, value, rg, Op::Unary { kind, a }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    /// Reduces over `axes` (all axes when `None`). Reduced axes are dropped;
    /// a full reduction yields shape `[1]`.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        let na = self.node(a)?;
        let rank = na.shape.len();
        let mut reduced = vec![axes.is_none(); rank];
        if let Some(axes) = axes {
            for &ax in axes {
                if ax >= rank {
                    return Err(TensorError::InvalidAxis { axis: ax, rank });
                }
                reduced[ax] = true;
            }
        }
        let mut out_shape: Vec<usize> = na
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_len: usize = out_shape.iter().product();
        let count = na.value.len() / out_len;

        // Output strides expressed per input axis (zero on reduced axes).
        let mut out_strides = vec![0usize; rank];
        let mut acc = 1;
        for ax in (0..rank).rev() {
            if !reduced[ax] {
                out_strides[ax] = acc;
                acc *= na.shape[ax];
            }
        }
        let mut map = Vec::with_capacity(na.value.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..na.value.len() {
            map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < na.shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut value = vec![0.0; out_len];
        for (x, &o) in na.value.iter().zip(&map) {
            value[o] += x;
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / count as f64;
            value.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = na.requires_grad;
        Ok(self.push(
            out_shape,
            value,
            rg,
            Op::Reduce {
                kind,
                a,
                map,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, None)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::ShapeMismatch("concat of zero tensors".into()))?;
        let base = self.node(*first)?.shape.clone();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut chunks = Vec::with_capacity(inputs.len());
        let mut total = 0;
        let mut rg = false;
        for &v in inputs {
            let n = self.node(v)?;
            let compatible = n.shape.len() == base.len()
                && n.shape
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat on axis {axis} of {base:?} and {:?}",
                    n.shape
                )));
            }
            let (_, len, inner) = split_axis(&n.shape, axis)?;
            chunks.push(len * inner);
            total += n.shape[axis];
            rg |= n.requires_grad;
        }
        let outer: usize = base[..axis].iter().product();
        let mut value = Vec::with_capacity(outer * chunks.iter().sum::<usize>());
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                value.extend_from_slice(&self.nodes[v.0].value[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
        ))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let na = self.node(a)?;
        if na.value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteInput(if log { "log_softmax" } else { "softmax" }));
        }
        let (outer, len, inner) = split_axis(&na.shape, axis)?;
        let mut value = vec![0.0; na.value.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| na.value[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..len).map(|j| (na.value[at(j)] - max).exp()).sum();
                if log {
                    let lse = denom.ln();
                    for j in 0..len {
                        value[at(j)] = na.value[at(j)] - max - lse;
                    }
                } else {
                    for j in 0..len {
                        value[at(j)] = (na.value[at(j)] - max).exp() / denom;
                    }
                }
            }
        }
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        let op = if log {
            Op::LogSoftmax {
                a,
                outer,
                len,
                inner,
            }
        } else {
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            }
        };
        Ok(self.push(shape, value, rg, op))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel = check_shape(shape)?;
        let na = self.node(a)?;
        if numel != na.value.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} into {shape:?}",
                na.shape
            )));
        }
        let (value, rg) = (na.value.clone(), na.requires_grad);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { a }))
    }

    /// Gathers rows (entries of axis 0) in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let na = self.node(a)?;
        if rows.is_empty() {
            return Err(TensorError::InvalidShape(vec![0]));
        }
        let n = na.shape[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::ShapeMismatch(format!(
                "row {bad} out of range for {:?}",
                na.shape
            )));
        }
        let row_len = na.value.len() / n;
        let mut value = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            value.extend_from_slice(&na.value[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = na.shape.clone();
        shape[0] = rows.len();
        let rg = na.requires_grad;
        Ok(self.push(
            shape,
            value,
            rg,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
                row_len,
            },
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        let numel = check_shape(shape)?;
        if numel != value.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} produced {} values for shape {shape:?}",
                op.name(),
                value.len()
            )));
        }
        let mut rg = false;
        for &v in inputs {
            rg |= self.node(v)?.requires_grad;
        }
        Ok(self.push(
            shape.to_vec(),
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => add_into(buf, g),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => add_into(buf, &g),
            None => node.grad = Some(g),
        }
    }

    /// Back-propagates from a scalar loss, seeding its gradient with 1.
    ///
    /// Gradients from any previous call are discarded first. Each node is
    /// visited once, in strict reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let shape = self.node(loss)?.shape.clone();
        if shape != [1] {
            return Err(TensorError::NotScalar(shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Temporarily move the op out so input nodes can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => self.backward_binary(*kind, *a, *b, *broadcast, g),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        &self.nodes[b.0].value,
                        Layout::Transposed,
                        0.0,
                        &mut ga,
                    );
                    self.accumulate_owned(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        &self.nodes[a.0].value,
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut gb,
                    );
                    self.accumulate_owned(*b, gb);
                }
            }
            Op::Unary { kind, a } => {
                if self.nodes[a.0].requires_grad {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[id].value;
                    let ga: Vec<f64> = match *kind {
                        UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        UnaryKind::ClampedLog { lo, hi } => g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| if x >= lo && x <= hi { g / x } else { 0.0 })
                            .collect(),
                        UnaryKind::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                        UnaryKind::Neg => g.iter().map(|g| -g).collect(),
                        UnaryKind::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                        UnaryKind::Pow(p) => g
                            .iter()
                            .zip(x)
                            .map(|(&g, &x)| {
                                if p == 0.0 || x == 0.0 {
                                    0.0
                                } else {
                                    g * p * x.powf(p - 1.0)
                                }
                            })
                            .collect(),
                        UnaryKind::Scale(c) => g.iter().map(|g| c * g).collect(),
                        UnaryKind::RSub(_) => g.iter().map(|g| -g).collect(),
                    };
                    self.accumulate_owned(*a, ga);
                }
            }
            Op::Reduce {
                kind,
                a,
                map,
                count,
            } => {
                if self.nodes[a.0].requires_grad {
                    let scale = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => 1.0 / *count as f64,
                    };
                    let ga: Vec<f64> = map.iter().map(|&o| g[o] * scale).collect();
                    self.accumulate_owned(*a, ga);
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if self.nodes[v.0].requires_grad {
                        let mut gv = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            let start = o * row + offset;
                            gv.extend_from_slice(&g[start..start + c]);
                        }
                        self.accumulate_owned(v, gv);
                    }
                    offset += c;
                }
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if self.nodes[a.0].requires_grad {
                    let y = &self.nodes[id].value;
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    self.accumulate_owned(*a, ga);
                }
            }
            Op::LogSoftmax {
                a,
                outer,
                len,
                inner,
            } => {
                if self.nodes[a.0].requires_grad {
                    let y = &self.nodes[id].value;
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let total: f64 = (0..*len).map(|j| g[at(j)]).sum();
                            for j in 0..*len {
                                ga[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                    self.accumulate_owned(*a, ga);
                }
            }
            Op::Reshape { a } => self.accumulate(*a, g),
            Op::SelectRows { a, rows, row_len } => {
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut ga[r * row_len..(r + 1) * row_len],
                            &g[k * row_len..(k + 1) * row_len],
                        );
                    }
                    self.accumulate_owned(*a, ga);
                }
            }
            Op::Custom { inputs, op: custom } => {
                let needs_grad: Vec<bool> =
                    inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                if needs_grad.iter().any(|&b| b) {
                    let grads = {
                        let ctx = BackwardCtx {
                            inputs: inputs.iter().map(|v| &self.nodes[v.0].value[..]).collect(),
                            input_shapes: inputs.iter().map(|v| &self.nodes[v.0].shape[..]).collect(),
                            output: &self.nodes[id].value,
                            output_shape: &self.nodes[id].shape,
                            needs_grad,
                        };
                        custom.backward(&ctx, g)
                    };
                    for (&v, gv) in inputs.iter().zip(grads) {
                        if let Some(gv) = gv {
                            debug_assert_eq!(gv.len(), self.nodes[v.0].value.len());
                            self.accumulate_owned(v, gv);
                        }
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }

    fn backward_binary(&mut self, kind: BinaryKind, a: Var, b: Var, broadcast: bool, g: &[f64]) {
        let a_rg = self.nodes[a.0].requires_grad;
        let b_rg = self.nodes[b.0].requires_grad;
        let (ga, gb): (Option<Vec<f64>>, Option<Vec<f64>>) = {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            let b_at = |i: usize| if broadcast { bv[0] } else { bv[i] };
            let ga = a_rg.then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => g.iter().enumerate().map(|(i, g)| g * b_at(i)).collect(),
            });
            let gb_full = b_rg.then(|| -> Vec<f64> {
                match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|g| -g).collect(),
                    BinaryKind::Mul => g.iter().zip(av).map(|(g, a)| g * a).collect(),
                }
            });
            let gb = gb_full.map(|full| {
                if broadcast {
                    vec![full.iter().sum()]
                } else {
                    full
                }
            });
            (ga, gb)
        };
        if let Some(ga) = ga {
            self.accumulate_owned(a, ga);
        }
        if let Some(gb) = gb {
            self.accumulate_owned(b, gb);
        }
    }
}
