//! The computation record and differentiable variables.
//!
//! A [`Graph`] appends one node per primitive in execution order, so node ids
//! are already a topological order. Backward walks the ids in reverse and
//! expresses every vector-Jacobian product with the same primitives. With
//! higher-order recording enabled those products are themselves appended to
//! the graph, which is what makes gradients of gradients available.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{self, Broadcast, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Square,
    Abs,
    Scale(f64),
    AddScalar,
    Sigmoid,
    Ln,
    Relu,
    Clamp(f64, f64),
    Sum,
    Mean,
    SumLast,
    SumFirst,
    L2NormRows,
    RowMax(Rc<Vec<usize>>),
    GatherCols(Rc<Vec<usize>>),
    ScatterCols(Rc<Vec<usize>>),
    GatherRows(Rc<Vec<usize>>),
    ScatterRows(Rc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    Reshape(Vec<usize>),
}

#[derive(Clone)]
struct Operand {
    id: Option<usize>,
    value: Rc<Tensor>,
}

struct Node {
    op: Op,
    inputs: Vec<Operand>,
    value: Rc<Tensor>,
}

/// An explicit computation record, rebuilt for every training step.
///
/// Not `Sync`: a record lives on one thread from creation to backward.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    higher_order: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph supporting first-order backward.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            higher_order: false,
        }
    }

    /// A recording graph whose backward pass can itself be recorded.
    pub fn with_higher_order() -> Self {
        Self {
            higher_order: true,
            ..Self::new()
        }
    }

    /// A graph that records nothing; useful for pure inference.
    pub fn inference() -> Self {
        let g = Self::new();
        g.recording.set(false);
        g
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn supports_higher_order(&self) -> bool {
        self.higher_order
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input. Gradients are reported for leaves only.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let value = Rc::new(value);
        if !self.recording.get() {
            return Var {
                graph: self,
                id: None,
                value,
            };
        }
        let id = self.push(Op::Leaf, Vec::new(), value.clone());
        Var {
            graph: self,
            id: Some(id),
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            graph: self,
            id: None,
            value: Rc::new(value),
        }
    }

    fn push(&self, op: Op, inputs: Vec<Operand>, value: Rc<Tensor>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value });
        nodes.len() - 1
    }

    fn record(&self, op: Op, inputs: &[&Var<'_>], value: Tensor) -> Var<'_> {
        let value = Rc::new(value);
        let tracked = self.recording.get() && inputs.iter().any(|v| v.id.is_some());
        let id = tracked.then(|| {
            let operands = inputs
                .iter()
                .map(|v| Operand {
                    id: v.id,
                    value: v.value.clone(),
                })
                .collect();
            self.push(op, operands, value.clone())
        });
        Var {
            graph: self,
            id,
            value,
        }
    }

    /// Gradients of a scalar with respect to every leaf, as plain values.
    pub fn backward<'g>(&'g self, output: &Var<'g>) -> Result<Gradients<'g>> {
        self.backward_impl(output, false)
    }

    /// Gradients whose entries are nodes of this graph, so an expression of
    /// them can be differentiated again.
    pub fn backward_retaining<'g>(&'g self, output: &Var<'g>) -> Result<Gradients<'g>> {
        if !self.higher_order {
            return Err(AutodiffError::HigherOrderDisabled);
        }
        self.backward_impl(output, true)
    }

    fn backward_impl<'g>(&'g self, output: &Var<'g>, retain: bool) -> Result<Gradients<'g>> {
        if output.value.numel() != 1 {
            return Err(AutodiffError::NonScalarOutput {
                shape: output.value.shape().to_vec(),
            });
        }
        if self.is_empty() {
            return Err(AutodiffError::EmptyRecord);
        }
        let Some(out_id) = output.id else {
            return Ok(Gradients {
                graph: self,
                grads: HashMap::new(),
            });
        };

        let prev = self.recording.replace(retain);
        let result = self.propagate(out_id, output.value.shape());
        self.recording.set(prev);
        result
    }

    fn propagate<'g>(&'g self, out_id: usize, out_shape: &[usize]) -> Result<Gradients<'g>> {
        let mut pending: Vec<Option<Var<'g>>> = vec![None; out_id + 1];
        pending[out_id] = Some(self.constant(Tensor::new(out_shape.to_vec(), vec![1.0])?));
        let mut grads = HashMap::new();

        for id in (0..=out_id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let (op, inputs, value) = {
                let nodes = self.nodes.borrow();
                let n = &nodes[id];
                (n.op.clone(), n.inputs.clone(), n.value.clone())
            };
            if let Op::Leaf = op {
                grads.insert(id, g);
                continue;
            }
            let this = Var {
                graph: self,
                id: Some(id),
                value,
            };
            let ins: Vec<Var<'g>> = inputs
                .iter()
                .map(|o| Var {
                    graph: self,
                    id: o.id,
                    value: o.value.clone(),
                })
                .collect();
            let contributions = self.vjp(&op, &ins, &this, &g)?;
            for (input, contrib) in ins.iter().zip(contributions) {
                let (Some(iid), Some(c)) = (input.id, contrib) else {
                    continue;
                };
                pending[iid] = Some(match pending[iid].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }
        Ok(Gradients { graph: self, grads })
    }

    /// Vector-Jacobian products, written with recorded primitives.
    fn vjp<'g>(
        &'g self,
        op: &Op,
        ins: &[Var<'g>],
        out: &Var<'g>,
        g: &Var<'g>,
    ) -> Result<Vec<Option<Var<'g>>>> {
        let needs = |i: usize| ins[i].id.is_some();
        let one = |v: Result<Var<'g>>| v.map(|v| vec![Some(v)]);
        match op {
            Op::Leaf => Ok(vec![]),
            Op::MatMul => {
                let a = if needs(0) {
                    Some(g.matmul(&ins[1].transpose()?)?)
                } else {
                    None
                };
                let b = if needs(1) {
                    Some(ins[0].transpose()?.matmul(g)?)
                } else {
                    None
                };
                Ok(vec![a, b])
            }
            Op::Transpose => one(g.transpose()),
            Op::Add => Ok(vec![
                needs(0).then(|| g.clone()),
                if needs(1) {
                    Some(reduce_to(g, &ins[0], &ins[1])?)
                } else {
                    None
                },
            ]),
            Op::Sub => Ok(vec![
                needs(0).then(|| g.clone()),
                if needs(1) {
                    Some(reduce_to(&g.neg()?, &ins[0], &ins[1])?)
                } else {
                    None
                },
            ]),
            Op::Mul => Ok(vec![
                if needs(0) { Some(g.mul(&ins[1])?) } else { None },
                if needs(1) {
                    Some(reduce_to(&g.mul(&ins[0])?, &ins[0], &ins[1])?)
                } else {
                    None
                },
            ]),
            Op::Div => Ok(vec![
                if needs(0) { Some(g.div(&ins[1])?) } else { None },
                if needs(1) {
                    // d(a/b)/db = -a/b^2 = -out/b
                    let t = g.mul(out)?.div(&ins[1])?.neg()?;
                    Some(reduce_to(&t, &ins[0], &ins[1])?)
                } else {
                    None
                },
            ]),
            Op::Neg => one(g.neg()),
            Op::Square => one(g.mul(&ins[0])?.scale(2.0)),
            Op::Abs => {
                let sign = self.constant(ins[0].value.map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }));
                one(g.mul(&sign))
            }
            Op::Scale(k) => one(g.scale(*k)),
            Op::AddScalar => Ok(vec![Some(g.clone())]),
            Op::Sigmoid => {
                // s' = s - s^2, kept as a function of the output node.
                let ds = out.sub(&out.square()?)?;
                one(g.mul(&ds))
            }
            Op::Ln => one(g.div(&ins[0])),
            Op::Relu => {
                let mask = self.constant(ins[0].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                one(g.mul(&mask))
            }
            Op::Clamp(lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = self.constant(
                    ins[0]
                        .value
                        .map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 }),
                );
                one(g.mul(&mask))
            }
            Op::Sum | Op::Mean | Op::SumLast | Op::SumFirst => {
                let x = &ins[0].value;
                let mut ones = Tensor::ones(x.rows(), x.cols());
                if let Op::Mean = op {
                    let n = x.numel() as f64;
                    ones = ones.map(|v| v / n);
                }
                one(self.constant(ones).mul(g))
            }
            Op::L2NormRows => one(ins[0].mul(&g.div(out)?)),
            Op::RowMax(idx) | Op::GatherCols(idx) => {
                one(g.scatter_cols(idx.clone(), ins[0].value.cols()))
            }
            Op::ScatterCols(idx) => one(g.gather_cols(idx.clone())),
            Op::GatherRows(idx) => one(g.scatter_rows(idx.clone(), ins[0].value.rows())),
            Op::ScatterRows(idx) => one(g.gather_rows(idx.clone())),
            Op::ConcatRows(sizes) => {
                let mut start = 0;
                let mut outs = Vec::with_capacity(sizes.len());
                for (i, &n) in sizes.iter().enumerate() {
                    outs.push(if needs(i) {
                        Some(g.gather_rows(Rc::new((start..start + n).collect()))?)
                    } else {
                        None
                    });
                    start += n;
                }
                Ok(outs)
            }
            Op::Reshape(from) => one(g.reshape(from.clone())),
        }
    }
}

/// Sums a broadcast gradient back down to the right operand's shape.
fn reduce_to<'g>(g: &Var<'g>, lhs: &Var<'g>, rhs: &Var<'g>) -> Result<Var<'g>> {
    match tensor::broadcast_kind("reduce", &lhs.value, &rhs.value)? {
        Broadcast::Same => Ok(g.clone()),
        Broadcast::Row => g.sum_first_axis(),
        Broadcast::Col => g.sum_last_axis(),
        Broadcast::Scalar => g.sum(),
    }
}

/// Result of a backward pass: one gradient per reached leaf.
pub struct Gradients<'g> {
    graph: &'g Graph,
    grads: HashMap<usize, Var<'g>>,
}

impl std::fmt::Debug for Gradients<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gradients").field("leaves", &self.grads.len()).finish()
    }
}

impl<'g> Gradients<'g> {
    /// The gradient for `leaf`, or zeros of its shape when unreachable.
    pub fn wrt(&self, leaf: &Var<'g>) -> Var<'g> {
        leaf.id
            .and_then(|id| self.grads.get(&id).cloned())
            .unwrap_or_else(|| {
                self.graph
                    .constant(Tensor::zeros(leaf.value.rows(), leaf.value.cols()))
            })
    }

    /// Plain value of the gradient for `leaf`.
    pub fn value(&self, leaf: &Var<'g>) -> Tensor {
        (*self.wrt(leaf).value).clone()
    }
}

/// A value in a [`Graph`], possibly tracked for differentiation.
#[derive(Clone)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Whether this value depends on a leaf through recorded operations.
    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// The same value with its history cut.
    pub fn detach(&self) -> Var<'g> {
        Var {
            graph: self.graph,
            id: None,
            value: self.value.clone(),
        }
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'g> {
        self.graph.record(op, &[self], value)
    }

    fn binary_op(
        &self,
        other: &Var<'g>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let value = tensor::binary(name, &self.value, &other.value, f)?;
        Ok(self.graph.record(op, &[self, other], value))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let value = tensor::matmul(&self.value, &other.value)?;
        Ok(self.graph.record(Op::MatMul, &[self, other], value))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::Transpose, tensor::transpose(&self.value)?))
    }

    /// Element-wise sum; `other` may broadcast as a row, column or scalar.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_op(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::Neg, self.value.map(|x| -x)))
    }

    pub fn square(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::Square, self.value.map(|x| x * x)))
    }

    pub fn abs(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::Abs, self.value.map(f64::abs)))
    }

    pub fn scale(&self, k: f64) -> Result<Var<'g>> {
        Ok(self.unary(Op::Scale(k), self.value.map(|x| k * x)))
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var<'g>> {
        Ok(self.unary(Op::AddScalar, self.value.map(|x| x + k)))
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::Sigmoid, self.value.map(sigmoid)))
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::Ln, self.value.map(f64::ln)))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::Relu, self.value.map(|x| x.max(0.0))))
    }

    /// `[x]_+`. At exactly zero the gradient is zero.
    pub fn hinge(&self) -> Result<Var<'g>> {
        self.relu()
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever a rail is hit.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'g>> {
        Ok(self.unary(Op::Clamp(lo, hi), self.value.map(|x| x.clamp(lo, hi))))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let s = self.value.data().iter().sum();
        Ok(self.unary(Op::Sum, Tensor::scalar(s)))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        if self.value.numel() == 0 {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        let s: f64 = self.value.data().iter().sum();
        Ok(self.unary(Op::Mean, Tensor::scalar(s / self.value.numel() as f64)))
    }

    pub fn sum_last_axis(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::SumLast, tensor::sum_last(&self.value)?))
    }

    pub fn sum_first_axis(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::SumFirst, tensor::sum_first(&self.value)?))
    }

    /// L2 norm of each row: `[r, c] -> [r, 1]`.
    pub fn l2_norm(&self) -> Result<Var<'g>> {
        Ok(self.unary(Op::L2NormRows, tensor::l2_norm_rows(&self.value)?))
    }

    /// Per-row maximum `[r, 1]` with the winning columns. The gradient goes
    /// to the argmax only; ties resolve to the lowest column.
    pub fn row_max(&self) -> Result<(Var<'g>, Vec<usize>)> {
        let (value, idx) = tensor::row_max(&self.value)?;
        let v = self.unary(Op::RowMax(Rc::new(idx.clone())), value);
        Ok((v, idx))
    }

    /// Picks column `idx[i]` from row `i`: `[r, c] -> [r, 1]`.
    pub fn gather_cols(&self, idx: Rc<Vec<usize>>) -> Result<Var<'g>> {
        let value = tensor::gather_cols(&self.value, &idx)?;
        Ok(self.unary(Op::GatherCols(idx), value))
    }

    pub fn scatter_cols(&self, idx: Rc<Vec<usize>>, cols: usize) -> Result<Var<'g>> {
        let value = tensor::scatter_cols(&self.value, &idx, cols)?;
        Ok(self.unary(Op::ScatterCols(idx), value))
    }

    /// Selects rows (repeats allowed).
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Var<'g>> {
        let value = tensor::gather_rows(&self.value, &idx)?;
        Ok(self.unary(Op::GatherRows(idx), value))
    }

    /// Adds row `i` into row `idx[i]` of a `rows`-row zero matrix.
    pub fn scatter_rows(&self, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var<'g>> {
        let value = tensor::scatter_rows(&self.value, &idx, rows)?;
        Ok(self.unary(Op::ScatterRows(idx), value))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g>> {
        let value = self.value.reshaped(shape)?;
        Ok(self.unary(Op::Reshape(self.value.shape().to_vec()), value))
    }

    /// Stacks row blocks with matching column counts.
    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(AutodiffError::Empty { op: "concat_rows" })?;
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value.as_ref()).collect();
        let value = tensor::concat_rows(&values)?;
        let sizes = parts.iter().map(|p| p.value.rows()).collect();
        let refs: Vec<&Var<'g>> = parts.iter().collect();
        Ok(first.graph.record(Op::ConcatRows(sizes), &refs, value))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
