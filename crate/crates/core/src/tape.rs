//! Reverse-mode automatic differentiation over a per-step computation record.
//!
//! Every forward primitive is appended to a [`Tape`]; the record is
//! topologically ordered by construction and the backward pass visits it once
//! in reverse. Any primitive that produces a non-finite value fails
//! immediately with the offending op named.

use std::cell::RefCell;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle into the active computation record.
pub type NodeId = usize;

/// Recorded primitive operations.
#[derive(Clone, Debug)]
pub enum Op<S> {
    Leaf,
    Matmul,
    Add,
    Mul,
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Sum,
    Mean,
    Concat,
    Slice { start: usize, len: usize },
    /// Elementwise `a*x + b` with host constants.
    Affine { a: S, b: S },
    /// Hard interval clamp; gradient passes only strictly inside.
    Clamp { lo: S, hi: S },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Affine { .. } => "affine",
            Op::Clamp { .. } => "clamp",
        }
    }
}

struct Node<S> {
    op: Op<S>,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
}

/// The computation record. Single-threaded by design; independent tapes may
/// run on separate threads with no shared state.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// A value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    pub id: NodeId,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    // log(1+e^x), stable on both tails
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input tensor (parameter or constant).
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push(Op::Leaf, vec![], value);
        Var { tape: self, id }
    }

    pub fn leaf_scalar(&self, v: S) -> Var<'_, S> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> Tensor<S> {
        self.nodes.borrow()[id].value.clone()
    }

    fn push(&self, op: Op<S>, inputs: Vec<NodeId>, value: Tensor<S>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value });
        nodes.len() - 1
    }

    /// Record one primitive. All shape checks happen here and the result is
    /// verified finite before it lands on the tape.
    pub fn apply(&self, op: Op<S>, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let get = |i: usize| &nodes[inputs[i]].value;
            match &op {
                Op::Leaf => {
                    return Err(TensorError::Domain {
                        op: "leaf",
                        detail: "use Tape::leaf to record inputs".into(),
                    })
                }
                Op::Matmul => tensor::matmul(get(0), get(1))?,
                Op::Add => tensor::add_broadcast(get(0), get(1))?,
                Op::Mul => get(0).zip(get(1), "mul", |a, b| a * b)?,
                Op::Neg => get(0).map(|v| -v),
                Op::Exp => get(0).map(|v| v.exp()),
                Op::Log => {
                    let x = get(0);
                    if x.data().iter().any(|&v| v <= S::zero()) {
                        return Err(TensorError::Domain {
                            op: "log",
                            detail: "log of non-positive value".into(),
                        });
                    }
                    x.map(|v| v.ln())
                }
                Op::Tanh => get(0).map(|v| v.tanh()),
                Op::Relu => get(0).map(|v| if v > S::zero() { v } else { S::zero() }),
                Op::Sigmoid => get(0).map(sigmoid),
                Op::Softplus => get(0).map(softplus),
                Op::Sum => Tensor::scalar(get(0).data().iter().copied().sum()),
                Op::Mean => {
                    let x = get(0);
                    let n = S::from_f64_c(x.numel() as f64);
                    Tensor::scalar(x.data().iter().copied().sum::<S>() / n)
                }
                Op::Concat => {
                    let parts: Vec<&Tensor<S>> = inputs.iter().map(|&i| &nodes[i].value).collect();
                    tensor::concat_last(&parts)?
                }
                Op::Slice { start, len } => tensor::slice_last(get(0), *start, *len)?,
                Op::Affine { a, b } => get(0).map(|v| *a * v + *b),
                Op::Clamp { lo, hi } => get(0).map(|v| v.max(*lo).min(*hi)),
            }
        };
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        Ok(self.push(op, inputs.to_vec(), value))
    }

    fn apply_var(&self, op: Op<S>, inputs: &[NodeId]) -> Result<Var<'_, S>, TensorError> {
        Ok(Var {
            tape: self,
            id: self.apply(op, inputs)?,
        })
    }

    /// Reverse sweep from a scalar output. Returns d(output)/d(node) for every
    /// node reachable backwards from `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<S>, TensorError> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output].value.shape().to_vec();
        if nodes[output].value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: out_shape });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[output] = Some(Tensor::full(nodes[output].value.shape(), S::one()));

        for id in (0..=output).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            let accum = |grads: &mut Vec<Option<Tensor<S>>>,
                             target: NodeId,
                             inc: Tensor<S>|
             -> Result<(), TensorError> {
                match &mut grads[target] {
                    Some(t) => t.add_assign(&inc)?,
                    slot @ None => *slot = Some(inc),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {}
                Op::Matmul => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    let ga = tensor::matmul(&g, &b.transpose2()?)?;
                    let gb = tensor::matmul(&a.transpose2()?, &g)?;
                    accum(&mut grads, node.inputs[0], ga)?;
                    accum(&mut grads, node.inputs[1], gb)?;
                }
                Op::Add => {
                    let sa = nodes[node.inputs[0]].value.shape().to_vec();
                    let sb = nodes[node.inputs[1]].value.shape().to_vec();
                    accum(&mut grads, node.inputs[0], tensor::reduce_to_shape(&g, &sa)?)?;
                    accum(&mut grads, node.inputs[1], tensor::reduce_to_shape(&g, &sb)?)?;
                }
                Op::Mul => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    accum(&mut grads, node.inputs[0], g.zip(b, "mul", |gv, bv| gv * bv)?)?;
                    accum(&mut grads, node.inputs[1], g.zip(a, "mul", |gv, av| gv * av)?)?;
                }
                Op::Neg => accum(&mut grads, node.inputs[0], g.map(|v| -v))?,
                Op::Exp => {
                    let y = &node.value;
                    accum(&mut grads, node.inputs[0], g.zip(y, "exp", |gv, yv| gv * yv)?)?;
                }
                Op::Log => {
                    let x = &nodes[node.inputs[0]].value;
                    accum(&mut grads, node.inputs[0], g.zip(x, "log", |gv, xv| gv / xv)?)?;
                }
                Op::Tanh => {
                    let y = &node.value;
                    accum(
                        &mut grads,
                        node.inputs[0],
                        g.zip(y, "tanh", |gv, yv| gv * (S::one() - yv * yv))?,
                    )?;
                }
                Op::Relu => {
                    let x = &nodes[node.inputs[0]].value;
                    accum(
                        &mut grads,
                        node.inputs[0],
                        g.zip(x, "relu", |gv, xv| if xv > S::zero() { gv } else { S::zero() })?,
                    )?;
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    accum(
                        &mut grads,
                        node.inputs[0],
                        g.zip(y, "sigmoid", |gv, yv| gv * yv * (S::one() - yv))?,
                    )?;
                }
                Op::Softplus => {
                    let x = &nodes[node.inputs[0]].value;
                    accum(
                        &mut grads,
                        node.inputs[0],
                        g.zip(x, "softplus", |gv, xv| gv * sigmoid(xv))?,
                    )?;
                }
                Op::Sum => {
                    let gv = g.item()?;
                    let shape = nodes[node.inputs[0]].value.shape().to_vec();
                    accum(&mut grads, node.inputs[0], Tensor::full(&shape, gv))?;
                }
                Op::Mean => {
                    let x = &nodes[node.inputs[0]].value;
                    let gv = g.item()? / S::from_f64_c(x.numel() as f64);
                    accum(&mut grads, node.inputs[0], Tensor::full(x.shape(), gv))?;
                }
                Op::Concat => {
                    let mut start = 0usize;
                    for &inp in &node.inputs {
                        let d = nodes[inp].value.last_dim();
                        accum(&mut grads, inp, tensor::slice_last(&g, start, d)?)?;
                        start += d;
                    }
                }
                Op::Slice { start, len } => {
                    let x = &nodes[node.inputs[0]].value;
                    let d = x.last_dim();
                    let lead = x.lead();
                    let mut gx = Tensor::zeros(x.shape());
                    for r in 0..lead {
                        for j in 0..*len {
                            gx.data_mut()[r * d + start + j] = g.data()[r * len + j];
                        }
                    }
                    accum(&mut grads, node.inputs[0], gx)?;
                }
                Op::Affine { a, .. } => {
                    accum(&mut grads, node.inputs[0], g.map(|gv| *a * gv))?;
                }
                Op::Clamp { lo, hi } => {
                    let x = &nodes[node.inputs[0]].value;
                    accum(
                        &mut grads,
                        node.inputs[0],
                        g.zip(x, "clamp", |gv, xv| {
                            if xv > *lo && xv < *hi {
                                gv
                            } else {
                                S::zero()
                            }
                        })?,
                    )?;
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient map keyed by node id.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a var, zeros if it did not influence the output.
    pub fn wrt(&self, var: Var<'_, S>) -> Tensor<S> {
        match self.get(var.id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> Tensor<S> {
        self.tape.value(self.id)
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    /// Re-record the current value as a constant leaf (gradient barrier).
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.leaf(self.value())
    }

    pub fn matmul(self, o: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Matmul, &[self.id, o.id])
    }
    pub fn add(self, o: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Add, &[self.id, o.id])
    }
    pub fn sub(self, o: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.add(o.neg()?)
    }
    pub fn mul(self, o: Var<'t, S>) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Mul, &[self.id, o.id])
    }
    pub fn neg(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Neg, &[self.id])
    }
    pub fn exp(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Exp, &[self.id])
    }
    pub fn log(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Log, &[self.id])
    }
    pub fn tanh(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Tanh, &[self.id])
    }
    pub fn relu(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Relu, &[self.id])
    }
    pub fn sigmoid(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Sigmoid, &[self.id])
    }
    pub fn softplus(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Softplus, &[self.id])
    }
    pub fn sum(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Sum, &[self.id])
    }
    pub fn mean(self) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Mean, &[self.id])
    }
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Slice { start, len }, &[self.id])
    }
    pub fn scale(self, a: S) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Affine { a, b: S::zero() }, &[self.id])
    }
    pub fn affine(self, a: S, b: S) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Affine { a, b }, &[self.id])
    }
    pub fn clamp(self, lo: S, hi: S) -> Result<Var<'t, S>, TensorError> {
        self.tape.apply_var(Op::Clamp { lo, hi }, &[self.id])
    }
    pub fn square(self) -> Result<Var<'t, S>, TensorError> {
        self.mul(self)
    }
}

/// Concatenate vars along the last axis.
pub fn concat<'t, S: Scalar>(vars: &[Var<'t, S>]) -> Result<Var<'t, S>, TensorError> {
    let first = vars.first().ok_or(TensorError::Domain {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let ids: Vec<NodeId> = vars.iter().map(|v| v.id).collect();
    first.tape.apply_var(Op::Concat, &ids)
}

/// Central-difference gradient oracle: perturbs every scalar slot of every
/// parameter tensor and re-evaluates the loss. Test-grade, O(2·#params) evals.
pub fn finite_diff_grad<S, F>(
    params: &mut [Tensor<S>],
    mut loss: F,
    h: S,
) -> Result<Vec<Tensor<S>>, TensorError>
where
    S: Scalar,
    F: FnMut(&[Tensor<S>]) -> Result<S, TensorError>,
{
    let two_h = S::from_f64_c(2.0) * h;
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            params[pi].data_mut()[j] = orig + h;
            let up = loss(params)?;
            params[pi].data_mut()[j] = orig - h;
            let dn = loss(params)?;
            params[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (up - dn) / two_h;
        }
        out.push(g);
    }
    Ok(out)
}

/// Relative error used by all gradient checks: |a-b| / max(1, |a|, |b|).
pub fn rel_err<S: Scalar>(a: S, b: S) -> S {
    (a - b).abs() / S::one().max(a.abs()).max(b.abs())
}
