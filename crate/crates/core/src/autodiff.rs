//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`ComputationRecord`] is a define-by-run tape: every builder method
//! evaluates its primitive immediately, checks the result is finite and
//! appends a node. [`ComputationRecord::grad`] walks the tape backwards and
//! *records* the backward pass as ordinary nodes, so a gradient is itself a
//! [`Var`] that can be combined further and differentiated again (double
//! backprop). ReLU derivatives are expressed with a non-differentiable
//! step mask, which freezes the activation pattern at the evaluation point.
//!
//! ```
//! use mlx_core::autodiff::ComputationRecord;
//! use mlx_core::tensor::Tensor;
//!
//! let mut rec = ComputationRecord::new();
//! let w = rec.input(Tensor::vector(vec![3.0]));
//! let x = rec.constant(Tensor::vector(vec![2.0]));
//! let f = rec.mul(w, x).unwrap();
//! let f = rec.sum(f).unwrap();
//! // R = (df/dx)^2 = w^2, so dR/dw = 2w = 6.
//! let x_in = rec.input(Tensor::vector(vec![2.0]));
//! let f2 = rec.mul(w, x_in).unwrap();
//! let f2 = rec.sum(f2).unwrap();
//! let dfdx = rec.grad(f2, &[x_in], true).unwrap()[0];
//! let sq = rec.mul(dfdx, dfdx).unwrap();
//! let r = rec.sum(sq).unwrap();
//! let dr = rec.grad_of_grad(r, &[w]).unwrap();
//! assert_eq!(rec.value(dr[0]).data(), &[6.0]);
//! # let _ = f;
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`ComputationRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    /// `[n, m] + [m]`, bias broadcast over rows.
    AddBias,
    /// `[n, m] -> [m]`, sum over rows.
    SumRows,
    /// `[m] -> [n, m]`.
    BroadcastRows(usize),
    /// `[n, m] -> [n, 1]`, sum within each row.
    RowSum,
    /// `[n, 1] -> [n, m]`.
    BroadcastCols(usize),
    Scale(f64),
    Relu,
    Abs,
    Exp,
    LogSoftmax,
    Sum,
    Expand(Vec<usize>),
    /// `1[x > 0]`; not differentiable.
    StepMask,
    /// `sign(x)` with `sign(0) = 0`; not differentiable.
    SignMask,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddBias => "add_bias",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::RowSum => "row_sum",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Expand(_) => "expand",
            Op::StepMask => "step_mask",
            Op::SignMask => "sign_mask",
        }
    }

    fn differentiable(&self) -> bool {
        !matches!(self, Op::StepMask | Op::SignMask)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// Recorded by a backward pass without `create_graph`.
    detached: bool,
}

/// Topologically ordered tape of primitive operations and their values.
#[derive(Clone, Debug, Default)]
pub struct ComputationRecord {
    nodes: Vec<Node>,
    detach_new: bool,
}

impl ComputationRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that gradients may flow into (parameters, inputs whose
    /// saliency is needed).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant by every gradient computation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            detached: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Replaces the value of a leaf without re-running the record.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(v.0).ok_or(Error::UnknownNode(v.0))?;
        if node.op != Op::Leaf {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Re-executes the record with new leaf values. Every derived node,
    /// including recorded backward nodes, is recomputed in tape order, so
    /// the same leaves always reproduce the same values bit for bit.
    pub fn forward(&mut self, inputs: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in inputs {
            self.set_leaf(*v, t.clone())?;
        }
        self.replay()
    }

    /// Recomputes all derived nodes from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op == Op::Leaf {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let args: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                eval(&node.op, &args)?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>) -> Result<Var> {
        for &j in &inputs {
            if j >= self.nodes.len() {
                return Err(Error::UnknownNode(j));
            }
        }
        let value = {
            let args: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
            eval(&op, &args)?
        };
        let requires_grad = !self.detach_new
            && op.differentiable()
            && inputs.iter().any(|&j| self.nodes[j].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            detached: self.detach_new,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `op(a) · op(b)`; `ta`/`tb` transpose the operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { ta, tb }, vec![a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub, vec![a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a.0, b.0])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias, vec![x.0, bias.0])
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumRows, vec![x.0])
    }

    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        self.push(Op::BroadcastRows(rows), vec![v.0])
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowSum, vec![x.0])
    }

    pub fn broadcast_cols(&mut self, v: Var, cols: usize) -> Result<Var> {
        self.push(Op::BroadcastCols(cols), vec![v.0])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(c), vec![x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu, vec![x.0])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Abs, vec![x.0])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp, vec![x.0])
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::LogSoftmax, vec![x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum, vec![x.0])
    }

    pub fn expand(&mut self, scalar: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Expand(shape), vec![scalar.0])
    }

    pub fn step_mask(&mut self, x: Var) -> Result<Var> {
        self.push(Op::StepMask, vec![x.0])
    }

    pub fn sign_mask(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SignMask, vec![x.0])
    }

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `create_graph` the backward nodes stay differentiable and the
    /// returned vars can be differentiated again; without it they are
    /// recorded detached (values only).
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let out = self.nodes.get(output.0).ok_or(Error::UnknownNode(output.0))?;
        if !out.value.is_scalar() {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        let seed = self.constant(Tensor::full(out.value.shape().to_vec(), 1.0));
        self.backward(output, seed, wrt, create_graph)
    }

    /// Vector-Jacobian product: gradients of `⟨seed, output⟩`.
    pub fn grad_with_seed(
        &mut self,
        output: Var,
        seed: Var,
        wrt: &[Var],
        create_graph: bool,
    ) -> Result<Vec<Var>> {
        if self.value(output).shape() != self.value(seed).shape() {
            return Err(Error::shape(
                "grad_with_seed",
                format!("{:?} vs {:?}", self.value(output).shape(), self.value(seed).shape()),
            ));
        }
        self.backward(output, seed, wrt, create_graph)
    }

    /// Differentiates a scalar built from recorded gradients (for example a
    /// saliency penalty) with respect to parameters.
    pub fn grad_of_grad(&mut self, scalar: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let node = self.nodes.get(scalar.0).ok_or(Error::UnknownNode(scalar.0))?;
        if !node.requires_grad {
            return Err(Error::InvalidArgument(
                "scalar does not retain a differentiable backward graph; \
                 compute the inner gradient with create_graph = true"
                    .into(),
            ));
        }
        self.grad(scalar, wrt, false)
    }

    fn backward(&mut self, output: Var, seed: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        for w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(w.0));
            }
        }
        let end = output.0 + 1;
        // Nodes whose value depends (differentiably) on some wrt node.
        let mut depends = vec![false; end];
        for w in wrt {
            if w.0 < end {
                depends[w.0] = true;
            }
        }
        for i in 0..end {
            if depends[i] {
                continue;
            }
            let node = &self.nodes[i];
            if node.op.differentiable()
                && node.op != Op::Leaf
                && !node.detached
                && node.inputs.iter().any(|&j| depends[j])
            {
                depends[i] = true;
            }
        }

        let saved_detach = self.detach_new;
        self.detach_new = !create_graph;
        let result = self.backward_inner(output, seed, wrt, &depends);
        self.detach_new = saved_detach;
        result
    }

    fn backward_inner(&mut self, output: Var, seed: Var, wrt: &[Var], depends: &[bool]) -> Result<Vec<Var>> {
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        if depends[output.0] {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i] else { continue };
            let (op, inputs) = {
                let n = &self.nodes[i];
                if n.op == Op::Leaf {
                    continue;
                }
                (n.op.clone(), n.inputs.clone())
            };
            let needs: Vec<bool> = inputs.iter().map(|&j| depends[j]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let contribs = self.vjp(&op, &inputs, Var(i), g, &needs)?;
            for (k, c) in contribs.into_iter().enumerate() {
                if let Some(c) = c {
                    let j = inputs[k];
                    grads[j] = Some(match grads[j] {
                        Some(prev) => self.add(prev, c)?,
                        None => c,
                    });
                }
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match grads.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let shape = self.nodes[w.0].value.shape().to_vec();
                    out.push(self.constant(Tensor::zeros(shape)));
                }
            }
        }
        Ok(out)
    }

    /// Backward rule of one node, expressed with recorded primitives.
    fn vjp(&mut self, op: &Op, inputs: &[usize], out: Var, g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let input = |k: usize| Var(inputs[k]);
        let mut res = vec![None; inputs.len()];
        match op {
            Op::Leaf | Op::StepMask | Op::SignMask => {}
            Op::MatMul { ta, tb } => {
                let (a, b) = (input(0), input(1));
                if needs[0] {
                    res[0] = Some(if *ta {
                        self.matmul(b, g, *tb, true)?
                    } else {
                        self.matmul(g, b, false, !*tb)?
                    });
                }
                if needs[1] {
                    res[1] = Some(if *tb {
                        self.matmul(g, a, true, *ta)?
                    } else {
                        self.matmul(a, g, !*ta, false)?
                    });
                }
            }
            Op::Add => {
                res[0] = needs[0].then_some(g);
                res[1] = needs[1].then_some(g);
            }
            Op::Sub => {
                res[0] = needs[0].then_some(g);
                if needs[1] {
                    res[1] = Some(self.scale(g, -1.0)?);
                }
            }
            Op::Mul => {
                if needs[0] {
                    res[0] = Some(self.mul(g, input(1))?);
                }
                if needs[1] {
                    res[1] = Some(self.mul(g, input(0))?);
                }
            }
            Op::AddBias => {
                res[0] = needs[0].then_some(g);
                if needs[1] {
                    res[1] = Some(self.sum_rows(g)?);
                }
            }
            Op::SumRows => {
                let rows = self.nodes[inputs[0]].value.dims2()?.0;
                res[0] = Some(self.broadcast_rows(g, rows)?);
            }
            Op::BroadcastRows(_) => res[0] = Some(self.sum_rows(g)?),
            Op::RowSum => {
                let cols = self.nodes[inputs[0]].value.dims2()?.1;
                res[0] = Some(self.broadcast_cols(g, cols)?);
            }
            Op::BroadcastCols(_) => res[0] = Some(self.row_sum(g)?),
            Op::Scale(c) => res[0] = Some(self.scale(g, *c)?),
            Op::Relu => {
                let m = self.step_mask(input(0))?;
                res[0] = Some(self.mul(g, m)?);
            }
            Op::Abs => {
                let s = self.sign_mask(input(0))?;
                res[0] = Some(self.mul(g, s)?);
            }
            Op::Exp => res[0] = Some(self.mul(g, out)?),
            Op::LogSoftmax => {
                // g - softmax(x) * rowsum(g), with softmax = exp(out).
                let cols = self.nodes[inputs[0]].value.dims2()?.1;
                let p = self.exp(out)?;
                let s = self.row_sum(g)?;
                let s = self.broadcast_cols(s, cols)?;
                let ps = self.mul(p, s)?;
                res[0] = Some(self.sub(g, ps)?);
            }
            Op::Sum => {
                let shape = self.nodes[inputs[0]].value.shape().to_vec();
                res[0] = Some(self.expand(g, shape)?);
            }
            Op::Expand(_) => res[0] = Some(self.sum(g)?),
        }
        Ok(res)
    }
}

fn eval(op: &Op, args: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    let out = match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::MatMul { ta, tb } => Tensor::matmul(args[0], args[1], *ta, *tb)?,
        Op::Add => args[0].zip_map(args[1], name, |a, b| a + b)?,
        Op::Sub => args[0].zip_map(args[1], name, |a, b| a - b)?,
        Op::Mul => args[0].zip_map(args[1], name, |a, b| a * b)?,
        Op::AddBias => {
            let (x, b) = (args[0], args[1]);
            let (n, m) = x.dims2()?;
            if b.shape() != [m] {
                return Err(Error::shape(name, format!("bias {:?} for rows of width {m}", b.shape())));
            }
            let mut data = x.data().to_vec();
            for r in 0..n {
                for (v, bb) in data[r * m..(r + 1) * m].iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::SumRows => {
            let (n, m) = args[0].dims2()?;
            let mut acc = vec![0.0; m];
            for r in 0..n {
                for (a, v) in acc.iter_mut().zip(&args[0].data()[r * m..(r + 1) * m]) {
                    *a += v;
                }
            }
            Tensor::vector(acc)
        }
        Op::BroadcastRows(n) => {
            let v = args[0];
            if v.shape().len() != 1 {
                return Err(Error::shape(name, format!("expected a vector, got {:?}", v.shape())));
            }
            let m = v.len();
            let mut data = Vec::with_capacity(n * m);
            for _ in 0..*n {
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(*n, m, data)?
        }
        Op::RowSum => {
            let (n, m) = args[0].dims2()?;
            let data = (0..n)
                .map(|r| args[0].data()[r * m..(r + 1) * m].iter().sum())
                .collect();
            Tensor::matrix(n, 1, data)?
        }
        Op::BroadcastCols(m) => {
            let v = args[0];
            if v.shape().len() != 2 || v.shape()[1] != 1 {
                return Err(Error::shape(name, format!("expected [n, 1], got {:?}", v.shape())));
            }
            let n = v.shape()[0];
            let mut data = Vec::with_capacity(n * m);
            for &x in v.data() {
                data.extend(std::iter::repeat_n(x, *m));
            }
            Tensor::matrix(n, *m, data)?
        }
        Op::Scale(c) => args[0].map(|v| v * c),
        Op::Relu => args[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Abs => args[0].map(f64::abs),
        Op::Exp => args[0].map(f64::exp),
        Op::LogSoftmax => {
            let x = args[0];
            let (n, m) = x.dims2()?;
            let mut data = x.data().to_vec();
            for r in 0..n {
                let row = &mut data[r * m..(r + 1) * m];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Sum => Tensor::scalar(args[0].sum()),
        Op::Expand(shape) => {
            let v = args[0].item()?;
            Tensor::full(shape.clone(), v)
        }
        Op::StepMask => args[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::SignMask => args[0].map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
    };
    if !out.all_finite() {
        return Err(Error::NonFinite { op: name });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(rec: &ComputationRecord, v: Var) -> f64 {
        rec.value(v).item().unwrap()
    }

    #[test]
    fn affine_forward() {
        let mut rec = ComputationRecord::new();
        let w = rec.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = rec.constant(Tensor::vector(vec![0.0]));
        let x = rec.constant(Tensor::from_rows(&[[1.0, 1.0]]).unwrap());
        let z = rec.matmul(x, w, false, true).unwrap();
        let z = rec.add_bias(z, b).unwrap();
        assert_eq!(rec.value(z).data(), &[3.0]);
    }

    #[test]
    fn relu_forward_and_zero_derivative_at_kink() {
        let mut rec = ComputationRecord::new();
        let x = rec.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = rec.relu(x).unwrap();
        assert_eq!(rec.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = rec.sum(y).unwrap();
        let g = rec.grad(s, &[x], false).unwrap();
        assert_eq!(rec.value(g[0]).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut rec = ComputationRecord::new();
        let z = rec.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let lp = rec.log_softmax(z).unwrap();
        assert!((rec.value(lp).data()[0] + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn linear_gradient() {
        let mut rec = ComputationRecord::new();
        let w = rec.constant(Tensor::vector(vec![3.0, -2.0]));
        let x = rec.input(Tensor::vector(vec![0.7, 0.1]));
        let p = rec.mul(w, x).unwrap();
        let f = rec.sum(p).unwrap();
        let g = rec.grad(f, &[x], false).unwrap();
        assert_eq!(rec.value(g[0]).data(), &[3.0, -2.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        // d/dW ||W x||^2 at W = [[1]], x = [2] is 2 (W x) x = 8.
        let mut rec = ComputationRecord::new();
        let w = rec.input(Tensor::from_rows(&[[1.0]]).unwrap());
        let x = rec.constant(Tensor::from_rows(&[[2.0]]).unwrap());
        let wx = rec.matmul(x, w, false, true).unwrap();
        let sq = rec.mul(wx, wx).unwrap();
        let f = rec.sum(sq).unwrap();
        let g = rec.grad(f, &[w], false).unwrap();
        assert_eq!(rec.value(g[0]).data(), &[8.0]);
    }

    #[test]
    fn relu_second_order_uses_frozen_pattern() {
        // f = relu(w x) with w x > 0: (df/dx)^2 = w^2, so dR/dw = 2w.
        let mut rec = ComputationRecord::new();
        let w = rec.input(Tensor::from_rows(&[[1.5]]).unwrap());
        let x = rec.input(Tensor::from_rows(&[[0.8]]).unwrap());
        let wx = rec.matmul(x, w, false, true).unwrap();
        let f = rec.relu(wx).unwrap();
        let f = rec.sum(f).unwrap();
        let dfdx = rec.grad(f, &[x], true).unwrap()[0];
        let sq = rec.mul(dfdx, dfdx).unwrap();
        let r = rec.sum(sq).unwrap();
        let d = rec.grad_of_grad(r, &[w]).unwrap();
        assert!((rec.value(d[0]).data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn grad_of_grad_requires_retained_graph() {
        let mut rec = ComputationRecord::new();
        let w = rec.input(Tensor::vector(vec![3.0]));
        let x = rec.input(Tensor::vector(vec![1.0]));
        let p = rec.mul(w, x).unwrap();
        let f = rec.sum(p).unwrap();
        let dfdx = rec.grad(f, &[x], false).unwrap()[0];
        let sq = rec.mul(dfdx, dfdx).unwrap();
        let r = rec.sum(sq).unwrap();
        assert!(rec.grad_of_grad(r, &[w]).is_err());
    }

    #[test]
    fn non_scalar_output_needs_seed() {
        let mut rec = ComputationRecord::new();
        let x = rec.input(Tensor::vector(vec![1.0, 2.0]));
        let y = rec.scale(x, 2.0).unwrap();
        assert!(matches!(rec.grad(y, &[x], false), Err(Error::NonScalarOutput(_))));
        let seed = rec.constant(Tensor::vector(vec![1.0, -1.0]));
        let g = rec.grad_with_seed(y, seed, &[x], false).unwrap();
        assert_eq!(rec.value(g[0]).data(), &[2.0, -2.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut rec = ComputationRecord::new();
        let x = rec.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(rec.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rec = ComputationRecord::new();
        let a = rec.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = rec.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(rec.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn unrelated_wrt_gets_zero_gradient() {
        let mut rec = ComputationRecord::new();
        let a = rec.input(Tensor::vector(vec![1.0, 2.0]));
        let b = rec.input(Tensor::vector(vec![5.0]));
        let s = rec.sum(a).unwrap();
        let g = rec.grad(s, &[b], false).unwrap();
        assert_eq!(rec.value(g[0]).data(), &[0.0]);
        assert_eq!(scalar_of(&rec, s), 3.0);
    }

    #[test]
    fn replay_recomputes_backward_nodes() {
        let mut rec = ComputationRecord::new();
        let x = rec.input(Tensor::vector(vec![1.0, -2.0]));
        let sq = rec.mul(x, x).unwrap();
        let f = rec.sum(sq).unwrap();
        let g = rec.grad(f, &[x], false).unwrap()[0];
        rec.forward(&[(x, Tensor::vector(vec![3.0, 0.5]))]).unwrap();
        assert_eq!(rec.value(f).data(), &[9.25]);
        assert_eq!(rec.value(g).data(), &[6.0, 1.0]);
    }
}
