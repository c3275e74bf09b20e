//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep. Leaves created
//! from tensors with `requires_grad` accumulate their gradient on the tape;
//! named parameter leaves can be looked up after backward with
//! [`Tape::param_grad`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward: Send + Sync {
    /// One entry per input; `None` where no gradient is needed.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

impl<F> Backward for F
where
    F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync,
{
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        self(ctx)
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    inference: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records no backward rules; every leaf is a constant.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: Option<Box<dyn Backward>>,
        rg: bool,
    ) -> Var {
        let value = if value.requires_grad() || value.grad().is_some() {
            value.detached()
        } else {
            value
        };
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad: rg,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding `t`; differentiable when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad() && !self.inference;
        self.push(t, Vec::new(), None, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None, false)
    }

    /// Bind a named parameter. Binding the same name twice returns the
    /// original leaf, so a shared layer contributes one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Record the result of an operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub fn record<B: Backward + 'static>(&mut self, value: Tensor, inputs: &[Var], op: B) -> Var {
        let rg = !self.inference && inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        if rg {
            self.push(value, inputs.to_vec(), Some(Box::new(op)), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    /// Propagate d(loss)/d(node) to every differentiable leaf. Repeated calls
    /// accumulate into the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                None => {
                    if node.requires_grad {
                        leaf_grads.push((i, g));
                    }
                }
                Some(op) => {
                    let ctx = BackwardCtx {
                        inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                        output: &node.value,
                        grad: &g,
                        needs: node
                            .inputs
                            .iter()
                            .map(|v| self.nodes[v.0].requires_grad)
                            .collect(),
                    };
                    let grads = op.backward(&ctx);
                    debug_assert_eq!(grads.len(), node.inputs.len());
                    for (input, gi) in node.inputs.iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        match &mut scratch[input.0] {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// `a · b` for 2-D operands.
pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        false,
        false,
        m,
        n,
        k,
        1.0,
        tape.value(a).data(),
        tape.value(b).data(),
        0.0,
        &mut out,
    );
    let value = Tensor::new(vec![m, n], out)?;
    Ok(tape.record(value, &[a, b], move |ctx: &BackwardCtx<'_>| {
        let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let da = ctx.needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            gemm(false, true, m, k, n, 1.0, ctx.grad, bv, 0.0, &mut d);
            d
        });
        let db = ctx.needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            gemm(true, false, k, n, m, 1.0, av, ctx.grad, 0.0, &mut d);
            d
        });
        vec![da, db]
    }))
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "add")?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x + y)
        .collect();
    let value = Tensor::new(tape.shape(a).to_vec(), data)?;
    Ok(tape.record(value, &[a, b], |ctx: &BackwardCtx<'_>| {
        vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
    }))
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "sub")?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x - y)
        .collect();
    let value = Tensor::new(tape.shape(a).to_vec(), data)?;
    Ok(tape.record(value, &[a, b], |ctx: &BackwardCtx<'_>| {
        vec![
            Some(ctx.grad.to_vec()),
            Some(ctx.grad.iter().map(|g| -g).collect()),
        ]
    }))
}

/// Elementwise product.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mul")?;
    let data = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x * y)
        .collect();
    let value = Tensor::new(tape.shape(a).to_vec(), data)?;
    Ok(tape.record(value, &[a, b], |ctx: &BackwardCtx<'_>| {
        let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            ctx.needs[0].then(|| ctx.grad.iter().zip(bv).map(|(g, y)| g * y).collect()),
            ctx.needs[1].then(|| ctx.grad.iter().zip(av).map(|(g, x)| g * x).collect()),
        ]
    }))
}

pub fn scale(tape: &mut Tape, a: Var, factor: f64) -> Result<Var> {
    let t = tape.value(a);
    let value = Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|x| x * factor).collect(),
    )?;
    Ok(tape.record(value, &[a], move |ctx: &BackwardCtx<'_>| {
        vec![Some(ctx.grad.iter().map(|g| g * factor).collect())]
    }))
}

/// Sum of all elements as a scalar.
pub fn sum(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.value(a).len();
    let value = Tensor::scalar(tape.value(a).data().iter().sum());
    Ok(tape.record(value, &[a], move |ctx: &BackwardCtx<'_>| {
        vec![Some(vec![ctx.grad[0]; n])]
    }))
}

pub fn mean(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.value(a).len();
    let s = sum(tape, a)?;
    scale(tape, s, 1.0 / n as f64)
}

pub fn reshape(tape: &mut Tape, a: Var, shape: &[usize]) -> Result<Var> {
    let value = tape.value(a).detached().reshape(shape)?;
    Ok(tape.record(value, &[a], |ctx: &BackwardCtx<'_>| {
        vec![Some(ctx.grad.to_vec())]
    }))
}

/// Concatenate along dimension 1. All inputs must agree on every other dimension.
pub fn concat_dim1(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let base = tape.shape(*first).to_vec();
    if base.len() < 2 {
        return Err(Error::Shape(format!("concat_dim1 on shape {base:?}")));
    }
    let n = base[0];
    let inner: usize = base[2..].iter().product();
    let mut widths = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = tape.shape(p);
        if s.len() != base.len() || s[0] != n || s[2..] != base[2..] {
            return Err(Error::Shape(format!("concat_dim1 of {base:?} and {s:?}")));
        }
        widths.push(s[1] * inner);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for (&p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&tape.value(p).data()[i * w..(i + 1) * w]);
        }
    }
    let mut shape = base.clone();
    shape[1] = widths.iter().sum::<usize>() / inner;
    let value = Tensor::new(shape, data)?;
    Ok(tape.record(value, parts, move |ctx: &BackwardCtx<'_>| {
        let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
        for i in 0..n {
            let mut off = i * total;
            for (o, &w) in out.iter_mut().zip(&widths) {
                o.extend_from_slice(&ctx.grad[off..off + w]);
                off += w;
            }
        }
        out.into_iter()
            .zip(&ctx.needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = matmul(&mut tape, i2, m).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

        let v = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let r = matmul(&mut tape, m, v).unwrap();
        assert_eq!(tape.value(r).shape(), &[2, 1]);
        assert_eq!(tape.value(r).data(), &[17.0, 39.0]);

        let z = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let any = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 4.5, 5.0, 6.0]));
        let r = matmul(&mut tape, z, any).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = matmul(&mut tape, a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn power_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad());
        let y = mul(&mut tape, x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_requires_grad());
        let y = scale(&mut tape, x, 5.0).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[10.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        let x0 = t(&[3], &[0.5, -1.0, 2.0]).with_requires_grad();
        let build = |tape: &mut Tape, x: Var| {
            let sq = mul(tape, x, x).unwrap();
            let l1 = sum(tape, sq).unwrap();
            let l2 = mean(tape, x).unwrap();
            (l1, l2)
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let (l1, l2) = build(&mut tape, x);
        let total = add(&mut tape, l1, l2).unwrap();
        tape.backward(total).unwrap();
        let joint = tape.grad(x).unwrap().to_vec();

        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let (l1, l2) = build(&mut tape, x);
        tape.backward(l1).unwrap();
        tape.backward(l2).unwrap();
        let separate = tape.grad(x).unwrap();
        for (a, b) in joint.iter().zip(separate) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).unwrap().with_requires_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_record_no_backward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = scale(&mut tape, a, 2.0).unwrap();
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn inference_tape_ignores_requires_grad() {
        let mut tape = Tape::inference();
        let a = tape.leaf(Tensor::scalar(1.0).with_requires_grad());
        assert!(!tape.requires_grad(a));
    }

    #[test]
    fn concat_round_trips_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad());
        let b = tape
            .leaf(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).with_requires_grad());
        let c = concat_dim1(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let w =
            tape.constant(Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        let p = mul(&mut tape, c, w).unwrap();
        let s = sum(&mut tape, p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(
            tape.grad(b).unwrap(),
            &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]
        );
    }
}
