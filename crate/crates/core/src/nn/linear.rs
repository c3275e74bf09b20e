use super::{he_normal, join, Module};
use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LinearParams {
    /// `[out_features × in_features]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: he_normal(&[out_features, in_features], in_features, rng)?,
            bias: Tensor::zeros(&[out_features])?.with_requires_grad(),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(&join(prefix, "weight"), &self.weight);
        let b = tape.param(&join(prefix, "bias"), &self.bias);
        linear(tape, x, w, b)
    }
}

impl Module for LinearParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `x · weightᵀ + bias` for `x[n×d]`, `weight[k×d]`, `bias[k]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xs, ws, bs) = (tape.shape(x), tape.shape(weight), tape.shape(bias));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
        return Err(Error::Shape(format!(
            "linear: input {xs:?}, weight {ws:?}, bias {bs:?}"
        )));
    }
    let (n, d, k) = (xs[0], xs[1], ws[0]);
    let bd = tape.value(bias).data();
    let mut out: Vec<f64> = (0..n).flat_map(|_| bd.iter().copied()).collect();
    gemm(
        false,
        true,
        n,
        k,
        d,
        1.0,
        tape.value(x).data(),
        tape.value(weight).data(),
        1.0,
        &mut out,
    );
    let value = Tensor::new(vec![n, k], out)?;
    Ok(
        tape.record(value, &[x, weight, bias], move |ctx: &BackwardCtx<'_>| {
            let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![0.0; n * d];
                gemm(false, false, n, d, k, 1.0, ctx.grad, wd, 0.0, &mut dx);
                dx
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![0.0; k * d];
                gemm(true, false, k, d, n, 1.0, ctx.grad, xd, 0.0, &mut dw);
                dw
            });
            let db = ctx.needs[2].then(|| {
                let mut db = vec![0.0; k];
                for row in ctx.grad.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                db
            });
            vec![dx, dw, db]
        }),
    )
}
