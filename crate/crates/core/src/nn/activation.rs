use serde::{Deserialize, Serialize};

use super::{join, Module};
use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which nonlinearity a network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Prelu,
    Ptelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "relu" => Ok(Activation::Relu),
            "prelu" => Ok(Activation::Prelu),
            "ptelu" => Ok(Activation::Ptelu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Prelu => "prelu",
            Activation::Ptelu => "ptelu",
        })
    }
}

/// An activation together with its learnable per-channel parameters.
#[derive(Clone, Debug)]
pub enum ActivationKind {
    ReLU,
    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    PReLU {
        slope: Tensor,
    },
    /// `x` for `x ≥ 0`, `alpha·tanh(beta·x)` otherwise; alpha, beta ≥ 0.
    PTELU {
        alpha: Tensor,
        beta: Tensor,
    },
}

impl ActivationKind {
    /// PReLU slopes start at 0.25, PTELU alpha and beta at 1.
    pub fn new(kind: Activation, channels: usize) -> Result<Self> {
        Ok(match kind {
            Activation::Relu => ActivationKind::ReLU,
            Activation::Prelu => ActivationKind::PReLU {
                slope: Tensor::full(&[channels], 0.25)?.with_requires_grad(),
            },
            Activation::Ptelu => ActivationKind::PTELU {
                alpha: Tensor::full(&[channels], 1.0)?.with_requires_grad(),
                beta: Tensor::full(&[channels], 1.0)?.with_requires_grad(),
            },
        })
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        match self {
            ActivationKind::ReLU => relu(tape, x),
            ActivationKind::PReLU { slope } => {
                let a = tape.param(&join(prefix, "slope"), slope);
                prelu(tape, x, a)
            }
            ActivationKind::PTELU { alpha, beta } => {
                let a = tape.param(&join(prefix, "alpha"), alpha);
                let b = tape.param(&join(prefix, "beta"), beta);
                ptelu(tape, x, a, b)
            }
        }
    }

    /// Project PTELU parameters back onto the non-negative orthant.
    pub fn clamp_parameters(&mut self) {
        if let ActivationKind::PTELU { alpha, beta } = self {
            for v in alpha
                .data_mut()
                .iter_mut()
                .chain(beta.data_mut().iter_mut())
            {
                *v = v.max(0.0);
            }
        }
    }
}

impl Module for ActivationKind {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            ActivationKind::ReLU => {}
            ActivationKind::PReLU { slope } => f(join(prefix, "slope"), slope),
            ActivationKind::PTELU { alpha, beta } => {
                f(join(prefix, "alpha"), alpha);
                f(join(prefix, "beta"), beta);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            ActivationKind::ReLU => {}
            ActivationKind::PReLU { slope } => f(join(prefix, "slope"), slope),
            ActivationKind::PTELU { alpha, beta } => {
                f(join(prefix, "alpha"), alpha);
                f(join(prefix, "beta"), beta);
            }
        }
    }
}

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let value = Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|v| v.max(0.0)).collect(),
    )?;
    Ok(tape.record(value, &[x], |ctx: &BackwardCtx<'_>| {
        let xd = ctx.inputs[0].data();
        vec![Some(
            xd.iter()
                .zip(ctx.grad)
                .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }))
}

/// `(channels, inner)` for a tensor laid out as `[n, channels, ...]`.
fn channel_layout(shape: &[usize], params: &[usize], what: &str) -> Result<(usize, usize)> {
    if shape.len() < 2 || params != [shape[1]] {
        return Err(Error::Shape(format!(
            "{what}: input {shape:?} with per-channel parameters {params:?}"
        )));
    }
    Ok((shape[1], shape[2..].iter().product()))
}

pub fn prelu(tape: &mut Tape, x: Var, slope: Var) -> Result<Var> {
    let (c, inner) = channel_layout(tape.shape(x), tape.shape(slope), "prelu")?;
    let (xd, ad) = (tape.value(x).data(), tape.value(slope).data());
    let ch = move |j: usize| (j / inner) % c;
    let out = xd
        .iter()
        .enumerate()
        .map(|(j, &v)| if v >= 0.0 { v } else { ad[ch(j)] * v })
        .collect();
    let value = Tensor::new(tape.shape(x).to_vec(), out)?;
    Ok(
        tape.record(value, &[x, slope], move |ctx: &BackwardCtx<'_>| {
            let (xd, ad) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut dx = vec![0.0; xd.len()];
            let mut da = vec![0.0; c];
            for (j, (&v, &g)) in xd.iter().zip(ctx.grad).enumerate() {
                if v >= 0.0 {
                    dx[j] = g;
                } else {
                    dx[j] = g * ad[ch(j)];
                    da[ch(j)] += g * v;
                }
            }
            vec![Some(dx), Some(da)]
        }),
    )
}

pub fn ptelu(tape: &mut Tape, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    let (c, inner) = channel_layout(tape.shape(x), tape.shape(alpha), "ptelu")?;
    channel_layout(tape.shape(x), tape.shape(beta), "ptelu")?;
    let (xd, al, be) = (
        tape.value(x).data(),
        tape.value(alpha).data(),
        tape.value(beta).data(),
    );
    if al.iter().chain(be).any(|&p| p < 0.0) {
        return Err(Error::Contract(
            "ptelu parameters must be non-negative".into(),
        ));
    }
    let ch = move |j: usize| (j / inner) % c;
    let out = xd
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if v >= 0.0 {
                v
            } else {
                al[ch(j)] * (be[ch(j)] * v).tanh()
            }
        })
        .collect();
    let value = Tensor::new(tape.shape(x).to_vec(), out)?;
    Ok(
        tape.record(value, &[x, alpha, beta], move |ctx: &BackwardCtx<'_>| {
            let (xd, al, be) = (
                ctx.inputs[0].data(),
                ctx.inputs[1].data(),
                ctx.inputs[2].data(),
            );
            let mut dx = vec![0.0; xd.len()];
            let mut da = vec![0.0; c];
            let mut db = vec![0.0; c];
            for (j, (&v, &g)) in xd.iter().zip(ctx.grad).enumerate() {
                if v >= 0.0 {
                    dx[j] = g;
                } else {
                    let k = ch(j);
                    let th = (be[k] * v).tanh();
                    let sech2 = 1.0 - th * th;
                    dx[j] = g * al[k] * be[k] * sech2;
                    da[k] += g * th;
                    db[k] += g * al[k] * v * sech2;
                }
            }
            vec![Some(dx), Some(da), Some(db)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{mul, sum};
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;

    fn scalar_act(kind: &ActivationKind, v: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
        let y = kind.forward(&mut tape, "a", x).unwrap();
        tape.value(y).data()[0]
    }

    #[test]
    fn definitions() {
        let relu = ActivationKind::ReLU;
        assert_eq!(scalar_act(&relu, -1.0), 0.0);
        assert_eq!(scalar_act(&relu, 2.0), 2.0);
        let prelu = ActivationKind::new(Activation::Prelu, 1).unwrap();
        assert_eq!(scalar_act(&prelu, -2.0), -0.5);
        let ptelu = ActivationKind::new(Activation::Ptelu, 1).unwrap();
        assert!((scalar_act(&ptelu, -1.0) - (-0.7615941559557649)).abs() < 1e-15);
        assert_eq!(scalar_act(&ptelu, 3.0), 3.0);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2], vec![-1.0, 2.0])
                .unwrap()
                .with_requires_grad(),
        );
        let y = relu(&mut tape, x).unwrap();
        let s = sum(&mut tape, y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn clamp_keeps_ptelu_nonnegative() {
        let mut a = ActivationKind::new(Activation::Ptelu, 2).unwrap();
        if let ActivationKind::PTELU { alpha, .. } = &mut a {
            alpha.data_mut()[0] = -0.3;
        }
        a.clamp_parameters();
        if let ActivationKind::PTELU { alpha, beta } = &a {
            assert_eq!(alpha.data(), &[0.0, 1.0]);
            assert_eq!(beta.data(), &[1.0, 1.0]);
        }
    }

    /// Inputs kept at least 0.05 away from the kink at zero.
    fn off_kink(shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::randn(shape, 1.0, rng).unwrap();
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v = 0.05f64.copysign(*v);
            }
        }
        t
    }

    #[test]
    fn gradients_off_kink() {
        let mut rng = Rng::new(21);
        let x = off_kink(&[2, 3, 4, 4], &mut rng);
        let mix = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng).unwrap();
        let slope = Tensor::new(vec![3], vec![0.25, 0.1, 0.6]).unwrap();
        let alpha = Tensor::new(vec![3], vec![1.0, 0.7, 1.3]).unwrap();
        let beta = Tensor::new(vec![3], vec![1.0, 1.5, 0.4]).unwrap();
        let project = |t: &mut Tape, y: Var| -> Result<Var> {
            let m = t.constant(mix.clone());
            let p = mul(t, y, m)?;
            sum(t, p)
        };
        let checks = [
            finite_diff_check(
                |t, v| {
                    let y = relu(t, v)?;
                    project(t, y)
                },
                &x,
                1e-4,
            ),
            finite_diff_check(
                |t, v| {
                    let a = t.constant(slope.clone());
                    let y = prelu(t, v, a)?;
                    project(t, y)
                },
                &x,
                1e-4,
            ),
            finite_diff_check(
                |t, v| {
                    let xx = t.constant(x.clone());
                    let y = prelu(t, xx, v)?;
                    project(t, y)
                },
                &slope,
                1e-4,
            ),
            finite_diff_check(
                |t, v| {
                    let (a, b) = (t.constant(alpha.clone()), t.constant(beta.clone()));
                    let y = ptelu(t, v, a, b)?;
                    project(t, y)
                },
                &x,
                1e-4,
            ),
            finite_diff_check(
                |t, v| {
                    let (xx, b) = (t.constant(x.clone()), t.constant(beta.clone()));
                    let y = ptelu(t, xx, v, b)?;
                    project(t, y)
                },
                &alpha,
                1e-4,
            ),
            finite_diff_check(
                |t, v| {
                    let (xx, a) = (t.constant(x.clone()), t.constant(alpha.clone()));
                    let y = ptelu(t, xx, a, v)?;
                    project(t, y)
                },
                &beta,
                1e-4,
            ),
        ];
        for (i, c) in checks.into_iter().enumerate() {
            let e = c.unwrap();
            assert!(e < 1e-6, "check {i}: {e}");
        }
    }
}
