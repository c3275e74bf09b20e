use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Post-processing applied to the second-order feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BilinearConfig {
    pub signed_sqrt: bool,
    pub l2: bool,
}

impl Default for BilinearConfig {
    fn default() -> Self {
        Self {
            signed_sqrt: true,
            l2: true,
        }
    }
}

/// Derivative floor for the signed square root at zero.
const SQRT_GRAD_FLOOR: f64 = 1e-8;

/// Per-sample `X·Xᵀ` where `X` is the `c×(h·w)` flattening of `x[n×c×h×w]`,
/// returned flattened as `[n × c²]`.
pub fn gram(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() < 2 {
        return Err(Error::Shape(format!("gram on shape {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let xd = tape.value(x).data();
    let mut out = vec![0.0; n * c * c];
    for i in 0..n {
        let xi = &xd[i * c * hw..(i + 1) * c * hw];
        gemm(
            false,
            true,
            c,
            c,
            hw,
            1.0,
            xi,
            xi,
            0.0,
            &mut out[i * c * c..(i + 1) * c * c],
        );
    }
    let value = Tensor::new(vec![n, c * c], out)?;
    Ok(tape.record(value, &[x], move |ctx: &BackwardCtx<'_>| {
        let xd = ctx.inputs[0].data();
        let mut dx = vec![0.0; xd.len()];
        let mut sym = vec![0.0; c * c];
        for i in 0..n {
            let g = &ctx.grad[i * c * c..(i + 1) * c * c];
            for a in 0..c {
                for b in 0..c {
                    sym[a * c + b] = g[a * c + b] + g[b * c + a];
                }
            }
            let xi = &xd[i * c * hw..(i + 1) * c * hw];
            gemm(
                false,
                false,
                c,
                hw,
                c,
                1.0,
                &sym,
                xi,
                0.0,
                &mut dx[i * c * hw..(i + 1) * c * hw],
            );
        }
        vec![Some(dx)]
    }))
}

/// Elementwise `sign(v)·sqrt(|v|)`.
pub fn signed_sqrt(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let out = t
        .data()
        .iter()
        .map(|v| v.signum() * v.abs().sqrt() * (*v != 0.0) as u8 as f64)
        .collect();
    let value = Tensor::new(t.shape().to_vec(), out)?;
    Ok(tape.record(value, &[x], |ctx: &BackwardCtx<'_>| {
        let xd = ctx.inputs[0].data();
        vec![Some(
            xd.iter()
                .zip(ctx.grad)
                .map(|(v, g)| g * 0.5 / v.abs().max(SQRT_GRAD_FLOOR).sqrt())
                .collect(),
        )]
    }))
}

/// Scale each row of `x[n×d]` to unit Euclidean norm. All-zero rows pass
/// through unchanged.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 2 {
        return Err(Error::Shape(format!("l2_normalize_rows on shape {s:?}")));
    }
    let d = s[1];
    let xd = tape.value(x).data();
    let norms: Vec<f64> = xd
        .chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = xd.to_vec();
    for (row, &nrm) in out.chunks_mut(d).zip(&norms) {
        if nrm > 0.0 {
            row.iter_mut().for_each(|v| *v /= nrm);
        } else {
            log::debug!("l2 normalisation skipped for an all-zero feature vector");
        }
    }
    let value = Tensor::new(s.to_vec(), out)?;
    Ok(tape.record(value, &[x], move |ctx: &BackwardCtx<'_>| {
        let y = ctx.output.data();
        let mut dx = ctx.grad.to_vec();
        for ((dxr, yr), &nrm) in dx.chunks_mut(d).zip(y.chunks(d)).zip(&norms) {
            if nrm > 0.0 {
                let dot: f64 = dxr.iter().zip(yr).map(|(g, y)| g * y).sum();
                dxr.iter_mut()
                    .zip(yr)
                    .for_each(|(g, y)| *g = (*g - y * dot) / nrm);
            }
        }
        vec![Some(dx)]
    }))
}

/// Second-order pooling: gram matrix per sample, then optional signed square
/// root and L2 normalisation, flattened to `[n × c²]`.
pub fn bilinear_pool(tape: &mut Tape, x: Var, cfg: BilinearConfig) -> Result<Var> {
    let mut y = gram(tape, x)?;
    if cfg.signed_sqrt {
        y = signed_sqrt(tape, y)?;
    }
    if cfg.l2 {
        y = l2_normalize_rows(tape, y)?;
    }
    Ok(y)
}
