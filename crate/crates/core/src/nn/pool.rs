use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling over `window×window` patches with the given stride.
///
/// Backward routes each output gradient to the first maximal element of its
/// window in row-major order.
pub fn maxpool2d(tape: &mut Tape, x: Var, window: usize, stride: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::Shape(format!("maxpool2d on shape {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::Shape(format!(
            "maxpool2d: window {window} (stride {stride}) does not fit {h}×{w}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let xd = tape.value(x).data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let j = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let len = xd.len();
    let value = Tensor::new(vec![n, c, oh, ow], out)?;
    Ok(tape.record(value, &[x], move |ctx: &BackwardCtx<'_>| {
        let mut dx = vec![0.0; len];
        for (&j, g) in argmax.iter().zip(ctx.grad) {
            dx[j] += g;
        }
        vec![Some(dx)]
    }))
}
