use rayon::prelude::*;

use super::{he_normal, join, Module};
use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Weights of a zero-padded, strided cross-correlation.
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv kernel {kernel} and stride {stride} must be positive"
            )));
        }
        Ok(Self {
            weight: he_normal(
                &[out_ch, in_ch, kernel, kernel],
                in_ch * kernel * kernel,
                rng,
            )?,
            bias: Tensor::zeros(&[out_ch])?.with_requires_grad(),
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(&join(prefix, "weight"), &self.weight);
        let b = tape.param(&join(prefix, "bias"), &self.bias);
        conv2d(tape, x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2dParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel of (kernel offset, output position), if inside the image.
    #[inline]
    fn source(&self, ki: usize, oy: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        (y >= 0 && (y as usize) < self.h).then_some(y as usize)
    }

    #[inline]
    fn source_x(&self, kj: usize, ox: usize) -> Option<usize> {
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        (x >= 0 && (x as usize) < self.w).then_some(x as usize)
    }
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.rows() * cols];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let Some(y) = g.source(ki, oy) else { continue };
                    let src = &plane[y * g.w..(y + 1) * g.w];
                    for ox in 0..g.ow {
                        if let Some(xx) = g.source_x(kj, ox) {
                            dst[oy * g.ow + ox] = src[xx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols_buf: &[f64], g: &Geometry) -> Vec<f64> {
    let cols = g.cols();
    let mut out = vec![0.0; g.c * g.h * g.w];
    for ci in 0..g.c {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let Some(y) = g.source(ki, oy) else { continue };
                    for ox in 0..g.ow {
                        if let Some(xx) = g.source_x(kj, ox) {
                            plane[y * g.w + xx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of `x[n×c×h×w]` with `weight[o×c×kh×kw]` plus `bias[o]`.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let (xs, ws, bs) = (tape.shape(x), tape.shape(weight), tape.shape(bias));
    if xs.len() != 4 || ws.len() != 4 || bs != [ws[0]] || xs[1] != ws[1] {
        return Err(Error::Shape(format!(
            "conv2d: input {xs:?}, weight {ws:?}, bias {bs:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be at least 1".into()));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}×{kw} does not fit input {h}×{w} with padding {padding}"
        )));
    }
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    };
    let (xd, wd, bd) = (
        tape.value(x).data(),
        tape.value(weight).data(),
        tape.value(bias).data(),
    );
    let per_in = c * h * w;
    let per_out = o * g.cols();
    let outs: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cols = im2col(&xd[i * per_in..(i + 1) * per_in], &g);
            let mut y = Vec::with_capacity(per_out);
            for &bv in bd {
                y.extend(std::iter::repeat_n(bv, g.cols()));
            }
            gemm(
                false,
                false,
                o,
                g.cols(),
                g.rows(),
                1.0,
                wd,
                &cols,
                1.0,
                &mut y,
            );
            y
        })
        .collect();
    let value = Tensor::new(vec![n, o, g.oh, g.ow], outs.concat())?;

    Ok(
        tape.record(value, &[x, weight, bias], move |ctx: &BackwardCtx<'_>| {
            let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let need_x = ctx.needs[0];
            let need_w = ctx.needs[1];
            let parts: Vec<(Option<Vec<f64>>, Vec<f64>, Option<Vec<f64>>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let dy = &ctx.grad[i * per_out..(i + 1) * per_out];
                    let db: Vec<f64> = dy.chunks(g.cols()).map(|r| r.iter().sum()).collect();
                    let dw = need_w.then(|| {
                        let cols = im2col(&xd[i * per_in..(i + 1) * per_in], &g);
                        let mut dw = vec![0.0; o * g.rows()];
                        gemm(
                            false,
                            true,
                            o,
                            g.rows(),
                            g.cols(),
                            1.0,
                            dy,
                            &cols,
                            0.0,
                            &mut dw,
                        );
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dcols = vec![0.0; g.rows() * g.cols()];
                        gemm(
                            true,
                            false,
                            g.rows(),
                            g.cols(),
                            o,
                            1.0,
                            wd,
                            dy,
                            0.0,
                            &mut dcols,
                        );
                        col2im(&dcols, &g)
                    });
                    (dw, db, dx)
                })
                .collect();
            let mut dw_total = need_w.then(|| vec![0.0; o * g.rows()]);
            let mut db_total = vec![0.0; o];
            let mut dx_total = need_x.then(|| Vec::with_capacity(n * per_in));
            for (dw, db, dx) in parts {
                if let (Some(acc), Some(dw)) = (&mut dw_total, dw) {
                    acc.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                }
                db_total.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                if let (Some(acc), Some(dx)) = (&mut dx_total, dx) {
                    acc.extend_from_slice(&dx);
                }
            }
            vec![dx_total, dw_total, ctx.needs[2].then_some(db_total)]
        }),
    )
}
