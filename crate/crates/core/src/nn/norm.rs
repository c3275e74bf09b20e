use super::{join, Module};
use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel batch normalisation state.
///
/// `running_var` tracks the unbiased batch variance, as in most frameworks;
/// the normalisation itself uses the biased variance.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics from one training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Number of values averaged per channel.
    pub count: usize,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], 1.0)?.with_requires_grad(),
            beta: Tensor::zeros(&[channels])?.with_requires_grad(),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with("running_mean") || name.ends_with("running_var")
    }

    /// Training mode: normalise with batch statistics and fold them into the
    /// running averages.
    pub fn forward_train(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(&join(prefix, "gamma"), &self.gamma);
        let b = tape.param(&join(prefix, "beta"), &self.beta);
        let (y, stats) = batchnorm2d_train(tape, x, g, b, self.eps)?;
        self.update_running(&stats);
        Ok(y)
    }

    pub fn forward_eval(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(&join(prefix, "gamma"), &self.gamma);
        let b = tape.param(&join(prefix, "beta"), &self.beta);
        batchnorm2d_eval(
            tape,
            x,
            g,
            b,
            self.running_mean.data(),
            self.running_var.data(),
            self.eps,
        )
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
    }
}

impl Module for BatchNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

fn layout(tape: &Tape, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
    let s = tape.shape(x);
    if s.len() < 2 {
        return Err(Error::Shape(format!("batchnorm on shape {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::Shape(format!(
            "batchnorm: {c} channels but gamma {:?}, beta {:?}",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    Ok((n, c, inner))
}

/// Normalise each channel of `x[n×c×…]` with its batch mean and biased variance.
pub fn batchnorm2d_train(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats)> {
    let (n, c, inner) = layout(tape, x, gamma, beta)?;
    let count = n * inner;
    if count < 2 {
        return Err(Error::Contract(format!(
            "batchnorm training needs at least 2 values per channel, got {count}"
        )));
    }
    let xd = tape.value(x).data();
    let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let s = &xd[(i * c + ch) * inner..(i * c + ch + 1) * inner];
            mean[ch] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for i in 0..n {
        for ch in 0..c {
            let s = &xd[(i * c + ch) * inner..(i * c + ch + 1) * inner];
            var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * inner;
            for j in base..base + inner {
                xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                y[j] = gd[ch] * xhat[j] + bd[ch];
            }
        }
    }
    let value = Tensor::new(tape.shape(x).to_vec(), y)?;
    let stats = BatchStats { mean, var, count };
    let out = tape.record(value, &[x, gamma, beta], move |ctx: &BackwardCtx<'_>| {
        let gd = ctx.inputs[1].data();
        let dy = ctx.grad;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    sum_dy[ch] += dy[j];
                    sum_dy_xhat[ch] += dy[j] * xhat[j];
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let m = count as f64;
            let mut dx = vec![0.0; dy.len()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * inner;
                    let k = gd[ch] * inv_std[ch] / m;
                    for j in base..base + inner {
                        dx[j] = k * (m * dy[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
                    }
                }
            }
            dx
        });
        vec![dx, Some(sum_dy_xhat), Some(sum_dy)]
    });
    Ok((out, stats))
}

/// Fixed affine map using running statistics.
pub fn batchnorm2d_eval(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Var> {
    let (n, c, inner) = layout(tape, x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape("batchnorm: running statistics length".into()));
    }
    let xd = tape.value(x).data();
    let (gd, bd) = (tape.value(gamma).data(), tape.value(beta).data());
    let mean = running_mean.to_vec();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; xd.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * inner;
            for j in base..base + inner {
                y[j] = gd[ch] * (xd[j] - mean[ch]) * inv_std[ch] + bd[ch];
            }
        }
    }
    let value = Tensor::new(tape.shape(x).to_vec(), y)?;
    Ok(
        tape.record(value, &[x, gamma, beta], move |ctx: &BackwardCtx<'_>| {
            let (xd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dy = ctx.grad;
            let mut dx = vec![0.0; dy.len()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * inner;
                    for j in base..base + inner {
                        dx[j] = dy[j] * gd[ch] * inv_std[ch];
                        dg[ch] += dy[j] * (xd[j] - mean[ch]) * inv_std[ch];
                        db[ch] += dy[j];
                    }
                }
            }
            vec![ctx.needs[0].then_some(dx), Some(dg), Some(db)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{mul, sum};
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;

    fn train_value(x: Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = gamma.len();
        let x = tape.constant(x);
        let g = tape.constant(Tensor::new(vec![c], gamma.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![c], beta.to_vec()).unwrap());
        let (y, _) = batchnorm2d_train(&mut tape, x, g, b, eps)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let y = train_value(
            Tensor::full(&[2, 1, 3, 3], 4.0).unwrap(),
            &[1.0],
            &[0.0],
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut Rng::new(1)).unwrap();
        let y = train_value(x, &[0.0, 0.0], &[0.5, -2.0], 1e-5).unwrap();
        for (j, v) in y.data().iter().enumerate() {
            let ch = (j / 4) % 2;
            assert_eq!(*v, [0.5, -2.0][ch]);
        }
    }

    #[test]
    fn two_values_map_to_plus_minus_one() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = train_value(x, &[1.0], &[0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            train_value(x, &[1.0], &[0.0], 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn eval_is_pure_and_repeatable() {
        let mut p = BatchNormParams::new(2).unwrap();
        let x = Tensor::randn(&[4, 2, 3, 3], 1.0, &mut Rng::new(2)).unwrap();
        {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            p.forward_train(&mut tape, "bn", xv).unwrap();
        }
        let before = (p.running_mean.clone(), p.running_var.clone());
        let run = |p: &BatchNormParams| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = p.forward_eval(&mut tape, "bn", xv).unwrap();
            tape.value(y).clone()
        };
        let a = run(&p);
        let b = run(&p);
        assert_eq!(a, b);
        assert_eq!(before, (p.running_mean.clone(), p.running_var.clone()));
    }

    #[test]
    fn running_statistics_update() {
        let mut p = BatchNormParams::new(1).unwrap();
        p.momentum = 0.5;
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        p.forward_train(&mut tape, "bn", xv).unwrap();
        // mean 2, unbiased variance 2
        assert_eq!(p.running_mean.data(), &[1.0]);
        assert_eq!(p.running_var.data(), &[1.5]);
    }

    #[test]
    fn training_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng).unwrap();
        let gamma = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
        let beta = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
        let mix = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng).unwrap();
        let f = |t: &mut Tape, x: Var, g: Var, b: Var| -> Result<Var> {
            let (y, _) = batchnorm2d_train(t, x, g, b, 1e-5)?;
            let m = t.constant(mix.clone());
            let p = mul(t, y, m)?;
            sum(t, p)
        };
        let ex = finite_diff_check(
            |t, v| {
                let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                f(t, v, g, b)
            },
            &x,
            1e-4,
        )
        .unwrap();
        let eg = finite_diff_check(
            |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(beta.clone()));
                f(t, x, v, b)
            },
            &gamma,
            1e-4,
        )
        .unwrap();
        assert!(ex < 1e-5 && eg < 1e-6, "{ex} {eg}");
    }
}
