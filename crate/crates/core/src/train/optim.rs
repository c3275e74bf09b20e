use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Module;

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `p ← p − lr·v`, one velocity per named parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Update every trainable tensor that carries a gradient, then clear the
    /// gradients.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let (lr, mu) = (self.learning_rate, self.momentum);
        let mut bad = None;
        model.visit_mut("", &mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                return;
            };
            if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
                bad = Some(name.clone());
            }
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = mu * *vi + gi;
                *p -= lr * *vi;
            }
            t.zero_grad();
        });
        match bad {
            Some(name) => Err(Error::Numeric(format!("non-finite gradient for {name}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One(Tensor);

    impl Module for One {
        fn visit(&self, _: &str, f: &mut dyn FnMut(String, &Tensor)) {
            f("w".into(), &self.0);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
            f("w".into(), &mut self.0);
        }
    }

    #[test]
    fn momentum_update() {
        let mut m = One(Tensor::new(vec![1], vec![1.0])
            .unwrap()
            .with_requires_grad());
        let mut opt = Sgd::new(0.1, 0.9);
        m.0.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut m).unwrap();
        assert!((m.0.data()[0] - 0.9).abs() < 1e-15);
        m.0.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut m).unwrap();
        // v = 0.9 + 1 = 1.9
        assert!((m.0.data()[0] - (0.9 - 0.19)).abs() < 1e-15);
        assert!(m.0.grad().is_none());
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let mut m = One(Tensor::new(vec![2], vec![1.0, -2.0])
            .unwrap()
            .with_requires_grad());
        let mut opt = Sgd::new(0.0, 0.9);
        for _ in 0..3 {
            m.0.accumulate_grad(&[5.0, 7.0]).unwrap();
            opt.step(&mut m).unwrap();
        }
        assert_eq!(m.0.data(), &[1.0, -2.0]);
    }
}
