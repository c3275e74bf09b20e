//! Layers of the basic network.
//!
//! Each operation is a free function over tape variables (`conv2d`,
//! `maxpool2d`, ...). The parameter structs (`Conv2dParams`,
//! `BatchNormParams`, ...) own their tensors and bind them to a tape under a
//! dotted name, so gradients can be collected by name after backward.

mod activation;
mod bilinear;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{prelu, ptelu, relu, Activation, ActivationKind};
pub use bilinear::{bilinear_pool, gram, l2_normalize_rows, signed_sqrt, BilinearConfig};
pub use conv::{conv2d, Conv2dParams};
pub use linear::{linear, LinearParams};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_weighted};
pub use norm::{batchnorm2d_eval, batchnorm2d_train, BatchNormParams, BatchStats};
pub use pool::maxpool2d;

use crate::autograd::Tape;
use crate::error::Result;
use crate::tensor::Tensor;

/// Anything that owns named tensors (trainable parameters and buffers).
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

/// Dotted parameter name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Every tensor of a module with its full name, in visiting order.
pub fn named_tensors<M: Module + ?Sized>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name, t.detached())));
    out
}

pub fn parameter_count<M: Module + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| {
        if t.requires_grad() {
            n += t.len();
        }
    });
    n
}

/// Move gradients of the module's parameters from `tape` onto the tensors.
pub fn accumulate_grads<M: Module + ?Sized>(m: &mut M, tape: &Tape) -> Result<()> {
    let mut result = Ok(());
    m.visit_mut("", &mut |name, t| {
        if result.is_err() || !t.requires_grad() {
            return;
        }
        if let Some(g) = tape.param_grad(&name) {
            result = t.accumulate_grad(g);
        }
    });
    result
}

pub fn zero_grads<M: Module + ?Sized>(m: &mut M) {
    m.visit_mut("", &mut |_, t| t.zero_grad());
}

/// Freeze or unfreeze every trainable tensor. Buffers stay untouched.
pub fn set_trainable<M: Module + ?Sized>(
    m: &mut M,
    trainable: bool,
    is_buffer: impl Fn(&str) -> bool,
) {
    m.visit_mut("", &mut |name, t| {
        if !is_buffer(&name) {
            t.set_requires_grad(trainable);
        }
    });
}

/// He-style fan-in scaled normal initialisation.
pub(crate) fn he_normal(
    shape: &[usize],
    fan_in: usize,
    rng: &mut crate::rng::Rng,
) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    Ok(Tensor::randn(shape, std, rng)?.with_requires_grad())
}
