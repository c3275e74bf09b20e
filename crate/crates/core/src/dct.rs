//! Orthonormal 2D DCT-II with cumulative-energy thresholding and signed log10
//! normalisation.
//!
//! The transform is a separable product with a cached basis matrix per size:
//! `C = D_h · X · D_wᵀ`, inverted by `X = D_hᵀ · C · D_w`.

use std::collections::HashMap;
use std::f64::consts::{LN_10, PI};
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DctConfig {
    /// Fraction of total energy the kept coefficients must reach, in (0, 1].
    pub energy_fraction: f64,
    /// Value written in place of dropped coefficients.
    pub replacement_value: f64,
    /// Magnitudes below this are clamped before the log; at least 1.
    pub log_clamp_floor: f64,
}

impl Default for DctConfig {
    fn default() -> Self {
        Self {
            energy_fraction: 0.95,
            replacement_value: 1.0,
            log_clamp_floor: 1.0,
        }
    }
}

impl DctConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_fraction > 0.0 && self.energy_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "energy_fraction {} must lie in (0, 1]",
                self.energy_fraction
            )));
        }
        if !(self.log_clamp_floor >= 1.0) {
            return Err(Error::Config(format!(
                "log_clamp_floor {} must be at least 1",
                self.log_clamp_floor
            )));
        }
        if !self.replacement_value.is_finite() {
            return Err(Error::Config("replacement_value must be finite".into()));
        }
        Ok(())
    }
}

type BasisCache = RwLock<HashMap<usize, Arc<Vec<f64>>>>;

fn cache() -> &'static BasisCache {
    static CACHE: OnceLock<BasisCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Row-major `n×n` basis `D[k][i] = α_k cos(π(2i+1)k / 2n)`.
pub fn dct_basis(n: usize) -> Arc<Vec<f64>> {
    if let Some(b) = cache().read().expect("dct cache poisoned").get(&n) {
        return Arc::clone(b);
    }
    let mut d = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            d[k * n + i] = alpha * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    let mut w = cache().write().expect("dct cache poisoned");
    Arc::clone(w.entry(n).or_insert_with(|| Arc::new(d)))
}

/// `a · x · bᵀ` (forward) or `aᵀ · x · b` (inverse) for one `h×w` plane.
fn separable(x: &[f64], h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let (dh, dw) = (dct_basis(h), dct_basis(w));
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    gemm(inverse, false, h, w, h, 1.0, &dh, x, 0.0, &mut tmp);
    gemm(false, !inverse, h, w, w, 1.0, &tmp, &dw, 0.0, &mut out);
    out
}

fn plane_dims(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        ref s => Err(Error::Shape(format!(
            "expected a non-empty h×w plane, got {s:?}"
        ))),
    }
}

pub fn dct2d(x: &Tensor) -> Result<Tensor> {
    let (h, w) = plane_dims(x)?;
    Tensor::new(vec![h, w], separable(x.data(), h, w, false))
}

pub fn idct2d(c: &Tensor) -> Result<Tensor> {
    let (h, w) = plane_dims(c)?;
    Tensor::new(vec![h, w], separable(c.data(), h, w, true))
}

/// Mask of the smallest magnitude-ranked prefix whose cumulative energy
/// reaches `fraction` of the total. Ties keep row-major order.
pub fn threshold_mask(c: &[f64], fraction: f64) -> Vec<bool> {
    if fraction >= 1.0 {
        return vec![true; c.len()];
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| (c[b] * c[b]).total_cmp(&(c[a] * c[a])));
    // accumulate in ranked order so the final partial sum equals the total
    let total: f64 = order.iter().map(|&i| c[i] * c[i]).sum();
    let mut mask = vec![false; c.len()];
    if total == 0.0 {
        log::debug!("energy threshold on an all-zero plane; every coefficient replaced");
        return mask;
    }
    let target = fraction * total;
    let mut acc = 0.0;
    for &i in &order {
        mask[i] = true;
        acc += c[i] * c[i];
        if acc >= target {
            break;
        }
    }
    mask
}

/// Keep the energy-ranked prefix and replace everything else.
pub fn energy_threshold(c: &Tensor, cfg: &DctConfig) -> Result<(Tensor, Vec<bool>)> {
    cfg.validate()?;
    let mask = threshold_mask(c.data(), cfg.energy_fraction);
    let data = c
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &k)| if k { v } else { cfg.replacement_value })
        .collect();
    Ok((Tensor::new(c.shape().to_vec(), data)?, mask))
}

fn signed_log(v: f64, floor: f64) -> f64 {
    let m = v.abs().max(floor).log10();
    if v < 0.0 {
        -m
    } else {
        m
    }
}

/// `sign(c) · log10(max(|c|, floor))` per element.
pub fn signed_log_normalize(c: &Tensor, cfg: &DctConfig) -> Tensor {
    let data = c
        .data()
        .iter()
        .map(|&v| signed_log(v, cfg.log_clamp_floor))
        .collect();
    Tensor::new(c.shape().to_vec(), data).expect("shape preserved")
}

/// Per sample and channel: DCT, energy threshold, signed log. The threshold
/// mask is constant within a pass; dropped and clamped coefficients pass no
/// gradient.
pub fn dct_layer_forward(tape: &mut Tape, x: Var, cfg: &DctConfig) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape(format!("dct layer on shape {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let xd = tape.value(x).data();
    let mut out = vec![0.0; xd.len()];
    // d(out)/d(coefficient), zero where dropped or clamped
    let mut slope = vec![0.0; xd.len()];
    for (p, xp) in xd.chunks(plane).enumerate() {
        let c = separable(xp, h, w, false);
        let mask = threshold_mask(&c, cfg.energy_fraction);
        for i in 0..plane {
            let j = p * plane + i;
            if mask[i] {
                out[j] = signed_log(c[i], cfg.log_clamp_floor);
                if c[i].abs() > cfg.log_clamp_floor {
                    slope[j] = 1.0 / (c[i].abs() * LN_10);
                }
            } else {
                out[j] = signed_log(cfg.replacement_value, cfg.log_clamp_floor);
            }
        }
    }
    let value = Tensor::new(s, out)?;
    Ok(tape.record(value, &[x], move |ctx: &BackwardCtx<'_>| {
        let mut dx = vec![0.0; ctx.grad.len()];
        for (p, (g, k)) in ctx.grad.chunks(plane).zip(slope.chunks(plane)).enumerate() {
            let gc: Vec<f64> = g.iter().zip(k).map(|(a, b)| a * b).collect();
            dx[p * plane..(p + 1) * plane].copy_from_slice(&separable(&gc, h, w, true));
        }
        vec![Some(dx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct evaluation of the DCT-II double sum.
    fn dct_oracle(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let a = |k: usize, n: usize| {
            if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            }
        };
        let mut c = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += x[i * w + j]
                            * (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                            * (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    }
                }
                c[u * w + v] = a(u, h) * a(v, w) * s;
            }
        }
        c
    }

    #[test]
    fn matches_direct_sum() {
        let x = Tensor::randn(&[8, 6], 3.0, &mut Rng::new(3)).unwrap();
        let c = dct2d(&x).unwrap();
        for (a, b) in c.data().iter().zip(dct_oracle(x.data(), 8, 6)) {
            assert!((a - b).abs() < 1e-10);
        }
        let back = idct2d(&c).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn constant_and_delta() {
        let x = Tensor::full(&[4, 4], 2.5).unwrap();
        let c = dct2d(&x).unwrap();
        assert!((c.data()[0] - 10.0).abs() < 1e-12);
        assert!(c.data()[1..].iter().all(|v| v.abs() < 1e-12));
        let mut d = vec![0.0; 16];
        d[0] = 4.0;
        let img = idct2d(&Tensor::new(vec![4, 4], d).unwrap()).unwrap();
        assert!(img.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let z = idct2d(&Tensor::zeros(&[3, 5]).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_examples() {
        let cfg = DctConfig::default();
        let c = Tensor::new(vec![1, 3], vec![10.0, 2.0, 0.5]).unwrap();
        let (out, mask) = energy_threshold(&c, &cfg).unwrap();
        assert_eq!(out.data(), &[10.0, 1.0, 1.0]);
        assert_eq!(mask, vec![true, false, false]);

        let all = DctConfig {
            energy_fraction: 1.0,
            ..cfg
        };
        let (out, _) = energy_threshold(&c, &all).unwrap();
        assert_eq!(out.data(), c.data());

        for n in [1usize, 3, 4, 10, 20, 40] {
            let mask = threshold_mask(&vec![2.0; n], 0.95);
            let kept = mask.iter().filter(|&&k| k).count();
            assert_eq!(kept, (0.95 * n as f64).ceil() as usize, "n = {n}");
            // ties are broken by row-major order
            assert!(mask[..kept].iter().all(|&k| k));
        }

        let (out, mask) = energy_threshold(&Tensor::zeros(&[2, 2]).unwrap(), &cfg).unwrap();
        assert!(mask.iter().all(|&k| !k));
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn log_examples() {
        let cfg = DctConfig::default();
        let t = Tensor::new(vec![4], vec![100.0, -1000.0, 1.0, -0.5]).unwrap();
        let y = signed_log_normalize(&t, &cfg);
        assert_eq!(y.data()[0], 2.0);
        assert_eq!(y.data()[1], -3.0);
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[3], 0.0);
    }

    #[test]
    fn layer_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.75).unwrap());
        let y = dct_layer_forward(&mut tape, x, &DctConfig::default()).unwrap();
        for ch in tape.value(y).data().chunks(16) {
            assert!((ch[0] - 3f64.log10()).abs() < 1e-12);
            assert!(ch[1..].iter().all(|v| v.abs() < 1e-12));
        }
        let z = tape.constant(Tensor::zeros(&[2, 3, 5, 5]).unwrap());
        let y = dct_layer_forward(&mut tape, z, &DctConfig::default()).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let bad = DctConfig {
            energy_fraction: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = DctConfig {
            log_clamp_floor: 0.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
