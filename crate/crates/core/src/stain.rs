//! Optical density conversion and the trainable stain deconvolution layer.

use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{det3, inv3, mat3_from_slice, mat3_mul, mat3_to_vec, transpose3, Mat3};
use crate::nn::Module;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Incident light intensity.
pub const WHITE: f64 = 255.0;
/// Below this |det| the stain matrix counts as singular.
pub const SINGULAR_DET: f64 = 1e-8;
const NUDGE: f64 = 1e-3;

/// Bundled constants for the standard stain matrix.
pub const STANDARD_STAIN_FILE: &str = include_str!("../data/stain_matrix.txt");

/// `−log10(max(I, 1) / 255)` per element.
pub fn rgb_to_od(x: &Tensor) -> Result<Tensor> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=WHITE).contains(*v)) {
        return Err(Error::Range(format!("intensity {v} outside [0, 255]")));
    }
    let data = x
        .data()
        .iter()
        .map(|&i| -(i.max(1.0) / WHITE).log10())
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `255 · 10^(−od)`, the inverse of [`rgb_to_od`] on `[1, 255]`.
pub fn od_to_rgb(od: &Tensor) -> Result<Tensor> {
    if let Some(v) = od.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Range(format!("optical density {v} is negative")));
    }
    let data = od.data().iter().map(|&d| WHITE * 10f64.powf(-d)).collect();
    Tensor::new(od.shape().to_vec(), data)
}

/// Per-pixel `q = v · m⁻¹` for `od[n×3×h×w]` and `m[3×3]`.
pub fn sd_forward(tape: &mut Tape, od: Var, m: Var) -> Result<Var> {
    let s = tape.shape(od);
    if s.len() != 4 || s[1] != 3 || tape.shape(m) != [3, 3] {
        return Err(Error::Shape(format!(
            "sd_forward: od {s:?}, matrix {:?}",
            tape.shape(m)
        )));
    }
    let (n, hw) = (s[0], s[2] * s[3]);
    let mm = mat3_from_slice(tape.value(m).data());
    let det = det3(&mm);
    if det.abs() < SINGULAR_DET {
        return Err(Error::Singular { det: det.abs() });
    }
    let inv = inv3(&mm);
    let out = apply_per_pixel(tape.value(od).data(), &inv, n, hw);
    let value = Tensor::new(s.to_vec(), out)?;
    Ok(tape.record(value, &[od, m], move |ctx: &BackwardCtx<'_>| {
        let dq = ctx.grad;
        let dod = ctx.needs[0].then(|| apply_per_pixel(dq, &transpose3(&inv), n, hw));
        let dm = ctx.needs[1].then(|| {
            let v = ctx.inputs[0].data();
            // dinv[i][j] = Σ v_i dq_j over all pixels
            let mut dinv = [[0.0; 3]; 3];
            for b in 0..n {
                let base = b * 3 * hw;
                for i in 0..3 {
                    for j in 0..3 {
                        let vi = &v[base + i * hw..base + (i + 1) * hw];
                        let gj = &dq[base + j * hw..base + (j + 1) * hw];
                        dinv[i][j] += vi.iter().zip(gj).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            let it = transpose3(&inv);
            let dm = mat3_mul(&mat3_mul(&it, &dinv), &it);
            mat3_to_vec(&dm).into_iter().map(|v| -v).collect()
        });
        vec![dod, dm]
    }))
}

/// `out[:, j] = Σ_i x[:, i] · a[i][j]` for every pixel of a planar 3-channel batch.
fn apply_per_pixel(x: &[f64], a: &Mat3, n: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * 3 * hw;
        for p in 0..hw {
            let v = [x[base + p], x[base + hw + p], x[base + 2 * hw + p]];
            for j in 0..3 {
                out[base + j * hw + p] = v[0] * a[0][j] + v[1] * a[1][j] + v[2] * a[2][j];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StainInit {
    #[default]
    Standard,
    Identity,
    SeededRandom,
}

impl std::str::FromStr for StainInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "standard-stain" => Ok(StainInit::Standard),
            "identity" => Ok(StainInit::Identity),
            "seeded-random" | "random" => Ok(StainInit::SeededRandom),
            other => Err(Error::Config(format!("unknown stain init '{other}'"))),
        }
    }
}

/// Trainable 3×3 stain matrix; each row is one stain's OD colour direction.
#[derive(Clone, Debug)]
pub struct StainMatrix {
    pub m: Tensor,
}

impl StainMatrix {
    pub fn from_rows(m: Mat3) -> Result<Self> {
        Ok(Self {
            m: Tensor::new(vec![3, 3], mat3_to_vec(&m))?.with_requires_grad(),
        })
    }

    pub fn matrix(&self) -> Mat3 {
        mat3_from_slice(self.m.data())
    }

    pub fn det(&self) -> f64 {
        det3(&self.matrix())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.m.set_requires_grad(!frozen);
    }

    pub fn is_frozen(&self) -> bool {
        !self.m.requires_grad()
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, od: Var) -> Result<Var> {
        let m = tape.param(&crate::nn::join(prefix, "m"), &self.m);
        sd_forward(tape, od, m)
    }

    /// Keep the matrix invertible after an optimiser step. Returns whether
    /// the diagonal was nudged.
    pub fn enforce_invertible(&mut self) -> bool {
        let det = self.det();
        if det.abs() >= SINGULAR_DET {
            return false;
        }
        log::warn!(
            "stain matrix |det| = {:.3e}; nudging the diagonal",
            det.abs()
        );
        let d = self.m.data_mut();
        for i in 0..3 {
            d[i * 3 + i] += NUDGE;
        }
        true
    }
}

impl Module for StainMatrix {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(crate::nn::join(prefix, "m"), &self.m);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(crate::nn::join(prefix, "m"), &mut self.m);
    }
}

/// Parse a plain-text file of 9 numbers (row-major); `#` starts a comment.
pub fn parse_stain_file(text: &str) -> Result<Mat3> {
    let mut vals = Vec::with_capacity(9);
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Config(format!("stain file: bad number '{tok}'")))?;
            vals.push(v);
        }
    }
    if vals.len() != 9 {
        return Err(Error::Config(format!(
            "stain file holds {} numbers, expected 9",
            vals.len()
        )));
    }
    Ok(mat3_from_slice(&vals))
}

pub fn init_stain_matrix(scheme: StainInit, rng: &mut Rng) -> Result<StainMatrix> {
    let m = match scheme {
        StainInit::Standard => parse_stain_file(STANDARD_STAIN_FILE)?,
        StainInit::Identity => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        StainInit::SeededRandom => loop {
            let mut m = [[0.0; 3]; 3];
            for row in &mut m {
                for v in row.iter_mut() {
                    *v = rng.uniform();
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
            if det3(&m).abs() >= 0.1 {
                break m;
            }
        },
    };
    StainMatrix::from_rows(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{mul, sum};
    use crate::gradcheck::finite_diff_check;

    #[test]
    fn od_examples() {
        let x = Tensor::new(vec![3], vec![255.0, 25.5, 0.0]).unwrap();
        let od = rgb_to_od(&x).unwrap();
        assert_eq!(od.data()[0], 0.0);
        assert!((od.data()[1] - 1.0).abs() < 1e-15);
        assert!((od.data()[2] - 255f64.log10()).abs() < 1e-15);
        assert!((od.data()[2] - 2.40654).abs() < 1e-5);
        let back = od_to_rgb(&Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(back.data()[0], 255.0);
        assert!((back.data()[1] - 25.5).abs() < 1e-12);
    }

    #[test]
    fn od_range_errors() {
        assert!(matches!(
            rgb_to_od(&Tensor::new(vec![1], vec![256.0]).unwrap()),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            rgb_to_od(&Tensor::new(vec![1], vec![-1.0]).unwrap()),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            od_to_rgb(&Tensor::new(vec![1], vec![-0.1]).unwrap()),
            Err(Error::Range(_))
        ));
    }

    fn run_sd(od: &Tensor, m: Mat3) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(od.clone());
        let mv = tape.constant(Tensor::new(vec![3, 3], mat3_to_vec(&m)).unwrap());
        let y = sd_forward(&mut tape, x, mv)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn sd_identity_and_scaled() {
        let od = Tensor::rand_uniform(&[2, 3, 4, 5], 0.0, 2.4, &mut Rng::new(1)).unwrap();
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(run_sd(&od, id).unwrap().max_abs_diff(&od) <= 1e-12);
        let two = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let half = run_sd(&od, two).unwrap();
        for (a, b) in half.data().iter().zip(od.data()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sd_round_trip() {
        let mut rng = Rng::new(4);
        let od = Tensor::rand_uniform(&[2, 3, 3, 3], 0.0, 2.4, &mut rng).unwrap();
        let m = init_stain_matrix(StainInit::SeededRandom, &mut rng)
            .unwrap()
            .matrix();
        let q = run_sd(&od, m).unwrap();
        let back = apply_per_pixel(q.data(), &m, 2, 9);
        for (a, b) in back.iter().zip(od.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn sd_singular() {
        let od = Tensor::zeros(&[1, 3, 1, 1]).unwrap();
        let m = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]];
        assert!(matches!(run_sd(&od, m), Err(Error::Singular { .. })));
    }

    #[test]
    fn init_schemes() {
        let id = init_stain_matrix(StainInit::Identity, &mut Rng::new(0)).unwrap();
        assert_eq!(id.m.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = init_stain_matrix(StainInit::SeededRandom, &mut Rng::new(9)).unwrap();
        let b = init_stain_matrix(StainInit::SeededRandom, &mut Rng::new(9)).unwrap();
        assert_eq!(a.m.data(), b.m.data());
        assert!(a.det().abs() >= 0.1);
        assert!(a.m.data().iter().all(|&v| v >= 0.0));
        let std = init_stain_matrix(StainInit::Standard, &mut Rng::new(0)).unwrap();
        let golden = [
            0.650, 0.704, 0.286, 0.072, 0.990, 0.105, 0.268, 0.570, 0.776,
        ];
        assert_eq!(std.m.data(), &golden);
    }

    #[test]
    fn nudge_restores_invertibility() {
        let mut s = StainMatrix::from_rows([[0.0; 3]; 3]).unwrap();
        assert!(s.enforce_invertible());
        assert!(s.det().abs() > 0.0);
        let mut ok = init_stain_matrix(StainInit::Identity, &mut Rng::new(0)).unwrap();
        assert!(!ok.enforce_invertible());
    }

    #[test]
    fn sd_gradients() {
        let mut rng = Rng::new(12);
        let od = Tensor::rand_uniform(&[2, 3, 3, 4], 0.0, 2.0, &mut rng).unwrap();
        let m = Tensor::new(
            vec![3, 3],
            mat3_to_vec(
                &init_stain_matrix(StainInit::SeededRandom, &mut rng)
                    .unwrap()
                    .matrix(),
            ),
        )
        .unwrap();
        let mix = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut rng).unwrap();
        let f = |t: &mut Tape, x: Var, m: Var| -> Result<Var> {
            let y = sd_forward(t, x, m)?;
            let c = t.constant(mix.clone());
            let p = mul(t, y, c)?;
            sum(t, p)
        };
        let ex = finite_diff_check(
            |t, v| {
                let mv = t.constant(m.clone());
                f(t, v, mv)
            },
            &od,
            1e-5,
        )
        .unwrap();
        let em = finite_diff_check(
            |t, v| {
                let x = t.constant(od.clone());
                f(t, x, v)
            },
            &m,
            1e-5,
        )
        .unwrap();
        assert!(ex < 1e-4 && em < 1e-4, "{ex} {em}");
    }
}
