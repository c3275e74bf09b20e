use serde::{Deserialize, Serialize};

use super::canvas::BLANK;
use crate::config::AugmentMode;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotate by an angle drawn uniformly from [0, 360) degrees.
    pub rotation: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Horizontal shear angle range in degrees.
    pub shear_degrees: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub mode: AugmentMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            shear_degrees: [-20.0, 20.0],
            blur_sigma: [0.0, 0.75],
            mode: AugmentMode::None,
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub shear_deg: f64,
    pub sigma: f64,
}

impl AugmentConfig {
    /// Every transform degenerate: the identity map.
    pub fn identity() -> Self {
        Self {
            rotation: false,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            shear_degrees: [0.0, 0.0],
            blur_sigma: [0.0, 0.0],
            mode: AugmentMode::None,
        }
    }

    pub fn with_mode(mode: AugmentMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.shear_degrees;
        let [b0, b1] = self.blur_sigma;
        if !(s0 <= s1) || s0 <= -90.0 || s1 >= 90.0 {
            return Err(Error::Config(format!(
                "shear range [{s0}, {s1}] must be ordered inside (-90, 90)"
            )));
        }
        if !(b0 <= b1) || b0 < 0.0 {
            return Err(Error::Config(format!(
                "blur sigma range [{b0}, {b1}] must be ordered and non-negative"
            )));
        }
        for p in [self.hflip_prob, self.vflip_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "flip probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Draw parameters in a fixed order so a stream gives the same result
    /// whatever transforms are enabled.
    pub fn sample(&self, rng: &mut Rng) -> AugmentParams {
        let rot = rng.uniform_in(0.0, 360.0);
        let h = rng.uniform();
        let v = rng.uniform();
        let shear = rng.uniform_in(self.shear_degrees[0], self.shear_degrees[1]);
        let sigma = rng.uniform_in(self.blur_sigma[0], self.blur_sigma[1]);
        AugmentParams {
            rotation_deg: if self.rotation { rot } else { 0.0 },
            hflip: h < self.hflip_prob,
            vflip: v < self.vflip_prob,
            shear_deg: shear,
            sigma,
        }
    }
}

/// Rotation, flips, shear and blur in that order, then clamp to `[0, 255]`.
pub fn augment(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    apply_augment(img, &cfg.sample(rng))
}

pub fn apply_augment(img: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let dims = planes(img)?;
    let mut out = img.clone();
    if p.rotation_deg != 0.0 {
        out = rotate(&out, p.rotation_deg)?;
    }
    if p.hflip {
        out = hflip(&out)?;
    }
    if p.vflip {
        out = vflip(&out)?;
    }
    if p.shear_deg != 0.0 {
        out = shear(&out, p.shear_deg)?;
    }
    if p.sigma >= 1e-6 {
        out = gaussian_blur(&out, p.sigma)?;
    }
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 255.0));
    debug_assert_eq!(planes(&out)?, dims);
    Ok(out)
}

/// `(planes, h, w)` of a `c×h×w` image.
fn planes(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected a c×h×w image, got {s:?}"))),
    }
}

/// Bilinear read with blank fill outside the image.
fn sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            BLANK
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let k = wy * wx;
            if k != 0.0 {
                v += k * at(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Resample each plane through an inverse map from output to source coordinates.
fn warp(img: &Tensor, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = planes(img)?;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = inverse(y as f64, x as f64);
                out[ch * h * w + y * w + x] = sample(src, h, w, sy, sx);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Counter-clockwise rotation about the image centre.
pub fn rotate(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (_, h, w) = planes(img)?;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    warp(img, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        // inverse of a counter-clockwise turn on screen (y grows downwards)
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    })
}

/// Horizontal shear about the centre row: `x' = x + tan(θ)·(y − cy)`.
pub fn shear(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (_, h, _) = planes(img)?;
    let cy = (h as f64 - 1.0) / 2.0;
    let t = degrees.to_radians().tan();
    warp(img, |y, x| (y, x - t * (y - cy)))
}

pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = planes(img)?;
    let d = img.data();
    let out = (0..c * h * w)
        .map(|i| {
            let (row, x) = (i / w, i % w);
            d[row * w + (w - 1 - x)]
        })
        .collect();
    Tensor::new(vec![c, h, w], out)
}

pub fn vflip(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = planes(img)?;
    let d = img.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            out.extend_from_slice(&d[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Normalised Gaussian taps truncated at three standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = planes(img)?;
    if sigma < 1e-6 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let d = img.data();
    let mut tmp = vec![0.0; d.len()];
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * d[base + y * w + clampi(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[base + clampi(y as isize + j as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}
