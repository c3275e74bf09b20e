//! Seeded two-class synthetic cell images.
//!
//! Each image is a white canvas holding one cell: a faint eosin-stained
//! cytoplasm ellipse around a haematoxylin-rich nucleus. Optical densities
//! combine linearly through the standard stain vectors. The classes differ in
//! two ways:
//!
//! - chromatin texture: Normal nuclei carry coarse, low-frequency modulation,
//!   Cancer nuclei fine, high-frequency grain (band-limited random waves);
//! - stain mixture: Cancer nuclei take up slightly more eosin.
//!
//! Per-subject jitter in stain density, mixture, cell size and texture
//! strength is larger than the colour gap between classes, so the mean
//! colour of an image says little about its class while the texture does.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::canvas::write_png;
use super::manifest::{DatasetManifest, Label, Record};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stain::{parse_stain_file, STANDARD_STAIN_FILE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects_per_class: usize,
    pub cells_per_subject: usize,
    /// Canvas side in pixels, at least 32.
    pub size: usize,
    /// Subjects per class flagged as held-out test data.
    pub test_subjects_per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects_per_class: 8,
            cells_per_subject: 100,
            size: 96,
            test_subjects_per_class: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!(
                "synthetic image size {} is below 32",
                self.size
            )));
        }
        if self.subjects_per_class == 0 || self.cells_per_subject == 0 {
            return Err(Error::Config(
                "need at least one subject and one cell".into(),
            ));
        }
        if self.test_subjects_per_class >= self.subjects_per_class {
            return Err(Error::Config(format!(
                "{} test subjects leave no training subjects out of {}",
                self.test_subjects_per_class, self.subjects_per_class
            )));
        }
        Ok(())
    }
}

/// Appearance parameters shared by all cells of one subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectStyle {
    pub label: Label,
    /// Haematoxylin optical density of the nucleus.
    pub density: f64,
    /// Eosin taken up by the nucleus, relative to haematoxylin.
    pub eosin_ratio: f64,
    pub cytoplasm_density: f64,
    pub radius_scale: f64,
    pub texture_amp: f64,
    /// Texture frequency band in cycles per pixel at a 96-pixel canvas.
    pub band: (f64, f64),
}

const NORMAL_BAND: (f64, f64) = (0.025, 0.06);
const CANCER_BAND: (f64, f64) = (0.16, 0.28);
const WAVES: usize = 10;

pub fn subject_style(label: Label, rng: &mut Rng) -> SubjectStyle {
    let (band, eosin) = match label {
        Label::Normal => (NORMAL_BAND, 0.30),
        Label::Cancer => (CANCER_BAND, 0.38),
    };
    SubjectStyle {
        label,
        density: rng.uniform_in(0.45, 0.9),
        eosin_ratio: eosin + rng.uniform_in(-0.12, 0.12),
        cytoplasm_density: rng.uniform_in(0.05, 0.15),
        radius_scale: rng.uniform_in(0.8, 1.2),
        texture_amp: rng.uniform_in(0.25, 0.4),
        band,
    }
}

/// Render one `3×size×size` cell image in intensity units.
pub fn render_cell(style: &SubjectStyle, size: usize, rng: &mut Rng) -> Tensor {
    let stains = parse_stain_file(STANDARD_STAIN_FILE).expect("bundled stain file parses");
    let (hem, eos) = (stains[0], stains[1]);
    let s = size as f64;
    let r0 = 0.28 * s * style.radius_scale;
    let (ra, rb) = (
        r0 * rng.uniform_in(0.85, 1.15),
        r0 * rng.uniform_in(0.85, 1.15),
    );
    let theta = rng.uniform_in(0.0, PI);
    let (cy, cx) = (
        (s - 1.0) / 2.0 + rng.uniform_in(-0.04, 0.04) * s,
        (s - 1.0) / 2.0 + rng.uniform_in(-0.04, 0.04) * s,
    );
    let density = style.density * rng.uniform_in(0.9, 1.1);
    let freq_scale = 96.0 / s;
    let waves: Vec<(f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let f = rng.uniform_in(style.band.0, style.band.1) * freq_scale * 2.0 * PI;
            let dir = rng.uniform_in(0.0, 2.0 * PI);
            (f * dir.cos(), f * dir.sin(), rng.uniform_in(0.0, 2.0 * PI))
        })
        .collect();
    let norm = style.texture_amp / (WAVES as f64 / 2.0).sqrt();
    let (sin_t, cos_t) = theta.sin_cos();
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = (dx * cos_t + dy * sin_t) / ra;
            let v = (-dx * sin_t + dy * cos_t) / rb;
            let r = (u * u + v * v).sqrt();
            let mut od = [
                rng.normal() * 0.004,
                rng.normal() * 0.004,
                rng.normal() * 0.004,
            ];
            let cyto = 1.0 - smoothstep(1.25, 1.4, r);
            let nucleus = 1.0 - smoothstep(0.9, 1.0, r);
            if nucleus > 0.0 {
                let t: f64 = waves
                    .iter()
                    .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                let h = nucleus * density * (1.0 + norm * t).max(0.0);
                for c in 0..3 {
                    od[c] += h * hem[c] + h * style.eosin_ratio * eos[c];
                }
            }
            if cyto > 0.0 {
                for c in 0..3 {
                    od[c] += cyto * style.cytoplasm_density * eos[c];
                }
            }
            for c in 0..3 {
                img[c * plane + y * size + x] =
                    (255.0 * 10f64.powf(-od[c].max(0.0))).clamp(0.0, 255.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], img).expect("sized buffer")
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn subject_id(label: Label, i: usize) -> String {
    match label {
        Label::Normal => format!("N{i:02}"),
        Label::Cancer => format!("C{i:02}"),
    }
}

/// Subjects in generation order with their styles and cell streams.
fn plan(cfg: &SynthConfig, rng: &Rng) -> Vec<(String, SubjectStyle, Rng, bool)> {
    let mut out = Vec::new();
    for (ci, label) in Label::ALL.into_iter().enumerate() {
        for i in 0..cfg.subjects_per_class {
            let stream = rng.derive((ci * 10_000 + i) as u64);
            let style = subject_style(label, &mut stream.derive(0));
            let is_test = i >= cfg.subjects_per_class - cfg.test_subjects_per_class;
            out.push((subject_id(label, i), style, stream, is_test));
        }
    }
    out
}

/// Render every image in memory: `(record, image)` in manifest order.
pub fn synth_images(cfg: &SynthConfig, rng: &Rng) -> Result<Vec<(Record, Tensor)>> {
    cfg.validate()?;
    let subjects = plan(cfg, rng);
    let per_subject: Vec<Vec<(Record, Tensor)>> = subjects
        .par_iter()
        .map(|(id, style, stream, is_test)| {
            (0..cfg.cells_per_subject)
                .map(|k| {
                    let img = render_cell(style, cfg.size, &mut stream.derive(1 + k as u64));
                    let rec = Record {
                        subject_id: id.clone(),
                        label: style.label,
                        path: format!("images/{id}/{k:03}.png"),
                        is_test: *is_test,
                    };
                    (rec, img)
                })
                .collect()
        })
        .collect();
    Ok(per_subject.into_iter().flatten().collect())
}

/// Write PNG images and `manifest.csv` under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path, rng: &Rng) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let subjects = plan(cfg, rng);
    let records: Vec<Vec<Record>> = subjects
        .par_iter()
        .map(|(id, style, stream, is_test)| -> Result<Vec<Record>> {
            let mut recs = Vec::with_capacity(cfg.cells_per_subject);
            for k in 0..cfg.cells_per_subject {
                let img = render_cell(style, cfg.size, &mut stream.derive(1 + k as u64));
                let rel = format!("images/{id}/{k:03}.png");
                write_png(&out_dir.join(&rel), &img)?;
                recs.push(Record {
                    subject_id: id.clone(),
                    label: style.label,
                    path: rel,
                    is_test: *is_test,
                });
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest::new(records.into_iter().flatten().collect(), out_dir)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
