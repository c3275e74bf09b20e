//! Manifests, subject-level folds, canvas centring, augmentation, class
//! balancing and the synthetic generator.

mod augment;
mod balance;
mod canvas;
mod folds;
mod manifest;
mod synth;

pub use augment::{
    apply_augment, augment, gaussian_blur, gaussian_kernel, hflip, rotate, shear, vflip,
    AugmentConfig, AugmentParams,
};
pub use balance::{balance_normal_oversample, epoch_plan, EpochEntry};
pub use canvas::{cell_centroid, center_on_canvas, read_image, write_png, BLANK, CANVAS_SIZE};
pub use folds::{
    split_folds, FoldAssignment, FoldReport, DOMINANT_SUBJECT_SHARE, MAX_PROPORTION_GAP,
};
pub use manifest::{DatasetManifest, Label, Record};
pub use synth::{
    render_cell, subject_id, subject_style, synth_generate, synth_images, SubjectStyle, SynthConfig,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Decoded images held as bytes, all on the same square canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub size: usize,
    pixels: Vec<Vec<u8>>,
    pub labels: Vec<Label>,
    pub subjects: Vec<String>,
}

impl ImageSet {
    /// Load `records`, centring any smaller image on a blank `size×size` canvas.
    pub fn load(manifest: &DatasetManifest, records: &[&Record], size: usize) -> Result<Self> {
        let pixels = records
            .par_iter()
            .map(|r| {
                let path = manifest.resolve(r);
                let img = read_image(&path)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                let img = if img.shape()[1] == size && img.shape()[2] == size {
                    img
                } else {
                    center_on_canvas(&img, None, size)
                        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
                };
                Ok(to_bytes(&img))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            size,
            pixels,
            labels: records.iter().map(|r| r.label).collect(),
            subjects: records.iter().map(|r| r.subject_id.clone()).collect(),
        })
    }

    /// Build from in-memory `3×size×size` images.
    pub fn from_images(
        images: &[Tensor],
        labels: Vec<Label>,
        subjects: Vec<String>,
    ) -> Result<Self> {
        let size = images.first().map_or(0, |t| t.shape()[1]);
        if images.len() != labels.len() || labels.len() != subjects.len() {
            return Err(Error::Data(
                "images, labels and subjects differ in length".into(),
            ));
        }
        for t in images {
            if t.shape() != [3, size, size] {
                return Err(Error::Shape(format!(
                    "image {:?} is not 3×{size}×{size}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            size,
            pixels: images.iter().map(to_bytes).collect(),
            labels,
            subjects,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let data = self.pixels[i].iter().map(|&b| f64::from(b)).collect();
        Tensor::new(vec![3, self.size, self.size], data).expect("stored image")
    }

    /// Stack the chosen images into `[n×3×size×size]`. Augmented entries are
    /// drawn from the stream `rng.derive(stream_base + position)`, so the
    /// result does not depend on evaluation order.
    pub fn batch(
        &self,
        entries: &[EpochEntry],
        aug: &AugmentConfig,
        rng: &Rng,
        stream_base: u64,
    ) -> Result<Tensor> {
        let imgs = entries
            .par_iter()
            .enumerate()
            .map(|(pos, e)| {
                let img = self.image(e.index);
                if e.augment {
                    augment(&img, aug, &mut rng.derive(stream_base + pos as u64))
                } else {
                    Ok(img)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&imgs)
    }

    pub fn labels_of(&self, entries: &[EpochEntry]) -> Vec<usize> {
        entries
            .iter()
            .map(|e| self.labels[e.index].index())
            .collect()
    }
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}
