use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canvas side used for full-resolution cells.
pub const CANVAS_SIZE: usize = 350;
/// Background intensity: white, zero optical density.
pub const BLANK: f64 = 255.0;

/// Read a PNG or BMP file into a `3×h×w` tensor of intensities.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(p[c]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Write a `3×h×w` tensor as an 8-bit PNG, rounding and clamping to `[0, 255]`.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::Shape(format!("write_png expects 3×h×w, got {s:?}"))),
    };
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| d[c * h * w + i].round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Weighted centroid `(row, col)` of a `3×h×w` cell: mask pixels when a
/// mask is given, otherwise darkness `255 − mean channel`. Falls back to the
/// geometric centre when every weight is zero.
pub fn cell_centroid(cell: &Tensor, mask: Option<&[bool]>) -> Result<(f64, f64)> {
    let (h, w) = match *cell.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::Shape(format!("cell must be 3×h×w, got {s:?}"))),
    };
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {h}×{w} cell",
                m.len()
            )));
        }
    }
    let d = cell.data();
    let (mut sw, mut sy, mut sx) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let wgt = match mask {
                Some(m) => f64::from(u8::from(m[i])),
                None => (BLANK - (d[i] + d[h * w + i] + d[2 * h * w + i]) / 3.0).max(0.0),
            };
            sw += wgt;
            sy += wgt * y as f64;
            sx += wgt * x as f64;
        }
    }
    if sw == 0.0 {
        return Ok(((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0));
    }
    Ok((sy / sw, sx / sw))
}

/// Paste a cell onto a blank `size×size` canvas so its centroid lands on the
/// canvas centre. In pixel-index coordinates the centre is `(size − 1) / 2`,
/// which for 350 is 174.5, the point 175.0 when pixels are unit squares.
/// Offsets round half away from zero and are clamped so nothing is clipped.
pub fn center_on_canvas(cell: &Tensor, mask: Option<&[bool]>, size: usize) -> Result<Tensor> {
    let (cy, cx) = cell_centroid(cell, mask)?;
    let (h, w) = (cell.shape()[1], cell.shape()[2]);
    if h > size || w > size {
        return Err(Error::Shape(format!(
            "cell of {h}×{w} does not fit a {size}×{size} canvas"
        )));
    }
    let target = (size as f64 - 1.0) / 2.0;
    let place = |c: f64, extent: usize| -> usize {
        let off = (target - c).round();
        off.clamp(0.0, (size - extent) as f64) as usize
    };
    let (oy, ox) = (place(cy, h), place(cx, w));
    let mut out = Tensor::full(&[3, size, size], BLANK)?;
    let (src, dst) = (cell.data(), out.data_mut());
    for c in 0..3 {
        for y in 0..h {
            let s = c * h * w + y * w;
            let t = c * size * size + (y + oy) * size + ox;
            dst[t..t + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(out)
}
