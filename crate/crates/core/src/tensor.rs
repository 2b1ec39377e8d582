//! Image tensor helpers: C×H×W arrays of unit-interval intensities, PNG I/O,
//! and differentiable resize/pad primitives used by the diverse-inputs trick.

use ndarray::{Array3, Zip};
use std::path::Path;

use crate::error::{Error, Result};

/// A C×H×W image with pixel intensities in `[0, 1]`.
pub type Image = Array3<f64>;

/// ℓ∞ distance between two images of the same shape.
pub fn linf_dist(a: &Image, b: &Image) -> f64 {
    let mut m = 0.0f64;
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = (x - y).abs();
        if d > m {
            m = d;
        }
    });
    m
}

/// Clamp every pixel into `[0, 1]` in place.
pub fn clamp01(x: &mut Image) {
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// True when every pixel lies in `[0, 1]`.
pub fn in_unit_box(x: &Image) -> bool {
    x.iter().all(|&v| (0.0..=1.0).contains(&v))
}

/// Save an image as an 8-bit PNG (values quantized by rounding to 1/255 steps).
pub fn save_png(x: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = x.dim();
    if c != 3 && c != 1 {
        return Err(Error::Config(format!("save_png: unsupported channel count {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ch: usize| (x[[ch.min(c - 1), i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load an 8-bit PNG/JPEG into a 3×H×W image with intensities in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j as u32, i as u32);
            for ch in 0..3 {
                out[[ch, i, j]] = f64::from(p[ch]) / 255.0;
            }
        }
    }
    Ok(out)
}

/// Source-pixel weights for one output coordinate of a bilinear resize
/// (align_corners=false convention). Returns ((i0, w0), (i1, w1)).
fn bilinear_taps(out_idx: usize, out_len: usize, in_len: usize) -> ((usize, f64), (usize, f64)) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out_idx as f64 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = src - i0 as f64;
    ((i0, 1.0 - frac), (i1, frac))
}

/// Bilinear resize of an image to `out_h × out_w`.
pub fn resize_bilinear(x: &Image, out_h: usize, out_w: usize) -> Image {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for oi in 0..out_h {
        let ((i0, wi0), (i1, wi1)) = bilinear_taps(oi, out_h, h);
        for oj in 0..out_w {
            let ((j0, wj0), (j1, wj1)) = bilinear_taps(oj, out_w, w);
            for ch in 0..c {
                out[[ch, oi, oj]] = wi0 * (wj0 * x[[ch, i0, j0]] + wj1 * x[[ch, i0, j1]])
                    + wi1 * (wj0 * x[[ch, i1, j0]] + wj1 * x[[ch, i1, j1]]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatter an `out_h × out_w` gradient back to
/// an `in_h × in_w` grid with the same interpolation weights.
pub fn resize_bilinear_adjoint(grad: &Image, in_h: usize, in_w: usize) -> Image {
    let (c, out_h, out_w) = grad.dim();
    let mut out = Array3::zeros((c, in_h, in_w));
    for oi in 0..out_h {
        let ((i0, wi0), (i1, wi1)) = bilinear_taps(oi, out_h, in_h);
        for oj in 0..out_w {
            let ((j0, wj0), (j1, wj1)) = bilinear_taps(oj, out_w, in_w);
            for ch in 0..c {
                let g = grad[[ch, oi, oj]];
                out[[ch, i0, j0]] += wi0 * wj0 * g;
                out[[ch, i0, j1]] += wi0 * wj1 * g;
                out[[ch, i1, j0]] += wi1 * wj0 * g;
                out[[ch, i1, j1]] += wi1 * wj1 * g;
            }
        }
    }
    out
}

/// Zero-pad an image to `out_h × out_w` placing its top-left corner at (off_y, off_x).
pub fn zero_pad(x: &Image, out_h: usize, out_w: usize, off_y: usize, off_x: usize) -> Image {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ch, off_y + i, off_x + j]] = x[[ch, i, j]];
            }
        }
    }
    out
}

/// Adjoint of [`zero_pad`]: crop the padded region back out.
pub fn crop(x: &Image, h: usize, w: usize, off_y: usize, off_x: usize) -> Image {
    let (c, _, _) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ch, i, j]] = x[[ch, off_y + i, off_x + j]];
            }
        }
    }
    out
}
