//! Image and mask files, and resampling of decoded rasters.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::domain::{Image, Mask, ProbabilityMap, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::bilinear_weights;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// How stored mask values map to foreground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskEncoding {
    /// Any non-zero value (instance-labelled masks).
    #[default]
    NonZero,
    /// Values of at least half the range (lossy-compressed masks).
    HalfRange,
}

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

fn from_dynamic(img: image::DynamicImage) -> Result<Image> {
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut pixels = vec![0.0f32; IMAGE_CHANNELS * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..IMAGE_CHANNELS {
            pixels[c * h * w + y as usize * w + x as usize] = p.0[c].clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, pixels)
}

/// RGB image with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    from_dynamic(decode(path)?).map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))
}

pub fn read_mask(path: &Path, encoding: MaskEncoding) -> Result<Mask> {
    let gray = decode(path)?.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let pixels = gray
        .pixels()
        .map(|p| match encoding {
            MaskEncoding::NonZero => (p.0[0] > 0) as u8,
            MaskEncoding::HalfRange => (p.0[0] >= 0x8000) as u8,
        })
        .collect();
    Mask::new(h, w, pixels)
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<Image> {
    from_dynamic(image::load_from_memory(bytes).map_err(|e| Error::InvalidImage(e.to_string()))?)
}

/// Binary mask as an 8-bit PNG with values 0/255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_probability(path: &Path, probs: &ProbabilityMap) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(probs.width() as u32, probs.height() as u32, |x, y| {
        Luma([(probs.get(y as usize, x as usize) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resize with half-pixel centres.
pub fn resize_image(image: &Image, h: usize, w: usize) -> Image {
    if (image.height(), image.width()) == (h, w) {
        return image.clone();
    }
    let (ih, iw) = (image.height(), image.width());
    let ry = bilinear_weights(ih, h);
    let rx = bilinear_weights(iw, w);
    let taps = |m: &[f64], n_in: usize, i: usize| -> Vec<(usize, f64)> {
        (0..n_in)
            .filter_map(|j| {
                let v = m[i * n_in + j];
                (v != 0.0).then_some((j, v))
            })
            .collect()
    };
    let ty: Vec<_> = (0..h).map(|y| taps(&ry, ih, y)).collect();
    let tx: Vec<_> = (0..w).map(|x| taps(&rx, iw, x)).collect();
    Image::from_fn(h, w, |c, y, x| {
        let mut acc = 0.0f64;
        for &(sy, wy) in &ty[y] {
            for &(sx, wx) in &tx[x] {
                acc += wy * wx * image.get(c, sy, sx) as f64;
            }
        }
        acc as f32
    })
    .expect("resized dims are valid")
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_mask(mask: &Mask, h: usize, w: usize) -> Mask {
    if mask.dims() == (h, w) {
        return mask.clone();
    }
    let (mh, mw) = mask.dims();
    let src = |i: usize, n_out: usize, n_in: usize| {
        (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    Mask::from_fn(h, w, |y, x| mask.get(src(y, h, mh), src(x, w, mw)))
}
