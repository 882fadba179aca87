//! PNG round-trips for image tensors.
//!
//! Images live in memory as [3, h, w] tensors with values in [0, 1] that are
//! exact multiples of 1/255, so quantizing to 8-bit and back is lossless.
//! Masks are [h, w] tensors holding exactly 0.0 or 1.0, stored as 8-bit gray.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a [3, h, w] tensor as an RGB PNG.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    if t.shape.len() != 3 || t.shape[0] != 3 {
        return Err(Error::shape(format!("write_image: want [3, h, w], got {:?}", t.shape)));
    }
    let (h, w) = (t.shape[1], t.shape[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                to_byte(t.data[y * w + x]),
                to_byte(t.data[h * w + y * w + x]),
                to_byte(t.data[2 * h * w + y * w + x]),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Read an RGB PNG into a [3, h, w] tensor with values in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.data[c * h * w + y * w + x] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

/// Write an [h, w] mask of {0.0, 1.0} as an 8-bit gray PNG of {0, 255}.
pub fn write_mask(path: &Path, t: &Tensor) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::shape(format!("write_mask: want [h, w], got {:?}", t.shape)));
    }
    let (h, w) = (t.shape[0], t.shape[1]);
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = t.data[y * w + x];
            if v != 0.0 && v != 1.0 {
                return Err(Error::contract(format!("write_mask: non-binary value {v}")));
            }
            img.put_pixel(x as u32, y as u32, image::Luma([if v == 1.0 { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Read an 8-bit gray PNG into an [h, w] mask of {0.0, 1.0}.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            t.data[y * w + x] = match v {
                0 => 0.0,
                255 => 1.0,
                other => {
                    return Err(Error::integrity(format!(
                        "{}: mask pixel {other} is neither 0 nor 255",
                        path.display()
                    )))
                }
            };
        }
    }
    Ok(t)
}
