//! Binary PPM (P6) rendering of images, masks and retained-patch maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    /// Nearest-neighbour upscaling by an integer factor.
    pub fn scaled(&self, factor: usize) -> Rgb {
        let factor = factor.max(1);
        let (w, h) = (self.width * factor, self.height * factor);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let i = ((y / factor) * self.width + x / factor) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Rgb { width: w, height: h, data }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A `3×H×W` image with values in `[0, 1]`.
pub fn image_rgb(img: &Tensor) -> Result<Rgb> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Shape {
            op: "image_rgb",
            shape: img.shape().to_vec(),
            reason: "expected 3×H×W".into(),
        });
    };
    let d = img.data();
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            data.push(to_byte(d[c * h * w + i]));
        }
    }
    Ok(Rgb { width: w, height: h, data })
}

/// White where `mask` is set, black elsewhere.
pub fn mask_rgb(mask: &[bool], height: usize, width: usize) -> Rgb {
    let data = mask.iter().take(height * width).flat_map(|&m| [if m { 255 } else { 0 }; 3]).collect();
    Rgb { width, height, data }
}

/// Per-patch flags painted over their `patch × patch` blocks: retained
/// patches white, frozen ones black.
pub fn patch_map_rgb(active: &[bool], height: usize, width: usize, patch: usize) -> Rgb {
    let gw = width / patch;
    let pixels: Vec<bool> = (0..height * width)
        .map(|i| active[(i / width / patch) * gw + (i % width) / patch])
        .collect();
    mask_rgb(&pixels, height, width)
}
