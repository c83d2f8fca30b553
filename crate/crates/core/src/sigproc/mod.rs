//! Signature image preprocessing.
//!
//! Images move through the pipeline as [`Raster`]s (8-bit grayscale,
//! row-major). After [`remove_background_and_invert`] the background is 0 and
//! strokes are bright, so every later step (centering, padding, resizing) can
//! fill with zeros.

mod augment;
mod canvas;
mod geometry;
mod otsu;

pub use augment::{augment_pad, default_max_pad, draw_pad, pad_image, random_crop};
pub use canvas::{assign_canvas, compute_canvas_set, CanvasSet};
pub use geometry::{center_in_canvas, fit_to_canvas, resize_bilinear};
pub use otsu::{histogram, otsu_threshold, remove_background_and_invert};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Data(format!("{} pixels for a {height}x{width} image", pixels.len())));
        }
        Ok(Raster { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Raster { height, width, pixels: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Raster { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn sum(&self) -> u64 {
        self.pixels.iter().map(|&p| p as u64).sum()
    }

    /// Copies `self` into a zero canvas at `(top, left)`.
    pub(crate) fn paste_into(&self, height: usize, width: usize, top: usize, left: usize) -> Raster {
        debug_assert!(top + self.height <= height && left + self.width <= width);
        let mut out = Raster::filled(height, width, 0);
        for y in 0..self.height {
            let dst = (top + y) * width + left;
            out.pixels[dst..dst + self.width].copy_from_slice(self.row(y));
        }
        out
    }

    pub(crate) fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Raster {
        debug_assert!(top + height <= self.height && left + width <= self.width);
        let mut pixels = Vec::with_capacity(height * width);
        for y in top..top + height {
            pixels.extend_from_slice(&self.row(y)[left..left + width]);
        }
        Raster { height, width, pixels }
    }
}

/// A signature sample with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureImage {
    pub raster: Raster,
    pub writer: u32,
    pub forgery: bool,
    /// Scanning resolution; metadata only.
    pub dpi: u32,
}

pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.into_luma8();
    let (w, h) = img.dimensions();
    Raster::new(h as usize, w as usize, img.into_raw())
}

pub fn write_png(raster: &Raster, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(raster.width as u32, raster.height as u32, raster.pixels.clone())
        .expect("raster buffer matches its dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Stacks equally sized rasters into a `[n, 1, h, w]` tensor scaled to [0, 1].
pub fn to_tensor(images: &[&Raster]) -> Result<Tensor4<f32>> {
    let first = images.first().ok_or_else(|| Error::Data("no images to stack".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::Data(format!("batch mixes sizes {h}x{w} and {}x{}", img.height, img.width)));
        }
        data.extend(img.pixels.iter().map(|&p| p as f32 / 255.0));
    }
    Tensor4::from_vec([images.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let r = Raster::from_fn(7, 11, |y, x| (y * 30 + x * 7) as u8);
        write_png(&r, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), r);
    }

    #[test]
    fn tensor_scaling_and_mixed_sizes() {
        let a = Raster::filled(2, 3, 255);
        let b = Raster::filled(2, 3, 0);
        let t = to_tensor(&[&a, &b]).unwrap();
        assert_eq!(t.dims(), [2, 1, 2, 3]);
        assert_eq!(t.get([0, 0, 1, 2]), 1.0);
        assert_eq!(t.get([1, 0, 0, 0]), 0.0);
        assert!(to_tensor(&[&a, &Raster::filled(3, 3, 0)]).is_err());
    }

    #[test]
    fn paste_and_crop_are_inverse() {
        let r = Raster::from_fn(3, 4, |y, x| (1 + y * 4 + x) as u8);
        let big = r.paste_into(6, 9, 2, 5);
        assert_eq!(big.crop(2, 5, 3, 4), r);
        assert_eq!(big.sum(), r.sum());
    }
}
