//! Floating-point RGB images and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Row-major interleaved RGB image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return invalid(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rec. 709 luminance per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]).collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Format("image buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
        Self::from_data(w as usize, h as usize, data)
    }

    /// Places images left to right on a black canvas as tall as the tallest.
    pub fn hstack(images: &[RgbImage]) -> RgbImage {
        let width = images.iter().map(|i| i.width).sum();
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let mut out = RgbImage::new(width, height);
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(x0 + x, y, img.pixel(x, y));
                }
            }
            x0 += img.width;
        }
        out
    }

    pub fn vstack(images: &[RgbImage]) -> RgbImage {
        let width = images.iter().map(|i| i.width).max().unwrap_or(0);
        let height = images.iter().map(|i| i.height).sum();
        let mut out = RgbImage::new(width, height);
        let mut y0 = 0;
        for img in images {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(x, y0 + y, img.pixel(x, y));
                }
            }
            y0 += img.height;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 2 * 3).map(|i| f64::from(i * 10) / 255.0).collect();
        let img = RgbImage::from_data(4, 2, data).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn stacking_dimensions() {
        let a = RgbImage::new(2, 3);
        let b = RgbImage::new(4, 1);
        let h = RgbImage::hstack(&[a.clone(), b.clone()]);
        assert_eq!((h.width, h.height), (6, 3));
        let v = RgbImage::vstack(&[a, b]);
        assert_eq!((v.width, v.height), (4, 4));
    }
}
