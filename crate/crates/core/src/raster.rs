//! Grayscale sketch rasters and RGB photo rasters.
//!
//! Pixel values live in `[0, 1]`. Sketches use a white background (`1.0`)
//! with dark ink, so a pixel is "inked" when its value is below `1.0`.

use std::path::Path;

use image::{imageops, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchImage {
    width: u32,
    height: u32,
    pixels: Vec<f32>,
}

impl SketchImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty raster {width}x{height}")));
        }
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(invalid(format!(
                "pixel buffer has {} values, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// All-white canvas.
    pub fn blank(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "blank canvas must be non-empty");
        Self {
            width,
            height,
            pixels: vec![1.0; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width as usize + col]
    }

    #[inline]
    pub(crate) fn set(&mut self, row: usize, col: usize, value: f32) {
        let w = self.width as usize;
        self.pixels[row * w + col] = value;
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn is_inked(&self, row: usize, col: usize) -> bool {
        self.get(row, col) < 1.0
    }

    pub fn inked_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v < 1.0).count()
    }

    /// True when every inked pixel of `self` is also inked in `other`.
    pub fn ink_subset_of(&self, other: &SketchImage) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(&a, &b)| a >= 1.0 || b < 1.0)
    }

    /// Snap every value to the nearest 8-bit level so PNG storage is lossless.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.pixels {
            *v = quantize(*v);
        }
        self
    }

    pub fn resized(&self, width: u32, height: u32) -> SketchImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width, self.height, self.pixels.clone())
                .expect("buffer size checked at construction");
        let out = imageops::resize(&buf, width, height, imageops::FilterType::Triangle);
        let pixels = out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        SketchImage {
            width,
            height,
            pixels,
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width, self.height, bytes).expect("sized buffer");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.into_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(from_u8).collect();
        SketchImage::new(w, h, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_png_bytes(&bytes)
    }
}

/// RGB raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotoImage {
    width: u32,
    height: u32,
    pixels: Vec<f32>,
}

impl PhotoImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("empty raster {width}x{height}")));
        }
        if pixels.len() != 3 * width as usize * height as usize {
            return Err(invalid(format!(
                "RGB buffer has {} values, expected 3x{}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width as usize + col) * 3 + channel]
    }

    pub fn quantized(mut self) -> Self {
        for v in &mut self.pixels {
            *v = quantize(*v);
        }
        self
    }

    pub fn resized(&self, width: u32, height: u32) -> PhotoImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width, self.height, self.pixels.clone())
                .expect("buffer size checked at construction");
        let out = imageops::resize(&buf, width, height, imageops::FilterType::Triangle);
        let pixels = out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        PhotoImage {
            width,
            height,
            pixels,
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width, self.height, bytes).expect("sized buffer");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.into_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(from_u8).collect();
        PhotoImage::new(w, h, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_png_bytes(&bytes)
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

#[inline]
fn quantize(v: f32) -> f32 {
    from_u8(to_u8(v))
}
