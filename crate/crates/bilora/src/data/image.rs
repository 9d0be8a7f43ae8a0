//! Interleaved row-major image buffer plus 8-bit PNG round trips.
//!
//! Pixels live in `[0, 1]`. Files on disk are ordinary 8-bit RGB PNGs;
//! quantization happens exactly once, at save time, with round-half-up so
//! the mapping is deterministic.

use std::path::Path;

use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<F> {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<F>,
}

impl<F: Scalar> ImageBuf<F> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuf {
            width,
            height,
            channels,
            pixels: vec![F::zero(); width * height * channels],
        }
    }

    pub fn from_pixels(width: usize, height: usize, channels: usize, pixels: Vec<F>) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::contract(
                "image",
                format!(
                    "{width}x{height}x{channels} wants {} values, got {}",
                    width * height * channels,
                    pixels.len()
                ),
            ));
        }
        Ok(ImageBuf {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[F] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [F] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> F {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: F) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mean over every channel of every pixel.
    pub fn mean(&self) -> F {
        if self.pixels.is_empty() {
            return F::zero();
        }
        self.pixels.iter().copied().sum::<F>() / F::c(self.pixels.len() as f64)
    }

    /// Clamp every value into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.max(F::zero()).min(F::one());
        }
    }

    /// Quantize to 8 bits (round half up, saturating).
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::contract(
                "image",
                format!("rgb8 conversion wants 3 channels, image has {}", self.channels),
            ));
        }
        Ok(self
            .pixels
            .iter()
            .map(|&v| {
                let scaled = v.as_f64() * 255.0 + 0.5;
                scaled.clamp(0.0, 255.0) as u8
            })
            .collect())
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| F::c(b as f64 / 255.0)).collect();
        Self::from_pixels(width, height, 3, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8()?;
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("byte count matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_rgb8(w, h, img.as_raw())
    }
}
