//! Raster images: the H×W×C unit all augmentation and network code consumes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array3;
use std::path::Path;

/// Real-valued image, `H×W×C`, every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T: Scalar> {
    data: Array3<T>,
}

impl<T: Scalar> ImageTensor<T> {
    /// Wrap an array, validating finiteness and range.
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.dim().0 == 0 || data.dim().1 == 0 || data.dim().2 == 0 {
            return Err(Error::invalid_input("image with a zero dimension"));
        }
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::invalid_input("non-finite image value"));
            }
            if v < T::zero() || v > T::one() {
                return Err(Error::invalid_input(format!(
                    "image value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Clamp an arbitrary finite array into `[0, 1]` and wrap it.
    ///
    /// Used for reconstructed images, whose inverse transform may transiently
    /// overshoot the unit range.
    pub fn from_unclamped(data: Array3<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("non-finite image value"));
        }
        let clamped = data.mapv(|v| v.max(T::zero()).min(T::one()));
        Ok(Self { data: clamped })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            data: Array3::zeros((h, w, c)),
        }
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Decode an 8-bit PNG into a unit-range image (RGB → 3 channels,
    /// grayscale → 1 channel).
    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] =
                    T::cast(px.0[c] as f64 / 255.0);
            }
        }
        Ok(Self { data })
    }

    /// Encode as 8-bit PNG. One channel writes grayscale, three write RGB.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.data.dim();
        let quant = |v: T| -> u8 {
            let f: f64 = (v * T::cast(255.0)).as_();
            f.round().clamp(0.0, 255.0) as u8
        };
        match c {
            1 => {
                let mut img = image::GrayImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        img.put_pixel(x as u32, y as u32, image::Luma([quant(self.data[[y, x, 0]])]));
                    }
                }
                img.save(path)?;
            }
            3 => {
                let mut img = image::RgbImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        let px = [
                            quant(self.data[[y, x, 0]]),
                            quant(self.data[[y, x, 1]]),
                            quant(self.data[[y, x, 2]]),
                        ];
                        img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
                img.save(path)?;
            }
            other => {
                return Err(Error::invalid_input(format!(
                    "cannot encode a {other}-channel image as PNG"
                )))
            }
        }
        Ok(())
    }
}
