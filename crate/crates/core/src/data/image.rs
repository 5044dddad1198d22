use std::io::Cursor;
use std::path::Path;

use ::image::{ImageFormat, RgbImage};

use crate::error::{LtdError, Result};

/// RGB image, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(LtdError::Dimension(format!("degenerate image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(LtdError::Dimension(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(LtdError::Numeric("NaN pixel".into()));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(ImageTensor { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + ch]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Copy of the `h×w` window at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(LtdError::Dimension(format!(
                "crop {h}x{w}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let o = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[o..o + w * 3]);
        }
        Ok(ImageTensor {
            height: h,
            width: w,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Quantizes to 8-bit RGB (round to nearest).
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LtdError::io(path, e))?;
        let img = ::image::load_from_memory(&bytes).map_err(|e| LtdError::Codec(format!("{}: {e}", path.display())))?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| LtdError::Codec(e.to_string()))?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| LtdError::io(path, e))
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(LtdError::Dimension("psnr of differently sized images".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}
