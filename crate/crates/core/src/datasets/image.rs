use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An RGB image with intensities in `[0, 1]`, stored `H×W×3` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image must be at least 1×1".into()));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{}×{} image needs {} values, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.height, self.width, 3],
            self.pixels.iter().map(|&v| T::cast(v as f64)).collect(),
        )
        .expect("image shape")
    }

    /// Bilinear resize (half-pixel centres).
    pub fn resized(&self, height: usize, width: usize) -> Result<Image> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(height * width * 3);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for oy in 0..height {
            let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = (y - y0 as f64) as f32;
            for ox in 0..width {
                let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = (x - x0 as f64) as f32;
                let (a, b, c, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
                for ch in 0..3 {
                    let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                    let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Image::new(height, width, out)
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn open(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Result<Image> {
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, pixels)
    }

    fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Quantizes to 8 bits per channel, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        let pixels = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Image { height: self.height, width: self.width, pixels }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let mut img = Image::filled(5, 7, [0.2, 0.4, 0.6]).unwrap();
        img.put(2, 3, [1.0, 0.0, 0.5]);
        let back = Image::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn resize_preserves_constant() {
        let img = Image::filled(10, 20, [0.5, 0.5, 0.5]).unwrap();
        let r = img.resized(6, 13).unwrap();
        assert!(r.pixels().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn empty_image_rejected() {
        assert!(Image::new(0, 3, vec![]).is_err());
    }
}
