//! RGB images with `[0, 1]` channel values.

use crate::error::{domain, Result};
use crate::tensor::Tensor;

/// An `H x W x 3` interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// The `side x side` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, side: usize) -> Result<Image> {
        if top + side > self.height || left + side > self.width {
            return domain(format!(
                "crop {side}x{side} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            ));
        }
        let mut data = Vec::with_capacity(side * side * 3);
        for y in top..top + side {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + side * 3]);
        }
        Ok(Image::new(side, side, data))
    }

    /// Mirror image about the vertical axis.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width * 3) {
            for px in row.chunks(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Image::new(self.height, self.width, data)
    }

    /// Mirror image about the horizontal axis.
    pub fn flip_vertical(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width * 3).rev() {
            data.extend_from_slice(row);
        }
        Image::new(self.height, self.width, data)
    }

    /// Channel-major `[3, H, W]` tensor for the network.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[hw + i] = px[1];
            out[2 * hw + i] = px[2];
        }
        Tensor::new([3, self.height, self.width], out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Image::new(img.height() as usize, img.width() as usize, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_layout() {
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| i as f64 / 60.0).collect();
        let img = Image::new(4, 5, data);
        let c = img.crop(1, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        assert_eq!(c.pixel(1, 1), img.pixel(2, 3));
        assert!(img.crop(3, 0, 2).is_err());
        let t = img.to_chw();
        assert_eq!(t.shape(), &[3, 4, 5]);
        assert_eq!(t.data()[4 * 5 + 7], img.pixel(1, 2)[1]);
    }
}
