//! Planar float images and PNG conversion.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// A `channels × height × width` image stored plane by plane, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image data length");
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let l = self.height * self.width;
        &self.data[c * l..(c + 1) * l]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let l = self.height * self.width;
        &mut self.data[c * l..(c + 1) * l]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Channel-averaged single-channel copy.
    pub fn to_gray(&self) -> Image {
        let l = self.height * self.width;
        let mut out = vec![0.0; l];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels as f32;
        out.iter_mut().for_each(|v| *v /= k);
        Image::new(1, self.height, self.width, out)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| f64::from(*v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(images: &[Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::DimensionMismatch("empty image batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            if (im.channels, im.height, im.width) != (c, h, w) {
                return Err(Error::DimensionMismatch("images in a batch differ in shape".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(images.len(), c, h, w, data))
    }

    pub fn from_tensor(t: &Tensor) -> Vec<Image> {
        (0..t.n)
            .map(|i| Image::new(t.c, t.h, t.w, t.item(i).to_vec()))
            .collect()
    }

    pub fn from_dynamic(img: &DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Image::filled(3, h, w, 0.0);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, f32::from(p[c]) / 255.0);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Image> {
        Ok(Image::from_dynamic(&image::open(path)?))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?;
        Ok(Image::from_dynamic(&img))
    }

    /// Single channel view of an 8-bit grayscale PNG, values /255.
    pub fn gray_from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|v| f32::from(*v) / 255.0).collect();
        Ok(Image::new(1, h, w, data))
    }

    fn to_u8(v: f32) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf = self.data.iter().map(|v| Image::to_u8(*v)).collect();
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, buf).expect("gray buffer"))
        } else {
            let mut buf = Vec::with_capacity(self.height * self.width * 3);
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..3 {
                        let c = c.min(self.channels - 1);
                        buf.push(Image::to_u8(self.get(c, y, x)));
                    }
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, buf).expect("rgb buffer"))
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_dynamic()
            .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Lays images out left to right on one strip with a one-pixel white gutter.
pub fn strip(images: &[Image]) -> Option<Image> {
    let first = images.first()?;
    let (c, h) = (3, first.height);
    let total_w: usize = images.iter().map(|i| i.width + 1).sum::<usize>() - 1;
    let mut out = Image::filled(c, h, total_w, 1.0);
    let mut x0 = 0;
    for im in images {
        for ch in 0..c {
            let src_c = ch.min(im.channels - 1);
            for y in 0..im.height.min(h) {
                for x in 0..im.width {
                    out.set(ch, y, x0 + x, im.get(src_c, y, x));
                }
            }
        }
        x0 += im.width + 1;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let mut im = Image::filled(3, 4, 5, 0.0);
        im.set(1, 2, 3, 1.0);
        im.set(0, 0, 0, 128.0 / 255.0);
        let back = Image::from_png_bytes(&im.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back.resolution(), (4, 5));
        assert_eq!(back.get(1, 2, 3), 1.0);
        assert_eq!(back.get(0, 0, 0), 128.0 / 255.0);
    }

    #[test]
    fn gray_is_channel_mean() {
        let mut im = Image::filled(3, 1, 1, 0.0);
        im.data = vec![0.3, 0.6, 0.9];
        assert!((im.to_gray().data[0] - 0.6).abs() < 1e-6);
    }
}
