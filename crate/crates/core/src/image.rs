//! Row-major image buffers and PNG export.

use std::path::Path;

use crate::error::{invalid, Result};

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type ColorImage = Image<Rgb>;
pub type DepthImage = Image<f64>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!(
                "image buffer has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        let w = self.width;
        &mut self.data[v * w + u]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let c = img.data[i];
        *px = image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    buf.save(path)?;
    Ok(())
}

/// 16-bit grayscale PNG holding depth in millimeters (saturating at 65.535 m).
pub fn save_depth_png(img: &DepthImage, path: &Path) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let mm = (img.data[i].max(0.0) * 1000.0).round().min(u16::MAX as f64);
        *px = image::Luma([mm as u16]);
    }
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_millimeters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let img = Image::from_vec(2, 1, vec![1.2345, 0.0]).unwrap();
        save_depth_png(&img, &path).unwrap();
        let back = image::open(&path).unwrap().into_luma16();
        assert_eq!(back.get_pixel(0, 0).0[0], 1235);
        assert_eq!(back.get_pixel(1, 0).0[0], 0);
    }

    #[test]
    fn shape_checked() {
        assert!(Image::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
