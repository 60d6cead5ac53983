//! Minimal RGB raster with normalized `f32` channels.
//!
//! Pixels are stored row-major, three interleaved channels in `[0, 1]`.
//! Conversion to and from 8-bit happens only in [`RgbImage::load`] and
//! [`RgbImage::save`].

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "raw buffer of {} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Bilinear sample at continuous coordinates (pixel `i` has its center at
    /// `i + 0.5`). Rows are clamped; columns wrap when `wrap_x` is set and are
    /// clamped otherwise.
    pub fn sample_bilinear(&self, u: f64, v: f64, wrap_x: bool) -> [f32; 3] {
        let x = u - 0.5;
        let y = v - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let w = self.width as i64;
        let h = self.height as i64;
        let col = |c: i64| -> usize {
            if wrap_x {
                c.rem_euclid(w) as usize
            } else {
                c.clamp(0, w - 1) as usize
            }
        };
        let row = |r: i64| -> usize { r.clamp(0, h - 1) as usize };
        let (c0, c1) = (col(x0 as i64), col(x0 as i64 + 1));
        let (r0, r1) = (row(y0 as i64), row(y0 as i64 + 1));
        let p00 = self.get(c0, r0);
        let p10 = self.get(c1, r0);
        let p01 = self.get(c0, r1);
        let p11 = self.get(c1, r1);
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = p00[k] + (p10[k] - p00[k]) * fx;
            let bottom = p01[k] + (p11[k] - p01[k]) * fx;
            out[k] = top + (bottom - top) * fy;
        }
        out
    }

    /// Copies columns `[lo, hi)` into a new image.
    pub fn columns(&self, lo: usize, hi: usize) -> RgbImage {
        let w = hi - lo;
        let mut out = RgbImage::new(w, self.height);
        for y in 0..self.height {
            let src = (y * self.width + lo) * 3;
            let dst = y * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches dimensions")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }
}

pub fn save_mask(mask: &[bool], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let raw = mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Shape("mask length does not match dimensions".into()))?;
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((
        img.into_raw().into_iter().map(|b| b >= 128).collect(),
        w as usize,
        h as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers_and_interpolates() {
        let img = RgbImage::from_fn(4, 2, |x, y| [x as f32, y as f32, 0.0]);
        assert_eq!(img.sample_bilinear(2.5, 1.5, false), [2.0, 1.0, 0.0]);
        let mid = img.sample_bilinear(2.0, 1.0, false);
        assert!((mid[0] - 1.5).abs() < 1e-6 && (mid[1] - 0.5).abs() < 1e-6);
        // left of column 0 wraps to column 3
        let wrapped = img.sample_bilinear(0.0, 0.5, true);
        assert!((wrapped[0] - 1.5).abs() < 1e-6);
        let clamped = img.sample_bilinear(0.0, 0.5, false);
        assert_eq!(clamped[0], 0.0);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RgbImage::from_fn(3, 2, |x, y| [x as f32 / 2.0, y as f32, 0.25]);
        img.save(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
