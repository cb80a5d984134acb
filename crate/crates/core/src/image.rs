//! Raster containers: 8-bit images, real-valued planes and binary masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};

/// Row-major interleaved 8-bit image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(shape_err!("images must have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!("{height}x{width}x{channels} image needs {} bytes, got {}", height * width * channels, data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_gray(gray: &GrayF64) -> Self {
        let data = gray.data.iter().map(|&v| round_u8(v)).collect();
        Self { height: gray.height, width: gray.width, channels: 1, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims(&self, other: &ImageU8) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Luma (ITU-R BT.601 weights) in `[0, 255]`.
    pub fn to_gray(&self) -> GrayF64 {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let v = if self.channels == 1 {
                self.data[i] as f64
            } else {
                let p = &self.data[i * 3..i * 3 + 3];
                0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
            };
            data.push(v);
        }
        GrayF64 { height: self.height, width: self.width, data }
    }

    pub fn to_rgb(&self) -> ImageU8 {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageU8 { height: self.height, width: self.width, channels: 3, data }
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resize(&self, height: usize, width: usize) -> ImageU8 {
        let mut out = ImageU8::filled(height, width, self.channels, 0);
        for c in 0..self.channels {
            let plane = GrayF64 {
                height: self.height,
                width: self.width,
                data: (0..self.height * self.width).map(|i| self.data[i * self.channels + c] as f64).collect(),
            };
            let r = plane.resize_centers(height, width);
            for (i, v) in r.data.iter().enumerate() {
                out.data[i * self.channels + c] = round_u8(*v);
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageU8> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err!("crop {height}x{width}@({top},{left}) of {}x{}", self.height, self.width));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(ImageU8 { height, width, channels: self.channels, data })
    }

    /// Resize so the shorter side equals `size`, then center-crop to
    /// `size x size`.
    pub fn resize_center_crop(&self, size: usize) -> ImageU8 {
        let short = self.height.min(self.width).max(1);
        let h = (self.height * size).div_ceil(short).max(size);
        let w = (self.width * size).div_ceil(short).max(size);
        let resized = if h == self.height && w == self.width { self.clone() } else { self.resize(h, w) };
        resized.crop((h - size) / 2, (w - size) / 2, size, size).expect("crop within bounds")
    }
}

pub fn round_u8(v: f64) -> u8 {
    libm::round(v).clamp(0.0, 255.0) as u8
}

/// Single-channel real raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayF64 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayF64 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} plane needs {} values, got {}", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Bilinear resize with corner alignment: the four corner samples of the
    /// output equal the four corners of the input.
    pub fn resize_corners(&self, height: usize, width: usize) -> GrayF64 {
        let sy = if height > 1 { (self.height - 1) as f64 / (height - 1) as f64 } else { 0.0 };
        let sx = if width > 1 { (self.width - 1) as f64 / (width - 1) as f64 } else { 0.0 };
        self.resample(height, width, |y| y as f64 * sy, |x| x as f64 * sx)
    }

    /// Bilinear resize with pixel-center alignment (image resampling).
    pub fn resize_centers(&self, height: usize, width: usize) -> GrayF64 {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        self.resample(height, width, |y| (y as f64 + 0.5) * sy - 0.5, |x| (x as f64 + 0.5) * sx - 0.5)
    }

    fn resample(&self, height: usize, width: usize, fy: impl Fn(usize) -> f64, fx: impl Fn(usize) -> f64) -> GrayF64 {
        let mut out = GrayF64::zeros(height, width);
        let cols: Vec<(usize, usize, f64)> = (0..width).map(|x| lerp_index(fx(x), self.width)).collect();
        for y in 0..height {
            let (y0, y1, ty) = lerp_index(fy(y), self.height);
            for (x, &(x0, x1, tx)) in cols.iter().enumerate() {
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bottom = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                out.data[y * width + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
        out
    }
}

fn lerp_index(pos: f64, len: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let i0 = libm::floor(pos) as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} mask needs {} values, got {}", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if self.height != other.height || self.width != other.width {
            return Err(shape_err!("mask {}x{} vs {}x{}", self.height, self.width, other.height, other.width));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Mask { height: self.height, width: self.width, data })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn not(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.data.iter().map(|b| !b).collect() }
    }

    /// Downsample to `height x width`, marking a cell positive when any source
    /// pixel it covers is positive.
    pub fn downsample_any(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::filled(height, width, false);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                // source pixel [y, y+1) maps to [y*h/H, (y+1)*h/H)
                let oy0 = y * height / self.height;
                let oy1 = ((y + 1) * height).div_ceil(self.height).min(height);
                let ox0 = x * width / self.width;
                let ox1 = ((x + 1) * width).div_ceil(self.width).min(width);
                for oy in oy0..oy1.max(oy0 + 1) {
                    for ox in ox0..ox1.max(ox0 + 1) {
                        out.data[oy * width + ox] = true;
                    }
                }
            }
        }
        out
    }

    pub fn dilate3(&self) -> Mask {
        self.morph(true)
    }

    pub fn erode3(&self) -> Mask {
        self.morph(false)
    }

    /// 3x3 morphological close (dilate then erode), replicate-edge.
    pub fn close3(&self) -> Mask {
        self.dilate3().erode3()
    }

    fn morph(&self, dilate: bool) -> Mask {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = Mask::filled(self.height, self.width, false);
        for y in 0..h {
            for x in 0..w {
                let mut acc = !dilate;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let v = self.get((y + dy).clamp(0, h - 1) as usize, (x + dx).clamp(0, w - 1) as usize);
                        if dilate {
                            acc |= v;
                        } else {
                            acc &= v;
                        }
                    }
                }
                out.data[(y * w + x) as usize] = acc;
            }
        }
        out
    }
}

/// Otsu threshold over values, using a 256-bin histogram spanning
/// `[min, max]`. Returns the threshold value; values `> t` form the upper
/// class.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(hi > lo) {
        return lo;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    lo + (best_bin + 1) as f64 * width
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_aligned_upsample_keeps_corners() {
        let g = GrayF64::new(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = g.resize_corners(4, 4);
        assert_eq!(up.get(0, 0), 1.0);
        assert_eq!(up.get(0, 3), 2.0);
        assert_eq!(up.get(3, 0), 3.0);
        assert_eq!(up.get(3, 3), 4.0);
    }

    #[test]
    fn center_crop_dims() {
        let img = ImageU8::filled(40, 60, 3, 9);
        let out = img.resize_center_crop(32);
        assert_eq!((out.height, out.width, out.channels), (32, 32, 3));
        assert!(out.data.iter().all(|&v| v == 9));
    }

    #[test]
    fn otsu_splits_two_levels() {
        let mut v = alloc::vec![10.0; 50];
        v.extend(core::iter::repeat(200.0).take(50));
        let t = otsu_threshold(&v);
        assert!(t > 10.0 && t < 200.0);
    }

    #[test]
    fn close_fills_pinhole() {
        let mut m = Mask::filled(7, 7, true);
        m.data[3 * 7 + 3] = false;
        assert!(m.close3().data.iter().all(|&b| b));
    }

    #[test]
    fn downsample_any_marks_overlap() {
        let mut m = Mask::filled(8, 8, false);
        m.data[5 * 8 + 2] = true;
        let d = m.downsample_any(4, 4);
        assert_eq!(d.count(), 1);
        assert!(d.get(2, 1));
    }
}
