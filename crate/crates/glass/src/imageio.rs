//! PNG/BMP conversion between the `image` crate and core rasters.

use std::io::Cursor;
use std::path::Path;

use glass_core::image::{GrayF64, ImageU8, Mask};
use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::files;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp"];

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = files::read(path)?;
    let format = ImageFormat::from_path(path).map_err(image_err(path))?;
    image::load_from_memory_with_format(&bytes, format).map_err(image_err(path))
}

/// Load as 8-bit gray or RGB; alpha is dropped and 16-bit data rescaled.
pub fn load_image(path: &Path) -> Result<ImageU8> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data) = if img.color().has_color() { (3, img.into_rgb8().into_raw()) } else { (1, img.into_luma8().into_raw()) };
    ImageU8::new(h, w, channels, data).map_err(|source| Error::Core { context: path.display().to_string(), source })
}

/// Any nonzero pixel is anomalous.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = decode(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Mask { height: h, width: w, data: img.into_raw().into_iter().map(|v| v != 0).collect() })
}

fn encode_png(path: &Path, img: DynamicImage) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(image_err(path))?;
    files::write_atomic(path, &buf.into_inner())
}

fn to_dynamic(img: &ImageU8) -> DynamicImage {
    let (w, h) = (img.width as u32, img.height as u32);
    if img.channels == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, img.data.clone()).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, img.data.clone()).expect("sized buffer"))
    }
}

pub fn save_image(path: &Path, img: &ImageU8) -> Result<()> {
    encode_png(path, to_dynamic(img))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_image(path, &ImageU8 { height: mask.height, width: mask.width, channels: 1, data })
}

/// Score in `[0, 1]` to a 16-bit level.
pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// 16-bit grayscale PNG of a score map with values in `[0, 1]`.
pub fn save_score16(path: &Path, scores: &GrayF64) -> Result<()> {
    let data: Vec<u16> = scores.data.iter().map(|&v| quantize16(v)).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(scores.width as u32, scores.height as u32, data).expect("sized buffer");
    encode_png(path, DynamicImage::ImageLuma16(buf))
}

pub fn load_score16(path: &Path) -> Result<GrayF64> {
    let img = decode(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(GrayF64 { height: h, width: w, data: img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect() })
}

/// Blue-to-red ramp for a value in `[0, 1]`.
pub fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Half-and-half blend of the image with the heat-mapped scores.
pub fn overlay(img: &ImageU8, scores: &GrayF64) -> ImageU8 {
    let rgb = img.to_rgb();
    let mut out = rgb.clone();
    for y in 0..img.height.min(scores.height) {
        for x in 0..img.width.min(scores.width) {
            let h = heat(scores.get(y, x));
            for (c, hc) in h.iter().enumerate() {
                let v = (rgb.get(y, x, c) as u16 + *hc as u16 + 1) / 2;
                out.set(y, x, c, v as u8);
            }
        }
    }
    out
}

/// Plane of arbitrary range stretched to 8 bits for viewing.
pub fn stretch(plane: &GrayF64) -> ImageU8 {
    let lo = plane.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = plane.data.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect();
    ImageU8 { height: plane.height, width: plane.width, channels: 1, data }
}
