//! Per-category choice between the manifold and hypersphere hypotheses.
//!
//! The mean training image is transformed with a 2-D FFT, center-shifted,
//! log-scaled and binarized with Otsu. Compactness is the share of positive
//! spectrum pixels that fall inside a central low-frequency window; compact
//! spectra indicate a concentrated category and select the hypersphere.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, data_err, Result};
use crate::image::{otsu_threshold, GrayF64, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Manifold,
    Hypersphere,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Manifold => "manifold",
            Decision::Hypersphere => "hypersphere",
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramReport {
    pub mean_image: GrayF64,
    /// Center-shifted `log1p` magnitude spectrum (zero-padded size).
    pub spectrum: GrayF64,
    pub binary: Mask,
    pub compactness: f64,
    pub decision: Decision,
    pub threshold: f64,
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * core::f64::consts::TAU / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = (libm::cos(ang * k as f64), libm::sin(ang * k as f64));
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        re.iter_mut().for_each(|v| *v *= s);
        im.iter_mut().for_each(|v| *v *= s);
    }
}

/// 2-D FFT of a real plane zero-padded to powers of two. Returns
/// `(rows, cols, re, im)`.
pub fn fft2(plane: &GrayF64) -> (usize, usize, Vec<f64>, Vec<f64>) {
    let rows = plane.height.next_power_of_two();
    let cols = plane.width.next_power_of_two();
    let mut re = vec![0.0; rows * cols];
    let mut im = vec![0.0; rows * cols];
    for y in 0..plane.height {
        re[y * cols..y * cols + plane.width].copy_from_slice(&plane.data[y * plane.width..(y + 1) * plane.width]);
    }
    for y in 0..rows {
        fft_inplace(&mut re[y * cols..(y + 1) * cols], &mut im[y * cols..(y + 1) * cols], false);
    }
    let (mut cr, mut ci) = (vec![0.0; rows], vec![0.0; rows]);
    for x in 0..cols {
        for y in 0..rows {
            cr[y] = re[y * cols + x];
            ci[y] = im[y * cols + x];
        }
        fft_inplace(&mut cr, &mut ci, false);
        for y in 0..rows {
            re[y * cols + x] = cr[y];
            im[y * cols + x] = ci[y];
        }
    }
    (rows, cols, re, im)
}

/// Center-shifted `log1p |F|` of a plane.
pub fn log_spectrum(plane: &GrayF64) -> GrayF64 {
    let (rows, cols, re, im) = fft2(plane);
    let mut out = GrayF64::zeros(rows, cols);
    for y in 0..rows {
        for x in 0..cols {
            let i = y * cols + x;
            let mag = libm::sqrt(re[i] * re[i] + im[i] * im[i]);
            let (sy, sx) = ((y + rows / 2) % rows, (x + cols / 2) % cols);
            out.data[sy * cols + sx] = libm::log1p(mag);
        }
    }
    out
}

/// Pixel mean of the images, resized to the first image's size when needed.
pub fn mean_image(images: &[GrayF64]) -> Result<GrayF64> {
    let first = images.first().ok_or_else(|| data_err!("no images for spectrogram analysis"))?;
    let mut acc = GrayF64::zeros(first.height, first.width);
    for img in images {
        let resized;
        let img = if img.height == first.height && img.width == first.width {
            img
        } else {
            resized = img.resize_centers(first.height, first.width);
            &resized
        };
        for (a, v) in acc.data.iter_mut().zip(&img.data) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    acc.data.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Share of positive pixels inside the centered square of side `rows / 4`.
pub fn compactness(binary: &Mask) -> f64 {
    let side = (binary.height / 4).max(1);
    let side_x = (binary.width / 4).max(1);
    let (y0, x0) = (binary.height / 2 - side / 2, binary.width / 2 - side_x / 2);
    let total = binary.count();
    if total == 0 {
        return 0.0;
    }
    let mut inside = 0;
    for y in y0..y0 + side {
        for x in x0..x0 + side_x {
            if binary.get(y, x) {
                inside += 1;
            }
        }
    }
    inside as f64 / total as f64
}

pub fn choose_hypothesis(images: &[GrayF64], threshold: f64) -> Result<SpectrogramReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(config_err!("compactness threshold must be in [0,1], got {threshold}"));
    }
    let mean = mean_image(images)?;
    // unit peak so that a global brightness scale does not move the spectrum
    let peak = mean.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let normalized = if peak > 0.0 {
        GrayF64 { data: mean.data.iter().map(|v| v / peak).collect(), ..mean.clone() }
    } else {
        mean.clone()
    };
    let spectrum = log_spectrum(&normalized);
    let t = otsu_threshold(&spectrum.data);
    let binary = Mask { height: spectrum.height, width: spectrum.width, data: spectrum.data.iter().map(|&v| v > t).collect() };
    let compactness = compactness(&binary);
    let decision = if compactness >= threshold { Decision::Hypersphere } else { Decision::Manifold };
    Ok(SpectrogramReport { mean_image: mean, spectrum, binary, compactness, decision, threshold })
}
