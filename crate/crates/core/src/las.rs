//! Image-level local anomaly synthesis.
//!
//! Two Perlin masks are combined (intersection, union or the first alone)
//! and restricted to the object foreground. A texture image, passed through
//! three randomly drawn augmentations, is blended into the normal image under
//! that mask with a transparency coefficient `beta`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::image::{otsu_threshold, round_u8, GrayF64, ImageU8, Mask};
use crate::rng::Rng;

/// Number of resampling attempts before an empty mask becomes an error.
pub const MASK_RETRIES: usize = 5;

/// Perlin pairs tried per anomaly before its mask counts as empty. The
/// branch is drawn once, so sparse intersections need more attempts.
pub const ANOMALY_MASK_RETRIES: usize = 50;

/// Largest lattice resolution exponent at the reference input size.
pub const MAX_RESOLUTION_LOG2: u32 = 5;
pub const REFERENCE_SIZE: usize = 288;

/// 2-D gradient-lattice noise sampled on an `height x width` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PerlinField {
    pub values: GrayF64,
    pub resolution: (usize, usize),
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl PerlinField {
    /// Noise with `res_y x res_x` lattice cells over the raster, scaled by
    /// `sqrt(2)` so values lie in `[-1, 1]`.
    pub fn generate(height: usize, width: usize, resolution: (usize, usize), rng: &mut Rng) -> Self {
        let (ry, rx) = resolution;
        let gradients: Vec<(f64, f64)> = (0..(ry + 1) * (rx + 1))
            .map(|_| {
                let angle = rng.gen::<f64>() * core::f64::consts::TAU;
                (libm::cos(angle), libm::sin(angle))
            })
            .collect();
        let grad = |gy: usize, gx: usize| gradients[gy * (rx + 1) + gx];
        let mut values = GrayF64::zeros(height, width);
        for y in 0..height {
            let py = y as f64 * ry as f64 / height as f64;
            let cy = (libm::floor(py) as usize).min(ry - 1);
            let fy = py - cy as f64;
            for x in 0..width {
                let px = x as f64 * rx as f64 / width as f64;
                let cx = (libm::floor(px) as usize).min(rx - 1);
                let fx = px - cx as f64;
                let dot = |oy: usize, ox: usize| {
                    let (gy, gx) = grad(cy + oy, cx + ox);
                    gy * (fy - oy as f64) + gx * (fx - ox as f64)
                };
                let (u, v) = (fade(fx), fade(fy));
                let top = dot(0, 0) + u * (dot(0, 1) - dot(0, 0));
                let bottom = dot(1, 0) + u * (dot(1, 1) - dot(1, 0));
                values.data[y * width + x] = core::f64::consts::SQRT_2 * (top + v * (bottom - top));
            }
        }
        Self { values, resolution }
    }

    /// Lattice resolution `2^k` per axis with `k` uniform in `0..=max_log2`.
    pub fn random_resolution(max_log2: u32, rng: &mut Rng) -> (usize, usize) {
        (1 << rng.gen_range(0..=max_log2), 1 << rng.gen_range(0..=max_log2))
    }

    pub fn binarize(&self, threshold: f64) -> Mask {
        let data = self.values.data.iter().map(|v| v.abs() >= threshold).collect();
        Mask { height: self.values.height, width: self.values.width, data }
    }
}

/// Largest resolution exponent for an image of `size` pixels that keeps
/// lattice cells as wide as at the reference size.
pub fn resolution_log2_for(size: usize) -> u32 {
    let k = libm::round(libm::log2(size as f64 * (1u32 << MAX_RESOLUTION_LOG2) as f64 / REFERENCE_SIZE as f64));
    k.clamp(0.0, MAX_RESOLUTION_LOG2 as f64) as u32
}

/// Binary Perlin mask `|noise| >= threshold`, resampled when empty.
pub fn perlin_mask(height: usize, width: usize, threshold: f64, rng: &mut Rng) -> Result<Mask> {
    perlin_mask_with(height, width, threshold, MAX_RESOLUTION_LOG2, rng)
}

pub fn perlin_mask_with(height: usize, width: usize, threshold: f64, max_log2: u32, rng: &mut Rng) -> Result<Mask> {
    for _ in 0..=MASK_RETRIES {
        let res = PerlinField::random_resolution(max_log2, rng);
        let mask = PerlinField::generate(height, width, res, rng).binarize(threshold);
        if mask.any() {
            return Ok(mask);
        }
    }
    Err(Error::Exhausted("perlin mask stayed empty"))
}

/// Which side of the Otsu split is the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Bright,
    Dark,
    /// Texture categories: the whole image is foreground.
    Full,
}

/// Foreground mask by Otsu binarization followed by a 3x3 close.
pub fn foreground_mask(image: &ImageU8, polarity: Polarity) -> Mask {
    let (h, w) = (image.height, image.width);
    if polarity == Polarity::Full {
        return Mask::filled(h, w, true);
    }
    let gray = image.to_gray();
    let t = otsu_threshold(&gray.data);
    let lo = gray.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gray.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Mask::filled(h, w, true);
    }
    let data = gray
        .data
        .iter()
        .map(|&v| match polarity {
            Polarity::Bright => v > t,
            _ => v <= t,
        })
        .collect();
    let mask = Mask { height: h, width: w, data }.close3();
    if mask.any() {
        mask
    } else {
        Mask::filled(h, w, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskBranch {
    Intersect,
    Union,
    Single,
}

/// Output of the mask algebra together with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMask {
    pub mask: Mask,
    pub m1: Mask,
    pub m2: Mask,
    pub foreground: Mask,
    pub branch: MaskBranch,
}

impl AnomalyMask {
    /// Feature-grid target: a cell is anomalous when any covered pixel is.
    pub fn feature_mask(&self, height: usize, width: usize) -> Mask {
        self.mask.downsample_any(height, width)
    }
}

/// Which branches of the mask algebra are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskOps {
    pub intersect: bool,
    pub union: bool,
    pub foreground: bool,
}

impl Default for MaskOps {
    fn default() -> Self {
        Self { intersect: true, union: true, foreground: true }
    }
}

pub fn branch_for(p_m: f64, alpha: f64) -> MaskBranch {
    if p_m <= alpha {
        MaskBranch::Intersect
    } else if p_m <= 2.0 * alpha {
        MaskBranch::Union
    } else {
        MaskBranch::Single
    }
}

/// `p_m <= alpha`: `(m1 & m2) & mf`; `alpha < p_m <= 2 alpha`:
/// `(m1 | m2) & mf`; otherwise `m1 & mf`.
pub fn combine_masks(m1: &Mask, m2: &Mask, foreground: &Mask, p_m: f64, alpha: f64) -> Result<AnomalyMask> {
    combine_masks_with(m1, m2, foreground, p_m, alpha, MaskOps::default())
}

pub fn combine_masks_with(m1: &Mask, m2: &Mask, foreground: &Mask, p_m: f64, alpha: f64, ops: MaskOps) -> Result<AnomalyMask> {
    if m2.height != m1.height || m2.width != m1.width || foreground.height != m1.height || foreground.width != m1.width {
        return Err(shape_err!("mask shapes differ"));
    }
    let branch = match branch_for(p_m, alpha) {
        MaskBranch::Intersect if ops.intersect => MaskBranch::Intersect,
        MaskBranch::Union if ops.union => MaskBranch::Union,
        _ => MaskBranch::Single,
    };
    let shape = match branch {
        MaskBranch::Intersect => m1.and(m2)?,
        MaskBranch::Union => m1.or(m2)?,
        MaskBranch::Single => m1.clone(),
    };
    let fg = if ops.foreground { foreground.clone() } else { Mask::filled(m1.height, m1.width, true) };
    Ok(AnomalyMask { mask: shape.and(&fg)?, m1: m1.clone(), m2: m2.clone(), foreground: fg, branch })
}

/// Registered texture augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    Identity,
    HFlip,
    VFlip,
    Rotate90,
    /// Brightness factor drawn from `[0.7, 1.3]`.
    Brightness,
    /// Contrast factor drawn from `[0.7, 1.3]` around the mean.
    Contrast,
    ChannelShuffle,
    /// Gaussian blur with sigma 1.
    Blur,
    Sharpen,
    /// Invert values above 128.
    Solarize,
}

impl Augment {
    /// The nine default augmentations.
    pub const DEFAULT_SET: [Augment; 9] = [
        Augment::HFlip,
        Augment::VFlip,
        Augment::Rotate90,
        Augment::Brightness,
        Augment::Contrast,
        Augment::ChannelShuffle,
        Augment::Blur,
        Augment::Sharpen,
        Augment::Solarize,
    ];

    pub fn apply(self, img: &ImageU8, rng: &mut Rng) -> ImageU8 {
        match self {
            Augment::Identity => img.clone(),
            Augment::HFlip => remap(img, img.height, img.width, |y, x| (y, img.width - 1 - x)),
            Augment::VFlip => remap(img, img.height, img.width, |y, x| (img.height - 1 - y, x)),
            Augment::Rotate90 => {
                // clockwise: out(y, x) = in(H-1-x, y), output W x H
                let rotated = remap(img, img.width, img.height, |y, x| (img.height - 1 - x, y));
                if rotated.height == img.height {
                    rotated
                } else {
                    rotated.resize(img.height, img.width)
                }
            }
            Augment::Brightness => {
                let k = rng.gen_range(0.7..=1.3);
                pointwise(img, |v| v * k)
            }
            Augment::Contrast => {
                let k = rng.gen_range(0.7..=1.3);
                let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len().max(1) as f64;
                pointwise(img, |v| mean + (v - mean) * k)
            }
            Augment::ChannelShuffle => {
                if img.channels == 1 {
                    return img.clone();
                }
                let mut order = [0usize, 1, 2];
                order.shuffle(rng);
                let mut out = img.clone();
                for px in 0..img.height * img.width {
                    for c in 0..3 {
                        out.data[px * 3 + c] = img.data[px * 3 + order[c]];
                    }
                }
                out
            }
            Augment::Blur => convolve(img, &gaussian_kernel(1.0)),
            Augment::Sharpen => {
                let blurred = convolve(img, &gaussian_kernel(1.0));
                let data = img
                    .data
                    .iter()
                    .zip(&blurred.data)
                    .map(|(&v, &b)| round_u8(2.0 * v as f64 - b as f64))
                    .collect();
                ImageU8 { data, ..img.clone() }
            }
            Augment::Solarize => ImageU8 { data: img.data.iter().map(|&v| if v >= 128 { 255 - v } else { v }).collect(), ..img.clone() },
        }
    }
}

fn remap(img: &ImageU8, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> ImageU8 {
    let mut out = ImageU8::filled(height, width, img.channels, 0);
    for y in 0..height {
        for x in 0..width {
            let (sy, sx) = src(y, x);
            for c in 0..img.channels {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    out
}

fn pointwise(img: &ImageU8, f: impl Fn(f64) -> f64) -> ImageU8 {
    ImageU8 { data: img.data.iter().map(|&v| round_u8(f(v as f64))).collect(), ..img.clone() }
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution of a real plane, replicate-edge.
pub fn convolve_plane(plane: &GrayF64, kernel: &[f64]) -> GrayF64 {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (plane.height as isize, plane.width as isize);
    let mut tmp = GrayF64::zeros(plane.height, plane.width);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let xx = (x + i as isize - r).clamp(0, w - 1);
                acc += k * plane.get(y as usize, xx as usize);
            }
            tmp.data[(y * w + x) as usize] = acc;
        }
    }
    let mut out = GrayF64::zeros(plane.height, plane.width);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let yy = (y + i as isize - r).clamp(0, h - 1);
                acc += k * tmp.get(yy as usize, x as usize);
            }
            out.data[(y * w + x) as usize] = acc;
        }
    }
    out
}

fn convolve(img: &ImageU8, kernel: &[f64]) -> ImageU8 {
    let mut out = img.clone();
    for c in 0..img.channels {
        let plane = GrayF64 {
            height: img.height,
            width: img.width,
            data: (0..img.height * img.width).map(|i| img.data[i * img.channels + c] as f64).collect(),
        };
        for (i, v) in convolve_plane(&plane, kernel).data.iter().enumerate() {
            out.data[i * img.channels + c] = round_u8(*v);
        }
    }
    out
}

/// Apply `draw_count` distinct augmentations drawn without replacement from
/// `registry`, in draw order. Returns the image and the drawn operations.
pub fn augment_texture(texture: &ImageU8, registry: &[Augment], draw_count: usize, rng: &mut Rng) -> Result<(ImageU8, Vec<Augment>)> {
    if draw_count > registry.len() {
        return Err(config_err!("cannot draw {draw_count} of {} augmentations", registry.len()));
    }
    let picks: Vec<Augment> = rand::seq::index::sample(rng, registry.len(), draw_count).into_iter().map(|i| registry[i]).collect();
    let mut img = texture.clone();
    for op in &picks {
        img = op.apply(&img, rng);
    }
    Ok((img, picks))
}

/// `x (1 - m) + ((1 - beta) t + beta x) m`, rounded and clamped to bytes.
pub fn overlay_fuse(image: &ImageU8, texture: &ImageU8, mask: &Mask, beta: f64) -> Result<ImageU8> {
    if !image.same_dims(texture) || mask.height != image.height || mask.width != image.width {
        return Err(shape_err!("fusion operands differ in shape"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(config_err!("beta {beta} outside [0,1]"));
    }
    let mut out = image.clone();
    for (px, &inside) in mask.data.iter().enumerate() {
        if !inside {
            continue;
        }
        for c in 0..image.channels {
            let i = px * image.channels + c;
            let v = (1.0 - beta) * texture.data[i] as f64 + beta * image.data[i] as f64;
            out.data[i] = round_u8(v);
        }
    }
    Ok(out)
}

/// Transparency prior: normal with rejection outside `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPrior {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for BetaPrior {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.1, lo: 0.2, hi: 0.8 }
    }
}

impl BetaPrior {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        if self.std == 0.0 {
            return self.mean.clamp(self.lo, self.hi);
        }
        let normal = Normal::new(self.mean, self.std).expect("validated std");
        loop {
            let b = normal.sample(rng);
            if (self.lo..=self.hi).contains(&b) {
                return b;
            }
        }
    }
}

/// Settings for one local anomaly synthesis draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LasConfig {
    pub alpha: f64,
    pub beta: BetaPrior,
    pub augmentations: Vec<Augment>,
    pub draw_count: usize,
    pub threshold: f64,
    pub mask_ops: MaskOps,
    pub polarity: Polarity,
    /// Largest Perlin lattice exponent per axis.
    pub max_resolution_log2: u32,
}

impl Default for LasConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: BetaPrior::default(),
            augmentations: Augment::DEFAULT_SET.to_vec(),
            draw_count: 3,
            threshold: 0.5,
            mask_ops: MaskOps::default(),
            polarity: Polarity::Full,
            max_resolution_log2: MAX_RESOLUTION_LOG2,
        }
    }
}

impl LasConfig {
    /// Defaults with the Perlin resolution range scaled to `size`.
    pub fn for_size(size: usize) -> Self {
        Self { max_resolution_log2: resolution_log2_for(size), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(config_err!("las.alpha must be in (0, 1/2], got {}", self.alpha));
        }
        let b = &self.beta;
        if !(0.0 < b.lo && b.lo <= b.hi && b.hi < 1.0) || b.std < 0.0 || !b.std.is_finite() {
            return Err(config_err!("las.beta bounds must satisfy 0 < lo <= hi < 1 with std >= 0"));
        }
        if self.max_resolution_log2 > 8 {
            return Err(config_err!("las.max_resolution_log2 must be <= 8"));
        }
        if self.draw_count > self.augmentations.len() {
            return Err(config_err!("las.draw_count {} exceeds {} augmentations", self.draw_count, self.augmentations.len()));
        }
        Ok(())
    }
}

/// One synthesized local anomaly.
#[derive(Debug, Clone, PartialEq)]
pub struct LasSample {
    pub image: ImageU8,
    pub mask: AnomalyMask,
    pub beta: f64,
    pub texture_ops: Vec<Augment>,
}

/// Full synthesis for one normal image. `beta` overrides the prior when
/// given.
pub fn synthesize(
    image: &ImageU8,
    foreground: &Mask,
    texture: &ImageU8,
    config: &LasConfig,
    beta: Option<f64>,
    rng: &mut Rng,
) -> Result<LasSample> {
    let (h, w) = (image.height, image.width);
    let mut mask = None;
    let p_m: f64 = rng.gen();
    for _ in 0..=ANOMALY_MASK_RETRIES {
        let m1 = perlin_mask_with(h, w, config.threshold, config.max_resolution_log2, rng)?;
        let m2 = perlin_mask_with(h, w, config.threshold, config.max_resolution_log2, rng)?;
        let m = combine_masks_with(&m1, &m2, foreground, p_m, config.alpha, config.mask_ops)?;
        if m.mask.any() {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or(Error::Exhausted("anomaly mask empty after foreground restriction"))?;
    let texture = fit_texture(texture, image);
    let (texture, ops) = augment_texture(&texture, &config.augmentations, config.draw_count, rng)?;
    let beta = match beta {
        Some(b) => b,
        None => config.beta.sample(rng),
    };
    let fused = overlay_fuse(image, &texture, &mask.mask, beta)?;
    Ok(LasSample { image: fused, mask, beta, texture_ops: ops })
}

/// One weak-defect image: `background` fused with an augmented copy of
/// `foreground`, both indices into the normal pool.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakSample {
    pub beta: f64,
    pub index: usize,
    pub background: usize,
    pub foreground: usize,
    pub sample: LasSample,
}

/// Weak-defect set over a pool of normal images: for each `beta`,
/// `per_beta` images whose anomalous foreground is another normal image of
/// the pool. Sample `k` draws from the stream `derive(seed, k)` for every
/// beta, so the subsets share masks and augmentations and differ only in
/// transparency.
pub fn generate_weak_set(normals: &[ImageU8], betas: &[f64], per_beta: usize, config: &LasConfig, seed: u64) -> Result<Vec<WeakSample>> {
    config.validate()?;
    if normals.len() < 2 {
        return Err(crate::error::data_err!("weak set needs at least 2 normal images, got {}", normals.len()));
    }
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(config_err!("beta {b} outside [0,1]"));
    }
    let n = normals.len();
    let mut out = Vec::with_capacity(betas.len() * per_beta);
    for &beta in betas {
        for k in 0..per_beta {
            let mut rng = crate::rng::derive(seed, k as u64);
            let background = k % n;
            let foreground = (background + rng.gen_range(1..n)) % n;
            let bg = &normals[background];
            let fg = foreground_mask(bg, config.polarity);
            let sample = synthesize(bg, &fg, &normals[foreground], config, Some(beta), &mut rng)?;
            out.push(WeakSample { beta, index: k, background, foreground, sample });
        }
    }
    Ok(out)
}

/// Resize and convert `texture` to match `like`.
pub fn fit_texture(texture: &ImageU8, like: &ImageU8) -> ImageU8 {
    let t = if texture.height != like.height || texture.width != like.width {
        texture.resize_center_crop(like.height.max(like.width)).resize(like.height, like.width)
    } else {
        texture.clone()
    };
    match (t.channels, like.channels) {
        (1, 3) => t.to_rgb(),
        (3, 1) => ImageU8::from_gray(&t.to_gray()),
        _ => t,
    }
}

/// Band-limited noise, stripes and blobs mixed into a random texture.
pub fn procedural_texture(height: usize, width: usize, channels: usize, rng: &mut Rng) -> ImageU8 {
    let res = (1usize << rng.gen_range(3..=5u32), 1usize << rng.gen_range(3..=5u32));
    let noise = PerlinField::generate(height, width, res, rng);
    let blobs = PerlinField::generate(height, width, (2, 2), rng);
    let freq = rng.gen_range(0.15..0.6);
    let angle = rng.gen_range(0.0..core::f64::consts::PI);
    let (ca, sa) = (libm::cos(angle), libm::sin(angle));
    let w_noise = rng.gen_range(0.3..1.0);
    let w_stripe = rng.gen_range(0.0..1.0);
    let w_blob = rng.gen_range(0.0..1.0);
    let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.6..1.4)).collect();
    let base = rng.gen_range(60.0..200.0);
    let mut out = ImageU8::filled(height, width, channels, 0);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let stripe = libm::sin(freq * (ca * x as f64 + sa * y as f64) * core::f64::consts::TAU);
            let blob = if blobs.values.data[i] > 0.1 { 1.0 } else { -1.0 };
            let v = w_noise * noise.values.data[i] * 2.0 + w_stripe * stripe + w_blob * blob * 0.5;
            for (c, t) in tint.iter().enumerate() {
                out.set(y, x, c, round_u8(base + 70.0 * v * t));
            }
        }
    }
    out
}
