//! Anomaly maps and image scores from a trained adaptor and discriminator.

use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::featpipe::{adapt, AdaptorParams, FeatureMap};
use crate::image::GrayF64;
use crate::las::{convolve_plane, gaussian_kernel};
use crate::model::Discriminator;

/// Smoothing sigma at 288x288 input.
pub const SMOOTH_SIGMA_288: f64 = 4.0;

/// Default smoothing sigma scaled to an image of the given size.
pub fn default_sigma(height: usize, width: usize) -> f64 {
    SMOOTH_SIGMA_288 * height.max(width) as f64 / 288.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// Discriminator confidences on the feature grid.
    pub grid: GrayF64,
    /// Upsampled and smoothed pixel anomaly map.
    pub pixels: GrayF64,
    /// Image score: maximum of the feature-grid confidences.
    pub image_score: f64,
}

/// Bilinear upsample (corner aligned) followed by Gaussian smoothing.
pub fn pixel_map(grid: &GrayF64, height: usize, width: usize, sigma: f64) -> Result<GrayF64> {
    if !(sigma >= 0.0) {
        return Err(config_err!("smoothing sigma must be >= 0"));
    }
    let up = grid.resize_corners(height, width);
    if sigma == 0.0 {
        return Ok(up);
    }
    Ok(convolve_plane(&up, &gaussian_kernel(sigma)))
}

/// Score pre-adaptor features `t`.
pub fn score_features(
    t: &FeatureMap,
    adaptor: &AdaptorParams,
    discriminator: &Discriminator,
    size: (usize, usize),
    sigma: f64,
) -> Result<ScoreMap> {
    let u = adapt(t, adaptor)?;
    let z = discriminator.discriminate(&u)?;
    score_grid(GrayF64::new(u.height(), u.width(), z)?, size, sigma)
}

/// Build the score map from an already computed confidence grid.
pub fn score_grid(grid: GrayF64, size: (usize, usize), sigma: f64) -> Result<ScoreMap> {
    let image_score = grid.max();
    let pixels = pixel_map(&grid, size.0, size.1, sigma)?;
    Ok(ScoreMap { grid, pixels, image_score })
}

/// Image scores of several maps, in order.
pub fn image_scores(maps: &[ScoreMap]) -> Vec<f64> {
    maps.iter().map(|m| m.image_score).collect()
}
