//! Feature-level global anomaly synthesis.
//!
//! Normal features `u` are perturbed with Gaussian noise, pushed uphill on
//! the discriminator's anomaly loss by normalized gradient ascent, and
//! periodically projected so that their distance to the reference point
//! (`u` itself under the manifold hypothesis, the center `c` under the
//! hypersphere hypothesis) stays inside a shell.
//!
//! Features are handled as flat `[n, C]` row blocks: one row per location.

use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::rng::Rng;

/// Resampling attempts for a zero displacement before giving up.
pub const ZERO_RESAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Hypothesis {
    /// Shell `[r1, r2]` around each normal feature.
    Manifold { r1: f64, r2: f64 },
    /// Shells around `center`: `[r1, r2]` for synthesized features and
    /// `[r2, r3]` for reprojected local anomaly features.
    Hypersphere { center: Vec<f64>, r1: f64, r2: f64, r3: f64 },
}

impl Hypothesis {
    pub fn manifold(r1: f64) -> Self {
        Hypothesis::Manifold { r1, r2: 2.0 * r1 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Hypothesis::Manifold { r1, r2 } => {
                if !(*r1 > 0.0 && r1 < r2) {
                    return Err(config_err!("manifold radii need 0 < r1 < r2, got {r1}, {r2}"));
                }
            }
            Hypothesis::Hypersphere { r1, r2, r3, center } => {
                if !(*r1 > 0.0 && r1 < r2 && r2 < r3) {
                    return Err(config_err!("hypersphere radii need 0 < r1 < r2 < r3, got {r1}, {r2}, {r3}"));
                }
                if center.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("hypersphere center"));
                }
            }
        }
        Ok(())
    }
}

/// Which synthesis steps run; the three combinations of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GasSteps {
    pub ascent: bool,
    pub projection: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GasConfig {
    pub noise_mean: f64,
    pub noise_std: f64,
    pub eta: f64,
    pub n_step: usize,
    pub n_proj: usize,
    pub hypothesis: Hypothesis,
    pub steps: GasSteps,
}

impl Default for GasConfig {
    fn default() -> Self {
        Self {
            noise_mean: 0.0,
            noise_std: 0.015,
            eta: 0.1,
            n_step: 20,
            n_proj: 4,
            hypothesis: Hypothesis::manifold(1.0),
            steps: GasSteps { ascent: true, projection: true },
        }
    }
}

impl GasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std > 0.0) {
            return Err(config_err!("gas.sigma must be > 0"));
        }
        if !(self.eta > 0.0) {
            return Err(config_err!("gas.eta must be > 0"));
        }
        if self.n_proj == 0 || (self.n_step > 0 && self.n_proj > self.n_step) {
            return Err(config_err!("gas.n_proj must be in 1..=n_step, got {}", self.n_proj));
        }
        self.hypothesis.validate()
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn check_rows(a: &[f64], b: &[f64], channels: usize) -> Result<()> {
    if channels == 0 || a.len() != b.len() || a.len() % channels != 0 {
        return Err(shape_err!("feature blocks of {} and {} values with {channels} channels", a.len(), b.len()));
    }
    Ok(())
}

/// `g = u + eps`, `eps ~ N(mean, std^2)` elementwise.
pub fn add_gaussian_noise(u: &[f64], mean: f64, std: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(std > 0.0) {
        return Err(config_err!("noise std must be > 0"));
    }
    let normal = Normal::new(mean, std).map_err(|_| config_err!("bad noise parameters"))?;
    Ok(u.iter().map(|x| x + normal.sample(rng)).collect())
}

/// Per location: `g + eta * grad / |grad|`. Locations with a zero gradient
/// pass through; their count is returned.
pub fn ascend(g: &mut [f64], grad: &[f64], channels: usize, eta: f64) -> Result<usize> {
    check_rows(g, grad, channels)?;
    let mut skipped = 0;
    for (row, grow) in g.chunks_mut(channels).zip(grad.chunks(channels)) {
        let n = norm(grow);
        if n == 0.0 || !n.is_finite() {
            skipped += 1;
            continue;
        }
        let k = eta / n;
        for (x, d) in row.iter_mut().zip(grow) {
            *x += k * d;
        }
    }
    Ok(skipped)
}

/// Clamp the length of `displacement` into `[lo, hi]`, keeping its
/// direction. Returns `None` for a zero displacement.
pub fn truncate(displacement: &[f64], lo: f64, hi: f64) -> Option<Vec<f64>> {
    let n = norm(displacement);
    if n == 0.0 {
        return None;
    }
    let alpha = if n < lo {
        lo
    } else if n > hi {
        hi
    } else {
        return Some(displacement.to_vec());
    };
    let k = alpha / n;
    Some(displacement.iter().map(|d| d * k).collect())
}

/// Project every row of `points` onto the shell `[lo, hi]` around its
/// anchor row (`anchor_row(i)`). Rows with zero displacement are re-noised
/// up to [`ZERO_RESAMPLES`] times.
fn project_rows<'a>(
    points: &mut [f64],
    channels: usize,
    anchor_row: impl Fn(usize) -> &'a [f64],
    lo: f64,
    hi: f64,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<()> {
    let normal = Normal::new(0.0, noise_std.max(1e-12)).unwrap();
    for (i, row) in points.chunks_mut(channels).enumerate() {
        let anchor = anchor_row(i);
        let mut disp: Vec<f64> = row.iter().zip(anchor).map(|(p, a)| p - a).collect();
        let mut projected = truncate(&disp, lo, hi);
        let mut tries = 0;
        while projected.is_none() {
            if tries == ZERO_RESAMPLES {
                return Err(Error::Exhausted("zero displacement persisted through resampling"));
            }
            disp.iter_mut().for_each(|d| *d = normal.sample(rng));
            projected = truncate(&disp, lo, hi);
            tries += 1;
        }
        for ((r, a), d) in row.iter_mut().zip(anchor).zip(projected.unwrap()) {
            *r = a + d;
        }
    }
    Ok(())
}

/// Manifold projection: distances to the matching normal feature into
/// `[r1, r2]`.
pub fn truncate_manifold(g: &[f64], u: &[f64], channels: usize, r1: f64, r2: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_rows(g, u, channels)?;
    let mut v = g.to_vec();
    project_rows(&mut v, channels, |i| &u[i * channels..(i + 1) * channels], r1, r2, 0.015, rng)?;
    Ok(v)
}

/// Hypersphere projection: distances to `center` into `[lo, hi]`.
pub fn truncate_hypersphere(g: &[f64], center: &[f64], lo: f64, hi: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let channels = center.len();
    check_rows(g, g, channels)?;
    let mut v = g.to_vec();
    project_rows(&mut v, channels, |_| center, lo, hi, 0.015, rng)?;
    Ok(v)
}

/// Local anomaly features pushed into the outer shell `[r2, r3]`.
pub fn reproject_las(u_plus: &[f64], center: &[f64], r2: f64, r3: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    truncate_hypersphere(u_plus, center, r2, r3, rng)
}

/// Fraction of normal features covered by the hypersphere radius.
pub const HYPERSPHERE_COVERAGE: f64 = 0.75;

/// Center is the mean of all rows; `r1` the 75th percentile of distances to
/// it, `r2 = 2 r1`, `r3 = 4 r1`.
pub fn fit_hypersphere(features: &[f64], channels: usize) -> Result<Hypothesis> {
    fit_hypersphere_at(features, channels, HYPERSPHERE_COVERAGE)
}

/// [`fit_hypersphere`] with the radius taken at quantile `coverage` in (0, 1).
pub fn fit_hypersphere_at(features: &[f64], channels: usize, coverage: f64) -> Result<Hypothesis> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(config_err!("hypersphere coverage must be in (0, 1), got {coverage}"));
    }
    if channels == 0 || features.is_empty() || features.len() % channels != 0 {
        return Err(data_err!("no feature vectors to fit a hypersphere"));
    }
    let n = features.len() / channels;
    if n < 100 {
        return Err(data_err!("hypersphere fit needs at least 100 vectors, got {n}"));
    }
    let mut center = alloc::vec![0.0; channels];
    for row in features.chunks(channels) {
        for (c, v) in center.iter_mut().zip(row) {
            *c += v;
        }
    }
    center.iter_mut().for_each(|c| *c /= n as f64);
    let mut dist: Vec<f64> = features
        .chunks(channels)
        .map(|row| norm(&row.iter().zip(&center).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .collect();
    dist.sort_by(f64::total_cmp);
    let r1 = percentile_sorted(&dist, coverage);
    if !(r1 > 0.0) {
        return Err(config_err!("hypersphere radius is zero: normal features are degenerate"));
    }
    Ok(Hypothesis::Hypersphere { center, r1, r2: 2.0 * r1, r3: 4.0 * r1 })
}

/// Linear-interpolated quantile of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = libm::floor(pos) as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

/// Differentiable anomaly loss on synthesized features.
pub trait GasObjective {
    /// Loss value and its gradient with respect to the `[n, C]` block `g`.
    /// Must not modify any model state.
    fn loss_and_grad(&self, g: &[f64], channels: usize) -> Result<(f64, Vec<f64>)>;
}

/// Everything produced by one synthesis run.
#[derive(Debug, Clone, PartialEq)]
pub struct GasBatch {
    pub channels: usize,
    /// Noised features.
    pub noised: Vec<f64>,
    /// Features after the last ascent step, before the final projection.
    pub ascended: Vec<f64>,
    /// Synthesized anomaly features.
    pub output: Vec<f64>,
    /// Reprojected local anomaly features (hypersphere only).
    pub las_reprojected: Option<Vec<f64>>,
    /// Loss trace: one value per ascent step.
    pub losses: Vec<f64>,
    pub skipped_locations: usize,
}

impl GasBatch {
    /// `output - reference` per element, where the reference is `u` or `c`.
    pub fn displacement(&self, u: &[f64], hypothesis: &Hypothesis) -> Vec<f64> {
        match hypothesis {
            Hypothesis::Manifold { .. } => self.output.iter().zip(u).map(|(v, x)| v - x).collect(),
            Hypothesis::Hypersphere { center, .. } => {
                self.output.iter().enumerate().map(|(i, v)| v - center[i % self.channels]).collect()
            }
        }
    }
}

fn project(config: &GasConfig, g: &[f64], u: &[f64], channels: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    match &config.hypothesis {
        Hypothesis::Manifold { r1, r2 } => truncate_manifold(g, u, channels, *r1, *r2, rng),
        Hypothesis::Hypersphere { center, r1, r2, .. } => {
            if center.len() != channels {
                return Err(shape_err!("center has {} channels, features {channels}", center.len()));
            }
            truncate_hypersphere(g, center, *r1, *r2, rng)
        }
    }
}

/// Noise, `n_step` ascent iterations with a projection every `n_proj`
/// steps, and a final projection. Under the hypersphere hypothesis the local
/// anomaly features are reprojected once.
pub fn run_gas(
    u: &[f64],
    channels: usize,
    las_features: Option<&[f64]>,
    objective: &dyn GasObjective,
    config: &GasConfig,
    rng: &mut Rng,
) -> Result<GasBatch> {
    config.validate()?;
    check_rows(u, u, channels)?;
    let noised = add_gaussian_noise(u, config.noise_mean, config.noise_std, rng)?;
    let mut g = noised.clone();
    let mut losses = Vec::new();
    let mut skipped = 0;
    if config.steps.ascent {
        for step in 1..=config.n_step {
            let (loss, grad) = objective.loss_and_grad(&g, channels)?;
            losses.push(loss);
            skipped += ascend(&mut g, &grad, channels, config.eta)?;
            if config.steps.projection && step % config.n_proj == 0 && step != config.n_step {
                g = project(config, &g, u, channels, rng)?;
            }
        }
    }
    let ascended = g.clone();
    let output = if config.steps.projection { project(config, &g, u, channels, rng)? } else { g };
    let las_reprojected = match (&config.hypothesis, las_features) {
        (Hypothesis::Hypersphere { center, r2, r3, .. }, Some(las)) if config.steps.projection => {
            Some(reproject_las(las, center, *r2, *r3, rng)?)
        }
        _ => None,
    };
    Ok(GasBatch { channels, noised, ascended, output, las_reprojected, losses, skipped_locations: skipped })
}
