//! Feature pipeline: multi-level backbone features to adapted feature maps.
//!
//! Raw level features (from an external backbone, or from [`toy_extract`])
//! are locally aggregated with a `p x p` mean window, upsampled to the finest
//! level and concatenated along channels. A single square linear layer (the
//! adaptor) then maps every location.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{config_err, data_err, shape_err, Result};
use crate::image::{GrayF64, ImageU8};
use crate::ndgrad::{matmul_raw, Tensor};
use crate::rng::Rng;

/// `height x width x channels` real grid, row-major (h, then w, then c).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!("{height}x{width}x{channels} grid needs {} values, got {}", height * width * channels, data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        let i = (h * self.width + w) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, h: usize, w: usize) -> &mut [f64] {
        let i = (h * self.width + w) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// One channel as a plane.
    pub fn plane(&self, c: usize) -> GrayF64 {
        let data = (0..self.locations()).map(|i| self.data[i * self.channels + c]).collect();
        GrayF64 { height: self.height, width: self.width, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub id: String,
    pub grid: Grid,
}

/// Per-level raw features of one image, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    pub levels: Vec<Level>,
}

impl LevelFeatures {
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        if levels.is_empty() {
            return Err(data_err!("feature stack has no levels"));
        }
        for pair in levels.windows(2) {
            if pair[1].grid.height > pair[0].grid.height || pair[1].grid.width > pair[0].grid.width {
                return Err(data_err!("levels must be ordered finest first ({} before {})", pair[0].id, pair[1].id));
            }
        }
        if levels.iter().any(|l| !l.grid.is_finite()) {
            return Err(crate::Error::NonFinite("level features"));
        }
        Ok(Self { levels })
    }

    pub fn total_channels(&self) -> usize {
        self.levels.iter().map(|l| l.grid.channels).sum()
    }
}

/// Per-location feature vectors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: Grid,
    pub provenance: String,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.grid.height
    }
    pub fn width(&self) -> usize {
        self.grid.width
    }
    pub fn channels(&self) -> usize {
        self.grid.channels
    }
}

/// Mean over a `p x p` window with replicate-edge padding. Odd `p` centers
/// the window; even `p` puts the extra row/column on the top-left side.
pub fn neighborhood_aggregate(grid: &Grid, p: usize) -> Result<Grid> {
    if p < 1 {
        return Err(config_err!("patch size must be >= 1"));
    }
    if p > grid.height.min(grid.width) {
        return Err(config_err!("patch size {p} exceeds {}x{} grid", grid.height, grid.width));
    }
    if p == 1 {
        return Ok(grid.clone());
    }
    let before = (p / 2) as isize;
    let after = ((p - 1) / 2) as isize;
    let (h, w, c) = (grid.height as isize, grid.width as isize, grid.channels);
    let norm = 1.0 / (p * p) as f64;
    let mut out = Grid::zeros(grid.height, grid.width, c);
    for y in 0..h {
        for x in 0..w {
            let dst = out.at_mut(y as usize, x as usize);
            for dy in -before..=after {
                let yy = (y + dy).clamp(0, h - 1) as usize;
                for dx in -before..=after {
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    for (d, s) in dst.iter_mut().zip(grid.at(yy, xx)) {
                        *d += s;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d *= norm;
            }
        }
    }
    Ok(out)
}

/// Upsample every level to `target` (corner-aligned bilinear) and
/// concatenate channels in level order.
pub fn merge_levels(levels: &[Grid], target: (usize, usize)) -> Result<Grid> {
    if levels.is_empty() {
        return Err(data_err!("no levels to merge"));
    }
    let (th, tw) = target;
    let channels: usize = levels.iter().map(|g| g.channels).sum();
    let mut out = Grid::zeros(th, tw, channels);
    let mut offset = 0;
    for g in levels {
        for c in 0..g.channels {
            let plane = g.plane(c);
            let up = if (g.height, g.width) == target { plane } else { plane.resize_corners(th, tw) };
            for (i, v) in up.data.iter().enumerate() {
                out.data[i * channels + offset + c] = *v;
            }
        }
        offset += g.channels;
    }
    Ok(out)
}

/// Aggregation and merging settings applied to raw level features.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub patch: usize,
    /// Indices of the levels to use; empty selects all.
    pub levels: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { patch: 3, levels: Vec::new() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.patch) {
            return Err(config_err!("featpipe.patch must be in 1..=8, got {}", self.patch));
        }
        Ok(())
    }

    /// Pre-adaptor feature map `t_i`.
    pub fn merge(&self, features: &LevelFeatures, provenance: &str) -> Result<FeatureMap> {
        let selected: Vec<&Level> = if self.levels.is_empty() {
            features.levels.iter().collect()
        } else {
            self.levels
                .iter()
                .map(|&i| features.levels.get(i).ok_or_else(|| config_err!("level index {i} out of range")))
                .collect::<Result<_>>()?
        };
        let first = selected.first().ok_or_else(|| data_err!("no levels selected"))?;
        let target = (first.grid.height, first.grid.width);
        let aggregated = selected.iter().map(|l| neighborhood_aggregate(&l.grid, self.patch)).collect::<Result<Vec<_>>>()?;
        Ok(FeatureMap { grid: merge_levels(&aggregated, target)?, provenance: provenance.to_string() })
    }
}

/// Single-layer perceptron with equal input and output width.
///
/// Locations are row vectors, so the map is `u = t W + b` with `W` stored
/// `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptorParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AdaptorParams {
    pub fn identity(channels: usize) -> Self {
        Self { weight: Tensor::eye(channels), bias: Tensor::zeros(&[channels]) }
    }

    /// Identity plus `N(0, 0.01^2)` perturbation on the weights.
    pub fn init(channels: usize, rng: &mut Rng) -> Self {
        let mut p = Self::identity(channels);
        let noise = Normal::new(0.0, 0.01).unwrap();
        for w in p.weight.data_mut() {
            *w += noise.sample(rng);
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }
}

pub fn adapt(t: &FeatureMap, params: &AdaptorParams) -> Result<FeatureMap> {
    let c = t.channels();
    if params.weight.shape() != [c, c] || params.bias.len() != c {
        return Err(shape_err!("adaptor {:?} for {c} channels", params.weight.shape()));
    }
    let mut data = matmul_raw(&t.grid.data, params.weight.data(), t.grid.locations(), c, c);
    for row in data.chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(params.bias.data()) {
            *v += b;
        }
    }
    Ok(FeatureMap { grid: Grid { data, ..t.grid.clone() }, provenance: t.provenance.clone() })
}

/// Channels produced per level by [`toy_extract`].
pub const TOY_CHANNELS: usize = 4;

/// Handcrafted two-level feature stack.
///
/// The grayscale image is pooled over `2x2` blocks (level `A`) and `4x4`
/// blocks (level `B`). Per output cell: mean intensity (scaled to `[0,1]`),
/// absolute forward differences along x and y of the pooled intensity, and
/// the standard deviation of the source pixels inside the block.
pub fn toy_extract(image: &ImageU8) -> Result<LevelFeatures> {
    if image.height < 8 || image.width < 8 {
        return Err(shape_err!("toy extractor needs at least 8x8 pixels"));
    }
    let gray = image.to_gray();
    let levels = [("A", 2usize), ("B", 4usize)]
        .iter()
        .map(|&(id, block)| Level { id: id.to_string(), grid: block_stats(&gray, block) })
        .collect();
    LevelFeatures::new(levels)
}

fn block_stats(gray: &GrayF64, block: usize) -> Grid {
    let (h, w) = (gray.height / block, gray.width / block);
    let n = (block * block) as f64;
    let mut mean = vec![0.0; h * w];
    let mut std = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let at = |dy: usize, dx: usize| gray.get(y * block + dy, x * block + dx);
            let cells = || (0..block).flat_map(|dy| (0..block).map(move |dx| (dy, dx)));
            let m = cells().map(|(dy, dx)| at(dy, dx)).sum::<f64>() / n;
            let var = cells().map(|(dy, dx)| (at(dy, dx) - m) * (at(dy, dx) - m)).sum::<f64>() / n;
            mean[y * w + x] = m / 255.0;
            std[y * w + x] = libm::sqrt(var) / 255.0;
        }
    }
    let mut grid = Grid::zeros(h, w, TOY_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let gx = if x + 1 < w { (mean[i + 1] - mean[i]).abs() } else { 0.0 };
            let gy = if y + 1 < h { (mean[i + w] - mean[i]).abs() } else { 0.0 };
            grid.at_mut(y, x).copy_from_slice(&[mean[i], gx, gy, std[i]]);
        }
    }
    grid
}

/// Per-level, per-channel standardization statistics, fitted on the
/// training split and then frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    /// `(mean, std)` per level, per channel.
    pub stats: Vec<Vec<(f64, f64)>>,
}

impl Standardizer {
    pub fn fit(samples: &[LevelFeatures]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| data_err!("cannot fit standardizer on zero samples"))?;
        let mut stats = Vec::new();
        for (li, level) in first.levels.iter().enumerate() {
            let c = level.grid.channels;
            let mut sum = vec![0.0; c];
            let mut sum2 = vec![0.0; c];
            let mut n = 0usize;
            for s in samples {
                let g = &s.levels.get(li).ok_or_else(|| data_err!("level count differs between samples"))?.grid;
                if g.channels != c {
                    return Err(data_err!("channel count differs between samples"));
                }
                for row in g.data.chunks(c) {
                    for (k, v) in row.iter().enumerate() {
                        sum[k] += v;
                        sum2[k] += v * v;
                    }
                }
                n += g.locations();
            }
            let n = n as f64;
            stats.push(
                (0..c)
                    .map(|k| {
                        let m = sum[k] / n;
                        (m, libm::sqrt((sum2[k] / n - m * m).max(0.0)))
                    })
                    .collect(),
            );
        }
        Ok(Self { stats })
    }

    pub fn apply(&self, features: &LevelFeatures) -> Result<LevelFeatures> {
        if features.levels.len() != self.stats.len() {
            return Err(shape_err!("standardizer has {} levels, features {}", self.stats.len(), features.levels.len()));
        }
        let mut out = features.clone();
        for (level, stats) in out.levels.iter_mut().zip(&self.stats) {
            let c = level.grid.channels;
            if c != stats.len() {
                return Err(shape_err!("standardizer channel mismatch"));
            }
            for row in level.grid.data.chunks_mut(c) {
                for (v, &(m, s)) in row.iter_mut().zip(stats) {
                    *v = if s > 1e-12 { (*v - m) / s } else { *v - m };
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn grid_from(h: usize, w: usize, c: usize, f: impl FnMut(usize) -> f64) -> Grid {
        Grid::new(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn aggregate_p1_is_identity() {
        let g = grid_from(5, 4, 2, |i| i as f64 * 0.3 - 1.0);
        assert_eq!(neighborhood_aggregate(&g, 1).unwrap(), g);
    }

    #[test]
    fn aggregate_constant_stays_constant() {
        let g = grid_from(6, 6, 3, |_| 2.5);
        for p in 1..=6 {
            let out = neighborhood_aggregate(&g, p).unwrap();
            assert!(out.data.iter().all(|&v| (v - 2.5).abs() < 1e-12), "p={p}");
        }
    }

    #[test]
    fn aggregate_center_of_three_by_three() {
        let g = grid_from(3, 3, 1, |i| (i + 1) as f64);
        let out = neighborhood_aggregate(&g, 3).unwrap();
        // window mean of 1..=9
        assert_eq!(out.at(1, 1)[0], 5.0);
    }

    #[test]
    fn aggregate_rejects_bad_patch() {
        let g = grid_from(3, 3, 1, |i| i as f64);
        assert!(neighborhood_aggregate(&g, 0).is_err());
        assert!(neighborhood_aggregate(&g, 4).is_err());
    }

    #[test]
    fn aggregate_is_linear() {
        let mut rng = seeded(3);
        let x = grid_from(7, 5, 2, |_| rng.gen_range(-1.0..1.0));
        let y = grid_from(7, 5, 2, |_| rng.gen_range(-1.0..1.0));
        let (a, b) = (1.7, -0.4);
        let combo = Grid { data: x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect(), ..x.clone() };
        for p in [2, 3, 4] {
            let lhs = neighborhood_aggregate(&combo, p).unwrap();
            let ax = neighborhood_aggregate(&x, p).unwrap();
            let ay = neighborhood_aggregate(&y, p).unwrap();
            for i in 0..lhs.data.len() {
                assert!((lhs.data[i] - (a * ax.data[i] + b * ay.data[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_single_level_is_identity() {
        let g = grid_from(4, 4, 3, |i| i as f64);
        assert_eq!(merge_levels(&[g.clone()], (4, 4)).unwrap(), g);
        assert!(merge_levels(&[], (4, 4)).is_err());
    }

    #[test]
    fn merge_channel_counts_add_up() {
        let l2 = Grid::zeros(4, 4, 512);
        let l3 = Grid::zeros(2, 2, 1024);
        let merged = merge_levels(&[l2, l3], (4, 4)).unwrap();
        assert_eq!(merged.channels, 1536);
    }

    #[test]
    fn merge_then_identity_adapt_preserves_corners() {
        let fine = grid_from(4, 4, 1, |i| i as f64);
        let coarse = grid_from(2, 2, 2, |i| 10.0 + i as f64);
        let merged = merge_levels(&[fine.clone(), coarse.clone()], (4, 4)).unwrap();
        let fm = FeatureMap { grid: merged, provenance: "toy".into() };
        let out = adapt(&fm, &AdaptorParams::identity(3)).unwrap();
        for (y, x, cy, cx) in [(0, 0, 0, 0), (0, 3, 0, 1), (3, 0, 1, 0), (3, 3, 1, 1)] {
            let v = out.grid.at(y, x);
            assert_eq!(v[0], fine.at(y, x)[0]);
            assert_eq!(&v[1..], coarse.at(cy, cx));
        }
    }

    #[test]
    fn adapt_identity_and_zero() {
        let mut rng = seeded(1);
        let fm = FeatureMap { grid: grid_from(3, 3, 4, |_| rng.gen_range(-2.0..2.0)), provenance: "toy".into() };
        assert_eq!(adapt(&fm, &AdaptorParams::identity(4)).unwrap().grid, fm.grid);
        let zero = AdaptorParams { weight: Tensor::zeros(&[4, 4]), bias: Tensor::zeros(&[4]) };
        assert!(adapt(&fm, &zero).unwrap().grid.data.iter().all(|&v| v == 0.0));
        assert!(adapt(&fm, &AdaptorParams::identity(3)).is_err());
    }

    #[test]
    fn adapt_matches_matvec() {
        let mut rng = seeded(11);
        let fm = FeatureMap { grid: grid_from(2, 3, 4, |_| rng.gen_range(-2.0..2.0)), provenance: "toy".into() };
        let params = AdaptorParams::init(4, &mut rng);
        let out = adapt(&fm, &params).unwrap();
        let w = params.weight.data();
        for loc in 0..6 {
            let t = &fm.grid.data[loc * 4..loc * 4 + 4];
            for j in 0..4 {
                let mut acc = params.bias.data()[j];
                for i in 0..4 {
                    acc += t[i] * w[i * 4 + j];
                }
                assert!((out.grid.data[loc * 4 + j] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn toy_constant_image_has_no_gradient() {
        let img = ImageU8::filled(32, 32, 1, 77);
        let f = toy_extract(&img).unwrap();
        for level in &f.levels {
            for row in level.grid.data.chunks(TOY_CHANNELS) {
                assert_eq!(&row[1..], &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn toy_step_edge_gradient_on_edge_column() {
        let mut img = ImageU8::filled(32, 32, 1, 0);
        for y in 0..32 {
            for x in 16..32 {
                img.set(y, x, 0, 255);
            }
        }
        let f = toy_extract(&img).unwrap();
        let a = &f.levels[0].grid;
        for y in 0..a.height {
            let gx: Vec<f64> = (0..a.width).map(|x| a.at(y, x)[1]).collect();
            let max = gx.iter().copied().fold(0.0, f64::max);
            let argmax: Vec<usize> = (0..a.width).filter(|&x| gx[x] == max).collect();
            assert_eq!(argmax, alloc::vec![7]);
        }
    }

    #[test]
    fn toy_checkerboard_local_std_constant() {
        let mut img = ImageU8::filled(64, 64, 1, 0);
        for y in 0..64 {
            for x in 0..64 {
                if (y / 8 + x / 8) % 2 == 1 {
                    img.set(y, x, 0, 255);
                }
            }
        }
        let f = toy_extract(&img).unwrap();
        for level in &f.levels {
            let g = &level.grid;
            let first = g.at(1, 1)[3];
            for y in 1..g.height - 1 {
                for x in 1..g.width - 1 {
                    assert_eq!(g.at(y, x)[3], first);
                }
            }
        }
    }

    #[test]
    fn standardizer_centers_training_data() {
        let mut rng = seeded(5);
        let samples: Vec<LevelFeatures> = (0..3)
            .map(|_| {
                let mut data = vec![0.0; 8 * 8 * 3];
                for v in data.iter_mut() {
                    *v = rng.gen_range(2.0..6.0);
                }
                LevelFeatures::new(vec![Level { id: "A".into(), grid: Grid::new(8, 8, 3, data).unwrap() }]).unwrap()
            })
            .collect();
        let st = Standardizer::fit(&samples).unwrap();
        let mut sum = [0.0; 3];
        for s in &samples {
            let z = st.apply(s).unwrap();
            for row in z.levels[0].grid.data.chunks(3) {
                for k in 0..3 {
                    sum[k] += row[k];
                }
            }
        }
        assert!(sum.iter().all(|s| s.abs() < 1e-9));
    }
}
