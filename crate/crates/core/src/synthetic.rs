//! Procedural benchmark categories with injected defects.
//!
//! Normal images are regular textures (oriented stripes or smooth blobs)
//! with small random jitter. Test defects are local anomalies synthesized
//! with procedural textures drawn from a stream separate from training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::image::{round_u8, ImageU8, Mask};
use crate::las::{foreground_mask, generate_weak_set, procedural_texture, synthesize, LasConfig, PerlinField, Polarity};
use crate::rng::{derive, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Stripes,
    Blobs,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Stripes => "stripes",
            Pattern::Blobs => "blobs",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stripes" => Some(Pattern::Stripes),
            "blobs" => Some(Pattern::Blobs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub patterns: Vec<Pattern>,
    pub train: usize,
    pub test_good: usize,
    pub test_defect: usize,
    /// Fixed transparency for all defects; `None` draws from the LAS prior.
    pub beta: Option<f64>,
    /// Defects covering less of the image than this are redrawn.
    pub min_defect_fraction: f64,
    pub seed: u64,
}

/// Redraws allowed per defect before giving up on the area floor.
pub const DEFECT_DRAWS: usize = 50;

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            patterns: alloc::vec![Pattern::Stripes, Pattern::Blobs],
            train: 16,
            test_good: 20,
            test_defect: 20,
            beta: None,
            min_defect_fraction: 0.02,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestImage {
    pub image: ImageU8,
    /// `None` for normal test images.
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCategory {
    pub name: String,
    pub train: Vec<ImageU8>,
    pub test: Vec<TestImage>,
}

/// A normal sample of `pattern`.
pub fn normal_image(pattern: Pattern, size: usize, rng: &mut Rng) -> ImageU8 {
    let noise = Normal::new(0.0, 4.0).unwrap();
    let tint = match pattern {
        Pattern::Stripes => [1.0, 0.9, 0.75],
        Pattern::Blobs => [0.8, 0.95, 1.0],
    };
    let mut img = ImageU8::filled(size, size, 3, 0);
    match pattern {
        Pattern::Stripes => {
            let angle = 0.35 + rng.gen_range(-0.05..0.05);
            let period = 8.0 + rng.gen_range(-0.3..0.3);
            let phase = rng.gen_range(0.0..core::f64::consts::TAU);
            let (ca, sa) = (libm::cos(angle), libm::sin(angle));
            for y in 0..size {
                for x in 0..size {
                    let s = libm::sin((ca * x as f64 + sa * y as f64) * core::f64::consts::TAU / period + phase);
                    let v = 128.0 + 60.0 * s;
                    for (c, t) in tint.iter().enumerate() {
                        img.set(y, x, c, round_u8(v * t + noise.sample(rng)));
                    }
                }
            }
        }
        Pattern::Blobs => {
            let field = PerlinField::generate(size, size, (4, 4), rng);
            for y in 0..size {
                for x in 0..size {
                    let v = 128.0 + 78.0 * field.values.data[y * size + x];
                    for (c, t) in tint.iter().enumerate() {
                        img.set(y, x, c, round_u8(v * t + noise.sample(rng)));
                    }
                }
            }
        }
    }
    img
}

fn check_spec(spec: &SyntheticSpec) -> Result<()> {
    if spec.size < 16 {
        return Err(config_err!("synthetic images must be at least 16 pixels"));
    }
    if !(0.0..1.0).contains(&spec.min_defect_fraction) {
        return Err(config_err!("minimum defect fraction must be in [0, 1)"));
    }
    Ok(())
}

fn category_base(spec: &SyntheticSpec, index: usize) -> u64 {
    spec.seed.wrapping_add(1000 * index as u64)
}

/// Train split and normal test images of one category.
fn normal_splits(spec: &SyntheticSpec, pattern: Pattern, base: u64) -> (Vec<ImageU8>, Vec<TestImage>) {
    let train = (0..spec.train).map(|i| normal_image(pattern, spec.size, &mut derive(base, i as u64))).collect();
    let test = (0..spec.test_good)
        .map(|i| TestImage { image: normal_image(pattern, spec.size, &mut derive(base ^ 0x5eed_0001, i as u64)), mask: None })
        .collect();
    (train, test)
}

/// Generate all categories of `spec`. Deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticCategory>> {
    check_spec(spec)?;
    let las = LasConfig::for_size(spec.size);
    spec.patterns
        .iter()
        .enumerate()
        .map(|(ci, &pattern)| {
            let base = category_base(spec, ci);
            let (train, mut test) = normal_splits(spec, pattern, base);
            for i in 0..spec.test_defect {
                let mut rng = derive(base ^ 0x5eed_0002, i as u64);
                let normal = normal_image(pattern, spec.size, &mut rng);
                let fg = foreground_mask(&normal, Polarity::Full);
                let mut drawn = None;
                for _ in 0..DEFECT_DRAWS {
                    let texture = procedural_texture(spec.size, spec.size, 3, &mut rng);
                    let s = synthesize(&normal, &fg, &texture, &las, spec.beta, &mut rng)?;
                    if s.mask.mask.fraction() >= spec.min_defect_fraction {
                        drawn = Some(s);
                        break;
                    }
                }
                let s = drawn.ok_or(Error::Exhausted("no defect reached the minimum area"))?;
                test.push(TestImage { image: s.image, mask: Some(s.mask.mask) });
            }
            Ok(SyntheticCategory { name: String::from(pattern.name()), train, test })
        })
        .collect()
}

/// Weak-defect variant: the same train split and normal test images, with
/// defects made by fusing held-out normal backgrounds with augmented copies
/// of other held-out normals at transparency `beta`.
pub fn generate_weak(spec: &SyntheticSpec, beta: f64) -> Result<Vec<SyntheticCategory>> {
    check_spec(spec)?;
    let las = LasConfig::for_size(spec.size);
    spec.patterns
        .iter()
        .enumerate()
        .map(|(ci, &pattern)| {
            let base = category_base(spec, ci);
            let (train, mut test) = normal_splits(spec, pattern, base);
            let pool: Vec<ImageU8> = (0..spec.test_defect.max(2))
                .map(|i| normal_image(pattern, spec.size, &mut derive(base ^ 0x5eed_0003, i as u64)))
                .collect();
            let candidates = generate_weak_set(&pool, &[beta], spec.test_defect * DEFECT_DRAWS, &las, base ^ 0x5eed_0004)?;
            let defects: Vec<TestImage> = candidates
                .into_iter()
                .filter(|w| w.sample.mask.mask.fraction() >= spec.min_defect_fraction)
                .take(spec.test_defect)
                .map(|w| TestImage { image: w.sample.image, mask: Some(w.sample.mask.mask) })
                .collect();
            if defects.len() < spec.test_defect {
                return Err(Error::Exhausted("not enough weak defects reached the minimum area"));
            }
            test.extend(defects);
            Ok(SyntheticCategory { name: String::from(pattern.name()), train, test })
        })
        .collect()
}

/// File stem for test image `index` of a category.
pub fn test_stem(index: usize) -> String {
    format!("{index:03}")
}
