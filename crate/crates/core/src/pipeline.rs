//! Image-to-feature path built on the toy extractor, a training feature
//! source that synthesizes local anomalies on the fly, and a detector for
//! inference.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{data_err, Result};
use crate::featpipe::{toy_extract, AdaptorParams, FeatureMap, PipelineConfig, Standardizer};
use crate::image::{ImageU8, Mask};
use crate::infer::{default_sigma, score_features, ScoreMap};
use crate::las::{foreground_mask, procedural_texture, synthesize, LasConfig};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{Discriminator, EpochLog, FeatureSource, LocalAnomaly, TrainConfig, Trainer};
use crate::rng::Rng;
use crate::synthetic::TestImage;

pub const TOY_PROVENANCE: &str = "toy";

/// Preprocessing, toy extraction, frozen standardization and merging.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPipeline {
    pub image_size: usize,
    pub config: PipelineConfig,
    pub standardizer: Standardizer,
}

impl ToyPipeline {
    /// Fit standardization statistics on the training images.
    pub fn fit(train: &[ImageU8], image_size: usize, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(data_err!("no training images"));
        }
        let raw = train
            .iter()
            .map(|img| toy_extract(&img.resize_center_crop(image_size)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { image_size, config, standardizer: Standardizer::fit(&raw)? })
    }

    pub fn preprocess(&self, image: &ImageU8) -> ImageU8 {
        if image.height == self.image_size && image.width == self.image_size {
            image.clone()
        } else {
            image.resize_center_crop(self.image_size)
        }
    }

    /// Pre-adaptor features of an already preprocessed image.
    pub fn features(&self, image: &ImageU8) -> Result<FeatureMap> {
        let raw = toy_extract(image)?;
        self.config.merge(&self.standardizer.apply(&raw)?, TOY_PROVENANCE)
    }

    pub fn channels(&self) -> usize {
        let stats = &self.standardizer.stats;
        if self.config.levels.is_empty() {
            stats.iter().map(|s| s.len()).sum()
        } else {
            self.config.levels.iter().filter_map(|&i| stats.get(i)).map(|s| s.len()).sum()
        }
    }
}

/// Where anomaly textures come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureSource {
    Images(Vec<ImageU8>),
    Procedural,
}

/// Normal training images plus on-the-fly local anomaly synthesis.
pub struct ImageSource {
    pub pipeline: ToyPipeline,
    pub images: Vec<ImageU8>,
    pub foregrounds: Vec<Mask>,
    pub textures: TextureSource,
    pub las: LasConfig,
    cache: Vec<Option<FeatureMap>>,
}

impl ImageSource {
    pub fn new(pipeline: ToyPipeline, images: &[ImageU8], textures: TextureSource, las: LasConfig) -> Result<Self> {
        las.validate()?;
        if let TextureSource::Images(t) = &textures {
            if t.is_empty() {
                return Err(data_err!("texture source is empty"));
            }
        }
        let images: Vec<ImageU8> = images.iter().map(|i| pipeline.preprocess(i)).collect();
        let foregrounds = images.iter().map(|i| foreground_mask(i, las.polarity)).collect();
        let cache = vec![None; images.len()];
        Ok(Self { pipeline, images, foregrounds, textures, las, cache })
    }

    fn texture(&self, like: &ImageU8, rng: &mut Rng) -> ImageU8 {
        match &self.textures {
            TextureSource::Images(t) => t[rng.gen_range(0..t.len())].clone(),
            TextureSource::Procedural => procedural_texture(like.height, like.width, like.channels, rng),
        }
    }
}

impl FeatureSource for ImageSource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn normal(&mut self, index: usize) -> Result<FeatureMap> {
        if let Some(Some(f)) = self.cache.get(index) {
            return Ok(f.clone());
        }
        let img = self.images.get(index).ok_or_else(|| data_err!("no training image {index}"))?;
        let f = self.pipeline.features(img)?;
        self.cache[index] = Some(f.clone());
        Ok(f)
    }

    fn local_anomaly(&mut self, index: usize, rng: &mut Rng) -> Result<Option<LocalAnomaly>> {
        let img = self.images.get(index).ok_or_else(|| data_err!("no training image {index}"))?;
        let texture = self.texture(img, rng);
        let sample = synthesize(img, &self.foregrounds[index], &texture, &self.las, None, rng)?;
        let features = self.pipeline.features(&sample.image)?;
        let mask = sample.mask.feature_mask(features.height(), features.width());
        Ok(Some(LocalAnomaly { features, mask }))
    }
}

/// Trained model bundled with its feature pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub pipeline: ToyPipeline,
    pub adaptor: AdaptorParams,
    pub discriminator: Discriminator,
    pub sigma: f64,
}

impl Detector {
    pub fn score(&self, image: &ImageU8) -> Result<ScoreMap> {
        let img = self.pipeline.preprocess(image);
        let t = self.pipeline.features(&img)?;
        score_features(&t, &self.adaptor, &self.discriminator, (img.height, img.width), self.sigma)
    }
}

/// Fit the pipeline on `train` and train adaptor and discriminator.
pub fn train_detector(
    train: &[ImageU8],
    image_size: usize,
    pipeline: PipelineConfig,
    config: TrainConfig,
    textures: TextureSource,
    las: LasConfig,
) -> Result<(Detector, Vec<EpochLog>)> {
    let pipe = ToyPipeline::fit(train, image_size, pipeline)?;
    let mut source = ImageSource::new(pipe.clone(), train, textures, las)?;
    let mut trainer = Trainer::new(pipe.channels(), config)?;
    trainer.train(&mut source)?;
    let detector = Detector {
        pipeline: pipe,
        adaptor: trainer.adaptor.clone(),
        discriminator: trainer.discriminator.clone(),
        sigma: default_sigma(image_size, image_size),
    };
    Ok((detector, trainer.log))
}

/// Score every test image and evaluate against its mask (all-normal when
/// absent).
pub fn evaluate_detector(detector: &Detector, test: &[TestImage]) -> Result<(EvalResult, Vec<ScoreMap>)> {
    let maps = test.iter().map(|t| detector.score(&t.image)).collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
    let labels: Vec<bool> = test.iter().map(|t| t.mask.is_some()).collect();
    let gts = maps
        .iter()
        .zip(test)
        .map(|(m, t)| {
            let (h, w) = (m.pixels.height, m.pixels.width);
            match &t.mask {
                Some(mask) if mask.height == h && mask.width == w => Ok(mask.clone()),
                Some(mask) => Ok(mask.downsample_any(h, w)),
                None => Ok(Mask::filled(h, w, false)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pixels: Vec<_> = maps.iter().map(|m| m.pixels.clone()).collect();
    Ok((evaluate(&scores, &labels, &pixels, &gts)?, maps))
}
