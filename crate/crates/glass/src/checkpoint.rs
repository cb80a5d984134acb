//! `.glck` checkpoints: everything needed to score images after training.
//!
//! Layout (little-endian): magic `GLCK`, `u32` version, then the sections in
//! the order of [`Model`]'s fields. Strings are `u32` length + UTF-8;
//! tensors are `u16` rank, `u32` dims, `f32` values; statistics, radii and
//! scalars are `f64`.

use std::path::Path;

use glass_core::featpipe::{AdaptorParams, FeatureMap, LevelFeatures, PipelineConfig, Standardizer};
use glass_core::gas::Hypothesis;
use glass_core::image::ImageU8;
use glass_core::infer::{score_features, ScoreMap};
use glass_core::model::Discriminator;
use glass_core::ndgrad::Tensor;
use glass_core::pipeline::{Detector, ToyPipeline};
use glass_core::rng::Rng;
use rand::SeedableRng;

use crate::error::{Error, FormatError, Result};
use crate::files;

pub const MAGIC: [u8; 4] = *b"GLCK";
pub const VERSION: u32 = 1;

type Fmt<T> = std::result::Result<T, FormatError>;

/// Where pre-adaptor features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    /// Built-in block-statistics extractor with frozen standardization.
    Toy(Standardizer),
    /// `.glft` files produced outside this crate.
    External,
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub category: String,
    /// Resolved configuration text the model was trained with.
    pub config_echo: String,
    pub image_size: usize,
    pub extractor: Extractor,
    pub pipeline: PipelineConfig,
    pub hypothesis: Hypothesis,
    pub sigma: f64,
    pub adaptor: AdaptorParams,
    pub discriminator: Discriminator,
    /// Trainer stream after the last step.
    pub rng: RngState,
}

impl Model {
    pub fn toy_pipeline(&self) -> Option<ToyPipeline> {
        match &self.extractor {
            Extractor::Toy(s) => Some(ToyPipeline { image_size: self.image_size, config: self.pipeline.clone(), standardizer: s.clone() }),
            Extractor::External => None,
        }
    }

    pub fn detector(&self) -> Option<Detector> {
        Some(Detector {
            pipeline: self.toy_pipeline()?,
            adaptor: self.adaptor.clone(),
            discriminator: self.discriminator.clone(),
            sigma: self.sigma,
        })
    }

    /// Score precomputed raw level features; the map has `size` pixels.
    pub fn score_levels(&self, levels: &LevelFeatures, size: (usize, usize)) -> glass_core::Result<ScoreMap> {
        let t: FeatureMap = self.pipeline.merge(levels, "glft")?;
        score_features(&t, &self.adaptor, &self.discriminator, size, self.sigma)
    }

    pub fn score_image(&self, image: &ImageU8) -> Result<ScoreMap> {
        let d = self.detector().ok_or_else(|| Error::Config("checkpoint uses external features; pass --features-dir".into()))?;
        Ok(d.score(image)?)
    }

    /// The model as stored: tensors rounded to `f32`.
    pub fn stored(&self) -> Model {
        let mut m = self.clone();
        for t in [
            &mut m.adaptor.weight,
            &mut m.adaptor.bias,
            &mut m.discriminator.w1,
            &mut m.discriminator.b1,
            &mut m.discriminator.w2,
            &mut m.discriminator.b2,
        ] {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        m
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn len(&mut self, n: usize) -> Fmt<()> {
        self.u32(u32::try_from(n).map_err(|_| FormatError::Overflow(format!("length {n}")))?);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Fmt<()> {
        self.len(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn f64s(&mut self, v: &[f64]) -> Fmt<()> {
        self.len(v.len())?;
        v.iter().for_each(|x| self.f64(*x));
        Ok(())
    }
    fn tensor(&mut self, t: &Tensor) -> Fmt<()> {
        self.u16(t.shape().len() as u16);
        for &d in t.shape() {
            self.len(d)?;
        }
        for v in t.data() {
            self.u32((*v as f32).to_bits());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Fmt<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - left });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Fmt<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Fmt<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Fmt<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Fmt<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Fmt<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    /// A length whose items take at least `item` bytes each.
    fn len(&mut self, item: usize) -> Fmt<usize> {
        let n = self.u32()? as usize;
        let need = n.checked_mul(item).ok_or_else(|| FormatError::Overflow(format!("length {n}")))?;
        if need > self.bytes.len() - self.pos {
            return Err(FormatError::Truncated { offset: self.pos, needed: need - (self.bytes.len() - self.pos) });
        }
        Ok(n)
    }
    fn str(&mut self) -> Fmt<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Invalid("string is not UTF-8".into()))
    }
    fn f64s(&mut self) -> Fmt<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Fmt<Tensor> {
        let rank = self.u16()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Fmt<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| FormatError::Overflow(format!("tensor {shape:?}")))?;
        let raw = self.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().unwrap())) as f64).collect();
        Tensor::new(&shape, data).map_err(|e| FormatError::Invalid(e.to_string()))
    }
}

pub fn encode(m: &Model) -> Fmt<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.str(&m.category)?;
    w.str(&m.config_echo)?;
    w.len(m.image_size)?;
    match &m.extractor {
        Extractor::Toy(s) => {
            w.u8(0);
            w.len(s.stats.len())?;
            for level in &s.stats {
                w.len(level.len())?;
                for (mean, std) in level {
                    w.f64(*mean);
                    w.f64(*std);
                }
            }
        }
        Extractor::External => w.u8(1),
    }
    w.len(m.pipeline.patch)?;
    w.len(m.pipeline.levels.len())?;
    for &l in &m.pipeline.levels {
        w.len(l)?;
    }
    match &m.hypothesis {
        Hypothesis::Manifold { r1, r2 } => {
            w.u8(0);
            w.f64(*r1);
            w.f64(*r2);
        }
        Hypothesis::Hypersphere { center, r1, r2, r3 } => {
            w.u8(1);
            w.f64s(center)?;
            w.f64(*r1);
            w.f64(*r2);
            w.f64(*r3);
        }
    }
    w.f64(m.sigma);
    w.tensor(&m.adaptor.weight)?;
    w.tensor(&m.adaptor.bias)?;
    let d = &m.discriminator;
    for t in [&d.w1, &d.b1, &d.w2, &d.b2] {
        w.tensor(t)?;
    }
    w.f64(d.slope);
    w.0.extend_from_slice(&m.rng.seed);
    w.u64(m.rng.stream);
    w.0.extend_from_slice(&m.rng.word_pos.to_le_bytes());
    Ok(w.0)
}

pub fn decode(bytes: &[u8]) -> Fmt<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let category = r.str()?;
    let config_echo = r.str()?;
    let image_size = r.u32()? as usize;
    let extractor = match r.u8()? {
        0 => {
            let levels = r.len(4)?;
            let mut stats = Vec::with_capacity(levels);
            for _ in 0..levels {
                let c = r.len(16)?;
                stats.push((0..c).map(|_| Ok((r.f64()?, r.f64()?))).collect::<Fmt<Vec<_>>>()?);
            }
            Extractor::Toy(Standardizer { stats })
        }
        1 => Extractor::External,
        t => return Err(FormatError::Invalid(format!("extractor tag {t}"))),
    };
    let patch = r.u32()? as usize;
    let n = r.len(4)?;
    let levels = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Fmt<Vec<_>>>()?;
    let hypothesis = match r.u8()? {
        0 => Hypothesis::Manifold { r1: r.f64()?, r2: r.f64()? },
        1 => Hypothesis::Hypersphere { center: r.f64s()?, r1: r.f64()?, r2: r.f64()?, r3: r.f64()? },
        t => return Err(FormatError::Invalid(format!("hypothesis tag {t}"))),
    };
    let sigma = r.f64()?;
    let adaptor = AdaptorParams { weight: r.tensor()?, bias: r.tensor()? };
    let discriminator = Discriminator { w1: r.tensor()?, b1: r.tensor()?, w2: r.tensor()?, b2: r.tensor()?, slope: r.f64()? };
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - r.pos));
    }
    let c = adaptor.channels();
    if adaptor.weight.shape() != [c, c] || discriminator.channels() != c {
        return Err(FormatError::Invalid(format!("adaptor {:?} and discriminator {:?} disagree", adaptor.weight.shape(), discriminator.w1.shape())));
    }
    Ok(Model {
        category,
        config_echo,
        image_size,
        extractor,
        pipeline: PipelineConfig { patch, levels },
        hypothesis,
        sigma,
        adaptor,
        discriminator,
        rng: RngState { seed, stream, word_pos },
    })
}

pub fn save(path: &Path, m: &Model) -> Result<()> {
    let bytes = encode(m).map_err(|source| Error::Format { path: path.to_path_buf(), source })?;
    files::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&files::read(path)?).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use glass_core::rng::seeded;
    use rand::RngCore;

    fn model(ext: Extractor, hyp: Hypothesis) -> Model {
        let mut rng = seeded(3);
        rng.next_u64();
        Model {
            category: "stripes".into(),
            config_echo: "seed = 3\n".into(),
            image_size: 64,
            extractor: ext,
            pipeline: PipelineConfig { patch: 3, levels: vec![0, 1] },
            hypothesis: hyp,
            sigma: 0.8888888888888888,
            adaptor: AdaptorParams::init(4, &mut rng),
            discriminator: Discriminator::init(4, 4, &mut rng),
            rng: RngState::of(&rng),
        }
    }

    #[test]
    fn round_trip_is_exact_after_f32_rounding() {
        let std = Standardizer { stats: vec![vec![(0.1, 2.0); 4], vec![(-0.3, 1e-7); 4]] };
        for m in [
            model(Extractor::Toy(std), Hypothesis::manifold(4.0)),
            model(Extractor::External, Hypothesis::Hypersphere { center: vec![0.5, -1.0, 0.0, 2.0], r1: 1.0, r2: 2.0, r3: 4.0 }),
        ] {
            let bytes = encode(&m).unwrap();
            let back = decode(&bytes).unwrap();
            assert_eq!(back, m.stored());
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = seeded(9);
        a.next_u32();
        let mut b = RngState::of(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&model(Extractor::External, Hypothesis::manifold(1.0))).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert_eq!(decode(&v2), Err(FormatError::UnsupportedVersion(2)));
        let mut long = bytes;
        long.push(0);
        assert_eq!(decode(&long), Err(FormatError::Trailing(1)));
    }
}
