//! Train, score, evaluate: the steps behind the subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use glass_core::featpipe::FeatureMap;
use glass_core::gas::{fit_hypersphere_at, Hypothesis};
use glass_core::hypothesis::{choose_hypothesis, Decision, SpectrogramReport};
use glass_core::image::{GrayF64, ImageU8, Mask};
use glass_core::infer::ScoreMap;
use glass_core::metrics::{auroc, histogram, pixel_auroc, pro, Histogram};
use glass_core::model::{EpochLog, FeatureSource, PrecomputedSource, TrainConfig, Trainer};
use glass_core::pipeline::{ImageSource, TextureSource, ToyPipeline};
use glass_core::synthetic::TestImage;

use crate::checkpoint::{Extractor, Model, RngState};
use crate::config::{HypothesisMode, RunConfig};
use crate::dataset::{self, CategoryIndex, DatasetIndex};
use crate::error::{data, Context, Result};
use crate::files::{self, list_dirs, list_files};
use crate::imageio::{self, IMAGE_EXTENSIONS};
use crate::report::{self, CategoryReport, Report, Scores};
use crate::{glft, Error};

/// Hypothesis decided for a category, with the chooser output when used.
#[derive(Debug, Clone)]
pub struct Choice {
    pub hypersphere: bool,
    pub spectrogram: Option<SpectrogramReport>,
}

pub fn spectrogram(train: &[ImageU8], size: usize, threshold: f64) -> Result<SpectrogramReport> {
    let grays: Vec<GrayF64> = train.iter().map(|i| i.resize_center_crop(size).to_gray()).collect();
    Ok(choose_hypothesis(&grays, threshold)?)
}

pub fn choose(cfg: &RunConfig, train: &[ImageU8]) -> Result<Choice> {
    Ok(match cfg.hypothesis {
        HypothesisMode::Manifold => Choice { hypersphere: false, spectrogram: None },
        HypothesisMode::Hypersphere => Choice { hypersphere: true, spectrogram: None },
        HypothesisMode::Auto => {
            let s = spectrogram(train, cfg.image_size, cfg.chooser_threshold)?;
            Choice { hypersphere: s.decision == Decision::Hypersphere, spectrogram: Some(s) }
        }
    })
}

/// All images in `dir` and its direct subdirectories.
pub fn load_textures(dir: &Path) -> Result<Vec<ImageU8>> {
    let mut paths = list_files(dir, IMAGE_EXTENSIONS)?;
    for sub in list_dirs(dir)? {
        paths.extend(list_files(&sub, IMAGE_EXTENSIONS)?);
    }
    if paths.is_empty() {
        return Err(data!("no PNG/BMP textures under {}", dir.display()));
    }
    paths.iter().map(|p| imageio::load_image(p)).collect()
}

pub fn texture_source(cfg: &RunConfig) -> Result<TextureSource> {
    Ok(match &cfg.textures {
        Some(dir) => TextureSource::Images(load_textures(dir)?),
        None => TextureSource::Procedural,
    })
}

fn all_rows(source: &mut dyn FeatureSource) -> glass_core::Result<(Vec<f64>, usize)> {
    let mut rows = Vec::new();
    let mut c = 0;
    for i in 0..source.len() {
        let f = source.normal(i)?;
        c = f.channels();
        rows.extend_from_slice(&f.grid.data);
    }
    Ok((rows, c))
}

fn run_trainer(
    source: &mut dyn FeatureSource,
    channels: usize,
    cfg: &RunConfig,
    hypersphere: bool,
    name: &str,
) -> Result<Trainer> {
    let mut tc: TrainConfig = cfg.train_for(hypersphere);
    tc.gas.hypothesis = if hypersphere {
        let (rows, c) = all_rows(source).context(|| format!("{name}: features"))?;
        fit_hypersphere_at(&rows, c, tc.hypersphere_coverage).context(|| format!("{name}: hypersphere fit"))?
    } else {
        Hypothesis::manifold(cfg.r1)
    };
    let mut trainer = Trainer::new(channels, tc).context(|| format!("{name}: trainer"))?;
    trainer.train(source).context(|| format!("{name}: training"))?;
    Ok(trainer)
}

fn finish(cfg: &RunConfig, name: &str, extractor: Extractor, trainer: &Trainer) -> Model {
    Model {
        category: name.to_string(),
        config_echo: cfg.echo.clone(),
        image_size: cfg.image_size,
        extractor,
        pipeline: cfg.pipeline.clone(),
        hypothesis: trainer.hypothesis().clone(),
        sigma: cfg.sigma(),
        adaptor: trainer.adaptor.clone(),
        discriminator: trainer.discriminator.clone(),
        rng: RngState::of(trainer.rng()),
    }
    .stored()
}

/// Train on images with the built-in extractor. The returned model is
/// already rounded to its stored precision.
pub fn train_images(
    cfg: &RunConfig,
    name: &str,
    train: &[ImageU8],
    textures: TextureSource,
    hypersphere: bool,
) -> Result<(Model, Vec<EpochLog>)> {
    let pipe = ToyPipeline::fit(train, cfg.image_size, cfg.pipeline.clone()).context(|| format!("{name}: feature pipeline"))?;
    let channels = pipe.channels();
    let mut source = ImageSource::new(pipe.clone(), train, textures, cfg.las.clone()).context(|| format!("{name}: LAS source"))?;
    let trainer = run_trainer(&mut source, channels, cfg, hypersphere, name)?;
    Ok((finish(cfg, name, Extractor::Toy(pipe.standardizer), &trainer), trainer.log.clone()))
}

/// Train on precomputed `.glft` level features. Local anomaly synthesis
/// needs images, so the LAS branch is switched off.
pub fn train_features(cfg: &RunConfig, name: &str, maps: Vec<FeatureMap>, hypersphere: bool) -> Result<(Model, Vec<EpochLog>)> {
    let mut cfg = cfg.clone();
    if cfg.train.branches.las {
        log::warn!("{name}: external features cannot synthesize local anomalies; LAS branch disabled");
        cfg.train.branches.las = false;
    }
    let channels = maps.first().ok_or_else(|| data!("{name}: no feature files"))?.channels();
    let mut source = PrecomputedSource { maps };
    let trainer = run_trainer(&mut source, channels, &cfg, hypersphere, name)?;
    Ok((finish(&cfg, name, Extractor::External, &trainer), trainer.log.clone()))
}

/// `.glft` path for an image under a features tree mirroring the data tree.
pub fn feature_path(features_dir: &Path, rel: &Path) -> PathBuf {
    features_dir.join(rel).with_extension("glft")
}

pub fn load_feature_maps(cfg: &RunConfig, features_dir: &Path, cat: &CategoryIndex) -> Result<Vec<FeatureMap>> {
    cat.train
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(&cat.root).unwrap_or(p);
            let path = feature_path(features_dir, rel);
            let levels = glft::read_features(&path)?;
            cfg.pipeline.merge(&levels, "glft").context(|| path.display().to_string())
        })
        .collect()
}

/// Image to score, addressed by `id` (`<defect>/<stem>`).
pub struct Scored {
    pub id: String,
    pub map: ScoreMap,
}

/// Images below `dir` (recursively), with ids relative to it. A category
/// root is scored through its `test/` split.
pub fn collect_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let base = if dir.join("test").is_dir() { dir.join("test") } else { dir.to_path_buf() };
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for p in list_files(dir, IMAGE_EXTENSIONS)? {
            let rel = p.strip_prefix(base).unwrap().with_extension("");
            out.push((rel.to_string_lossy().replace('\\', "/"), p));
        }
        for sub in list_dirs(dir)? {
            walk(base, &sub, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(&base, &base, &mut out)?;
    if out.is_empty() {
        return Err(data!("no PNG/BMP images under {}", base.display()));
    }
    out.sort();
    Ok(out)
}

pub fn score_one(model: &Model, image: &ImageU8, features: Option<&Path>) -> Result<ScoreMap> {
    match features {
        Some(path) => {
            let levels = glft::read_features(path)?;
            let s = model.image_size;
            model.score_levels(&levels, (s, s)).context(|| path.display().to_string())
        }
        None => model.score_image(image),
    }
}

/// Score images and write `scores/<id>.png`, `overlay/<id>.png` and
/// `scores.csv` under `out`.
pub fn infer_images(model: &Model, images: &[(String, ImageU8)], features_dir: Option<&Path>, out: &Path) -> Result<Vec<Scored>> {
    let mut csv = String::from("image_id,s_ad\n");
    let mut scored = Vec::with_capacity(images.len());
    for (id, img) in images {
        let feat = features_dir.map(|d| feature_path(d, Path::new(id)));
        let map = score_one(model, img, feat.as_deref())?;
        imageio::save_score16(&out.join("scores").join(format!("{id}.png")), &map.pixels)?;
        let shown = img.resize_center_crop(model.image_size);
        imageio::save_image(&out.join("overlay").join(format!("{id}.png")), &imageio::overlay(&shown, &map.pixels))?;
        writeln!(csv, "{id},{}", map.image_score).unwrap();
        scored.push(Scored { id: id.clone(), map });
    }
    files::write_atomic(&out.join("scores.csv"), csv.as_bytes())?;
    Ok(scored)
}

/// Metrics for one category from maps aligned with `test`.
pub fn metrics(cfg: &RunConfig, scores: &[f64], maps: &[GrayF64], test: &[TestImage]) -> Result<(Scores, Histogram)> {
    let labels: Vec<bool> = test.iter().map(|t| t.mask.is_some()).collect();
    let gts: Vec<Mask> = maps
        .iter()
        .zip(test)
        .map(|(m, t)| match &t.mask {
            Some(g) if g.height == m.height && g.width == m.width => g.clone(),
            Some(g) => g.downsample_any(m.height, m.width),
            None => Mask::filled(m.height, m.width, false),
        })
        .collect();
    let s = Scores {
        image_auroc: auroc(scores, &labels)?,
        pixel_auroc: pixel_auroc(maps, &gts)?,
        pixel_pro: pro(maps, &gts, cfg.pro_limit, cfg.pro_thresholds)?,
    };
    let (normal, anomalous): (Vec<(f64, bool)>, Vec<(f64, bool)>) = scores.iter().copied().zip(labels).partition(|(_, l)| !l);
    let h = histogram(
        &normal.into_iter().map(|x| x.0).collect::<Vec<_>>(),
        &anomalous.into_iter().map(|x| x.0).collect::<Vec<_>>(),
        cfg.histogram_bins,
    )?;
    Ok((s, h))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, v) = l.rsplit_once(',').ok_or_else(|| data!("{}: malformed row {l:?}", path.display()))?;
            let v: f64 = v.trim().parse().map_err(|_| data!("{}: bad score in {l:?}", path.display()))?;
            Ok((id.to_string(), v))
        })
        .collect()
}

/// Evaluate a prediction directory written by [`infer_images`] against a
/// category's ground truth.
pub fn evaluate_dir(cfg: &RunConfig, pred: &Path, cat: &CategoryIndex) -> Result<(CategoryReport, Histogram)> {
    let rows = read_scores_csv(&pred.join("scores.csv"))?;
    let lookup: std::collections::HashMap<&str, f64> = rows.iter().map(|(i, v)| (i.as_str(), *v)).collect();
    let mut scores = Vec::new();
    let mut maps = Vec::new();
    let mut test = Vec::new();
    for entry in &cat.test {
        let s = *lookup.get(entry.id.as_str()).ok_or_else(|| data!("{}: no score for {}", pred.display(), entry.id))?;
        let map = imageio::load_score16(&pred.join("scores").join(format!("{}.png", entry.id)))?;
        let mask = match &entry.mask {
            Some(p) => Some(dataset::preprocess_mask(&imageio::load_mask(p)?, map.height)),
            None => None,
        };
        scores.push(s);
        test.push(TestImage { image: ImageU8::filled(1, 1, 1, 0), mask });
        maps.push(map);
    }
    let (s, h) = metrics(cfg, &scores, &maps, &test)?;
    Ok((
        CategoryReport {
            name: cat.name.clone(),
            hypothesis: None,
            compactness: None,
            dataset_sha256: Some(cat.hash.clone()),
            n_test_normal: cat.test_normals(),
            n_test_anomalous: cat.test_anomalies(),
            scores: s,
        },
        h,
    ))
}

/// Resolved config text and a `sha256sum`-style list of input hashes.
pub fn write_echo(dir: &Path, cfg: &RunConfig, inputs: &[(String, String)]) -> Result<()> {
    files::write_atomic(&dir.join("config.txt"), cfg.echo.as_bytes())?;
    let mut s = format!("{}  config.txt\n", cfg.hash());
    for (name, hash) in inputs {
        writeln!(s, "{hash}  {name}").unwrap();
    }
    files::write_atomic(&dir.join("inputs.sha256"), s.as_bytes())
}

pub fn hypothesis_name(h: &Hypothesis) -> &'static str {
    match h {
        Hypothesis::Manifold { .. } => "manifold",
        Hypothesis::Hypersphere { .. } => "hypersphere",
    }
}

/// Train, score and evaluate one category; artifacts go to `out`.
pub fn run_category(cfg: &RunConfig, cat: &CategoryIndex, textures: &TextureSource, out: &Path) -> Result<(CategoryReport, Histogram)> {
    let train = dataset::load_train(cat)?;
    let choice = choose(cfg, &train)?;
    if let Some(s) = &choice.spectrogram {
        log::info!("{}: compactness {:.4} -> {}", cat.name, s.compactness, s.decision.as_str());
    }
    let started = std::time::Instant::now();
    let (model, log) = train_images(cfg, &cat.name, &train, textures.clone(), choice.hypersphere)?;
    if let Some(last) = log.last() {
        log::info!("{}: trained {} epochs in {:.1}s, final loss {:.4}", cat.name, log.len(), started.elapsed().as_secs_f64(), last.losses.total);
    }
    crate::checkpoint::save(&out.join("model.glck"), &model)?;
    write_echo(out, cfg, &[(format!("dataset:{}", cat.name), cat.hash.clone())])?;

    let test = dataset::load_test(cat, Some(cfg.image_size))?;
    let images: Vec<(String, ImageU8)> = cat.test.iter().zip(&test).map(|(e, t)| (e.id.clone(), t.image.clone())).collect();
    let scored = infer_images(&model, &images, None, &out.join("infer"))?;
    let scores: Vec<f64> = scored.iter().map(|s| s.map.image_score).collect();
    let maps: Vec<GrayF64> = scored.into_iter().map(|s| s.map.pixels).collect();
    let (s, h) = metrics(cfg, &scores, &maps, &test)?;
    Ok((
        CategoryReport {
            name: cat.name.clone(),
            hypothesis: Some(hypothesis_name(&model.hypothesis).into()),
            compactness: choice.spectrogram.map(|s| s.compactness),
            dataset_sha256: Some(cat.hash.clone()),
            n_test_normal: cat.test_normals(),
            n_test_anomalous: cat.test_anomalies(),
            scores: s,
        },
        h,
    ))
}

/// End to end over every selected category. Writes `report.json`, the
/// config echo and per-category artifacts under `out`.
pub fn run(cfg: &RunConfig, index: &DatasetIndex, out: &Path) -> Result<Report> {
    let textures = texture_source(cfg)?;
    let mut reports = Vec::new();
    let mut inputs = Vec::new();
    for cat in index.select(&cfg.categories)? {
        let dir = out.join(&cat.name);
        let (r, h) = run_category(cfg, cat, &textures, &dir)?;
        report::write_histogram(out, &cat.name, &h)?;
        log::info!(
            "{}: image AUROC {:.4}, pixel AUROC {:.4}, PRO {:.4}",
            r.name,
            r.scores.image_auroc,
            r.scores.pixel_auroc,
            r.scores.pixel_pro
        );
        inputs.push((format!("dataset:{}", cat.name), cat.hash.clone()));
        reports.push(r);
    }
    let report = Report::new(Some(cfg.hash()), reports);
    report.write(&out.join("report.json"))?;
    write_echo(out, cfg, &inputs)?;
    Ok(report)
}
