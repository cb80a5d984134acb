//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use glass_core::las::{foreground_mask, generate_weak_set, procedural_texture, synthesize, BetaPrior, LasConfig, Polarity};
use glass_core::rng::derive;
use glass_core::synthetic::{generate, generate_weak, Pattern, SyntheticSpec};
use rand::Rng as _;
use serde::Serialize;

use crate::checkpoint;
use crate::config::{Ablation, Loader, RunConfig};
use crate::dataset;
use crate::error::{config, data, Result};
use crate::files::{self, list_files, stem};
use crate::imageio::{self, IMAGE_EXTENSIONS};
use crate::report::{self, Report};
use crate::workflow::{self, hypothesis_name};

#[derive(Debug, Parser)]
#[command(name = "glass", version, about = "Anomaly detection with global and local anomaly synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. `--set model.epochs=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed; wins over the config file and GLASS_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation preset: gn, gn+ga, gn+ga+tp or las-only.
    #[arg(long)]
    pub ablation: Option<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let ablation = self.ablation.as_deref().map(Ablation::parse).transpose()?;
        Loader { file: self.config.as_deref(), ablation, overrides: &self.set, seed: self.seed }.load()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset tree and print per-category counts.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        /// Write the index as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one checkpoint per category.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tree of `.glft` files mirroring the dataset; replaces the
        /// built-in extractor.
        #[arg(long)]
        features_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score images with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image folder, or a category root (its test split is scored).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        features_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics from `infer` output.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output of `infer`; one subdirectory per category for
        /// multi-category ground truth.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset root or category root.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Local anomaly synthesis over a folder of normal images.
    SynthLas {
        #[arg(long)]
        input_dir: PathBuf,
        /// Texture images; procedural textures when omitted.
        #[arg(long)]
        texture_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta_mu: f64,
        #[arg(long, default_value_t = 0.1)]
        beta_sigma: f64,
        #[arg(long, default_value_t = 0.2)]
        beta_min: f64,
        #[arg(long, default_value_t = 0.8)]
        beta_max: f64,
        /// Samples per input image.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// full, bright or dark.
        #[arg(long, default_value = "full")]
        polarity: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weak-defect set: normals fused with other normals at fixed betas.
    GenWeakSet {
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7")]
        betas: Vec<f64>,
        /// Images per beta; defaults to the number of inputs.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "full")]
        polarity: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Manifold or hypersphere per category from the training spectrum.
    ChooseHypothesis {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest, train, infer and evaluate in one go.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the bundled synthetic benchmark as a dataset tree.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test_good: usize,
        #[arg(long, default_value_t = 20)]
        test_defect: usize,
        /// Weak defects at this transparency instead of LAS defects.
        #[arg(long)]
        weak_beta: Option<f64>,
        /// Comma list of stripes, blobs.
        #[arg(long, value_delimiter = ',', default_value = "stripes,blobs")]
        patterns: Vec<String>,
    },
}

fn polarity(s: &str) -> Result<Polarity> {
    match s {
        "full" => Ok(Polarity::Full),
        "bright" => Ok(Polarity::Bright),
        "dark" => Ok(Polarity::Dark),
        _ => Err(config!("polarity must be full, bright or dark, got {s:?}")),
    }
}

fn data_root(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.data_root.clone()).ok_or_else(|| config!("no dataset: pass --data or set data.root"))
}

fn input_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let paths = list_files(dir, IMAGE_EXTENSIONS)?;
    if paths.is_empty() {
        return Err(data!("no PNG/BMP images in {}", dir.display()));
    }
    Ok(paths)
}

fn fmt_ops(ops: &[glass_core::las::Augment]) -> String {
    ops.iter().map(|o| format!("{o:?}").to_lowercase()).collect::<Vec<_>>().join("+")
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { data, out } => {
            let index = dataset::ingest(&data)?;
            for c in &index.categories {
                println!("{}\ttrain={}\ttest_normal={}\ttest_anomalous={}\tsha256={}", c.name, c.train.len(), c.test_normals(), c.test_anomalies(), c.hash);
            }
            if let Some(out) = out {
                let json = serde_json::to_string_pretty(&index).expect("index serializes");
                files::write_atomic(&out, json.as_bytes())?;
            }
        }
        Command::Train { cfg, data, features_dir, out } => {
            let cfg = cfg.load()?;
            let index = dataset::ingest(&data_root(&cfg, data)?)?;
            let textures = workflow::texture_source(&cfg)?;
            for cat in index.select(&cfg.categories)? {
                let train = dataset::load_train(cat)?;
                let choice = workflow::choose(&cfg, &train)?;
                let (model, _) = match &features_dir {
                    Some(fd) => {
                        let maps = workflow::load_feature_maps(&cfg, &fd.join(&cat.name), cat)?;
                        workflow::train_features(&cfg, &cat.name, maps, choice.hypersphere)?
                    }
                    None => workflow::train_images(&cfg, &cat.name, &train, textures.clone(), choice.hypersphere)?,
                };
                let dir = out.join(&cat.name);
                checkpoint::save(&dir.join("model.glck"), &model)?;
                workflow::write_echo(&dir, &cfg, &[(format!("dataset:{}", cat.name), cat.hash.clone())])?;
                println!("{}\t{}\t{}", cat.name, hypothesis_name(&model.hypothesis), dir.join("model.glck").display());
            }
        }
        Command::Infer { checkpoint, input, features_dir, out } => {
            let model = checkpoint::load(&checkpoint)?;
            let images = workflow::collect_images(&input)?
                .into_iter()
                .map(|(id, p)| Ok((id, imageio::load_image(&p)?)))
                .collect::<Result<Vec<_>>>()?;
            let scored = workflow::infer_images(&model, &images, features_dir.as_deref(), &out)?;
            let ck = files::sha256_hex(&files::read(&checkpoint)?);
            files::write_atomic(&out.join("config.txt"), model.config_echo.as_bytes())?;
            files::write_atomic(&out.join("inputs.sha256"), format!("{ck}  checkpoint\n").as_bytes())?;
            println!("scored {} images into {}", scored.len(), out.display());
        }
        Command::Evaluate { cfg, pred, gt, out } => {
            let cfg = cfg.load()?;
            let index = dataset::ingest(&gt)?;
            let single = gt.join("train").is_dir();
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let mut cats = Vec::new();
            for cat in &index.categories {
                let p = if single { pred.clone() } else { pred.join(&cat.name) };
                let (r, h) = workflow::evaluate_dir(&cfg, &p, cat)?;
                report::write_histogram(&dir, &cat.name, &h)?;
                cats.push(r);
            }
            let report = Report::new(None, cats);
            report.write(&out)?;
            print!("{}", report.to_json());
        }
        Command::SynthLas { input_dir, texture_dir, alpha, beta_mu, beta_sigma, beta_min, beta_max, count, polarity: pol, seed, out } => {
            let las = LasConfig {
                alpha,
                beta: BetaPrior { mean: beta_mu, std: beta_sigma, lo: beta_min, hi: beta_max },
                polarity: polarity(&pol)?,
                ..LasConfig::default()
            };
            let textures = texture_dir.as_deref().map(workflow::load_textures).transpose()?;
            let inputs = input_images(&input_dir)?;
            let mut manifest = String::from("image,mask,source,beta,branch,augmentations,mask_fraction\n");
            for (i, path) in inputs.iter().enumerate() {
                let img = imageio::load_image(path)?;
                let las = LasConfig { max_resolution_log2: glass_core::las::resolution_log2_for(img.height.max(img.width)), ..las.clone() };
                let fg = foreground_mask(&img, las.polarity);
                for k in 0..count {
                    let mut rng = derive(seed, (i * count + k) as u64);
                    let texture = match &textures {
                        Some(t) => t[rng.gen_range(0..t.len())].clone(),
                        None => procedural_texture(img.height, img.width, img.channels, &mut rng),
                    };
                    let s = synthesize(&img, &fg, &texture, &las, None, &mut rng)?;
                    let name = format!("{}_{k:03}", stem(path));
                    imageio::save_image(&out.join("images").join(format!("{name}.png")), &s.image)?;
                    imageio::save_mask(&out.join("masks").join(format!("{name}_mask.png")), &s.mask.mask)?;
                    writeln!(
                        manifest,
                        "images/{name}.png,masks/{name}_mask.png,{},{},{},{},{}",
                        path.file_name().unwrap().to_string_lossy(),
                        s.beta,
                        format!("{:?}", s.mask.branch).to_lowercase(),
                        fmt_ops(&s.texture_ops),
                        s.mask.mask.fraction()
                    )
                    .unwrap();
                }
            }
            files::write_atomic(&out.join("manifest.csv"), manifest.as_bytes())?;
        }
        Command::GenWeakSet { input_dir, betas, count, polarity: pol, seed, out } => {
            let inputs = input_images(&input_dir)?;
            let normals = inputs.iter().map(|p| imageio::load_image(p)).collect::<Result<Vec<_>>>()?;
            let size = normals[0].height.max(normals[0].width);
            let las = LasConfig { polarity: polarity(&pol)?, ..LasConfig::for_size(size) };
            let per_beta = count.unwrap_or(normals.len());
            let set = generate_weak_set(&normals, &betas, per_beta, &las, seed)?;
            let mut manifest = String::from("beta,image,mask,background,foreground,mask_fraction\n");
            for w in &set {
                let sub = format!("beta_{:.2}", w.beta);
                let name = format!("{:03}", w.index);
                imageio::save_image(&out.join(&sub).join(format!("{name}.png")), &w.sample.image)?;
                imageio::save_mask(&out.join(&sub).join(format!("{name}_mask.png")), &w.sample.mask.mask)?;
                let src = |i: usize| inputs[i].file_name().unwrap().to_string_lossy().into_owned();
                writeln!(
                    manifest,
                    "{},{sub}/{name}.png,{sub}/{name}_mask.png,{},{},{}",
                    w.beta,
                    src(w.background),
                    src(w.foreground),
                    w.sample.mask.mask.fraction()
                )
                .unwrap();
            }
            files::write_atomic(&out.join("manifest.csv"), manifest.as_bytes())?;
        }
        Command::ChooseHypothesis { data, threshold, size, out } => {
            #[derive(Serialize)]
            struct Row {
                name: String,
                compactness: f64,
                decision: &'static str,
                threshold: f64,
            }
            let index = dataset::ingest(&data)?;
            let mut rows = Vec::new();
            for cat in &index.categories {
                let s = workflow::spectrogram(&dataset::load_train(cat)?, size, threshold)?;
                imageio::save_image(&out.join(format!("{}_mean.png", cat.name)), &imageio::stretch(&s.mean_image))?;
                imageio::save_image(&out.join(format!("{}_spectrum.png", cat.name)), &imageio::stretch(&s.spectrum))?;
                imageio::save_mask(&out.join(format!("{}_binary.png", cat.name)), &s.binary)?;
                println!("{}\t{:.4}\t{}", cat.name, s.compactness, s.decision.as_str());
                rows.push(Row { name: cat.name.clone(), compactness: s.compactness, decision: s.decision.as_str(), threshold });
            }
            let json = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
            files::write_atomic(&out.join("hypothesis.json"), json.as_bytes())?;
        }
        Command::Run { cfg, data, out } => {
            let cfg = cfg.load()?;
            let index = dataset::ingest(&data_root(&cfg, data)?)?;
            let report = workflow::run(&cfg, &index, &out)?;
            print!("{}", report.to_json());
        }
        Command::SynthData { out, seed, size, train, test_good, test_defect, weak_beta, patterns } => {
            let patterns = patterns
                .iter()
                .map(|p| Pattern::parse(p).ok_or_else(|| config!("unknown pattern {p:?} (stripes, blobs)")))
                .collect::<Result<Vec<_>>>()?;
            let spec = SyntheticSpec { size, patterns, train, test_good, test_defect, seed, ..SyntheticSpec::default() };
            let cats = match weak_beta {
                Some(b) => generate_weak(&spec, b)?,
                None => generate(&spec)?,
            };
            dataset::write_categories(&out, &cats)?;
            println!("wrote {} categories to {}", cats.len(), out.display());
        }
    }
    Ok(())
}

/// Parse arguments, run, and map failures to exit codes.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
