//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; `include = other.cfg`
//! splices another file (relative to the including file) at that point.
//! Later assignments win. Every key must be known, and every value is
//! validated before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glass_core::featpipe::PipelineConfig;
use glass_core::gas::{GasSteps, Hypothesis};
use glass_core::las::{resolution_log2_for, Augment, BetaPrior, LasConfig, MaskOps, Polarity};
use glass_core::model::{Branches, TrainConfig};

use crate::error::{config, Error, Result};
use crate::files;

pub const SEED_ENV: &str = "GLASS_SEED";
const MAX_INCLUDE_DEPTH: usize = 16;

/// Every accepted key with its default, in echo order.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.root", ""),
    ("data.categories", ""),
    ("data.image_size", "64"),
    ("data.textures", "procedural"),
    ("featpipe.patch", "3"),
    ("featpipe.levels", ""),
    ("las.alpha", "0.3333333333333333"),
    ("las.beta_mean", "0.5"),
    ("las.beta_std", "0.1"),
    ("las.beta_min", "0.2"),
    ("las.beta_max", "0.8"),
    ("las.draw_count", "3"),
    ("las.threshold", "0.5"),
    ("las.max_resolution_log2", "auto"),
    ("las.polarity", "full"),
    ("las.intersect", "true"),
    ("las.union", "true"),
    ("las.foreground", "true"),
    ("gas.mean", "0"),
    ("gas.sigma", "0.015"),
    ("gas.eta", "0.1"),
    ("gas.n_step", "20"),
    ("gas.n_proj", "4"),
    ("gas.ascent", "true"),
    ("gas.projection", "true"),
    ("gas.hypothesis", "manifold"),
    ("gas.r1", "4"),
    ("gas.radius_percentile", "75"),
    ("gas.refresh", "auto"),
    ("model.epochs", "128"),
    ("model.batch_size", "4"),
    ("model.lr_adaptor", "0.003"),
    ("model.lr_discriminator", "0.006"),
    ("model.focal_gamma", "2"),
    ("model.ohem_keep", "0.5"),
    ("model.hidden", "auto"),
    ("model.branches", "normal,gas,las"),
    ("hypothesis.threshold", "0.5"),
    ("infer.sigma", "auto"),
    ("metrics.pro_limit", "0.3"),
    ("metrics.pro_thresholds", "200"),
    ("metrics.histogram_bins", "50"),
];

/// Refresh fraction used with the hypersphere when `gas.refresh = auto`.
pub const DEFAULT_REFRESH: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypothesisMode {
    Manifold,
    Hypersphere,
    /// Pick per category from the spectrum of the mean training image.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Gn,
    GnGa,
    GnGaTp,
    LasOnly,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gn" => Ok(Ablation::Gn),
            "gn+ga" => Ok(Ablation::GnGa),
            "gn+ga+tp" => Ok(Ablation::GnGaTp),
            "las-only" => Ok(Ablation::LasOnly),
            _ => Err(config!("unknown ablation preset {s:?} (gn, gn+ga, gn+ga+tp, las-only)")),
        }
    }

    /// Key overrides for this preset.
    pub fn overrides(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Ablation::Gn => &[("model.branches", "normal,gas"), ("gas.ascent", "false"), ("gas.projection", "false")],
            Ablation::GnGa => &[("model.branches", "normal,gas,las"), ("gas.ascent", "true"), ("gas.projection", "false")],
            Ablation::GnGaTp => &[("model.branches", "normal,gas,las"), ("gas.ascent", "true"), ("gas.projection", "true")],
            Ablation::LasOnly => &[("model.branches", "normal,las")],
        }
    }
}

/// Raw assignments, before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _)| *k == key)
}

impl ConfigMap {
    pub fn defaults() -> Self {
        Self { values: SCHEMA.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(config!("unknown key {key:?}"));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Parse `text` as if it were the file `origin` (used to resolve
    /// includes).
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        self.apply_text_at(text, origin, 0)
    }

    fn apply_text_at(&mut self, text: &str, origin: &Path, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(config!("include depth exceeds {MAX_INCLUDE_DEPTH} at {}", origin.display()));
        }
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config!("{}:{}: expected `key = value`", origin.display(), n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                let base = origin.parent().unwrap_or(Path::new("."));
                self.apply_file_at(&base.join(v), depth + 1)?;
            } else {
                self.set(k, v).map_err(|e| config!("{}:{}: {e}", origin.display(), n + 1))?;
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_file_at(path, 0)
    }

    fn apply_file_at(&mut self, path: &Path, depth: usize) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        self.apply_text_at(&text, path, depth)
    }

    /// `key=value` override from the command line.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| config!("expected key=value, got {assignment:?}"))?;
        self.set(k.trim(), v)
    }

    /// Canonical text of every key, in schema order.
    pub fn echo(&self) -> String {
        SCHEMA.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k))).collect()
    }
}

/// Fully typed configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub categories: Vec<String>,
    pub image_size: usize,
    /// `None` selects procedural textures.
    pub textures: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub las: LasConfig,
    pub train: TrainConfig,
    pub hypothesis: HypothesisMode,
    pub r1: f64,
    /// Hypersphere refresh fraction: `None` for the default, `Some(0.0)`
    /// when switched off.
    pub refresh: Option<f64>,
    pub chooser_threshold: f64,
    pub infer_sigma: Option<f64>,
    pub pro_limit: f64,
    pub pro_thresholds: usize,
    pub histogram_bins: usize,
    /// Canonical echo of the resolved keys.
    pub echo: String,
}

fn parse<T: std::str::FromStr>(map: &ConfigMap, key: &str) -> Result<T> {
    let v = map.get(key);
    v.parse().map_err(|_| config!("{key}: cannot parse {v:?}"))
}

fn parse_bool(map: &ConfigMap, key: &str) -> Result<bool> {
    match map.get(key) {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        v => Err(config!("{key}: expected true/false, got {v:?}")),
    }
}

fn parse_auto<T: std::str::FromStr>(map: &ConfigMap, key: &str) -> Result<Option<T>> {
    if map.get(key) == "auto" {
        Ok(None)
    } else {
        parse(map, key).map(Some)
    }
}

fn list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let image_size: usize = parse(map, "data.image_size")?;
        if !(8..=4096).contains(&image_size) {
            return Err(config!("data.image_size must be in 8..=4096, got {image_size}"));
        }
        let path_or_none = |key: &str, none: &str| {
            let v = map.get(key);
            if v.is_empty() || v == none {
                None
            } else {
                Some(PathBuf::from(v))
            }
        };

        let levels = list(map.get("featpipe.levels"))
            .map(|s| s.parse::<usize>().map_err(|_| config!("featpipe.levels: bad index {s:?}")))
            .collect::<Result<Vec<_>>>()?;
        let pipeline = PipelineConfig { patch: parse(map, "featpipe.patch")?, levels };
        pipeline.validate()?;

        let polarity = match map.get("las.polarity") {
            "full" => Polarity::Full,
            "bright" => Polarity::Bright,
            "dark" => Polarity::Dark,
            v => return Err(config!("las.polarity: expected full, bright or dark, got {v:?}")),
        };
        let las = LasConfig {
            alpha: parse(map, "las.alpha")?,
            beta: BetaPrior {
                mean: parse(map, "las.beta_mean")?,
                std: parse(map, "las.beta_std")?,
                lo: parse(map, "las.beta_min")?,
                hi: parse(map, "las.beta_max")?,
            },
            augmentations: Augment::DEFAULT_SET.to_vec(),
            draw_count: parse(map, "las.draw_count")?,
            threshold: parse(map, "las.threshold")?,
            mask_ops: MaskOps {
                intersect: parse_bool(map, "las.intersect")?,
                union: parse_bool(map, "las.union")?,
                foreground: parse_bool(map, "las.foreground")?,
            },
            polarity,
            max_resolution_log2: parse_auto(map, "las.max_resolution_log2")?.unwrap_or_else(|| resolution_log2_for(image_size)),
        };
        las.validate()?;

        let hypothesis = match map.get("gas.hypothesis") {
            "manifold" => HypothesisMode::Manifold,
            "hypersphere" => HypothesisMode::Hypersphere,
            "auto" => HypothesisMode::Auto,
            v => return Err(config!("gas.hypothesis: expected manifold, hypersphere or auto, got {v:?}")),
        };
        let r1: f64 = parse(map, "gas.r1")?;
        let percentile: f64 = parse(map, "gas.radius_percentile")?;
        if !(percentile > 0.0 && percentile < 100.0) {
            return Err(config!("gas.radius_percentile must be in (0, 100), got {percentile}"));
        }
        let refresh: Option<f64> = match map.get("gas.refresh") {
            "auto" => None,
            "off" => Some(0.0),
            _ => Some(parse(map, "gas.refresh")?),
        };

        let mut branches = Branches { normal: false, gas: false, las: false };
        for b in list(map.get("model.branches")) {
            match b {
                "normal" => branches.normal = true,
                "gas" => branches.gas = true,
                "las" => branches.las = true,
                _ => return Err(config!("model.branches: unknown branch {b:?}")),
            }
        }

        let mut train = TrainConfig {
            epochs: parse(map, "model.epochs")?,
            batch_size: parse(map, "model.batch_size")?,
            lr_adaptor: parse(map, "model.lr_adaptor")?,
            lr_discriminator: parse(map, "model.lr_discriminator")?,
            focal_gamma: parse(map, "model.focal_gamma")?,
            ohem_keep: parse(map, "model.ohem_keep")?,
            hidden: parse_auto(map, "model.hidden")?,
            seed: parse(map, "seed")?,
            branches,
            hypersphere_coverage: percentile / 100.0,
            ..TrainConfig::desk()
        };
        train.gas.noise_mean = parse(map, "gas.mean")?;
        train.gas.noise_std = parse(map, "gas.sigma")?;
        train.gas.eta = parse(map, "gas.eta")?;
        train.gas.n_step = parse(map, "gas.n_step")?;
        train.gas.n_proj = parse(map, "gas.n_proj")?;
        train.gas.steps = GasSteps { ascent: parse_bool(map, "gas.ascent")?, projection: parse_bool(map, "gas.projection")? };
        train.gas.hypothesis = Hypothesis::manifold(r1);
        if let Some(f) = refresh.filter(|f| *f != 0.0) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config!("gas.refresh must be in (0, 1], off or auto, got {f}"));
            }
        }
        train.validate()?;

        let infer_sigma = parse_auto(map, "infer.sigma")?;
        if infer_sigma.is_some_and(|s: f64| !(s >= 0.0)) {
            return Err(config!("infer.sigma must be >= 0"));
        }
        let pro_limit: f64 = parse(map, "metrics.pro_limit")?;
        if !(pro_limit > 0.0 && pro_limit <= 1.0) {
            return Err(config!("metrics.pro_limit must be in (0, 1]"));
        }
        let pro_thresholds: usize = parse(map, "metrics.pro_thresholds")?;
        let histogram_bins: usize = parse(map, "metrics.histogram_bins")?;
        if pro_thresholds < 2 || histogram_bins == 0 {
            return Err(config!("metrics.pro_thresholds must be >= 2 and metrics.histogram_bins >= 1"));
        }
        let chooser_threshold: f64 = parse(map, "hypothesis.threshold")?;
        if !(0.0..=1.0).contains(&chooser_threshold) {
            return Err(config!("hypothesis.threshold must be in [0, 1]"));
        }

        Ok(Self {
            seed: train.seed,
            data_root: path_or_none("data.root", ""),
            categories: list(map.get("data.categories")).map(String::from).collect(),
            image_size,
            textures: path_or_none("data.textures", "procedural"),
            pipeline,
            las,
            train,
            hypothesis,
            r1,
            refresh,
            chooser_threshold,
            infer_sigma,
            pro_limit,
            pro_thresholds,
            histogram_bins,
            echo: map.echo(),
        })
    }

    /// Hash of the resolved configuration.
    pub fn hash(&self) -> String {
        files::sha256_hex(self.echo.as_bytes())
    }

    /// Training settings for one category once the hypothesis is decided.
    /// The hypersphere itself is fitted by the caller from features.
    pub fn train_for(&self, hypersphere: bool) -> TrainConfig {
        let mut t = self.train.clone();
        t.hypersphere_refresh = match (hypersphere, self.refresh) {
            (false, _) => None,
            (true, None) => Some(DEFAULT_REFRESH),
            (true, Some(f)) => Some(f).filter(|f| *f > 0.0),
        };
        t
    }

    pub fn sigma(&self) -> f64 {
        self.infer_sigma.unwrap_or_else(|| glass_core::infer::default_sigma(self.image_size, self.image_size))
    }
}

/// Defaults, then the optional file, then the ablation preset, then
/// `key=value` overrides, then `GLASS_SEED`, then an explicit seed.
pub struct Loader<'a> {
    pub file: Option<&'a Path>,
    pub ablation: Option<Ablation>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
}

impl Loader<'_> {
    pub fn load(&self) -> Result<RunConfig> {
        let mut map = ConfigMap::defaults();
        if let Some(f) = self.file {
            map.apply_file(f)?;
        }
        if let Some(a) = self.ablation {
            for (k, v) in a.overrides() {
                map.set(k, v)?;
            }
        }
        for o in self.overrides {
            map.apply_assignment(o)?;
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s.trim().parse().map_err(|_| config!("{SEED_ENV}: cannot parse {s:?}"))?;
            map.set("seed", &seed.to_string())?;
        }
        if let Some(s) = self.seed {
            map.set("seed", &s.to_string())?;
        }
        RunConfig::from_map(&map)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_map(&ConfigMap::defaults()).expect("schema defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use glass_core::model::DESK_R1;

    #[test]
    fn defaults_match_desk_profile() {
        let c = RunConfig::default();
        let desk = TrainConfig::desk();
        assert_eq!(c.train.epochs, desk.epochs);
        assert_eq!(c.train.lr_adaptor, desk.lr_adaptor);
        assert_eq!(c.train.gas, desk.gas);
        assert_eq!(c.las.alpha, 1.0 / 3.0);
        assert_eq!(c.r1, DESK_R1);
        assert_eq!(c.las.max_resolution_log2, 3);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut m = ConfigMap::defaults();
        let e = m.apply_text("model.epochz = 3\n", Path::new("x.cfg")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("x.cfg:1"));
    }

    #[test]
    fn include_and_override_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "model.epochs = 7\ngas.r1 = 2 # inner\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = base.cfg\nmodel.epochs = 9\n").unwrap();
        let c = Loader { file: Some(&dir.path().join("run.cfg")), ablation: None, overrides: &["seed=5".into()], seed: None }
            .load()
            .unwrap();
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.r1, 2.0);
        assert_eq!(c.seed, 5);
        assert!(c.echo.contains("model.epochs = 9\n"));
    }

    #[test]
    fn include_cycle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.cfg"), "include = a.cfg\n").unwrap();
        assert!(ConfigMap::defaults().apply_file(&dir.path().join("a.cfg")).is_err());
    }

    #[test]
    fn invalid_values() {
        for bad in ["las.alpha = 0.9", "gas.n_proj = 0", "model.branches = none", "gas.hypothesis = sphere", "data.image_size = x"] {
            let mut m = ConfigMap::defaults();
            m.apply_text(bad, Path::new("t")).unwrap();
            let e = RunConfig::from_map(&m).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn ablation_gn_disables_las_and_gas_steps() {
        let c = Loader { file: None, ablation: Some(Ablation::Gn), overrides: &[], seed: None }.load().unwrap();
        assert!(!c.train.branches.las && c.train.branches.gas);
        assert_eq!(c.train.gas.steps, GasSteps { ascent: false, projection: false });
        let full = Loader { file: None, ablation: Some(Ablation::GnGaTp), overrides: &[], seed: None }.load().unwrap();
        assert_eq!(full.train, RunConfig::default().train);
    }

    #[test]
    fn hypersphere_gets_default_refresh() {
        let c = RunConfig::default();
        assert_eq!(c.train_for(true).hypersphere_refresh, Some(DEFAULT_REFRESH));
        assert_eq!(c.train_for(false).hypersphere_refresh, None);
        let mut m = ConfigMap::defaults();
        m.set("gas.refresh", "off").unwrap();
        assert_eq!(RunConfig::from_map(&m).unwrap().train_for(true).hypersphere_refresh, None);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut m = ConfigMap::defaults();
        m.set("seed", "1").unwrap();
        let b = RunConfig::from_map(&m).unwrap();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
