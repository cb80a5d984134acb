//! `report.json` and per-category score histograms.
//!
//! Schema (`glass.report/1`):
//!
//! ```text
//! {
//!   "schema": "glass.report/1",
//!   "config_sha256": "<hex>" | null,
//!   "categories": [
//!     { "name", "hypothesis"?, "compactness"?, "dataset_sha256"?,
//!       "n_test_normal", "n_test_anomalous",
//!       "image_auroc", "pixel_auroc", "pixel_pro" }
//!   ],
//!   "mean": { "image_auroc", "pixel_auroc", "pixel_pro" }
//! }
//! ```
//!
//! Metrics are plain JSON numbers in shortest round-trip form; keys keep
//! the order above, so equal inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use glass_core::image::ImageU8;
use glass_core::metrics::Histogram;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files;
use crate::imageio;

pub const SCHEMA: &str = "glass.report/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pixel_pro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hypothesis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub compactness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset_sha256: Option<String>,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub config_sha256: Option<String>,
    pub categories: Vec<CategoryReport>,
    pub mean: Scores,
}

impl Report {
    pub fn new(config_sha256: Option<String>, categories: Vec<CategoryReport>) -> Self {
        let n = categories.len().max(1) as f64;
        let sum = |f: fn(&Scores) -> f64| categories.iter().map(|c| f(&c.scores)).sum::<f64>() / n;
        let mean = Scores { image_auroc: sum(|s| s.image_auroc), pixel_auroc: sum(|s| s.pixel_auroc), pixel_pro: sum(|s| s.pixel_pro) };
        Self { schema: SCHEMA.into(), config_sha256, categories, mean }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        files::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_slice(&files::read(path)?).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }
}

/// `bin,lo,hi,normal,anomalous` with class-normalized frequencies.
pub fn histogram_csv(h: &Histogram) -> String {
    let n = Histogram::normalized(&h.normal);
    let a = Histogram::normalized(&h.anomalous);
    let mut out = String::from("bin,lo,hi,normal,anomalous\n");
    for i in 0..h.bins() {
        writeln!(out, "{i},{},{},{},{}", h.edges[i], h.edges[i + 1], n[i], a[i]).unwrap();
    }
    out
}

/// Bar chart: normal bars in green, anomalous in red, overlap in yellow.
pub fn histogram_image(h: &Histogram, bar_width: usize, height: usize) -> ImageU8 {
    let n = Histogram::normalized(&h.normal);
    let a = Histogram::normalized(&h.anomalous);
    let peak = n.iter().chain(&a).copied().fold(0.0, f64::max).max(1e-12);
    let w = h.bins() * bar_width;
    let mut img = ImageU8::filled(height, w, 3, 255);
    for i in 0..h.bins() {
        let hn = (n[i] / peak * height as f64).round() as usize;
        let ha = (a[i] / peak * height as f64).round() as usize;
        for y in 0..height {
            let level = height - y;
            let color = match (level <= hn, level <= ha) {
                (true, true) => [200, 180, 40],
                (true, false) => [60, 170, 80],
                (false, true) => [210, 60, 50],
                (false, false) => continue,
            };
            for x in i * bar_width..(i + 1) * bar_width {
                for (c, v) in color.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }
    img
}

pub fn write_histogram(dir: &Path, name: &str, h: &Histogram) -> Result<()> {
    files::write_atomic(&dir.join(format!("{name}_histogram.csv")), histogram_csv(h).as_bytes())?;
    imageio::save_image(&dir.join(format!("{name}_histogram.png")), &histogram_image(h, 6, 120))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(name: &str, v: f64) -> CategoryReport {
        CategoryReport {
            name: name.into(),
            hypothesis: Some("manifold".into()),
            compactness: None,
            dataset_sha256: None,
            n_test_normal: 2,
            n_test_anomalous: 3,
            scores: Scores { image_auroc: v, pixel_auroc: v, pixel_pro: v / 2.0 },
        }
    }

    #[test]
    fn mean_and_round_trip() {
        let r = Report::new(Some("ab".into()), vec![cat("a", 1.0), cat("b", 0.5)]);
        assert_eq!(r.mean.image_auroc, 0.75);
        assert_eq!(r.mean.pixel_pro, 0.375);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        r.write(&p).unwrap();
        assert_eq!(Report::read(&p).unwrap(), r);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.find("\"schema\"").unwrap() < text.find("\"categories\"").unwrap());
        assert!(!text.contains("compactness"));
    }

    #[test]
    fn histogram_outputs() {
        let h = glass_core::metrics::histogram(&[0.1, 0.2], &[0.9], 4).unwrap();
        let csv = histogram_csv(&h);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().ends_with(",1,0"));
        assert!(csv.lines().nth(4).unwrap().ends_with(",0,1"));
        let img = histogram_image(&h, 3, 10);
        assert_eq!((img.height, img.width), (10, 12));
    }
}
