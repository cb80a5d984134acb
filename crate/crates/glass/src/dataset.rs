//! MVTec-style dataset trees.
//!
//! ```text
//! <category>/train/good/*.png
//! <category>/test/<defect>/*.png          (defect "good" = normal)
//! <category>/ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! A root holding `train/` directly is a single category named after the
//! directory; otherwise every subdirectory with a `train/` is a category.

use std::path::{Path, PathBuf};

use glass_core::image::{ImageU8, Mask};
use glass_core::synthetic::{test_stem, SyntheticCategory, TestImage};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{data, Result};
use crate::files::{self, list_dirs, list_files, stem};
use crate::imageio::{self, IMAGE_EXTENSIONS};

pub const GOOD: &str = "good";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TestEntry {
    /// `<defect>/<stem>`, unique within the category.
    pub id: String,
    pub path: PathBuf,
    /// `None` for normal test images.
    pub defect: Option<String>,
    pub mask: Option<PathBuf>,
}

impl TestEntry {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategoryIndex {
    pub name: String,
    pub root: PathBuf,
    pub train: Vec<PathBuf>,
    pub test: Vec<TestEntry>,
    /// SHA-256 over relative paths and contents of every indexed file.
    pub hash: String,
}

impl CategoryIndex {
    pub fn test_normals(&self) -> usize {
        self.test.iter().filter(|t| !t.is_anomalous()).count()
    }

    pub fn test_anomalies(&self) -> usize {
        self.test.iter().filter(|t| t.is_anomalous()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub categories: Vec<CategoryIndex>,
}

impl DatasetIndex {
    pub fn select(&self, names: &[String]) -> Result<Vec<&CategoryIndex>> {
        if names.is_empty() {
            return Ok(self.categories.iter().collect());
        }
        names
            .iter()
            .map(|n| self.categories.iter().find(|c| &c.name == n).ok_or_else(|| data!("no category {n:?} under {}", self.root.display())))
            .collect()
    }
}

fn mask_for(gt: &Path, defect: &str, image: &Path) -> Option<PathBuf> {
    let s = stem(image);
    [format!("{s}_mask.png"), format!("{s}.png"), format!("{s}_mask.bmp"), format!("{s}.bmp")]
        .into_iter()
        .map(|n| gt.join(defect).join(n))
        .find(|p| p.is_file())
}

pub fn index_category(root: &Path) -> Result<CategoryIndex> {
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "category".into());
    let train_dir = root.join("train").join(GOOD);
    if !train_dir.is_dir() {
        return Err(data!("{}: missing train/good", root.display()));
    }
    let train = list_files(&train_dir, IMAGE_EXTENSIONS)?;
    if train.is_empty() {
        return Err(data!("{}: empty train split", train_dir.display()));
    }
    let gt = root.join("ground_truth");
    if gt.join(GOOD).exists() {
        return Err(data!("{}: normal images must not have ground-truth masks", gt.join(GOOD).display()));
    }
    let mut test = Vec::new();
    let test_dir = root.join("test");
    if test_dir.is_dir() {
        for dir in list_dirs(&test_dir)? {
            let defect = dir.file_name().unwrap().to_string_lossy().into_owned();
            for path in list_files(&dir, IMAGE_EXTENSIONS)? {
                let id = format!("{defect}/{}", stem(&path));
                if defect == GOOD {
                    test.push(TestEntry { id, path, defect: None, mask: None });
                    continue;
                }
                let mask = mask_for(&gt, &defect, &path).ok_or_else(|| {
                    data!("anomalous test image {} has no mask (expected {})", path.display(), gt.join(&defect).join(format!("{}_mask.png", stem(&path))).display())
                })?;
                test.push(TestEntry { id, path, defect: Some(defect.clone()), mask: Some(mask) });
            }
        }
    }
    let hash = hash_files(root, train.iter().chain(test.iter().flat_map(|t| std::iter::once(&t.path).chain(t.mask.iter()))))?;
    Ok(CategoryIndex { name, root: root.to_path_buf(), train, test, hash })
}

fn hash_files<'a>(root: &Path, paths: impl Iterator<Item = &'a PathBuf>) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let rel = p.strip_prefix(root).unwrap_or(p);
        h.update(rel.to_string_lossy().replace('\\', "/").as_bytes());
        h.update([0]);
        h.update(Sha256::digest(files::read(p)?));
    }
    Ok(files::hex(&h.finalize()))
}

pub fn ingest(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(data!("dataset root {} is not a directory", root.display()));
    }
    let categories = if root.join("train").is_dir() {
        vec![index_category(root)?]
    } else {
        list_dirs(root)?
            .into_iter()
            .filter(|d| d.join("train").is_dir())
            .map(|d| index_category(&d))
            .collect::<Result<Vec<_>>>()?
    };
    if categories.is_empty() {
        return Err(data!("no categories under {}", root.display()));
    }
    for c in &categories {
        log::info!(
            "{}: {} train, {} test normal, {} test anomalous",
            c.name,
            c.train.len(),
            c.test_normals(),
            c.test_anomalies()
        );
    }
    Ok(DatasetIndex { root: root.to_path_buf(), categories })
}

/// Masks follow the same resize and center crop as images.
pub fn preprocess_mask(mask: &Mask, size: usize) -> Mask {
    if mask.height == size && mask.width == size {
        return mask.clone();
    }
    let img = ImageU8 { height: mask.height, width: mask.width, channels: 1, data: mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect() };
    let r = img.resize_center_crop(size);
    Mask { height: size, width: size, data: r.data.iter().map(|&v| v >= 128).collect() }
}

pub fn load_train(cat: &CategoryIndex) -> Result<Vec<ImageU8>> {
    cat.train.iter().map(|p| imageio::load_image(p)).collect()
}

/// Test images at native resolution; masks brought to `size` when given.
pub fn load_test(cat: &CategoryIndex, size: Option<usize>) -> Result<Vec<TestImage>> {
    cat.test
        .iter()
        .map(|t| {
            let image = imageio::load_image(&t.path)?;
            let mask = match &t.mask {
                Some(p) => {
                    let m = imageio::load_mask(p)?;
                    if size.is_none() && (m.height != image.height || m.width != image.width) {
                        return Err(data!("mask {} is {}x{}, image is {}x{}", p.display(), m.height, m.width, image.height, image.width));
                    }
                    Some(match size {
                        Some(s) => preprocess_mask(&m, s),
                        None => m,
                    })
                }
                None => None,
            };
            Ok(TestImage { image, mask })
        })
        .collect()
}

/// Write generated categories as an MVTec-style tree under `root`.
pub fn write_categories(root: &Path, categories: &[SyntheticCategory]) -> Result<()> {
    for c in categories {
        let dir = root.join(&c.name);
        for (i, img) in c.train.iter().enumerate() {
            imageio::save_image(&dir.join("train").join(GOOD).join(format!("{}.png", test_stem(i))), img)?;
        }
        let (mut good, mut bad) = (0, 0);
        for t in &c.test {
            match &t.mask {
                None => {
                    imageio::save_image(&dir.join("test").join(GOOD).join(format!("{}.png", test_stem(good))), &t.image)?;
                    good += 1;
                }
                Some(m) => {
                    let s = test_stem(bad);
                    imageio::save_image(&dir.join("test").join("defect").join(format!("{s}.png")), &t.image)?;
                    imageio::save_mask(&dir.join("ground_truth").join("defect").join(format!("{s}_mask.png")), m)?;
                    bad += 1;
                }
            }
        }
    }
    Ok(())
}
