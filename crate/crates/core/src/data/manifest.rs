use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use sha2::{Digest, Sha256};

use super::{read_image, Dataset, Sample};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub class_id: usize,
    pub augmented: bool,
}

/// File listing of a `root/<split>/<class>/<image>` tree.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    /// (height, width) every image is resized to.
    pub resolution: (usize, usize),
    /// Bounding-box crops `(x1, y1, x2, y2)` keyed by relative path.
    pub crops: BTreeMap<PathBuf, (u32, u32, u32, u32)>,
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Parses `image_path x1 y1 x2 y2` lines; blank lines and `#` comments skipped.
pub fn parse_crop_table(text: &str) -> Result<BTreeMap<PathBuf, (u32, u32, u32, u32)>> {
    let mut table = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let coords: Option<Vec<u32>> = parts
            .get(1..5)
            .and_then(|c| c.iter().map(|v| v.parse().ok()).collect());
        match (parts.len(), coords) {
            (5, Some(c)) if c[0] < c[2] && c[1] < c[3] => {
                table.insert(PathBuf::from(parts[0]), (c[0], c[1], c[2], c[3]));
            }
            _ => {
                return Err(Error::Dataset(format!(
                    "crop table line {}: expected `image_path x1 y1 x2 y2` with x1<x2, y1<y2",
                    n + 1
                )))
            }
        }
    }
    Ok(table)
}

/// Lists a class-per-subdirectory image tree in lexicographic order.
pub fn load_directory_dataset(
    root: &Path,
    resolution: (usize, usize),
    crop_table: Option<&Path>,
) -> Result<DatasetManifest> {
    let train_dir = root.join("train");
    let test_dir = root.join("test");
    for dir in [&train_dir, &test_dir] {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "missing directory {}",
                dir.display()
            )));
        }
    }
    let classes: Vec<String> = sorted_dir(&train_dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories in {}",
            train_dir.display()
        )));
    }

    let list_split = |split: &str| -> Result<Vec<ManifestEntry>> {
        let split_dir = root.join(split);
        for name in sorted_dir(&split_dir)?.iter().filter(|p| p.is_dir()) {
            let n = name
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            if !classes.iter().any(|c| c == n) {
                return Err(Error::Dataset(format!(
                    "{split} split has unknown class {n}"
                )));
            }
        }
        let mut entries = Vec::new();
        for (class_id, class) in classes.iter().enumerate() {
            let dir = split_dir.join(class);
            if !dir.is_dir() {
                continue;
            }
            let files: Vec<PathBuf> = sorted_dir(&dir)?
                .into_iter()
                .filter(|p| is_image(p))
                .collect();
            if files.is_empty() {
                return Err(Error::Dataset(format!(
                    "class {class} has no images in {split}"
                )));
            }
            for f in files {
                image::image_dimensions(&f).map_err(|e| Error::image(&f, e))?;
                let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
                entries.push(ManifestEntry {
                    path: rel,
                    class_id,
                    augmented: false,
                });
            }
        }
        Ok(entries)
    };
    let train = list_split("train")?;
    let test = list_split("test")?;

    let crops = match crop_table {
        Some(p) => parse_crop_table(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => BTreeMap::new(),
    };
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        train,
        test,
        resolution,
        crops,
    })
}

/// Order-sensitive hash of a list of entries.
pub fn manifest_hash(entries: &[ManifestEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.path.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((e.class_id as u64).to_le_bytes());
        h.update([e.augmented as u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetManifest {
    /// Reads, crops and resizes one entry.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<image::RgbImage> {
        let mut img = read_image(&self.root.join(&entry.path))?;
        if let Some(&(x1, y1, x2, y2)) = self.crops.get(&entry.path) {
            let x2 = x2.min(img.width());
            let y2 = y2.min(img.height());
            if x1 < x2 && y1 < y2 {
                img = imageops::crop_imm(&img, x1, y1, x2 - x1, y2 - y1).to_image();
            }
        }
        let (h, w) = self.resolution;
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        }
        Ok(img)
    }
}

/// Loads every manifest entry into memory.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Dataset> {
    let load = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
        entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    id: e.path.to_string_lossy().replace('\\', "/"),
                    label: e.class_id,
                    image: manifest.load_entry(e)?,
                    augmented: e.augmented,
                    concept_mask: None,
                })
            })
            .collect()
    };
    Ok(Dataset {
        classes: manifest.classes.clone(),
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    })
}
