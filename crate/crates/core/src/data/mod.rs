//! Datasets: directory ingestion, offline augmentation, and the synthetic
//! concept dataset.

mod augment;
mod manifest;
mod synthetic;

use std::path::Path;

use image::{GrayImage, RgbImage};

pub use augment::{augment_image, augment_offline, flip_horizontal, AugmentationSpec};
pub use manifest::{
    load_directory_dataset, load_samples, manifest_hash, parse_crop_table, DatasetManifest,
    ManifestEntry,
};
pub use synthetic::{
    attach_masks, generate_synthetic, patch_concept, write_dataset, ConceptClass, Shape,
    SyntheticConceptSpec, PATCH_CONCEPT_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::nn::FeatureMap;

/// One image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable identifier, e.g. the path relative to the dataset root.
    pub id: String,
    pub label: usize,
    pub image: RgbImage,
    /// Offline-augmented copy (excluded from member scans).
    pub augmented: bool,
    /// Pixels carrying the class concept, when known.
    pub concept_mask: Option<GrayImage>,
}

/// In-memory train/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Training samples that are original photos, not augmented copies.
    pub fn original_train(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(|s| !s.augmented)
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.train.iter().chain(&self.test).find(|s| s.id == id)
    }
}

/// Converts 8-bit RGB to a normalized channel-major tensor.
pub fn image_to_tensor(img: &RgbImage) -> FeatureMap {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut fm = FeatureMap::zeros(3, h, w);
    let plane = w * h;
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            fm.data[c * plane + i] = (px.0[c] as f64 / 255.0 - 0.5) / 0.25;
        }
    }
    fm
}

/// Reads an image file as RGB.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::image(path, e))
}

/// Reads an image and resizes it bilinearly to `(height, width)` if needed.
pub fn read_image_resized(path: &Path, size: (usize, usize)) -> Result<RgbImage> {
    let img = read_image(path)?;
    let (h, w) = (size.0 as u32, size.1 as u32);
    if img.dimensions() == (w, h) {
        return Ok(img);
    }
    Ok(image::imageops::resize(
        &img,
        w,
        h,
        image::imageops::FilterType::Triangle,
    ))
}
