use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_directory_dataset, read_image, Dataset, DatasetManifest, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    /// Whether offset `(dx, dy)` from the shape center lies inside a shape of
    /// half-extent `s`.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= s * s,
            Shape::Square => dx.abs() <= s * 0.85 && dy.abs() <= s * 0.85,
            Shape::Triangle => {
                // Upward-pointing, apex at (0, -s), base at y = s.
                dy <= s && dy >= -s && dx.abs() <= (dy + s) * 0.5
            }
            Shape::Cross => {
                let t = s * 0.3;
                (dx.abs() <= t && dy.abs() <= s) || (dy.abs() <= t && dx.abs() <= s)
            }
        }
    }
}

/// A class defined by the (shape, color) concept it carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptClass {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConceptSpec {
    pub classes: Vec<ConceptClass>,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Pixel noise amplitude as a fraction of the 8-bit range.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConceptSpec {
    fn default() -> Self {
        let class = |name: &str, shape, color| ConceptClass {
            name: name.to_string(),
            shape,
            color,
        };
        SyntheticConceptSpec {
            classes: vec![
                class("blue_triangle", Shape::Triangle, [40, 70, 220]),
                class("green_square", Shape::Square, [40, 190, 60]),
                class("red_circle", Shape::Circle, [220, 40, 40]),
                class("yellow_cross", Shape::Cross, [230, 210, 40]),
            ],
            image_size: 64,
            train_per_class: 200,
            test_per_class: 100,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 classes".into(),
            ));
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.name == b.name || (a.shape == b.shape && a.color == b.color) {
                    return Err(Error::Config(format!(
                        "synthetic classes {} and {} are not distinct",
                        a.name, b.name
                    )));
                }
            }
        }
        if self.classes.windows(2).any(|w| w[0].name >= w[1].name) {
            // Class ids must survive a write/reload, which lists directories sorted.
            return Err(Error::Config(
                "synthetic class names must be in ascending order".into(),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::Config(
                "synthetic image_size must be at least 16".into(),
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("synthetic splits must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(
                "synthetic noise_level must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn render(
    class: &ConceptClass,
    size: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, GrayImage) {
    let n = size as f64;
    let base: f64 = rng.gen_range(70.0..170.0);
    let tint: [f64; 3] = [
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-20.0..20.0),
    ];
    let (fx, fy) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
    let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let amp: f64 = rng.gen_range(10.0..30.0);

    let s = rng.gen_range(n * 0.16..n * 0.26);
    let margin = s + 1.0;
    let cx = rng.gen_range(margin..n - margin);
    let cy = rng.gen_range(margin..n - margin);

    let amp_noise = noise * 255.0;
    let mut img = RgbImage::new(size as u32, size as u32);
    let mut mask = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let inside = class.shape.contains(x as f64 - cx, y as f64 - cy, s);
            let texture = amp * ((x as f64 * fx + px).sin() * (y as f64 * fy + py).cos());
            let mut px_val = [0u8; 3];
            for c in 0..3 {
                let v = if inside {
                    class.color[c] as f64
                } else {
                    base + tint[c] + texture
                };
                let jitter = if amp_noise > 0.0 {
                    rng.gen_range(-amp_noise..=amp_noise)
                } else {
                    0.0
                };
                px_val[c] = (v + jitter).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px_val));
            if inside {
                mask.put_pixel(x as u32, y as u32, Luma([255]));
            }
        }
    }
    (img, mask)
}

/// Renders the dataset in memory. Sample ids are `<split>/<class>/<index>.png`,
/// matching the layout written by [`write_dataset`].
pub fn generate_synthetic(spec: &SyntheticConceptSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut dataset = Dataset {
        classes: spec.classes.iter().map(|c| c.name.clone()).collect(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split_id, (split, count)) in [
        ("train", spec.train_per_class),
        ("test", spec.test_per_class),
    ]
    .into_iter()
    .enumerate()
    {
        for (label, class) in spec.classes.iter().enumerate() {
            for i in 0..count {
                let key = splitmix(
                    spec.seed
                        ^ splitmix(((split_id as u64) << 48) | ((label as u64) << 32) | i as u64),
                );
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                let (image, mask) = render(class, spec.image_size, spec.noise_level, &mut rng);
                let sample = Sample {
                    id: format!("{split}/{}/{i:05}.png", class.name),
                    label,
                    image,
                    augmented: false,
                    concept_mask: Some(mask),
                };
                if split == "train" {
                    dataset.train.push(sample);
                } else {
                    dataset.test.push(sample);
                }
            }
        }
    }
    Ok(dataset)
}

/// Writes images to `root/<id>` and concept masks to `root/masks/<id>`, then
/// returns the manifest of the written tree.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<DatasetManifest> {
    let mut size = None;
    for s in dataset.train.iter().chain(&dataset.test) {
        let path = root.join(&s.id);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        s.image.save(&path).map_err(|e| Error::image(&path, e))?;
        if let Some(mask) = &s.concept_mask {
            let mpath = root.join("masks").join(&s.id);
            if let Some(dir) = mpath.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            mask.save(&mpath).map_err(|e| Error::image(&mpath, e))?;
        }
        size.get_or_insert((s.image.height() as usize, s.image.width() as usize));
    }
    let size = size.ok_or(Error::EmptyTrainingSet)?;
    load_directory_dataset(root, size, None)
}

/// Attaches `root/masks/<id>` to every sample that has one on disk.
pub fn attach_masks(dataset: &mut Dataset, root: &Path) -> Result<usize> {
    let mut found = 0;
    for s in dataset.train.iter_mut().chain(dataset.test.iter_mut()) {
        let path = root.join("masks").join(&s.id);
        if path.is_file() {
            let mask = read_image(&path)?;
            let mut gray = GrayImage::new(mask.width(), mask.height());
            for (g, p) in gray.pixels_mut().zip(mask.pixels()) {
                g.0[0] = p.0[0];
            }
            if gray.dimensions() != s.image.dimensions() {
                gray = image::imageops::resize(
                    &gray,
                    s.image.width(),
                    s.image.height(),
                    image::imageops::FilterType::Nearest,
                );
            }
            s.concept_mask = Some(gray);
            found += 1;
        }
    }
    Ok(found)
}

/// Fraction of a grid cell's pixel footprint that must be concept pixels for
/// the patch to count as showing the concept.
pub const PATCH_CONCEPT_THRESHOLD: f64 = 0.2;

/// Ground-truth concept of latent cell `(row, col)` on a `grid` = (rows, cols):
/// `Some(label)` when the concept mask covers at least
/// [`PATCH_CONCEPT_THRESHOLD`] of the cell footprint, `None` for background.
pub fn patch_concept(
    mask: &GrayImage,
    label: usize,
    row: usize,
    col: usize,
    grid: (usize, usize),
) -> Option<usize> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let y0 = row * h / grid.0;
    let y1 = ((row + 1) * h / grid.0).max(y0 + 1).min(h);
    let x0 = col * w / grid.1;
    let x1 = ((col + 1) * w / grid.1).max(x0 + 1).min(w);
    let mut on = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if mask.get_pixel(x as u32, y as u32).0[0] >= 128 {
                on += 1;
            }
        }
    }
    let area = (y1 - y0) * (x1 - x0);
    (area > 0 && on as f64 >= PATCH_CONCEPT_THRESHOLD * area as f64).then_some(label)
}
