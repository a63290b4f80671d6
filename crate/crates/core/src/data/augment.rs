use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};

/// Random geometric augmentation applied offline to training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Rotation drawn from ±`rotation_deg`.
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// Perspective skew angle drawn from ±`skew_deg`.
    pub skew_deg: f64,
    pub flip: bool,
    pub copies: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            rotation_deg: 15.0,
            shear_deg: 10.0,
            skew_deg: 10.0,
            flip: true,
            copies: 4,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rotation", self.rotation_deg),
            ("shear", self.shear_deg),
            ("skew", self.skew_deg),
        ] {
            if !(0.0..90.0).contains(&v) {
                return Err(Error::Config(format!(
                    "augmentation {name} range must be in [0, 90)"
                )));
            }
        }
        Ok(())
    }
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
    let (fx, fy) = (x - x0, y - y0);
    let p = |xx: f64, yy: f64| img.get_pixel(xx as u32, yy as u32).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0u8; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        out[k] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Rotation, shear and perspective skew about the image center (angles in
/// degrees), followed by an optional horizontal flip. Border pixels are
/// clamped outward.
pub fn augment_image(img: &RgbImage, rotation: f64, shear: f64, skew: f64, flip: bool) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let half = cx.max(1.0);
    let (s, c) = rotation.to_radians().sin_cos();
    let sh = shear.to_radians().tan();
    let k = 0.5 * skew.to_radians().tan();
    let mut out = RgbImage::new(w, h);
    for v in 0..h {
        for u in 0..w {
            // Output → source: undo skew, then the affine part.
            let (x, y) = (u as f64 - cx, v as f64 - cy);
            let denom = 1.0 - k * x / half;
            let (x, y) = (x / denom, y / denom);
            let (xr, yr) = (c * x + s * y, -s * x + c * y);
            let xs = xr - sh * yr;
            out.put_pixel(u, v, sample_bilinear(img, xs + cx, yr + cy));
        }
    }
    if flip {
        flip_horizontal(&out)
    } else {
        out
    }
}

/// Writes `copies` augmented variants of every original training image under
/// `out_root/train/<class>/` and returns the extended manifest. The test split
/// is untouched.
pub fn augment_offline(
    manifest: &DatasetManifest,
    spec: &AugmentationSpec,
    out_root: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut out = manifest.clone();
    if spec.copies == 0 {
        return Ok(out);
    }
    let originals: Vec<&ManifestEntry> = manifest.train.iter().filter(|e| !e.augmented).collect();
    for (idx, entry) in originals.iter().enumerate() {
        let img = manifest.load_entry(entry)?;
        let class = &manifest.classes[entry.class_id];
        let dir = out_root.join("train").join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = entry
            .path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for copy in 0..spec.copies {
            let mut draw = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
            let rot = draw(spec.rotation_deg);
            let sh = draw(spec.shear_deg);
            let sk = draw(spec.skew_deg);
            let flip = spec.flip && rng.gen_bool(0.5);
            let aug = augment_image(&img, rot, sh, sk, flip);
            let path = dir.join(format!("{stem}_aug{copy}.png"));
            aug.save(&path).map_err(|e| Error::image(&path, e))?;
            // Augmented files are already cropped/resized; store absolute paths
            // so `load_entry` does not re-apply the crop table.
            out.train.push(ManifestEntry {
                path: std::fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?,
                class_id: entry.class_id,
                augmented: true,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_directory_dataset, manifest_hash};

    fn gradient_image() -> RgbImage {
        RgbImage::from_fn(9, 7, |x, y| {
            Rgb([x as u8 * 20, y as u8 * 30, (x * y) as u8])
        })
    }

    #[test]
    fn flip_is_involution() {
        let img = gradient_image();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        let once = augment_image(&img, 0.0, 0.0, 0.0, true);
        assert_eq!(augment_image(&once, 0.0, 0.0, 0.0, true), img);
    }

    #[test]
    fn identity_transform() {
        let img = gradient_image();
        assert_eq!(augment_image(&img, 0.0, 0.0, 0.0, false), img);
        assert_ne!(augment_image(&img, 10.0, 5.0, 5.0, false), img);
    }

    #[test]
    fn offline_augmentation_counts_and_test_isolation() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("src");
        for split in ["train", "test"] {
            for c in ["x", "y"] {
                let d = src.join(split).join(c);
                std::fs::create_dir_all(&d).unwrap();
                for i in 0..5 {
                    gradient_image().save(d.join(format!("{i}.png"))).unwrap();
                }
            }
        }
        let m = load_directory_dataset(&src, (7, 9), None).unwrap();
        let test_hash = manifest_hash(&m.test);

        let none = AugmentationSpec {
            copies: 0,
            ..AugmentationSpec::default()
        };
        assert_eq!(
            augment_offline(&m, &none, &tmp.path().join("a0"), 1).unwrap(),
            m
        );

        let spec = AugmentationSpec::default();
        let a = augment_offline(&m, &spec, &tmp.path().join("a1"), 7).unwrap();
        assert_eq!(a.train.len(), 10 + 40);
        assert_eq!(manifest_hash(&a.test), test_hash);
        let b = augment_offline(&m, &spec, &tmp.path().join("a2"), 7).unwrap();
        let first = |mm: &DatasetManifest| mm.load_entry(&mm.train[10]).unwrap();
        assert_eq!(first(&a), first(&b));
    }
}
