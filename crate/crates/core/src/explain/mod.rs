//! Concept visualization: ball membership scans, bounding boxes, galleries of
//! the training patches inside each ball, per-image scoresheets and static
//! HTML reports.

mod report;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

pub use report::{cached_scan, load_scan, render_report, save_scan, Report};

use crate::data::{patch_concept, Sample};
use crate::error::{Error, Result};
use crate::geometry::{
    activation, effective_radius, is_member, raw_measure, respond, SimilarityMap,
};
use crate::model::ProtoConceptsNet;
use crate::nn::FeatureMap;
use crate::training::LabeledTensors;

pub const DEFAULT_TOP_N: usize = 5;
pub const DEFAULT_TOP_P: usize = 3;

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

/// A training patch inside a ball.
#[derive(Clone, Debug, PartialEq)]
pub struct MemberPatch {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    /// Clamped similarity (the ball's plateau value).
    pub similarity: f64,
    /// Unclamped distance to the center, used for ranking.
    pub distance: f64,
    pub bbox: BBox,
    pub label: usize,
}

/// Members of every ball, indexed by prototype id.
pub type MemberScan = Vec<Vec<MemberPatch>>;

/// Bilinear resize with half-pixel centers (edge-clamped).
pub fn upsample_bilinear(
    values: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src =
            ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bot = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Upsamples `map` to `(height, width)` and returns the tight rectangle of
/// pixels at or above the 95th percentile.
pub fn extract_bbox(map: &SimilarityMap, image_size: (usize, usize)) -> Result<BBox> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    let (h, w) = image_size;
    let up = upsample_bilinear(&map.values, map.height, map.width, h, w);
    let threshold = percentile(&up, 95.0);
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if up[y * w + x] >= threshold {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    Ok(BBox {
        x0: x0 as u32,
        y0: y0 as u32,
        x1: x1 as u32,
        y1: y1 as u32,
    })
}

fn scan_image(
    net: &ProtoConceptsNet,
    input: &FeatureMap,
    id: &str,
    label: usize,
) -> Result<MemberScan> {
    let grid = net.latent(input, id)?;
    let eps = net.geometry_config.epsilon;
    let mut out = vec![Vec::new(); net.num_prototypes()];
    for (j, ball) in net.balls.iter().enumerate() {
        let r = effective_radius(ball, &net.geometry_config);
        let mut raw = Vec::with_capacity(grid.len());
        let mut hits = Vec::new();
        for (i, p) in grid.patches().enumerate() {
            let v = raw_measure(net.geometry, p, &ball.center)?;
            let resp = respond(net.geometry, v, r, eps);
            if resp.member {
                hits.push((i, resp));
            }
            raw.push(v);
        }
        if hits.is_empty() {
            continue;
        }
        let unclamped: Vec<f64> = raw
            .iter()
            .map(|&v| activation(net.geometry, v, eps))
            .collect();
        let map = SimilarityMap::new(grid.height, grid.width, unclamped, j)?;
        let bbox = extract_bbox(&map, net.input_size)?;
        for (i, resp) in hits {
            out[j].push(MemberPatch {
                image_id: id.to_string(),
                row: i / grid.width,
                col: i % grid.width,
                similarity: resp.similarity,
                distance: crate::geometry::unclamped_distance(net.geometry, resp.raw),
                bbox,
                label,
            });
        }
    }
    Ok(out)
}

/// Tests every grid cell of every image against every ball. Images are
/// processed in parallel one latent grid at a time; results keep image order.
pub fn scan_members(net: &ProtoConceptsNet, images: &LabeledTensors) -> Result<MemberScan> {
    let per_image: Vec<MemberScan> = (0..images.len())
        .into_par_iter()
        .map(|i| scan_image(net, &images.inputs[i], &images.ids[i], images.labels[i]))
        .collect::<Result<_>>()?;
    let mut scan = vec![Vec::new(); net.num_prototypes()];
    for image in per_image {
        for (all, hits) in scan.iter_mut().zip(image) {
            all.extend(hits);
        }
    }
    Ok(scan)
}

/// Members shown for one prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptGallery {
    pub prototype: usize,
    pub members: Vec<MemberPatch>,
    pub classes: Vec<usize>,
}

/// Closest members by unclamped distance (ties by image id), at most one per
/// image, truncated to `top_n`.
pub fn build_gallery(
    prototype: usize,
    members: &[MemberPatch],
    classes: Vec<usize>,
    top_n: usize,
) -> Result<ConceptGallery> {
    if top_n == 0 {
        return Err(Error::Config("top_n must be at least 1".into()));
    }
    let mut ranked: Vec<&MemberPatch> = members.iter().collect();
    ranked.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    let mut seen = std::collections::HashSet::new();
    let members = ranked
        .into_iter()
        .filter(|m| seen.insert(m.image_id.as_str()))
        .take(top_n)
        .cloned()
        .collect();
    Ok(ConceptGallery {
        prototype,
        members,
        classes,
    })
}

/// Galleries for every prototype; pruned prototypes get empty galleries.
pub fn build_galleries(
    net: &ProtoConceptsNet,
    scan: &MemberScan,
    top_n: usize,
) -> Result<Vec<ConceptGallery>> {
    (0..net.num_prototypes())
        .map(|j| {
            let members: &[MemberPatch] = if net.evidence.mask[j] { &scan[j] } else { &[] };
            build_gallery(j, members, net.evidence.assignment.classes_of(j), top_n)
        })
        .collect()
}

/// Re-checks that every gallery patch lies inside its ball.
pub fn verify_galleries(
    net: &ProtoConceptsNet,
    galleries: &[ConceptGallery],
    images: &LabeledTensors,
) -> Result<()> {
    let index: HashMap<&str, usize> = images
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    for g in galleries {
        for m in &g.members {
            let i = *index
                .get(m.image_id.as_str())
                .ok_or_else(|| Error::Dataset(format!("gallery image {} not found", m.image_id)))?;
            let grid = net.latent(&images.inputs[i], &m.image_id)?;
            if !is_member(
                grid.patch(m.row, m.col),
                &net.balls[g.prototype],
                &net.geometry_config,
            )? {
                return Err(Error::Dataset(format!(
                    "patch ({}, {}) of {} is not inside ball {}",
                    m.row, m.col, m.image_id, g.prototype
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub prototype: usize,
    pub similarity: f64,
    pub weight: f64,
    pub contribution: f64,
    /// Where the prototype fires in the explained image.
    pub bbox: BBox,
    pub gallery: Vec<MemberPatch>,
}

/// "This looks like those": top prototypes behind one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Scoresheet {
    pub image_id: String,
    pub predicted: usize,
    pub rows: Vec<ScoreRow>,
    /// Logit of every class.
    pub class_totals: Vec<f64>,
}

pub fn local_explanation(
    net: &ProtoConceptsNet,
    image: &FeatureMap,
    image_id: &str,
    galleries: &[ConceptGallery],
    top_p: usize,
) -> Result<Scoresheet> {
    let out = net.forward_one(image, image_id)?;
    let predicted = out.predicted();
    let mut rows = net.evidence.contributions(&out.similarities, predicted);
    rows.sort_by(|a, b| {
        b.contribution
            .total_cmp(&a.contribution)
            .then(a.prototype.cmp(&b.prototype))
    });
    rows.truncate(top_p);
    let rows = rows
        .into_iter()
        .map(|c| {
            Ok(ScoreRow {
                prototype: c.prototype,
                similarity: c.similarity,
                weight: c.weight,
                contribution: c.contribution,
                bbox: extract_bbox(&out.maps[c.prototype], net.input_size)?,
                gallery: galleries
                    .iter()
                    .find(|g| g.prototype == c.prototype)
                    .map(|g| g.members.clone())
                    .unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Scoresheet {
        image_id: image_id.to_string(),
        predicted,
        rows,
        class_totals: out.logits,
    })
}

/// Number of distinct source images among a ball's members.
pub fn distinct_images(members: &[MemberPatch]) -> usize {
    members
        .iter()
        .map(|m| m.image_id.as_str())
        .collect::<std::collections::HashSet<_>>()
        .len()
}

/// Fraction of members whose ground-truth concept (class concept or
/// background) equals the most common one. `None` without members or masks.
pub fn concept_purity(
    members: &[MemberPatch],
    samples: &HashMap<&str, &Sample>,
    grid: (usize, usize),
) -> Option<f64> {
    let mut counts: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    for m in members {
        let s = samples.get(m.image_id.as_str())?;
        let mask = s.concept_mask.as_ref()?;
        *counts
            .entry(patch_concept(mask, s.label, m.row, m.col, grid))
            .or_default() += 1;
    }
    let modal = counts.values().max()?;
    Some(*modal as f64 / members.len() as f64)
}

/// Summary statistics of a scan over the surviving balls.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSummary {
    pub surviving: usize,
    /// Surviving balls whose members come from at least two images.
    pub multi_image: usize,
    pub mean_purity: Option<f64>,
}

pub fn summarize_scan(
    net: &ProtoConceptsNet,
    scan: &MemberScan,
    samples: &[Sample],
) -> ScanSummary {
    let lookup: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let grid = net.grid_size();
    let alive: Vec<usize> = (0..net.num_prototypes())
        .filter(|&j| net.evidence.mask[j])
        .collect();
    let purities: Vec<f64> = alive
        .iter()
        .filter_map(|&j| concept_purity(&scan[j], &lookup, grid))
        .collect();
    ScanSummary {
        surviving: alive.len(),
        multi_image: alive
            .iter()
            .filter(|&&j| distinct_images(&scan[j]) >= 2)
            .count(),
        mean_purity: (!purities.is_empty())
            .then(|| purities.iter().sum::<f64>() / purities.len() as f64),
    }
}
