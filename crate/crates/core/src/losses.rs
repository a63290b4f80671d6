//! Training objective: cross entropy, top-k cluster, separation and radius
//! losses, plus their weighted sum.
//!
//! Cluster and separation terms use the clamped [`ball_distance`], so a patch
//! inside a ball is exactly one radius away from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ball_distance, GeometryConfig, LatentPatchGrid, PrototypeBall};

/// Loss weights and the top-k count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub clstk: f64,
    pub sep: f64,
    pub rad: f64,
    pub k: usize,
}

impl LossWeights {
    pub fn protopnet_concepts() -> Self {
        LossWeights {
            ce: 1.0,
            clstk: 0.8,
            sep: -0.08,
            rad: 0.01,
            k: 10,
        }
    }

    pub fn protopool_concepts() -> Self {
        LossWeights {
            ce: 1.0,
            clstk: 0.8,
            sep: -0.08,
            rad: 3e-3,
            k: 10,
        }
    }

    pub fn tesnet_concepts() -> Self {
        LossWeights {
            ce: 1.0,
            clstk: 0.8,
            sep: -0.2,
            rad: 3e-5,
            k: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("losses.k must be at least 1".into()));
        }
        if !(self.ce > 0.0) {
            return Err(Error::Config("losses.ce must be positive".into()));
        }
        for (name, v) in [
            ("ce", self.ce),
            ("clstk", self.clstk),
            ("sep", self.sep),
            ("rad", self.rad),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("losses.{name} must be finite")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::protopnet_concepts()
    }
}

/// Which prototypes provide evidence for which class.
///
/// Stored as an m×C 0/1 matrix; `pool(c)` is the set `P_c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassAssignment {
    num_classes: usize,
    matrix: Vec<bool>,
    pools: Vec<Vec<usize>>,
}

impl ClassAssignment {
    /// Each class owns `per_class` consecutive prototypes.
    pub fn class_specific(per_class: usize, num_classes: usize) -> Self {
        let m = per_class * num_classes;
        let mut matrix = vec![false; m * num_classes];
        for j in 0..m {
            matrix[j * num_classes + j / per_class] = true;
        }
        Self::from_flat(num_classes, matrix)
    }

    /// Shared assignment from rows of 0/1 flags (one row per prototype).
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let num_classes = rows.first().map_or(0, Vec::len);
        if num_classes == 0 {
            return Err(Error::Config("assignment matrix is empty".into()));
        }
        let mut matrix = Vec::with_capacity(rows.len() * num_classes);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != num_classes {
                return Err(Error::Config(format!(
                    "assignment row {j} has {} entries, expected {num_classes}",
                    row.len()
                )));
            }
            matrix.extend_from_slice(row);
        }
        Ok(Self::from_flat(num_classes, matrix))
    }

    fn from_flat(num_classes: usize, matrix: Vec<bool>) -> Self {
        let m = matrix.len().checked_div(num_classes).unwrap_or(0);
        let pools = (0..num_classes)
            .map(|c| (0..m).filter(|&j| matrix[j * num_classes + c]).collect())
            .collect();
        ClassAssignment {
            num_classes,
            matrix,
            pools,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_prototypes(&self) -> usize {
        self.matrix.len().checked_div(self.num_classes).unwrap_or(0)
    }

    pub fn pool(&self, class: usize) -> &[usize] {
        &self.pools[class]
    }

    pub fn is_assigned(&self, prototype: usize, class: usize) -> bool {
        self.matrix[prototype * self.num_classes + class]
    }

    pub fn classes_of(&self, prototype: usize) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| self.is_assigned(prototype, c))
            .collect()
    }

    /// Rows of the 0/1 matrix.
    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.matrix
            .chunks(self.num_classes.max(1))
            .map(<[bool]>::to_vec)
            .collect()
    }

    /// Applies the same prototype permutation as the rest of the model.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let rows = self.rows();
        let permuted: Vec<Vec<bool>> = order.iter().map(|&j| rows[j].clone()).collect();
        let flat = permuted.concat();
        Self::from_flat(self.num_classes, flat)
    }
}

/// Per-ball minimum over patches of the clamped ball distance.
pub fn min_patch_distances(
    grid: &LatentPatchGrid,
    balls: &[PrototypeBall],
    cfg: &GeometryConfig,
) -> Result<Vec<f64>> {
    balls
        .iter()
        .map(|ball| {
            if ball.dim() != grid.dim {
                return Err(Error::DimensionMismatch {
                    expected: ball.dim(),
                    got: grid.dim,
                });
            }
            let mut best = f64::INFINITY;
            for p in grid.patches() {
                best = best.min(ball_distance(p, ball, cfg)?);
            }
            Ok(best)
        })
        .collect()
}

/// Sum of the `k` smallest `distances[j]` for `j ∈ pool`, with the chosen ids.
///
/// Ties are broken by prototype id. `k` larger than the pool sums the whole pool.
pub fn topk_smallest(distances: &[f64], pool: &[usize], k: usize) -> (f64, Vec<usize>) {
    let mut ranked: Vec<usize> = pool.to_vec();
    ranked.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    ranked.truncate(k);
    let sum = ranked.iter().map(|&j| distances[j]).sum();
    (sum, ranked)
}

/// Closest prototype outside `P_class`, if any.
pub fn nearest_wrong_class(
    distances: &[f64],
    assign: &ClassAssignment,
    class: usize,
) -> Option<(usize, f64)> {
    (0..distances.len())
        .filter(|&j| !assign.is_assigned(j, class))
        .map(|j| (j, distances[j]))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

fn check_batch(
    grids: &[LatentPatchGrid],
    labels: &[usize],
    balls: &[PrototypeBall],
    assign: &ClassAssignment,
) -> Result<()> {
    if grids.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: grids.len(),
            got: labels.len(),
        });
    }
    if grids.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if assign.num_prototypes() != balls.len() {
        return Err(Error::DimensionMismatch {
            expected: balls.len(),
            got: assign.num_prototypes(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= assign.num_classes()) {
        return Err(Error::Dataset(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Mean over images of the summed `k` smallest ball distances within the
/// image's own class pool.
pub fn topk_cluster_loss(
    grids: &[LatentPatchGrid],
    labels: &[usize],
    balls: &[PrototypeBall],
    assign: &ClassAssignment,
    k: usize,
    cfg: &GeometryConfig,
) -> Result<f64> {
    check_batch(grids, labels, balls, assign)?;
    for &y in labels {
        let pool = assign.pool(y).len();
        if k > pool {
            return Err(Error::KTooLarge { class: y, k, pool });
        }
    }
    let mut total = 0.0;
    for (grid, &y) in grids.iter().zip(labels) {
        let dists = min_patch_distances(grid, balls, cfg)?;
        total += topk_smallest(&dists, assign.pool(y), k).0;
    }
    Ok(total / grids.len() as f64)
}

/// Mean over images of the distance to the nearest wrong-class ball.
///
/// Images whose class owns every prototype are skipped.
pub fn separation_loss(
    grids: &[LatentPatchGrid],
    labels: &[usize],
    balls: &[PrototypeBall],
    assign: &ClassAssignment,
    cfg: &GeometryConfig,
) -> Result<f64> {
    check_batch(grids, labels, balls, assign)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (grid, &y) in grids.iter().zip(labels) {
        let dists = min_patch_distances(grid, balls, cfg)?;
        if let Some((_, d)) = nearest_wrong_class(&dists, assign, y) {
            total += d;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::NoWrongClassPrototypes);
    }
    Ok(total / counted as f64)
}

/// `Σ_j r_eff(j)²`.
pub fn radius_loss(balls: &[PrototypeBall], cfg: &GeometryConfig) -> f64 {
    balls
        .iter()
        .map(|b| {
            let r = b.effective_radius(cfg);
            r * r
        })
        .sum()
}

/// Gradient of [`radius_loss`] w.r.t. each `radius_param`.
pub fn radius_loss_gradient(balls: &[PrototypeBall], cfg: &GeometryConfig) -> Vec<f64> {
    balls
        .iter()
        .map(|b| 2.0 * b.effective_radius(cfg) * b.radius_gate(cfg))
        .collect()
}

pub fn composite_objective(ce: f64, clstk: f64, sep: f64, rad: f64, w: &LossWeights) -> f64 {
    w.ce * ce + w.clstk * clstk + w.sep * sep + w.rad * rad
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// An additional prototype-level loss term (e.g. orthogonality constraints
/// of hypersphere models). Returns the value and the gradient for each center.
pub trait AuxiliaryLoss: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, balls: &[PrototypeBall]) -> (f64, Vec<Vec<f64>>);
}

/// Weighted auxiliary losses added to the objective. Ships empty.
#[derive(Default)]
pub struct LossRegistry {
    entries: Vec<(f64, Box<dyn AuxiliaryLoss>)>,
}

impl LossRegistry {
    pub fn register(&mut self, weight: f64, loss: Box<dyn AuxiliaryLoss>) {
        self.entries.push((weight, loss));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &dyn AuxiliaryLoss)> {
        self.entries.iter().map(|(w, l)| (*w, l.as_ref()))
    }
}

impl std::fmt::Debug for LossRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.entries.iter().map(|(w, l)| (w, l.name())))
            .finish()
    }
}
