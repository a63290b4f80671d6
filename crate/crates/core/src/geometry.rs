//! Ball prototypes and their clamped similarity and distance functions.
//!
//! A prototype is a ball `B(c, r)` in latent space. Every patch inside the
//! ball scores the same clamped similarity, so the ball can be visualized by
//! any of the training patches it contains.
//!
//! Two latent geometries are supported:
//!
//! * [`Geometry::Log`]: squared Euclidean distance `d2 = ‖z − c‖²` with the
//!   log activation `ln((d2 + 1) / (d2 + ε))`. The radius lives on the
//!   squared-distance scale, so membership is `d2 ≤ r`.
//! * [`Geometry::Cosine`]: cosine similarity `s` on the hypersphere, angular
//!   distance `acos(s)`, and clamp `cos(r)` with `r ∈ (0, π]`.
//!
//! Training uses a pass-through estimator: the gradient w.r.t. the patch and
//! center always follows the unclamped branch, and the radius only receives
//! gradient from the clamp branch (inside the ball).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent geometry of a prototype ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Log,
    Cosine,
}

impl Geometry {
    pub fn as_str(self) -> &'static str {
        match self {
            Geometry::Log => "log",
            Geometry::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "log" => Some(Geometry::Log),
            "cosine" => Some(Geometry::Cosine),
            _ => None,
        }
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Numerical constants shared by all balls of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Stability constant of the log activation.
    pub epsilon: f64,
    /// Floor applied to every effective radius.
    pub min_radius: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            epsilon: 1e-4,
            min_radius: 1e-6,
        }
    }
}

impl GeometryConfig {
    pub fn new(epsilon: f64, min_radius: f64) -> Result<Self> {
        let cfg = GeometryConfig {
            epsilon,
            min_radius,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "geometry.epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.min_radius > 0.0 && self.min_radius.is_finite()) {
            return Err(Error::Config(format!(
                "geometry.min_radius must be positive, got {}",
                self.min_radius
            )));
        }
        Ok(())
    }
}

/// One learned concept: a ball around `center` with a trainable radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBall {
    pub center: Vec<f64>,
    /// Raw trainable parameter; see [`effective_radius`].
    pub radius_param: f64,
    pub geometry: Geometry,
}

impl PrototypeBall {
    pub fn new(center: Vec<f64>, radius_param: f64, geometry: Geometry) -> Result<Self> {
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype center"));
        }
        if !radius_param.is_finite() {
            return Err(Error::NonFinite("prototype radius"));
        }
        Ok(PrototypeBall {
            center,
            radius_param,
            geometry,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn effective_radius(&self, cfg: &GeometryConfig) -> f64 {
        effective_radius(self, cfg)
    }

    /// Derivative of the effective radius w.r.t. `radius_param` (1 or 0).
    pub fn radius_gate(&self, cfg: &GeometryConfig) -> f64 {
        match self.geometry {
            Geometry::Log => {
                if self.radius_param > cfg.min_radius {
                    1.0
                } else {
                    0.0
                }
            }
            Geometry::Cosine => {
                if self.radius_param > cfg.min_radius && self.radius_param < PI {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Positive radius actually used by the ball.
///
/// LOG: `max(radius_param, min_radius)` on the squared-distance scale.
/// COSINE: `clamp(radius_param, min_radius, π)` in radians.
pub fn effective_radius(ball: &PrototypeBall, cfg: &GeometryConfig) -> f64 {
    match ball.geometry {
        Geometry::Log => ball.radius_param.max(cfg.min_radius),
        Geometry::Cosine => ball.radius_param.clamp(cfg.min_radius, PI),
    }
}

/// The unclamped log activation `ln((d2 + 1) / (d2 + ε))`.
pub fn log_activation(d2: f64, epsilon: f64) -> f64 {
    ((d2 + 1.0) / (d2 + epsilon)).ln()
}

/// Squared Euclidean distance.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Plain cosine similarity; errors on zero-norm inputs.
pub fn cosine_similarity(patch: &[f64], center: &[f64]) -> Result<f64> {
    let np = norm(patch);
    let nc = norm(center);
    if np == 0.0 {
        return Err(Error::DegenerateVector("patch"));
    }
    if nc == 0.0 {
        return Err(Error::DegenerateVector("center"));
    }
    Ok((dot(patch, center) / (np * nc)).clamp(-1.0, 1.0))
}

fn check_inputs(patch: &[f64], ball: &PrototypeBall) -> Result<()> {
    if patch.len() != ball.dim() {
        return Err(Error::DimensionMismatch {
            expected: ball.dim(),
            got: patch.len(),
        });
    }
    if patch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent patch"));
    }
    if ball.center.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("prototype center"));
    }
    Ok(())
}

/// Geometry-specific closeness measure between a patch and a center.
///
/// LOG returns the squared distance (smaller is closer); COSINE returns the
/// cosine similarity (larger is closer).
pub fn raw_measure(geometry: Geometry, patch: &[f64], center: &[f64]) -> Result<f64> {
    match geometry {
        Geometry::Log => Ok(squared_distance(patch, center)),
        Geometry::Cosine => cosine_similarity(patch, center),
    }
}

/// True when raw measure `a` is strictly closer to the center than `b`.
pub fn is_closer(geometry: Geometry, a: f64, b: f64) -> bool {
    match geometry {
        Geometry::Log => a < b,
        Geometry::Cosine => a > b,
    }
}

/// Unclamped activation branch as a function of the raw measure.
pub fn activation(geometry: Geometry, raw: f64, epsilon: f64) -> f64 {
    match geometry {
        Geometry::Log => log_activation(raw, epsilon),
        Geometry::Cosine => raw,
    }
}

fn activation_slope(geometry: Geometry, raw: f64, epsilon: f64) -> f64 {
    match geometry {
        Geometry::Log => 1.0 / (raw + 1.0) - 1.0 / (raw + epsilon),
        Geometry::Cosine => 1.0,
    }
}

/// Clamp branch: the similarity every member patch receives.
pub fn clamp_value(geometry: Geometry, r_eff: f64, epsilon: f64) -> f64 {
    match geometry {
        Geometry::Log => log_activation(r_eff, epsilon),
        Geometry::Cosine => r_eff.cos(),
    }
}

fn clamp_slope(geometry: Geometry, r_eff: f64, epsilon: f64) -> f64 {
    match geometry {
        Geometry::Log => 1.0 / (r_eff + 1.0) - 1.0 / (r_eff + epsilon),
        Geometry::Cosine => -r_eff.sin(),
    }
}

/// Unclamped distance branch (squared distance or angle).
pub fn unclamped_distance(geometry: Geometry, raw: f64) -> f64 {
    match geometry {
        Geometry::Log => raw,
        Geometry::Cosine => raw.clamp(-1.0, 1.0).acos(),
    }
}

fn distance_slope(geometry: Geometry, raw: f64) -> f64 {
    match geometry {
        Geometry::Log => 1.0,
        // d acos(s) / ds, kept finite at s = ±1.
        Geometry::Cosine => -1.0 / (1.0 - raw * raw).max(1e-12).sqrt(),
    }
}

/// Forward value and pass-through partial derivatives of one ball at one patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallResponse {
    pub raw: f64,
    pub similarity: f64,
    pub distance: f64,
    pub member: bool,
    /// ∂similarity/∂raw along the unclamped branch (always active).
    pub sim_raw_grad: f64,
    /// ∂similarity/∂r_eff, nonzero only on the plateau.
    pub sim_radius_grad: f64,
    /// ∂distance/∂raw along the unclamped branch (always active).
    pub dist_raw_grad: f64,
    /// ∂distance/∂r_eff, nonzero only on the plateau.
    pub dist_radius_grad: f64,
}

/// Evaluates a ball at a patch given its raw measure and effective radius.
///
/// Members take the clamp value exactly, so every patch inside a ball reports
/// bitwise the same similarity and its distance equals the radius.
pub fn respond(geometry: Geometry, raw: f64, r_eff: f64, epsilon: f64) -> BallResponse {
    let delta = unclamped_distance(geometry, raw);
    let member = delta <= r_eff;
    let clamp = clamp_value(geometry, r_eff, epsilon);
    let (similarity, distance) = if member {
        (clamp, r_eff)
    } else {
        (activation(geometry, raw, epsilon).min(clamp), delta)
    };
    BallResponse {
        raw,
        similarity,
        distance,
        member,
        sim_raw_grad: activation_slope(geometry, raw, epsilon),
        sim_radius_grad: if member {
            clamp_slope(geometry, r_eff, epsilon)
        } else {
            0.0
        },
        dist_raw_grad: distance_slope(geometry, raw),
        dist_radius_grad: if member { 1.0 } else { 0.0 },
    }
}

/// Accumulates `scale · ∂raw/∂patch` and `scale · ∂raw/∂center`.
pub fn accumulate_raw_gradient(
    geometry: Geometry,
    patch: &[f64],
    center: &[f64],
    raw: f64,
    scale: f64,
    d_patch: Option<&mut [f64]>,
    d_center: Option<&mut [f64]>,
) {
    match geometry {
        Geometry::Log => {
            if let Some(dp) = d_patch {
                for ((g, p), c) in dp.iter_mut().zip(patch).zip(center) {
                    *g += scale * 2.0 * (p - c);
                }
            }
            if let Some(dc) = d_center {
                for ((g, p), c) in dc.iter_mut().zip(patch).zip(center) {
                    *g -= scale * 2.0 * (p - c);
                }
            }
        }
        Geometry::Cosine => {
            let np = norm(patch);
            let nc = norm(center);
            if np == 0.0 || nc == 0.0 {
                return;
            }
            let inv = 1.0 / (np * nc);
            if let Some(dp) = d_patch {
                let k = raw / (np * np);
                for ((g, p), c) in dp.iter_mut().zip(patch).zip(center) {
                    *g += scale * (c * inv - k * p);
                }
            }
            if let Some(dc) = d_center {
                let k = raw / (nc * nc);
                for ((g, p), c) in dc.iter_mut().zip(patch).zip(center) {
                    *g += scale * (p * inv - k * c);
                }
            }
        }
    }
}

fn evaluate(patch: &[f64], ball: &PrototypeBall, cfg: &GeometryConfig) -> Result<BallResponse> {
    check_inputs(patch, ball)?;
    let raw = raw_measure(ball.geometry, patch, &ball.center)?;
    Ok(respond(
        ball.geometry,
        raw,
        effective_radius(ball, cfg),
        cfg.epsilon,
    ))
}

fn require(ball: &PrototypeBall, geometry: Geometry) -> Result<()> {
    if ball.geometry != geometry {
        return Err(Error::GeometryMismatch(format!(
            "expected a {geometry} ball, got {}",
            ball.geometry
        )));
    }
    Ok(())
}

/// `min(ln((d2+1)/(d2+ε)), ln((r+1)/(r+ε)))` for a LOG ball.
pub fn log_ball_similarity(
    patch: &[f64],
    ball: &PrototypeBall,
    cfg: &GeometryConfig,
) -> Result<f64> {
    require(ball, Geometry::Log)?;
    Ok(evaluate(patch, ball, cfg)?.similarity)
}

/// `min(cos_sim(patch, center), cos(r))` for a COSINE ball.
pub fn cos_ball_similarity(
    patch: &[f64],
    ball: &PrototypeBall,
    cfg: &GeometryConfig,
) -> Result<f64> {
    require(ball, Geometry::Cosine)?;
    Ok(evaluate(patch, ball, cfg)?.similarity)
}

/// Clamped similarity for either geometry.
pub fn ball_similarity(patch: &[f64], ball: &PrototypeBall, cfg: &GeometryConfig) -> Result<f64> {
    Ok(evaluate(patch, ball, cfg)?.similarity)
}

/// Baseline activation without the ball clamp (point prototype at the center).
pub fn unclamped_similarity(
    patch: &[f64],
    ball: &PrototypeBall,
    cfg: &GeometryConfig,
) -> Result<f64> {
    check_inputs(patch, ball)?;
    let raw = raw_measure(ball.geometry, patch, &ball.center)?;
    Ok(activation(ball.geometry, raw, cfg.epsilon))
}

/// Distance to the ball: the radius inside, the center distance outside.
pub fn ball_distance(patch: &[f64], ball: &PrototypeBall, cfg: &GeometryConfig) -> Result<f64> {
    Ok(evaluate(patch, ball, cfg)?.distance)
}

/// Inclusive membership test.
pub fn is_member(patch: &[f64], ball: &PrototypeBall, cfg: &GeometryConfig) -> Result<bool> {
    Ok(evaluate(patch, ball, cfg)?.member)
}

/// Gradient of a ball quantity w.r.t. the patch, center and radius parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct BallGradient {
    pub value: f64,
    pub d_patch: Vec<f64>,
    pub d_center: Vec<f64>,
    pub d_radius_param: f64,
}

fn gradient(
    patch: &[f64],
    ball: &PrototypeBall,
    cfg: &GeometryConfig,
    of_distance: bool,
) -> Result<BallGradient> {
    let resp = evaluate(patch, ball, cfg)?;
    let (value, raw_grad, radius_grad) = if of_distance {
        (resp.distance, resp.dist_raw_grad, resp.dist_radius_grad)
    } else {
        (resp.similarity, resp.sim_raw_grad, resp.sim_radius_grad)
    };
    let mut d_patch = vec![0.0; patch.len()];
    let mut d_center = vec![0.0; patch.len()];
    accumulate_raw_gradient(
        ball.geometry,
        patch,
        &ball.center,
        resp.raw,
        raw_grad,
        Some(&mut d_patch),
        Some(&mut d_center),
    );
    Ok(BallGradient {
        value,
        d_patch,
        d_center,
        d_radius_param: radius_grad * ball.radius_gate(cfg),
    })
}

/// Clamped similarity with its pass-through gradient.
pub fn similarity_gradient(
    patch: &[f64],
    ball: &PrototypeBall,
    cfg: &GeometryConfig,
) -> Result<BallGradient> {
    gradient(patch, ball, cfg, false)
}

/// Clamped distance with its pass-through gradient.
pub fn distance_gradient(
    patch: &[f64],
    ball: &PrototypeBall,
    cfg: &GeometryConfig,
) -> Result<BallGradient> {
    gradient(patch, ball, cfg, true)
}

/// H×W grid of D-dimensional latent patches, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPatchGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    data: Vec<f64>,
    pub source_image_id: String,
}

impl LatentPatchGrid {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        data: Vec<f64>,
        source_image_id: impl Into<String>,
    ) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::DimensionMismatch {
                expected: height * width * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent grid"));
        }
        Ok(LatentPatchGrid {
            height,
            width,
            dim,
            data,
            source_image_id: source_image_id.into(),
        })
    }

    /// Builds a grid from a list of patches laid out row-major.
    pub fn from_patches(
        height: usize,
        width: usize,
        patches: &[Vec<f64>],
        source_image_id: impl Into<String>,
    ) -> Result<Self> {
        let dim = patches.first().map_or(0, Vec::len);
        if patches.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: patches.len(),
            });
        }
        let mut data = Vec::with_capacity(height * width * dim);
        for p in patches {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            data.extend_from_slice(p);
        }
        Self::new(height, width, dim, data, source_image_id)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Patches in row-major order.
    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Per-patch clamped similarities of one prototype over one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub prototype_id: usize,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, prototype_id: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: values.len(),
            });
        }
        Ok(SimilarityMap {
            height,
            width,
            values,
            prototype_id,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Applies the geometry's clamped similarity to every cell of `grid`.
pub fn similarity_map(
    grid: &LatentPatchGrid,
    ball: &PrototypeBall,
    prototype_id: usize,
    cfg: &GeometryConfig,
) -> Result<SimilarityMap> {
    if grid.dim != ball.dim() {
        return Err(Error::DimensionMismatch {
            expected: ball.dim(),
            got: grid.dim,
        });
    }
    let values = grid
        .patches()
        .map(|p| ball_similarity(p, ball, cfg))
        .collect::<Result<Vec<_>>>()?;
    SimilarityMap::new(grid.height, grid.width, values, prototype_id)
}

/// Maximum of a map and its row-major-first argmax.
pub fn max_pool_similarity(map: &SimilarityMap) -> Result<(f64, (usize, usize))> {
    let mut best: Option<(f64, usize)> = None;
    for (i, &v) in map.values.iter().enumerate() {
        match best {
            Some((b, _)) if v <= b => {}
            _ => best = Some((v, i)),
        }
    }
    let (value, idx) = best.ok_or(Error::EmptyMap)?;
    Ok((value, (idx / map.width, idx % map.width)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_ball(center: Vec<f64>, r: f64) -> PrototypeBall {
        PrototypeBall::new(center, r, Geometry::Log).unwrap()
    }

    fn cos_ball(center: Vec<f64>, r: f64) -> PrototypeBall {
        PrototypeBall::new(center, r, Geometry::Cosine).unwrap()
    }

    /// Patch at squared distance `d2` from the origin along the first axis.
    fn at_d2(d2: f64) -> Vec<f64> {
        vec![d2.sqrt(), 0.0]
    }

    #[test]
    fn effective_radius_examples() {
        let cfg = GeometryConfig::default();
        assert_eq!(log_ball(vec![0.0], 7.5).effective_radius(&cfg), 7.5);
        assert_eq!(log_ball(vec![0.0], -2.0).effective_radius(&cfg), 1e-6);
        assert_eq!(cos_ball(vec![1.0], 8.05).effective_radius(&cfg), PI);
        assert_eq!(cos_ball(vec![1.0], 0.5).effective_radius(&cfg), 0.5);
    }

    #[test]
    fn log_similarity_reference_values() {
        let cfg = GeometryConfig::default();
        let ball = log_ball(vec![0.0, 0.0], 1.0);
        // Independent scalar evaluation: ln(a) - ln(b).
        let clamped = 2f64.ln() - 1.0001f64.ln();
        let outside = 5f64.ln() - 4.0001f64.ln();
        let s0 = log_ball_similarity(&at_d2(0.0), &ball, &cfg).unwrap();
        let s4 = log_ball_similarity(&at_d2(4.0), &ball, &cfg).unwrap();
        assert!((s0 - clamped).abs() < 1e-12);
        assert!((s0 - 0.69305).abs() < 1e-5);
        assert!((s4 - outside).abs() < 1e-12);
        assert!((s4 - 0.22312).abs() < 1e-5);

        // r → 0 limit: a vanishing floor recovers the unclamped activation.
        let limit = GeometryConfig::new(1e-4, 1e-12).unwrap();
        let tiny = log_ball(vec![0.0, 0.0], 0.0);
        let s = log_ball_similarity(&at_d2(0.0), &tiny, &limit).unwrap();
        assert!((s - (1.0f64 / 1e-4).ln()).abs() < 1e-4);
        assert!((s - 9.2104).abs() < 1e-4);
    }

    #[test]
    fn cos_similarity_examples() {
        let cfg = GeometryConfig::default();
        let ball = cos_ball(vec![0.3, -1.2, 2.0], 0.5);
        let s = cos_ball_similarity(&[0.3, -1.2, 2.0], &ball, &cfg).unwrap();
        assert_eq!(s, 0.5f64.cos());
        assert!((s - 0.87758).abs() < 1e-5);

        let ortho = cos_ball(vec![1.0, 0.0], 0.5);
        assert_eq!(cos_ball_similarity(&[0.0, 3.0], &ortho, &cfg).unwrap(), 0.0);

        let tiny = cos_ball(vec![1.0, 2.0], 0.0);
        let s = cos_ball_similarity(&[1.0, 2.0], &tiny, &cfg).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let cfg = GeometryConfig::default();
        let ball = cos_ball(vec![1.0, 0.0], 0.5);
        assert!(matches!(
            cos_ball_similarity(&[0.0, 0.0], &ball, &cfg),
            Err(Error::DegenerateVector("patch"))
        ));
        let zero = cos_ball(vec![0.0, 0.0], 0.5);
        assert!(matches!(
            cos_ball_similarity(&[1.0, 0.0], &zero, &cfg),
            Err(Error::DegenerateVector("center"))
        ));
        let lb = log_ball(vec![0.0, 0.0], 1.0);
        assert!(matches!(
            log_ball_similarity(&[f64::NAN, 0.0], &lb, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            log_ball_similarity(&[0.0], &lb, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cos_ball_similarity(&[1.0, 0.0], &lb, &cfg),
            Err(Error::GeometryMismatch(_))
        ));
        assert!(PrototypeBall::new(vec![f64::INFINITY], 1.0, Geometry::Log).is_err());
    }

    #[test]
    fn distance_and_membership() {
        let cfg = GeometryConfig::default();
        let ball = log_ball(vec![0.0, 0.0], 1.0);
        assert_eq!(ball_distance(&at_d2(0.25), &ball, &cfg).unwrap(), 1.0);
        assert!((ball_distance(&at_d2(4.0), &ball, &cfg).unwrap() - 4.0).abs() < 1e-12);
        assert!(is_member(&[0.9f64.sqrt(), 0.0], &ball, &cfg).unwrap());
        assert!(is_member(&[1.0, 0.0], &ball, &cfg).unwrap());
        assert!(!is_member(&[1.1f64.sqrt(), 0.0], &ball, &cfg).unwrap());

        let cb = cos_ball(vec![1.0, 0.0], 0.5);
        let patch = [0.2f64.cos(), 0.2f64.sin()];
        assert_eq!(ball_distance(&patch, &cb, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn map_and_max_pool() {
        let cfg = GeometryConfig::default();
        let ball = log_ball(vec![0.0, 0.0], 1.0);
        let grid = LatentPatchGrid::from_patches(1, 1, &[vec![0.0, 0.0]], "img").unwrap();
        let map = similarity_map(&grid, &ball, 0, &cfg).unwrap();
        assert!((map.get(0, 0) - 0.69305).abs() < 1e-5);

        let patches: Vec<Vec<f64>> = [0.0, 4.0, 9.0, 16.0].iter().map(|&d| at_d2(d)).collect();
        let grid = LatentPatchGrid::from_patches(2, 2, &patches, "img").unwrap();
        let map = similarity_map(&grid, &ball, 3, &cfg).unwrap();
        for (i, &d2) in [0.0f64, 4.0, 9.0, 16.0].iter().enumerate() {
            let expected = ((d2 + 1.0).ln() - (d2 + 1e-4).ln()).min(2f64.ln() - 1.0001f64.ln());
            assert!((map.values[i] - expected).abs() < 1e-12);
        }
        let (v, at) = max_pool_similarity(&map).unwrap();
        assert_eq!((v, at), (map.values[0], (0, 0)));

        let m = SimilarityMap::new(2, 2, vec![0.2, 0.7, 0.1, 0.3], 0).unwrap();
        assert_eq!(max_pool_similarity(&m).unwrap(), (0.7, (0, 1)));
        let c = SimilarityMap::new(2, 3, vec![0.4; 6], 0).unwrap();
        assert_eq!(max_pool_similarity(&c).unwrap(), (0.4, (0, 0)));
        let e = SimilarityMap::new(0, 0, vec![], 0).unwrap();
        assert!(matches!(max_pool_similarity(&e), Err(Error::EmptyMap)));

        let bad = LatentPatchGrid::from_patches(1, 1, &[vec![0.0, 0.0, 0.0]], "img").unwrap();
        assert!(similarity_map(&bad, &ball, 0, &cfg).is_err());
    }

    #[test]
    fn pass_through_inside_ball() {
        let cfg = GeometryConfig::default();
        let ball = log_ball(vec![0.1, -0.2, 0.3], 2.0);
        let patch = [0.5, 0.1, 0.0];
        let g = similarity_gradient(&patch, &ball, &cfg).unwrap();
        let d2 = squared_distance(&patch, &ball.center);
        assert!(d2 < 2.0);
        let slope = 1.0 / (d2 + 1.0) - 1.0 / (d2 + 1e-4);
        for i in 0..3 {
            let expected = slope * 2.0 * (patch[i] - ball.center[i]);
            assert!((g.d_patch[i] - expected).abs() < 1e-12);
            assert!((g.d_center[i] + expected).abs() < 1e-12);
        }
        assert!(g.d_radius_param != 0.0);

        let far = [5.0, 5.0, 5.0];
        assert_eq!(
            similarity_gradient(&far, &ball, &cfg)
                .unwrap()
                .d_radius_param,
            0.0
        );
        assert_eq!(
            distance_gradient(&far, &ball, &cfg).unwrap().d_radius_param,
            0.0
        );
        assert_eq!(
            distance_gradient(&patch, &ball, &cfg)
                .unwrap()
                .d_radius_param,
            1.0
        );
    }
}
