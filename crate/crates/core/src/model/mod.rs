//! The classifier: backbone → add-on layers → ball prototypes → evidence layer.

mod backbone;
pub mod checkpoint;
mod evidence;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{AddOnLayers, AddOnTrace, BackboneAdapter, BackboneTrace, TinyConv};
pub use evidence::{init_evidence_class_specific, Contribution, EvidenceLayer};

use crate::error::{Error, Result};
use crate::geometry::{
    accumulate_raw_gradient, effective_radius, is_closer, raw_measure, respond, BallResponse,
    Geometry, GeometryConfig, LatentPatchGrid, PrototypeBall, SimilarityMap,
};
use crate::losses::{softmax, ClassAssignment};
use crate::nn::FeatureMap;

/// Everything needed to build a freshly initialized network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub backbone_channels: Vec<usize>,
    /// (height, width) of input images.
    pub input_size: (usize, usize),
    pub prototype_dim: usize,
    pub geometry: Geometry,
    pub geometry_config: GeometryConfig,
    pub radius_init: f64,
    pub assignment: ClassAssignment,
}

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub stages_completed: Vec<String>,
    pub pruned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoConceptsNet {
    pub backbone: BackboneAdapter,
    pub addon: AddOnLayers,
    pub balls: Vec<PrototypeBall>,
    pub evidence: EvidenceLayer,
    pub geometry: Geometry,
    pub geometry_config: GeometryConfig,
    pub input_size: (usize, usize),
    pub metadata: TrainingMetadata,
}

/// Result of a forward pass on one image.
#[derive(Clone, Debug)]
pub struct ImageOutput {
    pub logits: Vec<f64>,
    pub similarities: Vec<f64>,
    pub maps: Vec<SimilarityMap>,
    pub latent: LatentPatchGrid,
}

impl ImageOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Argmax of the logits, first index on ties.
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-class evidence: the logit and the rows summing to it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEvidence {
    pub class: usize,
    pub logit: f64,
    pub rows: Vec<Contribution>,
}

/// Parameter groups trained with separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    AddOn,
    Centers,
    Radii,
    LastLayer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::AddOn,
        ParamGroup::Centers,
        ParamGroup::Radii,
        ParamGroup::LastLayer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::AddOn => "addon",
            ParamGroup::Centers => "centers",
            ParamGroup::Radii => "radii",
            ParamGroup::LastLayer => "last_layer",
        }
    }
}

/// Gradients for every parameter group, in each group's flat layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<f64>,
    pub addon: Vec<f64>,
    pub centers: Vec<f64>,
    pub radii: Vec<f64>,
    pub last_layer: Vec<f64>,
}

impl Gradients {
    pub fn zeros_for(net: &ProtoConceptsNet) -> Self {
        Gradients {
            backbone: vec![0.0; net.backbone.num_parameters()],
            addon: vec![0.0; net.addon.num_parameters()],
            centers: vec![0.0; net.balls.len() * net.latent_dim()],
            radii: vec![0.0; net.balls.len()],
            last_layer: vec![0.0; net.evidence.weights.len()],
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Backbone => &self.backbone,
            ParamGroup::AddOn => &self.addon,
            ParamGroup::Centers => &self.centers,
            ParamGroup::Radii => &self.radii,
            ParamGroup::LastLayer => &self.last_layer,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<f64> {
        match g {
            ParamGroup::Backbone => &mut self.backbone,
            ParamGroup::AddOn => &mut self.addon,
            ParamGroup::Centers => &mut self.centers,
            ParamGroup::Radii => &mut self.radii,
            ParamGroup::LastLayer => &mut self.last_layer,
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for g in ParamGroup::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += b;
            }
        }
    }
}

/// Which upstream groups need gradients during a backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradientNeeds {
    pub backbone: bool,
    pub addon: bool,
    pub centers: bool,
    pub radii: bool,
}

/// Forward intermediates for one image, consumed by [`ProtoConceptsNet::backward`].
#[derive(Clone, Debug)]
pub struct ImageTrace {
    input: FeatureMap,
    backbone: BackboneTrace,
    features: FeatureMap,
    addon: AddOnTrace,
    grid: (usize, usize),
    latent_hwc: Vec<f64>,
    /// Patch index closest to each ball center (gradient route).
    pub closest: Vec<usize>,
    /// Response of each ball at its closest patch.
    pub responses: Vec<BallResponse>,
    /// Max over patches of the clamped similarity.
    pub similarities: Vec<f64>,
    /// Min over patches of the clamped ball distance.
    pub distances: Vec<f64>,
}

impl ProtoConceptsNet {
    pub fn new(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.geometry_config.validate()?;
        if spec.backbone_channels.is_empty() {
            return Err(Error::Config(
                "model.backbone_channels must not be empty".into(),
            ));
        }
        if spec.prototype_dim == 0 {
            return Err(Error::Config("model.prototype_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneAdapter::tiny_conv(&spec.backbone_channels, &mut rng);
        let addon = AddOnLayers::new(
            backbone.out_channels(),
            spec.prototype_dim,
            spec.geometry == Geometry::Log,
            &mut rng,
        );
        if spec.geometry == Geometry::Cosine && spec.radius_init > std::f64::consts::PI {
            log::warn!(
                "cosine radius init {} exceeds π; effective radius is clamped to π",
                spec.radius_init
            );
        }
        let m = spec.assignment.num_prototypes();
        let balls = (0..m)
            .map(|_| {
                let center: Vec<f64> = (0..spec.prototype_dim)
                    .map(|_| match spec.geometry {
                        Geometry::Log => rng.gen_range(0.0..1.0),
                        Geometry::Cosine => rng.gen_range(-1.0..1.0),
                    })
                    .collect();
                PrototypeBall::new(center, spec.radius_init, spec.geometry)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProtoConceptsNet {
            backbone,
            addon,
            balls,
            evidence: EvidenceLayer::from_assignment(spec.assignment.clone()),
            geometry: spec.geometry,
            geometry_config: spec.geometry_config,
            input_size: spec.input_size,
            metadata: TrainingMetadata {
                seed,
                ..TrainingMetadata::default()
            },
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.balls.len()
    }

    pub fn num_classes(&self) -> usize {
        self.evidence.num_classes()
    }

    pub fn latent_dim(&self) -> usize {
        self.addon.dim()
    }

    pub fn grid_size(&self) -> (usize, usize) {
        self.backbone.output_grid(self.input_size)
    }

    /// Pixel stride of one latent cell along (y, x).
    pub fn cell_stride(&self) -> (f64, f64) {
        let (gh, gw) = self.grid_size();
        (
            self.input_size.0 as f64 / gh as f64,
            self.input_size.1 as f64 / gw as f64,
        )
    }

    pub fn effective_radii(&self) -> Vec<f64> {
        self.balls
            .iter()
            .map(|b| effective_radius(b, &self.geometry_config))
            .collect()
    }

    fn check_input(&self, image: &FeatureMap) -> Result<()> {
        if image.channels != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: image.channels,
            });
        }
        if (image.height, image.width) != self.input_size {
            return Err(Error::Resolution {
                expected: self.input_size,
                got: (image.height, image.width),
            });
        }
        Ok(())
    }

    /// Latent patch grid of one image.
    pub fn latent(&self, image: &FeatureMap, image_id: &str) -> Result<LatentPatchGrid> {
        self.check_input(image)?;
        let features = self.backbone.forward(image);
        let z = self.addon.forward(&features);
        LatentPatchGrid::new(z.height, z.width, z.channels, z.to_hwc(), image_id)
    }

    /// Full forward pass on a batch. Validates every image before computing.
    pub fn forward(&self, images: &[FeatureMap]) -> Result<Vec<ImageOutput>> {
        for img in images {
            self.check_input(img)?;
        }
        images.iter().map(|img| self.forward_one(img, "")).collect()
    }

    pub fn forward_one(&self, image: &FeatureMap, image_id: &str) -> Result<ImageOutput> {
        let latent = self.latent(image, image_id)?;
        self.forward_latent(latent)
    }

    /// Prototype and evidence layers applied to a precomputed latent grid.
    pub fn forward_latent(&self, latent: LatentPatchGrid) -> Result<ImageOutput> {
        let mut maps = Vec::with_capacity(self.balls.len());
        let mut similarities = Vec::with_capacity(self.balls.len());
        for (j, ball) in self.balls.iter().enumerate() {
            let map = crate::geometry::similarity_map(&latent, ball, j, &self.geometry_config)?;
            similarities.push(crate::geometry::max_pool_similarity(&map)?.0);
            maps.push(map);
        }
        Ok(ImageOutput {
            logits: self.evidence.logits(&similarities),
            similarities,
            maps,
            latent,
        })
    }

    /// Per-class logit decomposition over unmasked prototypes.
    pub fn logit_decomposition(&self, image: &FeatureMap) -> Result<Vec<ClassEvidence>> {
        let out = self.forward_one(image, "")?;
        Ok(self.decompose(&out.similarities))
    }

    pub fn decompose(&self, similarities: &[f64]) -> Vec<ClassEvidence> {
        let logits = self.evidence.logits(similarities);
        (0..self.num_classes())
            .map(|c| ClassEvidence {
                class: c,
                logit: logits[c],
                rows: self.evidence.contributions(similarities, c),
            })
            .collect()
    }

    /// Forward pass keeping everything the backward pass needs.
    pub fn trace(&self, image: &FeatureMap) -> Result<ImageTrace> {
        self.check_input(image)?;
        let (features, backbone) = self.backbone.forward_traced(image);
        let (z, addon) = self.addon.forward_traced(&features);
        let grid = (z.height, z.width);
        let dim = z.channels;
        let latent_hwc = z.to_hwc();
        if latent_hwc.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent grid"));
        }
        let eps = self.geometry_config.epsilon;
        let m = self.balls.len();
        let mut closest = Vec::with_capacity(m);
        let mut responses = Vec::with_capacity(m);
        let mut similarities = Vec::with_capacity(m);
        let mut distances = Vec::with_capacity(m);
        for ball in &self.balls {
            let r = effective_radius(ball, &self.geometry_config);
            let mut best: Option<(usize, f64)> = None;
            let mut sim = f64::NEG_INFINITY;
            let mut dist = f64::INFINITY;
            for (i, patch) in latent_hwc.chunks_exact(dim).enumerate() {
                let raw = raw_measure(self.geometry, patch, &ball.center)?;
                let resp = respond(self.geometry, raw, r, eps);
                sim = sim.max(resp.similarity);
                dist = dist.min(resp.distance);
                match best {
                    Some((_, b)) if !is_closer(self.geometry, raw, b) => {}
                    _ => best = Some((i, raw)),
                }
            }
            let (idx, raw) = best.ok_or(Error::EmptyMap)?;
            closest.push(idx);
            responses.push(respond(self.geometry, raw, r, eps));
            similarities.push(sim);
            distances.push(dist);
        }
        Ok(ImageTrace {
            input: image.clone(),
            backbone,
            features,
            addon,
            grid,
            latent_hwc,
            closest,
            responses,
            similarities,
            distances,
        })
    }

    /// Back-propagates upstream gradients on each ball's similarity and
    /// distance through the pass-through estimator and the feature layers.
    pub fn backward(
        &self,
        trace: &ImageTrace,
        grad_similarity: &[f64],
        grad_distance: &[f64],
        needs: GradientNeeds,
        grads: &mut Gradients,
    ) {
        let dim = self.latent_dim();
        let need_latent = needs.addon || needs.backbone;
        let mut grad_latent = if need_latent {
            vec![0.0; trace.latent_hwc.len()]
        } else {
            Vec::new()
        };
        for (j, ball) in self.balls.iter().enumerate() {
            let gs = grad_similarity[j];
            let gd = grad_distance[j];
            if gs == 0.0 && gd == 0.0 {
                continue;
            }
            let resp = &trace.responses[j];
            let p = trace.closest[j];
            let patch = &trace.latent_hwc[p * dim..(p + 1) * dim];
            let g_raw = gs * resp.sim_raw_grad + gd * resp.dist_raw_grad;
            let d_patch = if need_latent {
                Some(&mut grad_latent[p * dim..(p + 1) * dim])
            } else {
                None
            };
            let d_center = if needs.centers {
                Some(&mut grads.centers[j * dim..(j + 1) * dim])
            } else {
                None
            };
            accumulate_raw_gradient(
                self.geometry,
                patch,
                &ball.center,
                resp.raw,
                g_raw,
                d_patch,
                d_center,
            );
            if needs.radii {
                let g_r = gs * resp.sim_radius_grad + gd * resp.dist_radius_grad;
                grads.radii[j] += g_r * ball.radius_gate(&self.geometry_config);
            }
        }
        if !need_latent {
            return;
        }
        let (h, w) = trace.grid;
        let g_z = FeatureMap::from_hwc(dim, h, w, &grad_latent);
        let g_features = self.addon.backward(
            &trace.features,
            &trace.addon,
            g_z,
            &mut grads.addon,
            needs.backbone,
        );
        if let (true, Some(g)) = (needs.backbone, g_features) {
            self.backbone
                .backward(&trace.backbone, g, &mut grads.backbone);
        }
        let _ = &trace.input;
    }

    /// Flat parameter values of one group.
    pub fn group_values(&self, g: ParamGroup) -> Vec<f64> {
        match g {
            ParamGroup::Backbone => self.backbone.parameters(),
            ParamGroup::AddOn => self.addon.parameters(),
            ParamGroup::Centers => self
                .balls
                .iter()
                .flat_map(|b| b.center.iter().copied())
                .collect(),
            ParamGroup::Radii => self.balls.iter().map(|b| b.radius_param).collect(),
            ParamGroup::LastLayer => self.evidence.weights.clone(),
        }
    }

    pub fn set_group_values(&mut self, g: ParamGroup, values: &[f64]) {
        match g {
            ParamGroup::Backbone => self.backbone.set_parameters(values),
            ParamGroup::AddOn => self.addon.set_parameters(values),
            ParamGroup::Centers => {
                let d = self.latent_dim();
                for (b, c) in self.balls.iter_mut().zip(values.chunks_exact(d)) {
                    b.center.copy_from_slice(c);
                }
            }
            ParamGroup::Radii => {
                for (b, r) in self.balls.iter_mut().zip(values) {
                    b.radius_param = *r;
                }
            }
            ParamGroup::LastLayer => self.evidence.weights.copy_from_slice(values),
        }
    }

    /// Reorders prototypes together with their evidence rows and mask.
    pub fn permute_prototypes(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.balls = order.iter().map(|&j| self.balls[j].clone()).collect();
        out.evidence = self.evidence.permuted(order);
        out
    }
}
