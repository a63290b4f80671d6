use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Adam, EpochLog, LabeledTensors, StageKind, StageLog, StageSpec, TrainingSchedule};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, nearest_wrong_class, radius_loss, radius_loss_gradient, softmax, topk_smallest,
};
use crate::model::{argmax, GradientNeeds, Gradients, ParamGroup, ProtoConceptsNet};

/// Per-image contribution to one optimizer step.
struct SampleStep {
    grads: Gradients,
    ce: f64,
    clstk: f64,
    sep: Option<f64>,
    correct: bool,
}

/// Epoch data order: seeded by (seed, stage, epoch) so resumed runs match.
fn epoch_order(n: usize, seed: u64, stage: StageKind, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.index() << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// `Σ |w[j][c]|` over unmasked rows and classes `c` not assigned to `j`.
fn l1_penalty(net: &ProtoConceptsNet, grads: Option<&mut [f64]>, weight: f64) -> f64 {
    let ev = &net.evidence;
    let c_total = net.num_classes();
    let mut total = 0.0;
    let mut grads = grads;
    for j in 0..net.num_prototypes() {
        if !ev.mask[j] {
            continue;
        }
        for c in 0..c_total {
            if ev.assignment.is_assigned(j, c) {
                continue;
            }
            let w = ev.weight(j, c);
            total += w.abs();
            if let Some(g) = grads.as_deref_mut() {
                g[j * c_total + c] += weight * w.signum() * (w != 0.0) as u8 as f64;
            }
        }
    }
    total
}

fn check_finite(
    components: &[(&'static str, f64)],
    stage: StageKind,
    epoch: usize,
    step: usize,
) -> Result<()> {
    match components.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteLoss {
            component: name,
            stage: stage.to_string(),
            epoch,
            step,
        }),
        None => Ok(()),
    }
}

#[derive(Default)]
struct Accumulator {
    sums: Vec<f64>,
    steps: usize,
    correct: usize,
    seen: usize,
}

impl Accumulator {
    fn add(&mut self, components: &[(&'static str, f64)]) {
        if self.sums.is_empty() {
            self.sums = vec![0.0; components.len()];
        }
        for (s, (_, v)) in self.sums.iter_mut().zip(components) {
            *s += v;
        }
        self.steps += 1;
    }

    fn finish(self, epoch: usize, names: &[&'static str]) -> EpochLog {
        let steps = self.steps.max(1) as f64;
        EpochLog {
            epoch,
            components: names
                .iter()
                .zip(&self.sums)
                .map(|(n, s)| (*n, s / steps))
                .collect(),
            train_accuracy: self.correct as f64 / self.seen.max(1) as f64,
        }
    }
}

/// Runs one stage of SGD. Only the stage's groups (nonzero learning rate)
/// change; everything else stays bit-identical.
pub fn run_stage(
    net: &mut ProtoConceptsNet,
    data: &LabeledTensors,
    stage: &StageSpec,
    schedule: &TrainingSchedule,
) -> Result<StageLog> {
    stage.validate()?;
    let mut log = StageLog {
        stage: stage.kind,
        epochs: Vec::new(),
    };
    let groups = stage.trainable();
    if stage.epochs == 0 || groups.is_empty() {
        return Ok(log);
    }
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= net.num_classes()) {
        return Err(Error::Dataset(format!(
            "label {bad} out of range for {} classes",
            net.num_classes()
        )));
    }
    if groups == [ParamGroup::LastLayer] {
        return last_layer_stage(net, data, stage, schedule, log);
    }
    let smallest_pool = (0..net.num_classes())
        .map(|c| net.evidence.assignment.pool(c).len())
        .min()
        .unwrap_or(0);
    if stage.losses.k > smallest_pool {
        log::warn!(
            "losses.k = {} exceeds the smallest class pool ({smallest_pool}); using the whole pool",
            stage.losses.k
        );
    }

    let needs = GradientNeeds {
        backbone: groups.contains(&ParamGroup::Backbone),
        addon: groups.contains(&ParamGroup::AddOn),
        centers: groups.contains(&ParamGroup::Centers),
        radii: groups.contains(&ParamGroup::Radii),
    };
    let train_last = groups.contains(&ParamGroup::LastLayer);
    let m = net.num_prototypes();
    let has_wrong: Vec<bool> = (0..net.num_classes())
        .map(|c| net.evidence.assignment.pool(c).len() < m)
        .collect();
    let w = stage.losses;
    let names = ["ce", "clstk", "sep", "rad", "l1", "total"];
    let mut adam = Adam::new(net, &groups, schedule.optimizer);

    for epoch in 0..stage.epochs {
        let scale = stage.lr_scale(epoch);
        let order = epoch_order(data.len(), schedule.seed, stage.kind, epoch);
        let mut acc = Accumulator::default();
        for (step, batch) in order.chunks(schedule.batch_size).enumerate() {
            let b = batch.len() as f64;
            let counted = batch.iter().filter(|&&i| has_wrong[data.labels[i]]).count();
            let net_ref: &ProtoConceptsNet = net;
            let samples: Vec<Result<SampleStep>> = batch
                .par_iter()
                .map(|&i| {
                    sample_step(
                        net_ref,
                        &data.inputs[i],
                        data.labels[i],
                        &w,
                        b,
                        counted,
                        needs,
                        train_last,
                    )
                })
                .collect();
            let mut grads = Gradients::zeros_for(net);
            let (mut ce, mut clstk, mut sep) = (0.0, 0.0, 0.0);
            for s in samples {
                let s = s?;
                grads.add_assign(&s.grads);
                ce += s.ce;
                clstk += s.clstk;
                sep += s.sep.unwrap_or(0.0);
                acc.correct += s.correct as usize;
                acc.seen += 1;
            }
            let (ce, clstk) = (ce / b, clstk / b);
            let sep = if counted > 0 {
                sep / counted as f64
            } else {
                0.0
            };
            let rad = radius_loss(&net.balls, &net.geometry_config);
            if needs.radii {
                for (g, r) in grads
                    .radii
                    .iter_mut()
                    .zip(radius_loss_gradient(&net.balls, &net.geometry_config))
                {
                    *g += w.rad * r;
                }
            }
            let l1 = if train_last && stage.l1 > 0.0 {
                l1_penalty(net, Some(&mut grads.last_layer), stage.l1)
            } else {
                l1_penalty(net, None, 0.0)
            };
            let total = w.ce * ce + w.clstk * clstk + w.sep * sep + w.rad * rad + stage.l1 * l1;
            let components = [
                ("ce", ce),
                ("clstk", clstk),
                ("sep", sep),
                ("rad", rad),
                ("l1", l1),
                ("total", total),
            ];
            check_finite(&components, stage.kind, epoch, step)?;
            acc.add(&components);
            adam.step(net, &grads, |g| stage.lr(g) * scale);
        }
        let entry = acc.finish(epoch, &names);
        log::info!(
            "{} epoch {}: {}, train acc {:.4}",
            stage.kind,
            epoch,
            entry
                .components
                .iter()
                .map(|(n, v)| format!("{n} {v:.5}"))
                .collect::<Vec<_>>()
                .join(", "),
            entry.train_accuracy
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    net: &ProtoConceptsNet,
    input: &crate::nn::FeatureMap,
    label: usize,
    w: &crate::losses::LossWeights,
    batch: f64,
    counted: usize,
    needs: GradientNeeds,
    train_last: bool,
) -> Result<SampleStep> {
    let trace = net.trace(input)?;
    let m = net.num_prototypes();
    let c_total = net.num_classes();
    let ev = &net.evidence;
    let logits = ev.logits(&trace.similarities);
    let probs = softmax(&logits);
    let ce = cross_entropy(&logits, label);
    let g_logit: Vec<f64> = (0..c_total)
        .map(|c| w.ce * (probs[c] - (c == label) as u8 as f64) / batch)
        .collect();

    let mut grads = Gradients::zeros_for(net);
    let mut grad_sim = vec![0.0; m];
    for j in 0..m {
        if !ev.mask[j] {
            continue;
        }
        let row = ev.row(j);
        grad_sim[j] = row.iter().zip(&g_logit).map(|(wj, g)| wj * g).sum();
        if train_last {
            for c in 0..c_total {
                grads.last_layer[j * c_total + c] += trace.similarities[j] * g_logit[c];
            }
        }
    }

    let mut grad_dist = vec![0.0; m];
    let pool = ev.assignment.pool(label);
    let (clstk, chosen) = topk_smallest(&trace.distances, pool, w.k.min(pool.len()));
    for j in chosen {
        grad_dist[j] += w.clstk / batch;
    }
    let sep = nearest_wrong_class(&trace.distances, &ev.assignment, label).map(|(j, d)| {
        grad_dist[j] += w.sep / counted as f64;
        d
    });

    net.backward(&trace, &grad_sim, &grad_dist, needs, &mut grads);
    Ok(SampleStep {
        grads,
        ce,
        clstk,
        sep,
        correct: argmax(&logits) == label,
    })
}

/// Last-layer-only training: similarities are fixed, so they are computed once.
fn last_layer_stage(
    net: &mut ProtoConceptsNet,
    data: &LabeledTensors,
    stage: &StageSpec,
    schedule: &TrainingSchedule,
    mut log: StageLog,
) -> Result<StageLog> {
    if stage.kind == StageKind::Finetune {
        net.evidence.zero_masked_rows();
    }
    let net_ref: &ProtoConceptsNet = net;
    let sims: Vec<Vec<f64>> = data
        .inputs
        .par_iter()
        .map(|x| net_ref.trace(x).map(|t| t.similarities))
        .collect::<Result<_>>()?;
    let c_total = net.num_classes();
    let m = net.num_prototypes();
    let w_ce = stage.losses.ce;
    let names = ["ce", "l1", "total"];
    let mut adam = Adam::new(net, &[ParamGroup::LastLayer], schedule.optimizer);
    for epoch in 0..stage.epochs {
        let scale = stage.lr_scale(epoch);
        let order = epoch_order(data.len(), schedule.seed, stage.kind, epoch);
        let mut acc = Accumulator::default();
        for (step, batch) in order.chunks(schedule.batch_size).enumerate() {
            let b = batch.len() as f64;
            let mut grads = Gradients::zeros_for(net);
            let mut ce = 0.0;
            for &i in batch {
                let y = data.labels[i];
                let logits = net.evidence.logits(&sims[i]);
                let probs = softmax(&logits);
                ce += cross_entropy(&logits, y);
                acc.correct += (argmax(&logits) == y) as usize;
                acc.seen += 1;
                for j in (0..m).filter(|&j| net.evidence.mask[j]) {
                    for c in 0..c_total {
                        let g = w_ce * (probs[c] - (c == y) as u8 as f64) / b;
                        grads.last_layer[j * c_total + c] += sims[i][j] * g;
                    }
                }
            }
            let ce = ce / b;
            let l1 = l1_penalty(net, Some(&mut grads.last_layer), stage.l1);
            let total = w_ce * ce + stage.l1 * l1;
            let components = [("ce", ce), ("l1", l1), ("total", total)];
            check_finite(&components, stage.kind, epoch, step)?;
            acc.add(&components);
            adam.step(net, &grads, |g| stage.lr(g) * scale);
        }
        let entry = acc.finish(epoch, &names);
        log::info!(
            "{} epoch {}: ce {:.5}, l1 {:.5}, train acc {:.4}",
            stage.kind,
            epoch,
            entry.components[0].1,
            entry.components[1].1,
            entry.train_accuracy
        );
        log.epochs.push(entry);
    }
    if stage.kind == StageKind::Finetune {
        net.evidence.zero_masked_rows();
    }
    Ok(log)
}

/// Convex last-layer optimization: cross entropy plus `l1_weight` times the
/// L1 norm of incorrect-class connections. Masked rows end at exactly zero.
pub fn finetune_last_layer(
    net: &mut ProtoConceptsNet,
    data: &LabeledTensors,
    l1_weight: f64,
    epochs: usize,
    schedule: &TrainingSchedule,
) -> Result<StageLog> {
    let mut stage = schedule
        .stage(StageKind::Finetune)
        .cloned()
        .ok_or_else(|| Error::Schedule("schedule has no finetune stage".into()))?;
    stage.l1 = l1_weight;
    stage.epochs = epochs;
    if epochs == 0 {
        return Ok(StageLog {
            stage: StageKind::Finetune,
            epochs: Vec::new(),
        });
    }
    run_stage(net, data, &stage, schedule)
}
