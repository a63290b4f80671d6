use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    evaluate, member_counts, prune_with_counts, run_stage, EvalReport, LabeledTensors, PruneReport,
    StageKind, StageLog, TrainingSchedule,
};
use crate::config::{Config, DataSource};
use crate::data::{
    attach_masks, augment_offline, generate_synthetic, load_directory_dataset, load_samples,
    Dataset,
};
use crate::error::{Error, Result};
use crate::model::{checkpoint, ProtoConceptsNet};

/// Pipeline steps in execution order; each leaves `<out>/<step>.ckpt`.
const STEPS: [&str; 4] = ["warmup", "joint", "prune", "finetune"];

pub fn checkpoint_path(out_dir: &Path, step: &str) -> PathBuf {
    out_dir.join(format!("{step}.ckpt"))
}

/// Tensors for the splits used by the pipeline.
#[derive(Clone, Debug)]
pub struct PreparedSplits {
    pub train: LabeledTensors,
    /// Un-augmented training images, when augmented copies are present.
    train_original: Option<LabeledTensors>,
    pub test: LabeledTensors,
}

impl PreparedSplits {
    pub fn new(data: &Dataset) -> Self {
        let has_aug = data.train.iter().any(|s| s.augmented);
        PreparedSplits {
            train: LabeledTensors::from_samples(&data.train),
            train_original: has_aug.then(|| LabeledTensors::from_samples(data.original_train())),
            test: LabeledTensors::from_samples(&data.test),
        }
    }

    /// Training images without augmented copies (member scans and pruning).
    pub fn originals(&self) -> &LabeledTensors {
        self.train_original.as_ref().unwrap_or(&self.train)
    }
}

pub fn prepare_splits(data: &Dataset) -> PreparedSplits {
    PreparedSplits::new(data)
}

impl Config {
    /// Renders or reads the configured dataset, applying offline augmentation.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synthetic => {
                let ds = generate_synthetic(&self.data.synthetic)?;
                let size = self.data.synthetic.image_size;
                if (size, size) != (self.model.input_size[0], self.model.input_size[1]) {
                    return Err(Error::Resolution {
                        expected: (self.model.input_size[0], self.model.input_size[1]),
                        got: (size, size),
                    });
                }
                Ok(ds)
            }
            DataSource::Directory => {
                let root = self.data.root.as_ref().expect("validated");
                let res = (self.model.input_size[0], self.model.input_size[1]);
                let mut manifest =
                    load_directory_dataset(root, res, self.data.crop_table.as_deref())?;
                if self.data.augment.copies > 0 {
                    let out = self
                        .data
                        .augment_dir
                        .clone()
                        .unwrap_or_else(|| root.join("augmented"));
                    manifest =
                        augment_offline(&manifest, &self.data.augment, &out, self.schedule.seed)?;
                }
                let mut ds = load_samples(&manifest)?;
                attach_masks(&mut ds, root)?;
                Ok(ds)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub classes: Vec<String>,
    pub stage_logs: Vec<StageLog>,
    /// Test evaluation after the joint stage.
    pub before_prune: Option<EvalReport>,
    pub prune: Option<PruneReport>,
    /// Test evaluation of the final model.
    pub after_finetune: Option<EvalReport>,
    pub total_prototypes: usize,
    pub surviving_prototypes: usize,
}

fn save_step(net: &mut ProtoConceptsNet, out_dir: &Path, step: &str) -> Result<()> {
    if !net.metadata.stages_completed.iter().any(|s| s == step) {
        net.metadata.stages_completed.push(step.to_string());
    }
    checkpoint::save(net, &checkpoint_path(out_dir, step))
}

fn done(net: &ProtoConceptsNet, step: &str) -> bool {
    net.metadata.stages_completed.iter().any(|s| s == step)
}

/// The most advanced pipeline checkpoint present in `out_dir`.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    STEPS
        .iter()
        .rev()
        .map(|s| checkpoint_path(out_dir, s))
        .find(|p| p.is_file())
}

impl Config {
    /// Rejects a checkpoint whose architecture disagrees with this config.
    pub fn check_checkpoint(&self, net: &ProtoConceptsNet, num_classes: usize) -> Result<()> {
        if net.geometry != self.model.geometry {
            return Err(Error::GeometryMismatch(format!(
                "checkpoint uses {:?}, config uses {:?}",
                net.geometry, self.model.geometry
            )));
        }
        let size = (self.model.input_size[0], self.model.input_size[1]);
        if net.input_size != size {
            return Err(Error::Resolution {
                expected: size,
                got: net.input_size,
            });
        }
        for (expected, got) in [
            (self.model.prototype_dim, net.latent_dim()),
            (num_classes, net.num_classes()),
        ] {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(())
    }
}

struct Run<'a> {
    config: &'a Config,
    schedule: TrainingSchedule,
    splits: PreparedSplits,
    out_dir: &'a Path,
    report: PipelineReport,
}

impl<'a> Run<'a> {
    fn new(config: &'a Config, data: &Dataset, out_dir: &'a Path) -> Result<Self> {
        let schedule = TrainingSchedule::from_config(config)?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let splits = PreparedSplits::new(data);
        if splits.train.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        Ok(Run {
            config,
            schedule,
            splits,
            out_dir,
            report: PipelineReport {
                classes: data.classes.clone(),
                stage_logs: Vec::new(),
                before_prune: None,
                prune: None,
                after_finetune: None,
                total_prototypes: 0,
                surviving_prototypes: 0,
            },
        })
    }

    fn train(&mut self, net: &mut ProtoConceptsNet, kind: StageKind) -> Result<()> {
        let stage = self.schedule.stage(kind).expect("schedule has all stages");
        self.report
            .stage_logs
            .push(run_stage(net, &self.splits.train, stage, &self.schedule)?);
        save_step(net, self.out_dir, kind.as_str())
    }

    fn prune(&mut self, net: &mut ProtoConceptsNet) -> Result<()> {
        self.report.before_prune = Some(evaluate(net, &self.splits.test)?);
        if self.config.prune.enabled {
            let counts = member_counts(net, &self.splits.originals().inputs)?;
            let pr = prune_with_counts(net, &counts)?;
            log::info!(
                "pruning kept {} of {} balls",
                pr.surviving(),
                net.num_prototypes()
            );
            self.report.prune = Some(pr);
        }
        save_step(net, self.out_dir, "prune")
    }

    fn finish(mut self, net: ProtoConceptsNet) -> Result<(ProtoConceptsNet, PipelineReport)> {
        if done(&net, "finetune") {
            self.report.after_finetune = Some(evaluate(&net, &self.splits.test)?);
        } else if self.report.before_prune.is_none() {
            self.report.before_prune = Some(evaluate(&net, &self.splits.test)?);
        }
        self.report.total_prototypes = net.num_prototypes();
        self.report.surviving_prototypes = net.evidence.surviving();
        write_metrics(&self.report, &self.out_dir.join("metrics.txt"))?;
        Ok((net, self.report))
    }
}

/// Warmup → joint → prune → finetune, with a checkpoint after each step.
///
/// With `resume`, training continues from the most advanced checkpoint in
/// `out_dir`. Data order and optimizer state depend only on the seed and the
/// stage, so a resumed run ends with the same weights as an uninterrupted one.
pub fn run_pipeline(
    config: &Config,
    data: &Dataset,
    out_dir: &Path,
    resume: bool,
) -> Result<(ProtoConceptsNet, PipelineReport)> {
    run_until(config, data, out_dir, resume, "finetune")
}

/// Runs the pipeline up to and including step `last`.
pub fn run_until(
    config: &Config,
    data: &Dataset,
    out_dir: &Path,
    resume: bool,
    last: &str,
) -> Result<(ProtoConceptsNet, PipelineReport)> {
    let last_index = STEPS
        .iter()
        .position(|s| *s == last)
        .ok_or_else(|| Error::Schedule(format!("unknown pipeline step `{last}`")))?;
    let mut run = Run::new(config, data, out_dir)?;
    let latest = if resume {
        latest_checkpoint(out_dir)
    } else {
        None
    };
    let mut net = match latest {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            checkpoint::load(&path)?
        }
        None => ProtoConceptsNet::new(&config.net_spec(data.num_classes())?, run.schedule.seed)?,
    };
    config.check_checkpoint(&net, data.num_classes())?;

    for step in &STEPS[..=last_index] {
        if done(&net, step) {
            if *step == "prune" {
                let joint = checkpoint_path(out_dir, "joint");
                if joint.is_file() {
                    run.report.before_prune =
                        Some(evaluate(&checkpoint::load(&joint)?, &run.splits.test)?);
                }
            }
            continue;
        }
        match *step {
            "warmup" => run.train(&mut net, StageKind::Warmup)?,
            "joint" => run.train(&mut net, StageKind::Joint)?,
            "prune" => run.prune(&mut net)?,
            _ => run.train(&mut net, StageKind::Finetune)?,
        }
    }
    run.finish(net)
}

/// Prunes an already trained network and saves `<out>/prune.ckpt`.
pub fn prune_checkpoint(
    config: &Config,
    data: &Dataset,
    mut net: ProtoConceptsNet,
    out_dir: &Path,
) -> Result<(ProtoConceptsNet, PipelineReport)> {
    config.check_checkpoint(&net, data.num_classes())?;
    let mut run = Run::new(config, data, out_dir)?;
    run.prune(&mut net)?;
    run.finish(net)
}

/// Finetunes the last layer of `net` and saves `<out>/finetune.ckpt`. An
/// unpruned network is accepted with a warning and keeps every prototype.
pub fn finetune_checkpoint(
    config: &Config,
    data: &Dataset,
    mut net: ProtoConceptsNet,
    out_dir: &Path,
) -> Result<(ProtoConceptsNet, PipelineReport)> {
    config.check_checkpoint(&net, data.num_classes())?;
    if !net.metadata.pruned {
        log::warn!("checkpoint was not pruned; finetuning with every prototype kept");
    }
    let mut run = Run::new(config, data, out_dir)?;
    net.metadata.stages_completed.retain(|s| s != "finetune");
    run.train(&mut net, StageKind::Finetune)?;
    run.finish(net)
}

fn push_eval(out: &mut String, prefix: &str, eval: &EvalReport, classes: &[String]) {
    let _ = writeln!(out, "{prefix}.accuracy={}", eval.accuracy);
    for (name, c) in classes.iter().zip(&eval.per_class) {
        let _ = writeln!(out, "{prefix}.class.{name}.correct={}", c.correct);
        let _ = writeln!(out, "{prefix}.class.{name}.total={}", c.total);
    }
}

/// `key=value` sidecar with every number in the report (no timestamps).
pub fn write_metrics(report: &PipelineReport, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "prototypes.total={}", report.total_prototypes);
    let _ = writeln!(out, "prototypes.surviving={}", report.surviving_prototypes);
    if let Some(e) = &report.before_prune {
        push_eval(&mut out, "before_prune", e, &report.classes);
    }
    if let Some(e) = &report.after_finetune {
        push_eval(&mut out, "after_finetune", e, &report.classes);
    }
    if let Some(p) = &report.prune {
        for (j, (c, m)) in p.member_counts.iter().zip(&p.mask).enumerate() {
            let _ = writeln!(out, "prune.ball.{j}.members={c}");
            let _ = writeln!(out, "prune.ball.{j}.kept={m}");
        }
    }
    for log in &report.stage_logs {
        for e in &log.epochs {
            for (name, v) in &e.components {
                let _ = writeln!(out, "stage.{}.epoch.{}.{name}={v}", log.stage, e.epoch);
            }
            let _ = writeln!(
                out,
                "stage.{}.epoch.{}.train_accuracy={}",
                log.stage, e.epoch, e.train_accuracy
            );
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
