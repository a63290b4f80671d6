use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use protoconcepts::config::{Config, CONFIG_KEYS};
use protoconcepts::data::{image_to_tensor, read_image_resized, write_dataset, Dataset, Sample};
use protoconcepts::explain::{
    build_galleries, cached_scan, local_explanation, render_report, summarize_scan,
    verify_galleries, Report, DEFAULT_TOP_N, DEFAULT_TOP_P,
};
use protoconcepts::model::{checkpoint, ProtoConceptsNet};
use protoconcepts::training::{
    ablate, ablation_sidecar, checkpoint_path, evaluate, finetune_checkpoint, format_ablation,
    latest_checkpoint, prune_checkpoint, run_until, AblationAxis, LabeledTensors, PipelineReport,
    RADIUS_PRESETS,
};
use protoconcepts::Error;

/// Prototype-ball image classifiers: training, pruning, evaluation and
/// concept reports.
#[derive(Parser, Debug)]
#[command(name = "protoconcepts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file, or the name of a built-in preset.
    #[arg(long, short, default_value = "synthetic-small")]
    config: String,
    /// Override a config key, e.g. `--set losses.k=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set schedule.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, metrics and reports.
    #[arg(long, short, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Warmup and joint stages (all stages with --all-stages).
    Train {
        #[command(flatten)]
        common: Common,
        /// Also prune and finetune.
        #[arg(long)]
        all_stages: bool,
        /// Continue from the most advanced checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Remove balls that contain no training patch.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/joint.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finetune the last layer.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/prune.ckpt`, else `<out>/joint.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Scan training patches into balls and render prototype galleries.
    ScanMembers {
        #[command(flatten)]
        common: Common,
        /// Defaults to the most advanced checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
    },
    /// Render scoresheets explaining predictions.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Explain a single image file.
        #[arg(long, conflicts_with = "split")]
        image: Option<PathBuf>,
        /// Explain images of a dataset split.
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Number of split images to explain.
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Prototypes listed per scoresheet.
        #[arg(long, default_value_t = DEFAULT_TOP_P)]
        top_p: usize,
        /// Gallery patches shown per prototype.
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
    },
    /// Overall and per-class accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Write the synthetic concept dataset to the output directory.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per value of a config key and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["radius", "k"])]
        axis: String,
        /// Comma-separated values (default: the radius presets, or k = 1,5,10).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigNotFound(_) | Error::Schedule(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn key_help() -> String {
    let mut out = String::from("Config keys (use with --set KEY=VALUE):\n");
    for (key, doc, example) in CONFIG_KEYS {
        let _ = writeln!(out, "  {key:<34} {doc} (e.g. {example})");
    }
    out.push_str("\nEnvironment:\n  PROTOCONCEPTS_CACHE                member-scan cache directory\n  RUST_LOG                           log filter (default: info)\n");
    out
}

fn load_config(common: &Common) -> CliResult<Config> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("schedule.seed={seed}"));
    }
    Ok(Config::load(&common.config, &overrides)?)
}

fn load_net(path: &Path) -> CliResult<ProtoConceptsNet> {
    if !path.is_file() {
        return Err(Failure::Runtime(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    Ok(checkpoint::load(path)?)
}

fn checkpoint_or_latest(explicit: Option<PathBuf>, out: &Path) -> CliResult<PathBuf> {
    explicit
        .or_else(|| latest_checkpoint(out))
        .ok_or_else(|| Failure::Runtime(format!("no checkpoint in {}", out.display())))
}

fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn print_report(report: &PipelineReport) {
    if let Some(e) = &report.before_prune {
        println!("test accuracy before pruning: {}", percent(e.accuracy));
    }
    if let Some(p) = &report.prune {
        println!(
            "prototypes kept by pruning: {}/{}",
            p.surviving(),
            report.total_prototypes
        );
    }
    if let Some(e) = &report.after_finetune {
        println!("test accuracy after finetuning: {}", percent(e.accuracy));
    }
    println!(
        "surviving prototypes: {}/{}",
        report.surviving_prototypes, report.total_prototypes
    );
}

fn split_samples(data: &Dataset, split: Split) -> Vec<Sample> {
    match split {
        Split::Train => data.original_train().cloned().collect(),
        Split::Test => data.test.clone(),
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("PROTOCONCEPTS_CACHE").map(PathBuf::from)
}

fn galleries_for(
    net: &ProtoConceptsNet,
    data: &Dataset,
    top_n: usize,
) -> CliResult<(
    LabeledTensors,
    Vec<protoconcepts::explain::ConceptGallery>,
    protoconcepts::explain::MemberScan,
)> {
    let originals: Vec<Sample> = data.original_train().cloned().collect();
    let train = LabeledTensors::from_samples(&originals);
    let scan = cached_scan(net, &train, cache_dir().as_deref())?;
    let galleries = build_galleries(net, &scan, top_n)?;
    verify_galleries(net, &galleries, &train)?;
    Ok((train, galleries, scan))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            common,
            all_stages,
            resume,
        } => {
            let config = load_config(&common)?;
            let data = config.load_dataset()?;
            let last = if all_stages { "finetune" } else { "joint" };
            let (_, report) = run_until(&config, &data, &common.out, resume, last)?;
            print_report(&report);
            println!(
                "checkpoint: {}",
                checkpoint_path(&common.out, last).display()
            );
        }
        Command::Prune { common, checkpoint } => {
            let config = load_config(&common)?;
            let data = config.load_dataset()?;
            let net =
                load_net(&checkpoint.unwrap_or_else(|| checkpoint_path(&common.out, "joint")))?;
            let (_, report) = prune_checkpoint(&config, &data, net, &common.out)?;
            print_report(&report);
            println!(
                "checkpoint: {}",
                checkpoint_path(&common.out, "prune").display()
            );
        }
        Command::Finetune { common, checkpoint } => {
            let config = load_config(&common)?;
            let data = config.load_dataset()?;
            let path = checkpoint.unwrap_or_else(|| {
                let pruned = checkpoint_path(&common.out, "prune");
                if pruned.is_file() {
                    pruned
                } else {
                    checkpoint_path(&common.out, "joint")
                }
            });
            let (_, report) = finetune_checkpoint(&config, &data, load_net(&path)?, &common.out)?;
            print_report(&report);
            println!(
                "checkpoint: {}",
                checkpoint_path(&common.out, "finetune").display()
            );
        }
        Command::ScanMembers {
            common,
            checkpoint,
            top_n,
        } => {
            let config = load_config(&common)?;
            let data = config.load_dataset()?;
            let net = load_net(&checkpoint_or_latest(checkpoint, &common.out)?)?;
            config.check_checkpoint(&net, data.num_classes())?;
            let (_, galleries, scan) = galleries_for(&net, &data, top_n)?;
            let originals: Vec<Sample> = data.original_train().cloned().collect();
            let summary = summarize_scan(&net, &scan, &originals);
            let images: HashMap<&str, &_> = originals
                .iter()
                .map(|s| (s.id.as_str(), &s.image))
                .collect();
            let dir = common.out.join("galleries");
            render_report(Report::Galleries(&galleries), &data.classes, &images, &dir)?;
            println!("surviving prototypes: {}", summary.surviving);
            println!(
                "prototypes with members from >= 2 images: {}",
                summary.multi_image
            );
            if let Some(p) = summary.mean_purity {
                println!("mean concept purity: {p:.4}");
            }
            println!("report: {}", dir.join("index.html").display());
        }
        Command::Explain {
            common,
            checkpoint,
            image,
            split,
            limit,
            top_p,
            top_n,
        } => {
            let config = load_config(&common)?;
            let data = config.load_dataset()?;
            let net = load_net(&checkpoint_or_latest(checkpoint, &common.out)?)?;
            config.check_checkpoint(&net, data.num_classes())?;
            let (_, galleries, _) = galleries_for(&net, &data, top_n)?;
            let targets: Vec<(String, image::RgbImage)> = match (&image, split) {
                (Some(path), _) => {
                    vec![(
                        path.display().to_string(),
                        read_image_resized(path, net.input_size)?,
                    )]
                }
                (None, split) => split_samples(&data, split.unwrap_or(Split::Test))
                    .into_iter()
                    .take(limit)
                    .map(|s| (s.id, s.image))
                    .collect(),
            };
            let images: HashMap<&str, &image::RgbImage> = data
                .original_train()
                .map(|s| (s.id.as_str(), &s.image))
                .collect();
            let root = common.out.join("explain");
            for (id, img) in targets {
                let sheet =
                    local_explanation(&net, &image_to_tensor(&img), &id, &galleries, top_p)?;
                let mut with_target = images.clone();
                with_target.insert(&id, &img);
                let dir = root.join(sanitize(&id));
                render_report(
                    Report::Scoresheet(&sheet),
                    &data.classes,
                    &with_target,
                    &dir,
                )?;
                println!(
                    "{id}: predicted {} -> {}",
                    data.classes[sheet.predicted],
                    dir.display()
                );
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let config = load_config(&common)?;
            let data = config.load_dataset()?;
            let net = load_net(&checkpoint_or_latest(checkpoint, &common.out)?)?;
            config.check_checkpoint(&net, data.num_classes())?;
            let samples = split_samples(&data, split);
            let tensors = LabeledTensors::from_samples(&samples);
            let eval = evaluate(&net, &tensors)?;
            let name = format!("{split:?}").to_lowercase();
            let mut side = format!("split={name}\naccuracy={}\n", eval.accuracy);
            println!(
                "{name} accuracy: {} ({} images)",
                percent(eval.accuracy),
                samples.len()
            );
            for (class, c) in data.classes.iter().zip(&eval.per_class) {
                println!(
                    "  {class:<20} {:>8} ({}/{})",
                    percent(c.accuracy()),
                    c.correct,
                    c.total
                );
                let _ = writeln!(
                    side,
                    "class.{class}.correct={}\nclass.{class}.total={}",
                    c.correct, c.total
                );
            }
            for (i, id) in tensors.ids.iter().enumerate() {
                let out = net.forward_one(&tensors.inputs[i], id)?;
                let _ = writeln!(side, "image.{id}.predicted={}", eval.predictions[i]);
                for (c, l) in out.logits.iter().enumerate() {
                    let _ = writeln!(side, "image.{id}.logit.{c}={l}");
                }
            }
            fs::create_dir_all(&common.out).map_err(|e| Failure::Runtime(e.to_string()))?;
            let path = common.out.join(format!("eval-{name}.txt"));
            fs::write(&path, side)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        }
        Command::SynthData { common } => {
            let config = load_config(&common)?;
            let data = protoconcepts::data::generate_synthetic(&config.data.synthetic)?;
            let manifest = write_dataset(&data, &common.out)?;
            println!(
                "wrote {} training and {} test images of {} classes to {}",
                manifest.train.len(),
                manifest.test.len(),
                manifest.classes.len(),
                common.out.display()
            );
        }
        Command::Ablate {
            common,
            axis,
            values,
        } => {
            let axis = AblationAxis::parse(&axis)?;
            let config = load_config(&common)?;
            let values = if values.is_empty() {
                match axis {
                    AblationAxis::Radius => {
                        RADIUS_PRESETS.iter().map(|(_, r)| r.to_string()).collect()
                    }
                    AblationAxis::K => vec!["1".into(), "5".into(), "10".into()],
                }
            } else {
                values
            };
            let data = config.load_dataset()?;
            let rows = ablate(&config, &data, axis, &values, &common.out)?;
            print!("{}", format_ablation(axis, &rows));
            let path = common.out.join(format!("ablate-{}.txt", axis.as_str()));
            fs::write(&path, ablation_sidecar(axis, &rows))
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            if rows.iter().any(|r| r.outcome.is_err()) {
                return Err(Failure::Runtime("some ablation runs failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = key_help();
    let matches = Cli::command()
        .after_long_help(help.clone())
        .after_help(help)
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
