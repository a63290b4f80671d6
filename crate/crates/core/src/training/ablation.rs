use std::fmt::Write as _;
use std::path::Path;

use super::run_pipeline;
use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Small, medium and large initial radii for the synthetic preset.
pub const RADIUS_PRESETS: [(&str, f64); 3] = [("small", 0.003), ("medium", 0.01), ("large", 0.15)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Radius,
    K,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "radius" => Ok(AblationAxis::Radius),
            "k" => Ok(AblationAxis::K),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected radius or k)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Radius => "radius",
            AblationAxis::K => "k",
        }
    }

    /// The config key varied along this axis.
    pub fn key(self) -> &'static str {
        match self {
            AblationAxis::Radius => "model.radius_init",
            AblationAxis::K => "losses.k",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub surviving: usize,
    pub total: usize,
    pub accuracy_before_prune: f64,
    pub accuracy_after_finetune: f64,
}

#[derive(Debug)]
pub struct AblationRow {
    pub value: String,
    pub outcome: std::result::Result<AblationOutcome, Error>,
}

/// Trains one model per value with everything else fixed, each in
/// `<out>/<axis>-<value>/`. A failed run is recorded and the sweep goes on.
pub fn ablate(
    config: &Config,
    data: &Dataset,
    axis: AblationAxis,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if values.len() < 2 {
        return Err(Error::Config(
            "an ablation needs at least two values".into(),
        ));
    }
    let base = config.to_toml();
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let outcome =
            Config::from_toml(&base, &[format!("{}={value}", axis.key())]).and_then(|cfg| {
                log::info!("ablation {}={value}", axis.as_str());
                let dir = out_dir.join(format!("{}-{value}", axis.as_str()));
                let (_, report) = run_pipeline(&cfg, data, &dir, false)?;
                Ok(AblationOutcome {
                    surviving: report.surviving_prototypes,
                    total: report.total_prototypes,
                    accuracy_before_prune: report.before_prune.map_or(0.0, |e| e.accuracy),
                    accuracy_after_finetune: report.after_finetune.map_or(0.0, |e| e.accuracy),
                })
            });
        if let Err(e) = &outcome {
            log::error!("ablation {}={value} failed: {e}", axis.as_str());
        }
        rows.push(AblationRow {
            value: value.clone(),
            outcome,
        });
    }
    Ok(rows)
}

/// Table with the columns of the paper's radius ablation.
pub fn format_ablation(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:>14} {:>16} {:>12}\n",
        axis.as_str(),
        "acc. before [%]",
        "acc. after [%]",
        "# prototypes"
    );
    for row in rows {
        let _ = match &row.outcome {
            Ok(o) => writeln!(
                out,
                "{:<10} {:>14.1} {:>16.1} {:>12}",
                row.value,
                100.0 * o.accuracy_before_prune,
                100.0 * o.accuracy_after_finetune,
                format!("{}/{}", o.surviving, o.total)
            ),
            Err(e) => writeln!(out, "{:<10} FAILED: {e}", row.value),
        };
    }
    out
}

/// `key=value` sidecar for an ablation table.
pub fn ablation_sidecar(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut out = format!("axis={}\n", axis.as_str());
    for (i, row) in rows.iter().enumerate() {
        let _ = writeln!(out, "row.{i}.value={}", row.value);
        match &row.outcome {
            Ok(o) => {
                let _ = writeln!(out, "row.{i}.status=ok");
                let _ = writeln!(out, "row.{i}.surviving={}", o.surviving);
                let _ = writeln!(out, "row.{i}.total={}", o.total);
                let _ = writeln!(
                    out,
                    "row.{i}.accuracy_before_prune={}",
                    o.accuracy_before_prune
                );
                let _ = writeln!(
                    out,
                    "row.{i}.accuracy_after_finetune={}",
                    o.accuracy_after_finetune
                );
            }
            Err(e) => {
                let _ = writeln!(out, "row.{i}.status=failed");
                let _ = writeln!(out, "row.{i}.error={e}");
            }
        }
    }
    out
}
