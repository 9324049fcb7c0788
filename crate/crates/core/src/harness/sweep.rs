//! Comparative runs along one config axis.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::report::{line_chart, Series};
use super::{run, ExperimentConfig, HarnessError, Result, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    PeakLr,
    DHidden,
    NLayers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::PeakLr => "peak_lr",
            Self::DHidden => "d_hidden",
            Self::NLayers => "n_layers",
        }
    }

    /// `base` with the axis set to `value`. Width applies to every layer;
    /// depth reuses the first layer's width for all layers.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let whole = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(HarnessError::Config(format!("{} needs a positive integer, got {}", self.name(), value)))
            }
        };
        match self {
            Self::PeakLr => c.schedule.peak_lr = value,
            Self::DHidden => c.model.d_hidden = vec![whole()?; c.model.n_layers],
            Self::NLayers => {
                c.model.n_layers = whole()?;
                c.model.d_hidden = vec![base.model.d_hidden[0]; c.model.n_layers];
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepArm {
    pub value: f64,
    pub config_hash: String,
    pub output_dir: String,
    /// Converged per-layer fractions; empty when the arm failed.
    pub batch_use: Vec<f64>,
    pub token_use: Vec<f64>,
    /// Used units over all units, summed across layers.
    pub total_batch_use: Option<f64>,
    pub mean_token_use: Option<f64>,
    pub val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub arms: Vec<SweepArm>,
}

fn arm_dir(root: &Path, axis: SweepAxis, value: f64) -> std::path::PathBuf {
    root.join(format!("{}-{}", axis.name(), value))
}

/// Runs `base` once per value with shared seeds into `<root>/<axis>-<value>`.
/// A failed arm is recorded and the sweep continues.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], root: &Path) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let mut arms = Vec::new();
    for &value in values {
        let mut config = axis.apply(base, value)?;
        config.output_dir = arm_dir(root, axis, value);
        let mut arm = SweepArm {
            value,
            config_hash: config.hash(),
            output_dir: config.output_dir.display().to_string(),
            batch_use: Vec::new(),
            token_use: Vec::new(),
            total_batch_use: None,
            mean_token_use: None,
            val_loss: None,
            error: None,
        };
        match run(&config, &RunOptions::default()) {
            Ok(out) => {
                let conv = &out.summary.converged;
                arm.batch_use = conv.iter().map(|c| c.batch_use).collect();
                arm.token_use = conv.iter().map(|c| c.token_use).collect();
                let used: f64 = conv
                    .iter()
                    .zip(&config.model.d_hidden)
                    .map(|(c, &h)| c.batch_use * h as f64)
                    .sum();
                let total: usize = config.model.d_hidden.iter().sum();
                arm.total_batch_use = Some(used / total as f64);
                arm.mean_token_use = Some(arm.token_use.iter().sum::<f64>() / arm.token_use.len() as f64);
                arm.val_loss = out.eval.map(|e| e.loss);
            }
            Err(e) => {
                warn!("sweep arm {}={} failed: {}", axis.name(), value, e);
                arm.error = Some(e.to_string());
            }
        }
        arms.push(arm);
    }
    let result = SweepResult { axis, arms };
    write_sweep_outputs(&result, root)?;
    Ok(result)
}

/// Per-layer batch use by value: one column per value, a final `total` row.
pub fn sweep_table(result: &SweepResult) -> String {
    let layers = result.arms.iter().map(|a| a.batch_use.len()).max().unwrap_or(0);
    let fmt = |v: Option<f64>| v.map(|x| format!("{}", x)).unwrap_or_else(|| "NaN".into());
    let mut text = String::from("layer");
    for a in &result.arms {
        text.push_str(&format!(",{}={}", result.axis.name(), a.value));
    }
    text.push('\n');
    for l in 0..layers {
        text.push_str(&l.to_string());
        for a in &result.arms {
            text.push(',');
            text.push_str(&fmt(a.batch_use.get(l).copied()));
        }
        text.push('\n');
    }
    text.push_str("total");
    for a in &result.arms {
        text.push(',');
        text.push_str(&fmt(a.total_batch_use));
    }
    text.push('\n');
    text.push_str("# cells are converged per-batch used fractions; total = used units / all units across layers\n");
    text
}

fn write_sweep_outputs(result: &SweepResult, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("figures"))?;
    fs::write(root.join("sweep.json"), serde_json::to_string_pretty(result)?)?;
    fs::write(root.join("table5_sweep.csv"), sweep_table(result))?;
    let layers = result.arms.iter().map(|a| a.batch_use.len()).max().unwrap_or(0);
    for (name, pick) in [("batch_use", 0), ("token_use", 1)] {
        let series: Vec<Series> = result
            .arms
            .iter()
            .enumerate()
            .map(|(i, a)| Series {
                label: format!("{}={}", result.axis.name(), a.value),
                key: i,
                points: (if pick == 0 { &a.batch_use } else { &a.token_use })
                    .iter()
                    .enumerate()
                    .map(|(l, &v)| (l as f64, v))
                    .collect(),
            })
            .collect();
        let svg = line_chart(
            &format!("converged {} by layer, {} sweep", name, result.axis.name()),
            "layer",
            &series,
            (0.0, layers.saturating_sub(1) as f64),
        );
        fs::write(root.join("figures").join(format!("{}_by_layer.svg", name)), svg)?;
    }
    Ok(())
}
