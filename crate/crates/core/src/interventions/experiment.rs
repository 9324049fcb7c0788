//! Paired masking runs and the capacity rerun.

use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{activity_mask, capacity_plan_from_usage, random_mask, union_masks, CapacityPlan, MaskSpec};
use crate::harness::run::read_jsonl;
use crate::harness::{Corpus, EvalResult, ExperimentConfig, HarnessError, Result, RunOutcome, Trainer};
use crate::metrics::{summarize, SparsityRecord};

/// Largest relative validation-loss gap at which the activity-masked arm
/// counts as matching the baseline.
pub const ACTIVITY_TOLERANCE: f64 = 0.02;
/// Smallest relative validation-loss increase at which the random-mask arm
/// counts as degraded.
pub const RANDOM_MIN_DEGRADATION: f64 = 0.10;
/// Largest per-layer change, in percentage points, between round-1 and
/// round-2 used fractions in the capacity rerun.
pub const CAPACITY_BAND_PP: f64 = 15.0;

/// Which mask an arm trains under after the mask step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskControl {
    None,
    Activity,
    Random,
}

impl MaskControl {
    fn name(self) -> &'static str {
        match self {
            Self::None => "baseline",
            Self::Activity => "activity",
            Self::Random => "random",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub control: MaskControl,
    /// Kept units per layer; absent for the unmasked arm.
    pub mask_cardinalities: Option<Vec<usize>>,
    /// Training loss per step from step 0.
    pub loss_curve: Vec<f64>,
    pub eval: Option<EvalResult>,
    /// Failure (e.g. divergence) of this arm; other arms are unaffected.
    pub error: Option<String>,
    pub diverged_at: Option<u64>,
    #[serde(skip)]
    pub records: Vec<SparsityRecord>,
}

impl ArmResult {
    fn from_outcome(control: MaskControl, mask: Option<&MaskSpec>, result: Result<RunOutcome>, trainer: &Trainer) -> Self {
        let cardinalities = mask.map(MaskSpec::cardinalities);
        match result {
            Ok(out) => Self {
                control,
                mask_cardinalities: cardinalities,
                loss_curve: out.losses.iter().map(|l| l.loss).collect(),
                eval: out.eval,
                error: None,
                diverged_at: None,
                records: out.records,
            },
            Err(e) => Self {
                control,
                mask_cardinalities: cardinalities,
                loss_curve: trainer.losses.iter().map(|l| l.loss).collect(),
                eval: None,
                diverged_at: match e {
                    HarnessError::Divergence { step } => Some(step),
                    _ => None,
                },
                error: Some(e.to_string()),
                records: trainer.records.clone(),
            },
        }
    }

    pub fn val_loss(&self) -> Option<f64> {
        self.eval.as_ref().map(|e| e.loss)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskExperimentResult {
    pub config_hash: String,
    pub mask_step: u64,
    pub mask_union_batches: usize,
    pub arms: Vec<ArmResult>,
    /// `(masked - baseline) / baseline` validation loss per masked arm.
    pub activity_relative: Option<f64>,
    pub random_relative: Option<f64>,
    pub activity_tolerance: f64,
    pub random_min_degradation: f64,
    pub activity_matches_baseline: Option<bool>,
    pub random_degrades: Option<bool>,
    pub note: String,
}

impl MaskExperimentResult {
    pub fn arm(&self, control: MaskControl) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.control == control)
    }
}

/// Step at which the mask is computed for a run of `total` steps.
pub fn mask_step(total: u64, fraction: f64) -> u64 {
    ((total as f64 * fraction).round() as u64).min(total.saturating_sub(1))
}

fn relative(arm: Option<&ArmResult>, base: Option<f64>) -> Option<f64> {
    let (a, b) = (arm?.val_loss()?, base?);
    Some((a - b) / b)
}

/// Trains to the mask step, takes an activity mask from the training taps
/// there (optionally unioned over the preceding batches), then continues an
/// unmasked arm, an activity-masked arm and, if configured, a random-mask arm
/// of equal per-layer cardinality. All arms share the prefix bitwise.
pub fn run_mask_experiment(config: &ExperimentConfig, output: Option<&Path>) -> Result<MaskExperimentResult> {
    config.validate()?;
    if config.total_steps < 2 {
        return Err(HarnessError::Config("a mask experiment needs at least 2 steps".into()));
    }
    let corpus = Arc::new(config.corpus.load()?);
    let plan = &config.intervention;
    let s = mask_step(config.total_steps, plan.mask_step_fraction);
    let union = plan.mask_union_batches.min(s as usize + 1);

    let mut prefix = Trainer::new(config.clone(), Arc::clone(&corpus), None)?;
    prefix.train_until(s + 1 - union as u64)?;
    let mut masks = Vec::with_capacity(union);
    while prefix.step() <= s {
        let step = prefix.step();
        let out = prefix.train_step()?;
        masks.push(activity_mask(&out.taps, step));
    }
    let mut activity = union_masks(&masks)?;
    activity.created_at_step = s;
    info!("mask at step {}: kept {:?}", s, activity.cardinalities());

    let mut controls = vec![MaskControl::None, MaskControl::Activity];
    if plan.random_control {
        controls.push(MaskControl::Random);
    }
    let mut arms = Vec::new();
    for control in controls {
        let dir = output.map(|o| o.join(control.name()));
        let mut arm = prefix.fork(dir.as_deref())?;
        let mask = match control {
            MaskControl::None => None,
            MaskControl::Activity => Some(activity.clone()),
            MaskControl::Random => Some(random_mask(
                &activity.cardinalities(),
                &activity.dims(),
                config.seed ^ 0x6d61_736b,
                s,
            )?),
        };
        if let Some(m) = &mask {
            arm.set_mask(m.clone())?;
        }
        info!("training {} arm", control.name());
        let result = arm.drive(None);
        if let Err(e) = &result {
            warn!("{} arm failed: {}", control.name(), e);
        }
        arms.push(ArmResult::from_outcome(control, mask.as_ref(), result, &arm));
    }

    let base = arms[0].val_loss();
    let activity_relative = relative(arms.iter().find(|a| a.control == MaskControl::Activity), base);
    let random_relative = relative(arms.iter().find(|a| a.control == MaskControl::Random), base);
    let result = MaskExperimentResult {
        config_hash: prefix.config_hash.clone(),
        mask_step: s,
        mask_union_batches: union,
        activity_matches_baseline: activity_relative.map(|r| r.abs() <= ACTIVITY_TOLERANCE),
        random_degrades: random_relative.map(|r| r >= RANDOM_MIN_DEGRADATION),
        activity_relative,
        random_relative,
        activity_tolerance: ACTIVITY_TOLERANCE,
        random_min_degradation: RANDOM_MIN_DEGRADATION,
        note: format!(
            "thresholds are small-scale operationalizations: activity arm within {}% relative validation loss of baseline, random arm at least {}% worse; {} tokens per batch",
            ACTIVITY_TOLERANCE * 100.0,
            RANDOM_MIN_DEGRADATION * 100.0,
            config.tokens_per_batch()
        ),
        arms,
    };
    if let Some(dir) = output {
        std::fs::write(dir.join("mask_experiment.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result)
}

/// Plain masked training for one control: the unmasked control is the
/// ordinary run.
pub fn run_masked_training(
    config: &ExperimentConfig,
    control: MaskControl,
    output: Option<&Path>,
) -> Result<MaskExperimentResult> {
    let mut config = config.clone();
    config.intervention.random_control = control == MaskControl::Random;
    run_mask_experiment(&config, output)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CapacityRerunResult {
    pub plan: CapacityPlan,
    pub round2_seed: u64,
    /// Converged per-batch used fraction per layer.
    pub round1_fraction: Vec<f64>,
    pub round2_fraction: Vec<f64>,
    pub round1_eval: EvalResult,
    pub round2_eval: Option<EvalResult>,
    pub band_pp: f64,
    pub fractions_within_band: bool,
    pub round2_worse: Option<bool>,
    pub error: Option<String>,
}

/// Converged batch-use fractions and held-out result of a finished round-1
/// artifact directory.
pub fn load_round1(dir: &Path) -> Result<(ExperimentConfig, Vec<f64>, EvalResult)> {
    let config = ExperimentConfig::load(&dir.join("config.toml"))?;
    let records: Vec<SparsityRecord> = read_jsonl(&dir.join("metrics.jsonl"))?;
    let eval: EvalResult = serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).map_err(|e| {
        HarnessError::Config(format!("round-1 run in {} has no eval.json: {}", dir.display(), e))
    })?)?;
    let fractions = summarize(&records, &[]).converged.iter().map(|c| c.batch_use).collect();
    Ok((config, fractions, eval))
}

/// Retrains from scratch with each layer's width set to its converged
/// round-1 batch-use count and a fresh init seed.
pub fn capacity_rerun(
    config: &ExperimentConfig,
    round1_fraction: &[f64],
    round1_eval: EvalResult,
    output: Option<&Path>,
) -> Result<CapacityRerunResult> {
    let plan = capacity_plan_from_usage(round1_fraction, &config.model.d_hidden)?;
    let mut round2 = config.clone();
    round2.model.d_hidden = plan.d_hidden.clone();
    round2.model.seed = config.intervention.round2_seed.unwrap_or(config.model.seed.wrapping_add(1));
    if let Some(dir) = output {
        round2.output_dir = dir.to_path_buf();
    }
    info!("round 2 widths {:?}", plan.d_hidden);
    let corpus: Arc<Corpus> = Arc::new(round2.corpus.load()?);
    let mut trainer = Trainer::new(round2.clone(), corpus, output)?;
    let outcome = trainer.drive(None);
    let (round2_fraction, round2_eval, error) = match outcome {
        Ok(o) => (o.summary.converged.iter().map(|c| c.batch_use).collect::<Vec<_>>(), o.eval, None),
        Err(e) => (Vec::new(), None, Some(e.to_string())),
    };
    let within = round2_fraction.len() == round1_fraction.len()
        && round1_fraction
            .iter()
            .zip(&round2_fraction)
            .all(|(a, b)| (a - b).abs() * 100.0 <= CAPACITY_BAND_PP);
    let result = CapacityRerunResult {
        round2_worse: round2_eval.as_ref().map(|e| e.loss > round1_eval.loss),
        plan,
        round2_seed: round2.model.seed,
        round1_fraction: round1_fraction.to_vec(),
        round2_fraction,
        round1_eval,
        round2_eval,
        band_pp: CAPACITY_BAND_PP,
        fractions_within_band: within,
        error,
    };
    if let Some(dir) = output {
        std::fs::write(dir.join("capacity.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result)
}
