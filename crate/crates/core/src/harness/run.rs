//! Instrumented training runs with checkpoint/resume and on-disk artifacts.
//!
//! Artifact directory layout:
//!
//! ```text
//! config.toml        config snapshot
//! manifest.json      config hash, status, last step, tokens per batch
//! metrics.jsonl      one SparsityRecord per layer per logged step
//! loss.jsonl         training loss and learning rate per step
//! lifecycle.json     per-layer lifecycle trackers
//! eval.json          held-out loss and top-1 accuracy at the end
//! mask.bin           mask in force, if any
//! checkpoints/       step-<n>.ckpt
//! FAILED             divergence marker
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{Corpus, ExperimentConfig, HarnessError, Result};
use crate::interventions::{write_mask, MaskSpec};
use crate::metrics::{batch_active, measure, summarize, NeuronLifecycle, SparsityRecord, Summary};
use crate::model::{
    evaluate, forward, read_checkpoint, write_checkpoint, ActivationTap, ScheduleConfig, StepOutput, TrainState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub windows: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config_hash: String,
    pub records: Vec<SparsityRecord>,
    pub losses: Vec<LossRecord>,
    pub lifecycles: Vec<NeuronLifecycle>,
    /// Present when the run reached `total_steps`.
    pub eval: Option<EvalResult>,
    pub summary: Summary,
    pub step: u64,
}

impl RunOutcome {
    pub fn complete(&self) -> bool {
        self.eval.is_some()
    }
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    config_hash: String,
    lifecycles: Vec<NeuronLifecycle>,
    mask: Option<MaskSpec>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    status: String,
    step: u64,
    total_steps: u64,
    tokens_per_batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

struct Writers {
    dir: PathBuf,
    metrics: BufWriter<File>,
    loss: BufWriter<File>,
}

impl Writers {
    fn open(dir: &Path, truncate: bool) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!truncate)
                .truncate(truncate)
                .open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.jsonl")?,
            loss: open("loss.jsonl")?,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.loss.flush()?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Parses a JSON-lines file, failing on the first malformed line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            HarnessError::Report(format!("{} line {}: {}", path.display(), i + 1, e))
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// A training run in progress: model state, the mask in force, telemetry
/// gathered so far and optional artifact writers.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub corpus: Arc<Corpus>,
    pub state: TrainState,
    pub mask: Option<MaskSpec>,
    pub lifecycles: Vec<NeuronLifecycle>,
    pub records: Vec<SparsityRecord>,
    pub losses: Vec<LossRecord>,
    writers: Option<Writers>,
}

fn schedule_for(config: &ExperimentConfig) -> Result<ScheduleConfig> {
    if config.total_steps == 0 {
        // Never consulted: no update is taken.
        return Ok(ScheduleConfig {
            warmup_steps: 1,
            peak_lr: config.schedule.peak_lr,
            total_steps: 2,
            final_lr_fraction: config.schedule.final_lr_fraction,
        });
    }
    config.schedule()
}

impl Trainer {
    /// Fresh run. With `output`, artifacts are written there (existing
    /// streams are truncated).
    pub fn new(config: ExperimentConfig, corpus: Arc<Corpus>, output: Option<&Path>) -> Result<Self> {
        config.validate()?;
        if corpus.vocab_size > config.model.vocab_size {
            return Err(HarnessError::Config(format!(
                "corpus vocabulary ({}) exceeds model vocab_size ({})",
                corpus.vocab_size, config.model.vocab_size
            )));
        }
        corpus.check_fits(config.model.seq_len)?;
        let state = TrainState::new(config.model.clone(), schedule_for(&config)?, config.optimizer.clone())?;
        let lifecycles = config
            .model
            .d_hidden
            .iter()
            .enumerate()
            .map(|(l, &h)| NeuronLifecycle::new(l, h))
            .collect();
        let mut trainer = Self {
            config_hash: config.hash(),
            config,
            corpus,
            state,
            mask: None,
            lifecycles,
            records: Vec::new(),
            losses: Vec::new(),
            writers: None,
        };
        if let Some(dir) = output {
            trainer.attach(dir, true)?;
        }
        Ok(trainer)
    }

    fn attach(&mut self, dir: &Path, truncate: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.config.save(&dir.join("config.toml"))?;
        let _ = fs::remove_file(dir.join("FAILED"));
        if truncate {
            let _ = fs::remove_dir_all(dir.join("checkpoints"));
            for stale in ["eval.json", "lifecycle.json", "mask.bin"] {
                let _ = fs::remove_file(dir.join(stale));
            }
        }
        self.writers = Some(Writers::open(dir, truncate)?);
        self.write_manifest("running", None)?;
        Ok(())
    }

    /// Resumes from the newest checkpoint under `dir`; `None` when there is
    /// no checkpoint. Streams are cut back to the checkpoint step.
    pub fn resume(config: ExperimentConfig, corpus: Arc<Corpus>, dir: &Path) -> Result<Option<Self>> {
        let Some(path) = latest_checkpoint(dir)? else {
            return Ok(None);
        };
        let mut fresh = Self::new(config, corpus, None)?;
        let ckpt = read_checkpoint(&mut BufReader::new(File::open(&path)?))?;
        let extra: ResumeState = serde_json::from_slice(&ckpt.extra)?;
        if extra.config_hash != fresh.config_hash {
            return Err(HarnessError::Config(format!(
                "checkpoint {} was written under config {} but the current config hashes to {}",
                path.display(),
                extra.config_hash,
                fresh.config_hash
            )));
        }
        let step = ckpt.state.step();
        fresh.state = ckpt.state;
        fresh.lifecycles = extra.lifecycles;
        fresh.mask = extra.mask;
        fresh.records = read_jsonl::<SparsityRecord>(&dir.join("metrics.jsonl"))?
            .into_iter()
            .filter(|r| r.step < step)
            .collect();
        fresh.losses = read_jsonl::<LossRecord>(&dir.join("loss.jsonl"))?
            .into_iter()
            .filter(|r| r.step < step)
            .collect();
        write_jsonl(&dir.join("metrics.jsonl"), &fresh.records)?;
        write_jsonl(&dir.join("loss.jsonl"), &fresh.losses)?;
        fresh.attach(dir, false)?;
        info!("resumed {} at step {}", dir.display(), step);
        Ok(Some(fresh))
    }

    /// Copy of this run writing to `output` (streams so far are copied).
    pub fn fork(&self, output: Option<&Path>) -> Result<Self> {
        let mut twin = Self {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            corpus: Arc::clone(&self.corpus),
            state: self.state.clone(),
            mask: self.mask.clone(),
            lifecycles: self.lifecycles.clone(),
            records: self.records.clone(),
            losses: self.losses.clone(),
            writers: None,
        };
        if let Some(dir) = output {
            fs::create_dir_all(dir)?;
            write_jsonl(&dir.join("metrics.jsonl"), &twin.records)?;
            write_jsonl(&dir.join("loss.jsonl"), &twin.losses)?;
            twin.attach(dir, false)?;
        }
        Ok(twin)
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.writers.as_ref().map(|w| w.dir.as_path())
    }

    pub fn step(&self) -> u64 {
        self.state.step()
    }

    pub fn set_mask(&mut self, mask: MaskSpec) -> Result<()> {
        mask.check_dims(&self.config.model.d_hidden)?;
        if let Some(w) = &self.writers {
            write_mask(&mut BufWriter::new(File::create(w.dir.join("mask.bin"))?), &mask, &self.config_hash)?;
        }
        self.mask = Some(mask);
        Ok(())
    }

    fn mask_layers(&self) -> Option<&[Vec<bool>]> {
        self.mask.as_ref().map(|m| m.layers.as_slice())
    }

    /// Measures one set of taps, checks the chain inequality and feeds the
    /// lifecycle trackers.
    fn observe(&mut self, step: u64, taps: &[ActivationTap]) -> Result<()> {
        for tap in taps {
            let mut record = measure(step, tap)?;
            if !record.chain_holds() {
                return Err(HarnessError::Invariant(format!(
                    "token <= sequence <= batch use violated at step {} layer {}: {} / {} / {}",
                    step,
                    tap.layer,
                    record.token_use_fraction,
                    record.sequence_use_fraction,
                    record.batch_use_fraction
                )));
            }
            if let Some(mask) = &self.mask {
                let active = batch_active(tap);
                if !mask.supports(tap.layer, &active) {
                    return Err(HarnessError::Invariant(format!(
                        "masked unit active at step {} layer {}",
                        step, tap.layer
                    )));
                }
            }
            self.lifecycles[tap.layer].update(&batch_active(tap), step)?;
            record.config_hash = Some(self.config_hash.clone());
            if let Some(w) = &mut self.writers {
                serde_json::to_writer(&mut w.metrics, &record)?;
                w.metrics.write_all(b"\n")?;
            }
            self.records.push(record);
        }
        Ok(())
    }

    /// One optimisation step on the batch for the current step, logging
    /// metrics when the step falls on the cadence.
    pub fn train_step(&mut self) -> Result<StepOutput> {
        let step = self.step();
        if step >= self.config.total_steps {
            return Err(HarnessError::Config(format!("run already has {} steps", step)));
        }
        let batch = self
            .corpus
            .train_batch(self.config.seed, step, self.config.batch_size, self.config.model.seq_len);
        let mask = self.mask.as_ref().map(|m| m.layers.clone());
        let out = self.state.train_step(&batch, mask.as_deref())?;
        if step.is_multiple_of(self.config.metric_every) {
            self.observe(step, &out.taps)?;
        }
        let record = LossRecord {
            step,
            loss: out.loss,
            lr: out.lr,
            config_hash: Some(self.config_hash.clone()),
        };
        if let Some(w) = &mut self.writers {
            serde_json::to_writer(&mut w.loss, &record)?;
            w.loss.write_all(b"\n")?;
        }
        self.losses.push(record);
        let done = self.step();
        if self.config.checkpoint_every > 0 && done.is_multiple_of(self.config.checkpoint_every) && done < self.config.total_steps
        {
            self.checkpoint()?;
        }
        Ok(out)
    }

    /// Runs updates until `target` steps are complete.
    pub fn train_until(&mut self, target: u64) -> Result<()> {
        let target = target.min(self.config.total_steps);
        while self.step() < target {
            let out = self.train_step()?;
            let s = self.step();
            if s.is_multiple_of(500) || s == target {
                info!("step {} loss {:.4} lr {:.2e}", s, out.loss, out.lr);
            }
        }
        Ok(())
    }

    /// Taps of a forward-only pass on the batch for the current step.
    pub fn probe_taps(&self) -> Result<Vec<ActivationTap>> {
        let batch = self
            .corpus
            .train_batch(self.config.seed, self.step(), self.config.batch_size, self.config.model.seq_len);
        let (_, taps) = forward(&self.config.model, &self.state.params, &batch.inputs, batch.batch, self.mask_layers())?;
        Ok(taps)
    }

    pub fn validate(&self) -> Result<EvalResult> {
        let batches = self.corpus.validation_batches(
            self.config.model.seq_len,
            self.config.batch_size,
            self.config.eval_windows,
        );
        let (mut loss, mut acc, mut windows) = (0.0, 0.0, 0usize);
        for b in &batches {
            let (l, a) = evaluate(&self.config.model, &self.state.params, b, self.mask_layers())?;
            loss += l * b.batch as f64;
            acc += a * b.batch as f64;
            windows += b.batch;
        }
        Ok(EvalResult {
            step: self.step(),
            loss: loss / windows as f64,
            accuracy: acc / windows as f64,
            windows,
            config_hash: self.config_hash.clone(),
        })
    }

    pub fn checkpoint(&mut self) -> Result<()> {
        let Some(dir) = self.output_dir().map(Path::to_path_buf) else {
            return Ok(());
        };
        if let Some(w) = &mut self.writers {
            w.flush()?;
        }
        let extra = serde_json::to_vec(&ResumeState {
            config_hash: self.config_hash.clone(),
            lifecycles: self.lifecycles.clone(),
            mask: self.mask.clone(),
        })?;
        let path = dir.join("checkpoints").join(format!("step-{:08}.ckpt", self.step()));
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            write_checkpoint(&mut w, &self.state, &extra)?;
            w.flush()?;
        }
        fs::rename(&tmp, &path)?;
        self.write_manifest("running", None)?;
        Ok(())
    }

    fn write_manifest(&self, status: &str, message: Option<String>) -> Result<()> {
        if let Some(dir) = self.output_dir() {
            write_json(
                &dir.join("manifest.json"),
                &Manifest {
                    config_hash: self.config_hash.clone(),
                    status: status.into(),
                    step: self.step(),
                    total_steps: self.config.total_steps,
                    tokens_per_batch: self.config.tokens_per_batch(),
                    message,
                },
            )?;
        }
        Ok(())
    }

    /// Logs the final-step metrics, evaluates on held-out data and writes
    /// the closing artifacts.
    pub fn finish(&mut self) -> Result<EvalResult> {
        let total = self.config.total_steps;
        if self.step() != total {
            return Err(HarnessError::Config(format!(
                "finish called at step {} of {}",
                self.step(),
                total
            )));
        }
        // The checkpoint precedes the final observation so that a resumed
        // run replays it exactly once.
        if total > 0 {
            self.checkpoint()?;
        }
        if self.records.last().is_none_or(|r| r.step < total) {
            let taps = self.probe_taps()?;
            self.observe(total, &taps)?;
        }
        let eval = self.validate()?;
        if let Some(dir) = self.output_dir().map(Path::to_path_buf) {
            write_json(&dir.join("eval.json"), &eval)?;
            write_json(&dir.join("lifecycle.json"), &self.lifecycles)?;
            if let Some(w) = &mut self.writers {
                w.flush()?;
            }
            self.write_manifest("complete", None)?;
        }
        Ok(eval)
    }

    /// Records a failure marker next to whatever artifacts exist.
    pub fn mark_failed(&mut self, err: &HarnessError) {
        if let Some(w) = &mut self.writers {
            let _ = w.flush();
        }
        if let Some(dir) = self.output_dir().map(Path::to_path_buf) {
            let _ = fs::write(dir.join("FAILED"), format!("step {}: {}\n", self.step(), err));
            let _ = write_json(&dir.join("lifecycle.json"), &self.lifecycles);
            let _ = self.write_manifest("failed", Some(err.to_string()));
        }
    }

    pub fn outcome(&self, eval: Option<EvalResult>) -> RunOutcome {
        RunOutcome {
            config_hash: self.config_hash.clone(),
            records: self.records.clone(),
            losses: self.losses.clone(),
            lifecycles: self.lifecycles.clone(),
            summary: summarize(&self.records, &self.lifecycles),
            eval,
            step: self.step(),
        }
    }

    /// Trains to `total_steps` (or `stop_after`), finishing the run when
    /// the end is reached. Failures leave a marker in the output directory.
    pub fn drive(&mut self, stop_after: Option<u64>) -> Result<RunOutcome> {
        let target = stop_after.unwrap_or(u64::MAX).min(self.config.total_steps);
        let result = (|| {
            self.train_until(target)?;
            if self.step() == self.config.total_steps {
                self.finish().map(Some)
            } else {
                self.checkpoint()?;
                Ok(None)
            }
        })();
        match result {
            Ok(eval) => Ok(self.outcome(eval)),
            Err(e) => {
                warn!("run failed: {}", e);
                self.mark_failed(&e);
                Err(e)
            }
        }
    }
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ckdir = dir.join("checkpoints");
    if !ckdir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(ckdir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("ckpt")
            && best.as_ref().is_none_or(|b| path.file_name() > b.file_name())
        {
            best = Some(path);
        }
    }
    Ok(best)
}

/// Runs `config` into its output directory.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let corpus = Arc::new(config.corpus.load()?);
    let dir = config.output_dir.clone();
    let mut trainer = match opts.resume {
        true => match Trainer::resume(config.clone(), Arc::clone(&corpus), &dir)? {
            Some(t) => t,
            None => Trainer::new(config.clone(), corpus, Some(&dir))?,
        },
        false => Trainer::new(config.clone(), corpus, Some(&dir))?,
    };
    trainer.drive(opts.stop_after)
}
