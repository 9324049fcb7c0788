//! Hidden-unit use metrics over post-ReLU MLP activations.
//!
//! Three aggregation levels are measured per layer:
//!
//! * per token: units with a value `> 0` for a single token, averaged over
//!   every position of the batch;
//! * per sequence: units whose activation summed over the sequence is `> 0`
//!   (an "or" across the tokens of the sequence), averaged over sequences;
//! * per batch: the same "or" across every token of the batch.
//!
//! Percentile metrics describe how often a unit fires within a sequence,
//! restricted to units that fire at least once there. Because zero-count
//! units always sort lowest, the percentile over the nonzero subset is read
//! off the full count vector at a rescaled percentile (see
//! [`rescaled_percentile`]).

mod lifecycle;
mod summary;

pub use lifecycle::{LifecycleCounts, NeuronLifecycle};
pub use summary::{
    convergence_window, pearson, summarize, ConvergedLayer, LifecycleRow, PercentileRow, Summary,
    UseRow, CONVERGENCE_FRACTION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ActivationTap;

/// Percentiles tracked in every [`SparsityRecord`].
pub const PERCENTILES: [f64; 4] = [50.0, 65.0, 75.0, 90.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("activation tap contains a negative value ({value}) at flat index {index}")]
    NegativeActivation { index: usize, value: f64 },
    #[error("empty activation block")]
    Empty,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("percentile undefined: no hidden unit is active in the sequence")]
    UndefinedPercentile,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_block(values: &[f32], hidden: usize) -> Result<usize> {
    if hidden == 0 || values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !values.len().is_multiple_of(hidden) {
        return Err(MetricsError::Argument(format!(
            "{} values do not form rows of width {}",
            values.len(),
            hidden
        )));
    }
    Ok(values.len() / hidden)
}

fn check_nonnegative(values: &[f32]) -> Result<()> {
    match values.iter().position(|&v| v < 0.0 || v.is_nan()) {
        Some(index) => Err(MetricsError::NegativeActivation {
            index,
            value: values[index] as f64,
        }),
        None => Ok(()),
    }
}

/// Number of `(position, unit)` entries that are strictly positive.
pub fn active_entries(values: &[f32]) -> u64 {
    values.iter().filter(|&&v| v > 0.0).count() as u64
}

/// Mean fraction of hidden units that are nonzero per token.
pub fn token_use(tap: &ActivationTap) -> Result<f64> {
    let values = tap.values.data();
    let positions = check_block(values, tap.hidden())?;
    Ok(active_entries(values) as f64 / (positions as u64 * tap.hidden() as u64) as f64)
}

/// Per-unit column sums over a `[rows, hidden]` block, accumulated in f64.
fn column_sums(values: &[f32], hidden: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; hidden];
    for row in values.chunks(hidden) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    sums
}

/// Units whose activation summed over a `[seq, hidden]` block is positive.
///
/// Inputs must be nonnegative: the column sum is positive exactly when some
/// entry is, which only holds without negative values.
pub fn sequence_dimensions_used(values: &[f32], hidden: usize) -> Result<usize> {
    check_block(values, hidden)?;
    check_nonnegative(values)?;
    Ok(column_sums(values, hidden).iter().filter(|&&s| s > 0.0).count())
}

/// [`sequence_dimensions_used`] over the `[batch * seq, hidden]` flattening.
pub fn batch_dimensions_used(tap: &ActivationTap) -> Result<usize> {
    sequence_dimensions_used(tap.values.data(), tap.hidden())
}

/// Boolean batch-activity vector: unit `u` is active when any of its values
/// in the tap is `> 0`.
pub fn batch_active(tap: &ActivationTap) -> Vec<bool> {
    let hidden = tap.hidden();
    let mut active = vec![false; hidden];
    for row in tap.values.data().chunks(hidden) {
        for (a, &v) in active.iter_mut().zip(row) {
            *a |= v > 0.0;
        }
    }
    active
}

/// Maps a percentile over the nonzero subset onto the full vector, given the
/// fraction of entries that are nonzero.
pub fn rescaled_percentile(fract_nonzero: f64, desired_percentile: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fract_nonzero) {
        return Err(MetricsError::Argument(format!(
            "fract_nonzero must lie in [0, 1], got {}",
            fract_nonzero
        )));
    }
    if !(0.0..=100.0).contains(&desired_percentile) {
        return Err(MetricsError::Argument(format!(
            "percentile must lie in [0, 100], got {}",
            desired_percentile
        )));
    }
    let fract_zero = 1.0 - fract_nonzero;
    Ok(desired_percentile * fract_nonzero + 100.0 * fract_zero)
}

/// 1-based nearest rank `ceil(p/100 * n)`, clamped to `[1, n]`.
///
/// A relative guard of 1e-9 absorbs rounding in `p/100 * n` so that ranks
/// landing exactly on an integer are not pushed up by one.
pub fn nearest_rank(percentile: f64, n: usize) -> usize {
    let x = percentile / 100.0 * n as f64;
    let rank = (x - 1e-9 * x.max(1.0)).ceil();
    (rank.max(1.0) as usize).min(n)
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank_percentile<T: Copy>(sorted: &[T], percentile: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    Some(sorted[nearest_rank(percentile, sorted.len()) - 1])
}

/// Per-unit count of tokens with a positive value in a `[seq, hidden]` block.
pub fn use_counts(values: &[f32], hidden: usize) -> Vec<u32> {
    let mut counts = vec![0u32; hidden];
    for row in values.chunks(hidden) {
        for (c, &v) in counts.iter_mut().zip(row) {
            *c += (v > 0.0) as u32;
        }
    }
    counts
}

/// Fraction of the sequence in which the `percentile`-th most-used unit is
/// active, among units active at least once in the sequence.
pub fn percentile_used_dimension_count(values: &[f32], hidden: usize, percentile: f64) -> Result<f64> {
    let seq = check_block(values, hidden)?;
    check_nonnegative(values)?;
    let mut counts = use_counts(values, hidden);
    percentile_of_counts(&mut counts, seq, percentile)
}

/// Same as [`percentile_used_dimension_count`] on precomputed counts; sorts
/// `counts` in place.
pub fn percentile_of_counts(counts: &mut [u32], seq: usize, percentile: f64) -> Result<f64> {
    let nonzero = counts.iter().filter(|&&c| c > 0).count();
    if nonzero == 0 {
        return Err(MetricsError::UndefinedPercentile);
    }
    let fract = nonzero as f64 / counts.len() as f64;
    let rescaled = rescaled_percentile(fract, percentile)?;
    counts.sort_unstable();
    let value = nearest_rank_percentile(counts, rescaled).expect("non-empty counts");
    Ok(value as f64 / seq as f64)
}

/// Per-layer, per-step bundle of use fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityRecord {
    pub step: u64,
    pub layer: usize,
    #[serde(rename = "token_use")]
    pub token_use_fraction: f64,
    #[serde(rename = "seq_use")]
    pub sequence_use_fraction: f64,
    #[serde(rename = "batch_use")]
    pub batch_use_fraction: f64,
    /// Mean over sequences with at least one active unit; `None` when no
    /// sequence has any.
    pub p50: Option<f64>,
    pub p65: Option<f64>,
    pub p75: Option<f64>,
    pub p90: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl SparsityRecord {
    /// `(percentile, fraction of sequence)` pairs in ascending percentile order.
    pub fn percentile_use(&self) -> [(f64, Option<f64>); 4] {
        [
            (50.0, self.p50),
            (65.0, self.p65),
            (75.0, self.p75),
            (90.0, self.p90),
        ]
    }

    /// `token <= sequence <= batch <= 1`.
    pub fn chain_holds(&self) -> bool {
        self.token_use_fraction <= self.sequence_use_fraction
            && self.sequence_use_fraction <= self.batch_use_fraction
            && self.batch_use_fraction <= 1.0
    }
}

/// Computes every metric for one tap.
pub fn measure(step: u64, tap: &ActivationTap) -> Result<SparsityRecord> {
    let hidden = tap.hidden();
    let values = tap.values.data();
    let positions = check_block(values, hidden)?;
    check_nonnegative(values)?;
    let (batch, seq) = (tap.batch(), tap.seq());

    let mut union_total = 0u64;
    let mut percentile_sums = [0.0f64; 4];
    let mut defined = 0usize;
    for b in 0..batch {
        let block = tap.sequence(b);
        let mut counts = use_counts(block, hidden);
        let used = sequence_dimensions_used(block, hidden)?;
        union_total += used as u64;
        if used > 0 {
            defined += 1;
            for (sum, &p) in percentile_sums.iter_mut().zip(&PERCENTILES) {
                *sum += percentile_of_counts(&mut counts, seq, p)?;
            }
        }
    }
    let pct = |i: usize| (defined > 0).then(|| percentile_sums[i] / defined as f64);

    Ok(SparsityRecord {
        step,
        layer: tap.layer,
        token_use_fraction: active_entries(values) as f64 / (positions as u64 * hidden as u64) as f64,
        sequence_use_fraction: union_total as f64 / (batch as u64 * hidden as u64) as f64,
        batch_use_fraction: batch_dimensions_used(tap)? as f64 / hidden as f64,
        p50: pct(0),
        p65: pct(1),
        p75: pct(2),
        p90: pct(3),
        config_hash: None,
    })
}

#[cfg(test)]
mod tests;
