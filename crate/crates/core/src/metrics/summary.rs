//! Converged per-layer tables and the token/batch correlation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{NeuronLifecycle, SparsityRecord};

/// Share of the logged steps (taken from the end) averaged into converged values.
pub const CONVERGENCE_FRACTION: f64 = 0.05;

/// Mean of every record field over the convergence window for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergedLayer {
    pub layer: usize,
    pub token_use: f64,
    pub seq_use: f64,
    pub batch_use: f64,
    pub p50: Option<f64>,
    pub p65: Option<f64>,
    pub p75: Option<f64>,
    pub p90: Option<f64>,
    pub samples: usize,
}

/// Per-token, per-sequence and per-batch use in percent, plus ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UseRow {
    pub layer: usize,
    pub token_pct: f64,
    pub seq_pct: f64,
    pub batch_pct: f64,
    /// token / sequence use; NaN when sequence use is zero.
    pub token_seq_ratio: f64,
    /// sequence / batch use; NaN when batch use is zero.
    pub seq_batch_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifecycleRow {
    pub layer: usize,
    pub first_step: Option<u64>,
    pub final_step: Option<u64>,
    pub on_first_pct: f64,
    pub turned_on_pct: f64,
    pub turned_off_pct: f64,
    pub on_final_pct: f64,
    pub flipped_on_pct: f64,
    pub flipped_off_pct: f64,
    pub transient_off_pct: f64,
    pub transient_on_pct: f64,
}

/// Percentile use in percent of the sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub layer: usize,
    pub p50: Option<f64>,
    pub p65: Option<f64>,
    pub p75: Option<f64>,
    pub p90: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// First and last step of the convergence window, when any record exists.
    pub window: Option<(u64, u64)>,
    pub converged: Vec<ConvergedLayer>,
    pub use_rows: Vec<UseRow>,
    pub lifecycle_rows: Vec<LifecycleRow>,
    pub percentile_rows: Vec<PercentileRow>,
    /// Pearson correlation across layers of converged token and batch use;
    /// `None` with fewer than two layers or zero variance.
    pub token_batch_correlation: Option<f64>,
}

/// Steps making up the last `CONVERGENCE_FRACTION` of the distinct logged
/// steps (at least one).
pub fn convergence_window(records: &[SparsityRecord]) -> Vec<u64> {
    let steps: BTreeSet<u64> = records.iter().map(|r| r.step).collect();
    let n = steps.len();
    if n == 0 {
        return Vec::new();
    }
    let take = ((n as f64 * CONVERGENCE_FRACTION).ceil() as usize).clamp(1, n);
    steps.into_iter().skip(n - take).collect()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        f64::NAN
    } else {
        a / b
    }
}

pub fn summarize(records: &[SparsityRecord], lifecycles: &[NeuronLifecycle]) -> Summary {
    let window = convergence_window(records);
    let in_window: Vec<&SparsityRecord> = records
        .iter()
        .filter(|r| window.binary_search(&r.step).is_ok())
        .collect();
    let layers: BTreeSet<usize> = in_window.iter().map(|r| r.layer).collect();

    let converged: Vec<ConvergedLayer> = layers
        .iter()
        .map(|&layer| {
            let rs: Vec<&&SparsityRecord> = in_window.iter().filter(|r| r.layer == layer).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&SparsityRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            ConvergedLayer {
                layer,
                token_use: mean(|r| r.token_use_fraction),
                seq_use: mean(|r| r.sequence_use_fraction),
                batch_use: mean(|r| r.batch_use_fraction),
                p50: mean_opt(rs.iter().map(|r| r.p50)),
                p65: mean_opt(rs.iter().map(|r| r.p65)),
                p75: mean_opt(rs.iter().map(|r| r.p75)),
                p90: mean_opt(rs.iter().map(|r| r.p90)),
                samples: rs.len(),
            }
        })
        .collect();

    let use_rows = converged
        .iter()
        .map(|c| UseRow {
            layer: c.layer,
            token_pct: 100.0 * c.token_use,
            seq_pct: 100.0 * c.seq_use,
            batch_pct: 100.0 * c.batch_use,
            token_seq_ratio: ratio(c.token_use, c.seq_use),
            seq_batch_ratio: ratio(c.seq_use, c.batch_use),
        })
        .collect();

    let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
    let percentile_rows = converged
        .iter()
        .map(|c| PercentileRow {
            layer: c.layer,
            p50: pct(c.p50),
            p65: pct(c.p65),
            p75: pct(c.p75),
            p90: pct(c.p90),
        })
        .collect();

    let lifecycle_rows = lifecycles
        .iter()
        .map(|t| {
            let c = t.counts();
            LifecycleRow {
                layer: t.layer,
                first_step: t.first_step,
                final_step: t.final_step,
                on_first_pct: c.percent(c.on_first),
                turned_on_pct: c.percent(c.turned_on),
                turned_off_pct: c.percent(c.turned_off),
                on_final_pct: c.percent(c.on_final),
                flipped_on_pct: c.percent(c.flipped_on),
                flipped_off_pct: c.percent(c.flipped_off),
                transient_off_pct: c.percent(c.transient_off),
                transient_on_pct: c.percent(c.transient_on),
            }
        })
        .collect();

    let tokens: Vec<f64> = converged.iter().map(|c| c.token_use).collect();
    let batches: Vec<f64> = converged.iter().map(|c| c.batch_use).collect();

    Summary {
        window: window.first().map(|&a| (a, *window.last().unwrap())),
        token_batch_correlation: pearson(&tokens, &batches),
        converged,
        use_rows,
        lifecycle_rows,
        percentile_rows,
    }
}
