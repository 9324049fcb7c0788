//! Streaming per-unit on/off history for one layer.

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronLifecycle {
    pub layer: usize,
    pub active_first: Vec<bool>,
    /// Unit was seen off at some observation and on at a later one.
    pub ever_on_after_off: Vec<bool>,
    /// Unit was seen on at some observation and off at a later one.
    pub ever_off_after_on: Vec<bool>,
    pub active_final: Vec<bool>,
    pub first_step: Option<u64>,
    pub final_step: Option<u64>,
    seen_on: Vec<bool>,
    seen_off: Vec<bool>,
}

/// Counts derived from a tracker. `turned_on`/`turned_off` compare the first
/// and final observations only; the `flipped_*` and `transient_*` fields
/// cover intermediate flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleCounts {
    pub hidden: usize,
    pub on_first: usize,
    pub turned_on: usize,
    pub turned_off: usize,
    pub on_final: usize,
    pub flipped_on: usize,
    pub flipped_off: usize,
    /// Went off after being on but were on again at the final observation.
    pub transient_off: usize,
    /// Came on after being off but were off again at the final observation.
    pub transient_on: usize,
}

impl LifecycleCounts {
    pub fn percent(&self, count: usize) -> f64 {
        100.0 * count as f64 / self.hidden as f64
    }

    pub fn identity_holds(&self) -> bool {
        self.on_final as i64 == self.on_first as i64 + self.turned_on as i64 - self.turned_off as i64
    }
}

impl NeuronLifecycle {
    pub fn new(layer: usize, hidden: usize) -> Self {
        Self {
            layer,
            active_first: vec![false; hidden],
            ever_on_after_off: vec![false; hidden],
            ever_off_after_on: vec![false; hidden],
            active_final: vec![false; hidden],
            first_step: None,
            final_step: None,
            seen_on: vec![false; hidden],
            seen_off: vec![false; hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.active_first.len()
    }

    pub fn observations_started(&self) -> bool {
        self.first_step.is_some()
    }

    pub fn update(&mut self, batch_active: &[bool], step: u64) -> Result<()> {
        if batch_active.len() != self.hidden() {
            return Err(MetricsError::Argument(format!(
                "activity vector has length {}, tracker tracks {} units",
                batch_active.len(),
                self.hidden()
            )));
        }
        if let Some(last) = self.final_step {
            if step <= last {
                return Err(MetricsError::Argument(format!(
                    "step {} observed after step {}",
                    step, last
                )));
            }
        }
        if self.first_step.is_none() {
            self.first_step = Some(step);
            self.active_first.copy_from_slice(batch_active);
        }
        for (u, &on) in batch_active.iter().enumerate() {
            if on {
                self.ever_on_after_off[u] |= self.seen_off[u];
                self.seen_on[u] = true;
            } else {
                self.ever_off_after_on[u] |= self.seen_on[u];
                self.seen_off[u] = true;
            }
        }
        self.active_final.copy_from_slice(batch_active);
        self.final_step = Some(step);
        Ok(())
    }

    pub fn counts(&self) -> LifecycleCounts {
        let mut c = LifecycleCounts {
            hidden: self.hidden(),
            on_first: 0,
            turned_on: 0,
            turned_off: 0,
            on_final: 0,
            flipped_on: 0,
            flipped_off: 0,
            transient_off: 0,
            transient_on: 0,
        };
        for u in 0..self.hidden() {
            let (first, last) = (self.active_first[u], self.active_final[u]);
            c.on_first += first as usize;
            c.on_final += last as usize;
            c.turned_on += (!first && last) as usize;
            c.turned_off += (first && !last) as usize;
            c.flipped_on += self.ever_on_after_off[u] as usize;
            c.flipped_off += self.ever_off_after_on[u] as usize;
            c.transient_off += (self.ever_off_after_on[u] && last) as usize;
            c.transient_on += (self.ever_on_after_off[u] && !last) as usize;
        }
        c
    }
}
