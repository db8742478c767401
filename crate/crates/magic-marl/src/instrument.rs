//! Lightweight run instrumentation: call counters and wall-time buckets.
//!
//! The counters back two contracts that tests assert directly: the effect
//! path (branch construction, model rollouts) runs only during training, and
//! the extrinsic value network never reads shaped rewards.

use std::cell::Cell;
use std::time::Instant;

/// Event counters owned by one run (or one evaluation).
#[derive(Debug, Default)]
pub struct Counters {
    /// Branch sets constructed by the effect engine.
    pub branch_sets: Cell<u64>,
    /// Forward-model (or twin) predictions issued by rollouts.
    pub model_predictions: Cell<u64>,
    /// Closed-loop rollout steps executed.
    pub rollout_steps: Cell<u64>,
    /// Reads of shaped rewards while the extrinsic value update is running.
    /// Must stay zero; anything else is a data-flow violation.
    pub shaped_reads_in_ext_value: Cell<u64>,
    /// True while the extrinsic value update is executing.
    ext_value_phase: Cell<bool>,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_branch_sets(&self, n: u64) {
        self.branch_sets.set(self.branch_sets.get() + n);
    }

    pub fn add_model_predictions(&self, n: u64) {
        self.model_predictions.set(self.model_predictions.get() + n);
    }

    pub fn add_rollout_steps(&self, n: u64) {
        self.rollout_steps.set(self.rollout_steps.get() + n);
    }

    pub fn in_ext_value_phase(&self) -> bool {
        self.ext_value_phase.get()
    }

    /// Marks the extrinsic value update phase for the duration of `f`.
    pub fn with_ext_value_phase<T>(&self, f: impl FnOnce() -> T) -> T {
        self.ext_value_phase.set(true);
        let out = f();
        self.ext_value_phase.set(false);
        out
    }

    pub fn record_shaped_read(&self) {
        if self.ext_value_phase.get() {
            self.shaped_reads_in_ext_value
                .set(self.shaped_reads_in_ext_value.get() + 1);
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            branch_sets: self.branch_sets.get(),
            model_predictions: self.model_predictions.get(),
            rollout_steps: self.rollout_steps.get(),
            shaped_reads_in_ext_value: self.shaped_reads_in_ext_value.get(),
        }
    }
}

/// Plain-data copy of [`Counters`] for reports and assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CounterSnapshot {
    pub branch_sets: u64,
    pub model_predictions: u64,
    pub rollout_steps: u64,
    pub shaped_reads_in_ext_value: u64,
}

/// Wall-time accounting split by training phase, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimingBuckets {
    pub env: f64,
    pub backbone: f64,
    pub fm: f64,
    pub effect: f64,
    pub gate: f64,
}

impl TimingBuckets {
    pub fn sum(&self) -> f64 {
        self.env + self.backbone + self.fm + self.effect + self.gate
    }
}

/// Accumulates elapsed time into one bucket field.
pub struct BucketTimer {
    start: Instant,
}

impl BucketTimer {
    pub fn start() -> Self {
        BucketTimer {
            start: Instant::now(),
        }
    }

    pub fn stop_into(self, bucket: &mut f64) {
        *bucket += self.start.elapsed().as_secs_f64();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shaped_reads_count_only_inside_ext_value_phase() {
        let counters = Counters::new();
        counters.record_shaped_read();
        assert_eq!(counters.shaped_reads_in_ext_value.get(), 0);
        counters.with_ext_value_phase(|| {
            counters.record_shaped_read();
            counters.record_shaped_read();
        });
        assert_eq!(counters.shaped_reads_in_ext_value.get(), 2);
        counters.record_shaped_read();
        assert_eq!(counters.shaped_reads_in_ext_value.get(), 2);
    }

    #[test]
    fn buckets_sum() {
        let buckets = TimingBuckets {
            env: 1.0,
            backbone: 2.0,
            fm: 0.5,
            effect: 0.25,
            gate: 0.25,
        };
        assert_eq!(buckets.sum(), 4.0);
    }
}
