use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    pub high: f64,
    pub low: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        PhaseThresholds { high: 0.9, low: 0.1 }
    }
}

/// Onset, plateau and recovery of an RO-per-epoch series. Index 0 of the
/// series is the untrained model; lengths are in epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub thresholds: PhaseThresholds,
    /// Epoch at which RO first reaches `high`.
    pub onset: Option<usize>,
    /// Consecutive epochs at or above `high`, starting at the onset.
    pub duration: Option<usize>,
    /// Epochs from the last plateau epoch until RO first falls to `low`.
    pub recovery: Option<usize>,
    /// Mean |ΔRO| per epoch over the onset span.
    pub onset_rate: Option<f64>,
    /// Mean |ΔRO| per epoch over the recovery span.
    pub recovery_rate: Option<f64>,
    /// Index of the first epoch with RO ≤ `low` after the plateau.
    pub recovered_at: Option<usize>,
}

fn mean_abs_delta(series: &[Option<f64>], from: usize, to: usize) -> Option<f64> {
    if to <= from {
        return None;
    }
    let v = |i: usize| series[i].unwrap_or(0.0);
    let total: f64 = (from..to).map(|i| (v(i + 1) - v(i)).abs()).sum();
    Some(total / (to - from) as f64)
}

/// Undefined RO values count as neither high nor recovered.
pub fn segment_phases(series: &[Option<f64>], th: PhaseThresholds) -> PhaseReport {
    let mut report = PhaseReport {
        thresholds: th,
        onset: None,
        duration: None,
        recovery: None,
        onset_rate: None,
        recovery_rate: None,
        recovered_at: None,
    };
    let high = |i: usize| series[i].is_some_and(|r| r >= th.high);
    let Some(start) = (0..series.len()).find(|&i| high(i)) else {
        return report;
    };
    let end = (start..series.len()).find(|&i| !high(i)).unwrap_or(series.len());
    report.onset = Some(start);
    report.duration = Some(end - start);
    report.onset_rate = mean_abs_delta(series, 0, start);
    let last = end - 1;
    if let Some(rec) = (end..series.len()).find(|&i| series[i].is_some_and(|r| r <= th.low)) {
        report.recovery = Some(rec - last);
        report.recovery_rate = mean_abs_delta(series, last, rec);
        report.recovered_at = Some(rec);
    }
    report
}
