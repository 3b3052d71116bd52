//! Throughput and success-rate summaries over metric records.
//!
//! Throughput counts environment state transitions per second. With a
//! constant chunk it equals policy inferences per second times the chunk.

use serde::{Deserialize, Serialize};

use crate::records::{Body, EpochRecord, Record};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSummary {
    pub transitions_per_sec: f64,
    pub inference_steps_per_sec: f64,
    /// Summed step time of the counted epochs, seconds.
    pub wall_time: f64,
    pub transitions: u64,
    pub inference_steps: u64,
    pub epochs: usize,
    pub chunk: usize,
}

/// Totals over the epochs after `warmup`.
pub fn summarize_epochs(
    epochs: &[&EpochRecord],
    warmup: usize,
) -> Result<ThroughputSummary, CliError> {
    let tail = epochs.get(warmup..).unwrap_or(&[]);
    let Some(first) = tail.first() else {
        return Err(CliError::Invalid("no post-warmup epochs".into()));
    };
    let chunk = first.chunk;
    let constant = tail
        .iter()
        .all(|e| e.chunk == chunk && (e.horizon as usize).is_multiple_of(e.chunk));
    let transitions: u64 = tail.iter().map(|e| e.report.transitions).sum();
    let inference_steps: u64 = tail.iter().map(|e| e.inference_steps).sum();
    let wall_time: f64 = tail.iter().map(|e| e.report.step_time).sum();
    if wall_time.is_nan() || wall_time <= 0.0 {
        return Err(CliError::Invalid("post-warmup epochs span no time".into()));
    }
    let s = ThroughputSummary {
        transitions_per_sec: transitions as f64 / wall_time,
        inference_steps_per_sec: inference_steps as f64 / wall_time,
        wall_time,
        transitions,
        inference_steps,
        epochs: tail.len(),
        chunk,
    };
    if constant && transitions != inference_steps * chunk as u64 {
        return Err(CliError::Invalid(format!(
            "{transitions} transitions but {inference_steps} inferences of chunk {chunk}"
        )));
    }
    Ok(s)
}

/// Summary of the epoch records of `run` (or of all records when `None`).
pub fn summarize(
    records: &[Record],
    run: Option<&str>,
    warmup: usize,
) -> Result<ThroughputSummary, CliError> {
    let epochs: Vec<&EpochRecord> = records
        .iter()
        .filter(|r| run.is_none_or(|name| r.run() == name))
        .filter_map(|r| match &r.body {
            Body::Epoch(e) => Some(e),
            _ => None,
        })
        .collect();
    summarize_epochs(&epochs, warmup)
}

/// Success rate per version: the mean episode outcome of the groups that
/// produced that version, which are the most recent ones evaluated.
pub fn success_rate_curve(records: &[Record], run: Option<&str>) -> Vec<(u64, f64)> {
    let mut curve: Vec<(u64, f64)> = records
        .iter()
        .filter(|r| run.is_none_or(|name| r.run() == name))
        .filter_map(|r| match &r.body {
            Body::Update(u) => Some((u.stats.version, u.stats.mean_reward)),
            _ => None,
        })
        .collect();
    curve.sort_by_key(|p| p.0);
    curve
}

/// Mean over the trailing `window` points, shorter at the start.
pub fn trailing_mean(curve: &[(u64, f64)], window: usize) -> Vec<(u64, f64)> {
    let w = window.max(1);
    (0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s: f64 = curve[lo..=i].iter().map(|p| p.1).sum();
            (curve[i].0, s / (i + 1 - lo) as f64)
        })
        .collect()
}

/// First version at which the smoothed curve reaches `threshold`.
pub fn first_reaching(curve: &[(u64, f64)], window: usize, threshold: f64) -> Option<u64> {
    trailing_mean(curve, window)
        .into_iter()
        .find(|p| p.1 >= threshold)
        .map(|p| p.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use swimlane_runtime::EpochReport;

    pub(crate) fn epoch(transitions: u64, steps: u64, chunk: usize, step_time: f64) -> EpochRecord {
        EpochRecord {
            run: "r".into(),
            chunk,
            horizon: 16,
            inference_steps: steps,
            report: EpochReport {
                epoch: 0,
                behavior_version: 0,
                trainer_version: 0,
                staleness: 0,
                update_staleness: 0,
                rollout_time: 0.0,
                transfer_time: 0.0,
                actor_time: 0.0,
                broadcast_time: 0.0,
                step_time,
                end_time: 0.0,
                transitions,
                consumed_transitions: transitions,
                quarantined: false,
                success_rate: 0.0,
                lanes: Vec::new(),
            },
        }
    }

    #[test]
    fn throughput_is_transitions_over_time() {
        let e = [epoch(1000, 250, 4, 1.0), epoch(3072, 768, 4, 10.0)];
        let s = summarize_epochs(&[&e[0], &e[1]], 1).unwrap();
        assert_eq!(s.transitions_per_sec, 307.2);
        assert_eq!(s.epochs, 1);
    }

    #[test]
    fn chunk_identity() {
        // one env, 100 inferences per second of 4 actions each
        let e = epoch(400, 100, 4, 1.0);
        let s = summarize_epochs(&[&e], 0).unwrap();
        assert_eq!(s.inference_steps_per_sec, 100.0);
        assert_eq!(s.transitions_per_sec, 400.0);
        assert_eq!(
            s.transitions_per_sec,
            s.inference_steps_per_sec * s.chunk as f64
        );
        let bad = epoch(401, 100, 4, 1.0);
        assert!(summarize_epochs(&[&bad], 0).is_err());
    }

    #[test]
    fn warmup_only_runs_are_rejected() {
        let e = epoch(400, 100, 4, 1.0);
        let err = summarize_epochs(&[&e], 1).unwrap_err();
        assert_eq!(err.to_string(), "no post-warmup epochs");
        assert!(summarize(&[], None, 0).is_err());
    }

    #[test]
    fn trailing_mean_window() {
        let c: Vec<(u64, f64)> = (1..=6).map(|v| (v, v as f64)).collect();
        let m = trailing_mean(&c, 3);
        assert_eq!(m[0], (1, 1.0));
        assert_eq!(m[1], (2, 1.5));
        assert_eq!(m[5], (6, 5.0));
        assert_eq!(first_reaching(&c, 3, 4.0), Some(5));
        assert_eq!(first_reaching(&c, 3, 9.0), None);
    }
}
