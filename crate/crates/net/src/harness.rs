//! Event-to-eye measurement, latency budgets and clock-offset estimation.
//!
//! A sample is taken from whatever frame the client is presenting at the
//! sampling instant: the watermark in its decoded panorama gives the event
//! time T1 (device clock), the `displayed` stamp gives T2 (client clock).

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use avatar_core::frame::{StageId, StageStamp};
use avatar_core::watermark::extract_watermark;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Client, ClientError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("no decodable watermark after {0} retries")]
    Watermark(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mean and population standard deviation after removing one maximum and
/// one minimum (their first occurrences). The rest keep their order.
pub fn trimmed_stats(samples: &[f64]) -> Result<(f64, f64), HarnessError> {
    if samples.len() < 3 {
        return Err(HarnessError::TooFewSamples(samples.len()));
    }
    let hi = (0..samples.len()).fold(0, |b, i| if samples[i] > samples[b] { i } else { b });
    let lo = (0..samples.len())
        .filter(|&i| i != hi)
        .fold(None, |b: Option<usize>, i| match b {
            Some(b) if samples[i] >= samples[b] => Some(b),
            _ => Some(i),
        })
        .unwrap();
    let kept: Vec<f64> = samples
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != hi && i != lo)
        .map(|(_, &x)| x)
        .collect();
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Canonical pipeline order.
pub const PIPELINE: [StageId; 8] = StageId::ALL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetInterval {
    pub from: StageId,
    pub to: StageId,
    pub duration_ns: u64,
    /// Set when one or more stages between `from` and `to` were missing.
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub intervals: Vec<BudgetInterval>,
    pub total_ns: u64,
}

impl Budget {
    pub fn has_merged(&self) -> bool {
        self.intervals.iter().any(|i| i.merged)
    }

    pub fn interval(&self, to: StageId) -> Option<&BudgetInterval> {
        self.intervals.iter().find(|i| i.to == to)
    }
}

/// Splits `t_display − t_capture` into per-stage durations. A missing
/// `displayed` stamp is supplied by `t_display_ns`.
pub fn budget_decompose(stamps: &[StageStamp], t_display_ns: u64) -> Budget {
    let mut points: Vec<(StageId, u64)> = PIPELINE
        .iter()
        .filter(|s| **s != StageId::Displayed)
        .filter_map(|s| stamps.iter().find(|x| x.stage == *s).map(|x| (*s, x.t_ns)))
        .collect();
    points.push((StageId::Displayed, t_display_ns));
    let rank = |s: StageId| PIPELINE.iter().position(|p| *p == s).unwrap();
    let intervals: Vec<BudgetInterval> = points
        .windows(2)
        .map(|w| BudgetInterval {
            from: w[0].0,
            to: w[1].0,
            duration_ns: w[1].1.saturating_sub(w[0].1),
            merged: rank(w[1].0) - rank(w[0].0) > 1,
        })
        .collect();
    let total_ns = intervals.iter().map(|i| i.duration_ns).sum();
    Budget { intervals, total_ns }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// Remote clock minus local clock.
    pub offset_ns: i64,
    pub min_rtt_ns: u64,
    pub median_rtt_ns: u64,
    /// Half the minimum round trip: the offset is known to within this much
    /// (plus any path asymmetry).
    pub uncertainty_ns: u64,
}

/// Estimates the clock offset of the relay (`PING_RELAY`) or the attached
/// device (`PING_DEVICE`) from `n` round trips, keeping the one with the
/// smallest RTT.
pub fn estimate_offset(client: &Client, target: u8, n: usize) -> Result<OffsetEstimate, HarnessError> {
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n.max(1) {
        samples.push(client.ping(target, Duration::from_secs(5))?);
        thread::sleep(Duration::from_millis(2));
    }
    let best = *samples.iter().min_by_key(|s| s.rtt_ns()).unwrap();
    let mut rtts: Vec<u64> = samples.iter().map(|s| s.rtt_ns()).collect();
    rtts.sort_unstable();
    Ok(OffsetEstimate {
        offset_ns: best.offset_ns(),
        min_rtt_ns: best.rtt_ns(),
        median_rtt_ns: rtts[rtts.len() / 2],
        uncertainty_ns: best.rtt_ns() / 2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingPlan {
    pub n_samples: usize,
    pub interval: Duration,
    /// Time before the first sample.
    pub first_at: Duration,
    pub max_retries_per_sample: u32,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            n_samples: 12,
            interval: Duration::from_secs(5),
            first_at: Duration::from_secs(5),
            max_retries_per_sample: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub seq: u64,
    pub t_event_ns: u64,
    pub t_display_ns: u64,
    pub latency_s: f64,
    pub budget: Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTest {
    pub samples_s: Vec<f64>,
    pub trimmed_mean_s: f64,
    pub stddev_s: f64,
    #[serde(skip)]
    pub samples: Vec<LatencySample>,
    #[serde(skip)]
    pub retries: u32,
}

/// Takes one sample from the presented frame, waiting for later frames while
/// the watermark does not decode.
fn sample_once(client: &Client, offset_ns: i64, max_retries: u32, retries: &mut u32) -> Result<LatencySample, HarnessError> {
    let mut frame = match client.latest() {
        Some(f) => f,
        None => client.wait_frame(None, Duration::from_secs(10))?,
    };
    let mut tries = 0;
    loop {
        match extract_watermark(&frame.panorama) {
            Ok((t_event, wseq)) if wseq == frame.seq as u16 => {
                let t_display = frame.t_display_ns();
                // Event time in the client's clock domain.
                let t_event_local = (t_event as i64 - offset_ns) as u64;
                let mut stamps = frame.stages.clone();
                for s in &mut stamps {
                    if matches!(s.stage, StageId::Capture | StageId::StitchDone | StageId::EncodeDone | StageId::Sent) {
                        s.t_ns = (s.t_ns as i64 - offset_ns) as u64;
                    }
                }
                return Ok(LatencySample {
                    seq: frame.seq,
                    t_event_ns: t_event,
                    t_display_ns: t_display,
                    latency_s: (t_display as i64 - t_event_local as i64) as f64 * 1e-9,
                    budget: budget_decompose(&stamps, t_display),
                });
            }
            other => {
                log::warn!("watermark unreadable on frame {}: {other:?}", frame.seq);
                tries += 1;
                *retries += 1;
                if tries > max_retries {
                    return Err(HarnessError::Watermark(tries));
                }
                frame = client.wait_next_frame(&frame, Duration::from_secs(10))?;
            }
        }
    }
}

/// Event-to-eye protocol: first sample at `plan.first_at`, then one every
/// `plan.interval`.
pub fn measure_event_to_eye(client: &Client, plan: &SamplingPlan, offset_ns: i64) -> Result<LatencyTest, HarnessError> {
    let start = Instant::now();
    let mut samples = Vec::with_capacity(plan.n_samples);
    let mut retries = 0;
    for k in 0..plan.n_samples {
        let due = start + plan.first_at + plan.interval * k as u32;
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        samples.push(sample_once(client, offset_ns, plan.max_retries_per_sample, &mut retries)?);
    }
    let secs: Vec<f64> = samples.iter().map(|s| s.latency_s).collect();
    let (mean, sd) = trimmed_stats(&secs)?;
    Ok(LatencyTest {
        samples_s: secs,
        trimmed_mean_s: mean,
        stddev_s: sd,
        samples,
        retries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlStats {
    pub latencies_s: Vec<f64>,
    pub mean_s: f64,
    pub max_s: f64,
}

/// Sends `n` commands spaced by `spacing` and measures client send to
/// device apply. Commands alternate between a slow drive and zero; the
/// last one stops the robot.
pub fn measure_control_latency(client: &Client, n: usize, spacing: Duration, offset_ns: i64) -> Result<ControlStats, HarnessError> {
    let mut lat = Vec::with_capacity(n);
    for i in 0..n {
        let v = if i % 2 == 0 && i + 1 < n { 0.05 } else { 0.0 };
        let (seq, t_send) = client.send_control(v, 0.0, false, Vec::new())?;
        let applied = client.wait_control_applied(seq, Duration::from_secs(10))?;
        let t_applied_local = applied.t_applied_ns as i64 - offset_ns;
        lat.push((t_applied_local - t_send as i64) as f64 * 1e-9);
        thread::sleep(spacing);
    }
    let mean = lat.iter().sum::<f64>() / lat.len().max(1) as f64;
    let max = lat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ControlStats {
        latencies_s: lat,
        mean_s: mean,
        max_s: max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShare {
    pub from: StageId,
    pub to: StageId,
    pub mean_ms: f64,
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub location: String,
    pub tests: Vec<LatencyTest>,
    pub average_s: f64,
    #[serde(default)]
    pub budget: Vec<StageShare>,
}

impl LatencyReport {
    pub fn new(location: &str, tests: Vec<LatencyTest>) -> Self {
        let average_s = if tests.is_empty() {
            0.0
        } else {
            tests.iter().map(|t| t.trimmed_mean_s).sum::<f64>() / tests.len() as f64
        };
        let budget = mean_budget(tests.iter().flat_map(|t| t.samples.iter().map(|s| &s.budget)));
        Self {
            location: location.to_string(),
            tests,
            average_s,
            budget,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Mean duration per interval over budgets that share the same shape as
/// the first one.
pub fn mean_budget<'a>(budgets: impl Iterator<Item = &'a Budget>) -> Vec<StageShare> {
    let mut acc: Vec<StageShare> = Vec::new();
    let mut n = 0usize;
    for b in budgets {
        if acc.is_empty() {
            acc = b
                .intervals
                .iter()
                .map(|i| StageShare {
                    from: i.from,
                    to: i.to,
                    mean_ms: 0.0,
                    merged: i.merged,
                })
                .collect();
        }
        if b.intervals.len() != acc.len() || b.intervals.iter().zip(&acc).any(|(i, a)| i.from != a.from || i.to != a.to) {
            continue;
        }
        for (a, i) in acc.iter_mut().zip(&b.intervals) {
            a.mean_ms += i.duration_ns as f64 * 1e-6;
        }
        n += 1;
    }
    for a in &mut acc {
        a.mean_ms /= n.max(1) as f64;
    }
    acc
}
