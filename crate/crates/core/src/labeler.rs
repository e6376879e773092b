//! Keyword boundary extraction from event activity, and the KWS metrics.
//!
//! The event-count histogram is smoothed with a normalized Gaussian kernel
//! (reflect padding), thresholds are derived from the smoothed trace's mean
//! and population standard deviation, and a hysteresis pass finds the first
//! active interval.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Event;
use crate::heads::KwsOutput;
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    pub sample_ms: u32,
    pub delta_t_ms: u32,
    /// Kernel length in bins (odd).
    pub k: usize,
    /// Kernel standard deviation in bins.
    pub sigma_g: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cooldown_steps: usize,
    pub delta_min_ms: u32,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            sample_ms: 1000,
            delta_t_ms: 10,
            k: 7,
            sigma_g: 0.75,
            alpha: 0.5,
            beta: 0.2,
            cooldown_steps: 5,
            delta_min_ms: 40,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t_ms == 0 {
            return Err(Error::config("labeler.delta_t_ms", "must be > 0"));
        }
        if self.sample_ms == 0 {
            return Err(Error::config("labeler.sample_ms", "must be > 0"));
        }
        if self.k % 2 == 0 {
            return Err(Error::config("labeler.k", "must be odd"));
        }
        if !(self.sigma_g > 0.0) {
            return Err(Error::config("labeler.sigma_g", "must be > 0"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config("labeler.beta", "must lie in (0, 1)"));
        }
        if self.cooldown_steps == 0 {
            return Err(Error::config("labeler.cooldown_steps", "must be >= 1"));
        }
        if self.delta_min_ms < self.delta_t_ms {
            return Err(Error::config("labeler.delta_min_ms", "must be >= delta_t_ms"));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.sample_ms.div_ceil(self.delta_t_ms) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSegment {
    pub t_start_ms: u32,
    pub t_end_ms: u32,
    pub start_bin: usize,
    /// Last active bin, inclusive.
    pub end_bin: usize,
}

/// Normalized Gaussian weights of length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k / 2) as f64;
    let g: Vec<f64> = (0..k).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Index into `[0, n)` under mirror reflection without repeating the edge.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

pub fn smooth(hist: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = hist.len();
    let p = (kernel.len() / 2) as i64;
    (0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * hist[reflect(i + j as i64 - p, n)])
                .sum()
        })
        .collect()
}

/// Event counts per Δt bin; events at exactly the sample end fall in the
/// last bin.
pub fn histogram(events: &[Event], cfg: &LabelerConfig) -> Vec<f64> {
    let n = cfg.num_bins();
    let mut h = vec![0.0; n];
    let width = u64::from(cfg.delta_t_ms) * 1000;
    for e in events {
        let b = ((u64::from(e.t) / width) as usize).min(n - 1);
        h[b] += 1.0;
    }
    h
}

/// Hysteresis over a smoothed trace; returns `(start_bin, end_edge)` with the
/// end edge exclusive.
pub fn hysteresis(trace: &[f64], cfg: &LabelerConfig) -> Option<(usize, usize)> {
    let n = trace.len() as f64;
    if trace.is_empty() {
        return None;
    }
    let mu = trace.iter().sum::<f64>() / n;
    let sd = (trace.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let t_high = mu + cfg.alpha * sd;
    let t_low = cfg.beta * t_high;
    let onset = trace.iter().position(|&v| v > t_high)?;
    let mut run = 0;
    for (i, &v) in trace.iter().enumerate().skip(onset + 1) {
        if v < t_low {
            run += 1;
            if run == cfg.cooldown_steps {
                return Some((onset, i + 1 - run));
            }
        } else {
            run = 0;
        }
    }
    Some((onset, trace.len()))
}

/// The first active interval of a stream, or `None` when there is no
/// crossing or the interval is shorter than `delta_min`.
pub fn extract_segment(events: &[Event], cfg: &LabelerConfig) -> Result<Option<KeywordSegment>> {
    cfg.validate()?;
    let hist = histogram(events, cfg);
    Ok(segment_from_histogram(&hist, cfg))
}

pub fn segment_from_histogram(hist: &[f64], cfg: &LabelerConfig) -> Option<KeywordSegment> {
    let trace = smooth(hist, &gaussian_kernel(cfg.k, cfg.sigma_g));
    let (start, end) = hysteresis(&trace, cfg)?;
    let t_start_ms = start as u32 * cfg.delta_t_ms;
    let t_end_ms = (end as u32 * cfg.delta_t_ms).min(cfg.sample_ms);
    if end <= start || t_end_ms - t_start_ms < cfg.delta_min_ms {
        return None;
    }
    Some(KeywordSegment {
        t_start_ms,
        t_end_ms,
        start_bin: start,
        end_bin: end - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPlacement {
    Onset,
    #[default]
    End,
}

/// Window holding the CONF target: the window of the segment onset, or the
/// last window overlapping the segment.
pub fn target_window(seg: &KeywordSegment, placement: TargetPlacement, delta_t_us: u32, num_windows: usize) -> usize {
    let dt = u64::from(delta_t_us);
    let w = match placement {
        TargetPlacement::Onset => u64::from(seg.t_start_ms) * 1000 / dt,
        TargetPlacement::End => (u64::from(seg.t_end_ms) * 1000).div_ceil(dt).saturating_sub(1),
    };
    (w as usize).min(num_windows.saturating_sub(1))
}

/// Window of maximum confidence (earliest on ties).
pub fn best_window(outputs: &[KwsOutput]) -> Option<usize> {
    if outputs.is_empty() {
        return None;
    }
    let conf: Vec<f64> = outputs.iter().map(|o| o.confidence).collect();
    Some(argmax(&conf))
}

/// Per-sample summary from which all KWS metrics are computed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KwsDecision {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    pub best_window: usize,
    pub target_window: Option<usize>,
}

impl KwsDecision {
    pub fn from_outputs(sample_id: &str, label: usize, outputs: &[KwsOutput], target_window: Option<usize>) -> Result<Self> {
        let best = best_window(outputs).ok_or(Error::Empty("kws outputs"))?;
        Ok(Self {
            sample_id: sample_id.to_string(),
            label,
            predicted: argmax(&outputs[best].class_scores),
            best_window: best,
            target_window,
        })
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }

    /// Whether the best window lies within `tol` windows of the target. A
    /// sample without a target never qualifies.
    pub fn on_target(&self, tol: usize) -> bool {
        self.target_window.is_some_and(|t| self.best_window.abs_diff(t) <= tol)
    }
}

pub fn acc_k(outputs: &[KwsOutput], label: usize) -> Result<bool> {
    Ok(KwsDecision::from_outputs("", label, outputs, None)?.correct())
}

pub fn acc_k_delta(outputs: &[KwsOutput], label: usize, target: Option<usize>, tol_bins: usize) -> Result<bool> {
    let d = KwsDecision::from_outputs("", label, outputs, target)?;
    Ok(d.correct() && d.on_target(tol_bins))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KwsMetrics {
    pub samples: usize,
    pub acc_k: f64,
    pub acc_k_delta: f64,
    pub word_end_rate: f64,
}

pub fn kws_metrics(decisions: &[KwsDecision], tol_bins: usize) -> KwsMetrics {
    let n = decisions.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    KwsMetrics {
        samples: n,
        acc_k: frac(decisions.iter().filter(|d| d.correct()).count()),
        acc_k_delta: frac(decisions.iter().filter(|d| d.correct() && d.on_target(tol_bins)).count()),
        word_end_rate: word_end_rate(decisions, tol_bins),
    }
}

pub fn word_end_rate(decisions: &[KwsDecision], tol_bins: usize) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    decisions.iter().filter(|d| d.on_target(tol_bins)).count() as f64 / decisions.len() as f64
}

/// One line of a segments file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub sample_id: String,
    pub t_start_ms: u32,
    pub t_end_ms: u32,
}

pub fn segments_to_string(records: &[SegmentRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.sample_id, r.t_start_ms, r.t_end_ms);
    }
    s
}

pub fn parse_segments(src: &str) -> Result<Vec<SegmentRecord>> {
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let bad = |reason: &str| Error::Malformed {
                what: "segment",
                record: i + 1,
                line: Some(i + 1),
                reason: reason.to_string(),
            };
            let mut parts = l.trim().split(',');
            let (Some(id), Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected sample_id,t_start_ms,t_end_ms"));
            };
            let t_start_ms = a.trim().parse().map_err(|_| bad("bad t_start_ms"))?;
            let t_end_ms = b.trim().parse().map_err(|_| bad("bad t_end_ms"))?;
            if t_end_ms < t_start_ms {
                return Err(bad("t_end_ms before t_start_ms"));
            }
            Ok(SegmentRecord {
                sample_id: id.trim().to_string(),
                t_start_ms,
                t_end_ms,
            })
        })
        .collect()
}

pub fn read_segments(path: &Path) -> Result<Vec<SegmentRecord>> {
    parse_segments(&std::fs::read_to_string(path)?)
}
