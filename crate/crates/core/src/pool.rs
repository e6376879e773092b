//! Global average pooling and Δt-windowed max pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::div_round_away;

/// Running sum of per-event features over one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgAccumulator {
    pub sum: Vec<f64>,
    pub count: u64,
}

impl AvgAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn add(&mut self, feat: &[f64]) {
        for (s, v) in self.sum.iter_mut().zip(feat) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptySample);
        }
        let n = self.count as f64;
        Ok(self.sum.iter().map(|s| s / n).collect())
    }
}

/// Integer accumulator over output codes. The mean of codes is itself a code
/// on the same grid, so finalization only divides (rounding half away from
/// zero) and needs no rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct IntAvgAccumulator {
    pub sum: Vec<i64>,
    pub count: u64,
}

impl IntAvgAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![0; dim],
            count: 0,
        }
    }

    pub fn add(&mut self, codes: &[i32]) {
        for (s, &v) in self.sum.iter_mut().zip(codes) {
            *s += i64::from(v);
        }
        self.count += 1;
    }

    pub fn finalize(&self) -> Result<Vec<i32>> {
        if self.count == 0 {
            return Err(Error::EmptySample);
        }
        let n = self.count as i64;
        Ok(self.sum.iter().map(|&s| div_round_away(s, n) as i32).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFeature<T> {
    pub window_index: usize,
    pub feat: Vec<T>,
    pub delta_t_us: u32,
}

/// Streaming max pool over half-open windows `[kΔt, (k+1)Δt)`. Windows
/// without events emit `zero`.
#[derive(Debug, Clone)]
pub struct WindowPooler<T> {
    delta_t_us: u32,
    zero: T,
    current: usize,
    acc: Vec<T>,
}

impl<T: Copy + PartialOrd> WindowPooler<T> {
    pub fn new(dim: usize, delta_t_us: u32, zero: T) -> Result<Self> {
        if delta_t_us == 0 {
            return Err(Error::config("pool.delta_t", "must be > 0"));
        }
        Ok(Self {
            delta_t_us,
            zero,
            current: 0,
            acc: vec![zero; dim],
        })
    }

    pub fn window_of(&self, t_us: u32) -> usize {
        (t_us / self.delta_t_us) as usize
    }

    fn close(&mut self) -> WindowFeature<T> {
        let fresh = vec![self.zero; self.acc.len()];
        let feat = std::mem::replace(&mut self.acc, fresh);
        let w = WindowFeature {
            window_index: self.current,
            feat,
            delta_t_us: self.delta_t_us,
        };
        self.current += 1;
        w
    }

    /// Adds one event feature, returning any windows it closes.
    pub fn push(&mut self, t_us: u32, feat: &[T]) -> Vec<WindowFeature<T>> {
        let w = self.window_of(t_us);
        let mut out = Vec::new();
        while self.current < w {
            out.push(self.close());
        }
        for (a, &v) in self.acc.iter_mut().zip(feat) {
            if v > *a {
                *a = v;
            }
        }
        out
    }

    /// Closes the open window and pads with empty windows up to
    /// `num_windows` in total.
    pub fn finish(mut self, num_windows: usize) -> Vec<WindowFeature<T>> {
        let mut out = vec![self.close()];
        while self.current < num_windows {
            out.push(self.close());
        }
        out
    }
}

/// Number of Δt windows covering `[0, duration)`, at least one.
pub fn num_windows(duration_us: u32, delta_t_us: u32) -> usize {
    (duration_us.div_ceil(delta_t_us) as usize).max(1)
}

/// Pools a whole stream of `(t, feature)` pairs.
pub fn max_pool_stream<T: Copy + PartialOrd>(
    events: &[(u32, Vec<T>)],
    dim: usize,
    delta_t_us: u32,
    zero: T,
    num_windows: usize,
) -> Result<Vec<WindowFeature<T>>> {
    let mut p = WindowPooler::new(dim, delta_t_us, zero)?;
    let mut out = Vec::new();
    for (t, f) in events {
        out.extend(p.push(*t, f));
    }
    out.extend(p.finish(num_windows));
    Ok(out)
}
