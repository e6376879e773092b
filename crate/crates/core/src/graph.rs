//! Streaming spectro-temporal graph generation.
//!
//! Every incoming event probes the per-channel context memory at channels
//! `ch + k·s` for `|k| ≤ r_ch / s`, links to each stored timestamp that lies
//! within `r_t` in the past, and emits a vertex whose input feature is the
//! mean normalized position of those neighbours. The memory write for the
//! event's own channel happens after the search, so a same-channel
//! predecessor is always a candidate neighbour.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Event;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphGenConfig {
    /// Channel radius in raw channels.
    pub r_ch: u32,
    /// Time radius in microseconds.
    pub r_t_us: u32,
    /// Skip step: stride of the channel search.
    pub skip: u32,
    pub num_channels: u32,
    /// Denominator for absolute time normalization.
    pub t_norm_us: u32,
}

impl Default for GraphGenConfig {
    fn default() -> Self {
        Self {
            r_ch: 100,
            r_t_us: 20_000,
            skip: 10,
            num_channels: 700,
            t_norm_us: 1_000_000,
        }
    }
}

impl GraphGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.skip == 0 {
            return Err(Error::config("graph.skip", "must be >= 1"));
        }
        if self.r_ch > 0 && self.skip > self.r_ch {
            return Err(Error::config("graph.skip", "must not exceed r_ch"));
        }
        if self.num_channels == 0 {
            return Err(Error::config("graph.num_channels", "must be >= 1"));
        }
        if self.r_ch >= self.num_channels {
            return Err(Error::config("graph.r_ch", "must be below num_channels"));
        }
        if self.r_t_us == 0 {
            return Err(Error::config("graph.r_t_us", "must be > 0"));
        }
        if self.t_norm_us == 0 {
            return Err(Error::config("graph.t_norm_us", "must be > 0"));
        }
        Ok(())
    }

    /// Number of search taps on either side of the centre channel.
    pub fn taps(&self) -> u32 {
        self.r_ch / self.skip
    }

    /// Upper bound on edges per vertex: `1 + 2·(r_ch div s)`.
    pub fn max_edge(&self) -> usize {
        1 + 2 * self.taps() as usize
    }

    /// Channels probed for an event on `ch`, ascending.
    pub fn searched_channels(&self, ch: u16) -> impl Iterator<Item = u16> + '_ {
        let taps = i64::from(self.taps());
        let step = i64::from(self.skip);
        let n = i64::from(self.num_channels);
        (-taps..=taps)
            .map(move |k| i64::from(ch) + k * step)
            .filter(move |&c| (0..n).contains(&c))
            .map(|c| c as u16)
    }

    pub fn norm_ch(&self, ch: f64) -> f64 {
        if self.num_channels <= 1 {
            0.0
        } else {
            (ch / f64::from(self.num_channels - 1)).clamp(0.0, 1.0)
        }
    }

    pub fn norm_t(&self, t: f64) -> f64 {
        (t / f64::from(self.t_norm_us)).clamp(0.0, 1.0)
    }
}

/// A directed edge from an earlier event (`src` is its stream index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub ch: u16,
    pub t: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventGraphVertex {
    pub index: usize,
    pub event: Event,
    /// `(ch_norm, t_norm)`.
    pub pos: [f64; 2],
    /// `(mean neighbour t_norm, mean neighbour ch_norm)`, or the vertex's own
    /// position when it has no neighbours.
    pub feat: [f64; 2],
    pub edges: Vec<Edge>,
}

impl EventGraphVertex {
    /// Normalized `(ch, t)` positions of the neighbours.
    pub fn edge_positions(&self, cfg: &GraphGenConfig) -> Vec<[f64; 2]> {
        self.edges
            .iter()
            .map(|e| [cfg.norm_ch(f64::from(e.ch)), cfg.norm_t(f64::from(e.t))])
            .collect()
    }
}

fn make_vertex(index: usize, ev: Event, edges: Vec<Edge>, cfg: &GraphGenConfig) -> EventGraphVertex {
    let pos = [cfg.norm_ch(f64::from(ev.ch)), cfg.norm_t(f64::from(ev.t))];
    let feat = if edges.is_empty() {
        [pos[1], pos[0]]
    } else {
        let n = edges.len() as f64;
        let sum_t: u64 = edges.iter().map(|e| u64::from(e.t)).sum();
        let sum_ch: u64 = edges.iter().map(|e| u64::from(e.ch)).sum();
        [cfg.norm_t(sum_t as f64 / n), cfg.norm_ch(sum_ch as f64 / n)]
    };
    EventGraphVertex {
        index,
        event: ev,
        pos,
        feat,
        edges,
    }
}

/// Most recent timestamp (and stream index) per channel.
#[derive(Debug, Clone)]
pub struct ContextMemory {
    last: Vec<Option<(u32, usize)>>,
}

impl ContextMemory {
    pub fn new(num_channels: u32) -> Self {
        Self {
            last: vec![None; num_channels as usize],
        }
    }

    pub fn get(&self, ch: u16) -> Option<u32> {
        self.last[ch as usize].map(|(t, _)| t)
    }

    pub fn occupied(&self) -> usize {
        self.last.iter().filter(|e| e.is_some()).count()
    }

    fn lookup(&self, ch: u16) -> Option<(u32, usize)> {
        self.last[ch as usize]
    }

    fn store(&mut self, ch: u16, t: u32, index: usize) {
        self.last[ch as usize] = Some((t, index));
    }
}

#[derive(Debug, Clone)]
pub struct GraphBuilder {
    cfg: GraphGenConfig,
    mem: ContextMemory,
    next_index: usize,
    last_t: u32,
}

impl GraphBuilder {
    pub fn new(cfg: GraphGenConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            mem: ContextMemory::new(cfg.num_channels),
            cfg,
            next_index: 0,
            last_t: 0,
        })
    }

    pub fn config(&self) -> &GraphGenConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &ContextMemory {
        &self.mem
    }

    pub fn process_event(&mut self, ev: Event) -> Result<EventGraphVertex> {
        let index = self.next_index;
        if u32::from(ev.ch) >= self.cfg.num_channels {
            return Err(Error::ChannelOutOfRange {
                record: index + 1,
                ch: ev.ch.into(),
                num_channels: self.cfg.num_channels,
            });
        }
        if ev.t < self.last_t {
            return Err(Error::NonMonotonic {
                record: index + 1,
                t: ev.t,
                prev: self.last_t,
            });
        }
        let r_t = self.cfg.r_t_us;
        let edges: Vec<Edge> = self
            .cfg
            .searched_channels(ev.ch)
            .filter_map(|c| {
                let (t, src) = self.mem.lookup(c)?;
                (ev.t - t <= r_t).then_some(Edge { src, ch: c, t })
            })
            .collect();
        self.mem.store(ev.ch, ev.t, index);
        self.next_index += 1;
        self.last_t = ev.t;
        Ok(make_vertex(index, ev, edges, &self.cfg))
    }
}

/// Runs the streaming builder over a whole stream.
pub fn build_graph(events: &[Event], cfg: &GraphGenConfig) -> Result<Vec<EventGraphVertex>> {
    let mut builder = GraphBuilder::new(*cfg)?;
    events.iter().map(|&e| builder.process_event(e)).collect()
}

/// Offline reference: for every event, scans all earlier events and keeps the
/// most recent one per searched channel. Quadratic; for checking only.
pub fn brute_force_graph(events: &[Event], cfg: &GraphGenConfig) -> Result<Vec<EventGraphVertex>> {
    cfg.validate()?;
    let taps = i64::from(cfg.r_ch / cfg.skip);
    let step = i64::from(cfg.skip);
    let mut out = Vec::with_capacity(events.len());
    for (i, &ev) in events.iter().enumerate() {
        if u32::from(ev.ch) >= cfg.num_channels {
            return Err(Error::ChannelOutOfRange {
                record: i + 1,
                ch: ev.ch.into(),
                num_channels: cfg.num_channels,
            });
        }
        if i > 0 && ev.t < events[i - 1].t {
            return Err(Error::NonMonotonic {
                record: i + 1,
                t: ev.t,
                prev: events[i - 1].t,
            });
        }
        let mut latest: std::collections::BTreeMap<u16, usize> = Default::default();
        for (j, prior) in events[..i].iter().enumerate() {
            let d = i64::from(prior.ch) - i64::from(ev.ch);
            if d.abs() <= taps * step && d % step == 0 {
                latest.insert(prior.ch, j);
            }
        }
        let edges = latest
            .into_iter()
            .filter(|&(_, j)| u64::from(ev.t) - u64::from(events[j].t) <= u64::from(cfg.r_t_us))
            .map(|(ch, j)| Edge {
                src: j,
                ch,
                t: events[j].t,
            })
            .collect();
        out.push(make_vertex(i, ev, edges, cfg));
    }
    Ok(out)
}

/// Graph-generation cycles per event: dual-port reads cover two probed
/// channels per cycle, followed by `n_div` cycles for the feature divider.
pub fn gen_cycles(r_ch: u32, skip: u32, n_div: u32) -> u64 {
    let reads = 1 + 2 * u64::from(r_ch / skip.max(1));
    reads.div_ceil(2) + u64::from(n_div)
}
