//! Canonical event streams: one cochlea spike per [`Event`], plus a small
//! header. Two on-disk formats are supported.
//!
//! Text:
//! ```text
//! #channels=700 duration_us=1000000 label=3
//! 10,5
//! 12,6
//! ```
//!
//! Binary (little-endian): magic `EVG1`, `u32 num_channels`, `u32 duration_us`,
//! `i32 label` (`-1` when absent), then repeated `(u32 t_us, u16 ch)` records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVG1";
const BINARY_HEADER_LEN: usize = 16;
const BINARY_RECORD_LEN: usize = 6;

/// One spike: timestamp in microseconds and channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub t: u32,
    pub ch: u16,
}

impl Event {
    pub const fn new(t: u32, ch: u16) -> Self {
        Self { t, ch }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub num_channels: u32,
    pub duration_us: u32,
    pub label: Option<u32>,
    pub sample_id: Option<String>,
}

impl StreamHeader {
    pub fn new(num_channels: u32, duration_us: u32) -> Self {
        Self {
            num_channels,
            duration_us,
            label: None,
            sample_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStream {
    pub header: StreamHeader,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

impl Format {
    /// `.txt`/`.csv` are text, everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("csv") => Format::Text,
            _ => Format::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Stable-sort out-of-order records instead of rejecting them.
    pub sort: bool,
}

pub fn read_stream(path: &Path, format: Format, opts: ReadOptions) -> Result<EventStream> {
    let mut stream = match format {
        Format::Text => parse_text(&fs::read_to_string(path)?, opts)?,
        Format::Binary => parse_binary(&fs::read(path)?, opts)?,
    };
    if stream.header.sample_id.is_none() {
        stream.header.sample_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_owned);
    }
    Ok(stream)
}

pub fn write_stream(path: &Path, format: Format, stream: &EventStream) -> Result<()> {
    match format {
        Format::Text => fs::write(path, to_text(stream))?,
        Format::Binary => fs::write(path, to_binary(stream))?,
    }
    Ok(())
}

pub fn parse_text(src: &str, opts: ReadOptions) -> Result<EventStream> {
    let mut lines = src.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break parse_text_header(l.trim(), i + 1)?,
            None => {
                return Err(Error::Malformed {
                    what: "text header",
                    record: 0,
                    line: Some(1),
                    reason: "missing `#channels=` header line".into(),
                })
            }
        }
    };

    let mut events = Vec::new();
    for (i, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = events.len() + 1;
        let malformed = |reason: String| Error::Malformed {
            what: "text record",
            record,
            line: Some(i + 1),
            reason,
        };
        let (t, ch) = line
            .split_once(',')
            .ok_or_else(|| malformed(format!("expected `t_us,channel`, got `{line}`")))?;
        let t: u32 = t
            .trim()
            .parse()
            .map_err(|e| malformed(format!("timestamp `{}`: {e}", t.trim())))?;
        let ch: u32 = ch
            .trim()
            .parse()
            .map_err(|e| malformed(format!("channel `{}`: {e}", ch.trim())))?;
        let ch = u16::try_from(ch).map_err(|_| Error::ChannelOutOfRange {
            record,
            ch,
            num_channels: header.num_channels,
        })?;
        events.push(Event { t, ch });
    }

    finish(header, events, opts)
}

fn parse_text_header(line: &str, line_no: usize) -> Result<StreamHeader> {
    let bad = |reason: String| Error::Malformed {
        what: "text header",
        record: 0,
        line: Some(line_no),
        reason,
    };
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| bad(format!("header must start with `#`, got `{line}`")))?;
    let mut num_channels = None;
    let mut duration_us = None;
    let mut label = None;
    for tok in body.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got `{tok}`")))?;
        let parsed: u32 = v
            .parse()
            .map_err(|e| bad(format!("value of `{k}`: {e}")))?;
        match k {
            "channels" => num_channels = Some(parsed),
            "duration_us" => duration_us = Some(parsed),
            "label" => label = Some(parsed),
            other => return Err(bad(format!("unknown header key `{other}`"))),
        }
    }
    let num_channels = num_channels.ok_or_else(|| bad("missing `channels`".into()))?;
    let duration_us = duration_us.ok_or_else(|| bad("missing `duration_us`".into()))?;
    Ok(StreamHeader {
        num_channels,
        duration_us,
        label,
        sample_id: None,
    })
}

pub fn parse_binary(bytes: &[u8], opts: ReadOptions) -> Result<EventStream> {
    if bytes.len() < BINARY_HEADER_LEN || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::Malformed {
            what: "binary header",
            record: 0,
            line: None,
            reason: "missing `EVG1` magic or truncated header".into(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let num_channels = u32_at(4);
    let duration_us = u32_at(8);
    let label = i32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let label = match label {
        -1 => None,
        l if l >= 0 => Some(l as u32),
        l => {
            return Err(Error::Malformed {
                what: "binary header",
                record: 0,
                line: None,
                reason: format!("label {l} is neither -1 nor a class id"),
            })
        }
    };
    let body = &bytes[BINARY_HEADER_LEN..];
    if body.len() % BINARY_RECORD_LEN != 0 {
        return Err(Error::Malformed {
            what: "binary record",
            record: body.len() / BINARY_RECORD_LEN + 1,
            line: None,
            reason: format!("{} trailing bytes", body.len() % BINARY_RECORD_LEN),
        });
    }
    let events = body
        .chunks_exact(BINARY_RECORD_LEN)
        .map(|r| Event {
            t: u32::from_le_bytes(r[..4].try_into().unwrap()),
            ch: u16::from_le_bytes(r[4..6].try_into().unwrap()),
        })
        .collect();
    let header = StreamHeader {
        num_channels,
        duration_us,
        label,
        sample_id: None,
    };
    finish(header, events, opts)
}

fn finish(header: StreamHeader, mut events: Vec<Event>, opts: ReadOptions) -> Result<EventStream> {
    if header.num_channels == 0 {
        return Err(Error::config("num_channels", "must be at least 1"));
    }
    if opts.sort {
        events.sort_by_key(|e| e.t);
    }
    validate(&header, &events)?;
    Ok(EventStream { header, events })
}

/// Checks channel range, monotonic timestamps and the duration bound.
/// Record indices in errors are 1-based.
pub fn validate(header: &StreamHeader, events: &[Event]) -> Result<()> {
    let mut prev = 0u32;
    for (i, e) in events.iter().enumerate() {
        let record = i + 1;
        if u32::from(e.ch) >= header.num_channels {
            return Err(Error::ChannelOutOfRange {
                record,
                ch: e.ch.into(),
                num_channels: header.num_channels,
            });
        }
        if e.t < prev {
            return Err(Error::NonMonotonic {
                record,
                t: e.t,
                prev,
            });
        }
        if e.t > header.duration_us {
            return Err(Error::Malformed {
                what: "record",
                record,
                line: None,
                reason: format!("t = {} exceeds duration_us = {}", e.t, header.duration_us),
            });
        }
        prev = e.t;
    }
    Ok(())
}

pub fn to_text(stream: &EventStream) -> String {
    let h = &stream.header;
    let mut out = format!("#channels={} duration_us={}", h.num_channels, h.duration_us);
    if let Some(l) = h.label {
        let _ = write!(out, " label={l}");
    }
    out.push('\n');
    for e in &stream.events {
        let _ = writeln!(out, "{},{}", e.t, e.ch);
    }
    out
}

pub fn to_binary(stream: &EventStream) -> Vec<u8> {
    let h = &stream.header;
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + BINARY_RECORD_LEN * stream.events.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&h.num_channels.to_le_bytes());
    out.extend_from_slice(&h.duration_us.to_le_bytes());
    let label = h.label.map(|l| l as i32).unwrap_or(-1);
    out.extend_from_slice(&label.to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.ch.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BurstShape {
    /// Normal in both axes, `spread` is one standard deviation.
    #[default]
    Gaussian,
    /// Uniform over `center ± spread` in both axes.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub t_center_us: u32,
    pub ch_center: u32,
    pub t_spread_us: f64,
    pub ch_spread: f64,
    pub count: usize,
    #[serde(default)]
    pub shape: BurstShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub bursts: Vec<Burst>,
    pub seed: u64,
    pub num_channels: u32,
    pub duration_us: u32,
    /// Extra events uniform over the whole channel-time plane.
    #[serde(default)]
    pub background: usize,
    #[serde(default)]
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub stream: EventStream,
    /// Coordinates that fell outside the valid range and were clamped.
    pub clamped: usize,
}

pub fn synth_stream(spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.num_channels == 0 {
        return Err(Error::config("num_channels", "must be at least 1"));
    }
    for (i, b) in spec.bursts.iter().enumerate() {
        if b.t_center_us > spec.duration_us || b.ch_center >= spec.num_channels {
            return Err(Error::config(
                format!("bursts[{i}]"),
                "center outside duration/channel range",
            ));
        }
        if !(b.t_spread_us >= 0.0 && b.ch_spread >= 0.0) {
            return Err(Error::config(format!("bursts[{i}]"), "spread must be >= 0"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let max_t = f64::from(spec.duration_us);
    let max_ch = f64::from(spec.num_channels - 1);
    let mut clamped = 0usize;
    let mut clamp = |v: f64, hi: f64| {
        if v < 0.0 || v > hi {
            clamped += 1;
        }
        v.clamp(0.0, hi)
    };

    let mut events = Vec::with_capacity(spec.bursts.iter().map(|b| b.count).sum::<usize>() + spec.background);
    for b in &spec.bursts {
        for _ in 0..b.count {
            let (dt, dch) = match b.shape {
                BurstShape::Gaussian => (
                    sample_normal(&mut rng, b.t_spread_us),
                    sample_normal(&mut rng, b.ch_spread),
                ),
                BurstShape::Uniform => (
                    sample_uniform(&mut rng, b.t_spread_us),
                    sample_uniform(&mut rng, b.ch_spread),
                ),
            };
            let t = clamp(f64::from(b.t_center_us) + dt, max_t).round();
            let ch = clamp(f64::from(b.ch_center) + dch, max_ch).round();
            events.push(Event::new(t as u32, ch as u16));
        }
    }
    for _ in 0..spec.background {
        let t = rng.random_range(0..=spec.duration_us);
        let ch = rng.random_range(0..spec.num_channels);
        events.push(Event::new(t, ch as u16));
    }
    if clamped > 0 {
        log::warn!("synth_stream: clamped {clamped} coordinates into range");
    }
    events.sort_by_key(|e| e.t);
    let header = StreamHeader {
        num_channels: spec.num_channels,
        duration_us: spec.duration_us,
        label: spec.label,
        sample_id: None,
    };
    Ok(SynthOutput {
        stream: EventStream { header, events },
        clamped,
    })
}

fn sample_normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

fn sample_uniform(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        return 0.0;
    }
    rng.random_range(-half_width..=half_width)
}
