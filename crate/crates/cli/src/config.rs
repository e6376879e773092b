//! Run configuration: one TOML document, every section optional.
//!
//! ```toml
//! seed = 0
//! mode = "real"
//! out = "runs/a"
//!
//! [model]
//! weights = "model.json"   # or preset + num_classes for `train`/`perf`
//!
//! [input.toy]
//! n = 50
//! seed = 12
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use evgraph::grad::LossConfig;
use evgraph::graph::GraphGenConfig;
use evgraph::labeler::LabelerConfig;
use evgraph::model::{Mode, ModelConfig, QuantConfig};
use evgraph::perf::PerfConfig;
use evgraph::train::{ToySpec, TrainConfig};
use evgraph::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub input: Option<InputSection>,
    /// Held-out set for `train`.
    pub eval_input: Option<InputSection>,
    pub quant: Option<QuantConfig>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub labeler: LabelerConfig,
    pub perf: PerfConfig,
    pub kws: KwsSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub weights: Option<PathBuf>,
    pub preset: String,
    pub num_classes: usize,
    pub graph: GraphOverride,
    pub delta_t_us: Option<u32>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            weights: None,
            preset: "base".into(),
            num_classes: 20,
            graph: GraphOverride::default(),
            delta_t_us: None,
        }
    }
}

impl ModelSection {
    /// Config built from `preset`, ignoring `weights`.
    pub fn preset_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, self.num_classes)?;
        self.graph.apply(&mut c.graph);
        if let Some(d) = self.delta_t_us {
            c.delta_t_us = d;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphOverride {
    pub r_ch: Option<u32>,
    pub r_t_us: Option<u32>,
    pub skip: Option<u32>,
    pub num_channels: Option<u32>,
    pub t_norm_us: Option<u32>,
}

impl GraphOverride {
    fn apply(&self, g: &mut GraphGenConfig) {
        let set = |dst: &mut u32, v: Option<u32>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut g.r_ch, self.r_ch);
        set(&mut g.r_t_us, self.r_t_us);
        set(&mut g.skip, self.skip);
        set(&mut g.num_channels, self.num_channels);
        set(&mut g.t_norm_us, self.t_norm_us);
    }
}

/// Where samples come from. Exactly one source must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    pub manifest: Option<PathBuf>,
    /// Manifest split to read; all entries when absent.
    pub split: Option<String>,
    pub streams: Vec<PathBuf>,
    pub toy: Option<ToyInput>,
    /// `sample_id,t_start_ms,t_end_ms` file; the labeler fills in when absent.
    pub segments: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyInput {
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub spec: ToySpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KwsSection {
    /// Tolerance in windows for Acc_{K,Δ} and word-end rate.
    pub tol_bins: usize,
}

impl Default for KwsSection {
    fn default() -> Self {
        Self { tol_bins: 1 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub predictions: Option<PathBuf>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&src).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes every relative path relative to `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.out.as_mut().map(fix);
        self.model.weights.as_mut().map(fix);
        self.eval.predictions.as_mut().map(fix);
        for inp in [self.input.as_mut(), self.eval_input.as_mut()].into_iter().flatten() {
            inp.manifest.as_mut().map(fix);
            inp.segments.as_mut().map(fix);
            inp.streams.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.labeler.validate()?;
        self.perf.validate()?;
        if let Some(q) = &self.quant {
            if !(2..=16).contains(&q.bits) {
                return Err(Error::config("quant.bits", "must lie in [2, 16]").into());
            }
        }
        for (name, inp) in [("input", &self.input), ("eval_input", &self.eval_input)] {
            let Some(inp) = inp else { continue };
            let sources = usize::from(inp.manifest.is_some()) + usize::from(!inp.streams.is_empty()) + usize::from(inp.toy.is_some());
            if sources != 1 {
                return Err(Error::config(name, "set exactly one of manifest, streams, toy").into());
            }
            if let Some(t) = &inp.toy {
                if t.n == 0 {
                    return Err(Error::config(format!("{name}.toy.n"), "must be >= 1").into());
                }
                if t.spec.events_min == 0 || t.spec.events_min > t.spec.events_max {
                    return Err(Error::config(format!("{name}.toy.spec.events_min"), "must be in [1, events_max]").into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        c.validate().unwrap();
        assert_eq!(c.mode, Mode::Real);
        assert_eq!(c.kws.tol_bins, 1);
        assert_eq!(c.labeler, LabelerConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c: RunConfig = toml::from_str("mode = \"integer\"\n[labeler]\nalpha = 0.7\n[model.graph]\nskip = 1\n").unwrap();
        assert_eq!(c.mode, Mode::Integer);
        assert_eq!(c.labeler.alpha, 0.7);
        assert_eq!(c.labeler.k, 7);
        assert_eq!(c.model.preset_config().unwrap().graph.skip, 1);
    }

    #[test]
    fn errors_name_the_key() {
        let c: RunConfig = toml::from_str("[labeler]\ndelta_t_ms = 0\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("labeler.delta_t_ms"));
        let e = toml::from_str::<RunConfig>("[train]\nepoch = 3\n").unwrap_err();
        assert!(e.to_string().contains("epoch"));
        let c: RunConfig = toml::from_str("[input]\nstreams = [\"a.evg\"]\n[input.toy]\nn = 2\nseed = 0\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("input"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c: RunConfig = toml::from_str("out = \"o\"\n[model]\nweights = \"m.json\"\n[input]\nstreams = [\"/abs.evg\", \"r.evg\"]\n").unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.out.unwrap(), PathBuf::from("/cfg/o"));
        assert_eq!(c.model.weights.unwrap(), PathBuf::from("/cfg/m.json"));
        assert_eq!(c.input.unwrap().streams, vec![PathBuf::from("/abs.evg"), PathBuf::from("/cfg/r.evg")]);
    }
}
