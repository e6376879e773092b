//! Analytic cycle, throughput, latency, parameter and memory accounting for
//! the pipelined accelerator.
//!
//! Stages per event: graph generation, then one stage per conv layer. The
//! pipeline advances at the pace of its slowest stage. Latency counts the
//! drain after the last event: every stage once, plus per-stage hand-off
//! overhead, the pooling finalization and, for KWS, one pass of the head.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conv::conv_cycles_lanes;
use crate::error::{Error, Result};
use crate::graph::gen_cycles;
use crate::heads::{head_cycles, kws_head_schedule, HeadCycleConfig};
use crate::model::{ModelConfig, ModelType};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfConfig {
    pub clock_hz: f64,
    /// MAC lanes per conv stage.
    pub mac_lanes: usize,
    /// Divider latency of the graph generator.
    pub n_div: u32,
    /// Hand-off cycles per conv stage (queue write, store update).
    pub stage_overhead: u64,
    /// Extra cycles added to every stage's per-event cost.
    pub throughput_overhead: u64,
    pub head: HeadCycleConfig,
    /// Include a programmable-logic classifier head in the latency.
    pub classifier_head_in_pl: bool,
}

impl Default for PerfConfig {
    fn default() -> Self {
        Self {
            clock_hz: 200e6,
            mac_lanes: 4,
            n_div: 4,
            stage_overhead: 16,
            throughput_overhead: 0,
            head: HeadCycleConfig::default(),
            classifier_head_in_pl: false,
        }
    }
}

impl PerfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clock_hz > 0.0) {
            return Err(Error::config("perf.clock_hz", "must be > 0"));
        }
        if self.mac_lanes == 0 || self.head.lanes == 0 || self.head.vec_width == 0 {
            return Err(Error::config("perf.lanes", "lane counts and widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub clock_hz: f64,
    pub stages: Vec<Stage>,
}

impl PipelineSpec {
    pub fn bottleneck(&self) -> Option<&Stage> {
        self.stages.iter().max_by_key(|s| s.cycles)
    }
}

/// Events per second: clock over the slowest stage.
pub fn throughput(spec: &PipelineSpec) -> Result<f64> {
    let worst = spec.bottleneck().ok_or(Error::Empty("pipeline stages"))?;
    if !(spec.clock_hz > 0.0) || worst.cycles == 0 {
        return Err(Error::config("perf", "clock and stage cycles must be positive"));
    }
    Ok(spec.clock_hz / worst.cycles as f64)
}

pub fn pipeline(model: &ModelConfig, perf: &PerfConfig) -> PipelineSpec {
    let g = &model.graph;
    let max_edge = g.max_edge();
    let mut stages = vec![Stage {
        name: "graph_gen".into(),
        cycles: gen_cycles(g.r_ch, g.skip, perf.n_div) + perf.throughput_overhead,
    }];
    for (i, &d) in model.conv_dims.iter().enumerate() {
        stages.push(Stage {
            name: format!("conv.{i}"),
            cycles: conv_cycles_lanes(d, max_edge, perf.mac_lanes) + perf.throughput_overhead,
        });
    }
    PipelineSpec {
        clock_hz: perf.clock_hz,
        stages,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub conv: u64,
    pub head: u64,
    pub total: u64,
}

fn dense(i: usize, o: usize) -> u64 {
    (i * o + o) as u64
}

/// Trainable parameters: conv weights, biases and BN scale/shift, plus the
/// head's weights and biases.
pub fn param_count(model: &ModelConfig) -> ParamCount {
    let conv: u64 = model
        .conv_shapes()
        .iter()
        .map(|&(i, o)| ((i + 2) * o + o + 2 * o) as u64)
        .sum();
    let feat = model.feature_dim();
    let head = match model.model_type {
        ModelType::Classifier => {
            let mut dims = vec![feat];
            dims.extend(&model.fc_dims);
            dims.push(model.num_classes);
            dims.windows(2).map(|w| dense(w[0], w[1])).sum()
        }
        ModelType::Kws => {
            let [s0, s1] = model.stem_dims;
            let h = model.hidden_dim;
            dense(feat, s0) + dense(s0, s1) + 3 * (h * s1 + h * h + h) as u64 + dense(h, model.num_classes) + dense(h, 1)
        }
    };
    ParamCount {
        conv,
        head,
        total: conv + head,
    }
}

/// On-chip storage: the context memory (one timestamp per channel) and a
/// feature store per conv stage (one input vector per channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub context_bits: u64,
    pub feature_bits: u64,
    pub weight_bits: u64,
}

pub fn memory_estimate(model: &ModelConfig, act_bits: u32, weight_bits: u32) -> MemoryEstimate {
    let ch = u64::from(model.graph.num_channels);
    let feature_bits = model.conv_shapes().iter().map(|&(i, _)| ch * i as u64 * u64::from(act_bits)).sum();
    MemoryEstimate {
        context_bits: ch * 32,
        feature_bits,
        weight_bits: param_count(model).total * u64::from(weight_bits),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub name: String,
    pub cycles: u64,
    pub us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model_type: ModelType,
    pub clock_hz: f64,
    pub stages: Vec<StageLatency>,
    /// Feature extraction including pooling.
    pub fe_cycles: u64,
    pub fe_us: f64,
    pub head_cycles: u64,
    pub head_us: f64,
    pub total_cycles: u64,
    pub total_us: f64,
    pub bottleneck: String,
    pub bottleneck_cycles: u64,
    pub throughput_eps: f64,
    pub params: ParamCount,
    pub memory: MemoryEstimate,
}

pub fn latency_report(model: &ModelConfig, perf: &PerfConfig) -> Result<LatencyReport> {
    model.validate()?;
    perf.validate()?;
    let us = |c: u64| c as f64 / perf.clock_hz * 1e6;
    let spec = pipeline(model, perf);
    let mut stages: Vec<StageLatency> = Vec::new();
    for (i, s) in spec.stages.iter().enumerate() {
        let cycles = s.cycles - perf.throughput_overhead + if i == 0 { 0 } else { perf.stage_overhead };
        stages.push(StageLatency {
            name: s.name.clone(),
            cycles,
            us: us(cycles),
        });
    }
    let pool = model.feature_dim().div_ceil(2) as u64;
    stages.push(StageLatency {
        name: match model.model_type {
            ModelType::Classifier => "avg_pool".into(),
            ModelType::Kws => "max_pool".into(),
        },
        cycles: pool,
        us: us(pool),
    });
    let fe_cycles: u64 = stages.iter().map(|s| s.cycles).sum();
    let head = match model.model_type {
        ModelType::Kws => head_cycles(
            &kws_head_schedule(model.feature_dim(), model.stem_dims, model.hidden_dim, model.num_classes),
            &perf.head,
        ),
        ModelType::Classifier if perf.classifier_head_in_pl => {
            let mut dims = vec![model.feature_dim()];
            dims.extend(&model.fc_dims);
            dims.push(model.num_classes);
            let states: Vec<Vec<(usize, usize)>> = dims.windows(2).map(|w| vec![(w[1], w[0])]).collect();
            head_cycles(&states, &perf.head)
        }
        ModelType::Classifier => 0,
    };
    if head > 0 {
        stages.push(StageLatency {
            name: "head".into(),
            cycles: head,
            us: us(head),
        });
    }
    let bottleneck = spec.bottleneck().cloned().ok_or(Error::Empty("pipeline stages"))?;
    Ok(LatencyReport {
        model_type: model.model_type,
        clock_hz: perf.clock_hz,
        fe_cycles,
        fe_us: us(fe_cycles),
        head_cycles: head,
        head_us: us(head),
        total_cycles: fe_cycles + head,
        total_us: us(fe_cycles + head),
        throughput_eps: throughput(&spec)?,
        bottleneck: bottleneck.name,
        bottleneck_cycles: bottleneck.cycles,
        params: param_count(model),
        memory: memory_estimate(model, 8, 8),
        stages,
    })
}

impl LatencyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "clock            {:.1} MHz", self.clock_hz / 1e6);
        let _ = writeln!(s, "{:<16} {:>8} {:>10}", "stage", "cycles", "us");
        for st in &self.stages {
            let _ = writeln!(s, "{:<16} {:>8} {:>10.3}", st.name, st.cycles, st.us);
        }
        let _ = writeln!(s, "{:<16} {:>8} {:>10.3}", "fe+pool", self.fe_cycles, self.fe_us);
        if self.head_cycles > 0 {
            let _ = writeln!(s, "{:<16} {:>8} {:>10.3}", "head", self.head_cycles, self.head_us);
        }
        let _ = writeln!(s, "{:<16} {:>8} {:>10.3}", "total", self.total_cycles, self.total_us);
        let _ = writeln!(
            s,
            "bottleneck       {} ({} cycles/event)",
            self.bottleneck, self.bottleneck_cycles
        );
        let _ = writeln!(s, "throughput       {:.1} kEPS", self.throughput_eps / 1e3);
        let _ = writeln!(
            s,
            "parameters       {} (conv {}, head {})",
            self.params.total, self.params.conv, self.params.head
        );
        let _ = writeln!(
            s,
            "memory           context {} b, features {} b, weights {} b",
            self.memory.context_bits, self.memory.feature_bits, self.memory.weight_bits
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(got: f64, want: f64, rel: f64) -> bool {
        ((got - want) / want).abs() <= rel
    }

    #[test]
    fn throughput_examples() {
        let base = ModelConfig::preset("base", 20).unwrap();
        let spec = pipeline(&base, &PerfConfig::default());
        assert_eq!(spec.bottleneck().unwrap().cycles, 352);
        assert!((throughput(&spec).unwrap() - 200e6 / 352.0).abs() < 1e-6);
        assert!(within(throughput(&spec).unwrap(), 555e3, 0.05));

        let two = PerfConfig {
            mac_lanes: 2,
            ..Default::default()
        };
        let t2 = throughput(&pipeline(&base, &two)).unwrap();
        assert!((t2 * 2.0 - throughput(&spec).unwrap()).abs() < 1e-6);
        assert!(within(t2, 277e3, 0.05));

        let unit = PipelineSpec {
            clock_hz: 1.0,
            stages: vec![Stage {
                name: "s".into(),
                cycles: 1,
            }],
        };
        assert_eq!(throughput(&unit).unwrap(), 1.0);
    }

    #[test]
    fn param_counts_of_presets() {
        let want = [
            ("tiny", 8764, 8.6e3),
            ("small", 13028, 12.9e3),
            ("base", 19156, 18.9e3),
            ("big", 71060, 70.5e3),
            ("large", 273172, 272e3),
        ];
        for (name, exact, reported) in want {
            let p = param_count(&ModelConfig::preset(name, 20).unwrap());
            assert_eq!(p.total, exact, "{name}");
            assert!(within(p.total as f64, reported, 0.03), "{name}");
        }
    }

    #[test]
    fn degenerate_param_count() {
        // conv (2+2)·1 + 1 + 2 = 7; fc 1·1+1 = 2; out 1·1+1 = 2
        let c = ModelConfig::classifier(&[1], 1, 1);
        assert_eq!(param_count(&c).total, 11);
    }

    #[test]
    fn kws_param_count_is_additive() {
        let p = param_count(&ModelConfig::preset("kws", 20).unwrap());
        assert_eq!(p.conv, 17136);
        assert_eq!(p.head, 10512 + 31320 + 1460 + 73);
        assert_eq!(p.total, p.conv + p.head);
    }

    #[test]
    fn latency_of_reference_configs() {
        let perf = PerfConfig::default();
        let base = latency_report(&ModelConfig::preset("base", 20).unwrap(), &perf).unwrap();
        assert_eq!(base.fe_cycles, 1519);
        assert!(within(base.fe_us, 8.07, 0.15));

        let kws = latency_report(&ModelConfig::preset("kws", 20).unwrap(), &perf).unwrap();
        assert_eq!(kws.fe_cycles, 1699);
        assert_eq!(kws.head_cycles, 395);
        assert!(within(kws.fe_us, 8.48, 0.15));
        assert!(within(kws.head_us, 2.05, 0.15));
        assert!(within(kws.total_us, 10.53, 0.15));
    }

    #[test]
    fn one_stage_latency() {
        let spec = PipelineSpec {
            clock_hz: 100e6,
            stages: vec![Stage {
                name: "s".into(),
                cycles: 100,
            }],
        };
        let us = spec.stages[0].cycles as f64 / spec.clock_hz * 1e6;
        assert!((us - 1.0).abs() < 1e-12);
    }

    #[test]
    fn throughput_never_rises_with_stage_cost() {
        let base = ModelConfig::preset("base", 20).unwrap();
        let mut prev = f64::INFINITY;
        for extra in 0..50 {
            let p = PerfConfig {
                throughput_overhead: extra,
                ..Default::default()
            };
            let t = throughput(&pipeline(&base, &p)).unwrap();
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn text_report_mentions_the_bottleneck() {
        let r = latency_report(&ModelConfig::preset("base", 20).unwrap(), &PerfConfig::default()).unwrap();
        let t = r.to_text();
        assert!(t.contains("352 cycles/event"));
        assert!(t.contains("568.2 kEPS"));
    }
}
