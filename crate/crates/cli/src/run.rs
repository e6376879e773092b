use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evgraph::events::{read_stream, Event, Format, ReadOptions};
use evgraph::labeler::{extract_segment, kws_metrics, read_segments, segments_to_string, target_window, KeywordSegment, KwsDecision, KwsMetrics, SegmentRecord, TargetPlacement};
use evgraph::manifest::LoadedManifest;
use evgraph::model::{calibrate_and_fold, CalibrationSample, IntModel, Mode, Model, ModelConfig, ModelType};
use evgraph::heads::KwsOutput;
use evgraph::par::Exec;
use evgraph::perf::latency_report;
use evgraph::train::{toy_dataset, train, TrainSample};
use evgraph::{weights, Error};
use serde::{Deserialize, Serialize};

use crate::config::{InputSection, RunConfig};

const EXEC: Exec = Exec::Parallel;

pub struct Sample {
    pub id: String,
    pub events: Vec<Event>,
    pub duration_us: u32,
    pub label: Option<usize>,
}

pub fn load_samples(inp: &InputSection) -> Result<Vec<Sample>> {
    if let Some(path) = &inp.manifest {
        let lm = LoadedManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let entries: Vec<_> = lm
            .manifest
            .entries
            .iter()
            .filter(|e| inp.split.as_ref().is_none_or(|s| *s == e.split))
            .collect();
        return entries
            .into_iter()
            .map(|e| {
                let s = lm.load(e).with_context(|| format!("loading {}", e.sample_id))?;
                Ok(Sample {
                    id: e.sample_id.clone(),
                    events: s.events,
                    duration_us: e.duration_us,
                    label: Some(e.label),
                })
            })
            .collect();
    }
    if let Some(t) = &inp.toy {
        return Ok(toy_dataset(&t.spec, t.n, t.seed)?
            .into_iter()
            .map(|s| Sample {
                id: s.id,
                events: s.events,
                duration_us: s.duration_us,
                label: Some(s.label),
            })
            .collect());
    }
    inp.streams
        .iter()
        .map(|p| {
            let s = read_stream(p, Format::from_path(p), ReadOptions::default()).with_context(|| format!("reading {}", p.display()))?;
            Ok(Sample {
                id: s.header.sample_id.clone().unwrap_or_else(|| p.display().to_string()),
                events: s.events,
                duration_us: s.header.duration_us,
                label: s.header.label.map(|l| l as usize),
            })
        })
        .collect()
}

fn require_input<'a>(cfg: &'a RunConfig, cmd: &str) -> Result<&'a InputSection> {
    cfg.input
        .as_ref()
        .ok_or_else(|| Error::config("input", format!("`{cmd}` needs an input section")).into())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg.out.clone().unwrap_or_else(|| PathBuf::from("evgraph-out"));
    std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn write_json(dir: &Path, name: &str, v: &impl Serialize) -> Result<PathBuf> {
    let p = dir.join(name);
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let p = cfg
        .model
        .weights
        .as_ref()
        .ok_or_else(|| Error::config("model.weights", "a weights file is required"))?;
    weights::load(p).with_context(|| format!("loading model {}", p.display()))
}

fn int_model(m: &Model) -> Result<IntModel> {
    if !m.is_quantized() {
        return Err(Error::config("mode", "mode = integer requires quantization parameters in the model file").into());
    }
    Ok(IntModel::new(m)?)
}

fn expect_type(m: &Model, t: ModelType, cmd: &str) -> Result<()> {
    if m.config.model_type != t {
        bail!(Error::config("model.weights", format!("`{cmd}` needs a {t:?} model, got {:?}", m.config.model_type)));
    }
    Ok(())
}

/// Segment per sample from a segments file, or from the labeler.
fn segments(cfg: &RunConfig, inp: &InputSection, samples: &[Sample]) -> Result<Vec<Option<KeywordSegment>>> {
    if let Some(p) = &inp.segments {
        let dt = cfg.labeler.delta_t_ms;
        let by_id: HashMap<String, SegmentRecord> = read_segments(p)?.into_iter().map(|r| (r.sample_id.clone(), r)).collect();
        return Ok(samples
            .iter()
            .map(|s| {
                by_id.get(&s.id).map(|r| KeywordSegment {
                    t_start_ms: r.t_start_ms,
                    t_end_ms: r.t_end_ms,
                    start_bin: (r.t_start_ms / dt) as usize,
                    end_bin: (r.t_end_ms.div_ceil(dt) as usize).saturating_sub(1),
                })
            })
            .collect());
    }
    EXEC.map(samples, |s| extract_segment(&s.events, &cfg.labeler))
        .into_iter()
        .collect::<evgraph::Result<_>>()
        .map_err(Into::into)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRecord {
    pub sample_id: String,
    pub label: Option<usize>,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub samples: usize,
    pub labeled: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    /// `confusion[label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ClassMetrics {
    fn from_records(recs: &[ClassifyRecord], num_classes: usize) -> Self {
        let mut confusion = vec![vec![0; num_classes]; num_classes];
        let (mut labeled, mut correct) = (0, 0);
        for r in recs {
            if let Some(l) = r.label {
                labeled += 1;
                correct += usize::from(l == r.predicted);
                if l < num_classes && r.predicted < num_classes {
                    confusion[l][r.predicted] += 1;
                }
            }
        }
        Self {
            samples: recs.len(),
            labeled,
            correct,
            accuracy: (labeled > 0).then(|| correct as f64 / labeled as f64),
            confusion,
        }
    }

    fn text(&self) -> String {
        match self.accuracy {
            Some(a) => format!("accuracy {:.4} ({}/{})", a, self.correct, self.labeled),
            None => format!("{} samples, no labels", self.samples),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyDoc {
    pub command: String,
    pub mode: Mode,
    pub num_classes: usize,
    pub samples: Vec<ClassifyRecord>,
    pub metrics: ClassMetrics,
}

pub fn classify(cfg: &RunConfig) -> Result<String> {
    let samples = load_samples(require_input(cfg, "classify")?)?;
    let m = load_model(cfg)?;
    expect_type(&m, ModelType::Classifier, "classify")?;
    let im = match cfg.mode {
        Mode::Integer => Some(int_model(&m)?),
        Mode::Real => None,
    };
    let results = EXEC.map(&samples, |s| match &im {
        Some(im) => im.classify(&s.events),
        None => m.classify(&s.events),
    });
    let mut recs = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(results) {
        let c = r.with_context(|| format!("classifying {}", s.id))?;
        recs.push(ClassifyRecord {
            sample_id: s.id.clone(),
            label: s.label,
            predicted: c.predicted,
            probs: c.probs,
        });
    }
    let num_classes = m.config.num_classes;
    let metrics = ClassMetrics::from_records(&recs, num_classes);
    let doc = ClassifyDoc {
        command: "classify".into(),
        mode: cfg.mode,
        num_classes,
        samples: recs,
        metrics,
    };
    let p = write_json(&out_dir(cfg)?, "classify.json", &doc)?;
    Ok(format!("classify ({:?}): {}\nwrote {}\n", cfg.mode, doc.metrics.text(), p.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwsRecord {
    pub decision: KwsDecision,
    pub outputs: Vec<KwsOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwsDoc {
    pub command: String,
    pub mode: Mode,
    pub tol_bins: usize,
    pub placement: TargetPlacement,
    pub samples: Vec<KwsRecord>,
    pub metrics: KwsMetrics,
}

fn kws_text(m: &KwsMetrics, tol: usize) -> String {
    format!(
        "Acc_K {:.4}  Acc_K,delta {:.4}  word-end rate {:.4}  ({} samples, tolerance {} windows)",
        m.acc_k, m.acc_k_delta, m.word_end_rate, m.samples, tol
    )
}

pub fn kws(cfg: &RunConfig) -> Result<String> {
    let inp = require_input(cfg, "kws")?;
    let samples = load_samples(inp)?;
    let m = load_model(cfg)?;
    expect_type(&m, ModelType::Kws, "kws")?;
    let im = match cfg.mode {
        Mode::Integer => Some(int_model(&m)?),
        Mode::Real => None,
    };
    let segs = segments(cfg, inp, &samples)?;
    let dt = m.config.delta_t_us;
    let placement = cfg.train.placement;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let results = EXEC.map(&idx, |&i| -> Result<KwsRecord> {
        let s = &samples[i];
        let label = s.label.ok_or_else(|| Error::config("input", format!("sample {} has no label", s.id)))?;
        let outputs = match &im {
            Some(im) => im.kws(&s.events, s.duration_us)?,
            None => m.kws(&s.events, s.duration_us)?,
        };
        let target = segs[i].map(|seg| target_window(&seg, placement, dt, outputs.len()));
        Ok(KwsRecord {
            decision: KwsDecision::from_outputs(&s.id, label, &outputs, target)?,
            outputs,
        })
    });
    let recs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let decisions: Vec<KwsDecision> = recs.iter().map(|r| r.decision.clone()).collect();
    let tol = cfg.kws.tol_bins;
    let doc = KwsDoc {
        command: "kws".into(),
        mode: cfg.mode,
        tol_bins: tol,
        placement,
        samples: recs,
        metrics: kws_metrics(&decisions, tol),
    };
    let p = write_json(&out_dir(cfg)?, "kws.json", &doc)?;
    Ok(format!("kws ({:?}): {}\nwrote {}\n", cfg.mode, kws_text(&doc.metrics, tol), p.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub sample_id: String,
    pub segment: Option<KeywordSegment>,
}

pub fn label(cfg: &RunConfig) -> Result<String> {
    let samples = load_samples(require_input(cfg, "label")?)?;
    let segs = EXEC.map(&samples, |s| extract_segment(&s.events, &cfg.labeler));
    let mut recs = Vec::with_capacity(samples.len());
    for (s, seg) in samples.iter().zip(segs) {
        recs.push(LabelRecord {
            sample_id: s.id.clone(),
            segment: seg?,
        });
    }
    let lines: Vec<SegmentRecord> = recs
        .iter()
        .filter_map(|r| {
            r.segment.map(|g| SegmentRecord {
                sample_id: r.sample_id.clone(),
                t_start_ms: g.t_start_ms,
                t_end_ms: g.t_end_ms,
            })
        })
        .collect();
    let dir = out_dir(cfg)?;
    let csv = dir.join("segments.csv");
    std::fs::write(&csv, segments_to_string(&lines)).with_context(|| format!("writing {}", csv.display()))?;
    write_json(&dir, "label.json", &recs)?;
    Ok(format!("label: {} of {} samples segmented\nwrote {}\n", lines.len(), recs.len(), csv.display()))
}

fn train_samples(cfg: &RunConfig, inp: &InputSection, want_segments: bool) -> Result<Vec<TrainSample>> {
    let samples = load_samples(inp)?;
    let segs = if want_segments {
        segments(cfg, inp, &samples)?
    } else {
        vec![None; samples.len()]
    };
    samples
        .into_iter()
        .zip(segs)
        .map(|(s, segment)| {
            let label = s.label.ok_or_else(|| Error::config("input", format!("sample {} has no label", s.id)))?;
            Ok(TrainSample {
                id: s.id,
                events: s.events,
                duration_us: s.duration_us,
                label,
                segment,
            })
        })
        .collect()
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String> {
    let inp = require_input(cfg, "train")?;
    let model = match &cfg.model.weights {
        Some(_) => load_model(cfg)?,
        None => Model::init(cfg.model.preset_config()?, cfg.seed)?,
    };
    let kws = model.config.model_type == ModelType::Kws;
    let train_set = train_samples(cfg, inp, kws)?;
    let eval_set = cfg.eval_input.as_ref().map(|e| train_samples(cfg, e, kws)).transpose()?;
    let mut tc = cfg.train;
    tc.seed = cfg.seed;
    let outcome = train(&model, &train_set, eval_set.as_deref(), &tc, &cfg.loss, EXEC)?;

    let dir = out_dir(cfg)?;
    weights::save(&dir.join("model.json"), &outcome.model, false)?;
    write_json(&dir, "train_state.json", &outcome.state)?;
    let mut text = String::new();
    for r in &outcome.state.history {
        let _ = write!(text, "epoch {:>3}  lr {:.2e}  loss {:.5}  acc {:.4}", r.epoch, r.learning_rate, r.train_loss, r.train_accuracy);
        if let (Some(l), Some(a)) = (r.eval_loss, r.eval_accuracy) {
            let _ = write!(text, "  eval loss {l:.5}  eval acc {a:.4}");
        }
        text.push('\n');
    }
    let _ = writeln!(text, "checkpoint epoch {} (metric {:.5})", outcome.state.best_epoch, outcome.state.best_metric);
    if let Some(qc) = &cfg.quant {
        let cal: Vec<CalibrationSample> = train_set
            .iter()
            .map(|s| CalibrationSample {
                events: &s.events,
                duration_us: s.duration_us,
            })
            .collect();
        let q = calibrate_and_fold(&outcome.model, &cal, qc, EXEC)?;
        weights::save(&dir.join("model_int.json"), &q, false)?;
        let _ = writeln!(text, "calibrated {}-bit model written", qc.bits);
    }
    let _ = writeln!(text, "wrote {}", dir.join("model.json").display());
    Ok(text)
}

pub fn perf(cfg: &RunConfig) -> Result<String> {
    let mc: ModelConfig = match &cfg.model.weights {
        Some(_) => load_model(cfg)?.config,
        None => cfg.model.preset_config()?,
    };
    let r = latency_report(&mc, &cfg.perf)?;
    let dir = out_dir(cfg)?;
    write_json(&dir, "perf.json", &r)?;
    let text = r.to_text();
    std::fs::write(dir.join("perf.txt"), &text)?;
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum EvalMetrics {
    Classify(ClassMetrics),
    Kws { tol_bins: usize, metrics: KwsMetrics },
}

pub fn eval(cfg: &RunConfig) -> Result<String> {
    let p = cfg
        .eval
        .predictions
        .as_ref()
        .ok_or_else(|| Error::config("eval.predictions", "a predictions file is required"))?;
    let src = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let v: serde_json::Value = serde_json::from_str(&src)?;
    let (out, text) = match v.get("command").and_then(|c| c.as_str()) {
        Some("classify") => {
            let d: ClassifyDoc = serde_json::from_value(v)?;
            let m = ClassMetrics::from_records(&d.samples, d.num_classes);
            let t = format!("eval (classify): {}\n", m.text());
            (EvalMetrics::Classify(m), t)
        }
        Some("kws") => {
            let d: KwsDoc = serde_json::from_value(v)?;
            let decisions: Vec<KwsDecision> = d.samples.into_iter().map(|r| r.decision).collect();
            let tol = cfg.kws.tol_bins;
            let m = kws_metrics(&decisions, tol);
            let t = format!("eval (kws): {}\n", kws_text(&m, tol));
            (EvalMetrics::Kws { tol_bins: tol, metrics: m }, t)
        }
        _ => bail!(Error::config("eval.predictions", "not a classify or kws predictions document")),
    };
    write_json(&out_dir(cfg)?, "eval.json", &out)?;
    Ok(text)
}
