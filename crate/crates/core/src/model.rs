//! Whole models: graph generator, conv backbone and a head, with streaming
//! execution in real, integer and fake-quant form, and post-training
//! calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{positional_norm, BatchNorm, ConvLayerParams, FeatureStore, IntConv, Message, SELF_PN};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::graph::{EventGraphVertex, GraphBuilder, GraphGenConfig};
use crate::heads::{
    hidden_params, GruParams, IntKwsHead, IntMlp, KwsHead, KwsOutput, Linear, Mlp,
};
use crate::par::Exec;
use crate::pool::{num_windows, AvgAccumulator, IntAvgAccumulator, WindowFeature, WindowPooler};
use crate::quant::{Calibration, QuantParams};
use crate::tensor::{softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Real,
    Integer,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Mode::Real),
            "integer" => Ok(Mode::Integer),
            other => Err(Error::config("mode", format!("`{other}` is not one of real, integer"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelType {
    Classifier,
    Kws,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model_type: ModelType,
    pub conv_dims: Vec<usize>,
    /// Hidden widths of the classifier MLP.
    #[serde(default)]
    pub fc_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_stem")]
    pub stem_dims: [usize; 2],
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub graph: GraphGenConfig,
    /// KWS pooling window.
    #[serde(default = "default_delta_t")]
    pub delta_t_us: u32,
}

fn default_stem() -> [usize; 2] {
    [72, 72]
}

fn default_hidden() -> usize {
    72
}

fn default_delta_t() -> u32 {
    10_000
}

impl ModelConfig {
    pub fn classifier(conv_dims: &[usize], fc: usize, num_classes: usize) -> Self {
        Self {
            model_type: ModelType::Classifier,
            conv_dims: conv_dims.to_vec(),
            fc_dims: vec![fc],
            num_classes,
            stem_dims: default_stem(),
            hidden_dim: default_hidden(),
            graph: GraphGenConfig::default(),
            delta_t_us: default_delta_t(),
        }
    }

    pub fn kws(conv_dims: &[usize], num_classes: usize) -> Self {
        Self {
            model_type: ModelType::Kws,
            fc_dims: Vec::new(),
            ..Self::classifier(conv_dims, 0, num_classes)
        }
    }

    /// Named presets: `tiny`, `small`, `base`, `big`, `large` (classifiers)
    /// and `kws`.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        Ok(match name {
            "tiny" => Self::classifier(&[8, 16, 32, 64], 64, num_classes),
            "small" => Self::classifier(&[16, 32, 64, 64], 64, num_classes),
            "base" => Self::classifier(&[64, 64, 64, 64], 64, num_classes),
            "big" => Self::classifier(&[128, 128, 128, 128], 128, num_classes),
            "large" => Self::classifier(&[256, 256, 256, 256], 256, num_classes),
            "kws" => Self::kws(&[72, 72, 72, 72], num_classes),
            other => return Err(Error::config("model.preset", format!("unknown preset `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        if self.conv_dims.is_empty() || self.conv_dims.contains(&0) {
            return Err(Error::config("model.conv_dims", "need at least one non-zero width"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be >= 1"));
        }
        if self.delta_t_us == 0 {
            return Err(Error::config("model.delta_t_us", "must be > 0"));
        }
        if self.fc_dims.contains(&0) || self.stem_dims.contains(&0) || self.hidden_dim == 0 {
            return Err(Error::config("model", "head widths must be non-zero"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.conv_dims.last().unwrap_or(&2)
    }

    /// `(in_dim, out_dim)` of each conv layer.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut prev = 2;
        self.conv_dims
            .iter()
            .map(|&d| {
                let s = (prev, d);
                prev = d;
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Classifier(Mlp),
    Kws(KwsHead),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub convs: Vec<ConvLayerParams>,
    pub head: Head,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix { rows, cols, data }
}

fn init_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear {
    let bound = (6.0 / (inp + out) as f64).sqrt();
    Linear {
        w: uniform_matrix(rng, out, inp, bound),
        b: vec![0.0; out],
        quant: None,
    }
}

/// One sample's classification result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl Classification {
    fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        let predicted = crate::tensor::argmax(&probs);
        Self {
            logits,
            probs,
            predicted,
        }
    }
}

/// Drives the streaming backbone: graph generation, then each conv stage
/// reading neighbour inputs from its own feature store. Stores are written
/// after the stage computes, so a same-channel predecessor is still visible.
fn run_backbone<T: Copy + Default>(
    graph: &GraphGenConfig,
    in_dims: &[usize],
    events: &[Event],
    first_input: impl Fn(&EventGraphVertex) -> Vec<T>,
    layer: impl Fn(usize, &[Message<T>]) -> Result<Vec<T>>,
    mut sink: impl FnMut(&Event, Vec<T>) -> Result<()>,
) -> Result<()> {
    let mut builder = GraphBuilder::new(*graph)?;
    let n_ch = graph.num_channels as usize;
    let mut stores: Vec<FeatureStore<T>> = in_dims.iter().map(|&d| FeatureStore::new(n_ch, d)).collect();
    for &ev in events {
        let v = builder.process_event(ev)?;
        let pns = v
            .edges
            .iter()
            .map(|e| {
                positional_norm(
                    i64::from(e.ch) - i64::from(ev.ch),
                    i64::from(e.t) - i64::from(ev.t),
                    graph,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut x = first_input(&v);
        for (l, store) in stores.iter_mut().enumerate() {
            let mut msgs = Vec::with_capacity(v.edges.len() + 1);
            msgs.push(Message { x: &x[..], pn: SELF_PN });
            for (e, &pn) in v.edges.iter().zip(&pns) {
                let xj = store
                    .get(e.ch)
                    .ok_or_else(|| Error::config("feature_store", format!("no feature stored for channel {}", e.ch)))?;
                msgs.push(Message { x: xj, pn });
            }
            let out = layer(l, &msgs)?;
            drop(msgs);
            store.set(ev.ch, &x);
            x = out;
        }
        sink(&ev, x)?;
    }
    Ok(())
}

impl Model {
    /// Random initialization: Glorot-uniform weights, identity batch norm.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = config
            .conv_shapes()
            .into_iter()
            .map(|(i, o)| {
                let l = init_linear(&mut rng, o, i + 2);
                let mut bn = BatchNorm::identity(o);
                bn.eps = 1e-5;
                ConvLayerParams::new(l.w, l.b, Some(bn))
            })
            .collect::<Result<Vec<_>>>()?;
        let feat = config.feature_dim();
        let head = match config.model_type {
            ModelType::Classifier => {
                let mut dims = vec![feat];
                dims.extend(&config.fc_dims);
                dims.push(config.num_classes);
                let layers = dims.windows(2).map(|w| init_linear(&mut rng, w[1], w[0])).collect();
                Head::Classifier(Mlp::new(layers, false)?)
            }
            ModelType::Kws => {
                let [s0, s1] = config.stem_dims;
                let h = config.hidden_dim;
                let stem = Mlp::new(vec![init_linear(&mut rng, s0, feat), init_linear(&mut rng, s1, s0)], true)?;
                let gb = (6.0 / (s1 + h) as f64).sqrt();
                let ub = (3.0 / h as f64).sqrt();
                let gru = GruParams {
                    w_z: uniform_matrix(&mut rng, h, s1, gb),
                    w_r: uniform_matrix(&mut rng, h, s1, gb),
                    w_h: uniform_matrix(&mut rng, h, s1, gb),
                    u_z: uniform_matrix(&mut rng, h, h, ub),
                    u_r: uniform_matrix(&mut rng, h, h, ub),
                    u_h: uniform_matrix(&mut rng, h, h, ub),
                    b_z: vec![0.0; h],
                    b_r: vec![0.0; h],
                    b_h: vec![0.0; h],
                    quant: None,
                };
                Head::Kws(KwsHead {
                    stem,
                    gru,
                    cls: init_linear(&mut rng, config.num_classes, h),
                    conf: init_linear(&mut rng, 1, h),
                })
            }
        };
        let m = Self { config, convs, head };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.conv_shapes();
        if shapes.len() != self.convs.len() {
            return Err(Error::Dimension {
                context: "conv layer count",
                expected: shapes.len(),
                got: self.convs.len(),
            });
        }
        for (c, &(i, o)) in self.convs.iter().zip(&shapes) {
            c.validate()?;
            c.w.check_shape(o, i + 2, "conv weights")?;
        }
        let feat = self.config.feature_dim();
        match (&self.head, self.config.model_type) {
            (Head::Classifier(m), ModelType::Classifier) => {
                if m.in_dim() != feat || m.out_dim() != self.config.num_classes {
                    return Err(Error::Dimension {
                        context: "classifier head",
                        expected: feat,
                        got: m.in_dim(),
                    });
                }
            }
            (Head::Kws(k), ModelType::Kws) => {
                k.validate()?;
                if k.stem.in_dim() != feat {
                    return Err(Error::Dimension {
                        context: "kws stem input",
                        expected: feat,
                        got: k.stem.in_dim(),
                    });
                }
            }
            _ => return Err(Error::config("model_type", "head does not match model type")),
        }
        Ok(())
    }

    pub fn graph(&self) -> &GraphGenConfig {
        &self.config.graph
    }

    fn in_dims(&self) -> Vec<usize> {
        self.convs.iter().map(ConvLayerParams::in_dim).collect()
    }

    /// Per-event backbone features (real arithmetic).
    pub fn backbone(&self, events: &[Event]) -> Result<Vec<(Event, Vec<f64>)>> {
        let mut out = Vec::with_capacity(events.len());
        run_backbone(
            self.graph(),
            &self.in_dims(),
            events,
            |v| v.feat.to_vec(),
            |l, m| self.convs[l].forward_real(m),
            |e, f| {
                out.push((*e, f));
                Ok(())
            },
        )?;
        Ok(out)
    }

    fn mlp(&self) -> Result<&Mlp> {
        match &self.head {
            Head::Classifier(m) => Ok(m),
            Head::Kws(_) => Err(Error::config("model_type", "expected a classifier model")),
        }
    }

    fn kws_head(&self) -> Result<&KwsHead> {
        match &self.head {
            Head::Kws(k) => Ok(k),
            Head::Classifier(_) => Err(Error::config("model_type", "expected a kws model")),
        }
    }

    pub fn pooled(&self, events: &[Event]) -> Result<Vec<f64>> {
        let mut acc = AvgAccumulator::new(self.config.feature_dim());
        run_backbone(
            self.graph(),
            &self.in_dims(),
            events,
            |v| v.feat.to_vec(),
            |l, m| self.convs[l].forward_real(m),
            |_, f| {
                acc.add(&f);
                Ok(())
            },
        )?;
        acc.finalize()
    }

    pub fn classify(&self, events: &[Event]) -> Result<Classification> {
        let logits = self.mlp()?.forward(&self.pooled(events)?)?;
        Ok(Classification::from_logits(logits))
    }

    /// Max-pooled window features covering `duration_us`.
    pub fn windows(&self, events: &[Event], duration_us: u32) -> Result<Vec<WindowFeature<f64>>> {
        let dt = self.config.delta_t_us;
        let mut pooler = WindowPooler::new(self.config.feature_dim(), dt, 0.0)?;
        let mut out = Vec::new();
        run_backbone(
            self.graph(),
            &self.in_dims(),
            events,
            |v| v.feat.to_vec(),
            |l, m| self.convs[l].forward_real(m),
            |e, f| {
                out.extend(pooler.push(e.t, &f));
                Ok(())
            },
        )?;
        out.extend(pooler.finish(num_windows(duration_us, dt)));
        Ok(out)
    }

    pub fn kws(&self, events: &[Event], duration_us: u32) -> Result<Vec<KwsOutput>> {
        self.kws_head()?.run(&self.windows(events, duration_us)?)
    }

    pub fn is_quantized(&self) -> bool {
        let convs = self.convs.iter().all(|c| c.quant.is_some());
        let head = match &self.head {
            Head::Classifier(m) => m.layers.iter().all(|l| l.quant.is_some()),
            Head::Kws(k) => {
                k.stem.layers.iter().all(|l| l.quant.is_some())
                    && k.gru.quant.is_some()
                    && k.cls.quant.is_some()
                    && k.conf.quant.is_some()
            }
        };
        convs && head
    }

    /// Folds batch norm into every conv layer.
    pub fn folded(&self) -> Self {
        Self {
            convs: self.convs.iter().map(ConvLayerParams::folded).collect(),
            ..self.clone()
        }
    }
}

/// Bit widths used by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u8,
    /// Optional per-conv-layer override.
    #[serde(default)]
    pub conv_bits: Vec<u8>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            conv_bits: Vec::new(),
        }
    }
}

/// Per-tensor ranges observed over one or more streams.
#[derive(Debug, Clone, Default)]
struct Ranges {
    conv: Vec<Calibration>,
    head: Vec<Calibration>,
}

impl Ranges {
    fn new(n_conv: usize, n_head: usize) -> Self {
        Self {
            conv: vec![Calibration::default(); n_conv],
            head: vec![Calibration::default(); n_head],
        }
    }

    fn merge(&mut self, other: &Ranges) {
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            a.merge(b);
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            a.merge(b);
        }
    }
}

/// A calibration input: events plus the duration that fixes the window count.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationSample<'a> {
    pub events: &'a [Event],
    pub duration_us: u32,
}

fn observe_sample(model: &Model, s: &CalibrationSample) -> Result<Ranges> {
    let n_head = match &model.head {
        Head::Classifier(m) => m.layers.len(),
        Head::Kws(k) => k.stem.layers.len() + 5,
    };
    let mut r = Ranges::new(model.convs.len(), n_head);
    let mut feats = Vec::with_capacity(s.events.len());
    let conv = std::cell::RefCell::new(std::mem::take(&mut r.conv));
    run_backbone(
        model.graph(),
        &model.in_dims(),
        s.events,
        |v| v.feat.to_vec(),
        |l, m| {
            let out = model.convs[l].forward_real(m)?;
            conv.borrow_mut()[l].observe(&out);
            Ok(out)
        },
        |e, f| {
            feats.push((e.t, f));
            Ok(())
        },
    )?;
    r.conv = conv.into_inner();
    match &model.head {
        Head::Classifier(m) => {
            let mut acc = AvgAccumulator::new(model.config.feature_dim());
            feats.iter().for_each(|(_, f)| acc.add(f));
            if acc.count == 0 {
                return Ok(r);
            }
            let acts = m.forward_trace(&acc.finalize()?)?;
            for (i, a) in acts.iter().skip(1).enumerate() {
                r.head[i].observe(a);
            }
        }
        Head::Kws(k) => {
            let dt = model.config.delta_t_us;
            let mut pooler = WindowPooler::new(model.config.feature_dim(), dt, 0.0)?;
            let mut windows = Vec::new();
            for (t, f) in &feats {
                windows.extend(pooler.push(*t, f));
            }
            windows.extend(pooler.finish(num_windows(s.duration_us, dt)));
            let mut st = k.initial_state();
            let ns = k.stem.layers.len();
            for w in &windows {
                let t = k.step_trace(w, &mut st)?;
                for (i, a) in t.stem.iter().skip(1).enumerate() {
                    r.head[i].observe(a);
                }
                r.head[ns].observe(&t.gru.a_z);
                r.head[ns + 1].observe(&t.gru.a_r);
                r.head[ns + 2].observe(&t.gru.a_h);
                r.head[ns + 3].observe(&t.cls_logits);
                r.head[ns + 4].observe(&[t.conf_logit]);
            }
        }
    }
    Ok(r)
}

/// Activation parameters for conv outputs; the range always reaches 1 so
/// positional deltas share the code space with the features they travel
/// alongside.
fn conv_output_params(c: &Calibration, bits: u8) -> QuantParams {
    QuantParams::activation(0.0, c.max.max(1.0), bits)
}

/// Folds batch norm, observes activation ranges over `samples` in real
/// arithmetic and attaches quantization parameters to every layer.
pub fn calibrate_and_fold(model: &Model, samples: &[CalibrationSample], qc: &QuantConfig, exec: Exec) -> Result<Model> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let folded = model.folded();
    let per_sample = exec.map(samples, |s| observe_sample(&folded, s));
    let mut ranges: Option<Ranges> = None;
    for r in per_sample {
        let r = r?;
        match &mut ranges {
            Some(acc) => acc.merge(&r),
            None => ranges = Some(r),
        }
    }
    let ranges = ranges.ok_or(Error::Empty("calibration set"))?;
    if ranges.conv.iter().any(|c| c.count == 0) {
        return Err(Error::Empty("calibration events"));
    }
    let mut out = folded;
    let bits_of = |l: usize| qc.conv_bits.get(l).copied().unwrap_or(qc.bits);
    let mut input = QuantParams::activation(0.0, 1.0, bits_of(0));
    for (l, conv) in out.convs.iter_mut().enumerate() {
        let output = conv_output_params(&ranges.conv[l], bits_of(l));
        conv.quantize(input, output, bits_of(l))?;
        input = output;
    }
    let bits = qc.bits;
    // Head tensors of a calibration set without events fall back to [0, 1].
    let head_params = |i: usize| -> Result<QuantParams> {
        Ok(ranges.head[i]
            .params(bits)
            .unwrap_or_else(|_| QuantParams::activation(0.0, 1.0, bits)))
    };
    match &mut out.head {
        Head::Classifier(m) => {
            for (i, l) in m.layers.iter_mut().enumerate() {
                let o = head_params(i)?;
                l.quantize(input, o, bits)?;
                input = o;
            }
        }
        Head::Kws(k) => {
            let ns = k.stem.layers.len();
            for (i, l) in k.stem.layers.iter_mut().enumerate() {
                let o = head_params(i)?;
                l.quantize(input, o, bits)?;
                input = o;
            }
            k.gru.quantize(
                input,
                [&ranges.head[ns], &ranges.head[ns + 1], &ranges.head[ns + 2]],
                bits,
            )?;
            let h = hidden_params();
            k.cls.quantize(h, ranges.head[ns + 3].params(8)?, bits)?;
            k.conf.quantize(h, ranges.head[ns + 4].params(8)?, bits)?;
        }
    }
    Ok(out)
}

enum IntHead {
    Classifier(IntMlp),
    Kws(IntKwsHead),
}

/// Integer-only executable form of a calibrated model.
pub struct IntModel {
    graph: GraphGenConfig,
    delta_t_us: u32,
    convs: Vec<IntConv>,
    head: IntHead,
}

impl IntModel {
    pub fn new(m: &Model) -> Result<Self> {
        m.validate()?;
        let convs = m
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| IntConv::new(c, &format!("conv.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let head = match &m.head {
            Head::Classifier(mlp) => IntHead::Classifier(IntMlp::new(mlp, "fc")?),
            Head::Kws(k) => IntHead::Kws(IntKwsHead::new(k)?),
        };
        Ok(Self {
            graph: m.config.graph,
            delta_t_us: m.config.delta_t_us,
            convs,
            head,
        })
    }

    fn in_dims(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.in_dim).collect()
    }

    pub fn feature_params(&self) -> QuantParams {
        self.convs.last().map(|c| c.q.output).expect("at least one conv")
    }

    pub fn backbone(&self, events: &[Event]) -> Result<Vec<(Event, Vec<i32>)>> {
        let q0 = self.convs[0].q.input;
        let mut out = Vec::with_capacity(events.len());
        run_backbone(
            &self.graph,
            &self.in_dims(),
            events,
            |v| v.feat.iter().map(|&f| q0.quantize(f)).collect(),
            |l, m| self.convs[l].forward(m),
            |e, f| {
                out.push((*e, f));
                Ok(())
            },
        )?;
        Ok(out)
    }

    /// The fake-quant backbone: real values on every layer's grid.
    pub fn backbone_fake(&self, events: &[Event]) -> Result<Vec<(Event, Vec<f64>)>> {
        let mut out = Vec::with_capacity(events.len());
        run_backbone(
            &self.graph,
            &self.in_dims(),
            events,
            |v| v.feat.to_vec(),
            |l, m| self.convs[l].forward_fake(m),
            |e, f| {
                out.push((*e, f));
                Ok(())
            },
        )?;
        Ok(out)
    }

    fn mlp(&self) -> Result<&IntMlp> {
        match &self.head {
            IntHead::Classifier(m) => Ok(m),
            IntHead::Kws(_) => Err(Error::config("model_type", "expected a classifier model")),
        }
    }

    pub fn pooled(&self, events: &[Event]) -> Result<Vec<i32>> {
        let mut acc = IntAvgAccumulator::new(self.convs.last().map_or(0, |c| c.out_dim));
        for (_, f) in self.backbone(events)? {
            acc.add(&f);
        }
        acc.finalize()
    }

    /// Logit codes of the integer classifier.
    pub fn logit_codes(&self, events: &[Event]) -> Result<Vec<i32>> {
        self.mlp()?.forward(&self.pooled(events)?)
    }

    /// Fake-quant logits (real values on the logit grid).
    pub fn logits_fake(&self, events: &[Event]) -> Result<Vec<f64>> {
        let fq = self.feature_params();
        let feats = self.backbone_fake(events)?;
        if feats.is_empty() {
            return Err(Error::EmptySample);
        }
        let dim = feats[0].1.len();
        let n = feats.len() as f64;
        let pooled: Vec<f64> = (0..dim)
            .map(|k| {
                let sum: f64 = feats.iter().map(|(_, f)| (f[k] / fq.scale).round()).sum();
                fq.scale * ((sum / n).round() - f64::from(fq.zero_point))
            })
            .collect();
        self.mlp()?.forward_fake(&pooled)
    }

    pub fn classify(&self, events: &[Event]) -> Result<Classification> {
        let m = self.mlp()?;
        let codes = m.forward(&self.pooled(events)?)?;
        let qp = m.output_params();
        Ok(Classification::from_logits(codes.iter().map(|&c| qp.dequantize(c)).collect()))
    }

    pub fn windows(&self, events: &[Event], duration_us: u32) -> Result<Vec<WindowFeature<i32>>> {
        let zp = self.feature_params().zero_point;
        let dim = self.convs.last().map_or(0, |c| c.out_dim);
        let mut pooler = WindowPooler::new(dim, self.delta_t_us, zp)?;
        let mut out = Vec::new();
        for (e, f) in self.backbone(events)? {
            out.extend(pooler.push(e.t, &f));
        }
        out.extend(pooler.finish(num_windows(duration_us, self.delta_t_us)));
        Ok(out)
    }

    pub fn kws(&self, events: &[Event], duration_us: u32) -> Result<Vec<KwsOutput>> {
        match &self.head {
            IntHead::Kws(k) => k.run(&self.windows(events, duration_us)?),
            IntHead::Classifier(_) => Err(Error::config("model_type", "expected a kws model")),
        }
    }
}
