//! JSON weights file.
//!
//! ```json
//! {
//!   "format": "evgraph-weights", "version": 1,
//!   "model_type": "classifier",
//!   "conv_dims": [...], "graph_gen": {...}, "head": {...},
//!   "layers": [
//!     {"name": "conv.0", "kind": "conv", "shape": [rows, cols],
//!      "weights": [...] | "weights_b64": "...",
//!      "bias": [...], "bn": {...} | null, "folded": false,
//!      "quant": {"input": {...}, "weight": {...}, "output": {...},
//!                "multiplier": m, "shift": s} | null}
//!   ]
//! }
//! ```
//!
//! Layer names: `conv.{i}`, `fc.{i}` (classifier), `stem.{i}`,
//! `gru.{z,r,h}.input` (`W`, no bias), `gru.{z,r,h}.recurrent` (`U` and the
//! gate bias), `cls`, `conf`. Weight matrices are row-major; `weights_b64`
//! packs them as little-endian `f64`.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::conv::{BatchNorm, ConvLayerParams};
use crate::error::{Error, Result};
use crate::graph::GraphGenConfig;
use crate::heads::{GateQuant, GruParams, GruQuant, KwsHead, Linear, Mlp};
use crate::model::{Head, Model, ModelConfig, ModelType};
use crate::quant::{LayerQuant, QuantParams, Requant};
use crate::tensor::Matrix;

pub const FORMAT: &str = "evgraph-weights";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
    GruInput,
    GruRecurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantRecord {
    pub input: QuantParams,
    pub weight: QuantParams,
    pub output: QuantParams,
    pub multiplier: i32,
    pub shift: i32,
}

impl From<LayerQuant> for QuantRecord {
    fn from(q: LayerQuant) -> Self {
        Self {
            input: q.input,
            weight: q.weight,
            output: q.output,
            multiplier: q.requant.multiplier,
            shift: q.requant.shift,
        }
    }
}

impl QuantRecord {
    fn to_layer_quant(self) -> LayerQuant {
        LayerQuant {
            input: self.input,
            weight: self.weight,
            output: self.output,
            requant: Requant {
                multiplier: self.multiplier,
                shift: self.shift,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_b64: Option<String>,
    #[serde(default)]
    pub bias: Vec<f64>,
    #[serde(default)]
    pub bn: Option<BatchNorm>,
    #[serde(default)]
    pub folded: bool,
    #[serde(default)]
    pub quant: Option<QuantRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadRecord {
    pub num_classes: usize,
    #[serde(default)]
    pub fc_dims: Vec<usize>,
    #[serde(default)]
    pub stem_dims: Option<[usize; 2]>,
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    pub delta_t_us: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub format: String,
    pub version: u32,
    pub model_type: ModelType,
    pub conv_dims: Vec<usize>,
    pub graph_gen: GraphGenConfig,
    pub head: HeadRecord,
    pub layers: Vec<LayerRecord>,
}

fn pack(data: &[f64]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn unpack(name: &str, s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Weights(format!("{name}: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Weights(format!("{name}: packed length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

struct Writer {
    base64: bool,
    layers: Vec<LayerRecord>,
}

impl Writer {
    fn push(&mut self, name: String, kind: LayerKind, w: &Matrix, bias: &[f64], bn: Option<&BatchNorm>, folded: bool, quant: Option<LayerQuant>) {
        let (weights, weights_b64) = if self.base64 {
            (None, Some(pack(&w.data)))
        } else {
            (Some(w.data.clone()), None)
        };
        self.layers.push(LayerRecord {
            name,
            kind,
            shape: [w.rows, w.cols],
            weights,
            weights_b64,
            bias: bias.to_vec(),
            bn: bn.cloned(),
            folded,
            quant: quant.map(QuantRecord::from),
        });
    }

    fn linear(&mut self, name: String, l: &Linear) {
        self.push(name, LayerKind::Linear, &l.w, &l.b, None, false, l.quant);
    }
}

pub fn to_weights_file(m: &Model, base64: bool) -> WeightsFile {
    let mut w = Writer {
        base64,
        layers: Vec::new(),
    };
    for (i, c) in m.convs.iter().enumerate() {
        let folded = c.bn.is_none() && c.quant.is_some();
        w.push(format!("conv.{i}"), LayerKind::Conv, &c.w, &c.b, c.bn.as_ref(), folded, c.quant);
    }
    let cfg = &m.config;
    match &m.head {
        Head::Classifier(mlp) => {
            for (i, l) in mlp.layers.iter().enumerate() {
                w.linear(format!("fc.{i}"), l);
            }
        }
        Head::Kws(k) => {
            for (i, l) in k.stem.layers.iter().enumerate() {
                w.linear(format!("stem.{i}"), l);
            }
            let g = &k.gru;
            let gq = g.quant;
            for (gate, wm, um, b, q) in [
                ("z", &g.w_z, &g.u_z, &g.b_z, gq.map(|q| q.z)),
                ("r", &g.w_r, &g.u_r, &g.b_r, gq.map(|q| q.r)),
                ("h", &g.w_h, &g.u_h, &g.b_h, gq.map(|q| q.h)),
            ] {
                w.push(format!("gru.{gate}.input"), LayerKind::GruInput, wm, &[], None, false, q.map(|q| q.input));
                w.push(format!("gru.{gate}.recurrent"), LayerKind::GruRecurrent, um, b, None, false, q.map(|q| q.recurrent));
            }
            w.linear("cls".into(), &k.cls);
            w.linear("conf".into(), &k.conf);
        }
    }
    WeightsFile {
        format: FORMAT.into(),
        version: VERSION,
        model_type: cfg.model_type,
        conv_dims: cfg.conv_dims.clone(),
        graph_gen: cfg.graph,
        head: HeadRecord {
            num_classes: cfg.num_classes,
            fc_dims: cfg.fc_dims.clone(),
            stem_dims: (cfg.model_type == ModelType::Kws).then_some(cfg.stem_dims),
            hidden_dim: (cfg.model_type == ModelType::Kws).then_some(cfg.hidden_dim),
            delta_t_us: cfg.delta_t_us,
        },
        layers: w.layers,
    }
}

struct Reader<'a> {
    layers: std::collections::HashMap<&'a str, &'a LayerRecord>,
}

impl<'a> Reader<'a> {
    fn get(&self, name: &str, kind: LayerKind, shape: [usize; 2]) -> Result<(&'a LayerRecord, Matrix)> {
        let r = self
            .layers
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing layer `{name}`")))?;
        if r.kind != kind {
            return Err(Error::Weights(format!("layer `{name}`: expected kind {kind:?}, got {:?}", r.kind)));
        }
        if r.shape != shape {
            return Err(Error::Weights(format!(
                "layer `{name}`: expected shape {shape:?}, got {:?}",
                r.shape
            )));
        }
        let data = match (&r.weights, &r.weights_b64) {
            (Some(w), None) => w.clone(),
            (None, Some(s)) => unpack(name, s)?,
            _ => return Err(Error::Weights(format!("layer `{name}`: give exactly one of weights, weights_b64"))),
        };
        if data.len() != shape[0] * shape[1] {
            return Err(Error::Weights(format!(
                "layer `{name}`: {} weights for shape {shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Weights(format!("layer `{name}`: non-finite weight")));
        }
        Ok((r, Matrix::from_vec(shape[0], shape[1], data)?))
    }

    fn linear(&self, name: &str, out: usize, inp: usize) -> Result<Linear> {
        let (r, w) = self.get(name, LayerKind::Linear, [out, inp])?;
        let mut l = Linear::new(w, r.bias.clone())?;
        l.quant = r.quant.map(QuantRecord::to_layer_quant);
        Ok(l)
    }
}

pub fn from_weights_file(f: &WeightsFile) -> Result<Model> {
    if f.format != FORMAT {
        return Err(Error::Weights(format!("unknown format `{}`", f.format)));
    }
    if f.version != VERSION {
        return Err(Error::Weights(format!("unsupported version {}", f.version)));
    }
    let mut config = match f.model_type {
        ModelType::Classifier => ModelConfig::classifier(&f.conv_dims, 0, f.head.num_classes),
        ModelType::Kws => ModelConfig::kws(&f.conv_dims, f.head.num_classes),
    };
    config.fc_dims = f.head.fc_dims.clone();
    if let Some(s) = f.head.stem_dims {
        config.stem_dims = s;
    }
    if let Some(h) = f.head.hidden_dim {
        config.hidden_dim = h;
    }
    config.graph = f.graph_gen;
    config.delta_t_us = f.head.delta_t_us;
    config.validate()?;

    let mut layers = std::collections::HashMap::new();
    for l in &f.layers {
        if layers.insert(l.name.as_str(), l).is_some() {
            return Err(Error::Weights(format!("duplicate layer `{}`", l.name)));
        }
    }
    let rd = Reader { layers };
    let convs = config
        .conv_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (inp, out))| {
            let name = format!("conv.{i}");
            let (r, w) = rd.get(&name, LayerKind::Conv, [out, inp + 2])?;
            if r.folded && r.bn.is_some() {
                return Err(Error::Weights(format!("layer `{name}`: folded layers carry no bn record")));
            }
            let mut c = ConvLayerParams::new(w, r.bias.clone(), r.bn.clone())?;
            c.quant = r.quant.map(QuantRecord::to_layer_quant);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let feat = config.feature_dim();
    let head = match config.model_type {
        ModelType::Classifier => {
            let mut dims = vec![feat];
            dims.extend(&config.fc_dims);
            dims.push(config.num_classes);
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, d)| rd.linear(&format!("fc.{i}"), d[1], d[0]))
                .collect::<Result<Vec<_>>>()?;
            Head::Classifier(Mlp::new(layers, false)?)
        }
        ModelType::Kws => {
            let [s0, s1] = config.stem_dims;
            let h = config.hidden_dim;
            let stem = Mlp::new(vec![rd.linear("stem.0", s0, feat)?, rd.linear("stem.1", s1, s0)?], true)?;
            let gate = |g: &str| -> Result<(Matrix, Matrix, Vec<f64>, Option<GateQuant>)> {
                let (ri, wi) = rd.get(&format!("gru.{g}.input"), LayerKind::GruInput, [h, s1])?;
                let (rr, wr) = rd.get(&format!("gru.{g}.recurrent"), LayerKind::GruRecurrent, [h, h])?;
                let q = match (ri.quant, rr.quant) {
                    (Some(a), Some(b)) => Some(GateQuant {
                        input: a.to_layer_quant(),
                        recurrent: b.to_layer_quant(),
                    }),
                    (None, None) => None,
                    _ => return Err(Error::Weights(format!("gru gate {g}: quant must be on both records or neither"))),
                };
                Ok((wi, wr, rr.bias.clone(), q))
            };
            let (w_z, u_z, b_z, qz) = gate("z")?;
            let (w_r, u_r, b_r, qr) = gate("r")?;
            let (w_h, u_h, b_h, qh) = gate("h")?;
            let quant = match (qz, qr, qh) {
                (Some(z), Some(r), Some(h)) => Some(GruQuant { z, r, h }),
                (None, None, None) => None,
                _ => return Err(Error::Weights("gru: quant must be present on all gates or none".into())),
            };
            let gru = GruParams {
                w_z,
                w_r,
                w_h,
                u_z,
                u_r,
                u_h,
                b_z,
                b_r,
                b_h,
                quant,
            };
            Head::Kws(KwsHead {
                stem,
                gru,
                cls: rd.linear("cls", config.num_classes, h)?,
                conf: rd.linear("conf", 1, h)?,
            })
        }
    };
    let m = Model { config, convs, head };
    m.validate()?;
    Ok(m)
}

pub fn to_json(m: &Model, base64: bool) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_weights_file(m, base64))?)
}

pub fn from_json(s: &str) -> Result<Model> {
    let f: WeightsFile = serde_json::from_str(s)?;
    from_weights_file(&f)
}

pub fn save(path: &Path, m: &Model, base64: bool) -> Result<()> {
    std::fs::write(path, to_json(m, base64)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_json(&std::fs::read_to_string(path)?)
}
