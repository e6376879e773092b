//! Prediction heads: the MLP classifier and the streaming keyword-spotting
//! head (two-layer STEM, GRU, CLS and CONF outputs).
//!
//! The integer KWS head follows a six-state schedule per window:
//!
//! | state | work |
//! |-------|------|
//! | 0 | `U_z·h + b_z`, `U_r·h + b_r` for the coming window (precomputed) |
//! | 1 | STEM layer 1 |
//! | 2 | STEM layer 2 |
//! | 3 | `W_{z,r,h}·x`, gates via LUT, `U_h·(r ⊙ h)`, candidate and update |
//! | 4 | CLS logits |
//! | 5 | CONF logit and sigmoid LUT |
//!
//! `U_h·(r ⊙ h)` cannot be precomputed in state 0 because `r` depends on the
//! current input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::WindowFeature;
use crate::quant::{div_round_away, Calibration, LayerQuant, Lut, QuantParams};
use crate::tensor::{sigmoid, softmax, Matrix};

/// A dense affine layer `y = W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub quant: Option<LayerQuant>,
}

impl Linear {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows {
            return Err(Error::Dimension {
                context: "linear bias",
                expected: w.rows,
                got: b.len(),
            });
        }
        Ok(Self { w, b, quant: None })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
            quant: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("linear input", self.in_dim(), x.len())?;
        let mut y = self.w.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.b) {
            *v += b;
        }
        Ok(y)
    }

    pub fn quantize(&mut self, input: QuantParams, output: QuantParams, weight_bits: u8) -> Result<()> {
        let weight = QuantParams::weights(max_abs(&self.w.data), weight_bits);
        self.quant = Some(LayerQuant::new(input, weight, output)?);
        Ok(())
    }
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Integer form of a quantized [`Linear`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<i32>,
    pub b: Vec<i64>,
    pub q: LayerQuant,
}

impl IntLinear {
    pub fn new(l: &Linear, name: &str) -> Result<Self> {
        let q = l.quant.ok_or_else(|| Error::MissingQuant(name.to_string()))?;
        Self::from_parts(&l.w, &l.b, q)
    }

    fn from_parts(w: &Matrix, b: &[f64], q: LayerQuant) -> Result<Self> {
        Ok(Self {
            in_dim: w.cols,
            out_dim: w.rows,
            w: q.quantize_weights(&w.data),
            b: q.quantize_bias(b),
            q,
        })
    }

    /// Accumulators over zero-point-corrected input offsets.
    pub fn acc_offsets(&self, offsets: &[i64]) -> Vec<i64> {
        (0..self.out_dim)
            .map(|k| {
                let row = &self.w[k * self.in_dim..(k + 1) * self.in_dim];
                row.iter().zip(offsets).fold(self.b[k], |a, (&w, &x)| a + i64::from(w) * x)
            })
            .collect()
    }

    pub fn acc(&self, x: &[i32]) -> Result<Vec<i64>> {
        check_len("linear input", self.in_dim, x.len())?;
        let zp = self.q.input.zero_point;
        let off: Vec<i64> = x.iter().map(|&v| i64::from(v - zp)).collect();
        Ok(self.acc_offsets(&off))
    }

    /// Output codes, with ReLU as `max(code, zp_out)` when `relu`.
    pub fn forward(&self, x: &[i32], relu: bool) -> Result<Vec<i32>> {
        let out = &self.q.output;
        let floor = if relu { out.zero_point } else { out.code_min() };
        Ok(self
            .acc(x)?
            .into_iter()
            .map(|a| out.clamp(self.q.requant.apply(a) + i64::from(out.zero_point)).max(floor))
            .collect())
    }

    /// Fake-quant forward: real values on the input grid in, real values on
    /// the output grid out.
    pub fn forward_fake(&self, x: &[f64], relu: bool) -> Result<Vec<f64>> {
        check_len("linear input", self.in_dim, x.len())?;
        let inp = &self.q.input;
        let out = &self.q.output;
        let zp_in = f64::from(inp.zero_point);
        let off: Vec<f64> = x.iter().map(|&v| f64::from(inp.quantize(v)) - zp_in).collect();
        let zp = f64::from(out.zero_point);
        let lo = if relu { zp } else { f64::from(out.code_min()) };
        let hi = f64::from(out.code_max());
        Ok((0..self.out_dim)
            .map(|k| {
                let row = &self.w[k * self.in_dim..(k + 1) * self.in_dim];
                let acc = row.iter().zip(&off).fold(self.b[k] as f64, |a, (&w, &x)| a + f64::from(w) * x);
                let code = (self.q.requant.apply_f64(acc) + zp).clamp(lo, hi);
                out.scale * (code - zp)
            })
            .collect())
    }
}

/// Stack of linear layers with ReLU between them, and optionally after the
/// last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, relu_last: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("mlp layers"));
        }
        for pair in layers.windows(2) {
            check_len("mlp layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers, relu_last })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    fn relu_after(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.pop().unwrap_or_default())
    }

    /// Activations `[x, a_1, …, a_L]`, where `a_i` is post-ReLU when a ReLU
    /// follows layer `i`.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut acts = vec![x.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = l.forward(acts.last().map_or(x, |v| v))?;
            if self.relu_after(i) {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        Ok(acts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntMlp {
    pub layers: Vec<IntLinear>,
    pub relu_last: bool,
}

impl IntMlp {
    pub fn new(m: &Mlp, name: &str) -> Result<Self> {
        let layers = m
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| IntLinear::new(l, &format!("{name}.{i}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            relu_last: m.relu_last,
        })
    }

    fn relu_after(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &[i32]) -> Result<Vec<i32>> {
        let mut cur = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.forward(&cur, self.relu_after(i))?;
        }
        Ok(cur)
    }

    pub fn forward_fake(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cur = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.forward_fake(&cur, self.relu_after(i))?;
        }
        Ok(cur)
    }

    pub fn output_params(&self) -> QuantParams {
        self.layers.last().map(|l| l.q.output).expect("non-empty mlp")
    }
}

/// Class probabilities from a pooled feature.
pub fn classify(pooled: &[f64], mlp: &Mlp) -> Result<Vec<f64>> {
    Ok(softmax(&mlp.forward(pooled)?))
}

/// Integer classification: logits in codes, softmax on dequantized logits.
pub fn classify_int(pooled: &[i32], mlp: &IntMlp) -> Result<Vec<f64>> {
    let codes = mlp.forward(pooled)?;
    let qp = mlp.output_params();
    let logits: Vec<f64> = codes.iter().map(|&c| qp.dequantize(c)).collect();
    Ok(softmax(&logits))
}

/// GRU hidden-state codes: `h ∈ [−1, 1]` at scale 1/127 around 128.
pub fn hidden_params() -> QuantParams {
    QuantParams {
        bits: 8,
        scale: 1.0 / 127.0,
        zero_point: 128,
        signed: false,
    }
}

/// Gate codes: `σ ∈ [0, 1]` at scale 1/255.
pub fn gate_params() -> QuantParams {
    QuantParams {
        bits: 8,
        scale: 1.0 / 255.0,
        zero_point: 0,
        signed: false,
    }
}

/// Quantization of one gate: the input and recurrent products each
/// requantize into the gate's pre-activation codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateQuant {
    pub input: LayerQuant,
    pub recurrent: LayerQuant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GruQuant {
    pub z: GateQuant,
    pub r: GateQuant,
    pub h: GateQuant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
    pub quant: Option<GruQuant>,
}

/// Intermediate values of one real GRU step.
#[derive(Debug, Clone, PartialEq)]
pub struct GruTrace {
    pub a_z: Vec<f64>,
    pub a_r: Vec<f64>,
    pub a_h: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    /// `r ⊙ h_prev`.
    pub rh: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub h: Vec<f64>,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = Matrix::zeros(hidden_dim, input_dim);
        let u = Matrix::zeros(hidden_dim, hidden_dim);
        Self {
            w_z: w.clone(),
            w_r: w.clone(),
            w_h: w,
            u_z: u.clone(),
            u_r: u.clone(),
            u_h: u,
            b_z: vec![0.0; hidden_dim],
            b_r: vec![0.0; hidden_dim],
            b_h: vec![0.0; hidden_dim],
            quant: None,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.rows
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols
    }

    pub fn validate(&self) -> Result<()> {
        let (h, n) = (self.hidden_dim(), self.input_dim());
        for w in [&self.w_z, &self.w_r, &self.w_h] {
            w.check_shape(h, n, "gru input weights")?;
        }
        for u in [&self.u_z, &self.u_r, &self.u_h] {
            u.check_shape(h, h, "gru recurrent weights")?;
        }
        for b in [&self.b_z, &self.b_r, &self.b_h] {
            check_len("gru bias", h, b.len())?;
        }
        Ok(())
    }

    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        Ok(self.step_trace(x, h_prev, None)?.h)
    }

    /// One update. `z_override` replaces the update gate (for testing the
    /// gate algebra).
    pub fn step_trace(&self, x: &[f64], h_prev: &[f64], z_override: Option<&[f64]>) -> Result<GruTrace> {
        check_len("gru input", self.input_dim(), x.len())?;
        check_len("gru state", self.hidden_dim(), h_prev.len())?;
        let affine = |w: &Matrix, u: &Matrix, b: &[f64], hv: &[f64]| -> Vec<f64> {
            let wx = w.matvec(x);
            let uh = u.matvec(hv);
            wx.iter().zip(&uh).zip(b).map(|((a, c), d)| a + c + d).collect()
        };
        let a_z = affine(&self.w_z, &self.u_z, &self.b_z, h_prev);
        let a_r = affine(&self.w_r, &self.u_r, &self.b_r, h_prev);
        let z: Vec<f64> = match z_override {
            Some(z) => {
                check_len("gru gate override", self.hidden_dim(), z.len())?;
                z.to_vec()
            }
            None => a_z.iter().map(|&a| sigmoid(a)).collect(),
        };
        let r: Vec<f64> = a_r.iter().map(|&a| sigmoid(a)).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let a_h = affine(&self.w_h, &self.u_h, &self.b_h, &rh);
        let h_tilde: Vec<f64> = a_h.iter().map(|a| a.tanh()).collect();
        let h = (0..h_prev.len())
            .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * h_tilde[k])
            .collect();
        Ok(GruTrace {
            a_z,
            a_r,
            a_h,
            z,
            r,
            rh,
            h_tilde,
            h,
        })
    }

    /// Attaches quantization parameters from calibrated pre-activation
    /// ranges; `x` describes the input codes.
    pub fn quantize(&mut self, x: QuantParams, cal: [&Calibration; 3], weight_bits: u8) -> Result<()> {
        let hq = hidden_params();
        let gate = |w: &Matrix, u: &Matrix, c: &Calibration| -> Result<GateQuant> {
            let pre = c.params(8)?;
            Ok(GateQuant {
                input: LayerQuant::new(x, QuantParams::weights(max_abs(&w.data), weight_bits), pre)?,
                recurrent: LayerQuant::new(hq, QuantParams::weights(max_abs(&u.data), weight_bits), pre)?,
            })
        };
        self.quant = Some(GruQuant {
            z: gate(&self.w_z, &self.u_z, cal[0])?,
            r: gate(&self.w_r, &self.u_r, cal[1])?,
            h: gate(&self.w_h, &self.u_h, cal[2])?,
        });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct IntGate {
    input: IntLinear,
    recurrent: IntLinear,
    lut: Lut,
}

impl IntGate {
    fn new(w: &Matrix, u: &Matrix, b: &[f64], q: GateQuant, f: fn(f64) -> f64, out: &QuantParams) -> Result<Self> {
        Ok(Self {
            input: IntLinear::from_parts(w, &vec![0.0; w.rows], q.input)?,
            recurrent: IntLinear::from_parts(u, b, q.recurrent)?,
            lut: Lut::build(f, &q.input.output, out),
        })
    }

    fn pre(&self) -> &QuantParams {
        &self.input.q.output
    }

    /// Partial pre-activation offsets from the recurrent product.
    fn recurrent_partial(&self, h_off: &[i64]) -> Vec<i64> {
        let rq = &self.recurrent.q.requant;
        self.recurrent.acc_offsets(h_off).into_iter().map(|a| rq.apply(a)).collect()
    }

    /// Gate output codes from input codes and the recurrent partial.
    fn activate(&self, x: &[i32], partial: &[i64]) -> Result<Vec<i32>> {
        let pre = self.pre();
        let rq = &self.input.q.requant;
        Ok(self
            .input
            .acc(x)?
            .into_iter()
            .zip(partial)
            .map(|(a, &p)| {
                let code = pre.clamp(i64::from(pre.zero_point) + rq.apply(a) + p);
                self.lut.lookup(code, pre)
            })
            .collect())
    }
}

/// Integer GRU: 8-bit hidden codes, LUT activations.
#[derive(Debug, Clone, PartialEq)]
pub struct IntGru {
    z: IntGate,
    r: IntGate,
    h: IntGate,
    hidden: usize,
}

/// Integer recurrent state carried between windows.
#[derive(Debug, Clone, PartialEq)]
pub struct IntGruState {
    pub h: Vec<i32>,
    /// `U_z·h + b_z` and `U_r·h + b_r` as pre-activation offsets.
    pub partial_z: Vec<i64>,
    pub partial_r: Vec<i64>,
}

impl IntGru {
    pub fn new(g: &GruParams, name: &str) -> Result<Self> {
        g.validate()?;
        let q = g.quant.ok_or_else(|| Error::MissingQuant(name.to_string()))?;
        let gp = gate_params();
        let hp = hidden_params();
        Ok(Self {
            z: IntGate::new(&g.w_z, &g.u_z, &g.b_z, q.z, sigmoid, &gp)?,
            r: IntGate::new(&g.w_r, &g.u_r, &g.b_r, q.r, sigmoid, &gp)?,
            h: IntGate::new(&g.w_h, &g.u_h, &g.b_h, q.h, f64::tanh, &hp)?,
            hidden: g.hidden_dim(),
        })
    }

    /// State 0: precompute the recurrent partials for `h`.
    pub fn prepare(&self, h: Vec<i32>) -> IntGruState {
        let off: Vec<i64> = h.iter().map(|&v| i64::from(v - 128)).collect();
        IntGruState {
            partial_z: self.z.recurrent_partial(&off),
            partial_r: self.r.recurrent_partial(&off),
            h,
        }
    }

    pub fn initial_state(&self) -> IntGruState {
        self.prepare(vec![128; self.hidden])
    }

    /// State 3: gates, candidate and the new hidden codes.
    pub fn update(&self, x: &[i32], st: &IntGruState) -> Result<Vec<i32>> {
        let z = self.z.activate(x, &st.partial_z)?;
        let r = self.r.activate(x, &st.partial_r)?;
        let rh: Vec<i64> = r
            .iter()
            .zip(&st.h)
            .map(|(&r, &h)| div_round_away(i64::from(r) * i64::from(h - 128), 255))
            .collect();
        let partial_h = self.h.recurrent_partial(&rh);
        let ht = self.h.activate(x, &partial_h)?;
        Ok((0..self.hidden)
            .map(|k| {
                let zk = i64::from(z[k]);
                let mix = (255 - zk) * i64::from(st.h[k] - 128) + zk * i64::from(ht[k] - 128);
                (div_round_away(mix, 255) + 128).clamp(0, 255) as i32
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwsOutput {
    pub window_index: usize,
    pub class_scores: Vec<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KwsHead {
    pub stem: Mlp,
    pub gru: GruParams,
    pub cls: Linear,
    pub conf: Linear,
}

/// Real-mode recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct KwsState {
    pub next_window: usize,
    pub h: Vec<f64>,
}

/// Intermediate values of one real KWS step.
#[derive(Debug, Clone, PartialEq)]
pub struct KwsStepTrace {
    pub stem: Vec<Vec<f64>>,
    pub gru: GruTrace,
    pub cls_logits: Vec<f64>,
    pub conf_logit: f64,
    pub output: KwsOutput,
}

impl KwsHead {
    pub fn validate(&self) -> Result<()> {
        self.gru.validate()?;
        check_len("kws stem to gru", self.stem.out_dim(), self.gru.input_dim())?;
        check_len("kws cls input", self.gru.hidden_dim(), self.cls.in_dim())?;
        check_len("kws conf input", self.gru.hidden_dim(), self.conf.in_dim())?;
        check_len("kws conf output", 1, self.conf.out_dim())?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_dim()
    }

    pub fn initial_state(&self) -> KwsState {
        KwsState {
            next_window: 0,
            h: vec![0.0; self.gru.hidden_dim()],
        }
    }

    pub fn step(&self, f: &WindowFeature<f64>, st: &mut KwsState) -> Result<KwsOutput> {
        Ok(self.step_trace(f, st)?.output)
    }

    pub fn step_trace(&self, f: &WindowFeature<f64>, st: &mut KwsState) -> Result<KwsStepTrace> {
        if f.window_index != st.next_window {
            return Err(Error::WindowOrder {
                expected: st.next_window,
                got: f.window_index,
            });
        }
        let stem = self.stem.forward_trace(&f.feat)?;
        let x = stem.last().map_or(&f.feat, |v| v);
        let gru = self.gru.step_trace(x, &st.h, None)?;
        let cls_logits = self.cls.forward(&gru.h)?;
        let conf_logit = self.conf.forward(&gru.h)?[0];
        let output = KwsOutput {
            window_index: f.window_index,
            class_scores: softmax(&cls_logits),
            confidence: sigmoid(conf_logit),
        };
        st.h = gru.h.clone();
        st.next_window += 1;
        Ok(KwsStepTrace {
            stem,
            gru,
            cls_logits,
            conf_logit,
            output,
        })
    }

    pub fn run(&self, windows: &[WindowFeature<f64>]) -> Result<Vec<KwsOutput>> {
        let mut st = self.initial_state();
        windows.iter().map(|w| self.step(w, &mut st)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntKwsHead {
    pub stem: IntMlp,
    pub gru: IntGru,
    pub cls: IntLinear,
    pub conf: IntLinear,
    conf_lut: Lut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntKwsState {
    pub next_window: usize,
    pub gru: IntGruState,
}

impl IntKwsHead {
    pub fn new(h: &KwsHead) -> Result<Self> {
        h.validate()?;
        let conf = IntLinear::new(&h.conf, "conf")?;
        let conf_lut = Lut::build(sigmoid, &conf.q.output, &gate_params());
        Ok(Self {
            stem: IntMlp::new(&h.stem, "stem")?,
            gru: IntGru::new(&h.gru, "gru")?,
            cls: IntLinear::new(&h.cls, "cls")?,
            conf,
            conf_lut,
        })
    }

    pub fn initial_state(&self) -> IntKwsState {
        IntKwsState {
            next_window: 0,
            gru: self.gru.initial_state(),
        }
    }

    pub fn step(&self, f: &WindowFeature<i32>, st: &mut IntKwsState) -> Result<KwsOutput> {
        if f.window_index != st.next_window {
            return Err(Error::WindowOrder {
                expected: st.next_window,
                got: f.window_index,
            });
        }
        let x = self.stem.forward(&f.feat)?;
        let h = self.gru.update(&x, &st.gru)?;
        let cls = self.cls.forward(&h, false)?;
        let cq = self.cls.q.output;
        let logits: Vec<f64> = cls.iter().map(|&c| cq.dequantize(c)).collect();
        let conf_code = self.conf.forward(&h, false)?[0];
        let conf = self.conf_lut.lookup(conf_code, &self.conf.q.output);
        st.gru = self.gru.prepare(h);
        st.next_window += 1;
        Ok(KwsOutput {
            window_index: f.window_index,
            class_scores: softmax(&logits),
            confidence: gate_params().dequantize(conf),
        })
    }

    pub fn run(&self, windows: &[WindowFeature<i32>]) -> Result<Vec<KwsOutput>> {
        let mut st = self.initial_state();
        windows.iter().map(|w| self.step(w, &mut st)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadCycleConfig {
    /// Vector multiplication units working on separate rows.
    pub lanes: usize,
    /// Elements each unit consumes per cycle.
    pub vec_width: usize,
    /// Fixed cost per state (LUT reads, Hadamard products, control).
    pub overhead_per_state: u64,
}

impl Default for HeadCycleConfig {
    fn default() -> Self {
        Self {
            lanes: 2,
            vec_width: 72,
            overhead_per_state: 16,
        }
    }
}

/// Matrix products `(rows, cols)` per state of the KWS schedule.
pub fn kws_head_schedule(feat_dim: usize, stem: [usize; 2], hidden: usize, classes: usize) -> Vec<Vec<(usize, usize)>> {
    vec![
        vec![(2 * hidden, hidden)],
        vec![(stem[0], feat_dim)],
        vec![(stem[1], stem[0])],
        vec![(3 * hidden, stem[1]), (hidden, hidden)],
        vec![(classes, hidden)],
        vec![(1, hidden)],
    ]
}

/// Cycles for one pass through a state schedule.
pub fn head_cycles(states: &[Vec<(usize, usize)>], cfg: &HeadCycleConfig) -> u64 {
    let lanes = cfg.lanes.max(1) as u64;
    let width = cfg.vec_width.max(1) as u64;
    states
        .iter()
        .map(|products| {
            cfg.overhead_per_state
                + products
                    .iter()
                    .map(|&(r, c)| (r as u64).div_ceil(lanes) * (c as u64).div_ceil(width))
                    .sum::<u64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-s..s)).collect()).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-s..s)).collect()
    }

    fn rand_gru(rng: &mut ChaCha8Rng, n: usize, h: usize) -> GruParams {
        GruParams {
            w_z: rand_matrix(rng, h, n, 0.5),
            w_r: rand_matrix(rng, h, n, 0.5),
            w_h: rand_matrix(rng, h, n, 0.5),
            u_z: rand_matrix(rng, h, h, 0.5),
            u_r: rand_matrix(rng, h, h, 0.5),
            u_h: rand_matrix(rng, h, h, 0.5),
            b_z: rand_vec(rng, h, 0.2),
            b_r: rand_vec(rng, h, 0.2),
            b_h: rand_vec(rng, h, 0.2),
            quant: None,
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mlp = Mlp::new(vec![Linear::zeros(8, 4), Linear::zeros(10, 8)], false).unwrap();
        let p = classify(&[1.0, 2.0, 3.0, 4.0], &mlp).unwrap();
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn hand_classifier() {
        // Identity first layer, then logits (x0 − x1, 2·x1).
        // x = (1, 0.5): hidden (1, 0.5), logits (0.5, 1.0),
        // p0 = 1 / (1 + e^0.5) = 0.3775406687981454
        let l1 = Linear::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        let l2 = Linear::new(Matrix::from_vec(2, 2, vec![1., -1., 0., 2.]).unwrap(), vec![0.0; 2]).unwrap();
        let p = classify(&[1.0, 0.5], &Mlp::new(vec![l1, l2], false).unwrap()).unwrap();
        assert!((p[0] - 0.3775406687981454).abs() < 1e-15);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mlp_dimension_mismatch() {
        assert!(Mlp::new(vec![Linear::zeros(8, 4), Linear::zeros(2, 7)], false).is_err());
        let mlp = Mlp::new(vec![Linear::zeros(8, 4)], false).unwrap();
        assert!(mlp.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let g = GruParams::zeros(3, 4);
        let h = [0.8, -0.4, 0.2, 0.0];
        let out = g.step(&[1.0, 2.0, 3.0], &h).unwrap();
        for (o, v) in out.iter().zip(&h) {
            assert!((o - 0.5 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn injected_update_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = rand_gru(&mut rng, 3, 4);
        let x = rand_vec(&mut rng, 3, 1.0);
        let h = rand_vec(&mut rng, 4, 0.9);
        let keep = g.step_trace(&x, &h, Some(&[0.0; 4])).unwrap();
        assert_eq!(keep.h, h);
        let take = g.step_trace(&x, &h, Some(&[1.0; 4])).unwrap();
        assert_eq!(take.h, take.h_tilde);
    }

    #[test]
    fn gru_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = rand_gru(&mut rng, 5, 6);
        let mut h = vec![0.0; 6];
        for _ in 0..500 {
            h = g.step(&rand_vec(&mut rng, 5, 10.0), &h).unwrap();
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    fn zero_head(feat: usize, hidden: usize, classes: usize) -> KwsHead {
        KwsHead {
            stem: Mlp::new(vec![Linear::zeros(hidden, feat), Linear::zeros(hidden, hidden)], true).unwrap(),
            gru: GruParams::zeros(hidden, hidden),
            cls: Linear::zeros(classes, hidden),
            conf: Linear::zeros(1, hidden),
        }
    }

    #[test]
    fn zero_kws_head_first_window() {
        let head = zero_head(4, 6, 5);
        let mut st = head.initial_state();
        let w = WindowFeature {
            window_index: 0,
            feat: vec![0.0; 4],
            delta_t_us: 10_000,
        };
        let out = head.step(&w, &mut st).unwrap();
        assert!(out.class_scores.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(out.confidence, 0.5);
    }

    #[test]
    fn out_of_order_window_is_rejected() {
        let head = zero_head(4, 6, 5);
        let mut st = head.initial_state();
        let w = WindowFeature {
            window_index: 1,
            feat: vec![0.0; 4],
            delta_t_us: 10_000,
        };
        assert!(matches!(head.step(&w, &mut st), Err(Error::WindowOrder { expected: 0, got: 1 })));
    }

    #[test]
    fn two_steps_match_offline_recurrences() {
        // 2-dim everything; the oracle re-evaluates the recurrences by hand.
        let m = |v: [f64; 4]| Matrix::from_vec(2, 2, v.to_vec()).unwrap();
        let head = KwsHead {
            stem: Mlp::new(
                vec![
                    Linear::new(m([1.0, 0.0, 0.0, 1.0]), vec![0.0, 0.0]).unwrap(),
                    Linear::new(m([0.5, 0.5, -0.5, 1.0]), vec![0.1, 0.0]).unwrap(),
                ],
                true,
            )
            .unwrap(),
            gru: GruParams {
                w_z: m([0.3, -0.2, 0.1, 0.4]),
                w_r: m([-0.1, 0.2, 0.3, 0.0]),
                w_h: m([0.7, 0.1, -0.3, 0.5]),
                u_z: m([0.2, 0.0, 0.0, 0.2]),
                u_r: m([0.1, -0.1, 0.1, 0.1]),
                u_h: m([0.5, -0.5, 0.25, 0.5]),
                b_z: vec![0.0, 0.1],
                b_r: vec![0.05, 0.0],
                b_h: vec![-0.1, 0.1],
                quant: None,
            },
            cls: Linear::new(m([1.0, -1.0, 0.5, 0.5]), vec![0.0, 0.2]).unwrap(),
            conf: Linear::new(Matrix::from_vec(1, 2, vec![2.0, -1.0]).unwrap(), vec![0.1]).unwrap(),
        };
        let feats = [vec![0.6, 0.2], vec![0.1, 0.9]];
        let windows: Vec<_> = feats
            .iter()
            .enumerate()
            .map(|(i, f)| WindowFeature {
                window_index: i,
                feat: f.clone(),
                delta_t_us: 10_000,
            })
            .collect();
        let outs = head.run(&windows).unwrap();

        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let mv = |w: [f64; 4], x: [f64; 2]| [w[0] * x[0] + w[1] * x[1], w[2] * x[0] + w[3] * x[1]];
        let mut h = [0.0, 0.0];
        for (i, f) in feats.iter().enumerate() {
            let s1 = [f[0].max(0.0), f[1].max(0.0)];
            let s2 = mv([0.5, 0.5, -0.5, 1.0], s1);
            let x = [(s2[0] + 0.1).max(0.0), s2[1].max(0.0)];
            let (wz, uz) = (mv([0.3, -0.2, 0.1, 0.4], x), mv([0.2, 0.0, 0.0, 0.2], h));
            let z = [sig(wz[0] + uz[0]), sig(wz[1] + uz[1] + 0.1)];
            let (wr, ur) = (mv([-0.1, 0.2, 0.3, 0.0], x), mv([0.1, -0.1, 0.1, 0.1], h));
            let r = [sig(wr[0] + ur[0] + 0.05), sig(wr[1] + ur[1])];
            let wh = mv([0.7, 0.1, -0.3, 0.5], x);
            let uh = mv([0.5, -0.5, 0.25, 0.5], [r[0] * h[0], r[1] * h[1]]);
            let ht = [(wh[0] + uh[0] - 0.1).tanh(), (wh[1] + uh[1] + 0.1).tanh()];
            h = [(1.0 - z[0]) * h[0] + z[0] * ht[0], (1.0 - z[1]) * h[1] + z[1] * ht[1]];
            let l = mv([1.0, -1.0, 0.5, 0.5], h);
            let (l0, l1) = (l[0], l[1] + 0.2);
            let p0 = 1.0 / (1.0 + (l1 - l0).exp());
            let conf = sig(2.0 * h[0] - h[1] + 0.1);
            assert!((outs[i].class_scores[0] - p0).abs() < 1e-12);
            assert!((outs[i].confidence - conf).abs() < 1e-12);
            assert_eq!(outs[i].window_index, i);
        }
    }

    #[test]
    fn int_linear_fake_path_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Linear::new(rand_matrix(&mut rng, 12, 9, 1.0), rand_vec(&mut rng, 12, 0.3)).unwrap();
        l.quantize(QuantParams::activation(0.0, 2.0, 8), QuantParams::activation(-4.0, 4.0, 8), 8)
            .unwrap();
        let il = IntLinear::new(&l, "fc").unwrap();
        for _ in 0..1000 {
            let codes: Vec<i32> = (0..9).map(|_| rng.random_range(0..256)).collect();
            let real: Vec<f64> = codes.iter().map(|&c| il.q.input.dequantize(c)).collect();
            for relu in [false, true] {
                let int = il.forward(&codes, relu).unwrap();
                let fake = il.forward_fake(&real, relu).unwrap();
                let mapped: Vec<i32> = fake.iter().map(|&v| il.q.output.quantize(v)).collect();
                assert_eq!(int, mapped);
            }
        }
    }

    #[test]
    fn integer_gru_tracks_real_gru() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, hd) = (6, 8);
        let mut g = rand_gru(&mut rng, n, hd);
        let xs: Vec<Vec<f64>> = (0..300).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let mut cal = [Calibration::default(), Calibration::default(), Calibration::default()];
        let mut h = vec![0.0; hd];
        for x in &xs {
            let t = g.step_trace(x, &h, None).unwrap();
            cal[0].observe(&t.a_z);
            cal[1].observe(&t.a_r);
            cal[2].observe(&t.a_h);
            h = t.h;
        }
        let xq = QuantParams::activation(0.0, 1.0, 8);
        g.quantize(xq, [&cal[0], &cal[1], &cal[2]], 8).unwrap();
        let ig = IntGru::new(&g, "gru").unwrap();
        let mut st = ig.initial_state();
        let mut h = vec![0.0; hd];
        let hp = hidden_params();
        let mut worst = 0.0f64;
        for x in &xs {
            h = g.step(x, &h).unwrap();
            let codes: Vec<i32> = x.iter().map(|&v| xq.quantize(v)).collect();
            let hn = ig.update(&codes, &st).unwrap();
            st = ig.prepare(hn);
            for (a, &c) in h.iter().zip(&st.h) {
                worst = worst.max((a - hp.dequantize(c)).abs());
            }
        }
        assert!(worst < 0.1, "worst hidden deviation {worst}");
    }

    #[test]
    fn head_cycle_examples() {
        let ones = vec![vec![(1, 1)]; 6];
        let cfg = HeadCycleConfig {
            lanes: 1,
            vec_width: 1,
            overhead_per_state: 0,
        };
        assert_eq!(head_cycles(&ones, &cfg), 6);
        let kws = kws_head_schedule(72, [72, 72], 72, 20);
        assert_eq!(head_cycles(&kws, &HeadCycleConfig::default()), 395);
    }

    #[test]
    fn more_lanes_means_fewer_cycles() {
        let kws = kws_head_schedule(72, [72, 72], 72, 20);
        let mut prev = u64::MAX;
        for lanes in [1, 2, 4, 8] {
            let c = head_cycles(
                &kws,
                &HeadCycleConfig {
                    lanes,
                    ..Default::default()
                },
            );
            assert!(c < prev);
            prev = c;
        }
    }
}
