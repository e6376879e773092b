//! PointNet-style graph convolution.
//!
//! For a vertex `i` with neighbours `j` (plus a self-loop), every candidate
//! message is the affine map of `[x_j ‖ PN(p_j − p_i)]`, optionally followed
//! by batch norm; the layer output is the ReLU of the featurewise max over
//! candidates. Three execution paths share one parameter record:
//!
//! * real: `f64`, BN applied explicitly or folded;
//! * integer: 8-bit (or wider) codes, `i64` accumulators, fixed-point
//!   requantization;
//! * fake-quant: the integer computation simulated in `f64` on real values
//!   that live on the quantization grid. Its outputs map back to exactly the
//!   codes the integer path produces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphGenConfig;
use crate::quant::{LayerQuant, QuantParams};
use crate::tensor::Matrix;

/// Normalizes a raw `(d_ch, d_t)` delta (neighbour minus vertex) into
/// `(p_ch, p_t) ∈ [0,1]²`.
pub fn positional_norm(d_ch: i64, d_t: i64, cfg: &GraphGenConfig) -> Result<[f64; 2]> {
    let r_ch = i64::from(cfg.r_ch);
    let r_t = i64::from(cfg.r_t_us);
    if d_t > 0 || d_t < -r_t || d_ch.abs() > r_ch {
        return Err(Error::OutsideRadius {
            d_ch,
            d_t,
            r_ch: cfg.r_ch,
            r_t: cfg.r_t_us,
        });
    }
    let p_ch = if r_ch == 0 {
        0.5
    } else {
        (d_ch + r_ch) as f64 / (2 * r_ch) as f64
    };
    let p_t = -d_t as f64 / r_t as f64;
    Ok([p_ch, p_t])
}

/// PN of the self-loop, delta `(0, 0)`.
pub const SELF_PN: [f64; 2] = [0.5, 0.0];

/// One candidate message: the sender's input feature and its normalized delta.
#[derive(Debug, Clone, Copy)]
pub struct Message<'a, T> {
    pub x: &'a [T],
    pub pn: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: 0.0,
        }
    }

    /// Per-channel multiplier `γ / sqrt(var + eps)`.
    pub fn factor(&self, k: usize) -> f64 {
        self.gamma[k] / (self.running_var[k] + self.eps).sqrt()
    }

    pub fn apply(&self, z: &mut [f64]) {
        for (k, v) in z.iter_mut().enumerate() {
            *v = (*v - self.running_mean[k]) * self.factor(k) + self.beta[k];
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        for (len, _) in [
            (self.gamma.len(), "gamma"),
            (self.beta.len(), "beta"),
            (self.running_mean.len(), "mean"),
            (self.running_var.len(), "var"),
        ] {
            if len != dim {
                return Err(Error::Dimension {
                    context: "batch norm",
                    expected: dim,
                    got: len,
                });
            }
        }
        if self.running_var.iter().any(|&v| !(v + self.eps > 0.0)) {
            return Err(Error::config("bn.running_var", "var + eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerParams {
    /// `out_dim × (in_dim + 2)`.
    pub w: Matrix,
    pub b: Vec<f64>,
    /// `None` once folded.
    pub bn: Option<BatchNorm>,
    pub quant: Option<LayerQuant>,
}

/// Forward record of one layer for one vertex, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTrace {
    pub out: Vec<f64>,
    /// Max pre-activation per output channel.
    pub pre: Vec<f64>,
    /// Winning candidate per output channel (lowest index on ties).
    pub arg: Vec<usize>,
}

impl ConvLayerParams {
    pub fn new(w: Matrix, b: Vec<f64>, bn: Option<BatchNorm>) -> Result<Self> {
        let p = Self {
            w,
            b,
            bn,
            quant: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols - 2
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.cols < 2 {
            return Err(Error::Dimension {
                context: "conv weight columns",
                expected: 2,
                got: self.w.cols,
            });
        }
        if self.b.len() != self.w.rows {
            return Err(Error::Dimension {
                context: "conv bias",
                expected: self.w.rows,
                got: self.b.len(),
            });
        }
        if let Some(bn) = &self.bn {
            bn.check(self.w.rows)?;
        }
        Ok(())
    }

    /// BN absorbed into the weights and bias.
    pub fn folded(&self) -> Self {
        let Some(bn) = &self.bn else {
            return self.clone();
        };
        let mut w = self.w.clone();
        let mut b = self.b.clone();
        for k in 0..w.rows {
            let f = bn.factor(k);
            w.row_mut(k).iter_mut().for_each(|v| *v *= f);
            b[k] = (b[k] - bn.running_mean[k]) * f + bn.beta[k];
        }
        Self {
            w,
            b,
            bn: None,
            quant: self.quant,
        }
    }

    /// Pre-activation message `BN(W·[x ‖ pn] + b)`.
    pub fn message(&self, x: &[f64], pn: [f64; 2]) -> Vec<f64> {
        let n = self.in_dim();
        let mut z: Vec<f64> = (0..self.out_dim())
            .map(|k| {
                let row = self.w.row(k);
                let mut acc = self.b[k];
                for c in 0..n {
                    acc += row[c] * x[c];
                }
                acc + row[n] * pn[0] + row[n + 1] * pn[1]
            })
            .collect();
        if let Some(bn) = &self.bn {
            bn.apply(&mut z);
        }
        z
    }

    fn check_msgs<T>(&self, msgs: &[Message<T>]) -> Result<()> {
        if msgs.is_empty() {
            return Err(Error::Empty("conv candidates"));
        }
        for m in msgs {
            if m.x.len() != self.in_dim() {
                return Err(Error::Dimension {
                    context: "conv input feature",
                    expected: self.in_dim(),
                    got: m.x.len(),
                });
            }
        }
        Ok(())
    }

    /// Real-valued forward; `msgs[0]` is the self-loop by convention.
    pub fn forward_real(&self, msgs: &[Message<f64>]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(msgs)?.out)
    }

    pub fn forward_trace(&self, msgs: &[Message<f64>]) -> Result<ConvTrace> {
        self.check_msgs(msgs)?;
        let mut pre = self.message(msgs[0].x, msgs[0].pn);
        let mut arg = vec![0; pre.len()];
        for (j, m) in msgs.iter().enumerate().skip(1) {
            let z = self.message(m.x, m.pn);
            for k in 0..pre.len() {
                if z[k] > pre[k] {
                    pre[k] = z[k];
                    arg[k] = j;
                }
            }
        }
        let out = pre.iter().map(|&v| v.max(0.0)).collect();
        Ok(ConvTrace { out, pre, arg })
    }

    /// Folds BN and attaches quantization parameters. Weights are quantized
    /// symmetrically over their largest magnitude.
    pub fn quantize(&mut self, input: QuantParams, output: QuantParams, weight_bits: u8) -> Result<()> {
        *self = self.folded();
        let max_abs = self.w.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let weight = QuantParams::weights(max_abs, weight_bits);
        self.quant = Some(LayerQuant::new(input, weight, output)?);
        Ok(())
    }
}

/// Integer-only form of a folded, quantized conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IntConv {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Weight codes, row-major `out_dim × (in_dim + 2)`.
    pub w: Vec<i32>,
    /// Bias in the accumulator domain.
    pub b: Vec<i64>,
    pub q: LayerQuant,
}

impl IntConv {
    pub fn new(p: &ConvLayerParams, name: &str) -> Result<Self> {
        let q = p.quant.ok_or_else(|| Error::MissingQuant(name.to_string()))?;
        let f = p.folded();
        Ok(Self {
            in_dim: f.in_dim(),
            out_dim: f.out_dim(),
            w: q.quantize_weights(&f.w.data),
            b: q.quantize_bias(&f.b),
            q,
        })
    }

    pub fn pn_codes(&self, pn: [f64; 2]) -> [i32; 2] {
        [self.q.input.quantize(pn[0]), self.q.input.quantize(pn[1])]
    }

    fn acc(&self, k: usize, x: &[i32], pn: [i32; 2]) -> i64 {
        let cols = self.in_dim + 2;
        let row = &self.w[k * cols..(k + 1) * cols];
        let zp = self.q.input.zero_point;
        let mut acc = self.b[k];
        for c in 0..self.in_dim {
            acc += i64::from(row[c]) * i64::from(x[c] - zp);
        }
        acc + i64::from(row[self.in_dim]) * i64::from(pn[0] - zp)
            + i64::from(row[self.in_dim + 1]) * i64::from(pn[1] - zp)
    }

    fn check_msgs<T>(&self, msgs: &[Message<T>]) -> Result<()> {
        if msgs.is_empty() {
            return Err(Error::Empty("conv candidates"));
        }
        if let Some(m) = msgs.iter().find(|m| m.x.len() != self.in_dim) {
            return Err(Error::Dimension {
                context: "conv input feature",
                expected: self.in_dim,
                got: m.x.len(),
            });
        }
        Ok(())
    }

    /// Integer forward: input codes in, output codes out.
    pub fn forward(&self, msgs: &[Message<i32>]) -> Result<Vec<i32>> {
        self.check_msgs(msgs)?;
        let pns: Vec<[i32; 2]> = msgs.iter().map(|m| self.pn_codes(m.pn)).collect();
        let out = &self.q.output;
        Ok((0..self.out_dim)
            .map(|k| {
                let best = msgs
                    .iter()
                    .zip(&pns)
                    .map(|(m, &pn)| self.acc(k, m.x, pn))
                    .max()
                    .unwrap_or_default();
                let code = out.clamp(self.q.requant.apply(best) + i64::from(out.zero_point));
                code.max(out.zero_point)
            })
            .collect())
    }

    /// Fake-quant forward in `f64`: real values on the input grid in, real
    /// values on the output grid out.
    pub fn forward_fake(&self, msgs: &[Message<f64>]) -> Result<Vec<f64>> {
        self.check_msgs(msgs)?;
        let inp = &self.q.input;
        let out = &self.q.output;
        let zp_in = f64::from(inp.zero_point);
        let cols = self.in_dim + 2;
        let offs: Vec<Vec<f64>> = msgs
            .iter()
            .map(|m| {
                m.x.iter()
                    .chain(&m.pn)
                    .map(|&v| f64::from(inp.quantize(v)) - zp_in)
                    .collect()
            })
            .collect();
        let lo = f64::from(out.zero_point);
        let hi = f64::from(out.code_max());
        Ok((0..self.out_dim)
            .map(|k| {
                let row = &self.w[k * cols..(k + 1) * cols];
                let best = offs
                    .iter()
                    .map(|o| {
                        let mut acc = self.b[k] as f64;
                        for c in 0..cols {
                            acc += f64::from(row[c]) * o[c];
                        }
                        acc
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                let code = (self.q.requant.apply_f64(best) + lo).clamp(lo, hi);
                out.scale * (code - lo)
            })
            .collect())
    }
}

/// Latest input feature per channel for one conv stage.
#[derive(Debug, Clone)]
pub struct FeatureStore<T> {
    dim: usize,
    data: Vec<T>,
    present: Vec<bool>,
}

impl<T: Copy + Default> FeatureStore<T> {
    pub fn new(num_channels: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![T::default(); num_channels * dim],
            present: vec![false; num_channels],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, ch: u16) -> Option<&[T]> {
        let c = ch as usize;
        self.present[c].then(|| &self.data[c * self.dim..(c + 1) * self.dim])
    }

    pub fn set(&mut self, ch: u16, feat: &[T]) {
        let c = ch as usize;
        self.data[c * self.dim..(c + 1) * self.dim].copy_from_slice(feat);
        self.present[c] = true;
    }
}

/// Cycles per event of one conv layer with the default four MAC lanes.
pub fn conv_cycles(out_dim: usize, max_edge: usize) -> u64 {
    conv_cycles_lanes(out_dim, max_edge, 4)
}

/// Two candidates are fetched per cycle through the dual-port feature memory
/// and the MAC lanes are split between them, so each candidate advances by
/// `lanes / 2` output channels per cycle.
pub fn conv_cycles_lanes(out_dim: usize, max_edge: usize, lanes: usize) -> u64 {
    let pairs = (max_edge as u64 + 1).div_ceil(2);
    let passes = (2 * out_dim as u64).div_ceil(lanes.max(1) as u64);
    pairs * passes
}

/// FLOPs (multiply and add) per event across conv layers `(in_dim, out_dim)`.
pub fn flops_per_event(dims: &[(usize, usize)], edge_count: usize) -> u64 {
    dims.iter()
        .map(|&(i, o)| 2 * (i as u64 + 2) * o as u64 * (edge_count as u64 + 1))
        .sum()
}
