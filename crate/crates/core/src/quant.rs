//! Affine integer quantization.
//!
//! Activations use asymmetric unsigned codes `[0, 2^bits − 1]` with a zero
//! point; weights use symmetric signed codes `[−(2^(bits−1) − 1), 2^(bits−1) − 1]`
//! with zero point 0. A layer's combined rescale `s_in·s_w / s_out` is carried
//! as an integer multiplier and right shift, `M ≈ multiplier · 2^−shift`, with
//! the multiplier normalized into `[2^20, 2^21)`.
//!
//! The multiplier width is chosen so that `acc · multiplier` stays below
//! 2^53 for every 8-bit layer, which makes the floating-point fake-quant path
//! ([`Requant::apply_f64`]) bit-identical to the integer path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest scale a degenerate calibration range is floored to.
pub const MIN_SCALE: f64 = 1e-8;

const MULT_BITS: u32 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f64,
    pub zero_point: i32,
    #[serde(default)]
    pub signed: bool,
}

impl QuantParams {
    pub fn new(bits: u8, scale: f64, zero_point: i32, signed: bool) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::config("quant.bits", format!("{bits} not in 2..=16")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config("quant.scale", format!("{scale} is not a positive real")));
        }
        let qp = Self {
            bits,
            scale,
            zero_point,
            signed,
        };
        if zero_point < qp.code_min() || zero_point > qp.code_max() {
            return Err(Error::config("quant.zero_point", format!("{zero_point} outside code range")));
        }
        Ok(qp)
    }

    /// Asymmetric unsigned parameters covering `[min, max] ∪ {0}`.
    pub fn activation(min: f64, max: f64, bits: u8) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let levels = f64::from((1u32 << bits) - 1);
        let mut scale = (hi - lo) / levels;
        if !(scale >= MIN_SCALE) {
            log::warn!("degenerate calibration range [{min}, {max}]; scale floored to {MIN_SCALE}");
            scale = MIN_SCALE;
        }
        let zero_point = ((-lo / scale).round() as i32).clamp(0, (1 << bits) - 1);
        Self {
            bits,
            scale,
            zero_point,
            signed: false,
        }
    }

    /// Symmetric signed parameters for weights with largest magnitude `max_abs`.
    pub fn weights(max_abs: f64, bits: u8) -> Self {
        let levels = f64::from((1u32 << (bits - 1)) - 1);
        let mut scale = max_abs / levels;
        if !(scale >= MIN_SCALE) {
            scale = MIN_SCALE;
        }
        Self {
            bits,
            scale,
            zero_point: 0,
            signed: true,
        }
    }

    pub fn code_min(&self) -> i32 {
        if self.signed {
            -((1 << (self.bits - 1)) - 1)
        } else {
            0
        }
    }

    pub fn code_max(&self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    /// `clamp(round(x / scale) + zero_point)`, rounding half away from zero.
    pub fn quantize(&self, x: f64) -> i32 {
        let q = (x / self.scale).round() + f64::from(self.zero_point);
        q.clamp(f64::from(self.code_min()), f64::from(self.code_max())) as i32
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        self.scale * f64::from(q - self.zero_point)
    }

    pub fn clamp(&self, q: i64) -> i32 {
        q.clamp(i64::from(self.code_min()), i64::from(self.code_max())) as i32
    }
}

pub fn quantize(x: f64, qp: &QuantParams) -> i32 {
    qp.quantize(x)
}

/// Fixed-point rescale: `M ≈ multiplier · 2^−shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: i32,
}

impl Requant {
    pub fn from_real(m: f64) -> Result<Self> {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::config("quant.requant", format!("rescale {m} is not a finite non-negative real")));
        }
        if m == 0.0 {
            return Ok(Self {
                multiplier: 0,
                shift: 0,
            });
        }
        let e = m.log2().floor() as i32;
        let mut shift = (MULT_BITS as i32 - 1) - e;
        let mut mult = (m * 2f64.powi(shift)).round() as i64;
        if mult >= 1 << MULT_BITS {
            mult /= 2;
            shift -= 1;
        }
        if shift > 62 {
            shift = 62;
            mult = (m * 2f64.powi(62)).round() as i64;
        }
        if shift < -30 {
            return Err(Error::config("quant.requant", format!("rescale {m} too large")));
        }
        Ok(Self {
            multiplier: mult as i32,
            shift,
        })
    }

    /// The real factor this multiplier/shift pair encodes exactly.
    pub fn factor(&self) -> f64 {
        f64::from(self.multiplier) * 2f64.powi(-self.shift)
    }

    /// `round_half_up(acc · M)` in integer arithmetic.
    pub fn apply(&self, acc: i64) -> i64 {
        let p = i128::from(acc) * i128::from(self.multiplier);
        let r = match self.shift {
            s if s > 0 => (p + (1i128 << (s - 1))) >> s,
            0 => p,
            s => p << (-s),
        };
        r.clamp(i128::from(i64::MIN), i128::from(i64::MAX)) as i64
    }

    /// `floor(acc · M + 0.5)` in floating point.
    pub fn apply_f64(&self, acc: f64) -> f64 {
        (acc * self.factor() + 0.5).floor()
    }
}

/// Saturating `apply(acc) + out_zp`, clamped to the output code range.
pub fn requantize(acc: i64, rq: &Requant, out: &QuantParams) -> i32 {
    out.clamp(rq.apply(acc).saturating_add(i64::from(out.zero_point)))
}

/// Integer division rounding half away from zero.
pub fn div_round_away(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}

/// Quantization parameters of one affine block: input codes, weight codes,
/// output codes and the accumulator-to-output rescale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub input: QuantParams,
    pub weight: QuantParams,
    pub output: QuantParams,
    pub requant: Requant,
}

impl LayerQuant {
    pub fn new(input: QuantParams, weight: QuantParams, output: QuantParams) -> Result<Self> {
        let requant = Requant::from_real(input.scale * weight.scale / output.scale)?;
        Ok(Self {
            input,
            weight,
            output,
            requant,
        })
    }

    /// Scale of the integer accumulator (and of quantized biases).
    pub fn acc_scale(&self) -> f64 {
        self.input.scale * self.weight.scale
    }

    pub fn quantize_weights(&self, w: &[f64]) -> Vec<i32> {
        w.iter().map(|&x| self.weight.quantize(x)).collect()
    }

    /// Biases live in the accumulator domain (zero point 0, 32-bit range).
    pub fn quantize_bias(&self, b: &[f64]) -> Vec<i64> {
        let s = self.acc_scale();
        b.iter()
            .map(|&x| ((x / s).round()).clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i64)
            .collect()
    }
}

/// Min/max observed over a calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
        }
    }
}

impl Calibration {
    pub fn observe(&mut self, xs: &[f64]) {
        for &x in xs {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.count += xs.len();
    }

    pub fn merge(&mut self, other: &Calibration) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
    }

    pub fn params(&self, bits: u8) -> Result<QuantParams> {
        if self.count == 0 {
            return Err(Error::Empty("calibration observations"));
        }
        Ok(QuantParams::activation(self.min, self.max, bits))
    }
}

/// A 2^bits-entry table mapping input codes to output codes of `f`, sampled at
/// each input code's represented value and rounded to the nearest output code.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    pub table: Vec<i32>,
}

impl Lut {
    pub fn build(f: impl Fn(f64) -> f64, input: &QuantParams, output: &QuantParams) -> Self {
        let table = (input.code_min()..=input.code_max())
            .map(|q| output.quantize(f(input.dequantize(q))))
            .collect();
        Self { table }
    }

    pub fn lookup(&self, code: i32, input: &QuantParams) -> i32 {
        self.table[(code - input.code_min()) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_examples() {
        let unit = QuantParams::new(8, 1.0, 0, false).unwrap();
        assert_eq!(quantize(0.0, &unit), 0);
        let half = QuantParams::new(8, 0.5, 128, false).unwrap();
        assert_eq!(quantize(1.0, &half), 130);
        assert_eq!(quantize(1e9, &half), 255);
        assert_eq!(quantize(-1e9, &half), 0);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        let qp = QuantParams::new(8, 1.0, 128, false).unwrap();
        assert_eq!(qp.quantize(0.5), 129);
        assert_eq!(qp.quantize(-0.5), 127);
    }

    #[test]
    fn dequant_error_is_within_half_scale() {
        let qp = QuantParams::activation(-1.3, 2.7, 8);
        let mut x = -1.3;
        while x <= 2.7 {
            let err = (qp.dequantize(qp.quantize(x)) - x).abs();
            assert!(err <= qp.scale / 2.0 + 1e-12, "x={x} err={err}");
            x += 0.001;
        }
    }

    #[test]
    fn degenerate_range_floors_scale() {
        let qp = QuantParams::activation(0.0, 0.0, 8);
        assert_eq!(qp.scale, MIN_SCALE);
    }

    #[test]
    fn requant_identity() {
        let rq = Requant::from_real(1.0).unwrap();
        assert_eq!(rq.factor(), 1.0);
        let out = QuantParams::new(8, 1.0, 0, false).unwrap();
        for acc in 0..=255 {
            assert_eq!(requantize(acc, &rq, &out), acc as i32);
        }
    }

    #[test]
    fn requant_nearest() {
        let rq = Requant::from_real(0.0117).unwrap();
        let out = QuantParams::new(8, 1.0, 0, false).unwrap();
        assert_eq!(requantize(100, &rq, &out), 1);
    }

    #[test]
    fn multiplier_reproduces_rescale_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let m = 10f64.powf(rng.random_range(-6.0..2.0));
            let rq = Requant::from_real(m).unwrap();
            assert!(((rq.factor() - m) / m).abs() <= 2f64.powi(-15));
        }
    }

    #[test]
    fn integer_requant_tracks_real_rescale() {
        // Oracle: real-arithmetic rescale rounded to nearest.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = QuantParams::new(8, 1.0, 0, true).unwrap();
        let wide = QuantParams {
            bits: 16,
            ..out
        };
        for _ in 0..100_000 {
            let acc: i64 = rng.random_range(-2_000_000..2_000_000);
            let m = 10f64.powf(rng.random_range(-6.0..-2.0));
            let rq = Requant::from_real(m).unwrap();
            let int = requantize(acc, &rq, &wide);
            let real = wide.clamp((acc as f64 * m).round() as i64);
            assert!((int - real).abs() <= 1, "acc={acc} m={m} int={int} real={real}");
        }
    }

    #[test]
    fn fake_quant_requant_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100_000 {
            let acc: i64 = rng.random_range(-(1 << 30)..(1 << 30));
            let m = 10f64.powf(rng.random_range(-7.0..0.0));
            let rq = Requant::from_real(m).unwrap();
            assert_eq!(rq.apply(acc) as f64, rq.apply_f64(acc as f64));
        }
    }

    #[test]
    fn div_round_away_matches_float_rounding() {
        for num in -1000i64..1000 {
            for den in [1i64, 2, 3, 7, 255] {
                assert_eq!(div_round_away(num, den), (num as f64 / den as f64).round() as i64);
            }
        }
    }

    #[test]
    fn lut_is_monotone_for_sigmoid() {
        let input = QuantParams::activation(-6.0, 6.0, 8);
        let output = QuantParams::new(8, 1.0 / 255.0, 0, false).unwrap();
        let lut = Lut::build(crate::tensor::sigmoid, &input, &output);
        assert_eq!(lut.table.len(), 256);
        assert!(lut.table.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(lut.lookup(input.zero_point, &input), 128);
    }

    #[test]
    fn calibration_requires_observations() {
        assert!(Calibration::default().params(8).is_err());
        let mut c = Calibration::default();
        c.observe(&[0.5, 2.0]);
        let qp = c.params(8).unwrap();
        assert_eq!(qp.zero_point, 0);
        assert!((qp.scale - 2.0 / 255.0).abs() < 1e-15);
    }
}
