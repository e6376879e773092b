//! Float, fake-quant and integer agreement over a set of streams.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::events::Event;
use crate::model::{calibrate_and_fold, CalibrationSample, IntModel, Model, QuantConfig};
use crate::par::Exec;
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub bits: u8,
    pub samples: usize,
    pub events: usize,
    /// Events whose integer feature codes differ from the quantized
    /// fake-quant features.
    pub feature_mismatches: usize,
    /// Samples whose integer logit codes differ from the fake-quant logits.
    pub logit_mismatches: usize,
    /// Per event: argmax of the float backbone feature equals the integer one.
    pub event_argmax_agreement: f64,
    /// Per sample: float and integer classifiers predict the same class.
    pub sample_argmax_agreement: f64,
}

impl ParityReport {
    pub fn bit_exact(&self) -> bool {
        self.feature_mismatches == 0 && self.logit_mismatches == 0
    }
}

struct One {
    events: usize,
    feature_mismatches: usize,
    event_agree: usize,
    logit_mismatch: bool,
    sample_agree: bool,
}

/// Calibrates `model` on `streams` at `qc` and compares the three paths on
/// the same streams. `model` must be a float classifier.
pub fn quant_parity(model: &Model, streams: &[Vec<Event>], duration_us: u32, qc: &QuantConfig, exec: Exec) -> Result<ParityReport> {
    let samples: Vec<CalibrationSample> = streams
        .iter()
        .map(|e| CalibrationSample {
            events: e,
            duration_us,
        })
        .collect();
    let q = calibrate_and_fold(model, &samples, qc, exec)?;
    let im = IntModel::new(&q)?;
    let fq = im.feature_params();
    let oq = match &q.head {
        crate::model::Head::Classifier(m) => m.layers.last().and_then(|l| l.quant).map(|l| l.output),
        crate::model::Head::Kws(_) => None,
    }
    .ok_or_else(|| crate::Error::config("model_type", "parity needs a classifier"))?;

    let per: Vec<Result<One>> = exec.map(streams, |ev| {
        let float = model.backbone(ev)?;
        let codes = im.backbone(ev)?;
        let fake = im.backbone_fake(ev)?;
        let mut feature_mismatches = 0;
        let mut event_agree = 0;
        for ((f, c), k) in float.iter().zip(&codes).zip(&fake) {
            let from_fake: Vec<i32> = k.1.iter().map(|&v| fq.quantize(v)).collect();
            feature_mismatches += usize::from(from_fake != c.1);
            let deq: Vec<f64> = c.1.iter().map(|&v| fq.dequantize(v)).collect();
            event_agree += usize::from(argmax(&f.1) == argmax(&deq));
        }
        let lc = im.logit_codes(ev)?;
        let lf: Vec<i32> = im.logits_fake(ev)?.iter().map(|&v| oq.quantize(v)).collect();
        Ok(One {
            events: float.len(),
            feature_mismatches,
            event_agree,
            logit_mismatch: lc != lf,
            sample_agree: model.classify(ev)?.predicted == im.classify(ev)?.predicted,
        })
    });
    let mut r = ParityReport {
        bits: qc.bits,
        samples: streams.len(),
        events: 0,
        feature_mismatches: 0,
        logit_mismatches: 0,
        event_argmax_agreement: 0.0,
        sample_argmax_agreement: 0.0,
    };
    let (mut ea, mut sa) = (0usize, 0usize);
    for o in per {
        let o = o?;
        r.events += o.events;
        r.feature_mismatches += o.feature_mismatches;
        ea += o.event_agree;
        r.logit_mismatches += usize::from(o.logit_mismatch);
        sa += usize::from(o.sample_agree);
    }
    r.event_argmax_agreement = ea as f64 / r.events.max(1) as f64;
    r.sample_argmax_agreement = sa as f64 / r.samples.max(1) as f64;
    Ok(r)
}
