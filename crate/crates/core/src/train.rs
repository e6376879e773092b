//! Mini-batch training with Adam, L2 weight decay and a plateau scheduler.
//!
//! Per-sample gradients may be computed in parallel; they are summed in
//! sample order so results do not depend on the worker count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{synth_stream, Burst, BurstShape, Event, SynthSpec};
use crate::grad::{accumulate, classifier_sample, kws_sample, params, params_mut, scale, zeros_like, LossConfig, SampleGrad};
use crate::labeler::{target_window, KeywordSegment, TargetPlacement};
use crate::model::{Model, ModelType};
use crate::par::Exec;
use crate::pool::num_windows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointOn {
    #[default]
    TrainLoss,
    EvalLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    pub checkpoint: CheckpointOn,
    pub placement: TargetPlacement,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            seed: 0,
            checkpoint: CheckpointOn::TrainLoss,
            placement: TargetPlacement::End,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("train.plateau_factor", "must be in (0, 1)"));
        }
        for (v, k) in [(self.beta1, "train.beta1"), (self.beta2, "train.beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(k, "must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub id: String,
    pub events: Vec<Event>,
    pub duration_us: u32,
    pub label: usize,
    /// Keyword segment for KWS training; ignored by classifiers.
    pub segment: Option<KeywordSegment>,
}

/// Adam over the model's trainable tensors, with L2 weight decay folded
/// into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params(model).iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params_mut(model).into_iter().zip(params(grads)).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                let gk = g[k] + self.weight_decay * p[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Halves (by `factor`) the learning rate after `patience` epochs without
/// relative improvement of 1e-4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best * (1.0 - 1e-4) {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
}

/// Training-state sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub final_learning_rate: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the checkpoint epoch.
    pub model: Model,
    pub last: Model,
    pub state: TrainState,
}

fn sample_pass(m: &Model, s: &TrainSample, cfg: &TrainConfig, loss: &LossConfig, want_grad: bool) -> Result<SampleGrad> {
    match m.config.model_type {
        ModelType::Classifier => classifier_sample(m, &s.events, s.label, want_grad),
        ModelType::Kws => {
            let n = num_windows(s.duration_us, m.config.delta_t_us);
            let target = s.segment.map(|seg| target_window(&seg, cfg.placement, m.config.delta_t_us, n));
            kws_sample(m, &s.events, s.duration_us, s.label, target, loss, want_grad)
        }
    }
}

/// Mean loss and accuracy over `samples` without updating anything.
pub fn evaluate(m: &Model, samples: &[TrainSample], cfg: &TrainConfig, loss: &LossConfig, exec: Exec) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let out = exec.map(samples, |s| sample_pass(m, s, cfg, loss, false));
    let mut total = 0.0;
    let mut correct = 0usize;
    for (r, s) in out.into_iter().zip(samples) {
        let r = r?;
        total += r.loss;
        correct += usize::from(r.predicted == s.label);
    }
    let n = samples.len() as f64;
    Ok((total / n, correct as f64 / n))
}

pub fn train(
    model: &Model,
    train_set: &[TrainSample],
    eval_set: Option<&[TrainSample]>,
    cfg: &TrainConfig,
    loss: &LossConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.checkpoint == CheckpointOn::EvalLoss && eval_set.is_none_or(<[TrainSample]>::is_empty) {
        return Err(Error::config("train.checkpoint", "eval_loss needs an evaluation set"));
    }
    if model.convs.iter().any(|c| c.quant.is_some()) {
        return Err(Error::config("model", "training needs an unquantized model"));
    }
    let mut m = model.clone();
    let mut adam = Adam::new(&m, cfg);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, m.clone());

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results = exec.map(batch, |&i| sample_pass(&m, &train_set[i], cfg, loss, true));
            let mut g = zeros_like(&m);
            for (r, &i) in results.into_iter().zip(batch) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss: r.loss });
                }
                total += r.loss;
                correct += usize::from(r.predicted == train_set[i].label);
                if let Some(sg) = &r.grads {
                    accumulate(&mut g, sg);
                }
            }
            scale(&mut g, 1.0 / batch.len() as f64);
            adam.step(&mut m, &g, lr);
        }
        let n = train_set.len() as f64;
        let train_loss = total / n;
        let (eval_loss, eval_accuracy) = match eval_set {
            Some(e) if !e.is_empty() => {
                let (l, a) = evaluate(&m, e, cfg, loss, exec)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let metric = match cfg.checkpoint {
            CheckpointOn::TrainLoss => train_loss,
            CheckpointOn::EvalLoss => eval_loss.unwrap_or(f64::INFINITY),
        };
        if !metric.is_finite() {
            return Err(Error::Diverged { epoch, loss: metric });
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            train_accuracy: correct as f64 / n,
            eval_loss,
            eval_accuracy,
        });
        log::info!("epoch {epoch}: loss {train_loss:.5} lr {lr:.3e}");
        if metric < best.0 {
            best = (metric, epoch, m.clone());
        }
        lr = plateau.observe(metric, lr);
    }
    Ok(TrainOutcome {
        model: best.2,
        last: m,
        state: TrainState {
            config: *cfg,
            loss: *loss,
            best_epoch: best.1,
            best_metric: best.0,
            final_learning_rate: lr,
            history,
        },
    })
}

/// Two-class synthetic set: one Gaussian burst per sample, centred low or
/// high on the channel axis by class, at a random time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub num_channels: u32,
    pub duration_us: u32,
    pub class_channels: [u32; 2],
    pub events_min: usize,
    pub events_max: usize,
    pub t_spread_us: f64,
    pub ch_spread: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_channels: 700,
            duration_us: 1_000_000,
            class_channels: [200, 500],
            events_min: 60,
            events_max: 80,
            t_spread_us: 30_000.0,
            ch_spread: 15.0,
        }
    }
}

pub fn toy_dataset(spec: &ToySpec, n: usize, seed: u64) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let count = rng.random_range(spec.events_min..=spec.events_max);
            let t_center_us = rng.random_range(spec.duration_us / 5..spec.duration_us * 4 / 5);
            let s = SynthSpec {
                bursts: vec![Burst {
                    t_center_us,
                    ch_center: spec.class_channels[label],
                    t_spread_us: spec.t_spread_us,
                    ch_spread: spec.ch_spread,
                    count,
                    shape: BurstShape::Gaussian,
                }],
                seed: rng.random(),
                num_channels: spec.num_channels,
                duration_us: spec.duration_us,
                background: 0,
                label: Some(label as u32),
            };
            let out = synth_stream(&s)?;
            Ok(TrainSample {
                id: format!("toy-{i:04}"),
                events: out.stream.events,
                duration_us: spec.duration_us,
                label,
                segment: None,
            })
        })
        .collect()
}
