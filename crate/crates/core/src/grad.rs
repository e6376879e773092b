//! Reverse-mode gradients of the real-valued model.
//!
//! Gradients are stored in a zeroed clone of the model so the same tensor
//! layout serves parameters, gradients and optimizer state. Batch norm is
//! trained in inference form: `γ` and `β` are learned, running statistics
//! are frozen.

use serde::{Deserialize, Serialize};

use crate::conv::{positional_norm, ConvLayerParams, ConvTrace, Message, SELF_PN};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::graph::build_graph;
use crate::heads::{GruParams, GruTrace, KwsHead, Mlp};
use crate::model::{Head, Model};
use crate::pool::num_windows;
use crate::tensor::{argmax, dot, sigmoid, softmax, softplus};

/// Trainable tensors in a fixed order.
pub fn params(m: &Model) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = Vec::new();
    for c in &m.convs {
        v.push(&c.w.data);
        v.push(&c.b);
        if let Some(bn) = &c.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
    }
    match &m.head {
        Head::Classifier(x) => {
            for l in &x.layers {
                v.push(&l.w.data);
                v.push(&l.b);
            }
        }
        Head::Kws(k) => {
            for l in &k.stem.layers {
                v.push(&l.w.data);
                v.push(&l.b);
            }
            let g = &k.gru;
            for t in [&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h] {
                v.push(&t.data);
            }
            v.push(&g.b_z);
            v.push(&g.b_r);
            v.push(&g.b_h);
            for l in [&k.cls, &k.conf] {
                v.push(&l.w.data);
                v.push(&l.b);
            }
        }
    }
    v
}

/// Mutable view of [`params`], same order.
pub fn params_mut(m: &mut Model) -> Vec<&mut [f64]> {
    let mut v: Vec<&mut [f64]> = Vec::new();
    for c in &mut m.convs {
        v.push(&mut c.w.data);
        v.push(&mut c.b);
        if let Some(bn) = &mut c.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
    }
    match &mut m.head {
        Head::Classifier(x) => {
            for l in &mut x.layers {
                v.push(&mut l.w.data);
                v.push(&mut l.b);
            }
        }
        Head::Kws(k) => {
            for l in &mut k.stem.layers {
                v.push(&mut l.w.data);
                v.push(&mut l.b);
            }
            let g = &mut k.gru;
            for t in [&mut g.w_z, &mut g.w_r, &mut g.w_h, &mut g.u_z, &mut g.u_r, &mut g.u_h] {
                v.push(&mut t.data);
            }
            v.push(&mut g.b_z);
            v.push(&mut g.b_r);
            v.push(&mut g.b_h);
            for l in [&mut k.cls, &mut k.conf] {
                v.push(&mut l.w.data);
                v.push(&mut l.b);
            }
        }
    }
    v
}

pub fn num_params(m: &Model) -> usize {
    params(m).iter().map(|t| t.len()).sum()
}

/// A model of the same shape with every trainable value zero.
pub fn zeros_like(m: &Model) -> Model {
    let mut g = m.clone();
    for t in params_mut(&mut g) {
        t.fill(0.0);
    }
    g
}

/// `acc += g`, tensor by tensor.
pub fn accumulate(acc: &mut Model, g: &Model) {
    for (a, b) in params_mut(acc).into_iter().zip(params(g)) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn scale(g: &mut Model, s: f64) {
    for t in params_mut(g) {
        t.iter_mut().for_each(|v| *v *= s);
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Cross-entropy from logits: `(−ln p_label, probs − onehot)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::config("label", format!("{label} outside [0, {})", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok((lse - logits[label], g))
}

/// Cross-entropy from probabilities, with its gradient w.r.t. the logits
/// that produced them.
pub fn loss_classification(probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probs.len() {
        return Err(Error::config("label", format!("{label} outside [0, {})", probs.len())));
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    Ok((-probs[label].ln(), g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub pos_weight: f64,
    pub ce_scale: f64,
    pub conf_weight: f64,
    pub cls_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            pos_weight: 99.0,
            ce_scale: 5.0,
            conf_weight: 1.0,
            cls_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, k) in [
            (self.pos_weight, "loss.pos_weight"),
            (self.ce_scale, "loss.ce_scale"),
            (self.conf_weight, "loss.conf_weight"),
            (self.cls_weight, "loss.cls_weight"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KwsLoss {
    pub total: f64,
    pub bce: f64,
    pub cls: f64,
    /// Window of maximum confidence, where the class term is evaluated.
    pub best_window: usize,
    pub d_cls: Vec<Vec<f64>>,
    pub d_conf: Vec<f64>,
}

/// Weighted BCE over all windows (mean) plus scaled cross-entropy at the
/// most confident window. Without a target, every window is negative and
/// the class term is dropped.
pub fn loss_kws(
    cls_logits: &[Vec<f64>],
    conf_logits: &[f64],
    target: Option<usize>,
    label: usize,
    cfg: &LossConfig,
) -> Result<KwsLoss> {
    let n = conf_logits.len();
    if n == 0 {
        return Err(Error::Empty("kws outputs"));
    }
    if cls_logits.len() != n {
        return Err(Error::Dimension {
            context: "kws class logits",
            expected: n,
            got: cls_logits.len(),
        });
    }
    let mut bce = 0.0;
    let mut d_conf = vec![0.0; n];
    for (t, &s) in conf_logits.iter().enumerate() {
        let p = sigmoid(s);
        if Some(t) == target {
            bce += cfg.pos_weight * softplus(-s);
            d_conf[t] = cfg.pos_weight * (p - 1.0);
        } else {
            bce += softplus(s);
            d_conf[t] = p;
        }
    }
    bce /= n as f64;
    d_conf.iter_mut().for_each(|g| *g *= cfg.conf_weight / n as f64);

    let best_window = argmax(conf_logits);
    let mut d_cls = vec![vec![0.0; cls_logits[0].len()]; n];
    let mut cls = 0.0;
    if target.is_some() {
        let (l, g) = cross_entropy(&cls_logits[best_window], label)?;
        cls = cfg.ce_scale * l;
        d_cls[best_window] = g.iter().map(|v| v * cfg.ce_scale * cfg.cls_weight).collect();
    }
    Ok(KwsLoss {
        total: cfg.conf_weight * bce + cfg.cls_weight * cls,
        bce,
        cls,
        best_window,
        d_cls,
        d_conf,
    })
}

// ---------------------------------------------------------------------------
// Layers

/// Backward through one conv stage. `g_out` is the gradient at the ReLU
/// output; the max routes it to the winning candidate only. Returns one
/// input gradient per candidate.
pub fn conv_backward(
    p: &ConvLayerParams,
    msgs: &[Message<f64>],
    tr: &ConvTrace,
    g_out: &[f64],
    g: &mut ConvLayerParams,
) -> Vec<Vec<f64>> {
    let n = p.in_dim();
    let mut dx = vec![vec![0.0; n]; msgs.len()];
    for k in 0..p.out_dim() {
        if tr.pre[k] <= 0.0 || g_out[k] == 0.0 {
            continue;
        }
        let j = tr.arg[k];
        let m = &msgs[j];
        let row = p.w.row(k);
        let gu = match (&p.bn, &mut g.bn) {
            (Some(bn), Some(gbn)) => {
                let u = p.b[k] + dot(&row[..n], m.x) + row[n] * m.pn[0] + row[n + 1] * m.pn[1];
                gbn.gamma[k] += g_out[k] * (u - bn.running_mean[k]) / (bn.running_var[k] + bn.eps).sqrt();
                gbn.beta[k] += g_out[k];
                g_out[k] * bn.factor(k)
            }
            (Some(bn), None) => g_out[k] * bn.factor(k),
            _ => g_out[k],
        };
        g.b[k] += gu;
        let grow = g.w.row_mut(k);
        for c in 0..n {
            grow[c] += gu * m.x[c];
        }
        grow[n] += gu * m.pn[0];
        grow[n + 1] += gu * m.pn[1];
        for c in 0..n {
            dx[j][c] += gu * row[c];
        }
    }
    dx
}

/// Backward through an MLP given the activations from `Mlp::forward_trace`.
pub fn mlp_backward(m: &Mlp, acts: &[Vec<f64>], g_y: &[f64], g: &mut Mlp) -> Vec<f64> {
    let mut gy = g_y.to_vec();
    let last = m.layers.len();
    for i in (0..last).rev() {
        if i + 1 < last || m.relu_last {
            for (v, a) in gy.iter_mut().zip(&acts[i + 1]) {
                if *a <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        g.layers[i].w.add_outer(&gy, &acts[i]);
        for (b, v) in g.layers[i].b.iter_mut().zip(&gy) {
            *b += v;
        }
        gy = m.layers[i].w.matvec_t(&gy);
    }
    gy
}

/// Backward through one GRU step. Returns `(dx, dh_prev)`.
pub fn gru_backward(p: &GruParams, x: &[f64], h_prev: &[f64], tr: &GruTrace, dh: &[f64], g: &mut GruParams) -> (Vec<f64>, Vec<f64>) {
    let n = h_prev.len();
    let mut dh_prev: Vec<f64> = (0..n).map(|k| dh[k] * (1.0 - tr.z[k])).collect();
    let da_z: Vec<f64> = (0..n)
        .map(|k| dh[k] * (tr.h_tilde[k] - h_prev[k]) * tr.z[k] * (1.0 - tr.z[k]))
        .collect();
    let da_h: Vec<f64> = (0..n)
        .map(|k| dh[k] * tr.z[k] * (1.0 - tr.h_tilde[k] * tr.h_tilde[k]))
        .collect();
    g.w_h.add_outer(&da_h, x);
    g.u_h.add_outer(&da_h, &tr.rh);
    let drh = p.u_h.matvec_t(&da_h);
    let da_r: Vec<f64> = (0..n)
        .map(|k| drh[k] * h_prev[k] * tr.r[k] * (1.0 - tr.r[k]))
        .collect();
    for k in 0..n {
        dh_prev[k] += drh[k] * tr.r[k];
        g.b_z[k] += da_z[k];
        g.b_r[k] += da_r[k];
        g.b_h[k] += da_h[k];
    }
    g.w_z.add_outer(&da_z, x);
    g.w_r.add_outer(&da_r, x);
    g.u_z.add_outer(&da_z, h_prev);
    g.u_r.add_outer(&da_r, h_prev);
    let mut dx = p.w_h.matvec_t(&da_h);
    for (w, u, d) in [(&p.w_z, &p.u_z, &da_z), (&p.w_r, &p.u_r, &da_r)] {
        for (a, b) in dx.iter_mut().zip(w.matvec_t(d)) {
            *a += b;
        }
        for (a, b) in dh_prev.iter_mut().zip(u.matvec_t(d)) {
            *a += b;
        }
    }
    (dx, dh_prev)
}

// ---------------------------------------------------------------------------
// Backbone

/// Forward record of the conv stack over the event DAG. Neighbour messages
/// at stage `l` carry the stage-`l` input of the source event, which is what
/// the streaming feature stores hold.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub events: Vec<Event>,
    srcs: Vec<Vec<usize>>,
    pns: Vec<Vec<[f64; 2]>>,
    /// `[layer][event]` stage inputs.
    inputs: Vec<Vec<Vec<f64>>>,
    /// `[layer][event]`.
    convs: Vec<Vec<ConvTrace>>,
    pub outputs: Vec<Vec<f64>>,
}

fn messages<'a>(x: &'a [Vec<f64>], i: usize, srcs: &[usize], pns: &[[f64; 2]]) -> Vec<Message<'a, f64>> {
    let mut msgs = Vec::with_capacity(srcs.len() + 1);
    msgs.push(Message { x: &x[i], pn: SELF_PN });
    for (&s, &pn) in srcs.iter().zip(pns) {
        msgs.push(Message { x: &x[s], pn });
    }
    msgs
}

pub fn backbone_forward(m: &Model, events: &[Event]) -> Result<BackboneTrace> {
    let g = &m.config.graph;
    let verts = build_graph(events, g)?;
    let mut srcs = Vec::with_capacity(verts.len());
    let mut pns = Vec::with_capacity(verts.len());
    for v in &verts {
        srcs.push(v.edges.iter().map(|e| e.src).collect::<Vec<_>>());
        pns.push(
            v.edges
                .iter()
                .map(|e| {
                    positional_norm(
                        i64::from(e.ch) - i64::from(v.event.ch),
                        i64::from(e.t) - i64::from(v.event.t),
                        g,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut x: Vec<Vec<f64>> = verts.iter().map(|v| v.feat.to_vec()).collect();
    let mut inputs = Vec::with_capacity(m.convs.len());
    let mut convs = Vec::with_capacity(m.convs.len());
    for layer in &m.convs {
        let traces = (0..x.len())
            .map(|i| layer.forward_trace(&messages(&x, i, &srcs[i], &pns[i])))
            .collect::<Result<Vec<_>>>()?;
        let next = traces.iter().map(|t| t.out.clone()).collect();
        inputs.push(std::mem::replace(&mut x, next));
        convs.push(traces);
    }
    Ok(BackboneTrace {
        events: events.to_vec(),
        srcs,
        pns,
        inputs,
        convs,
        outputs: x,
    })
}

impl BackboneTrace {
    /// Max winners and ReLU masks, for detecting kinks under perturbation.
    pub fn pattern(&self) -> Vec<usize> {
        let mut p = Vec::new();
        for layer in &self.convs {
            for t in layer {
                p.extend(&t.arg);
                p.extend(t.pre.iter().map(|&v| usize::from(v > 0.0)));
            }
        }
        p
    }
}

/// Propagates per-event output gradients into the conv parameters.
pub fn backbone_backward(m: &Model, tr: &BackboneTrace, d_out: Vec<Vec<f64>>, g: &mut Model) {
    let mut d = d_out;
    for l in (0..m.convs.len()).rev() {
        let x = &tr.inputs[l];
        let mut dx = vec![vec![0.0; m.convs[l].in_dim()]; x.len()];
        for i in 0..x.len() {
            if d[i].iter().all(|&v| v == 0.0) {
                continue;
            }
            let msgs = messages(x, i, &tr.srcs[i], &tr.pns[i]);
            let dm = conv_backward(&m.convs[l], &msgs, &tr.convs[l][i], &d[i], &mut g.convs[l]);
            for (j, gj) in dm.into_iter().enumerate() {
                let dst = if j == 0 { i } else { tr.srcs[i][j - 1] };
                for (a, b) in dx[dst].iter_mut().zip(gj) {
                    *a += b;
                }
            }
        }
        d = dx;
    }
}

// ---------------------------------------------------------------------------
// Samples

/// Forward (and optionally backward) result for one sample.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub predicted: usize,
    pub grads: Option<Model>,
    /// Kink signature of the forward pass.
    pub pattern: Vec<usize>,
}

pub fn classifier_sample(m: &Model, events: &[Event], label: usize, want_grad: bool) -> Result<SampleGrad> {
    let Head::Classifier(mlp) = &m.head else {
        return Err(Error::config("model_type", "expected a classifier model"));
    };
    if events.is_empty() {
        return Err(Error::EmptySample);
    }
    let tr = backbone_forward(m, events)?;
    let n = tr.outputs.len() as f64;
    let mut pooled = vec![0.0; m.config.feature_dim()];
    for o in &tr.outputs {
        for (p, v) in pooled.iter_mut().zip(o) {
            *p += v / n;
        }
    }
    let acts = mlp.forward_trace(&pooled)?;
    let logits = acts.last().cloned().unwrap_or_default();
    let (loss, dlogits) = cross_entropy(&logits, label)?;
    let mut pattern = tr.pattern();
    for a in &acts[1..] {
        pattern.extend(a.iter().map(|&v| usize::from(v > 0.0)));
    }
    let grads = if want_grad {
        let mut g = zeros_like(m);
        let Head::Classifier(gm) = &mut g.head else { unreachable!() };
        let dp = mlp_backward(mlp, &acts, &dlogits, gm);
        let d_out = vec![dp.iter().map(|v| v / n).collect::<Vec<_>>(); tr.outputs.len()];
        backbone_backward(m, &tr, d_out, &mut g);
        Some(g)
    } else {
        None
    };
    Ok(SampleGrad {
        loss,
        predicted: argmax(&logits),
        grads,
        pattern,
    })
}

/// Winning event per window and coordinate, `None` where the zero start
/// was never beaten.
pub type PoolArgs = Vec<Vec<Option<usize>>>;

/// Window max pool over backbone outputs, remembering the winning event per
/// coordinate. Matches `WindowPooler`: strict `>` against a zero start.
pub fn pool_windows(outputs: &[Vec<f64>], events: &[Event], dim: usize, dt: u32, n: usize) -> (Vec<Vec<f64>>, PoolArgs) {
    let n = events.last().map_or(n, |e| n.max((e.t / dt) as usize + 1));
    let mut feat = vec![vec![0.0; dim]; n];
    let mut arg = vec![vec![None; dim]; n];
    for (i, (e, o)) in events.iter().zip(outputs).enumerate() {
        let w = (e.t / dt) as usize;
        for d in 0..dim {
            if o[d] > feat[w][d] {
                feat[w][d] = o[d];
                arg[w][d] = Some(i);
            }
        }
    }
    (feat, arg)
}

/// Loss and gradients of a KWS model over one sample. `target` is the CONF
/// target window.
pub fn kws_sample(
    m: &Model,
    events: &[Event],
    duration_us: u32,
    label: usize,
    target: Option<usize>,
    loss_cfg: &LossConfig,
    want_grad: bool,
) -> Result<SampleGrad> {
    let Head::Kws(head) = &m.head else {
        return Err(Error::config("model_type", "expected a kws model"));
    };
    let dt = m.config.delta_t_us;
    let tr = backbone_forward(m, events)?;
    let (wins, arg) = pool_windows(&tr.outputs, events, m.config.feature_dim(), dt, num_windows(duration_us, dt));
    let ht = head_forward(head, &wins)?;
    let conf: Vec<f64> = ht.steps.iter().map(|s| s.conf).collect();
    let cls: Vec<Vec<f64>> = ht.steps.iter().map(|s| s.cls.clone()).collect();
    let l = loss_kws(&cls, &conf, target, label, loss_cfg)?;
    let mut pattern = tr.pattern();
    for a in &arg {
        pattern.extend(a.iter().map(|v| v.map_or(usize::MAX, |i| i)));
    }
    for s in &ht.steps {
        for a in &s.stem[1..] {
            pattern.extend(a.iter().map(|&v| usize::from(v > 0.0)));
        }
    }
    pattern.push(l.best_window);
    let grads = if want_grad {
        let mut g = zeros_like(m);
        let dwin = head_backward(head, &wins, &ht, &l.d_cls, &l.d_conf, &mut g);
        let d_out = pool_windows_backward(&arg, &dwin, events.len(), m.config.feature_dim());
        backbone_backward(m, &tr, d_out, &mut g);
        Some(g)
    } else {
        None
    };
    Ok(SampleGrad {
        loss: l.total,
        predicted: argmax(&cls[l.best_window]),
        grads,
        pattern,
    })
}

/// Routes window gradients to the winning events.
pub fn pool_windows_backward(arg: &PoolArgs, dwin: &[Vec<f64>], num_events: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut d_out = vec![vec![0.0; dim]; num_events];
    for (w, gw) in dwin.iter().enumerate() {
        for (d, &v) in gw.iter().enumerate() {
            if let Some(i) = arg[w][d] {
                d_out[i][d] += v;
            }
        }
    }
    d_out
}

struct HeadStep {
    stem: Vec<Vec<f64>>,
    h_prev: Vec<f64>,
    gru: GruTrace,
    cls: Vec<f64>,
    conf: f64,
}

struct HeadTrace {
    steps: Vec<HeadStep>,
}

fn head_forward(head: &KwsHead, wins: &[Vec<f64>]) -> Result<HeadTrace> {
    let mut h = vec![0.0; head.gru.hidden_dim()];
    let mut steps = Vec::with_capacity(wins.len());
    for w in wins {
        let stem = head.stem.forward_trace(w)?;
        let x = stem.last().map_or(&w[..], |v| v);
        let gru = head.gru.step_trace(x, &h, None)?;
        let cls = head.cls.forward(&gru.h)?;
        let conf = head.conf.forward(&gru.h)?[0];
        let h_prev = std::mem::replace(&mut h, gru.h.clone());
        steps.push(HeadStep {
            stem,
            h_prev,
            gru,
            cls,
            conf,
        });
    }
    Ok(HeadTrace { steps })
}

/// Backpropagation through time over the head. Returns window-feature
/// gradients.
fn head_backward(head: &KwsHead, wins: &[Vec<f64>], ht: &HeadTrace, d_cls: &[Vec<f64>], d_conf: &[f64], g: &mut Model) -> Vec<Vec<f64>> {
    let Head::Kws(gh) = &mut g.head else { unreachable!() };
    let mut dh_next = vec![0.0; head.gru.hidden_dim()];
    let mut dwin = vec![Vec::new(); wins.len()];
    for t in (0..ht.steps.len()).rev() {
        let s = &ht.steps[t];
        gh.cls.w.add_outer(&d_cls[t], &s.gru.h);
        for (b, v) in gh.cls.b.iter_mut().zip(&d_cls[t]) {
            *b += v;
        }
        gh.conf.w.add_outer(&[d_conf[t]], &s.gru.h);
        gh.conf.b[0] += d_conf[t];
        let mut dh = head.cls.w.matvec_t(&d_cls[t]);
        for ((a, b), c) in dh.iter_mut().zip(head.conf.w.matvec_t(&[d_conf[t]])).zip(&dh_next) {
            *a += b + c;
        }
        let x = s.stem.last().map_or(&wins[t][..], |v| v);
        let (dx, dh_prev) = gru_backward(&head.gru, x, &s.h_prev, &s.gru, &dh, &mut gh.gru);
        dwin[t] = mlp_backward(&head.stem, &s.stem, &dx, &mut gh.stem);
        dh_next = dh_prev;
    }
    dwin
}
