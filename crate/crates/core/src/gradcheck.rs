//! Central finite-difference checks of every analytic gradient.
//!
//! Each check draws random instances, flattens the differentiable inputs
//! into one vector and compares analytic against numeric derivatives. An
//! instance whose max winners or ReLU masks change under the perturbation
//! sits on a kink and is redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{BatchNorm, ConvLayerParams, Message};
use crate::events::{synth_stream, Burst, BurstShape, Event, SynthSpec};
use crate::grad::{
    classifier_sample, conv_backward, cross_entropy, gru_backward, kws_sample, loss_kws, mlp_backward, params, params_mut,
    pool_windows, pool_windows_backward, LossConfig,
};
use crate::heads::{GruParams, Linear, Mlp};
use crate::model::{Model, ModelConfig};
use crate::tensor::{dot, Matrix};

pub const REL_TOL: f64 = 1e-4;
pub const CE_REL_TOL: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-8;
const H: f64 = 1e-6;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub instances: usize,
    pub coords: usize,
    pub redraws: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub rel_tol: f64,
}

impl GradCheck {
    fn new(name: &str, rel_tol: f64) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            coords: 0,
            redraws: 0,
            failures: 0,
            max_rel_err: 0.0,
            rel_tol,
        }
    }

    pub fn passed(&self, min_instances: usize) -> bool {
        self.failures == 0 && self.instances >= min_instances
    }
}

/// Loss and kink signature at a point.
type Eval<'a> = dyn Fn(&[f64]) -> (f64, Vec<usize>) + 'a;

/// Checks `coords` of `grad` at `theta`. Returns `false` without touching
/// the report when a perturbation crosses a kink.
fn check_point(rep: &mut GradCheck, theta: &[f64], grad: &[f64], coords: &[usize], f: &Eval) -> bool {
    let (_, base) = f(theta);
    let mut x = theta.to_vec();
    let mut errs = Vec::with_capacity(coords.len());
    for &c in coords {
        x[c] = theta[c] + H;
        let (lp, pp) = f(&x);
        x[c] = theta[c] - H;
        let (lm, pm) = f(&x);
        x[c] = theta[c];
        if pp != base || pm != base {
            return false;
        }
        let num = (lp - lm) / (2.0 * H);
        let a = grad[c];
        let scale = a.abs().max(num.abs());
        let ok = (a - num).abs() <= rep.rel_tol * scale + ABS_FLOOR;
        // Only where the relative term dominates the floor.
        let rel = if rep.rel_tol * scale >= ABS_FLOOR { (a - num).abs() / scale } else { 0.0 };
        errs.push((ok, rel));
    }
    rep.instances += 1;
    rep.coords += errs.len();
    for (ok, rel) in errs {
        rep.failures += usize::from(!ok);
        rep.max_rel_err = rep.max_rel_err.max(rel);
    }
    true
}

fn run(name: &str, rel_tol: f64, instances: usize, seed: u64, mut draw: impl FnMut(&mut ChaCha8Rng, &mut GradCheck) -> bool) -> GradCheck {
    let mut rep = GradCheck::new(name, rel_tol);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while rep.instances < instances && rep.redraws < MAX_REDRAWS {
        if !draw(&mut rng, &mut rep) {
            rep.redraws += 1;
        }
    }
    rep
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn check_conv(instances: usize, seed: u64) -> GradCheck {
    run("conv", REL_TOL, instances, seed, |rng, rep| {
        let n = rng.random_range(1..5);
        let o = rng.random_range(1..6);
        let k = rng.random_range(1..7);
        let bn = BatchNorm {
            gamma: uniform(rng, o, 0.5, 1.5),
            beta: uniform(rng, o, -0.5, 0.5),
            running_mean: uniform(rng, o, -0.3, 0.3),
            running_var: uniform(rng, o, 0.5, 2.0),
            eps: 1e-5,
        };
        let pns: Vec<[f64; 2]> = (0..k).map(|_| [rng.random_range(0.0..1.0), rng.random_range(-1.0..0.0)]).collect();
        let v = uniform(rng, o, -1.0, 1.0);
        let wn = o * (n + 2);
        let mut theta = uniform(rng, wn + o, -1.0, 1.0);
        theta.extend(&bn.gamma);
        theta.extend(&bn.beta);
        theta.extend(uniform(rng, k * n, 0.0, 1.0));
        let unpack = |t: &[f64]| {
            let mut b = bn.clone();
            b.gamma = t[wn + o..wn + 2 * o].to_vec();
            b.beta = t[wn + 2 * o..wn + 3 * o].to_vec();
            let p = ConvLayerParams::new(Matrix::from_vec(o, n + 2, t[..wn].to_vec()).unwrap(), t[wn..wn + o].to_vec(), Some(b)).unwrap();
            let xs: Vec<Vec<f64>> = t[wn + 3 * o..].chunks(n).map(<[f64]>::to_vec).collect();
            (p, xs)
        };
        let f = |t: &[f64]| {
            let (p, xs) = unpack(t);
            let msgs: Vec<Message<f64>> = xs.iter().zip(&pns).map(|(x, &pn)| Message { x, pn }).collect();
            let tr = p.forward_trace(&msgs).unwrap();
            let mut pat = tr.arg.clone();
            pat.extend(tr.pre.iter().map(|&v| usize::from(v > 0.0)));
            (dot(&v, &tr.out), pat)
        };
        let (p, xs) = unpack(&theta);
        let msgs: Vec<Message<f64>> = xs.iter().zip(&pns).map(|(x, &pn)| Message { x, pn }).collect();
        let tr = p.forward_trace(&msgs).unwrap();
        let mut g = p.clone();
        g.w.data.fill(0.0);
        g.b.fill(0.0);
        let gbn = g.bn.as_mut().unwrap();
        gbn.gamma.fill(0.0);
        gbn.beta.fill(0.0);
        let dx = conv_backward(&p, &msgs, &tr, &v, &mut g);
        let gbn = g.bn.as_ref().unwrap();
        let mut grad = g.w.data.clone();
        grad.extend(&g.b);
        grad.extend(&gbn.gamma);
        grad.extend(&gbn.beta);
        grad.extend(dx.into_iter().flatten());
        check_point(rep, &theta, &grad, &all(theta.len()), &f)
    })
}

fn random_mlp(rng: &mut ChaCha8Rng, dims: &[usize], relu_last: bool) -> Mlp {
    let layers = dims
        .windows(2)
        .map(|w| Linear::new(Matrix::from_vec(w[1], w[0], uniform(rng, w[0] * w[1], -1.0, 1.0)).unwrap(), uniform(rng, w[1], -0.5, 0.5)).unwrap())
        .collect();
    Mlp::new(layers, relu_last).unwrap()
}

fn mlp_flat(m: &Mlp) -> Vec<f64> {
    m.layers.iter().flat_map(|l| l.w.data.iter().chain(&l.b).copied()).collect()
}

fn mlp_unflat(m: &mut Mlp, t: &[f64]) -> usize {
    let mut at = 0;
    for l in &mut m.layers {
        let n = l.w.data.len();
        l.w.data.copy_from_slice(&t[at..at + n]);
        at += n;
        let nb = l.b.len();
        l.b.copy_from_slice(&t[at..at + nb]);
        at += nb;
    }
    at
}

pub fn check_mlp(instances: usize, seed: u64) -> GradCheck {
    run("mlp", REL_TOL, instances, seed, |rng, rep| {
        let depth = rng.random_range(1..4);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..6)).collect();
        let relu_last = rng.random_bool(0.5);
        let m = random_mlp(rng, &dims, relu_last);
        let v = uniform(rng, *dims.last().unwrap(), -1.0, 1.0);
        let mut theta = mlp_flat(&m);
        let np = theta.len();
        theta.extend(uniform(rng, dims[0], -1.0, 1.0));
        let f = |t: &[f64]| {
            let mut mm = m.clone();
            mlp_unflat(&mut mm, t);
            let acts = mm.forward_trace(&t[np..]).unwrap();
            let pat = acts[1..].iter().flatten().map(|&a| usize::from(a > 0.0)).collect();
            (dot(&v, acts.last().unwrap()), pat)
        };
        let acts = m.forward_trace(&theta[np..]).unwrap();
        let mut g = m.clone();
        mlp_unflat(&mut g, &vec![0.0; np]);
        let dx = mlp_backward(&m, &acts, &v, &mut g);
        let mut grad = mlp_flat(&g);
        grad.extend(dx);
        check_point(rep, &theta, &grad, &all(theta.len()), &f)
    })
}

fn gru_flat(g: &GruParams) -> Vec<f64> {
    let mut v = Vec::new();
    for t in [&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h] {
        v.extend(&t.data);
    }
    for b in [&g.b_z, &g.b_r, &g.b_h] {
        v.extend(b);
    }
    v
}

fn gru_unflat(g: &mut GruParams, t: &[f64]) -> usize {
    let mut at = 0;
    for m in [&mut g.w_z, &mut g.w_r, &mut g.w_h, &mut g.u_z, &mut g.u_r, &mut g.u_h] {
        let n = m.data.len();
        m.data.copy_from_slice(&t[at..at + n]);
        at += n;
    }
    for b in [&mut g.b_z, &mut g.b_r, &mut g.b_h] {
        let n = b.len();
        b.copy_from_slice(&t[at..at + n]);
        at += n;
    }
    at
}

pub fn check_gru(instances: usize, seed: u64) -> GradCheck {
    run("gru", REL_TOL, instances, seed, |rng, rep| {
        let i = rng.random_range(1..5);
        let h = rng.random_range(1..5);
        let mut p = GruParams::zeros(i, h);
        let mut theta = uniform(rng, gru_flat(&p).len(), -1.0, 1.0);
        let np = gru_unflat(&mut p, &theta);
        theta.extend(uniform(rng, i, -1.0, 1.0));
        theta.extend(uniform(rng, h, -0.9, 0.9));
        let v = uniform(rng, h, -1.0, 1.0);
        let f = |t: &[f64]| {
            let mut q = p.clone();
            gru_unflat(&mut q, t);
            (dot(&v, &q.step(&t[np..np + i], &t[np + i..]).unwrap()), Vec::new())
        };
        let (x, hp) = (&theta[np..np + i], &theta[np + i..]);
        let tr = p.step_trace(x, hp, None).unwrap();
        let mut g = GruParams::zeros(i, h);
        let (dx, dh) = gru_backward(&p, x, hp, &tr, &v, &mut g);
        let mut grad = gru_flat(&g);
        grad.extend(dx);
        grad.extend(dh);
        check_point(rep, &theta, &grad, &all(theta.len()), &f)
    })
}

pub fn check_avg_pool(instances: usize, seed: u64) -> GradCheck {
    run("avg_pool", REL_TOL, instances, seed, |rng, rep| {
        let n = rng.random_range(1..20);
        let d = rng.random_range(1..5);
        let theta = uniform(rng, n * d, 0.0, 1.0);
        let v = uniform(rng, d, -1.0, 1.0);
        let f = |t: &[f64]| {
            let mut mean = vec![0.0; d];
            for x in t.chunks(d) {
                for (m, a) in mean.iter_mut().zip(x) {
                    *m += a / n as f64;
                }
            }
            (dot(&v, &mean), Vec::new())
        };
        let grad: Vec<f64> = (0..n * d).map(|k| v[k % d] / n as f64).collect();
        check_point(rep, &theta, &grad, &all(theta.len()), &f)
    })
}

pub fn check_max_pool(instances: usize, seed: u64) -> GradCheck {
    run("window_max_pool", REL_TOL, instances, seed, |rng, rep| {
        let n = rng.random_range(1..30);
        let d = rng.random_range(1..4);
        let mut ts: Vec<u32> = (0..n).map(|_| rng.random_range(0..100)).collect();
        ts.sort_unstable();
        let events: Vec<Event> = ts.iter().map(|&t| Event::new(t, 0)).collect();
        let nw = 10;
        let theta = uniform(rng, n * d, -0.2, 1.0);
        let v: Vec<Vec<f64>> = (0..nw).map(|_| uniform(rng, d, -1.0, 1.0)).collect();
        let f = |t: &[f64]| {
            let outs: Vec<Vec<f64>> = t.chunks(d).map(<[f64]>::to_vec).collect();
            let (w, arg) = pool_windows(&outs, &events, d, 10, nw);
            let loss = w.iter().zip(&v).map(|(a, b)| dot(a, b)).sum();
            (loss, arg.into_iter().flatten().map(|a| a.map_or(usize::MAX, |i| i)).collect())
        };
        let outs: Vec<Vec<f64>> = theta.chunks(d).map(<[f64]>::to_vec).collect();
        let (_, arg) = pool_windows(&outs, &events, d, 10, nw);
        let grad: Vec<f64> = pool_windows_backward(&arg, &v, n, d).into_iter().flatten().collect();
        check_point(rep, &theta, &grad, &all(theta.len()), &f)
    })
}

pub fn check_cross_entropy(instances: usize, seed: u64) -> GradCheck {
    run("cross_entropy", CE_REL_TOL, instances, seed, |rng, rep| {
        let c = rng.random_range(2..12);
        let label = rng.random_range(0..c);
        let theta = uniform(rng, c, -3.0, 3.0);
        let f = |t: &[f64]| (cross_entropy(t, label).unwrap().0, Vec::new());
        let (_, grad) = cross_entropy(&theta, label).unwrap();
        check_point(rep, &theta, &grad, &all(c), &f)
    })
}

pub fn check_kws_loss(instances: usize, seed: u64) -> GradCheck {
    run("kws_loss", REL_TOL, instances, seed, |rng, rep| {
        let n = rng.random_range(1..15);
        let c = rng.random_range(2..6);
        let label = rng.random_range(0..c);
        let target = rng.random_bool(0.8).then(|| rng.random_range(0..n));
        let cfg = LossConfig {
            pos_weight: rng.random_range(1.0..100.0),
            ce_scale: rng.random_range(1.0..6.0),
            conf_weight: rng.random_range(0.5..2.0),
            cls_weight: rng.random_range(0.5..2.0),
        };
        let theta = uniform(rng, n * c + n, -3.0, 3.0);
        let split = |t: &[f64]| -> (Vec<Vec<f64>>, Vec<f64>) { (t[..n * c].chunks(c).map(<[f64]>::to_vec).collect(), t[n * c..].to_vec()) };
        let f = |t: &[f64]| {
            let (cls, conf) = split(t);
            let l = loss_kws(&cls, &conf, target, label, &cfg).unwrap();
            (l.total, vec![l.best_window])
        };
        let (cls, conf) = split(&theta);
        let l = loss_kws(&cls, &conf, target, label, &cfg).unwrap();
        let mut grad: Vec<f64> = l.d_cls.into_iter().flatten().collect();
        grad.extend(l.d_conf);
        check_point(rep, &theta, &grad, &all(theta.len()), &f)
    })
}

fn model_stream(rng: &mut ChaCha8Rng, count: usize) -> Vec<Event> {
    let spec = SynthSpec {
        bursts: vec![Burst {
            t_center_us: rng.random_range(40_000..60_000),
            ch_center: rng.random_range(100..600),
            t_spread_us: 8_000.0,
            ch_spread: 20.0,
            count,
            shape: BurstShape::Gaussian,
        }],
        seed: rng.random(),
        num_channels: 700,
        duration_us: 100_000,
        background: 3,
        label: None,
    };
    synth_stream(&spec).unwrap().stream.events
}

/// Two coordinates per tensor, so every layer is exercised.
fn sample_coords(rng: &mut ChaCha8Rng, m: &Model) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = 0;
    for t in params(m) {
        for _ in 0..2 {
            out.push(at + rng.random_range(0..t.len()));
        }
        at += t.len();
    }
    out
}

fn set_flat(m: &mut Model, t: &[f64]) {
    let mut at = 0;
    for p in params_mut(m) {
        let n = p.len();
        p.copy_from_slice(&t[at..at + n]);
        at += n;
    }
}

fn flat(m: &Model) -> Vec<f64> {
    params(m).into_iter().flatten().copied().collect()
}

/// Randomizes BN so its parameters carry gradient signal, and jitters every
/// parameter so zero biases do not sit on ReLU kinks for empty windows.
fn perturb(rng: &mut ChaCha8Rng, m: &mut Model) {
    for t in params_mut(m) {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    for c in &mut m.convs {
        if let Some(bn) = &mut c.bn {
            let o = bn.gamma.len();
            bn.gamma = uniform(rng, o, 0.5, 1.5);
            bn.beta = uniform(rng, o, -0.1, 0.3);
            bn.running_mean = uniform(rng, o, -0.1, 0.1);
            bn.running_var = uniform(rng, o, 0.5, 2.0);
        }
    }
}

pub fn check_classifier_model(instances: usize, seed: u64) -> GradCheck {
    run("classifier_model", REL_TOL, instances, seed, |rng, rep| {
        let mut cfg = ModelConfig::classifier(&[3, 5], 6, 3);
        cfg.graph.r_ch = 20;
        cfg.graph.skip = 4;
        let mut m = Model::init(cfg, rng.random()).unwrap();
        perturb(rng, &mut m);
        let ev = model_stream(rng, 40);
        let label = rng.random_range(0..3);
        let theta = flat(&m);
        let f = |t: &[f64]| {
            let mut mm = m.clone();
            set_flat(&mut mm, t);
            let s = classifier_sample(&mm, &ev, label, false).unwrap();
            (s.loss, s.pattern)
        };
        let s = classifier_sample(&m, &ev, label, true).unwrap();
        let grad = flat(&s.grads.unwrap());
        let coords = sample_coords(rng, &m);
        check_point(rep, &theta, &grad, &coords, &f)
    })
}

pub fn check_kws_model(instances: usize, seed: u64) -> GradCheck {
    run("kws_model", REL_TOL, instances, seed, |rng, rep| {
        let mut cfg = ModelConfig::kws(&[3, 4], 3);
        cfg.stem_dims = [5, 4];
        cfg.hidden_dim = 3;
        cfg.graph.r_ch = 20;
        cfg.graph.skip = 4;
        let mut m = Model::init(cfg, rng.random()).unwrap();
        perturb(rng, &mut m);
        let ev = model_stream(rng, 40);
        let label = rng.random_range(0..3);
        let target = Some(rng.random_range(0..10));
        let loss = LossConfig::default();
        let theta = flat(&m);
        let f = |t: &[f64]| {
            let mut mm = m.clone();
            set_flat(&mut mm, t);
            let s = kws_sample(&mm, &ev, 100_000, label, target, &loss, false).unwrap();
            (s.loss, s.pattern)
        };
        let s = kws_sample(&m, &ev, 100_000, label, target, &loss, true).unwrap();
        let grad = flat(&s.grads.unwrap());
        let coords = sample_coords(rng, &m);
        check_point(rep, &theta, &grad, &coords, &f)
    })
}

/// Every check at `instances` random instances.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<GradCheck> {
    vec![
        check_conv(instances, seed),
        check_mlp(instances, seed + 1),
        check_gru(instances, seed + 2),
        check_avg_pool(instances, seed + 3),
        check_max_pool(instances, seed + 4),
        check_cross_entropy(instances, seed + 5),
        check_kws_loss(instances, seed + 6),
        check_classifier_model(instances, seed + 7),
        check_kws_model(instances, seed + 8),
    ]
}
