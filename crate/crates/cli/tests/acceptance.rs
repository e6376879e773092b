//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `EVGRAPH_SHD_MANIFEST` to a converted SHD manifest to run the FLOP
//! ratio check; it is skipped otherwise.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use evgraph::conv::{conv_cycles, conv_cycles_lanes, flops_per_event};
use evgraph::events::{Event, EventStream};
use evgraph::grad::LossConfig;
use evgraph::gradcheck::gradient_suite;
use evgraph::graph::{brute_force_graph, build_graph, gen_cycles, GraphGenConfig};
use evgraph::heads::KwsOutput;
use evgraph::labeler::{extract_segment, kws_metrics, KwsDecision, LabelerConfig};
use evgraph::manifest::LoadedManifest;
use evgraph::model::{Model, ModelConfig, QuantConfig};
use evgraph::par::Exec;
use evgraph::parity::quant_parity;
use evgraph::perf::{latency_report, param_count, pipeline, throughput, PerfConfig};
use evgraph::pool::num_windows;
use evgraph::train::{evaluate, toy_dataset, train, ToySpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn within(x: f64, want: f64, rel: f64) -> bool {
    (x - want).abs() <= rel * want
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_stream(rng: &mut ChaCha8Rng, n: usize, channels: u32, duration: u32) -> Vec<Event> {
    let mut v: Vec<(u32, u32)> = (0..n).map(|_| (rng.random_range(0..duration), rng.random_range(0..channels))).collect();
    v.sort_unstable();
    v.into_iter().map(|(t, ch)| Event::new(t, ch as u16)).collect()
}

fn graph_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut vertices = 0;
    for i in 0..100 {
        let r_ch = rng.random_range(0..=150);
        let cfg = GraphGenConfig {
            r_ch,
            r_t_us: rng.random_range(1..=100_000),
            skip: if r_ch == 0 { 1 } else { rng.random_range(1..=r_ch.min(20)) },
            num_channels: 700,
            t_norm_us: 1_000_000,
        };
        let ev = random_stream(&mut rng, 1000, 700, 1_000_000);
        let a = build_graph(&ev, &cfg).map_err(|e| e.to_string())?;
        let b = brute_force_graph(&ev, &cfg).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("stream {i} differs ({cfg:?})"));
        }
        vertices += a.len();
    }
    Ok(format!("100 streams, {vertices} vertices identical"))
}

fn max_edge_law() -> Outcome {
    let cfg = GraphGenConfig {
        r_ch: 100,
        skip: 10,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0;
    for _ in 0..50 {
        let ev = random_stream(&mut rng, 2000, 700, 50_000);
        let g = build_graph(&ev, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(g.iter().map(|v| v.edges.len()).max().unwrap_or(0));
    }
    // Every channel fires once, then one event in the middle.
    let mut dense: Vec<Event> = (0..700).map(|ch| Event::new(100, ch)).collect();
    dense.push(Event::new(200, 350));
    let g = build_graph(&dense, &cfg).map_err(|e| e.to_string())?;
    let last = g.last().map_or(0, |v| v.edges.len());
    check(
        cfg.max_edge() == 21 && worst <= 21 && last == 21,
        format!("max_edge {}, random worst {worst}, dense {last}", cfg.max_edge()),
    )
}

fn cycle_formulas() -> Outcome {
    for r in [0u32, 10, 50, 100, 150] {
        for s in [1u32, 2, 5, 10] {
            let reads = 1 + 2 * u64::from(r / s);
            if gen_cycles(r, s, 4) != reads.div_ceil(2) + 4 {
                return Err(format!("gen_cycles({r}, {s})"));
            }
        }
    }
    for out in [8usize, 16, 64, 128] {
        for e in [1usize, 11, 21, 201] {
            for lanes in [1usize, 2, 4] {
                let want = (e as u64 + 1).div_ceil(2) * (2 * out as u64).div_ceil(lanes as u64);
                if conv_cycles_lanes(out, e, lanes) != want {
                    return Err(format!("conv_cycles({out}, {e}, {lanes})"));
                }
            }
        }
    }
    let base = ModelConfig::preset("base", 20).map_err(|e| e.to_string())?;
    let four = throughput(&pipeline(&base, &PerfConfig::default())).map_err(|e| e.to_string())?;
    let two_cfg = PerfConfig {
        mac_lanes: 2,
        ..Default::default()
    };
    let two = throughput(&pipeline(&base, &two_cfg)).map_err(|e| e.to_string())?;
    check(
        conv_cycles(64, 21) == 352 && within(four, 555e3, 0.05) && within(two, 277e3, 0.05),
        format!("base conv {} cycles, {:.1} kEPS (555), 2-lane {:.1} kEPS (277)", conv_cycles(64, 21), four / 1e3, two / 1e3),
    )
}

fn parameter_counts() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, want) in [("tiny", 8.6e3), ("small", 12.9e3), ("base", 18.9e3), ("big", 70.5e3), ("large", 272e3)] {
        let p = param_count(&ModelConfig::preset(name, 20).map_err(|e| e.to_string())?).total as f64;
        ok &= within(p, want, 0.03);
        parts.push(format!("{name} {p} ({want})"));
    }
    check(ok, parts.join(", "))
}

fn latency_model() -> Outcome {
    let perf = PerfConfig::default();
    let kws = latency_report(&ModelConfig::preset("kws", 20).map_err(|e| e.to_string())?, &perf).map_err(|e| e.to_string())?;
    let base = latency_report(&ModelConfig::preset("base", 20).map_err(|e| e.to_string())?, &perf).map_err(|e| e.to_string())?;
    check(
        within(kws.fe_us, 8.48, 0.15) && within(kws.head_us, 2.05, 0.15) && within(kws.total_us, 10.53, 0.15) && within(base.fe_us, 8.07, 0.15),
        format!(
            "kws fe {:.3} / head {:.3} / total {:.3} us, base fe {:.3} us",
            kws.fe_us, kws.head_us, kws.total_us, base.fe_us
        ),
    )
}

fn quantization_parity() -> Outcome {
    let spec = ToySpec {
        events_min: 16,
        events_max: 24,
        ..Default::default()
    };
    let streams: Vec<Vec<Event>> = toy_dataset(&spec, 50, 21).map_err(|e| e.to_string())?.into_iter().map(|s| s.events).collect();
    let m = Model::init(ModelConfig::preset("tiny", 2).map_err(|e| e.to_string())?, 4).map_err(|e| e.to_string())?;
    let qc = QuantConfig {
        bits: 8,
        conv_bits: vec![],
    };
    let r = quant_parity(&m, &streams, spec.duration_us, &qc, Exec::Parallel).map_err(|e| e.to_string())?;
    check(
        r.events >= 1000 && r.bit_exact() && r.event_argmax_agreement >= 0.95,
        format!(
            "{} events: {} feature / {} logit mismatches, 8-bit argmax agreement {:.4} per event, {:.4} per sample",
            r.events, r.feature_mismatches, r.logit_mismatches, r.event_argmax_agreement, r.sample_argmax_agreement
        ),
    )
}

fn gradients() -> Outcome {
    let suite = gradient_suite(20, 7);
    let bad: Vec<String> = suite.iter().filter(|g| !g.passed(20)).map(|g| g.name.to_string()).collect();
    let worst = suite.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    check(
        bad.is_empty(),
        format!("{} checks x 20 instances, worst relative error {worst:.2e} (tolerance 1e-4), failing [{}]", suite.len(), bad.join(", ")),
    )
}

fn toy_learning() -> Outcome {
    let spec = ToySpec::default();
    let tr = toy_dataset(&spec, 200, 11).map_err(|e| e.to_string())?;
    let te = toy_dataset(&spec, 50, 12).map_err(|e| e.to_string())?;
    let m = Model::init(ModelConfig::preset("tiny", 2).map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 20,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let loss = LossConfig::default();
    let out = train(&m, &tr, None, &cfg, &loss, Exec::Sequential).map_err(|e| e.to_string())?;
    let (_, acc) = evaluate(&out.model, &te, &cfg, &loss, Exec::Sequential).map_err(|e| e.to_string())?;
    check(acc >= 0.9, format!("held-out accuracy {acc:.3} after {} epochs", cfg.epochs))
}

fn labeler() -> Outcome {
    let cfg = LabelerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hits = 0;
    for _ in 0..200 {
        let start = rng.random_range(10..60u32);
        let len = rng.random_range(8..30u32);
        let rate = rng.random_range(10..40);
        let mut ev = Vec::new();
        for b in start..start + len {
            for _ in 0..rate {
                ev.push(Event::new(b * 10_000 + rng.random_range(0..10_000), rng.random_range(0..700)));
            }
        }
        ev.sort_by_key(|e| e.t);
        if let Some(s) = extract_segment(&ev, &cfg).map_err(|e| e.to_string())? {
            let end = start + len - 1;
            hits += usize::from(s.start_bin.abs_diff(start as usize) <= 1 && s.end_bin.abs_diff(end as usize) <= 1);
        }
    }
    let constant: Vec<Event> = (0..1000).map(|i| Event::new(i * 1000, 5)).collect();
    let none = extract_segment(&constant, &cfg).map_err(|e| e.to_string())?.is_none() && extract_segment(&[], &cfg).map_err(|e| e.to_string())?.is_none();
    check(
        hits as f64 >= 0.95 * 200.0 && none,
        format!("{hits}/200 within one bin, constant/empty give no segment: {none}"),
    )
}

fn out(w: usize, conf: f64, scores: [f64; 2]) -> KwsOutput {
    KwsOutput {
        window_index: w,
        class_scores: scores.to_vec(),
        confidence: conf,
    }
}

fn kws_cadence_and_metrics() -> Outcome {
    // Sample a: best window 1, class 1 correct, target 1.
    // Sample b: best window 0, class 0 correct, target 3 (too far).
    // Sample c: best window 2, class 0 wrong, target 1 (within one).
    let a = [out(0, 0.1, [0.5, 0.5]), out(1, 0.9, [0.3, 0.7]), out(2, 0.2, [0.9, 0.1])];
    let b = [out(0, 0.8, [0.9, 0.1]), out(1, 0.1, [0.1, 0.9]), out(2, 0.1, [0.1, 0.9]), out(3, 0.1, [0.1, 0.9])];
    let c = [out(0, 0.1, [0.1, 0.9]), out(1, 0.2, [0.1, 0.9]), out(2, 0.6, [0.6, 0.4])];
    let d = [
        KwsDecision::from_outputs("a", 1, &a, Some(1)),
        KwsDecision::from_outputs("b", 0, &b, Some(3)),
        KwsDecision::from_outputs("c", 1, &c, Some(1)),
    ]
    .into_iter()
    .collect::<evgraph::Result<Vec<_>>>()
    .map_err(|e| e.to_string())?;
    let m = kws_metrics(&d, 1);
    let metrics_ok = m.acc_k == 2.0 / 3.0 && m.acc_k_delta == 1.0 / 3.0 && m.word_end_rate == 2.0 / 3.0;

    let mut mc = ModelConfig::kws(&[8, 8], 3);
    mc.stem_dims = [8, 8];
    mc.hidden_dim = 8;
    let model = Model::init(mc, 1).map_err(|e| e.to_string())?;
    let dt = model.config.delta_t_us;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cadence_ok = true;
    let mut streams = 0;
    for duration in [1u32, 9_999, 10_000, 10_001, 250_000, 1_000_000] {
        for n in [0usize, 1, 50] {
            let mut ev = random_stream(&mut rng, n, 700, duration);
            if n == 1 {
                ev = vec![Event::new(duration, 3)];
            }
            let o = model.kws(&ev, duration).map_err(|e| e.to_string())?;
            let last = ev.last().map_or(0, |e| (e.t / dt) as usize + 1);
            let want = num_windows(duration, dt).max(last);
            cadence_ok &= o.len() == want && o.iter().enumerate().all(|(i, w)| w.window_index == i);
            streams += 1;
        }
    }
    check(
        metrics_ok && cadence_ok,
        format!(
            "Acc_K {:.4}, Acc_K,delta {:.4}, word-end {:.4}; one output per window on {streams} streams: {cadence_ok}",
            m.acc_k, m.acc_k_delta, m.word_end_rate
        ),
    )
}

fn run_cli(args: &[&str], config: &Path, workers: usize, out: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_evgraph"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--workers")
        .arg(workers.to_string())
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let write = |name: &str, body: &str| {
        let p = d.join(name);
        std::fs::write(&p, body).map(|_| p).map_err(|e| e.to_string())
    };
    let data = "[input.toy]\nn = 24\nseed = 3\n";
    let train_cls = write("train_cls.toml", &format!("seed = 5\n[model]\npreset = \"tiny\"\nnum_classes = 2\n{data}[train]\nepochs = 3\nlearning_rate = 3e-3\n[quant]\nbits = 8\n"))?;
    let train_kws = write(
        "train_kws.toml",
        &format!("seed = 5\n[model]\npreset = \"kws\"\nnum_classes = 2\n[model.graph]\nskip = 20\n{data}[train]\nepochs = 2\nlearning_rate = 1e-3\n[quant]\nbits = 8\n"),
    )?;
    let mut docs = Vec::new();
    for w in [1usize, 4] {
        let o = d.join(format!("w{w}"));
        run_cli(&["train"], &train_cls, w, &o.join("cls"))?;
        run_cli(&["train"], &train_kws, w, &o.join("kws"))?;
        let cls = write(
            &format!("cls{w}.toml"),
            &format!("[model]\nweights = \"w{w}/cls/model_int.json\"\n{data}[eval]\npredictions = \"w{w}/real/classify.json\"\n"),
        )?;
        let kws = write(
            &format!("kws{w}.toml"),
            &format!("[model]\nweights = \"w{w}/kws/model_int.json\"\n{data}[eval]\npredictions = \"w{w}/real/kws.json\"\n"),
        )?;
        run_cli(&["classify"], &cls, w, &o.join("real"))?;
        run_cli(&["classify", "--mode", "integer"], &cls, w, &o.join("int"))?;
        run_cli(&["eval"], &cls, w, &o.join("eval_cls"))?;
        run_cli(&["kws"], &kws, w, &o.join("real"))?;
        run_cli(&["kws", "--mode", "integer"], &kws, w, &o.join("int"))?;
        run_cli(&["eval"], &kws, w, &o.join("eval_kws"))?;
        run_cli(&["label"], &cls, w, &o.join("label"))?;
        run_cli(&["perf"], &cls, w, &o.join("perf"))?;
        docs.push(o);
    }
    let files = [
        "cls/model.json",
        "cls/model_int.json",
        "cls/train_state.json",
        "kws/model.json",
        "kws/model_int.json",
        "kws/train_state.json",
        "real/classify.json",
        "int/classify.json",
        "eval_cls/eval.json",
        "real/kws.json",
        "int/kws.json",
        "eval_kws/eval.json",
        "label/label.json",
        "label/segments.csv",
        "perf/perf.json",
    ];
    for f in files {
        let a = std::fs::read(docs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(docs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between 1 and 4 workers"));
        }
    }
    Ok(format!("{} outputs of all six subcommands byte-identical at 1 and 4 workers", files.len()))
}

/// Mean edges per event over up to 200 samples of a converted SHD manifest.
fn flop_ratio(manifest: &str) -> Outcome {
    let lm = LoadedManifest::read(Path::new(manifest)).map_err(|e| e.to_string())?;
    let streams: Vec<EventStream> = lm
        .manifest
        .entries
        .iter()
        .take(200)
        .map(|e| lm.load(e))
        .collect::<evgraph::Result<_>>()
        .map_err(|e| e.to_string())?;
    let base = ModelConfig::preset("base", 20).map_err(|e| e.to_string())?;
    let dims = base.conv_shapes();
    let per_edge = flops_per_event(&dims, 0) as f64;
    let mflops = |skip: u32| -> Result<f64, String> {
        let cfg = GraphGenConfig { skip, ..base.graph };
        let (mut edges, mut n) = (0usize, 0usize);
        for s in &streams {
            let g = build_graph(&s.events, &cfg).map_err(|e| e.to_string())?;
            edges += g.iter().map(|v| v.edges.len()).sum::<usize>();
            n += g.len();
        }
        Ok(per_edge * (edges as f64 / n.max(1) as f64 + 1.0) / 1e6)
    };
    let (a, b) = (mflops(1)?, mflops(10)?);
    check(
        within(a / b, 9.7, 0.10),
        format!("skip 1: {a:.3} MFLOPs/ev, skip 10: {b:.3} MFLOPs/ev, ratio {:.2} (9.7)", a / b),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("graph oracle equivalence", graph_oracle),
        ("MAX_EDGE law", max_edge_law),
        ("cycle formulas and throughput", cycle_formulas),
        ("parameter counts", parameter_counts),
        ("latency model", latency_model),
        ("quantization parity", quantization_parity),
        ("gradient suite", gradients),
        ("toy learning", toy_learning),
        ("labeler", labeler),
        ("KWS cadence and metrics", kws_cadence_and_metrics),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.2} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.2} s]");
            }
        }
    }
    match std::env::var("EVGRAPH_SHD_MANIFEST") {
        Ok(p) => {
            let t = Instant::now();
            match flop_ratio(&p) {
                Ok(d) => println!("PASS  FLOP ratio: {d} [{:.2} s]", t.elapsed().as_secs_f64()),
                Err(d) => {
                    failed += 1;
                    println!("FAIL  FLOP ratio: {d}");
                }
            }
        }
        Err(_) => println!("SKIP  FLOP ratio: EVGRAPH_SHD_MANIFEST not set"),
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
