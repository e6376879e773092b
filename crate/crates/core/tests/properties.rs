use evgraph::conv::positional_norm;
use evgraph::events::{parse_binary, parse_text, to_binary, to_text, Event, EventStream, ReadOptions, StreamHeader};
use evgraph::graph::{brute_force_graph, build_graph, GraphGenConfig};
use evgraph::labeler::{extract_segment, LabelerConfig};
use evgraph::pool::{max_pool_stream, num_windows, AvgAccumulator};
use evgraph::quant::{QuantParams, Requant};
use proptest::prelude::*;

fn events_strategy(num_channels: u32, duration: u32, max_len: usize) -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec((0..duration, 0..num_channels), 0..max_len).prop_map(|mut v| {
        v.sort_unstable();
        v.into_iter().map(|(t, ch)| Event::new(t, ch as u16)).collect()
    })
}

fn graph_cfg() -> impl Strategy<Value = GraphGenConfig> {
    (0u32..40, 1u32..8, 1u32..50_000).prop_map(|(r_ch, skip, r_t_us)| GraphGenConfig {
        r_ch,
        r_t_us,
        skip: if r_ch == 0 { skip } else { skip.min(r_ch) },
        num_channels: 64,
        t_norm_us: 1_000_000,
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn streaming_graph_equals_brute_force(cfg in graph_cfg(), ev in events_strategy(64, 200_000, 300)) {
        prop_assert_eq!(build_graph(&ev, &cfg).unwrap(), brute_force_graph(&ev, &cfg).unwrap());
    }

    #[test]
    fn edge_count_never_exceeds_max_edge(cfg in graph_cfg(), ev in events_strategy(64, 50_000, 400)) {
        for v in build_graph(&ev, &cfg).unwrap() {
            prop_assert!(v.edges.len() <= cfg.max_edge());
        }
    }

    #[test]
    fn positional_norm_stays_in_range(r_ch in 1u32..200, r_t in 1u32..100_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = GraphGenConfig { r_ch, r_t_us: r_t, ..Default::default() };
        let d_ch = ((a * 2.0 - 1.0) * f64::from(r_ch)).round() as i64;
        let d_t = -((b * f64::from(r_t)).round() as i64);
        let [p_ch, p_t] = positional_norm(d_ch, d_t, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&p_ch));
        prop_assert!((0.0..=1.0).contains(&p_t));
    }

    #[test]
    fn average_pool_ignores_order(mut xs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..50), seed in any::<u64>()) {
        let mut a = AvgAccumulator::new(3);
        xs.iter().for_each(|x| a.add(x));
        let before = a.finalize().unwrap();
        let n = xs.len();
        xs.rotate_left((seed as usize) % n);
        xs.reverse();
        let mut b = AvgAccumulator::new(3);
        xs.iter().for_each(|x| b.add(x));
        for (p, q) in before.iter().zip(b.finalize().unwrap()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn max_pool_emits_every_window_and_bounds_inputs(ts in prop::collection::vec(0u32..100_000, 0..200), dt in 1_000u32..30_000) {
        let mut ts = ts;
        ts.sort_unstable();
        let ev: Vec<(u32, Vec<f64>)> = ts.iter().map(|&t| (t, vec![f64::from(t % 97)])).collect();
        let n = num_windows(100_000, dt);
        let w = max_pool_stream(&ev, 1, dt, 0.0, n).unwrap();
        prop_assert_eq!(w.len(), n);
        for (i, win) in w.iter().enumerate() {
            prop_assert_eq!(win.window_index, i);
            let inside = ev.iter().filter(|(t, _)| (*t / dt) as usize == i);
            let want = inside.map(|(_, f)| f[0]).fold(0.0, f64::max);
            prop_assert_eq!(win.feat[0], want);
        }
    }

    #[test]
    fn labeler_is_scale_invariant(start in 10u32..50, len in 8u32..30, rate in 3u32..20, k in 2u32..4) {
        let cfg = LabelerConfig::default();
        let burst = |rate: u32| -> Vec<Event> {
            let mut ev = Vec::new();
            for b in start..start + len {
                for j in 0..rate {
                    ev.push(Event::new(b * 10_000 + j * (10_000 / rate), 100));
                }
            }
            ev
        };
        let a = extract_segment(&burst(rate), &cfg).unwrap();
        let b = extract_segment(&burst(rate * k), &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn labeler_segment_shifts_with_the_burst(start in 10u32..50, shift in 0u32..30, len in 8u32..30) {
        prop_assume!(start + shift + len <= 90);
        let cfg = LabelerConfig::default();
        let burst = |s: u32| -> Vec<Event> {
            (s..s + len).flat_map(|b| (0..10).map(move |j| Event::new(b * 10_000 + j * 1_000, 7))).collect()
        };
        let a = extract_segment(&burst(start), &cfg).unwrap().unwrap();
        let b = extract_segment(&burst(start + shift), &cfg).unwrap().unwrap();
        prop_assert_eq!(b.start_bin, a.start_bin + shift as usize);
        prop_assert_eq!(b.end_bin, a.end_bin + shift as usize);
    }

    #[test]
    fn streams_round_trip(ev in events_strategy(700, 1_000_000, 200)) {
        let s = EventStream { header: StreamHeader::new(700, 1_000_000), events: ev };
        prop_assert_eq!(&parse_binary(&to_binary(&s), ReadOptions::default()).unwrap(), &s);
        prop_assert_eq!(&parse_text(&to_text(&s), ReadOptions::default()).unwrap(), &s);
    }

    #[test]
    fn quantization_error_is_half_a_step(lo in -10.0f64..0.0, span in 0.01f64..20.0, u in 0.0f64..1.0, bits in 2u8..16) {
        let qp = QuantParams::activation(lo, lo + span, bits);
        let x = qp.dequantize(qp.code_min()) + u * (qp.dequantize(qp.code_max()) - qp.dequantize(qp.code_min()));
        let q = qp.quantize(x);
        prop_assert!(q >= qp.code_min() && q <= qp.code_max());
        prop_assert!((qp.dequantize(q) - x).abs() <= qp.scale / 2.0 + 1e-12);
    }

    #[test]
    fn requant_factor_is_accurate(m in 1e-6f64..0.99) {
        let rq = Requant::from_real(m).unwrap();
        prop_assert!((rq.factor() - m).abs() / m <= 2f64.powi(-15));
    }
}
