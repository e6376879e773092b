use evgraph::model::{Model, ModelConfig, QuantConfig};
use evgraph::par::Exec;
use evgraph::parity::quant_parity;
use evgraph::train::{toy_dataset, ToySpec};

fn streams() -> (Vec<Vec<evgraph::events::Event>>, u32) {
    let spec = ToySpec { events_min: 16, events_max: 24, ..Default::default() };
    let data = toy_dataset(&spec, 50, 21).unwrap();
    (data.into_iter().map(|s| s.events).collect(), spec.duration_us)
}

#[test]
fn integer_path_matches_fake_quant_bit_for_bit() {
    let (ev, dur) = streams();
    let m = Model::init(ModelConfig::preset("tiny", 2).unwrap(), 4).unwrap();
    let r8 = quant_parity(&m, &ev, dur, &QuantConfig { bits: 8, conv_bits: vec![] }, Exec::Parallel).unwrap();
    assert!(r8.events >= 1000);
    assert!(r8.bit_exact(), "{r8:?}");
    assert!(r8.event_argmax_agreement >= 0.95, "{r8:?}");
    assert!(r8.sample_argmax_agreement >= 0.95, "{r8:?}");

    let r16 = quant_parity(&m, &ev, dur, &QuantConfig { bits: 16, conv_bits: vec![] }, Exec::Parallel).unwrap();
    assert!(r16.bit_exact(), "{r16:?}");
    assert!(r16.event_argmax_agreement >= r8.event_argmax_agreement);
}

#[test]
fn parity_is_independent_of_workers() {
    let (ev, dur) = streams();
    let m = Model::init(ModelConfig::preset("tiny", 2).unwrap(), 9).unwrap();
    let qc = QuantConfig { bits: 8, conv_bits: vec![] };
    assert_eq!(
        quant_parity(&m, &ev, dur, &qc, Exec::Sequential).unwrap(),
        quant_parity(&m, &ev, dur, &qc, Exec::Parallel).unwrap()
    );
}
