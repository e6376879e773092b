use std::time::Instant;

use evgraph::grad::LossConfig;
use evgraph::model::{Model, ModelConfig};
use evgraph::par::Exec;
use evgraph::train::{evaluate, toy_dataset, train, ToySpec, TrainConfig};

#[test]
fn tiny_model_learns_two_burst_classes() {
    let spec = ToySpec::default();
    let train_set = toy_dataset(&spec, 200, 11).unwrap();
    let test_set = toy_dataset(&spec, 50, 12).unwrap();
    let model = Model::init(ModelConfig::preset("tiny", 2).unwrap(), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 3e-3,
        ..Default::default()
    };
    let start = Instant::now();
    let out = train(&model, &train_set, Some(&test_set), &cfg, &LossConfig::default(), Exec::Sequential).unwrap();
    let (_, acc) = evaluate(&out.model, &test_set, &cfg, &LossConfig::default(), Exec::Sequential).unwrap();
    println!("held-out accuracy {acc:.3} in {:?}", start.elapsed());
    assert!(acc >= 0.9);
    assert!(out.state.history.len() <= 200);
}
