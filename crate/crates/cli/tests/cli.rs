use std::path::Path;
use std::process::{Command, Output};

fn evgraph(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evgraph")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn perf_reports_base_cycles_and_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let o = evgraph(&["perf", "--out", "p"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("352 cycles/event"), "{text}");
    assert!(text.contains("568.2 kEPS"), "{text}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("p/perf.json")).unwrap()).unwrap();
    assert_eq!(v["bottleneck_cycles"], 352);
}

#[test]
fn trained_toy_model_classifies_held_out_set() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("train.toml"),
        "seed = 3\nout = \"t\"\n[model]\npreset = \"tiny\"\nnum_classes = 2\n[input.toy]\nn = 200\nseed = 11\n[train]\nepochs = 20\nlearning_rate = 3e-3\n[quant]\nbits = 8\n",
    )
    .unwrap();
    assert!(evgraph(&["train", "--config", "train.toml"], dir.path()).status.success());
    std::fs::write(
        dir.path().join("cls.toml"),
        "out = \"c\"\n[model]\nweights = \"t/model_int.json\"\n[input.toy]\nn = 50\nseed = 12\n[eval]\npredictions = \"c/classify.json\"\n",
    )
    .unwrap();
    for mode in ["real", "integer"] {
        let o = evgraph(&["classify", "--config", "cls.toml", "--mode", mode], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("c/classify.json")).unwrap()).unwrap();
        assert!(v["metrics"]["accuracy"].as_f64().unwrap() >= 0.9, "{mode}: {}", stdout(&o));
    }
    let o = evgraph(&["eval", "--config", "cls.toml"], dir.path());
    assert!(stdout(&o).contains("accuracy"));
}

#[test]
fn validation_errors_name_the_key_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[labeler]\ndelta_t_ms = 0\n[input.toy]\nn = 2\nseed = 0\n").unwrap();
    let o = evgraph(&["label", "--config", "bad.toml"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("labeler.delta_t_ms"));

    let o = evgraph(&["classify", "--mode", "float"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));

    // Integer mode on a float checkpoint.
    std::fs::write(dir.path().join("t.toml"), "out = \"t\"\n[model]\npreset = \"tiny\"\nnum_classes = 2\n[input.toy]\nn = 4\nseed = 0\n[train]\nepochs = 1\n").unwrap();
    assert!(evgraph(&["train", "--config", "t.toml"], dir.path()).status.success());
    std::fs::write(dir.path().join("c.toml"), "[model]\nweights = \"t/model.json\"\n[input.toy]\nn = 4\nseed = 0\n").unwrap();
    let o = evgraph(&["classify", "--config", "c.toml", "--mode", "integer", "--out", "c"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("quantization"));

    let o = evgraph(&["classify"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("input"));
}
