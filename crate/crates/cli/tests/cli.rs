use std::path::Path;
use std::process::{Command, Output};

fn lair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lair"))
        .args(args)
        .env_remove("LAIR_SEED")
        .output()
        .expect("run lair")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = r#"
n_videos = 24

[world]
seed = 4
num_classes = 3
t_frames = 4
k_slots = 3
min_frames = 4
max_frames = 5
window = 1
d_visual = 4
d_union = 4
"#;

const CONFIG: &str = r#"
epochs = 2
batch_size = 4

[model]
d_hidden = 4
d_embed = 4
d_model = 8
box_resolution = 2
n_layers = 1
n_heads = 2
gpo_len = 4
selector_dim = 4
selector_hidden = 4
"#;

fn tiny_dataset(dir: &Path) -> (String, String) {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let config = dir.join("train.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let data = dir.join("data");
    let o = lair(&["gen-data", data.to_str().unwrap(), "--spec", spec.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 24 videos"));
    (data.to_str().unwrap().into(), config.to_str().unwrap().into())
}

#[test]
fn usage_error_exits_one() {
    let o = lair(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lair(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_seed_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lair"))
        .args(["gen-data", dir.path().join("d").to_str().unwrap()])
        .env("LAIR_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("LAIR_SEED"));
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = tiny_dataset(dir.path());
    let run = dir.path().join("run");
    let run = run.to_str().unwrap();

    let o = lair(&["train", &data, run, "--config", &config]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = format!("{run}/model.ckpt");
    assert!(Path::new(&ckpt).exists());
    let history = std::fs::read_to_string(format!("{run}/metrics.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let o = lair(&["eval", &ckpt, &data, "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let trace = dir.path().join("trace.json");
    let svg = dir.path().join("trace.svg");
    let o = lair(&["explain", &ckpt, &data, "v00000", "--out", trace.to_str().unwrap(), "--plot", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("v00000:"));
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["video_id"], "v00000");
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let o = lair(&["explain", &ckpt, &data, "v99999"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("v99999"));

    let o = lair(&["eval", &format!("{run}/missing.ckpt"), &data]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_prints_a_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = tiny_dataset(dir.path());
    let json = dir.path().join("table2.json");
    let o = lair(&["ablate", "table2", &data, "--config", &config, "--seeds", "0", "--json", json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows = out.lines().filter(|l| l.starts_with('|')).count();
    assert_eq!(rows, 2 + 6, "{out}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
}
