use std::path::Path;
use std::process::{Command, Output};

fn mlx(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlx"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MLX_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TOY: &str = r#"{
  "seed": 1,
  "dataset": { "name": "toy2d", "toy_n": 120, "cache_dir": "cache" },
  "training": { "method": "grad-reg", "lambda": 5.0, "epochs": 3, "learning_rate": 0.01 },
  "eval": { "grid_resolution": 11 },
  "theory": { "thm1_draws": 20, "thm2_setups": 3, "prop1_samples": 5000 },
  "sweep": [
    { "method": "erm" },
    { "method": "grad-reg", "lambda": 5.0 },
    { "method": "pgd-ex", "epsilon": 0.5 },
    { "method": "ibp-ex", "epsilon": 1.0 },
    { "method": "pgd+grad", "epsilon": 0.5, "lambda": 5.0 }
  ],
  "output_dir": "runs/toy"
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("toy.json"), TOY).unwrap();
    dir
}

#[test]
fn train_then_eval_twice_is_byte_identical() {
    let dir = setup();
    let d = dir.path();
    ok(&mlx(&["gen-data", "--config", "toy.json"], d));
    let mut metrics = Vec::new();
    for out in ["a", "b"] {
        ok(&mlx(&["train", "--config", "toy.json", "--out", out, "-q"], d));
        ok(&mlx(&["eval", "--config", "toy.json", "--out", out], d));
        ok(&mlx(&["boundary-dump", "--config", "toy.json", "--out", out], d));
        metrics.push(std::fs::read(d.join(out).join("metrics.json")).unwrap());
        metrics.push(std::fs::read(d.join(out).join("boundary.csv")).unwrap());
        metrics.push(std::fs::read(d.join(out).join("history.csv")).unwrap());
    }
    assert_eq!(metrics[..3], metrics[3..]);
    let json = String::from_utf8(metrics[0].clone()).unwrap();
    assert!(json.contains("\"config_hash\"") && json.contains("\"seed\": 1"));
}

#[test]
fn sweep_emits_five_rows() {
    let dir = setup();
    let d = dir.path();
    ok(&mlx(&["gen-data", "--config", "toy.json"], d));
    let out = mlx(&["sweep", "--config", "toy.json"], d);
    ok(&out);
    let csv = std::fs::read_to_string(d.join("runs/toy/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 5);
    assert!(String::from_utf8_lossy(&out.stdout).contains("5 sweep rows"));
}

#[test]
fn rcs_without_masks_is_a_config_error() {
    let dir = setup();
    let bad = TOY.replace(r#""grid_resolution": 11"#, r#""grid_resolution": 11, "masks": false"#);
    std::fs::write(dir.path().join("bad.json"), bad).unwrap();
    let out = mlx(&["eval", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.rcs"));
}

#[test]
fn unknown_key_names_the_field() {
    let dir = setup();
    std::fs::write(dir.path().join("typo.json"), TOY.replace("\"epochs\"", "\"epoch\"")).unwrap();
    let out = mlx(&["train", "--config", "typo.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn missing_cache_points_at_gen_data() {
    let dir = setup();
    let out = mlx(&["train", "--config", "toy.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn data_dir_env_overrides_cache_location() {
    let dir = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_mlx"))
        .args(["gen-data", "--config", "toy.json"])
        .current_dir(d)
        .env("MLX_DATA_DIR", d.join("elsewhere"))
        .output()
        .unwrap();
    ok(&out);
    assert!(d.join("elsewhere").read_dir().unwrap().next().is_some());
    assert!(!d.join("cache").exists());
}

#[test]
fn seed_flag_changes_outputs() {
    let dir = setup();
    let d = dir.path();
    ok(&mlx(&["gp-verify", "--config", "toy.json", "--out", "s1"], d));
    ok(&mlx(&["gp-verify", "--config", "toy.json", "--out", "s2", "--seed", "2"], d));
    let a = std::fs::read_to_string(d.join("s1/gp_verify.json")).unwrap();
    let b = std::fs::read_to_string(d.join("s2/gp_verify.json")).unwrap();
    assert!(b.contains("\"seed\": 2"));
    assert_ne!(a, b);
}
