use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
[benchmark]
train = 20
val = 6
test = 6

[mapper]
epochs = 2

[predictor]
epochs = 2

[gate]
epochs = 2

[eval]
svg_limit = 1
"#;

fn scenegate(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scenegate"));
    cmd.env_remove("SCENEGATE_OUT").arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{extra}\n{SMOKE}")).unwrap();
    p
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn staged_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 4");
    let out = dir.path().join("out");

    let o = scenegate(&out, Some(&cfg), &["generate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("[3,inf)") && stdout.contains("train"), "{stdout}");

    for stage in ["mapper", "predictor-base", "predictor-unc", "gate"] {
        let o = scenegate(&out, Some(&cfg), &["train", "--stage", stage]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(format!("checkpoints/{stage}.ckpt")).exists());
        assert!(out.join(format!("logs/{stage}_loss.csv")).exists());
    }
    let o = scenegate(&out, Some(&cfg), &["eval", "--streams", "base,unc,gated", "--svg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read(out.join("eval/report.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 1 + 3 * 5);
    assert_eq!(fs::read_dir(out.join("eval/svg")).unwrap().count(), 1);
    assert!(out.join("meta/eval.json").exists());
    assert!(fs::read_to_string(out.join("config.effective.toml")).unwrap().contains("seed = 4"));

    // Same eval twice gives the same bytes; report rebuilds them from the log.
    assert_eq!(code(&scenegate(&out, Some(&cfg), &["eval", "--streams", "base,unc,gated"])), 0);
    assert_eq!(fs::read(out.join("eval/report.csv")).unwrap(), csv);
    assert_eq!(code(&scenegate(&out, Some(&cfg), &["report"])), 0);
    assert_eq!(fs::read(out.join("eval/report.csv")).unwrap(), csv);
}

#[test]
fn seed_flag_and_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let cfg = write_config(dir.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_scenegate"))
        .env("SCENEGATE_OUT", &out)
        .args(["--seed", "11", "--config"])
        .arg(&cfg)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("data").exists());
    assert!(fs::read_to_string(out.join("config.effective.toml")).unwrap().contains("seed = 11"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[benchmark]\nquotas = [0.5, 0.5, 0.5, 0.5]\n").unwrap();
    assert_eq!(code(&scenegate(&out, Some(&bad), &["generate"])), 2);
    fs::write(&bad, "[gate]\ntemperature = -1.0\n").unwrap();
    assert_eq!(code(&scenegate(&out, Some(&bad), &["generate"])), 2);
    assert_eq!(code(&scenegate(&out, Some(&dir.path().join("absent.toml")), &["generate"])), 2);
    assert_eq!(code(&scenegate(&out, None, &["train", "--stage", "predictor"])), 2);
    assert!(!out.join("data").exists());
}

#[test]
fn missing_artifacts_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(code(&scenegate(&out, Some(&cfg), &["train", "--stage", "mapper"])), 3);
    assert_eq!(code(&scenegate(&out, Some(&cfg), &["generate"])), 0);
    let o = scenegate(&out, Some(&cfg), &["train", "--stage", "gate"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing upstream"));
    assert_eq!(code(&scenegate(&out, Some(&cfg), &["eval", "--streams", "base"])), 3);
    assert_eq!(code(&scenegate(&out, Some(&cfg), &["report"])), 3);
}

#[test]
fn diverging_training_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMOKE.replace("[mapper]\nepochs = 2", "[mapper]\nepochs = 2\nlr = 1e300\nclip_norm = 1e300")).unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&scenegate(&out, Some(&cfg), &["generate"])), 0);
    let o = scenegate(&out, Some(&cfg), &["train", "--stage", "mapper"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
