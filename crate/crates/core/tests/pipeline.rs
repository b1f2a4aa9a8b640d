use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use scenegate_core::metrics::{binned_report, logs_from_jsonl, StreamTag};
use scenegate_core::pipeline::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_report, cmd_run_all, cmd_train, Layout, RunConfig, Stage,
};
use scenegate_core::Error;

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn report_layout_on_reference_fixture() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reference_bins.jsonl")).unwrap();
    let logs = logs_from_jsonl(&text).unwrap();
    let metrics: Vec<_> = logs.iter().flat_map(|l| l.metrics()).collect();
    let csv = binned_report(&metrics).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "stream,bin,n,minADE,minFDE,MR");
    assert!(lines.contains(&"base,[0,1),1,0.346600,0.598000,0.000000"), "{csv}");
    assert!(lines.contains(&"unc,[0,1),1,0.349000,0.601600,0.000000"), "{csv}");
    assert!(lines.contains(&"unc,[3,inf),1,1.200000,1.900000,0.000000"), "{csv}");
    // 4 bins and one overall row per stream.
    assert_eq!(lines.len() - 1, 2 * 5);
    assert!(lines.contains(&"base,overall,4,0.766650,1.799500,50.000000"), "{csv}");
}

#[test]
fn smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::smoke();
    let layout = Layout::new(dir.path().join("nested/out"), &cfg);
    let eval = cmd_run_all(&cfg, &layout).unwrap();

    for stage in Stage::ALL {
        assert!(layout.checkpoint(stage).exists(), "{}", stage.name());
        let csv = fs::read_to_string(layout.loss_csv(stage)).unwrap();
        assert_eq!(csv.lines().count(), 1 + cfg.mapper.epochs.max(cfg.predictor.epochs).max(cfg.gate.epochs));
    }
    let csv = fs::read_to_string(layout.report_csv()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
    assert_eq!(eval.logs.len(), cfg.benchmark.test);
    for l in &eval.logs {
        let (wb, wu) = (l.w_base.unwrap(), l.w_unc.unwrap());
        assert!((wb + wu - 1.0).abs() < 1e-9);
    }
    let svgs = fs::read_dir(layout.svg_dir()).unwrap().count();
    assert_eq!(svgs, cfg.eval.svg_limit);
    let effective = RunConfig::load(&layout.effective_config()).unwrap();
    assert_eq!(effective, cfg);

    // The report can be rebuilt from the scene log alone.
    let before = fs::read(layout.report_csv()).unwrap();
    let rebuilt = cmd_report(&layout).unwrap();
    assert_eq!(rebuilt, eval.report);
    assert_eq!(fs::read(layout.report_csv()).unwrap(), before);
}

#[test]
fn identical_runs_are_byte_identical() {
    let cfg = RunConfig::smoke();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        cmd_run_all(&cfg, &Layout::new(d.path(), &cfg)).unwrap();
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let keys: Vec<_> = fa.keys().filter(|k| !k.starts_with("meta")).collect();
    assert!(keys.len() > 10);
    assert_eq!(keys, fb.keys().filter(|k| !k.starts_with("meta")).collect::<Vec<_>>());
    for k in keys {
        assert!(fa[k] == fb[k], "{} differs", k.display());
    }

    let mut other = cfg.clone();
    other.seed = 1;
    let c = tempfile::tempdir().unwrap();
    let layout = Layout::new(c.path(), &other);
    cmd_run_all(&other, &layout).unwrap();
    assert_ne!(fs::read(layout.checkpoint(Stage::Mapper)).unwrap(), fa[Path::new("checkpoints/mapper.ckpt")]);
}

#[test]
fn gate_without_predictors_is_missing_upstream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::smoke();
    let layout = Layout::new(dir.path(), &cfg);
    assert!(matches!(cmd_train(&cfg, &layout, Stage::Mapper), Err(Error::MissingUpstream(_))));
    cmd_generate(&cfg, &layout).unwrap();
    assert!(matches!(cmd_train(&cfg, &layout, Stage::Gate), Err(Error::MissingUpstream(_))));
    assert!(matches!(cmd_train(&cfg, &layout, Stage::PredictorUnc), Err(Error::MissingUpstream(_))));
    cmd_train(&cfg, &layout, Stage::Mapper).unwrap();
    cmd_train(&cfg, &layout, Stage::PredictorBase).unwrap();
    assert!(matches!(cmd_train(&cfg, &layout, Stage::Gate), Err(Error::MissingUpstream(_))));
}

#[test]
fn eval_without_checkpoints_is_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::smoke();
    let layout = Layout::new(dir.path(), &cfg);
    cmd_generate(&cfg, &layout).unwrap();
    assert!(matches!(cmd_eval(&cfg, &layout, &[StreamTag::Base], false), Err(Error::MissingCheckpoint(_))));
    for stage in [Stage::Mapper, Stage::PredictorBase, Stage::PredictorUnc] {
        cmd_train(&cfg, &layout, stage).unwrap();
    }
    // Base and unc work without a gate; gated does not.
    let eval = cmd_eval(&cfg, &layout, &[StreamTag::Base, StreamTag::Unc], false).unwrap();
    assert!(eval.logs.iter().all(|l| l.gated.is_none() && l.w_base.is_none()));
    assert!(matches!(cmd_eval(&cfg, &layout, &StreamTag::ALL, false), Err(Error::MissingCheckpoint(_))));
    assert!(matches!(cmd_report(&Layout::new(dir.path().join("x"), &cfg)), Err(Error::MissingUpstream(_))));
}

#[test]
fn config_validation_and_round_trip() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    let partial = RunConfig::from_toml_str("seed = 7\n[mapper]\nepochs = 2\n").unwrap();
    assert_eq!((partial.seed, partial.mapper.epochs, partial.mapper.lr), (7, 2, 1.5e-4));
    assert_eq!((partial.predictor.lr, partial.gate.temperature, partial.gate.dropout), (5e-4, 0.6, 0.1));
    assert_eq!(partial.gate.fusion, scenegate_core::gating::FusionMode::Matched);

    for bad in [
        "unknown = 1",
        "schema_version = 9",
        "[gate]\ntemperature = 0.0",
        "[mapper]\nlr = -1.0",
        "[ablation]\nseeds = 0",
        "loss_kind = \"laplace_cov\"",
    ] {
        let err = RunConfig::from_toml_str(bad).unwrap_err();
        assert!(matches!(err, Error::Config(_) | Error::InvalidTemperature(_)), "{bad}: {err}");
    }
    let mut quotas = RunConfig::default();
    quotas.benchmark.quotas[0] += 0.2;
    assert!(matches!(quotas.validate(), Err(Error::Config(_))));
    assert!(matches!("predictor".parse::<Stage>(), Err(Error::Config(_))));
    assert_eq!("predictor-unc".parse::<Stage>().unwrap(), Stage::PredictorUnc);
}

#[test]
fn ablation_table_has_rows_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::smoke();
    cfg.ablation.seeds = 2;
    let layout = Layout::new(dir.path(), &cfg);
    cmd_generate(&cfg, &layout).unwrap();
    let table = cmd_ablate(&cfg, &layout).unwrap();
    assert_eq!(table.rows.len(), 2 * 3);
    let csv = fs::read_to_string(layout.ablation_dir().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 2 * 3);
    let md = fs::read_to_string(layout.ablation_dir().join("ablation.md")).unwrap();
    assert!(md.contains("laplace_cov"));
    for r in &table.rows {
        assert!(r.mapper_nll.is_finite() && r.min_ade > 0.0 && (0.0..=100.0).contains(&r.mr));
    }
}
