//! Staged orchestration shared by the command-line tool and the acceptance
//! suite: dataset generation, the four training stages, evaluation and the
//! loss-distribution ablation.
//!
//! Output layout under the run root:
//!
//! ```text
//! data/                      benchmark (manifest.json + one JSON per scene)
//! config.effective.toml      resolved configuration
//! checkpoints/<stage>.ckpt   model weights
//! logs/<stage>_loss.csv      per-epoch losses
//! eval/report.{csv,json}     binned metrics
//! eval/scenes.jsonl          per-scene log
//! eval/svg/<scene>.svg       scene renders
//! ablate/ablation.{csv,md}   distribution ablation
//! meta/<command>.json        timestamps (the only non-deterministic files)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::diffcore::{derive_seed, load_checkpoint, save_checkpoint, ParamSet, TrainLog};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::gating::{
    fuse, hard_target_weights, make_target_weights, train_gate, Gate, GateConfig, GateDecision, GateMeta, GateSample,
};
use crate::mapper::{evaluate_nll, scene_samples, train_mapper, Mapper, MapperConfig, MapperMeta};
use crate::metrics::{binned_report, logs_to_jsonl, min_ade_of, min_fde_of, BinnedReport, SceneLog, StreamScore, StreamTag, MISS_THRESHOLD};
use crate::predictor::{prepare_scene, train_predictor, CandidateSet, PreparedScene, Predictor, PredictorConfig, PredictorMeta, StreamEmbedding};
use crate::render::render_scene;
use crate::scenegen::{generate_benchmark, load_benchmark, load_manifest, Benchmark, BenchmarkConfig, Manifest, Scene, FUTURE_LEN, HISTORY_LEN};
use crate::uncertainty::{LossConfig, LossKind};

pub const RUN_SCHEMA_VERSION: u32 = 1;
/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "SCENEGATE_OUT";

const PREDICT_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Number of consecutive seeds starting at the run seed.
    pub seeds: usize,
    pub kinds: Vec<LossKind>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            kinds: LossKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Scene renders written by `eval --svg`.
    pub svg_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { svg_limit: 8 }
    }
}

/// Everything a run needs. Loaded from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Dataset directory; defaults to `<out>/data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub loss_kind: LossKind,
    pub benchmark: BenchmarkConfig,
    pub mapper: MapperConfig,
    pub predictor: PredictorConfig,
    pub gate: GateConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            seed: 0,
            data_dir: None,
            loss_kind: LossKind::GaussianCov,
            benchmark: BenchmarkConfig::default(),
            mapper: MapperConfig::default(),
            predictor: PredictorConfig::default(),
            gate: GateConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported config schema {}", self.schema_version)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        self.benchmark.validate()?;
        self.mapper.validate()?;
        self.predictor.validate()?;
        self.gate.validate()?;
        if self.ablation.seeds == 0 || self.ablation.kinds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed and one loss kind".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// A small configuration for quick end-to-end runs: 32 scenes and a
    /// few epochs per stage.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.benchmark.train = 20;
        cfg.benchmark.val = 6;
        cfg.benchmark.test = 6;
        cfg.mapper.epochs = 3;
        cfg.predictor.epochs = 3;
        cfg.gate.epochs = 3;
        cfg.eval.svg_limit = 2;
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Mapper,
    PredictorBase,
    PredictorUnc,
    Gate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Mapper, Stage::PredictorBase, Stage::PredictorUnc, Stage::Gate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mapper => "mapper",
            Stage::PredictorBase => "predictor-base",
            Stage::PredictorUnc => "predictor-unc",
            Stage::Gate => "gate",
        }
    }

    fn stream(self) -> Option<StreamTag> {
        match self {
            Stage::PredictorBase => Some(StreamTag::Base),
            Stage::PredictorUnc => Some(StreamTag::Unc),
            _ => None,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Paths of one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
    data: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, cfg: &RunConfig) -> Self {
        let root = root.into();
        let data = cfg.data_dir.clone().unwrap_or_else(|| root.join("data"));
        Self { root, data }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> &Path {
        &self.data
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }

    pub fn loss_csv(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}_loss.csv", stage.name()))
    }

    pub fn effective_config(&self) -> PathBuf {
        self.root.join("config.effective.toml")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.eval_dir().join("report.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }

    pub fn scene_log(&self) -> PathBuf {
        self.eval_dir().join("scenes.jsonl")
    }

    pub fn svg_dir(&self) -> PathBuf {
        self.eval_dir().join("svg")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }

    pub fn meta_sidecar(&self, command: &str) -> PathBuf {
        self.root.join("meta").join(format!("{command}.json"))
    }
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingUpstream(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes the resolved configuration next to the outputs.
pub fn write_effective_config(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    write_file(&layout.effective_config(), cfg.to_toml())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    started_unix_ms: u128,
    elapsed_ms: u128,
    version: &'a str,
}

/// Runs `f` and records wall-clock timestamps in `meta/<command>.json`.
pub fn with_sidecar<T>(layout: &Layout, command: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let t0 = Instant::now();
    let out = f()?;
    let side = Sidecar {
        command,
        started_unix_ms: started,
        elapsed_ms: t0.elapsed().as_millis(),
        version: env!("CARGO_PKG_VERSION"),
    };
    write_file(
        &layout.meta_sidecar(command),
        serde_json::to_vec_pretty(&side).map_err(|e| Error::json(layout.meta_sidecar(command), e))?,
    )?;
    Ok(out)
}

// Seeds -------------------------------------------------------------------

fn mapper_seed(seed: u64) -> u64 {
    derive_seed(seed, "mapper")
}

/// Shared by both streams so they start from the same weights.
fn predictor_seed(seed: u64) -> u64 {
    derive_seed(seed, "predictor")
}

fn gate_seed(seed: u64) -> u64 {
    derive_seed(seed, "gate")
}

// In-memory stages ----------------------------------------------------------

pub fn mapper_meta(cfg: &RunConfig, kind: LossKind, seed: u64) -> MapperMeta {
    MapperMeta {
        model: Stage::Mapper.name().into(),
        loss_kind: kind,
        config: cfg.mapper.clone(),
        seed: mapper_seed(seed),
    }
}

pub fn fit_mapper(cfg: &RunConfig, kind: LossKind, seed: u64, bench: &Benchmark) -> Result<(Mapper, ParamSet, TrainLog)> {
    let train: Vec<_> = bench.train.iter().map(scene_samples).collect();
    let val: Vec<_> = bench.val.iter().map(scene_samples).collect();
    train_mapper(mapper_meta(cfg, kind, seed), &train, &val)
}

/// Unregularised per-vertex NLL of the mapper on `scenes`.
pub fn mapper_nll(mapper: &Mapper, params: &ParamSet, scenes: &[Scene]) -> Result<f64> {
    let samples: Vec<_> = scenes.iter().map(scene_samples).collect();
    evaluate_nll(mapper, params, &samples, &LossConfig::unregularized())
}

/// Runs the mapper on every scene and builds ego-frame predictor inputs.
pub fn prepare_split(mapper: &Mapper, params: &ParamSet, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| {
            let map = mapper.map_scene(params, s)?;
            prepare_scene(
                s.id.clone(),
                &s.history,
                &map,
                Some(&s.future_gt),
                FUTURE_LEN,
                s.dt,
                s.delta_theta_gt,
                s.delta_theta_bin,
            )
        })
        .collect()
}

pub fn predictor_meta(cfg: &RunConfig, stream: StreamTag, seed: u64) -> PredictorMeta {
    let stage = if stream == StreamTag::Base {
        Stage::PredictorBase
    } else {
        Stage::PredictorUnc
    };
    PredictorMeta {
        model: stage.name().into(),
        stream,
        config: cfg.predictor.clone(),
        history_len: HISTORY_LEN,
        horizon: FUTURE_LEN,
        seed: predictor_seed(seed),
    }
}

pub fn fit_predictor(
    cfg: &RunConfig,
    stream: StreamTag,
    seed: u64,
    train: &[PreparedScene],
    val: &[PreparedScene],
) -> Result<(Predictor, ParamSet, TrainLog)> {
    train_predictor(predictor_meta(cfg, stream, seed), train, val)
}

/// Eval-mode candidates and embeddings, in scene order.
pub fn predict_all(model: &Predictor, params: &ParamSet, scenes: &[PreparedScene]) -> Result<Vec<(CandidateSet, StreamEmbedding)>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(PREDICT_BATCH) {
        let refs: Vec<&PreparedScene> = chunk.iter().collect();
        out.extend(model.predict_batch(params, &refs)?);
    }
    Ok(out)
}

fn score(cands: &CandidateSet, gt: &[Vec2]) -> Result<StreamScore> {
    let min_fde = min_fde_of(cands.trajectories(), gt)?;
    Ok(StreamScore {
        min_ade: min_ade_of(cands.trajectories(), gt)?,
        min_fde,
        missed: min_fde > MISS_THRESHOLD,
    })
}

/// Gate labels from each stream's realised minADE.
pub fn gate_samples(
    gate_cfg: &GateConfig,
    scenes: &[Scene],
    base: &[(CandidateSet, StreamEmbedding)],
    unc: &[(CandidateSet, StreamEmbedding)],
) -> Result<Vec<GateSample>> {
    scenes
        .iter()
        .zip(base.iter().zip(unc))
        .map(|(s, ((cb, eb), (cu, eu)))| {
            let err_b = min_ade_of(cb.trajectories(), &s.future_gt)?;
            let err_u = min_ade_of(cu.trajectories(), &s.future_gt)?;
            let target = if gate_cfg.hard_targets {
                hard_target_weights(err_b, err_u)
            } else {
                make_target_weights(err_b, err_u, gate_cfg.target_temperature)
            };
            Ok(GateSample {
                emb_base: eb.clone(),
                emb_unc: eu.clone(),
                target,
            })
        })
        .collect()
}

pub fn gate_meta(cfg: &RunConfig, seed: u64) -> GateMeta {
    GateMeta {
        model: Stage::Gate.name().into(),
        config: cfg.gate.clone(),
        seed: gate_seed(seed),
    }
}

/// Trained models of a complete run.
pub struct Models {
    pub mapper: (Mapper, ParamSet),
    pub base: (Predictor, ParamSet),
    pub unc: (Predictor, ParamSet),
    pub gate: Option<(Gate, ParamSet)>,
}

/// Per-scene outputs of all streams on one split.
pub struct Evaluation {
    pub logs: Vec<SceneLog>,
    pub report: BinnedReport,
    /// Per scene: base, unc and fused candidates plus the gate decision.
    pub outputs: Vec<SceneOutput>,
}

pub struct SceneOutput {
    pub base: CandidateSet,
    pub unc: CandidateSet,
    pub gated: Option<(CandidateSet, GateDecision)>,
}

/// Runs every requested stream on `scenes`. The gated stream needs a gate.
pub fn evaluate_models(cfg: &RunConfig, models: &Models, scenes: &[Scene], streams: &[StreamTag]) -> Result<Evaluation> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no scenes to evaluate".into()));
    }
    let prepared = prepare_split(&models.mapper.0, &models.mapper.1, scenes)?;
    let base = predict_all(&models.base.0, &models.base.1, &prepared)?;
    let unc = predict_all(&models.unc.0, &models.unc.1, &prepared)?;
    let decisions = match (&models.gate, streams.contains(&StreamTag::Gated)) {
        (Some((gate, params)), true) => {
            let mut out = Vec::with_capacity(scenes.len());
            let pairs: Vec<_> = base.iter().zip(&unc).map(|((_, eb), (_, eu))| (eb, eu)).collect();
            for chunk in pairs.chunks(PREDICT_BATCH) {
                out.extend(gate.decide_batch(params, chunk, cfg.gate.temperature)?);
            }
            Some(out)
        }
        (None, true) => return Err(Error::MissingCheckpoint(PathBuf::from(Stage::Gate.name()))),
        _ => None,
    };

    let mut logs = Vec::with_capacity(scenes.len());
    let mut outputs = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let gated = match &decisions {
            Some(d) => Some((fuse(cfg.gate.fusion, &base[i].0, &unc[i].0, &d[i])?, d[i])),
            None => None,
        };
        let want = |t| streams.contains(&t);
        logs.push(SceneLog {
            scene_id: s.id.clone(),
            delta_theta: s.delta_theta_gt,
            delta_theta_bin: s.delta_theta_bin,
            w_base: gated.as_ref().map(|g| g.1.w_base),
            w_unc: gated.as_ref().map(|g| g.1.w_unc),
            base: if want(StreamTag::Base) { Some(score(&base[i].0, &s.future_gt)?) } else { None },
            unc: if want(StreamTag::Unc) { Some(score(&unc[i].0, &s.future_gt)?) } else { None },
            gated: match &gated {
                Some((c, _)) => Some(score(c, &s.future_gt)?),
                None => None,
            },
        });
        outputs.push(SceneOutput {
            base: base[i].0.clone(),
            unc: unc[i].0.clone(),
            gated,
        });
    }
    let metrics: Vec<_> = logs.iter().flat_map(|l| l.metrics()).collect();
    Ok(Evaluation {
        report: binned_report(&metrics)?,
        logs,
        outputs,
    })
}

/// Trains all four stages in memory, without touching the disk.
pub fn fit_all(cfg: &RunConfig, bench: &Benchmark) -> Result<(Models, [TrainLog; 4])> {
    let seed = cfg.seed;
    let (mapper, mp, ml) = fit_mapper(cfg, cfg.loss_kind, seed, bench)?;
    let train = prepare_split(&mapper, &mp, &bench.train)?;
    let val = prepare_split(&mapper, &mp, &bench.val)?;
    let (base, bp, bl) = fit_predictor(cfg, StreamTag::Base, seed, &train, &val)?;
    let (unc, up, ul) = fit_predictor(cfg, StreamTag::Unc, seed, &train, &val)?;
    let (gate, gp, gl) = fit_gate_from(cfg, seed, bench, (&base, &bp), (&unc, &up), &train, &val)?;
    Ok((
        Models {
            mapper: (mapper, mp),
            base: (base, bp),
            unc: (unc, up),
            gate: Some((gate, gp)),
        },
        [ml, bl, ul, gl],
    ))
}

fn fit_gate_from(
    cfg: &RunConfig,
    seed: u64,
    bench: &Benchmark,
    base: (&Predictor, &ParamSet),
    unc: (&Predictor, &ParamSet),
    train: &[PreparedScene],
    val: &[PreparedScene],
) -> Result<(Gate, ParamSet, TrainLog)> {
    let samples = |scenes: &[Scene], prep: &[PreparedScene]| -> Result<Vec<GateSample>> {
        let b = predict_all(base.0, base.1, prep)?;
        let u = predict_all(unc.0, unc.1, prep)?;
        gate_samples(&cfg.gate, scenes, &b, &u)
    };
    let train_s = samples(&bench.train, train)?;
    let val_s = samples(&bench.val, val)?;
    train_gate(gate_meta(cfg, seed), &train_s, &val_s)
}

// On-disk commands ----------------------------------------------------------

/// Generates the benchmark into the data directory.
pub fn cmd_generate(cfg: &RunConfig, layout: &Layout) -> Result<Manifest> {
    cfg.validate()?;
    write_effective_config(cfg, layout)?;
    generate_benchmark(&cfg.benchmark, layout.data_dir())
}

fn load_bench(layout: &Layout) -> Result<Benchmark> {
    load_manifest(layout.data_dir())?;
    load_benchmark(layout.data_dir())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingUpstream(path))
    }
}

pub fn load_mapper(layout: &Layout) -> Result<(Mapper, ParamSet)> {
    let (meta, params): (MapperMeta, ParamSet) = load_checkpoint(&layout.checkpoint(Stage::Mapper))?;
    Ok((Mapper::attach(meta, &params)?, params))
}

pub fn load_predictor(layout: &Layout, stage: Stage) -> Result<(Predictor, ParamSet)> {
    let (meta, params): (PredictorMeta, ParamSet) = load_checkpoint(&layout.checkpoint(stage))?;
    if Some(meta.stream) != stage.stream() {
        return Err(Error::Checkpoint(format!("{} holds a {} predictor", stage.name(), meta.stream)));
    }
    Ok((Predictor::attach(meta, &params)?, params))
}

pub fn load_gate(layout: &Layout) -> Result<(Gate, ParamSet)> {
    let (meta, params): (GateMeta, ParamSet) = load_checkpoint(&layout.checkpoint(Stage::Gate))?;
    Ok((Gate::attach(meta, &params)?, params))
}

/// Trains one stage from on-disk upstream artifacts and writes its
/// checkpoint and loss curve.
pub fn cmd_train(cfg: &RunConfig, layout: &Layout, stage: Stage) -> Result<TrainLog> {
    cfg.validate()?;
    // Upstream checks come first so a missing artifact fails fast.
    require(crate::scenegen::manifest_path(layout.data_dir()))?;
    match stage {
        Stage::Mapper => {}
        Stage::PredictorBase | Stage::PredictorUnc => {
            require(layout.checkpoint(Stage::Mapper))?;
        }
        Stage::Gate => {
            require(layout.checkpoint(Stage::Mapper))?;
            require(layout.checkpoint(Stage::PredictorBase))?;
            require(layout.checkpoint(Stage::PredictorUnc))?;
        }
    }
    write_effective_config(cfg, layout)?;
    let bench = load_bench(layout)?;
    let seed = cfg.seed;
    let (log, val_name) = match stage {
        Stage::Mapper => {
            let (m, p, log) = fit_mapper(cfg, cfg.loss_kind, seed, &bench)?;
            save_checkpoint(&layout.checkpoint(stage), m.meta(), &p)?;
            (log, "val_nll")
        }
        Stage::PredictorBase | Stage::PredictorUnc => {
            let (mapper, mp) = load_mapper(layout)?;
            let train = prepare_split(&mapper, &mp, &bench.train)?;
            let val = prepare_split(&mapper, &mp, &bench.val)?;
            let stream = stage.stream().expect("predictor stage");
            let (m, p, log) = fit_predictor(cfg, stream, seed, &train, &val)?;
            save_checkpoint(&layout.checkpoint(stage), m.meta(), &p)?;
            (log, "val_min_ade")
        }
        Stage::Gate => {
            let (mapper, mp) = load_mapper(layout)?;
            let (base, bp) = load_predictor(layout, Stage::PredictorBase)?;
            let (unc, up) = load_predictor(layout, Stage::PredictorUnc)?;
            let train = prepare_split(&mapper, &mp, &bench.train)?;
            let val = prepare_split(&mapper, &mp, &bench.val)?;
            let (g, p, log) = fit_gate_from(cfg, seed, &bench, (&base, &bp), (&unc, &up), &train, &val)?;
            save_checkpoint(&layout.checkpoint(stage), g.meta(), &p)?;
            (log, "val_mse")
        }
    };
    write_file(&layout.loss_csv(stage), log.to_csv(val_name))?;
    Ok(log)
}

/// Loads the checkpoints the requested streams need.
pub fn load_models(layout: &Layout, streams: &[StreamTag]) -> Result<Models> {
    let need_gate = streams.contains(&StreamTag::Gated);
    let mut stages = vec![Stage::Mapper, Stage::PredictorBase, Stage::PredictorUnc];
    if need_gate {
        stages.push(Stage::Gate);
    }
    for s in stages {
        let p = layout.checkpoint(s);
        if !p.exists() {
            return Err(Error::MissingCheckpoint(p));
        }
    }
    Ok(Models {
        mapper: load_mapper(layout)?,
        base: load_predictor(layout, Stage::PredictorBase)?,
        unc: load_predictor(layout, Stage::PredictorUnc)?,
        gate: if need_gate { Some(load_gate(layout)?) } else { None },
    })
}

/// Evaluates on the test split and writes the report, per-scene log and,
/// when `svg` is set, scene renders.
pub fn cmd_eval(cfg: &RunConfig, layout: &Layout, streams: &[StreamTag], svg: bool) -> Result<Evaluation> {
    cfg.validate()?;
    if streams.is_empty() {
        return Err(Error::Config("no streams requested".into()));
    }
    let models = load_models(layout, streams)?;
    let bench = load_bench(layout)?;
    write_effective_config(cfg, layout)?;
    let eval = evaluate_models(cfg, &models, &bench.test, streams)?;
    write_file(&layout.report_csv(), eval.report.to_csv())?;
    write_file(&layout.report_json(), eval.report.to_json())?;
    write_file(&layout.scene_log(), logs_to_jsonl(&eval.logs))?;
    if svg {
        for (scene, out) in bench.test.iter().zip(&eval.outputs).take(cfg.eval.svg_limit) {
            let map = models.mapper.0.map_scene(&models.mapper.1, scene)?;
            let mut sets: Vec<&CandidateSet> = Vec::new();
            if streams.contains(&StreamTag::Base) {
                sets.push(&out.base);
            }
            if streams.contains(&StreamTag::Unc) {
                sets.push(&out.unc);
            }
            if let Some((g, _)) = &out.gated {
                sets.push(g);
            }
            let path = layout.svg_dir().join(format!("{}.svg", scene.id));
            write_file(&path, render_scene(scene, Some(&map), &sets))?;
        }
    }
    Ok(eval)
}

/// Rebuilds the report from the per-scene log alone.
pub fn cmd_report(layout: &Layout) -> Result<BinnedReport> {
    let logs = crate::metrics::logs_from_jsonl(&read_file(&layout.scene_log())?)?;
    let metrics: Vec<_> = logs.iter().flat_map(|l| l.metrics()).collect();
    let report = binned_report(&metrics)?;
    write_file(&layout.report_csv(), report.to_csv())?;
    write_file(&layout.report_json(), report.to_json())?;
    Ok(report)
}

/// Generates the data if absent, trains every stage and evaluates all
/// streams with renders.
pub fn cmd_run_all(cfg: &RunConfig, layout: &Layout) -> Result<Evaluation> {
    if !crate::scenegen::manifest_path(layout.data_dir()).exists() {
        cmd_generate(cfg, layout)?;
    }
    for stage in Stage::ALL {
        cmd_train(cfg, layout, stage)?;
    }
    cmd_eval(cfg, layout, &StreamTag::ALL, true)
}

// Ablation ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub loss_kind: LossKind,
    pub seed: u64,
    /// Held-out (test) per-vertex NLL of the mapper.
    pub mapper_nll: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    /// Percent.
    pub mr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const EXCLUDED_VARIANT_NOTE: &str =
    "laplace_cov (Laplace with full covariance) is not implemented: the bivariate Laplace density with \
     correlation has no simple closed-form NLL in this parameterisation, so only three variants are compared.";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn rows_for(&self, kind: LossKind) -> impl Iterator<Item = &AblationRow> + '_ {
        self.rows.iter().filter(move |r| r.loss_kind == kind)
    }

    pub fn row(&self, kind: LossKind, seed: u64) -> Option<&AblationRow> {
        self.rows_for(kind).find(|r| r.seed == seed)
    }

    fn kinds(&self) -> Vec<LossKind> {
        let mut out: Vec<LossKind> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.loss_kind) {
                out.push(r.loss_kind);
            }
        }
        out
    }

    /// Mean and sample standard deviation of `(nll, minADE, minFDE, MR)`.
    pub fn aggregate(&self, kind: LossKind) -> [(f64, f64); 4] {
        let rows: Vec<_> = self.rows_for(kind).collect();
        let col = |f: fn(&AblationRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        [col(|r| r.mapper_nll), col(|r| r.min_ade), col(|r| r.min_fde), col(|r| r.mr)]
    }

    /// One row per variant and seed, then `mean` and `std` rows per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("loss_kind,seed,mapper_nll,minADE,minFDE,MR\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.loss_kind.name(),
                r.seed,
                r.mapper_nll,
                r.min_ade,
                r.min_fde,
                r.mr
            );
        }
        for k in self.kinds() {
            let a = self.aggregate(k);
            for (label, pick) in [("mean", 0usize), ("std", 1)] {
                let v = |i: usize| if pick == 0 { a[i].0 } else { a[i].1 };
                let _ = writeln!(out, "{},{label},{:.6},{:.6},{:.6},{:.6}", k.name(), v(0), v(1), v(2), v(3));
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| loss kind | seeds | mapper NLL | minADE | minFDE | MR (%) |\n|---|---|---|---|---|---|\n",
        );
        for k in self.kinds() {
            let a = self.aggregate(k);
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.2} ± {:.2} |",
                k.name(),
                self.rows_for(k).count(),
                a[0].0,
                a[0].1,
                a[1].0,
                a[1].1,
                a[2].0,
                a[2].1,
                a[3].0,
                a[3].1
            );
        }
        let _ = writeln!(out, "\nNote: {EXCLUDED_VARIANT_NOTE}");
        out
    }
}

/// One ablation cell: mapper under `kind`, then the uncertainty-aware
/// predictor on its output, scored on the test split.
pub fn ablation_cell(cfg: &RunConfig, bench: &Benchmark, kind: LossKind, seed: u64) -> Result<AblationRow> {
    let (mapper, mp, _) = fit_mapper(cfg, kind, seed, bench)?;
    let nll = mapper_nll(&mapper, &mp, &bench.test)?;
    let train = prepare_split(&mapper, &mp, &bench.train)?;
    let val = prepare_split(&mapper, &mp, &bench.val)?;
    let test = prepare_split(&mapper, &mp, &bench.test)?;
    let (pred, pp, _) = fit_predictor(cfg, StreamTag::Unc, seed, &train, &val)?;
    let outs = predict_all(&pred, &pp, &test)?;
    let mut scores = Vec::with_capacity(outs.len());
    for (s, (c, _)) in bench.test.iter().zip(&outs) {
        scores.push(score(c, &s.future_gt)?);
    }
    let n = scores.len() as f64;
    Ok(AblationRow {
        loss_kind: kind,
        seed,
        mapper_nll: nll,
        min_ade: scores.iter().map(|s| s.min_ade).sum::<f64>() / n,
        min_fde: scores.iter().map(|s| s.min_fde).sum::<f64>() / n,
        mr: 100.0 * scores.iter().filter(|s| s.missed).count() as f64 / n,
    })
}

pub fn run_ablation(cfg: &RunConfig, bench: &Benchmark) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for i in 0..cfg.ablation.seeds as u64 {
        for &kind in &cfg.ablation.kinds {
            rows.push(ablation_cell(cfg, bench, kind, cfg.seed + i)?);
        }
    }
    Ok(AblationTable { rows })
}

pub fn cmd_ablate(cfg: &RunConfig, layout: &Layout) -> Result<AblationTable> {
    cfg.validate()?;
    let bench = load_bench(layout)?;
    write_effective_config(cfg, layout)?;
    let table = run_ablation(cfg, &bench)?;
    let dir = layout.ablation_dir();
    write_file(&dir.join("ablation.csv"), table.to_csv())?;
    write_file(&dir.join("ablation.md"), table.to_markdown())?;
    Ok(table)
}
