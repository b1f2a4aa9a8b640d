//! Online-map surrogate: a per-vertex MLP that turns noisy observations and
//! their context into a mean correction and covariance parameters.
//!
//! Real online mappers regress vertices from camera features; here the
//! uncertainty head is attached to a small network over hand-built context
//! (distance, occlusion, class, local tangent) so the density math can be
//! studied in isolation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    adam_step, derive_seed, AdamConfig, AdamState, EpochStats, Mlp, MlpSpec, Mode, ParamSet, Tape,
    Tensor2, TrainLog, Var,
};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::scenegen::{Scene, VertexContext, VertexObservation};
use crate::uncertainty::{vertex_nll, CovParams, LossConfig, LossKind, MapElement, PolylineMap, UncertainVertex};

/// Outputs per vertex: `Δx, Δy, log σ1, log σ2, rho_raw`.
pub const OUTPUT_WIDTH: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    pub hidden: usize,
    pub lr: f64,
    /// Scenes per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Multiplier on the mean per-vertex NLL.
    pub loss_weight: f64,
    /// Penalty on `log σ² + rho_raw²`.
    pub lambda_reg: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1.5e-4,
            batch_size: 32,
            epochs: 30,
            clip_norm: 3.0,
            loss_weight: 0.03,
            lambda_reg: 1e-3,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("mapper width and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.loss_weight > 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::Config("mapper rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperMeta {
    pub model: String,
    pub loss_kind: LossKind,
    pub config: MapperConfig,
    pub seed: u64,
}

/// One training vertex: observation plus its true position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapperSample {
    pub obs: VertexObservation,
    pub truth: Vec2,
}

/// Vertices of one scene, in element-major order.
pub fn scene_samples(scene: &Scene) -> Vec<MapperSample> {
    scene
        .observations()
        .zip(scene.true_points())
        .map(|(&obs, truth)| MapperSample { obs, truth })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mapper {
    meta: MapperMeta,
    mlp: Mlp,
}

fn spec(meta: &MapperMeta) -> MlpSpec {
    let h = meta.config.hidden;
    MlpSpec::new(vec![VertexContext::WIDTH, h, h, OUTPUT_WIDTH], meta.seed)
}

impl Mapper {
    pub fn new(meta: MapperMeta, params: &mut ParamSet) -> Result<Self> {
        meta.config.validate()?;
        let mlp = Mlp::new(spec(&meta), params, "mapper")?;
        Ok(Self { meta, mlp })
    }

    pub fn attach(meta: MapperMeta, params: &ParamSet) -> Result<Self> {
        let mlp = Mlp::attach(spec(&meta), params, "mapper")?;
        Ok(Self { meta, mlp })
    }

    pub fn meta(&self) -> &MapperMeta {
        &self.meta
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Zeroes the output layer: μ equals the observation and Σ = I.
    pub fn zero_head(&self, params: &mut ParamSet) {
        let (w, b) = self.mlp.layer(self.mlp.spec().num_layers() - 1);
        params.get_mut(w).fill(0.0);
        params.get_mut(b).fill(0.0);
    }

    fn forward<'a>(&self, tape: &mut Tape<'a>, obs: &[&VertexObservation]) -> Result<Var> {
        let mut data = Vec::with_capacity(obs.len() * VertexContext::WIDTH);
        for o in obs {
            data.extend_from_slice(&o.context.features());
        }
        let x = tape.input(Tensor2::from_vec(obs.len(), VertexContext::WIDTH, data)?);
        Ok(self.mlp.forward(tape, x, Mode::Eval)?.output)
    }

    fn vertex_from_row(&self, obs: &VertexObservation, row: &[f64]) -> UncertainVertex {
        let rho_raw = if self.meta.loss_kind.uses_correlation() { row[4] } else { 0.0 };
        UncertainVertex::new(
            obs.noisy_xy + Vec2::new(row[0], row[1]),
            CovParams::new(row[2], row[3], rho_raw),
        )
    }

    /// One uncertain vertex per observation.
    pub fn infer(&self, params: &ParamSet, obs: &[VertexObservation]) -> Result<Vec<UncertainVertex>> {
        if obs.is_empty() {
            return Err(Error::EmptyInput("no observations".into()));
        }
        let refs: Vec<&VertexObservation> = obs.iter().collect();
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, &refs)?;
        let out = tape.value(out);
        Ok(obs
            .iter()
            .enumerate()
            .map(|(i, o)| self.vertex_from_row(o, out.row(i)))
            .collect())
    }

    /// The estimated map of a scene, keeping its element structure.
    pub fn map_scene(&self, params: &ParamSet, scene: &Scene) -> Result<PolylineMap> {
        let obs: Vec<VertexObservation> = scene.observations().copied().collect();
        let mut verts = self.infer(params, &obs)?.into_iter();
        let elements = scene
            .map
            .elements
            .iter()
            .map(|e| MapElement {
                class: e.class,
                vertices: verts.by_ref().take(e.observed.len()).collect(),
            })
            .collect();
        PolylineMap::new(elements)
    }
}

/// Mean per-vertex NLL of `samples` under the mapper's own loss kind.
pub fn evaluate_nll(mapper: &Mapper, params: &ParamSet, scenes: &[Vec<MapperSample>], cfg: &LossConfig) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for group in scenes {
        let obs: Vec<VertexObservation> = group.iter().map(|s| s.obs).collect();
        let verts = mapper.infer(params, &obs)?;
        for (v, s) in verts.iter().zip(group) {
            total += vertex_nll(mapper.meta.loss_kind, v.mu, &v.cov, s.truth, cfg).0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no validation vertices".into()));
    }
    Ok(total / n as f64)
}

/// Trains under `meta.loss_kind` and keeps the parameters with the lowest
/// unregularised validation NLL.
pub fn train_mapper(
    meta: MapperMeta,
    train: &[Vec<MapperSample>],
    val: &[Vec<MapperSample>],
) -> Result<(Mapper, ParamSet, TrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("mapper training needs train and val scenes".into()));
    }
    let cfg = meta.config.clone();
    let kind = meta.loss_kind;
    let loss_cfg = LossConfig {
        lambda_reg: cfg.lambda_reg,
        ..LossConfig::default()
    };
    let val_cfg = LossConfig::unregularized();
    let mut params = ParamSet::new();
    let model = Mapper::new(meta.clone(), &mut params)?;
    let adam = AdamConfig::new(cfg.lr).with_clip(cfg.clip_norm);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(meta.seed, "mapper/order"));

    let mut best = (evaluate_nll(&model, &params, val, &val_cfg)?, params.clone(), 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_index = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&MapperSample> = chunk.iter().flat_map(|&i| train[i].iter()).collect();
            let obs: Vec<&VertexObservation> = samples.iter().map(|s| &s.obs).collect();
            let grads = {
                let mut tape = Tape::new(&params);
                let out_var = model.forward(&mut tape, &obs)?;
                let out = tape.value(out_var);
                let n = samples.len() as f64;
                let scale = cfg.loss_weight / n;
                let mut seed = Tensor2::zeros(out.rows(), OUTPUT_WIDTH);
                let mut loss = 0.0;
                for (i, s) in samples.iter().enumerate() {
                    let v = model.vertex_from_row(&s.obs, out.row(i));
                    let (l, g) = vertex_nll(kind, v.mu, &v.cov, s.truth, &loss_cfg);
                    loss += l;
                    let r = seed.row_mut(i);
                    r[0] = g.d_mu.x * scale;
                    r[1] = g.d_mu.y * scale;
                    r[2] = g.d_log_sigma1 * scale;
                    r[3] = g.d_log_sigma2 * scale;
                    r[4] = if kind.uses_correlation() { g.d_rho_raw * scale } else { 0.0 };
                }
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: batch_index });
                }
                epoch_loss += loss;
                epoch_n += samples.len();
                tape.backward_with(out_var, seed)?
            };
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_index });
            }
            adam_step(&mut params, &grads, &mut state, &adam);
            batch_index += 1;
        }
        let val_nll = evaluate_nll(&model, &params, val, &val_cfg)?;
        if val_nll < best.0 {
            best = (val_nll, params.clone(), epoch);
        }
        log.push(EpochStats {
            epoch,
            train_loss: epoch_loss / epoch_n as f64,
            val_metric: val_nll,
        });
    }
    let (best_val, best_params, best_epoch) = best;
    Ok((
        model,
        best_params,
        TrainLog {
            epochs: log,
            best_epoch,
            best_val,
        },
    ))
}
