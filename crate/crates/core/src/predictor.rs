//! Dual-stream trajectory predictor.
//!
//! Both streams share one architecture: a per-vertex map encoder with mean
//! pooling, a history encoder and a decoder that emits six candidate futures
//! as offsets over a constant-velocity extrapolation. The base stream sees
//! vertex means only; the uncertainty stream also sees `(σ1, σ2, ρ)`.
//! Everything runs in the ego frame at the present instant.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    adam_step, derive_seed, AdamConfig, AdamState, EpochStats, Mlp, MlpSpec, Mode, ParamSet, Tape,
    Tensor2, TrainLog, Var,
};
use crate::error::{Error, Result};
use crate::geom::{Frame, Vec2};
use crate::metrics::{ade, StreamTag};
use crate::uncertainty::PolylineMap;

pub const NUM_CANDIDATES: usize = 6;
pub const EMBED_WIDTH: usize = 512;
/// Position normalisation of network inputs, m.
const POSITION_SCALE: f64 = 20.0;

/// Six candidate futures, each a list of waypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    trajectories: Vec<Vec<Vec2>>,
    stream: StreamTag,
}

impl CandidateSet {
    pub fn new(trajectories: Vec<Vec<Vec2>>, stream: StreamTag) -> Result<Self> {
        if trajectories.len() != NUM_CANDIDATES {
            return Err(Error::ShapeMismatch(format!(
                "expected {NUM_CANDIDATES} candidates, got {}",
                trajectories.len()
            )));
        }
        let horizon = trajectories[0].len();
        if horizon == 0 || trajectories.iter().any(|t| t.len() != horizon) {
            return Err(Error::ShapeMismatch("candidates must share a non-empty horizon".into()));
        }
        if trajectories.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::InvalidValue("candidate waypoints must be finite".into()));
        }
        Ok(Self {
            trajectories,
            stream,
        })
    }

    pub fn trajectories(&self) -> &[Vec<Vec2>] {
        &self.trajectories
    }

    pub fn stream(&self) -> StreamTag {
        self.stream
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].len()
    }

    pub fn map_points(&self, f: impl Fn(Vec2) -> Vec2) -> CandidateSet {
        CandidateSet {
            trajectories: self
                .trajectories
                .iter()
                .map(|t| t.iter().map(|&p| f(p)).collect())
                .collect(),
            stream: self.stream,
        }
    }
}

/// Penultimate decoder activation zero-padded to 512.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEmbedding {
    values: Vec<f64>,
}

impl StreamEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBED_WIDTH {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {} != {EMBED_WIDTH}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub map_hidden: usize,
    pub history_hidden: usize,
    pub decoder_hidden: usize,
    pub dropout: f64,
    /// Scale applied to decoder outputs before adding them to the
    /// constant-velocity extrapolation, m.
    pub offset_scale: f64,
    /// Multiplier on the He-uniform init of the decoder's output layer.
    pub head_init_gain: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            map_hidden: 64,
            history_hidden: 64,
            decoder_hidden: 128,
            dropout: 0.1,
            offset_scale: 5.0,
            head_init_gain: 0.1,
            lr: 5e-4,
            batch_size: 32,
            epochs: 40,
            clip_norm: 3.0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.map_hidden, self.history_hidden, self.decoder_hidden];
        if widths.contains(&0) || self.decoder_hidden > EMBED_WIDTH {
            return Err(Error::Config("predictor widths must be in 1..=512".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.offset_scale > 0.0) {
            return Err(Error::Config("predictor rates and scales must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.batch_size == 0 {
            return Err(Error::Config("invalid predictor dropout or batch size".into()));
        }
        Ok(())
    }
}

pub fn map_input_width(stream: StreamTag) -> Result<usize> {
    match stream {
        StreamTag::Base => Ok(2),
        StreamTag::Unc => Ok(5),
        StreamTag::Gated => Err(Error::Config("the gated stream has no predictor".into())),
    }
}

/// Scene inputs in the ego frame, shared by both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScene {
    pub id: String,
    pub frame: Frame,
    /// History in the ego frame; the last point is the origin.
    pub history: Vec<Vec2>,
    /// Constant-velocity extrapolation over the future horizon, ego frame.
    pub cv: Vec<Vec2>,
    /// One row `[μx, μy, σ1, σ2, ρ]` per vertex, ego frame, μ scaled.
    pub map_rows: Tensor2,
    /// Ground-truth future in the ego frame, when known.
    pub gt: Option<Vec<Vec2>>,
    pub delta_theta: f64,
    pub bin: usize,
}

impl PreparedScene {
    /// Map encoder input for `stream`: the first 2 or all 5 columns.
    pub fn map_input(&self, stream: StreamTag) -> Result<Tensor2> {
        let w = map_input_width(stream)?;
        let n = self.map_rows.rows();
        let data = (0..n)
            .flat_map(|i| self.map_rows.row(i)[..w].to_vec())
            .collect();
        Tensor2::from_vec(n, w, data)
    }

    pub fn history_features(&self) -> Vec<f64> {
        self.history
            .iter()
            .flat_map(|p| [p.x / POSITION_SCALE, p.y / POSITION_SCALE])
            .collect()
    }

    pub fn horizon(&self) -> usize {
        self.cv.len()
    }
}

/// Ego frame from the last history step.
pub fn ego_frame(history: &[Vec2]) -> Result<Frame> {
    if history.len() < 2 {
        return Err(Error::InvalidTrajectory("history needs two points".into()));
    }
    let n = history.len();
    let d = history[n - 1] - history[n - 2];
    if d.norm() == 0.0 {
        return Err(Error::DegenerateTrajectory { eps: 0.0 });
    }
    Ok(Frame {
        origin: history[n - 1],
        heading: d.angle(),
    })
}

/// Map rows `[μx/20, μy/20, σ1, σ2, ρ]` in `frame`, with Σ rotated into it.
pub fn map_rows(map: &PolylineMap, frame: &Frame) -> Result<Tensor2> {
    let n = map.vertex_count();
    if n == 0 {
        return Err(Error::EmptyMap);
    }
    let mut data = Vec::with_capacity(n * 5);
    for v in map.vertices() {
        let mu = frame.to_local(v.mu);
        let (s1, s2, rho) = v.cov.cov().rotate(-frame.heading).to_sigmas();
        data.extend_from_slice(&[mu.x / POSITION_SCALE, mu.y / POSITION_SCALE, s1, s2, rho]);
    }
    Tensor2::from_vec(n, 5, data)
}

/// Builds the ego-frame inputs. `future` is the world-frame ground truth.
pub fn prepare_scene(
    id: impl Into<String>,
    history: &[Vec2],
    map: &PolylineMap,
    future: Option<&[Vec2]>,
    horizon: usize,
    dt: f64,
    delta_theta: f64,
    bin: usize,
) -> Result<PreparedScene> {
    let frame = ego_frame(history)?;
    let local: Vec<Vec2> = history.iter().map(|&p| frame.to_local(p)).collect();
    let n = local.len();
    let velocity = (local[n - 1] - local[n - 2]) * (1.0 / dt);
    let cv = (1..=horizon)
        .map(|k| local[n - 1] + velocity * (k as f64 * dt))
        .collect();
    let gt = match future {
        Some(f) if f.len() != horizon => {
            return Err(Error::HorizonMismatch {
                candidates: horizon,
                truth: f.len(),
            })
        }
        Some(f) => Some(f.iter().map(|&p| frame.to_local(p)).collect()),
        None => None,
    };
    Ok(PreparedScene {
        id: id.into(),
        frame,
        history: local,
        cv,
        map_rows: map_rows(map, &frame)?,
        gt,
        delta_theta,
        bin,
    })
}

/// Metadata stored alongside predictor weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub model: String,
    pub stream: StreamTag,
    pub config: PredictorConfig,
    pub history_len: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    meta: PredictorMeta,
    map_enc: Mlp,
    hist_enc: Mlp,
    decoder: Mlp,
}

/// Forward-pass handles.
pub struct PredictorTrace {
    /// `B × (6·T·2)` decoder output, before scaling.
    pub output: Var,
    /// `B × 512` padded penultimate activation.
    pub embedding: Var,
}

fn specs(meta: &PredictorMeta) -> Result<[MlpSpec; 3]> {
    let c = &meta.config;
    let w = map_input_width(meta.stream)?;
    let out = NUM_CANDIDATES * meta.horizon * 2;
    Ok([
        MlpSpec::new(vec![w, c.map_hidden, c.map_hidden], meta.seed),
        MlpSpec::new(vec![meta.history_len * 2, c.history_hidden, c.history_hidden], meta.seed),
        MlpSpec::new(
            vec![c.map_hidden + c.history_hidden, c.decoder_hidden, c.decoder_hidden, out],
            meta.seed,
        )
        .with_dropout(c.dropout),
    ])
}

impl Predictor {
    /// Registers fresh parameters. Layers are seeded by name, so the two
    /// streams start from identical weights everywhere except the first
    /// map-encoder layer.
    pub fn new(meta: PredictorMeta, params: &mut ParamSet) -> Result<Self> {
        meta.config.validate()?;
        let [m, h, d] = specs(&meta)?;
        let map_enc = Mlp::new(m, params, "map_enc")?;
        let hist_enc = Mlp::new(h, params, "hist_enc")?;
        let decoder = Mlp::new(d, params, "decoder")?;
        let last = decoder.spec().num_layers() - 1;
        decoder.scale_layer(params, last, meta.config.head_init_gain);
        Ok(Self {
            meta,
            map_enc,
            hist_enc,
            decoder,
        })
    }

    pub fn attach(meta: PredictorMeta, params: &ParamSet) -> Result<Self> {
        let [m, h, d] = specs(&meta)?;
        Ok(Self {
            map_enc: Mlp::attach(m, params, "map_enc")?,
            hist_enc: Mlp::attach(h, params, "hist_enc")?,
            decoder: Mlp::attach(d, params, "decoder")?,
            meta,
        })
    }

    pub fn meta(&self) -> &PredictorMeta {
        &self.meta
    }

    pub fn stream(&self) -> StreamTag {
        self.meta.stream
    }

    pub fn map_encoder(&self) -> &Mlp {
        &self.map_enc
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Pooled map embedding on the tape: per-vertex MLP, ReLU, then a mean
    /// over each scene's rows.
    fn encode_map_on(&self, tape: &mut Tape<'_>, rows: Var, offsets: Vec<usize>, mode: Mode<'_>) -> Result<Var> {
        let h = self.map_enc.forward(tape, rows, mode)?.output;
        let h = tape.relu(h);
        tape.segment_mean(h, offsets)
    }

    /// Pooled embedding of one map given as encoder input rows.
    pub fn encode_map(&self, params: &ParamSet, rows: Tensor2) -> Result<Vec<f64>> {
        if rows.rows() == 0 {
            return Err(Error::EmptyMap);
        }
        let mut tape = Tape::new(params);
        let n = rows.rows();
        let x = tape.input(rows);
        let e = self.encode_map_on(&mut tape, x, vec![0, n], Mode::Eval)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Batched forward pass.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &[&PreparedScene], mut mode: Mode<'_>) -> Result<PredictorTrace> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let stream = self.meta.stream;
        let w = map_input_width(stream)?;
        let mut offsets = vec![0];
        let mut rows = Vec::new();
        let mut hist = Vec::with_capacity(batch.len() * self.meta.history_len * 2);
        for s in batch {
            if s.history.len() != self.meta.history_len || s.horizon() != self.meta.horizon {
                return Err(Error::ShapeMismatch(format!(
                    "scene {} has history {} / horizon {}, model expects {} / {}",
                    s.id,
                    s.history.len(),
                    s.horizon(),
                    self.meta.history_len,
                    self.meta.horizon
                )));
            }
            for i in 0..s.map_rows.rows() {
                rows.extend_from_slice(&s.map_rows.row(i)[..w]);
            }
            offsets.push(offsets[offsets.len() - 1] + s.map_rows.rows());
            hist.extend(s.history_features());
        }
        let n = offsets[offsets.len() - 1];
        let rows = tape.input(Tensor2::from_vec(n, w, rows)?);
        let hist = tape.input(Tensor2::from_vec(batch.len(), self.meta.history_len * 2, hist)?);

        let map_emb = self.encode_map_on(tape, rows, offsets, mode.reborrow())?;
        let h = self.hist_enc.forward(tape, hist, mode.reborrow())?.output;
        let h = tape.relu(h);
        let joint = tape.concat(h, map_emb)?;
        let trace = self.decoder.forward(tape, joint, mode)?;
        let embedding = tape.pad_cols(trace.penultimate, EMBED_WIDTH)?;
        Ok(PredictorTrace {
            output: trace.output,
            embedding,
        })
    }

    /// Candidate trajectories in the ego frame from decoder output row `i`.
    pub fn decode_row(&self, out: &Tensor2, i: usize, scene: &PreparedScene) -> Vec<Vec<Vec2>> {
        let row = out.row(i);
        let t = self.meta.horizon;
        let k = self.meta.config.offset_scale;
        (0..NUM_CANDIDATES)
            .map(|c| {
                (0..t)
                    .map(|j| {
                        let o = (c * t + j) * 2;
                        scene.cv[j] + Vec2::new(row[o], row[o + 1]) * k
                    })
                    .collect()
            })
            .collect()
    }

    /// Eval-mode prediction: world-frame candidates and the embedding.
    pub fn predict(&self, params: &ParamSet, scene: &PreparedScene) -> Result<(CandidateSet, StreamEmbedding)> {
        let mut out = self.predict_batch(params, &[scene])?;
        Ok(out.remove(0))
    }

    pub fn predict_batch(
        &self,
        params: &ParamSet,
        scenes: &[&PreparedScene],
    ) -> Result<Vec<(CandidateSet, StreamEmbedding)>> {
        let mut tape = Tape::new(params);
        let trace = self.forward(&mut tape, scenes, Mode::Eval)?;
        let out = tape.value(trace.output);
        let emb = tape.value(trace.embedding);
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let local = self.decode_row(out, i, s);
                let world = local
                    .into_iter()
                    .map(|t| t.into_iter().map(|p| s.frame.to_world(p)).collect())
                    .collect();
                Ok((
                    CandidateSet::new(world, self.meta.stream)?,
                    StreamEmbedding::new(emb.row(i).to_vec())?,
                ))
            })
            .collect()
    }
}

/// Winner-take-all loss for one scene: the smallest mean L2 error over the
/// candidates, its index, and the gradient with respect to the raw decoder
/// output row (zero outside the winning candidate).
pub fn wta_loss(cands: &[Vec<Vec2>], gt: &[Vec2], offset_scale: f64) -> (f64, usize, Vec<f64>) {
    let t = gt.len();
    let (best, loss) = cands
        .iter()
        .map(|c| ade(c, gt))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, e)| if e < acc.1 { (k, e) } else { acc });
    let mut grad = vec![0.0; cands.len() * t * 2];
    for (j, (p, g)) in cands[best].iter().zip(gt).enumerate() {
        let d = *p - *g;
        let norm = d.norm().max(1e-12);
        let o = (best * t + j) * 2;
        grad[o] = d.x / norm / t as f64 * offset_scale;
        grad[o + 1] = d.y / norm / t as f64 * offset_scale;
    }
    (loss, best, grad)
}

/// Mean minADE (ego frame) over scenes with ground truth.
pub fn evaluate_min_ade(model: &Predictor, params: &ParamSet, scenes: &[PreparedScene], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&PreparedScene> = chunk.iter().collect();
        let mut tape = Tape::new(params);
        let trace = model.forward(&mut tape, &refs, Mode::Eval)?;
        let out = tape.value(trace.output);
        for (i, s) in chunk.iter().enumerate() {
            let gt = s.gt.as_ref().ok_or_else(|| Error::EmptyInput(format!("scene {} has no ground truth", s.id)))?;
            let cands = model.decode_row(out, i, s);
            total += crate::metrics::min_ade_of(&cands, gt)?;
        }
    }
    Ok(total / scenes.len() as f64)
}

/// Trains one stream with winner-take-all regression and keeps the
/// parameters with the lowest validation minADE. The visiting order and
/// dropout masks depend only on `seed`, so the two streams see identical
/// batches.
pub fn train_predictor(
    meta: PredictorMeta,
    train: &[PreparedScene],
    val: &[PreparedScene],
) -> Result<(Predictor, ParamSet, TrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("predictor training needs train and val scenes".into()));
    }
    let cfg = meta.config.clone();
    let seed = meta.seed;
    let mut params = ParamSet::new();
    let model = Predictor::new(meta, &mut params)?;
    let adam = AdamConfig::new(cfg.lr).with_clip(cfg.clip_norm);
    let mut state = AdamState::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "predictor/order"));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "predictor/dropout"));

    let mut best = (evaluate_min_ade(&model, &params, val, cfg.batch_size)?, params.clone(), 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &train[i]).collect();
            let grads = {
                let mut tape = Tape::new(&params);
                let trace = model.forward(&mut tape, &batch, Mode::Train(&mut drop_rng))?;
                let out = tape.value(trace.output);
                let mut seed_grad = Tensor2::zeros(out.rows(), out.cols());
                let b = batch.len() as f64;
                let mut loss = 0.0;
                for (i, s) in batch.iter().enumerate() {
                    let gt = s
                        .gt
                        .as_ref()
                        .ok_or_else(|| Error::EmptyInput(format!("scene {} has no ground truth", s.id)))?;
                    let cands = model.decode_row(out, i, s);
                    let (l, _, g) = wta_loss(&cands, gt, cfg.offset_scale);
                    loss += l / b;
                    for (dst, v) in seed_grad.row_mut(i).iter_mut().zip(g) {
                        *dst = v / b;
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: batch_index });
                }
                epoch_loss += loss * b;
                tape.backward_with(trace.output, seed_grad)?
            };
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss { batch: batch_index });
            }
            adam_step(&mut params, &grads, &mut state, &adam);
            batch_index += 1;
        }
        let val_ade = evaluate_min_ade(&model, &params, val, cfg.batch_size)?;
        if val_ade < best.0 {
            best = (val_ade, params.clone(), epoch);
        }
        log.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_metric: val_ade,
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
