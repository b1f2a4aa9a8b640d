//! Proprioceptive scenario gating: an MLP over both streams' embeddings
//! produces two logits whose temperature softmax weights the streams.
//!
//! Training targets come from each stream's realised minADE on the scene:
//! `w* = softmax(−err / τ_target)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    adam_step, derive_seed, softmax_temperature, AdamConfig, AdamState, EpochStats, Mlp, MlpSpec, Mode,
    ParamSet, Tape, Tensor2, TrainLog, Var,
};
use crate::error::{Error, Result};
use crate::metrics::{ade, StreamTag};
use crate::predictor::{CandidateSet, StreamEmbedding, EMBED_WIDTH};

/// Concatenated embedding width, projected to 512 and then reduced through
/// 256, 128, 64, 32 to the two logits.
pub const GATE_WIDTHS: [usize; 7] = [2 * EMBED_WIDTH, 512, 256, 128, 64, 32, 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub w_base: f64,
    pub w_unc: f64,
    /// `(v_base, v_unc)`
    pub logits: (f64, f64),
}

impl GateDecision {
    pub fn from_logits(v_base: f64, v_unc: f64, temperature: f64) -> Result<Self> {
        let w = softmax_temperature(&Tensor2::row_vector(vec![v_base, v_unc]), temperature)?;
        Ok(Self {
            w_base: w.data()[0],
            w_unc: w.data()[1],
            logits: (v_base, v_unc),
        })
    }

    /// Fixed weights, e.g. for hard selection.
    pub fn fixed(w_base: f64) -> Self {
        Self {
            w_base,
            w_unc: 1.0 - w_base,
            logits: (0.0, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Candidate-wise convex combination paired by head index.
    Convex,
    /// Convex combination after pairing each base candidate with the unc
    /// candidate of an optimal one-to-one assignment (minimum summed ADE).
    /// Independently trained winner-take-all heads carry no shared order.
    #[default]
    Matched,
    /// Whole-scene selection of the stream with the larger weight.
    HardSelect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// Softmax temperature of the gate output.
    pub temperature: f64,
    /// Temperature of the target weights.
    pub target_temperature: f64,
    /// Use one-hot targets instead of the soft ones.
    pub hard_targets: bool,
    pub fusion: FusionMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub dropout: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            target_temperature: 0.1,
            hard_targets: false,
            fusion: FusionMode::Matched,
            lr: 5e-4,
            batch_size: 32,
            epochs: 30,
            clip_norm: 3.0,
            dropout: 0.1,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        for t in [self.temperature, self.target_temperature] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("gate rates and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("gate dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateMeta {
    pub model: String,
    pub config: GateConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    meta: GateMeta,
    mlp: Mlp,
}

fn spec(meta: &GateMeta) -> MlpSpec {
    MlpSpec::new(GATE_WIDTHS.to_vec(), meta.seed).with_dropout(meta.config.dropout)
}

impl Gate {
    /// Fresh gate whose output layer starts at zero, so every scene begins
    /// at `(0.5, 0.5)`.
    pub fn new(meta: GateMeta, params: &mut ParamSet) -> Result<Self> {
        meta.config.validate()?;
        let mlp = Mlp::new(spec(&meta), params, "gate")?;
        let (w, b) = mlp.layer(mlp.spec().num_layers() - 1);
        params.get_mut(w).fill(0.0);
        params.get_mut(b).fill(0.0);
        Ok(Self { meta, mlp })
    }

    pub fn attach(meta: GateMeta, params: &ParamSet) -> Result<Self> {
        let mlp = Mlp::attach(spec(&meta), params, "gate")?;
        Ok(Self { meta, mlp })
    }

    pub fn meta(&self) -> &GateMeta {
        &self.meta
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    fn input(pairs: &[(&StreamEmbedding, &StreamEmbedding)]) -> Result<Tensor2> {
        let mut data = Vec::with_capacity(pairs.len() * 2 * EMBED_WIDTH);
        for (b, u) in pairs {
            data.extend_from_slice(b.values());
            data.extend_from_slice(u.values());
        }
        Tensor2::from_vec(pairs.len(), 2 * EMBED_WIDTH, data)
    }

    fn logits_on(&self, tape: &mut Tape<'_>, pairs: &[(&StreamEmbedding, &StreamEmbedding)], mode: Mode<'_>) -> Result<Var> {
        let x = tape.input(Self::input(pairs)?);
        Ok(self.mlp.forward(tape, x, mode)?.output)
    }

    /// Eval-mode decisions for a batch of embedding pairs.
    pub fn decide_batch(
        &self,
        params: &ParamSet,
        pairs: &[(&StreamEmbedding, &StreamEmbedding)],
        temperature: f64,
    ) -> Result<Vec<GateDecision>> {
        let mut tape = Tape::new(params);
        let logits = self.logits_on(&mut tape, pairs, Mode::Eval)?;
        let l = tape.value(logits);
        (0..l.rows())
            .map(|i| GateDecision::from_logits(l.get(i, 0), l.get(i, 1), temperature))
            .collect()
    }
}

/// Gate weights for one scene.
pub fn gate_forward(
    gate: &Gate,
    params: &ParamSet,
    emb_base: &StreamEmbedding,
    emb_unc: &StreamEmbedding,
    temperature: f64,
) -> Result<GateDecision> {
    Ok(gate.decide_batch(params, &[(emb_base, emb_unc)], temperature)?[0])
}

/// `softmax(−[err_base, err_unc] / τ)`; the stream with the lower error
/// gets the larger weight.
pub fn make_target_weights(err_base: f64, err_unc: f64, temperature: f64) -> (f64, f64) {
    let d = (err_base - err_unc) / temperature;
    let w_base = if d.is_nan() {
        0.5
    } else if d >= 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    };
    (w_base, 1.0 - w_base)
}

/// One-hot targets; ties split evenly.
pub fn hard_target_weights(err_base: f64, err_unc: f64) -> (f64, f64) {
    match err_base.partial_cmp(&err_unc) {
        Some(std::cmp::Ordering::Less) => (1.0, 0.0),
        Some(std::cmp::Ordering::Greater) => (0.0, 1.0),
        _ => (0.5, 0.5),
    }
}

fn check_pair(base: &CandidateSet, unc: &CandidateSet) -> Result<()> {
    if base.trajectories().len() != unc.trajectories().len() || base.horizon() != unc.horizon() {
        return Err(Error::ShapeMismatch("candidate sets differ in shape".into()));
    }
    Ok(())
}

/// `fused_k = w_base · base_k + w_unc · unc_k` for every candidate index.
pub fn fuse_trajectories(base: &CandidateSet, unc: &CandidateSet, decision: &GateDecision) -> Result<CandidateSet> {
    check_pair(base, unc)?;
    let (wb, wu) = (decision.w_base, decision.w_unc);
    let trajs = base
        .trajectories()
        .iter()
        .zip(unc.trajectories())
        .map(|(b, u)| b.iter().zip(u).map(|(&p, &q)| p * wb + q * wu).collect())
        .collect();
    CandidateSet::new(trajs, StreamTag::Gated)
}

/// `perm[k]` is the unc candidate paired with base candidate `k`,
/// minimising the summed pairwise ADE. Ties keep the lower index.
pub fn match_candidates(base: &CandidateSet, unc: &CandidateSet) -> Result<Vec<usize>> {
    check_pair(base, unc)?;
    let (b, u) = (base.trajectories(), unc.trajectories());
    let n = b.len();
    let cost: Vec<Vec<f64>> = b.iter().map(|bk| u.iter().map(|uj| ade(bk, uj)).collect()).collect();
    // dp[mask]: best cost of assigning the first popcount(mask) base heads
    // to the unc heads in mask.
    let full = 1usize << n;
    let mut dp = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    dp[0] = 0.0;
    for mask in 0..full {
        if !dp[mask].is_finite() {
            continue;
        }
        let k = mask.count_ones() as usize;
        if k == n {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let c = dp[mask] + cost[k][j];
                if c < dp[next] {
                    dp[next] = c;
                    choice[next] = j;
                }
            }
        }
    }
    let mut perm = vec![0; n];
    let mut mask = full - 1;
    for k in (0..n).rev() {
        let j = choice[mask];
        perm[k] = j;
        mask &= !(1 << j);
    }
    Ok(perm)
}

/// Convex combination over matched candidate pairs, in base head order.
pub fn fuse_matched(base: &CandidateSet, unc: &CandidateSet, decision: &GateDecision) -> Result<CandidateSet> {
    let perm = match_candidates(base, unc)?;
    let u = unc.trajectories();
    let reordered = CandidateSet::new(perm.iter().map(|&j| u[j].clone()).collect(), unc.stream())?;
    fuse_trajectories(base, &reordered, decision)
}

/// The stream with the larger weight, relabelled as gated.
pub fn select_trajectories(base: &CandidateSet, unc: &CandidateSet, decision: &GateDecision) -> Result<CandidateSet> {
    check_pair(base, unc)?;
    let pick = if decision.w_base >= decision.w_unc { base } else { unc };
    CandidateSet::new(pick.trajectories().to_vec(), StreamTag::Gated)
}

pub fn fuse(mode: FusionMode, base: &CandidateSet, unc: &CandidateSet, decision: &GateDecision) -> Result<CandidateSet> {
    match mode {
        FusionMode::Convex => fuse_trajectories(base, unc, decision),
        FusionMode::Matched => fuse_matched(base, unc, decision),
        FusionMode::HardSelect => select_trajectories(base, unc, decision),
    }
}

/// Frozen-predictor features and label of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSample {
    pub emb_base: StreamEmbedding,
    pub emb_unc: StreamEmbedding,
    /// `(w*_base, w*_unc)`
    pub target: (f64, f64),
}

/// Mean squared error of the gate weights against the targets.
pub fn evaluate_gate(gate: &Gate, params: &ParamSet, samples: &[GateSample]) -> Result<f64> {
    let t = gate.meta.config.temperature;
    let mut total = 0.0;
    for chunk in samples.chunks(gate.meta.config.batch_size) {
        let pairs: Vec<_> = chunk.iter().map(|s| (&s.emb_base, &s.emb_unc)).collect();
        for (d, s) in gate.decide_batch(params, &pairs, t)?.iter().zip(chunk) {
            total += 0.5 * ((d.w_base - s.target.0).powi(2) + (d.w_unc - s.target.1).powi(2));
        }
    }
    Ok(total / samples.len() as f64)
}

/// Minimises the MSE between gate weights and targets; keeps the parameters
/// with the lowest validation MSE.
pub fn train_gate(meta: GateMeta, train: &[GateSample], val: &[GateSample]) -> Result<(Gate, ParamSet, TrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("gate training needs train and val scenes".into()));
    }
    let cfg = meta.config.clone();
    let mut params = ParamSet::new();
    let gate = Gate::new(meta.clone(), &mut params)?;
    let adam = AdamConfig::new(cfg.lr).with_clip(cfg.clip_norm);
    let mut state = AdamState::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(meta.seed, "gate/order"));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(meta.seed, "gate/dropout"));

    let mut best = (evaluate_gate(&gate, &params, val)?, params.clone(), 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_index = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let pairs: Vec<_> = chunk.iter().map(|&i| (&train[i].emb_base, &train[i].emb_unc)).collect();
            let target = Tensor2::from_rows(
                &chunk
                    .iter()
                    .map(|&i| vec![train[i].target.0, train[i].target.1])
                    .collect::<Vec<_>>(),
            )?;
            let grads = {
                let mut tape = Tape::new(&params);
                let logits = gate.logits_on(&mut tape, &pairs, Mode::Train(&mut drop_rng))?;
                let w = tape.softmax(logits, cfg.temperature)?;
                let loss = tape.mse(w, target)?;
                let l = tape.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: batch_index });
                }
                epoch_loss += l * chunk.len() as f64;
                tape.backward(loss)?
            };
            adam_step(&mut params, &grads, &mut state, &adam);
            batch_index += 1;
        }
        let val_mse = evaluate_gate(&gate, &params, val)?;
        if val_mse < best.0 {
            best = (val_mse, params.clone(), epoch);
        }
        log.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_metric: val_mse,
        });
    }
    let (best_val, best_params, best_epoch) = best;
    Ok((
        gate,
        best_params,
        TrainLog {
            epochs: log,
            best_epoch,
            best_val,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_set(rng: &mut ChaCha8Rng, stream: StreamTag) -> CandidateSet {
        let trajs = (0..6)
            .map(|_| (0..6).map(|_| Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect())
            .collect();
        CandidateSet::new(trajs, stream).unwrap()
    }

    fn random_embedding(rng: &mut ChaCha8Rng, shift: f64) -> StreamEmbedding {
        let mut v = vec![0.0; EMBED_WIDTH];
        for x in v.iter_mut().take(32) {
            *x = rng.random_range(0.0..1.0) + shift;
        }
        StreamEmbedding::new(v).unwrap()
    }

    fn meta(epochs: usize) -> GateMeta {
        GateMeta {
            model: "gate".into(),
            config: GateConfig {
                epochs,
                dropout: 0.0,
                lr: 1e-3,
                ..GateConfig::default()
            },
            seed: 3,
        }
    }

    #[test]
    fn zero_network_splits_evenly() {
        let mut params = ParamSet::new();
        let gate = Gate::new(meta(1), &mut params).unwrap();
        gate.mlp().zero(&mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let (a, b) = (random_embedding(&mut rng, 0.0), random_embedding(&mut rng, 1.0));
            let d = gate_forward(&gate, &params, &a, &b, 0.6).unwrap();
            assert_eq!((d.w_base, d.w_unc, d.logits), (0.5, 0.5, (0.0, 0.0)));
        }
    }

    #[test]
    fn fresh_gate_starts_even_and_is_deterministic() {
        let mut params = ParamSet::new();
        let gate = Gate::new(meta(1), &mut params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_embedding(&mut rng, 0.0), random_embedding(&mut rng, 0.0));
        let d1 = gate_forward(&gate, &params, &a, &b, 0.6).unwrap();
        let d2 = gate_forward(&gate, &params, &a, &b, 0.6).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.w_base, 0.5);
    }

    #[test]
    fn temperature_softmax_example() {
        let d = GateDecision::from_logits(1.0, 0.0, 0.6).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64 / 0.6).exp());
        assert!((d.w_base - want).abs() < 1e-12);
        assert!((d.w_base - 0.8411).abs() < 5e-5);
        assert!(matches!(GateDecision::from_logits(1.0, 0.0, 0.0), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn target_weight_examples() {
        assert_eq!(make_target_weights(0.4, 0.4, 0.1), (0.5, 0.5));
        let (wb, wu) = make_target_weights(0.0, 1e6, 0.1);
        assert_eq!((wb, wu), (1.0, 0.0));
        let (wb, _) = make_target_weights(0.3, 0.5, 0.1);
        assert!((wb - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!((wb - 0.8808).abs() < 5e-5);
        assert_eq!(hard_target_weights(0.2, 0.3), (1.0, 0.0));
        assert_eq!(hard_target_weights(0.3, 0.3), (0.5, 0.5));
    }

    #[test]
    fn fusion_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, u) = (random_set(&mut rng, StreamTag::Base), random_set(&mut rng, StreamTag::Unc));
        let f = fuse_trajectories(&b, &u, &GateDecision::fixed(1.0)).unwrap();
        assert_eq!(f.trajectories(), b.trajectories());
        assert_eq!(f.stream(), StreamTag::Gated);

        let neg = b.map_points(|p| p * -1.0);
        let z = fuse_trajectories(&b, &neg, &GateDecision::fixed(0.5)).unwrap();
        assert!(z.trajectories().iter().flatten().all(|p| *p == Vec2::new(0.0, 0.0)));
    }

    #[test]
    fn matching_recovers_a_head_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_set(&mut rng, StreamTag::Base);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let u = CandidateSet::new(perm.iter().map(|&k| b.trajectories()[k].clone()).collect(), StreamTag::Unc).unwrap();
        // u[j] = b[perm[j]], so base head k pairs with the j holding it.
        let got = match_candidates(&b, &u).unwrap();
        for (k, &j) in got.iter().enumerate() {
            assert_eq!(perm[j], k);
        }
        let f = fuse_matched(&b, &u, &GateDecision::fixed(0.3)).unwrap();
        for (x, y) in f.trajectories().iter().flatten().zip(b.trajectories().iter().flatten()) {
            assert!((*x - *y).norm() < 1e-12);
        }
    }

    #[test]
    fn matching_is_optimal_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (b, u) = (random_set(&mut rng, StreamTag::Base), random_set(&mut rng, StreamTag::Unc));
            let cost = |p: &[usize]| -> f64 {
                p.iter().enumerate().map(|(k, &j)| ade(&b.trajectories()[k], &u.trajectories()[j])).sum()
            };
            let mut best = f64::INFINITY;
            let mut perm: Vec<usize> = (0..6).collect();
            permute(&mut perm, 0, &mut |p| best = best.min(cost(p)));
            let got = match_candidates(&b, &u).unwrap();
            assert!((cost(&got) - best).abs() < 1e-9);
        }
    }

    fn permute(a: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == a.len() {
            f(a);
            return;
        }
        for i in k..a.len() {
            a.swap(k, i);
            permute(a, k + 1, f);
            a.swap(k, i);
        }
    }

    #[test]
    fn hard_selection_picks_the_heavier_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (b, u) = (random_set(&mut rng, StreamTag::Base), random_set(&mut rng, StreamTag::Unc));
        let s = select_trajectories(&b, &u, &GateDecision::fixed(0.3)).unwrap();
        assert_eq!(s.trajectories(), u.trajectories());
        let s = fuse(FusionMode::HardSelect, &b, &u, &GateDecision::fixed(0.7)).unwrap();
        assert_eq!(s.trajectories(), b.trajectories());
    }

    #[test]
    fn base_always_winning_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<GateSample> {
            (0..n)
                .map(|_| GateSample {
                    emb_base: random_embedding(rng, 0.0),
                    emb_unc: random_embedding(rng, 0.0),
                    target: make_target_weights(0.2, 0.9, 0.1),
                })
                .collect()
        };
        let (train, val, test) = (mk(&mut rng, 128), mk(&mut rng, 32), mk(&mut rng, 32));
        let (gate, params, _) = train_gate(meta(30), &train, &val).unwrap();
        for s in &test {
            let d = gate_forward(&gate, &params, &s.emb_base, &s.emb_unc, 0.6).unwrap();
            assert!(d.w_base > 0.9, "w_base {}", d.w_base);
        }
    }

    #[test]
    fn even_labels_give_an_even_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<GateSample> {
            (0..n)
                .map(|_| GateSample {
                    emb_base: random_embedding(rng, 0.0),
                    emb_unc: random_embedding(rng, 0.5),
                    target: (0.5, 0.5),
                })
                .collect()
        };
        let (train, val) = (mk(&mut rng, 64), mk(&mut rng, 32));
        let (gate, params, log) = train_gate(meta(10), &train, &val).unwrap();
        assert!(log.best_val < 1e-4);
        assert!(evaluate_gate(&gate, &params, &val).unwrap() < 1e-4);
    }

    #[test]
    fn gate_training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<GateSample> = (0..40)
            .map(|i| GateSample {
                emb_base: random_embedding(&mut rng, 0.0),
                emb_unc: random_embedding(&mut rng, 0.0),
                target: make_target_weights(0.1 * (i % 5) as f64, 0.2, 0.1),
            })
            .collect();
        let mut m = meta(3);
        m.config.dropout = 0.1;
        let (_, p1, l1) = train_gate(m.clone(), &samples[..30], &samples[30..]).unwrap();
        let (_, p2, l2) = train_gate(m, &samples[..30], &samples[30..]).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(vb in -50.0f64..50.0, vu in -50.0f64..50.0, t in 0.05f64..5.0) {
            let d = GateDecision::from_logits(vb, vu, t).unwrap();
            prop_assert!((d.w_base + d.w_unc - 1.0).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&d.w_base));
        }

        #[test]
        fn larger_temperature_never_sharpens(vb in -10.0f64..10.0, gap in 1e-3f64..10.0, t in 0.05f64..5.0, dt in 0.0f64..5.0) {
            let a = GateDecision::from_logits(vb, vb - gap, t).unwrap();
            let b = GateDecision::from_logits(vb, vb - gap, t + dt).unwrap();
            prop_assert!(b.w_base <= a.w_base);
        }

        #[test]
        fn fused_waypoints_are_convex(seed in 0u64..10_000, w in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, u) = (random_set(&mut rng, StreamTag::Base), random_set(&mut rng, StreamTag::Unc));
            let d = GateDecision::fixed(w);
            let f = fuse_trajectories(&b, &u, &d).unwrap();
            for k in 0..6 {
                for j in 0..6 {
                    let (p, q, r) = (b.trajectories()[k][j], u.trajectories()[k][j], f.trajectories()[k][j]);
                    // Element-wise oracle.
                    prop_assert!((r.x - (d.w_base * p.x + d.w_unc * q.x)).abs() < 1e-12);
                    prop_assert!((r.y - (d.w_base * p.y + d.w_unc * q.y)).abs() < 1e-12);
                    // On the segment: distances add up.
                    prop_assert!(((r - p).norm() + (q - r).norm() - (q - p).norm()).abs() < 1e-9);
                    // Error to any point is at most the larger endpoint error.
                    let g = Vec2::new(1.0, 2.0);
                    prop_assert!((r - g).norm() <= (p - g).norm().max((q - g).norm()) + 1e-9);
                }
            }
            let m = fuse_matched(&b, &u, &d).unwrap();
            prop_assert!(m.trajectories().iter().flatten().all(|p| p.is_finite()));
        }
    }
}
