//! Deterministic synthetic driving benchmark.
//!
//! The ego follows a road reference line whose curvature switches at the
//! present instant (optionally through a linear blend). The map holds three
//! polylines offset laterally from that line, sampled over a fixed arc-length
//! window around the ego. Observed vertices are corrupted by noise whose
//! principal axis follows the local tangent and whose scale grows with
//! occlusion.
//!
//! Scene JSON (`schema_version` 1):
//!
//! ```text
//! {schema_version, id, kind, dt, history: [[x,y]..], future_gt: [[x,y]..],
//!  map: {elements: [{class, true_pts: [[x,y]..],
//!                    observed: [{xy, context: {distance, occlusion,
//!                                              class_one_hot, tangent}}..],
//!                    true_cov: [[σ1,σ2,ρ]..]}]},
//!  delta_theta_gt, delta_theta_bin}
//! ```
//!
//! The manifest lists scene counts per Δθ bin for every split together with
//! the master seed and the generator configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::derive_seed;
use crate::error::{Error, Result};
use crate::geom::{Frame, Vec2};
use crate::kinematics::{bin_delta_theta, compute_delta_theta, Trajectory, NUM_BINS};
use crate::uncertainty::{Cov2, ElementClass};

pub const SCHEMA_VERSION: u32 = 1;
/// Sample spacing of history and future, s.
pub const DT: f64 = 0.5;
/// History points, covering −2 s .. 0 s.
pub const HISTORY_LEN: usize = 5;
/// Future points, covering 0.5 s .. 3 s.
pub const FUTURE_LEN: usize = 6;
pub const VERTICES_PER_ELEMENT: usize = 20;
pub const NUM_ELEMENTS: usize = 3;
pub const LANE_HALF_WIDTH: f64 = 1.75;
/// Arc-length window of the map relative to the ego, m.
pub const MAP_BEHIND: f64 = 30.0;
pub const MAP_AHEAD: f64 = 40.0;
/// Duration of a lane change, s.
pub const LANE_CHANGE_TIME: f64 = 4.0;
/// Normalisation scale of the distance-to-ego feature, m.
pub const DISTANCE_SCALE: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Straight,
    SteadyTurn,
    StraightToTurn,
    TurnToStraight,
    LaneChange,
    /// Turn whose direction flips at the present instant.
    ReverseTurn,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Straight,
        ScenarioKind::SteadyTurn,
        ScenarioKind::StraightToTurn,
        ScenarioKind::TurnToStraight,
        ScenarioKind::LaneChange,
        ScenarioKind::ReverseTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::SteadyTurn => "steady_turn",
            ScenarioKind::StraightToTurn => "straight_to_turn",
            ScenarioKind::TurnToStraight => "turn_to_straight",
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::ReverseTurn => "reverse_turn",
        }
    }
}

/// World placement of the ego at the present instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub origin: Vec2,
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// m/s
    pub speed: f64,
    /// 1/m, before the present instant.
    pub curvature_past: f64,
    /// 1/m, after the present instant.
    pub curvature_future: f64,
    /// Along-tangent noise standard deviation at zero occlusion, m.
    pub noise_along: f64,
    /// Cross-tangent noise standard deviation at zero occlusion, m.
    pub noise_cross: f64,
    /// Noise scale multiplier is `1 + occlusion_gain · occlusion`.
    #[serde(default = "default_occlusion_gain")]
    pub occlusion_gain: f64,
    /// One value per vertex in element-major order; empty means unoccluded.
    #[serde(default)]
    pub occlusion_profile: Vec<f64>,
    /// Linear curvature blend after the present instant, s.
    #[serde(default)]
    pub blend_time: f64,
    /// Drawn from `seed` when absent.
    #[serde(default)]
    pub pose: Option<Pose>,
    pub seed: u64,
}

fn default_occlusion_gain() -> f64 {
    2.0
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, speed: f64, curvature_past: f64, curvature_future: f64) -> Self {
        Self {
            kind,
            speed,
            curvature_past,
            curvature_future,
            noise_along: 0.5,
            noise_cross: 0.05,
            occlusion_gain: default_occlusion_gain(),
            occlusion_profile: Vec::new(),
            blend_time: 0.0,
            pose: None,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, along: f64, cross: f64) -> Self {
        self.noise_along = along;
        self.noise_cross = cross;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_pose(mut self, origin: Vec2, heading: f64) -> Self {
        self.pose = Some(Pose { origin, heading });
        self
    }

    pub fn with_occlusion(mut self, profile: Vec<f64>) -> Self {
        self.occlusion_profile = profile;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return bad(format!("speed must be positive, got {}", self.speed));
        }
        if !(self.noise_along >= 0.0 && self.noise_cross >= 0.0 && self.occlusion_gain >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        if !(self.blend_time >= 0.0 && self.blend_time.is_finite()) {
            return bad("blend time must be non-negative".into());
        }
        for k in [self.curvature_past, self.curvature_future] {
            if !k.is_finite() || k.abs() * self.speed > 1.0 + 1e-12 {
                return bad(format!("yaw rate |{k}·{}| exceeds 1 rad/s", self.speed));
            }
        }
        let n = NUM_ELEMENTS * VERTICES_PER_ELEMENT;
        if !self.occlusion_profile.is_empty() && self.occlusion_profile.len() != n {
            return bad(format!("occlusion profile needs {n} values"));
        }
        if self.occlusion_profile.iter().any(|o| !(0.0..=1.0).contains(o)) {
            return bad("occlusion values must lie in [0, 1]".into());
        }
        let (kp, kf) = (self.curvature_past, self.curvature_future);
        let ok = match self.kind {
            ScenarioKind::Straight => kp == 0.0 && kf == 0.0,
            ScenarioKind::SteadyTurn => kp != 0.0 && kp == kf,
            ScenarioKind::StraightToTurn => kp == 0.0 && kf != 0.0,
            ScenarioKind::TurnToStraight => kp != 0.0 && kf == 0.0,
            ScenarioKind::LaneChange => kp == kf,
            ScenarioKind::ReverseTurn => kp * kf < 0.0,
        };
        if !ok {
            return bad(format!("curvatures ({kp}, {kf}) do not fit {:?}", self.kind));
        }
        Ok(())
    }
}

/// Observable per-vertex context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexContext {
    /// Distance from the ego to the observed vertex, m.
    pub distance: f64,
    /// In `[0, 1]`.
    pub occlusion: f64,
    pub class_one_hot: [f64; 4],
    /// Unit direction estimated from the observed neighbours.
    pub tangent: Vec2,
}

impl VertexContext {
    pub const WIDTH: usize = 8;

    /// Network input: `[distance/40, occlusion, one-hot(4), tangent(2)]`.
    pub fn features(&self) -> [f64; Self::WIDTH] {
        let c = self.class_one_hot;
        [
            self.distance / DISTANCE_SCALE,
            self.occlusion,
            c[0],
            c[1],
            c[2],
            c[3],
            self.tangent.x,
            self.tangent.y,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.distance.is_finite()
            && self.occlusion.is_finite()
            && self.class_one_hot.iter().all(|v| v.is_finite())
            && self.tangent.is_finite();
        if !finite || !(0.0..=1.0).contains(&self.occlusion) || self.distance < 0.0 {
            return Err(Error::InvalidValue("vertex context out of range".into()));
        }
        if (self.tangent.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidValue("tangent is not unit length".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexObservation {
    #[serde(rename = "xy")]
    pub noisy_xy: Vec2,
    pub context: VertexContext,
}

impl VertexObservation {
    pub fn validate(&self) -> Result<()> {
        if !self.noisy_xy.is_finite() {
            return Err(Error::InvalidValue("observation must be finite".into()));
        }
        self.context.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneElement {
    pub class: ElementClass,
    pub true_pts: Vec<Vec2>,
    pub observed: Vec<VertexObservation>,
    /// Ground-truth noise `(σ1, σ2, ρ)` per vertex.
    pub true_cov: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMap {
    pub elements: Vec<SceneElement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub id: String,
    pub kind: ScenarioKind,
    pub dt: f64,
    /// Ego positions at −2 s .. 0 s, world frame.
    pub history: Vec<Vec2>,
    /// Ego positions at 0.5 s .. 3 s, world frame.
    pub future_gt: Vec<Vec2>,
    pub map: SceneMap,
    pub delta_theta_gt: f64,
    pub delta_theta_bin: usize,
}

impl Scene {
    pub fn ego_history(&self) -> Result<Trajectory> {
        Trajectory::new(self.history.clone(), self.dt)
    }

    pub fn ego_future(&self) -> Result<Trajectory> {
        Trajectory::new(self.future_gt.clone(), self.dt)
    }

    /// Future prefixed with the present position.
    pub fn future_from_present(&self) -> Result<Trajectory> {
        let mut pts = Vec::with_capacity(self.future_gt.len() + 1);
        pts.push(self.present());
        pts.extend_from_slice(&self.future_gt);
        Trajectory::new(pts, self.dt)
    }

    pub fn present(&self) -> Vec2 {
        self.history[self.history.len() - 1]
    }

    /// Ego-centred frame at the present instant, aligned with the last
    /// history step.
    pub fn ego_frame(&self) -> Frame {
        let n = self.history.len();
        let d = self.history[n - 1] - self.history[n - 2];
        Frame {
            origin: self.history[n - 1],
            heading: d.angle(),
        }
    }

    /// Δθ recomputed from the stored noiseless trajectories.
    pub fn recompute_delta_theta(&self) -> Result<f64> {
        Ok(compute_delta_theta(&self.ego_history()?, &self.future_from_present()?)?.delta_theta)
    }

    pub fn observations(&self) -> impl Iterator<Item = &VertexObservation> + '_ {
        self.map.elements.iter().flat_map(|e| e.observed.iter())
    }

    pub fn true_points(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.map.elements.iter().flat_map(|e| e.true_pts.iter().copied())
    }

    pub fn true_covs(&self) -> impl Iterator<Item = Cov2> + '_ {
        self.map
            .elements
            .iter()
            .flat_map(|e| e.true_cov.iter().map(|c| Cov2::from_sigmas(c[0], c[1], c[2])))
    }

    pub fn vertex_count(&self) -> usize {
        self.map.elements.iter().map(|e| e.observed.len()).sum()
    }
}

// Road geometry ----------------------------------------------------------

/// Reference line parameterised by arc length `s`, with `s = 0` at the ego's
/// present position.
struct Road {
    pose: Pose,
    kp: f64,
    kf: f64,
    /// Arc length of the curvature blend, m.
    blend: f64,
}

/// Advances `(p, heading)` along a constant-curvature arc of signed length `len`.
fn arc(p: Vec2, heading: f64, kappa: f64, len: f64) -> (Vec2, f64) {
    let h1 = heading + kappa * len;
    if kappa.abs() < 1e-12 {
        return (p + Vec2::from_angle(heading) * len, h1);
    }
    let d = Vec2::new(
        (h1.sin() - heading.sin()) / kappa,
        (heading.cos() - h1.cos()) / kappa,
    );
    (p + d, h1)
}

impl Road {
    fn at(&self, s: f64) -> (Vec2, f64) {
        let (p0, h0) = (self.pose.origin, self.pose.heading);
        if s <= 0.0 {
            return arc(p0, h0, self.kp, s);
        }
        if self.blend <= 0.0 {
            return arc(p0, h0, self.kf, s);
        }
        let ramp = s.min(self.blend);
        let steps = (ramp / 0.01).ceil().max(1.0) as usize;
        let ds = ramp / steps as f64;
        let (mut p, mut h) = (p0, h0);
        for i in 0..steps {
            let mid = (i as f64 + 0.5) * ds;
            let k = self.kp + (self.kf - self.kp) * mid / self.blend;
            (p, h) = arc(p, h, k, ds);
        }
        if s > self.blend {
            (p, h) = arc(p, h, self.kf, s - self.blend);
        }
        (p, h)
    }
}

/// Quintic smoothstep with zero first and second derivatives at both ends.
fn smootherstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (u * (6.0 * u - 15.0) + 10.0)
}

fn lateral_offsets(kind: ScenarioKind) -> [(ElementClass, f64); NUM_ELEMENTS] {
    let w = LANE_HALF_WIDTH;
    match kind {
        ScenarioKind::LaneChange => [
            (ElementClass::Boundary, -w),
            (ElementClass::Divider, w),
            (ElementClass::Boundary, 3.0 * w),
        ],
        _ => [
            (ElementClass::Boundary, -w),
            (ElementClass::Centerline, 0.0),
            (ElementClass::Boundary, w),
        ],
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Builds one scene. The ego path is the exact integral of the specified
/// curvature profile at constant speed along the reference line.
pub fn generate_scene(spec: &ScenarioSpec, id: impl Into<String>) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pose = match spec.pose {
        Some(p) => p,
        None => Pose {
            origin: Vec2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
            heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        },
    };
    let road = Road {
        pose,
        kp: spec.curvature_past,
        kf: spec.curvature_future,
        blend: spec.speed * spec.blend_time,
    };

    let ego_at = |t: f64| {
        let (p, h) = road.at(spec.speed * t);
        let d = if spec.kind == ScenarioKind::LaneChange && t > 0.0 {
            2.0 * LANE_HALF_WIDTH * smootherstep(t / LANE_CHANGE_TIME)
        } else {
            0.0
        };
        p + Vec2::from_angle(h).perp() * d
    };
    let history: Vec<Vec2> = (0..HISTORY_LEN)
        .map(|k| ego_at((k as f64 - (HISTORY_LEN - 1) as f64) * DT))
        .collect();
    let future_gt: Vec<Vec2> = (1..=FUTURE_LEN).map(|k| ego_at(k as f64 * DT)).collect();
    let present = history[HISTORY_LEN - 1];

    let mut elements = Vec::with_capacity(NUM_ELEMENTS);
    for (e, (class, offset)) in lateral_offsets(spec.kind).into_iter().enumerate() {
        let mut true_pts = Vec::with_capacity(VERTICES_PER_ELEMENT);
        let mut noisy = Vec::with_capacity(VERTICES_PER_ELEMENT);
        let mut true_cov = Vec::with_capacity(VERTICES_PER_ELEMENT);
        let mut occl = Vec::with_capacity(VERTICES_PER_ELEMENT);
        for j in 0..VERTICES_PER_ELEMENT {
            let s = -MAP_BEHIND
                + (MAP_BEHIND + MAP_AHEAD) * j as f64 / (VERTICES_PER_ELEMENT - 1) as f64;
            let (p, h) = road.at(s);
            let tangent = Vec2::from_angle(h);
            let truth = p + tangent.perp() * offset;
            let occ = spec
                .occlusion_profile
                .get(e * VERTICES_PER_ELEMENT + j)
                .copied()
                .unwrap_or(0.0);
            let scale = 1.0 + spec.occlusion_gain * occ;
            let (along, cross) = (spec.noise_along * scale, spec.noise_cross * scale);
            let (z1, z2) = (standard_normal(&mut rng), standard_normal(&mut rng));
            noisy.push(truth + tangent * (along * z1) + tangent.perp() * (cross * z2));
            let (s1, s2, rho) = Cov2::oriented(h, along, cross).to_sigmas();
            true_cov.push([s1, s2, rho]);
            true_pts.push(truth);
            occl.push(occ);
        }
        let mut one_hot = [0.0; 4];
        one_hot[class.index()] = 1.0;
        let observed = (0..VERTICES_PER_ELEMENT)
            .map(|j| {
                let lo = j.saturating_sub(1);
                let hi = (j + 1).min(VERTICES_PER_ELEMENT - 1);
                let d = noisy[hi] - noisy[lo];
                let tangent = if d.norm() > 0.0 {
                    d * (1.0 / d.norm())
                } else {
                    Vec2::from_angle(pose.heading)
                };
                VertexObservation {
                    noisy_xy: noisy[j],
                    context: VertexContext {
                        distance: noisy[j].distance(present),
                        occlusion: occl[j],
                        class_one_hot: one_hot,
                        tangent,
                    },
                }
            })
            .collect();
        elements.push(SceneElement {
            class,
            true_pts,
            observed,
            true_cov,
        });
    }

    let mut scene = Scene {
        schema_version: SCHEMA_VERSION,
        id: id.into(),
        kind: spec.kind,
        dt: DT,
        history,
        future_gt,
        map: SceneMap { elements },
        delta_theta_gt: 0.0,
        delta_theta_bin: 0,
    };
    scene.delta_theta_gt = scene.recompute_delta_theta()?;
    scene.delta_theta_bin = bin_delta_theta(scene.delta_theta_gt)?;
    Ok(scene)
}

// Benchmark --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub master_seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fractions of scenes per Δθ bin; must sum to 1.
    pub quotas: [f64; NUM_BINS],
    pub noise_along: f64,
    pub noise_cross: f64,
    pub occlusion_gain: f64,
    pub blend_time: f64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            train: 1000,
            val: 200,
            test: 200,
            quotas: [0.52, 0.28, 0.12, 0.08],
            noise_along: 0.5,
            noise_cross: 0.05,
            occlusion_gain: 2.0,
            blend_time: 0.0,
            speed_min: 4.0,
            speed_max: 12.0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.quotas.iter().sum();
        if self.quotas.iter().any(|q| !(*q >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("bin quotas must be non-negative and sum to 1, got {sum}")));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::Config("speed range must be positive and ordered".into()));
        }
        if !(self.noise_along >= 0.0 && self.noise_cross >= 0.0 && self.occlusion_gain >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one scene".into()));
        }
        Ok(())
    }

    pub fn splits(&self) -> [(Split, usize); 3] {
        [(Split::Train, self.train), (Split::Val, self.val), (Split::Test, self.test)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-bin counts that sum to `n`, by largest remainder (ties to the lower bin).
pub fn quota_counts(quotas: &[f64; NUM_BINS], n: usize) -> [usize; NUM_BINS] {
    let raw: Vec<f64> = quotas.iter().map(|q| q * n as f64).collect();
    let mut counts = [0usize; NUM_BINS];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut order: Vec<usize> = (0..NUM_BINS).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &b in order.iter().take(missing) {
        counts[b] += 1;
    }
    counts
}

fn sample_occlusion(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = VERTICES_PER_ELEMENT;
    let mut out = Vec::with_capacity(NUM_ELEMENTS * n);
    for _ in 0..NUM_ELEMENTS {
        let occluders: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.random_range(0.2..1.2),
                    rng.random_range(-MAP_BEHIND..MAP_AHEAD),
                    rng.random_range(3.0..12.0),
                )
            })
            .collect();
        for j in 0..n {
            let s = -MAP_BEHIND + (MAP_BEHIND + MAP_AHEAD) * j as f64 / (n - 1) as f64;
            let base = 0.25 * s.abs() / MAP_AHEAD;
            let bumps: f64 = occluders
                .iter()
                .map(|(a, c, w)| a * (-((s - c) / w).powi(2)).exp())
                .sum();
            out.push((base + bumps).clamp(0.0, 1.0));
        }
    }
    out
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Draws a candidate spec aimed at `bin`; the caller keeps it only if the
/// realised Δθ lands there.
fn propose_spec(cfg: &BenchmarkConfig, bin: usize, rng: &mut ChaCha8Rng) -> ScenarioSpec {
    use ScenarioKind::*;
    let kinds: &[ScenarioKind] = match bin {
        0 => &[Straight, SteadyTurn, SteadyTurn, StraightToTurn, TurnToStraight, LaneChange],
        1 => &[StraightToTurn, TurnToStraight, ReverseTurn],
        // a single turn tops out at Δθ = 2 under the yaw-rate bound
        _ => &[ReverseTurn],
    };
    let kind = kinds[rng.random_range(0..kinds.len())];
    let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
    // yaw rates in rad/s; Δθ = 2 s · |ω_past − ω_future|
    let lo = (bin as f64 / 2.0).max(0.05);
    let hi = ((bin as f64 + 1.0) / 2.0).min(1.0);
    let mut yaw = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let (wp, wf) = match kind {
        Straight => (0.0, 0.0),
        LaneChange => {
            let w = yaw(0.0, 0.15);
            (w, w)
        }
        SteadyTurn => {
            let w = yaw(0.05, 0.8);
            (w, w)
        }
        StraightToTurn => (0.0, yaw(lo, hi)),
        TurnToStraight => (yaw(lo, hi), 0.0),
        ReverseTurn => {
            let a = yaw(0.05, 1.0);
            let b = yaw(0.05, 1.0);
            (a, -b)
        }
    };
    let s = sign(rng);
    let mut spec = ScenarioSpec::new(kind, speed, s * wp / speed, s * wf / speed)
        .with_noise(cfg.noise_along, cfg.noise_cross)
        .with_occlusion(sample_occlusion(rng))
        .with_seed(rng.random());
    spec.occlusion_gain = cfg.occlusion_gain;
    spec.blend_time = cfg.blend_time;
    spec
}

/// Distance of Δθ to the nearest bin edge below which a proposal is
/// rejected, so stored and recomputed bins cannot disagree by rounding.
const BIN_EDGE_MARGIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub bins: [usize; NUM_BINS],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub master_seed: u64,
    pub config: BenchmarkConfig,
    pub splits: BTreeMap<Split, SplitSummary>,
    /// Scene ids per split, in file order.
    pub scenes: BTreeMap<Split, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub manifest: Manifest,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates all splits in memory. Scene `i` (counted across splits in
/// train, val, test order) draws from seed `master_seed + i`.
pub fn build_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let mut index = 0u64;
    let mut out: BTreeMap<Split, Vec<Scene>> = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut ids = BTreeMap::new();
    for (split, n) in cfg.splits() {
        let counts = quota_counts(&cfg.quotas, n);
        let mut targets: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(b, &c)| std::iter::repeat_n(b, c))
            .collect();
        let mut order_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, &format!("bins/{}", split.name())));
        for i in (1..targets.len()).rev() {
            targets.swap(i, order_rng.random_range(0..=i));
        }
        let mut scenes = Vec::with_capacity(n);
        for (k, &bin) in targets.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed.wrapping_add(index));
            index += 1;
            let id = format!("{}-{k:04}", split.name());
            let scene = loop {
                let spec = propose_spec(cfg, bin, &mut rng);
                let scene = generate_scene(&spec, id.clone())?;
                let dt = scene.delta_theta_gt;
                let edge = (dt - dt.round()).abs();
                if scene.delta_theta_bin == bin && (edge > BIN_EDGE_MARGIN || dt < 0.5) {
                    break scene;
                }
            };
            scenes.push(scene);
        }
        let mut bins = [0; NUM_BINS];
        for s in &scenes {
            bins[s.delta_theta_bin] += 1;
        }
        splits.insert(split, SplitSummary { count: n, bins });
        ids.insert(split, scenes.iter().map(|s| s.id.clone()).collect());
        out.insert(split, scenes);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        master_seed: cfg.master_seed,
        config: cfg.clone(),
        splits,
        scenes: ids,
    };
    let mut take = |s| out.remove(&s).unwrap_or_default();
    Ok(Benchmark {
        manifest,
        train: take(Split::Train),
        val: take(Split::Val),
        test: take(Split::Test),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

pub fn scene_path(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.name()).join(format!("{id}.json"))
}

/// Writes one JSON file per scene under `root/<split>/` plus `root/manifest.json`.
pub fn write_benchmark(bench: &Benchmark, root: &Path) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for scene in bench.split(split) {
            write_json(&scene_path(root, split, &scene.id), scene)?;
        }
    }
    write_json(&manifest_path(root), &bench.manifest)
}

/// Generates and writes the benchmark.
pub fn generate_benchmark(cfg: &BenchmarkConfig, root: &Path) -> Result<Manifest> {
    let bench = build_benchmark(cfg)?;
    write_benchmark(&bench, root)?;
    Ok(bench.manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = manifest_path(root);
    if !path.exists() {
        return Err(Error::MissingUpstream(path));
    }
    let m: Manifest = read_json(&path)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported dataset schema {}", m.schema_version)));
    }
    Ok(m)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let scene: Scene = read_json(path)?;
    if scene.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported scene schema {}", scene.schema_version)));
    }
    Ok(scene)
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<Scene>> {
    let manifest = load_manifest(root)?;
    manifest
        .scenes
        .get(&split)
        .map(|ids| ids.iter().map(|id| load_scene(&scene_path(root, split, id))).collect())
        .unwrap_or_else(|| Ok(Vec::new()))
}

pub fn load_benchmark(root: &Path) -> Result<Benchmark> {
    Ok(Benchmark {
        manifest: load_manifest(root)?,
        train: load_split(root, Split::Train)?,
        val: load_split(root, Split::Val)?,
        test: load_split(root, Split::Test)?,
    })
}
