//! Average yaw rates, the Δθ scenario indicator and its interval binning.
//!
//! Headings come from finite differences of consecutive waypoints. The
//! direction of the chord between two samples of a constant-curvature arc
//! equals the heading at the chord's temporal midpoint, so the average yaw
//! rate is the unwrapped heading change between the first and last segment
//! divided by the time separating their midpoints, `(segments - 1) * dt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Vec2};

/// Default length of the past and future analysis windows, in seconds.
pub const DEFAULT_WINDOW: f64 = 2.0;

/// Segments shorter than this (metres) carry no heading information.
pub const STATIONARY_EPS: f64 = 1e-4;

/// Number of Δθ intervals: `[0,1)`, `[1,2)`, `[2,3)`, `[3,∞)` radians.
pub const NUM_BINS: usize = 4;

/// A uniformly sampled planar trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory", into = "RawTrajectory")]
pub struct Trajectory {
    points: Vec<Vec2>,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTrajectory {
    points: Vec<Vec2>,
    dt: f64,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;
    fn try_from(raw: RawTrajectory) -> Result<Self> {
        Trajectory::new(raw.points, raw.dt)
    }
}

impl From<Trajectory> for RawTrajectory {
    fn from(t: Trajectory) -> Self {
        RawTrajectory {
            points: t.points,
            dt: t.dt,
        }
    }
}

impl Trajectory {
    pub fn new(points: Vec<Vec2>, dt: f64) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidTrajectory(format!(
                "need at least 3 points, got {}",
                points.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidTrajectory(format!("dt must be positive, got {dt}")));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidTrajectory(format!("point {i} is not finite")));
        }
        Ok(Self { points, dt })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Time between the first and last waypoint.
    pub fn span(&self) -> f64 {
        (self.points.len() - 1) as f64 * self.dt
    }

    pub fn last(&self) -> Vec2 {
        self.points[self.points.len() - 1]
    }

    pub fn map_points(&self, f: impl Fn(Vec2) -> Vec2) -> Trajectory {
        Trajectory {
            points: self.points.iter().map(|&p| f(p)).collect(),
            dt: self.dt,
        }
    }

    fn window_segments(&self, window: f64) -> Result<usize> {
        let k = (window / self.dt - 1e-9).ceil().max(2.0) as usize;
        if self.points.len() - 1 < k {
            return Err(Error::WindowMismatch {
                span: self.span(),
                window,
            });
        }
        Ok(k)
    }

    /// The trailing sub-trajectory covering `window` seconds.
    pub fn tail_window(&self, window: f64) -> Result<Trajectory> {
        let k = self.window_segments(window)?;
        let start = self.points.len() - 1 - k;
        Ok(Trajectory {
            points: self.points[start..].to_vec(),
            dt: self.dt,
        })
    }

    /// The leading sub-trajectory covering `window` seconds.
    pub fn head_window(&self, window: f64) -> Result<Trajectory> {
        let k = self.window_segments(window)?;
        Ok(Trajectory {
            points: self.points[..=k].to_vec(),
            dt: self.dt,
        })
    }
}

/// Yaw-rate summary of a past/future window pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicSummary {
    /// Average yaw rate over the past window, rad/s.
    pub psi_dot_past: f64,
    /// Average yaw rate over the future window, rad/s.
    pub psi_dot_future: f64,
    /// Total rotation over the past window, rad.
    pub theta_past: f64,
    /// Total rotation over the future window, rad.
    pub theta_future: f64,
    /// `|theta_past - theta_future|`, rad.
    pub delta_theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinematicsConfig {
    pub window: f64,
    pub stationary_eps: f64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stationary_eps: STATIONARY_EPS,
        }
    }
}

/// Unwrapped per-segment headings. Near-stationary segments inherit the
/// heading of the previous moving segment (leading ones take the first
/// moving segment's heading).
pub fn segment_headings(traj: &Trajectory, eps: f64) -> Result<Vec<f64>> {
    let raw: Vec<Option<f64>> = traj
        .points
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            (d.norm() >= eps).then(|| d.angle())
        })
        .collect();
    let first = raw
        .iter()
        .flatten()
        .copied()
        .next()
        .ok_or(Error::DegenerateTrajectory { eps })?;

    let mut out = Vec::with_capacity(raw.len());
    let mut prev_raw = first;
    let mut prev_unwrapped = first;
    for h in raw {
        if let Some(h) = h {
            prev_unwrapped += wrap_angle(h - prev_raw);
            prev_raw = h;
        }
        out.push(prev_unwrapped);
    }
    Ok(out)
}

/// Average angular velocity (rad/s) with the default stationary threshold.
pub fn average_angular_velocity(traj: &Trajectory) -> Result<f64> {
    average_angular_velocity_with(traj, STATIONARY_EPS)
}

pub fn average_angular_velocity_with(traj: &Trajectory, eps: f64) -> Result<f64> {
    let headings = segment_headings(traj, eps)?;
    let elapsed = (headings.len() - 1) as f64 * traj.dt;
    Ok((headings[headings.len() - 1] - headings[0]) / elapsed)
}

/// Δθ with the default 2 s windows.
pub fn compute_delta_theta(past: &Trajectory, future: &Trajectory) -> Result<KinematicSummary> {
    compute_delta_theta_with(&KinematicsConfig::default(), past, future)
}

/// Δθ over the last `window` seconds of `past` and the first `window`
/// seconds of `future`. `future` is expected to start at the present
/// instant, i.e. share its first point with the end of `past`.
pub fn compute_delta_theta_with(
    cfg: &KinematicsConfig,
    past: &Trajectory,
    future: &Trajectory,
) -> Result<KinematicSummary> {
    let past_w = past.tail_window(cfg.window)?;
    let future_w = future.head_window(cfg.window)?;
    let psi_dot_past = average_angular_velocity_with(&past_w, cfg.stationary_eps)?;
    let psi_dot_future = average_angular_velocity_with(&future_w, cfg.stationary_eps)?;
    let theta_past = psi_dot_past * cfg.window;
    let theta_future = psi_dot_future * cfg.window;
    Ok(KinematicSummary {
        psi_dot_past,
        psi_dot_future,
        theta_past,
        theta_future,
        delta_theta: (theta_past - theta_future).abs(),
    })
}

/// Half-open radian intervals `[0,1)`, `[1,2)`, `[2,3)`, `[3,∞)`.
pub fn bin_delta_theta(delta_theta: f64) -> Result<usize> {
    if !delta_theta.is_finite() || delta_theta < 0.0 {
        return Err(Error::InvalidValue(format!(
            "delta theta must be finite and non-negative, got {delta_theta}"
        )));
    }
    Ok((delta_theta.floor() as usize).min(NUM_BINS - 1))
}

/// Human-readable label of a Δθ bin, e.g. `[1,2)`.
pub fn bin_label(bin: usize) -> String {
    if bin + 1 >= NUM_BINS {
        format!("[{bin},inf)")
    } else {
        format!("[{bin},{})", bin + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Samples of a circle traversed at constant speed, started at `phase`.
    fn arc(radius: f64, speed: f64, dt: f64, n: usize, phase: f64, ccw: bool) -> Trajectory {
        let omega = speed / radius * if ccw { 1.0 } else { -1.0 };
        let pts = (0..n)
            .map(|i| {
                let a = phase + omega * dt * i as f64;
                Vec2::new(radius * a.cos(), radius * a.sin())
            })
            .collect();
        Trajectory::new(pts, dt).unwrap()
    }

    fn line(v: Vec2, dt: f64, n: usize, start: Vec2) -> Trajectory {
        let pts = (0..n).map(|i| start + v * (dt * i as f64)).collect();
        Trajectory::new(pts, dt).unwrap()
    }

    #[test]
    fn straight_line_has_zero_yaw_rate() {
        let t = line(Vec2::new(5.0, 0.0), 0.5, 5, Vec2::ZERO);
        assert_eq!(average_angular_velocity(&t).unwrap(), 0.0);
    }

    #[test]
    fn circular_arc_matches_speed_over_radius() {
        // oracle: v / R = 5 / 10
        let t = arc(10.0, 5.0, 0.5, 9, 0.3, true);
        let w = average_angular_velocity(&t).unwrap();
        assert!((w - 0.5).abs() < 1e-6, "{w}");
        let t = arc(10.0, 5.0, 0.5, 9, 2.9, false);
        let w = average_angular_velocity(&t).unwrap();
        assert!((w + 0.5).abs() < 1e-6, "{w}");
    }

    #[test]
    fn unwrap_across_pi() {
        // segment headings +3.0 then -3.0, midpoints one second apart
        let p0 = Vec2::ZERO;
        let p1 = p0 + Vec2::from_angle(3.0);
        let p2 = p1 + Vec2::from_angle(-3.0);
        let t = Trajectory::new(vec![p0, p1, p2], 1.0).unwrap();
        let w = average_angular_velocity(&t).unwrap();
        let oracle = 2.0 * std::f64::consts::PI - 6.0;
        assert!((w - oracle).abs() < 1e-12, "{w}");
        assert!((w - 0.283).abs() < 1e-3);
    }

    #[test]
    fn stationary_segments_inherit_heading() {
        let pts = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(2.0, 0.0),
        ];
        let t = Trajectory::new(pts, 0.5).unwrap();
        assert_eq!(average_angular_velocity(&t).unwrap(), 0.0);
    }

    #[test]
    fn fully_stationary_is_degenerate() {
        let t = Trajectory::new(vec![Vec2::new(1.0, 1.0); 5], 0.5).unwrap();
        assert!(matches!(
            average_angular_velocity(&t),
            Err(Error::DegenerateTrajectory { .. })
        ));
    }

    #[test]
    fn trajectory_invariants() {
        assert!(Trajectory::new(vec![Vec2::ZERO; 2], 0.5).is_err());
        assert!(Trajectory::new(vec![Vec2::ZERO; 3], 0.0).is_err());
        assert!(Trajectory::new(vec![Vec2::new(f64::NAN, 0.0); 3], 0.5).is_err());
    }

    /// Past and future windows of a unicycle whose yaw rate switches from
    /// `w_past` to `w_future` at t = 0. Exact arc integration between samples.
    fn switched(speed: f64, w_past: f64, w_future: f64) -> (Trajectory, Trajectory) {
        let dt = 0.5;
        let step = |p: Vec2, h: f64, w: f64| -> (Vec2, f64) {
            let h2 = h + w * dt;
            let d = if w.abs() < 1e-12 {
                Vec2::from_angle(h) * (speed * dt)
            } else {
                let r = speed / w;
                Vec2::new(r * (h2.sin() - h.sin()), -r * (h2.cos() - h.cos()))
            };
            (p + d, h2)
        };
        let mut past = vec![Vec2::ZERO];
        let (mut p, mut h) = (Vec2::ZERO, 0.3);
        for _ in 0..4 {
            (p, h) = step(p, h, w_past);
            past.push(p);
        }
        let mut future = vec![p];
        for _ in 0..4 {
            (p, h) = step(p, h, w_future);
            future.push(p);
        }
        (
            Trajectory::new(past, dt).unwrap(),
            Trajectory::new(future, dt).unwrap(),
        )
    }

    #[test]
    fn steady_turn_has_zero_delta_theta() {
        let (past, future) = switched(5.0, 0.25, 0.25);
        let k = compute_delta_theta(&past, &future).unwrap();
        assert!(k.delta_theta < 1e-9, "{k:?}");
        assert!((k.psi_dot_past - 0.25).abs() < 1e-9);
    }

    #[test]
    fn straight_to_turn_delta_theta() {
        // |0 - 0.5| * 2
        let (past, future) = switched(5.0, 0.0, 0.5);
        let k = compute_delta_theta(&past, &future).unwrap();
        assert!((k.delta_theta - 1.0).abs() < 1e-9, "{k:?}");
        assert_eq!(k.theta_past, k.psi_dot_past * 2.0);
        assert_eq!(k.theta_future, k.psi_dot_future * 2.0);
    }

    #[test]
    fn opposite_turns_delta_theta() {
        // |0.3 - (-0.3)| * 2
        let (past, future) = switched(5.0, 0.3, -0.3);
        let k = compute_delta_theta(&past, &future).unwrap();
        assert!((k.delta_theta - 1.2).abs() < 1e-9, "{k:?}");
    }

    #[test]
    fn short_window_is_rejected() {
        let t = line(Vec2::new(1.0, 0.0), 0.5, 4, Vec2::ZERO);
        assert!(matches!(
            compute_delta_theta(&t, &t),
            Err(Error::WindowMismatch { .. })
        ));
    }

    #[test]
    fn windows_trim_longer_trajectories() {
        let (past, _) = switched(5.0, 0.2, 0.2);
        let long = arc(10.0, 5.0, 0.5, 12, 0.0, true);
        let k = compute_delta_theta(&past, &long).unwrap();
        assert!((k.psi_dot_future - 0.5).abs() < 1e-9);
    }

    #[test]
    fn bins() {
        assert_eq!(bin_delta_theta(0.0).unwrap(), 0);
        assert_eq!(bin_delta_theta(0.999).unwrap(), 0);
        assert_eq!(bin_delta_theta(1.0).unwrap(), 1);
        assert_eq!(bin_delta_theta(2.5).unwrap(), 2);
        assert_eq!(bin_delta_theta(3.7).unwrap(), 3);
        assert_eq!(bin_delta_theta(1e9).unwrap(), 3);
        assert!(bin_delta_theta(-0.1).is_err());
        assert!(bin_delta_theta(f64::NAN).is_err());
        assert!(bin_delta_theta(f64::INFINITY).is_err());
        assert_eq!(bin_label(0), "[0,1)");
        assert_eq!(bin_label(3), "[3,inf)");
    }

    proptest! {
        #[test]
        fn binning_is_total(x in 0.0f64..1e6) {
            let b = bin_delta_theta(x).unwrap();
            prop_assert!(b < NUM_BINS);
            prop_assert!(x >= b as f64);
            if b < NUM_BINS - 1 {
                prop_assert!(x < (b + 1) as f64);
            }
        }

        #[test]
        fn resampling_preserves_yaw_rate(
            radius in 5.0f64..200.0,
            speed in 1.0f64..15.0,
            phase in -3.1f64..3.1,
            ccw in any::<bool>(),
        ) {
            let coarse = arc(radius, speed, 0.5, 5, phase, ccw);
            let fine = arc(radius, speed, 0.25, 9, phase, ccw);
            let a = average_angular_velocity(&coarse).unwrap();
            let b = average_angular_velocity(&fine).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn mirroring_negates_yaw_rates(
            speed in 1.0f64..12.0,
            w1 in -0.9f64..0.9,
            w2 in -0.9f64..0.9,
        ) {
            let (past, future) = switched(speed, w1, w2);
            let mirror = |t: &Trajectory| t.map_points(|p| Vec2::new(p.x, -p.y));
            let k = compute_delta_theta(&past, &future).unwrap();
            let m = compute_delta_theta(&mirror(&past), &mirror(&future)).unwrap();
            prop_assert!((k.psi_dot_past + m.psi_dot_past).abs() < 1e-12);
            prop_assert!((k.psi_dot_future + m.psi_dot_future).abs() < 1e-12);
            prop_assert!((k.delta_theta - m.delta_theta).abs() < 1e-12);
        }

        #[test]
        fn constant_kinematics_give_zero(speed in 1.0f64..12.0, w in -0.9f64..0.9) {
            let (past, future) = switched(speed, w, w);
            let k = compute_delta_theta(&past, &future).unwrap();
            prop_assert!(k.delta_theta < 1e-9);
        }
    }
}
