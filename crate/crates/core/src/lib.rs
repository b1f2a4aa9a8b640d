//! Scenario-gated integration of online-map uncertainty into trajectory
//! prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`kinematics`]: yaw-rate summaries of ego trajectories and the Δθ
//!   scenario indicator with its interval binning.
//! - [`uncertainty`]: per-vertex bivariate densities and the negative
//!   log-likelihood losses used to train map uncertainty.
//! - [`diffcore`]: a small reverse-mode differentiation tape, MLPs, Adam and
//!   the checkpoint format.
//! - [`scenegen`]: the deterministic synthetic driving benchmark.
//! - [`mapper`]: per-vertex online-map surrogate that regresses μ and Σ.
//! - [`predictor`]: dual-stream (with / without uncertainty) trajectory
//!   predictor with winner-take-all training.
//! - [`gating`]: proprioceptive scenario gating over the two streams.
//! - [`metrics`]: minADE / minFDE / miss rate and Δθ-binned reports.
//! - [`pipeline`]: staged training, evaluation and ablation orchestration
//!   shared by the CLI and the acceptance suite.

pub mod diffcore;
pub mod error;
pub mod gating;
pub mod geom;
pub mod kinematics;
pub mod mapper;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod render;
pub mod scenegen;
pub mod uncertainty;

pub use error::{Error, Result};
pub use gating::GateDecision;
pub use geom::Vec2;
pub use kinematics::{KinematicSummary, Trajectory};
pub use metrics::{BinnedReport, SceneMetrics, StreamTag};
pub use predictor::CandidateSet;
pub use scenegen::{Scene, ScenarioKind, ScenarioSpec};
pub use uncertainty::{CovParams, LossKind, PolylineMap, UncertainVertex};
