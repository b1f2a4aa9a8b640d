//! Displacement metrics and Δθ-binned reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::kinematics::{bin_label, Trajectory, NUM_BINS};
use crate::predictor::CandidateSet;

/// Endpoint error above which a scene counts as a miss, m.
pub const MISS_THRESHOLD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTag {
    Base,
    Unc,
    Gated,
}

impl StreamTag {
    pub const ALL: [StreamTag; 3] = [StreamTag::Base, StreamTag::Unc, StreamTag::Gated];

    pub fn name(self) -> &'static str {
        match self {
            StreamTag::Base => "base",
            StreamTag::Unc => "unc",
            StreamTag::Gated => "gated",
        }
    }
}

impl std::str::FromStr for StreamTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StreamTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stream `{s}`")))
    }
}

impl std::fmt::Display for StreamTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_horizons(cands: &[Vec<Vec2>], gt: &[Vec2]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::EmptyInput("no candidates".into()));
    }
    for c in cands {
        if c.len() != gt.len() {
            return Err(Error::HorizonMismatch {
                candidates: c.len(),
                truth: gt.len(),
            });
        }
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("empty ground truth".into()));
    }
    Ok(())
}

/// Mean per-waypoint distance of one trajectory to the ground truth.
pub fn ade(traj: &[Vec2], gt: &[Vec2]) -> f64 {
    traj.iter().zip(gt).map(|(p, g)| p.distance(*g)).sum::<f64>() / gt.len() as f64
}

pub fn fde(traj: &[Vec2], gt: &[Vec2]) -> f64 {
    traj[traj.len() - 1].distance(gt[gt.len() - 1])
}

/// `min_ade` over raw candidate lists of any size.
pub fn min_ade_of(cands: &[Vec<Vec2>], gt: &[Vec2]) -> Result<f64> {
    check_horizons(cands, gt)?;
    Ok(cands.iter().map(|c| ade(c, gt)).fold(f64::INFINITY, f64::min))
}

pub fn min_fde_of(cands: &[Vec<Vec2>], gt: &[Vec2]) -> Result<f64> {
    check_horizons(cands, gt)?;
    Ok(cands.iter().map(|c| fde(c, gt)).fold(f64::INFINITY, f64::min))
}

pub fn min_ade(cands: &CandidateSet, gt: &Trajectory) -> Result<f64> {
    min_ade_of(cands.trajectories(), gt.points())
}

pub fn min_fde(cands: &CandidateSet, gt: &Trajectory) -> Result<f64> {
    min_fde_of(cands.trajectories(), gt.points())
}

/// Whether the best endpoint is more than 2 m from the true endpoint.
pub fn miss(cands: &CandidateSet, gt: &Trajectory) -> Result<bool> {
    Ok(min_fde(cands, gt)? > MISS_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub stream: StreamTag,
    pub min_ade: f64,
    pub min_fde: f64,
    pub missed: bool,
    pub delta_theta_bin: usize,
}

impl SceneMetrics {
    pub fn evaluate(
        scene_id: impl Into<String>,
        cands: &CandidateSet,
        gt: &Trajectory,
        delta_theta_bin: usize,
    ) -> Result<Self> {
        let min_fde = min_fde(cands, gt)?;
        Ok(Self {
            scene_id: scene_id.into(),
            stream: cands.stream(),
            min_ade: min_ade(cands, gt)?,
            min_fde,
            missed: min_fde > MISS_THRESHOLD,
            delta_theta_bin,
        })
    }
}

/// Aggregate over the scenes of one stream, optionally restricted to a bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stream: StreamTag,
    /// `None` for the all-scene row.
    pub bin: Option<usize>,
    pub n: usize,
    pub min_ade: Option<f64>,
    pub min_fde: Option<f64>,
    /// Miss rate in percent.
    pub mr: Option<f64>,
}

impl ReportRow {
    pub fn bin_label(&self) -> String {
        self.bin.map_or_else(|| "overall".to_string(), bin_label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedReport {
    pub rows: Vec<ReportRow>,
    /// Scenes per bin, counted on the first stream present.
    pub bin_counts: [usize; NUM_BINS],
    pub bin_fractions: [f64; NUM_BINS],
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-stream rows for every bin followed by an overall row. Input order
/// does not affect the result: scenes are aggregated in id order.
pub fn binned_report(per_scene: &[SceneMetrics]) -> Result<BinnedReport> {
    if per_scene.is_empty() {
        return Err(Error::EmptyInput("no scene metrics".into()));
    }
    if let Some(m) = per_scene.iter().find(|m| m.delta_theta_bin >= NUM_BINS) {
        return Err(Error::InvalidValue(format!("scene {} has bin {}", m.scene_id, m.delta_theta_bin)));
    }
    let mut sorted: Vec<&SceneMetrics> = per_scene.iter().collect();
    sorted.sort_by(|a, b| a.stream.cmp(&b.stream).then_with(|| a.scene_id.cmp(&b.scene_id)));
    let mut streams: Vec<StreamTag> = sorted.iter().map(|m| m.stream).collect();
    streams.dedup();

    let mut rows = Vec::new();
    for &stream in &streams {
        let of_stream: Vec<&&SceneMetrics> = sorted.iter().filter(|m| m.stream == stream).collect();
        let bins = (0..NUM_BINS).map(Some).chain(std::iter::once(None));
        for bin in bins {
            let sel: Vec<&&SceneMetrics> = of_stream
                .iter()
                .copied()
                .filter(|m| bin.is_none_or(|b| m.delta_theta_bin == b))
                .collect();
            rows.push(ReportRow {
                stream,
                bin,
                n: sel.len(),
                min_ade: mean(sel.iter().map(|m| m.min_ade)),
                min_fde: mean(sel.iter().map(|m| m.min_fde)),
                mr: mean(sel.iter().map(|m| if m.missed { 100.0 } else { 0.0 })),
            });
        }
    }
    let mut bin_counts = [0; NUM_BINS];
    for m in sorted.iter().filter(|m| m.stream == streams[0]) {
        bin_counts[m.delta_theta_bin] += 1;
    }
    let total: usize = bin_counts.iter().sum();
    let bin_fractions = bin_counts.map(|c| c as f64 / total as f64);
    Ok(BinnedReport {
        rows,
        bin_counts,
        bin_fractions,
    })
}

impl BinnedReport {
    pub fn row(&self, stream: StreamTag, bin: Option<usize>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.stream == stream && r.bin == bin)
    }

    /// Columns `stream,bin,n,minADE,minFDE,MR`; empty cells for empty bins.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        let mut out = String::from("stream,bin,n,minADE,minFDE,MR\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.stream,
                r.bin_label(),
                r.n,
                cell(r.min_ade),
                cell(r.min_fde),
                cell(r.mr)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Per-scene metric triple inside an evaluation log record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamScore {
    pub min_ade: f64,
    pub min_fde: f64,
    pub missed: bool,
}

/// One line of the per-scene evaluation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLog {
    pub scene_id: String,
    pub delta_theta: f64,
    pub delta_theta_bin: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_unc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base: Option<StreamScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unc: Option<StreamScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gated: Option<StreamScore>,
}

impl SceneLog {
    pub fn score(&self, stream: StreamTag) -> Option<StreamScore> {
        match stream {
            StreamTag::Base => self.base,
            StreamTag::Unc => self.unc,
            StreamTag::Gated => self.gated,
        }
    }

    /// Expands the record into per-stream metrics.
    pub fn metrics(&self) -> Vec<SceneMetrics> {
        StreamTag::ALL
            .into_iter()
            .filter_map(|s| {
                self.score(s).map(|sc| SceneMetrics {
                    scene_id: self.scene_id.clone(),
                    stream: s,
                    min_ade: sc.min_ade,
                    min_fde: sc.min_fde,
                    missed: sc.missed,
                    delta_theta_bin: self.delta_theta_bin,
                })
            })
            .collect()
    }
}

pub fn logs_to_jsonl(logs: &[SceneLog]) -> String {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l).expect("log serialises"));
        out.push('\n');
    }
    out
}

pub fn logs_from_jsonl(text: &str) -> Result<Vec<SceneLog>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidValue(format!("bad log line: {e}"))))
        .collect()
}
