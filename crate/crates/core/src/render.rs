//! Static SVG scene renders: true map, estimated map with 1σ ellipses,
//! history, ground truth and candidate sets.

use std::fmt::Write;

use crate::geom::Vec2;
use crate::metrics::StreamTag;
use crate::predictor::CandidateSet;
use crate::scenegen::Scene;
use crate::uncertainty::{Cov2, PolylineMap};

const MARGIN: f64 = 3.0;
/// Pixels per meter.
const SCALE: f64 = 8.0;

fn stream_color(tag: StreamTag) -> &'static str {
    match tag {
        StreamTag::Base => "#e08a00",
        StreamTag::Unc => "#7b3fb5",
        StreamTag::Gated => "#d62728",
    }
}

struct Bounds {
    min: Vec2,
    max: Vec2,
}

impl Bounds {
    fn new() -> Self {
        Self {
            min: Vec2::new(f64::INFINITY, f64::INFINITY),
            max: Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn add(&mut self, p: Vec2) {
        self.min = Vec2::new(self.min.x.min(p.x), self.min.y.min(p.y));
        self.max = Vec2::new(self.max.x.max(p.x), self.max.y.max(p.y));
    }
}

fn polyline(out: &mut String, pts: &[Vec2], stroke: &str, width: f64, extra: &str) {
    let coords: Vec<String> = pts.iter().map(|p| format!("{:.4},{:.4}", p.x, p.y)).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{extra}/>"#,
        coords.join(" ")
    );
}

/// A 1σ ellipse: semi-axes are the square roots of Σ's eigenvalues and the
/// major axis follows the leading eigenvector. Angles are in world
/// coordinates; the caller's y-flip keeps them consistent.
pub fn ellipse_element(center: Vec2, cov: &Cov2) -> String {
    let e = cov.ellipse();
    format!(
        r##"<ellipse cx="{:.6}" cy="{:.6}" rx="{:.6}" ry="{:.6}" transform="rotate({:.6} {:.6} {:.6})" fill="#1f77b4" fill-opacity="0.15" stroke="#1f77b4" stroke-width="0.05"/>"##,
        center.x,
        center.y,
        e.semi_major,
        e.semi_minor,
        e.angle.to_degrees(),
        center.x,
        center.y
    )
}

/// Renders one scene. `estimated` is the mapper output; candidate sets are
/// coloured by stream.
pub fn render_scene(scene: &Scene, estimated: Option<&PolylineMap>, candidates: &[&CandidateSet]) -> String {
    let mut b = Bounds::new();
    for p in scene.true_points().chain(scene.history.iter().copied()).chain(scene.future_gt.iter().copied()) {
        b.add(p);
    }
    if let Some(m) = estimated {
        m.vertices().for_each(|v| b.add(v.mu));
    }
    for c in candidates {
        c.trajectories().iter().flatten().for_each(|&p| b.add(p));
    }
    let (x0, y0) = (b.min.x - MARGIN, b.min.y - MARGIN);
    let (w, h) = (b.max.x - b.min.x + 2.0 * MARGIN, b.max.y - b.min.y + 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="{x0:.4} {:.4} {w:.4} {h:.4}">"#,
        w * SCALE,
        h * SCALE,
        -(y0 + h),
    );
    let _ = writeln!(out, "<title>{} ({}, dtheta={:.3})</title>", scene.id, scene.kind.name(), scene.delta_theta_gt);
    out.push_str("<g transform=\"scale(1,-1)\">\n");

    for e in &scene.map.elements {
        polyline(&mut out, &e.true_pts, "#999999", 0.1, "");
    }
    if let Some(m) = estimated {
        for e in m.elements() {
            let mus: Vec<Vec2> = e.vertices.iter().map(|v| v.mu).collect();
            polyline(&mut out, &mus, "#1f77b4", 0.06, r#" stroke-dasharray="0.3,0.2""#);
            for v in &e.vertices {
                out.push_str(&ellipse_element(v.mu, &v.cov.cov()));
                out.push('\n');
            }
        }
    }
    for c in candidates {
        for t in c.trajectories() {
            let mut pts = vec![scene.present()];
            pts.extend_from_slice(t);
            polyline(&mut out, &pts, stream_color(c.stream()), 0.12, r#" stroke-opacity="0.8""#);
        }
    }
    polyline(&mut out, &scene.history, "#000000", 0.18, "");
    let mut gt = vec![scene.present()];
    gt.extend_from_slice(&scene.future_gt);
    polyline(&mut out, &gt, "#2ca02c", 0.18, "");
    out.push_str("</g>\n</svg>\n");
    out
}
