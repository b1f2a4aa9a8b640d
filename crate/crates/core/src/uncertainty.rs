//! Bivariate vertex densities and their negative log-likelihood losses.
//!
//! A vertex is `N(μ, Σ)` with `Σ = [σ1², ρσ1σ2; ρσ1σ2, σ2²]`. Parameters are
//! kept unconstrained: `σ = exp(log_sigma)` and `ρ = tanh(rho_raw)`.
//!
//! Per-vertex Gaussian NLL with `u = dx/σ1`, `w = dy/σ2`, `s = 1 - ρ²`:
//!
//! ```text
//! L = ½ log((2π)² |Σ|) + ½ (u² - 2ρuw + w²) / s
//! ```
//!
//! The independent variants drop ρ (Gaussian) or use per-axis Laplace
//! densities with scales `b = exp(log_sigma)`.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound on `|Σ|` in m⁴ before taking its log or inverse.
pub const DET_FLOOR: f64 = 1e-12;

/// Unconstrained covariance parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovParams {
    pub log_sigma1: f64,
    pub log_sigma2: f64,
    pub rho_raw: f64,
}

impl CovParams {
    pub const IDENTITY: CovParams = CovParams {
        log_sigma1: 0.0,
        log_sigma2: 0.0,
        rho_raw: 0.0,
    };

    pub fn new(log_sigma1: f64, log_sigma2: f64, rho_raw: f64) -> Self {
        Self {
            log_sigma1,
            log_sigma2,
            rho_raw,
        }
    }

    /// From standard deviations and a correlation in (-1, 1).
    pub fn from_sigmas(sigma1: f64, sigma2: f64, rho: f64) -> Result<Self> {
        if !(sigma1 > 0.0 && sigma2 > 0.0 && rho.abs() < 1.0) {
            return Err(Error::InvalidValue(format!(
                "need σ > 0 and |ρ| < 1, got ({sigma1}, {sigma2}, {rho})"
            )));
        }
        Ok(Self::new(sigma1.ln(), sigma2.ln(), rho.atanh()))
    }

    pub fn sigma1(&self) -> f64 {
        self.log_sigma1.exp()
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    pub fn rho(&self) -> f64 {
        self.rho_raw.tanh()
    }

    pub fn is_finite(&self) -> bool {
        self.log_sigma1.is_finite() && self.log_sigma2.is_finite() && self.rho_raw.is_finite()
    }

    pub fn cov(&self) -> Cov2 {
        Cov2::from_sigmas(self.sigma1(), self.sigma2(), self.rho())
    }
}

/// Symmetric 2×2 matrix `[xx, xy; xy, yy]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

/// Principal axes of a covariance: standard deviations along the major and
/// minor eigenvectors and the major axis angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
}

impl Cov2 {
    pub fn from_sigmas(sigma1: f64, sigma2: f64, rho: f64) -> Self {
        Self {
            xx: sigma1 * sigma1,
            xy: rho * sigma1 * sigma2,
            yy: sigma2 * sigma2,
        }
    }

    /// `R(angle) · diag(along², cross²) · R(angle)ᵀ`.
    pub fn oriented(angle: f64, along: f64, cross: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (a2, c2) = (along * along, cross * cross);
        Self {
            xx: a2 * c * c + c2 * s * s,
            xy: (a2 - c2) * s * c,
            yy: a2 * s * s + c2 * c * c,
        }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// `(σ1, σ2, ρ)`; ρ is 0 when either axis has zero variance.
    pub fn to_sigmas(&self) -> (f64, f64, f64) {
        let s1 = self.xx.max(0.0).sqrt();
        let s2 = self.yy.max(0.0).sqrt();
        let rho = if s1 > 0.0 && s2 > 0.0 {
            (self.xy / (s1 * s2)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        (s1, s2, rho)
    }

    /// `R Σ Rᵀ` for a rotation by `theta`.
    pub fn rotate(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let (a, b, d) = (self.xx, self.xy, self.yy);
        Self {
            xx: c * c * a - 2.0 * s * c * b + s * s * d,
            xy: s * c * (a - d) + (c * c - s * s) * b,
            yy: s * s * a + 2.0 * s * c * b + c * c * d,
        }
    }

    /// Closed-form eigen decomposition of the symmetric 2×2 matrix.
    pub fn eigen(&self) -> (f64, f64, f64) {
        let mean = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let r = half_diff.hypot(self.xy);
        let angle = 0.5 * (2.0 * self.xy).atan2(self.xx - self.yy);
        (mean + r, mean - r, angle)
    }

    /// One-sigma ellipse.
    pub fn ellipse(&self) -> Ellipse {
        let (l1, l2, angle) = self.eigen();
        Ellipse {
            semi_major: l1.max(0.0).sqrt(),
            semi_minor: l2.max(0.0).sqrt(),
            angle,
        }
    }
}

/// A map vertex with Gaussian position uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertainVertex {
    pub mu: Vec2,
    pub cov: CovParams,
}

impl UncertainVertex {
    pub fn new(mu: Vec2, cov: CovParams) -> Self {
        Self { mu, cov }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() || !self.cov.is_finite() {
            return Err(Error::InvalidValue("vertex parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementClass {
    Divider,
    Boundary,
    Crossing,
    Centerline,
}

impl ElementClass {
    pub const ALL: [ElementClass; 4] = [
        ElementClass::Divider,
        ElementClass::Boundary,
        ElementClass::Crossing,
        ElementClass::Centerline,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub class: ElementClass,
    pub vertices: Vec<UncertainVertex>,
}

/// Vectorised map: polylines of uncertain vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolylineMap {
    elements: Vec<MapElement>,
}

impl PolylineMap {
    pub fn new(elements: Vec<MapElement>) -> Result<Self> {
        if let Some(e) = elements.iter().find(|e| e.vertices.len() < 2) {
            return Err(Error::InvalidValue(format!(
                "{:?} element has {} vertices, need at least 2",
                e.class,
                e.vertices.len()
            )));
        }
        if elements.is_empty() {
            return Err(Error::EmptyMap);
        }
        for v in elements.iter().flat_map(|e| &e.vertices) {
            v.validate()?;
        }
        Ok(Self { elements })
    }

    pub fn elements(&self) -> &[MapElement] {
        &self.elements
    }

    pub fn vertices(&self) -> impl Iterator<Item = &UncertainVertex> + '_ {
        self.elements.iter().flat_map(|e| e.vertices.iter())
    }

    pub fn vertex_count(&self) -> usize {
        self.elements.iter().map(|e| e.vertices.len()).sum()
    }

    /// Reorders vertices within each element and the elements themselves;
    /// used to probe permutation invariance.
    pub fn map_vertices(&self, f: impl Fn(&UncertainVertex) -> UncertainVertex) -> PolylineMap {
        PolylineMap {
            elements: self
                .elements
                .iter()
                .map(|e| MapElement {
                    class: e.class,
                    vertices: e.vertices.iter().map(&f).collect(),
                })
                .collect(),
        }
    }
}

/// Which density the mapper's uncertainty head is trained under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    GaussianCov,
    GaussianIndep,
    LaplaceIndep,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [
        LossKind::LaplaceIndep,
        LossKind::GaussianIndep,
        LossKind::GaussianCov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::GaussianCov => "gaussian_cov",
            LossKind::GaussianIndep => "gaussian_indep",
            LossKind::LaplaceIndep => "laplace_indep",
        }
    }

    pub fn uses_correlation(self) -> bool {
        matches!(self, LossKind::GaussianCov)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}`")))
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the `log_sigma² + rho_raw²` parameter penalty.
    pub lambda_reg: f64,
    pub det_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1e-3,
            det_floor: DET_FLOOR,
        }
    }
}

impl LossConfig {
    pub fn unregularized() -> Self {
        Self {
            lambda_reg: 0.0,
            ..Self::default()
        }
    }
}

/// Gradient of a per-vertex loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VertexGrad {
    pub d_mu: Vec2,
    pub d_log_sigma1: f64,
    pub d_log_sigma2: f64,
    pub d_rho_raw: f64,
}

impl VertexGrad {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.d_mu.x,
            self.d_mu.y,
            self.d_log_sigma1,
            self.d_log_sigma2,
            self.d_rho_raw,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<VertexGrad>,
}

/// Correlated Gaussian NLL of `target` under one vertex, with gradient.
pub fn gaussian_vertex_nll(
    mu: Vec2,
    cov: &CovParams,
    target: Vec2,
    cfg: &LossConfig,
) -> (f64, VertexGrad) {
    let (a, b, r) = (cov.log_sigma1, cov.log_sigma2, cov.rho_raw);
    let (s1, s2, rho) = (a.exp(), b.exp(), r.tanh());
    let s = 1.0 - rho * rho;
    let d = target - mu;
    let det = (2.0 * (a + b)).exp() * s;

    let (mut loss, mut g) = if det >= cfg.det_floor && s > 0.0 {
        let u = d.x / s1;
        let w = d.y / s2;
        let q = (u * u - 2.0 * rho * u * w + w * w) / s;
        let loss = LN_2PI + a + b + 0.5 * s.ln() + 0.5 * q;
        let g = VertexGrad {
            d_mu: Vec2::new(-(u - rho * w) / (s * s1), -(w - rho * u) / (s * s2)),
            d_log_sigma1: 1.0 - u * (u - rho * w) / s,
            d_log_sigma2: 1.0 - w * (w - rho * u) / s,
            d_rho_raw: -rho - u * w + rho * q,
        };
        (loss, g)
    } else {
        // |Σ| clamped: Σ⁻¹ = adj(Σ) / floor, log|Σ| constant.
        let f = cfg.det_floor;
        let c = rho * s1 * s2;
        let n = s2 * s2 * d.x * d.x - 2.0 * c * d.x * d.y + s1 * s1 * d.y * d.y;
        let loss = LN_2PI + 0.5 * f.ln() + 0.5 * n / f;
        let g = VertexGrad {
            d_mu: Vec2::new(
                -(s2 * s2 * d.x - c * d.y) / f,
                -(s1 * s1 * d.y - c * d.x) / f,
            ),
            d_log_sigma1: (-c * d.x * d.y + s1 * s1 * d.y * d.y) / f,
            d_log_sigma2: (s2 * s2 * d.x * d.x - c * d.x * d.y) / f,
            d_rho_raw: -(s1 * s2 * d.x * d.y) * s / f,
        };
        (loss, g)
    };

    let lam = cfg.lambda_reg;
    loss += lam * (a * a + b * b + r * r);
    g.d_log_sigma1 += 2.0 * lam * a;
    g.d_log_sigma2 += 2.0 * lam * b;
    g.d_rho_raw += 2.0 * lam * r;
    (loss, g)
}

/// Axis-independent Gaussian NLL; ignores `rho_raw`.
pub fn indep_gaussian_vertex_nll(
    mu: Vec2,
    cov: &CovParams,
    target: Vec2,
    cfg: &LossConfig,
) -> (f64, VertexGrad) {
    let (a, b) = (cov.log_sigma1, cov.log_sigma2);
    let (s1, s2) = (a.exp(), b.exp());
    let d = target - mu;
    let det = (2.0 * (a + b)).exp();

    let (mut loss, mut g) = if det >= cfg.det_floor {
        let u = d.x / s1;
        let w = d.y / s2;
        let loss = LN_2PI + a + b + 0.5 * (u * u + w * w);
        let g = VertexGrad {
            d_mu: Vec2::new(-u / s1, -w / s2),
            d_log_sigma1: 1.0 - u * u,
            d_log_sigma2: 1.0 - w * w,
            d_rho_raw: 0.0,
        };
        (loss, g)
    } else {
        let f = cfg.det_floor;
        let n = s2 * s2 * d.x * d.x + s1 * s1 * d.y * d.y;
        let loss = LN_2PI + 0.5 * f.ln() + 0.5 * n / f;
        let g = VertexGrad {
            d_mu: Vec2::new(-(s2 * s2 * d.x) / f, -(s1 * s1 * d.y) / f),
            d_log_sigma1: s1 * s1 * d.y * d.y / f,
            d_log_sigma2: s2 * s2 * d.x * d.x / f,
            d_rho_raw: 0.0,
        };
        (loss, g)
    };

    let lam = cfg.lambda_reg;
    loss += lam * (a * a + b * b);
    g.d_log_sigma1 += 2.0 * lam * a;
    g.d_log_sigma2 += 2.0 * lam * b;
    (loss, g)
}

/// Per-axis Laplace NLL with scales `b_i = exp(log_sigma_i)`; ignores
/// `rho_raw`. The subgradient at a zero residual is taken as 0.
pub fn indep_laplace_vertex_nll(
    mu: Vec2,
    cov: &CovParams,
    target: Vec2,
    cfg: &LossConfig,
) -> (f64, VertexGrad) {
    let (a, b) = (cov.log_sigma1, cov.log_sigma2);
    let (b1, b2) = (a.exp(), b.exp());
    let d = target - mu;
    let (ax, ay) = (d.x.abs(), d.y.abs());
    let sign = |v: f64| if v == 0.0 { 0.0 } else { v.signum() };
    let lam = cfg.lambda_reg;
    let loss = (LN_2 + a) + ax / b1 + (LN_2 + b) + ay / b2 + lam * (a * a + b * b);
    let g = VertexGrad {
        d_mu: Vec2::new(-sign(d.x) / b1, -sign(d.y) / b2),
        d_log_sigma1: 1.0 - ax / b1 + 2.0 * lam * a,
        d_log_sigma2: 1.0 - ay / b2 + 2.0 * lam * b,
        d_rho_raw: 0.0,
    };
    (loss, g)
}

/// Dispatches to the per-vertex loss of `kind`.
pub fn vertex_nll(
    kind: LossKind,
    mu: Vec2,
    cov: &CovParams,
    target: Vec2,
    cfg: &LossConfig,
) -> (f64, VertexGrad) {
    match kind {
        LossKind::GaussianCov => gaussian_vertex_nll(mu, cov, target, cfg),
        LossKind::GaussianIndep => indep_gaussian_vertex_nll(mu, cov, target, cfg),
        LossKind::LaplaceIndep => indep_laplace_vertex_nll(mu, cov, target, cfg),
    }
}

fn map_loss(
    kind: LossKind,
    map: &PolylineMap,
    observed: &[Vec2],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if map.vertex_count() != observed.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vertices but {} observations",
            map.vertex_count(),
            observed.len()
        )));
    }
    if observed.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidValue("observations must be finite".into()));
    }
    let mut loss = 0.0;
    let grads = map
        .vertices()
        .zip(observed)
        .map(|(v, &t)| {
            let (l, g) = vertex_nll(kind, v.mu, &v.cov, t, cfg);
            loss += l;
            g
        })
        .collect();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: 0 });
    }
    Ok(LossOutput { loss, grads })
}

/// Summed correlated-Gaussian NLL over all vertices plus the parameter
/// penalty, with per-vertex gradients.
pub fn gaussian_nll(map: &PolylineMap, observed: &[Vec2], cfg: &LossConfig) -> Result<LossOutput> {
    map_loss(LossKind::GaussianCov, map, observed, cfg)
}

pub fn indep_gaussian_nll(
    map: &PolylineMap,
    observed: &[Vec2],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    map_loss(LossKind::GaussianIndep, map, observed, cfg)
}

pub fn indep_laplace_nll(
    map: &PolylineMap,
    observed: &[Vec2],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    map_loss(LossKind::LaplaceIndep, map, observed, cfg)
}

/// Bivariate normal density at `point` (1/m²).
pub fn gaussian_pdf(vertex: &UncertainVertex, point: Vec2) -> f64 {
    let (s1, s2, rho) = (vertex.cov.sigma1(), vertex.cov.sigma2(), vertex.cov.rho());
    let s = 1.0 - rho * rho;
    let d = point - vertex.mu;
    let u = d.x / s1;
    let w = d.y / s2;
    let q = (u * u - 2.0 * rho * u * w + w * w) / s;
    (-0.5 * q).exp() / (2.0 * PI * s1 * s2 * s.sqrt())
}

/// Draws from the vertex density through the Cholesky factor of Σ.
pub fn sample_vertex_with<R: Rng + ?Sized>(vertex: &UncertainVertex, rng: &mut R) -> Vec2 {
    let (s1, s2, rho) = (vertex.cov.sigma1(), vertex.cov.sigma2(), vertex.cov.rho());
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Vec2::new(
        vertex.mu.x + s1 * z1,
        vertex.mu.y + s2 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2),
    )
}

/// Deterministic single draw for a given seed.
pub fn sample_vertex(vertex: &UncertainVertex, seed: u64) -> Vec2 {
    sample_vertex_with(vertex, &mut ChaCha8Rng::seed_from_u64(seed))
}
