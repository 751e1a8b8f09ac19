//! Closed forms for one-dimensional regression under MAML.
//!
//! Tasks are `y = θx + ε` with `θ, x, ε ~ N(0, 1)`, per-task loss
//! `½ E (y - ŷ)²` and one inner step of size `α`. The shallow model is
//! `ŷ = cx`, the deep one `ŷ = abx`.
//!
//! Normalization. [`deep_maml_loss`] is the closed form
//! `½(1 + p1² + p2² + 3p3² + 2p1p3 − 2p2)`; the exact population value of the
//! post-adaptation loss is that plus `½` (the observation noise). The
//! derivatives ([`deep_maml_grad`], Hessians in [`stationary_points`]) are
//! those of the un-halved objective [`deep_maml_objective`]
//! `p1² + p2² + 3p3² + 2p1p3 − 2p2 = 2·deep_maml_loss − 1`, which is the
//! normalization the stationary-point Hessians `−4αI`, `diag(8α, 6α³)` refer
//! to. Both objectives share every stationary point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepPoint {
    pub a: f64,
    pub b: f64,
}

impl DeepPoint {
    pub fn new(a: f64, b: f64) -> Self {
        DeepPoint { a, b }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffTriple {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointKind {
    LocalMax,
    LocalMin,
    Saddle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub coords: DeepPoint,
    pub kind: PointKind,
    pub hessian: [[f64; 2]; 2],
}

impl StationaryPoint {
    /// Eigenvalues of the symmetric 2×2 Hessian, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        sym_eigenvalues(self.hessian)
    }
}

pub fn sym_eigenvalues(h: [[f64; 2]; 2]) -> [f64; 2] {
    let tr = h[0][0] + h[1][1];
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    let disc = ((tr * tr) / 4.0 - det).max(0.0).sqrt();
    [tr / 2.0 - disc, tr / 2.0 + disc]
}

/// `(1−α)²(c−θ)²`: post-adaptation task loss of the shallow model, dropping
/// the overall factor ½ and the additive noise constant.
pub fn shallow_postadapt_taskloss(c: f64, theta: f64, alpha: f64) -> f64 {
    let r = (1.0 - alpha) * (c - theta);
    r * r
}

/// `2(1−α)²c²`, the shallow MAML loss as usually quoted. Note that the
/// expectation of [`shallow_postadapt_taskloss`] over `θ ~ N(0,1)` is
/// [`shallow_maml_loss_exact`], whose curvature is half of this one.
pub fn shallow_maml_loss(c: f64, alpha: f64) -> f64 {
    2.0 * (1.0 - alpha).powi(2) * c * c
}

/// `E_θ (1−α)²(c−θ)² = (1−α)²(c² + 1)`.
pub fn shallow_maml_loss_exact(c: f64, alpha: f64) -> f64 {
    (1.0 - alpha).powi(2) * (c * c + 1.0)
}

/// One gradient step on the shallow population loss: `c − α(c − θ)`.
pub fn shallow_one_step_adapt(c: f64, theta: f64, alpha: f64) -> f64 {
    c - alpha * (c - theta)
}

pub fn coefficients(p: DeepPoint, alpha: f64) -> CoeffTriple {
    let (a, b) = (p.a, p.b);
    let ab = a * b;
    let s = a * a + b * b;
    CoeffTriple {
        p1: ab - alpha * s * ab + alpha * alpha * ab * ab * ab,
        p2: alpha * s - 2.0 * alpha * alpha * ab * ab,
        p3: alpha * alpha * ab,
    }
}

/// `p1² + p2² + 3p3² + 2p1p3 − 2p2`.
pub fn deep_maml_objective(p: DeepPoint, alpha: f64) -> f64 {
    let CoeffTriple { p1, p2, p3 } = coefficients(p, alpha);
    p1 * p1 + p2 * p2 + 3.0 * p3 * p3 + 2.0 * p1 * p3 - 2.0 * p2
}

/// `½(1 + p1² + p2² + 3p3² + 2p1p3 − 2p2)`.
pub fn deep_maml_loss(p: DeepPoint, alpha: f64) -> f64 {
    0.5 * (1.0 + deep_maml_objective(p, alpha))
}

/// Gradient of [`deep_maml_objective`] by the chain rule through
/// `(p1, p2, p3)`; twice the gradient of [`deep_maml_loss`].
pub fn deep_maml_grad(p: DeepPoint, alpha: f64) -> (f64, f64) {
    let (a, b) = (p.a, p.b);
    let CoeffTriple { p1, p2, p3 } = coefficients(p, alpha);
    let d1 = 2.0 * p1 + 2.0 * p3;
    let d2 = 2.0 * p2 - 2.0;
    let d3 = 6.0 * p3 + 2.0 * p1;
    let al2 = alpha * alpha;

    let p1a = b - alpha * (3.0 * a * a * b + b * b * b) + 3.0 * al2 * a * a * b * b * b;
    let p1b = a - alpha * (a * a * a + 3.0 * a * b * b) + 3.0 * al2 * a * a * a * b * b;
    let p2a = 2.0 * alpha * a - 4.0 * al2 * a * b * b;
    let p2b = 2.0 * alpha * b - 4.0 * al2 * a * a * b;
    let p3a = al2 * b;
    let p3b = al2 * a;

    (d1 * p1a + d2 * p2a + d3 * p3a, d1 * p1b + d2 * p2b + d3 * p3b)
}

/// Hessian of [`deep_maml_objective`] by central differences of the
/// analytic gradient.
pub fn deep_maml_hessian(p: DeepPoint, alpha: f64, step: f64) -> [[f64; 2]; 2] {
    let (ga_p, gb_p) = deep_maml_grad(DeepPoint::new(p.a + step, p.b), alpha);
    let (ga_m, gb_m) = deep_maml_grad(DeepPoint::new(p.a - step, p.b), alpha);
    let (ga_q, gb_q) = deep_maml_grad(DeepPoint::new(p.a, p.b + step), alpha);
    let (ga_r, gb_r) = deep_maml_grad(DeepPoint::new(p.a, p.b - step), alpha);
    let h = 2.0 * step;
    let haa = (ga_p - ga_m) / h;
    let hba = (gb_p - gb_m) / h;
    let hab = (ga_q - ga_r) / h;
    let hbb = (gb_q - gb_r) / h;
    let off = 0.5 * (hab + hba);
    [[haa, off], [off, hbb]]
}

fn classify(h: [[f64; 2]; 2]) -> PointKind {
    let [lo, hi] = sym_eigenvalues(h);
    if hi < 0.0 {
        PointKind::LocalMax
    } else if lo > 0.0 {
        PointKind::LocalMin
    } else {
        PointKind::Saddle
    }
}

/// The origin (a local maximum) and the four minima on the axes at
/// distance `1/√α`.
pub fn stationary_points(alpha: f64) -> Result<Vec<StationaryPoint>> {
    if !(alpha > 0.0) {
        return Err(Error::contract(format!("alpha must be positive, got {alpha}")));
    }
    let r = 1.0 / alpha.sqrt();
    let along_a = [[8.0 * alpha, 0.0], [0.0, 6.0 * alpha.powi(3)]];
    let along_b = [[6.0 * alpha.powi(3), 0.0], [0.0, 8.0 * alpha]];
    let origin = [[-4.0 * alpha, 0.0], [0.0, -4.0 * alpha]];
    let pts = [
        (DeepPoint::new(0.0, 0.0), origin),
        (DeepPoint::new(r, 0.0), along_a),
        (DeepPoint::new(-r, 0.0), along_a),
        (DeepPoint::new(0.0, r), along_b),
        (DeepPoint::new(0.0, -r), along_b),
    ];
    Ok(pts
        .into_iter()
        .map(|(coords, hessian)| StationaryPoint {
            coords,
            kind: classify(hessian),
            hessian,
        })
        .collect())
}

/// One simultaneous gradient step of both factors on the population loss
/// of a task with parameter `theta`, or of `b` alone when `freeze_a`.
pub fn deep_one_step_adapt(p: DeepPoint, theta: f64, alpha: f64, freeze_a: bool) -> DeepPoint {
    let r = p.a * p.b - theta;
    let a = if freeze_a { p.a } else { p.a - alpha * p.b * r };
    let b = p.b - alpha * p.a * r;
    DeepPoint { a, b }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    pub a: f64,
    pub b: f64,
    pub loss: f64,
}

/// `resolution × resolution` grid of [`deep_maml_loss`] over
/// `[lo, hi]²`, `a` varying slowest.
pub fn deep_landscape(alpha: f64, lo: f64, hi: f64, resolution: usize) -> Result<Vec<LandscapeCell>> {
    if resolution < 2 || !(hi > lo) {
        return Err(Error::config(format!(
            "landscape needs resolution >= 2 and hi > lo, got {resolution} over [{lo}, {hi}]"
        )));
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    let coord = |i: usize| if i + 1 == resolution { hi } else { lo + step * i as f64 };
    let mut cells = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let p = DeepPoint::new(coord(i), coord(j));
            cells.push(LandscapeCell {
                a: p.a,
                b: p.b,
                loss: deep_maml_loss(p, alpha),
            });
        }
    }
    Ok(cells)
}
