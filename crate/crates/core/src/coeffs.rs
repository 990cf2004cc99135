//! Flatness coefficients and their square functions.
//!
//! `β_p` measures the scale-normalized L^p distance of the measure to the
//! best n-plane; `α` measures distance to the nearest flat measure
//! `c·ℋⁿ|_L` in the localized dual-Lipschitz metric `F_B`; `α_p` does the
//! same in Wasserstein distance between cutoff-localized measures.
//!
//! The p = 2 plane is exact (weighted total least squares through the
//! weighted centroid). The α-type coefficients report a certified upper
//! bound on the infimum: a finite candidate-plane family (PCA seed plus
//! seeded perturbations) with a convex line search in the constant. All
//! inequality tests elsewhere are run plane-fixed so search suboptimality
//! cannot produce false failures.

use crate::error::{CoreError, Result};
use crate::lipschitz::FbFlatSolver;
use crate::measure::{Ball, DiscreteMeasure};
use crate::plane::{flat_quadrature, AffinePlane};
use crate::transport::{wasserstein, TransportPlan};
use crate::vecmath::{self, NeumaierSum};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CoefKind {
    Beta1,
    Beta2,
    BetaH1,
    BetaH2,
    Alpha,
    AlphaH,
    Alpha1,
    Alpha2,
}

impl CoefKind {
    pub fn label(&self) -> &'static str {
        match self {
            CoefKind::Beta1 => "beta_1",
            CoefKind::Beta2 => "beta_2",
            CoefKind::BetaH1 => "beta_h_1",
            CoefKind::BetaH2 => "beta_h_2",
            CoefKind::Alpha => "alpha",
            CoefKind::AlphaH => "alpha_h",
            CoefKind::Alpha1 => "alpha_1",
            CoefKind::Alpha2 => "alpha_2",
        }
    }
}

/// A coefficient value with its witnesses and solver diagnostics.
#[derive(Debug, Clone)]
pub struct CoefficientResult {
    pub kind: CoefKind,
    pub value: f64,
    pub ball: Ball,
    /// Minimizing (or best-found) plane.
    pub plane: Option<AffinePlane>,
    /// `c` for α-type coefficients, `a_{B,L}` for `α_p`.
    pub constant: Option<f64>,
    /// Optimal transport plan witness (α_p only).
    pub plan: Option<TransportPlan>,
    /// Relative solver residual (LP duality gap and friends).
    pub residual: f64,
    /// True when a heuristic entered the value (β₁ descent, plane search,
    /// node aggregation); the plane-exact β₂ is never approximate.
    pub approximate: bool,
    /// Quadrature spacing used by the flat-measure side, when any.
    pub quad_spacing: Option<f64>,
}

// ---------------------------------------------------------------------------
// weighted total least squares plane
// ---------------------------------------------------------------------------

/// Exact minimizer of `Σ w_i dist(y_i, L)²` over affine n-planes: the plane
/// through the weighted centroid spanned by the top-n eigenvectors of the
/// weighted covariance. Returns the plane and eigenvalues (descending).
pub fn weighted_pca_plane(
    mu: &DiscreteMeasure,
    atom_indices: &[usize],
    n: usize,
) -> Result<(AffinePlane, Vec<f64>)> {
    let d = mu.dim();
    if atom_indices.is_empty() {
        return Err(CoreError::InvalidInput("PCA plane of an empty atom set".into()));
    }
    let mut wsum = 0.0;
    let mut centroid = vec![0.0f64; d];
    for &i in atom_indices {
        let w = mu.weight(i);
        wsum += w;
        for (c, x) in centroid.iter_mut().zip(mu.point(i)) {
            *c += w * x;
        }
    }
    for c in centroid.iter_mut() {
        *c /= wsum;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for &i in atom_indices {
        let w = mu.weight(i);
        let p = mu.point(i);
        for r in 0..d {
            for c in r..d {
                let v = w * (p[r] - centroid[r]) * (p[c] - centroid[c]);
                cov[(r, c)] += v;
                if r != c {
                    cov[(c, r)] += v;
                }
            }
        }
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &k in order.iter().take(n) {
        let col: DVector<f64> = eig.eigenvectors.column(k).into();
        let mut v: Vec<f64> = col.iter().copied().collect();
        // canonical sign: first nonzero coordinate positive
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-14) {
            if *first < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
        }
        rows.push(v);
    }
    let eigvals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    Ok((AffinePlane::new(centroid, &rows)?, eigvals))
}

fn lp_plane_error(mu: &DiscreteMeasure, atoms: &[usize], plane: &AffinePlane, p: f64) -> f64 {
    let mut acc = NeumaierSum::new();
    for &i in atoms {
        let dist = plane.dist(mu.point(i));
        acc.add(mu.weight(i) * dist.powf(p));
    }
    acc.value()
}

/// Coordinate descent over plane orientation and offset, used to refine the
/// p = 1 objective away from the p = 2 seed.
fn plane_descent(
    mu: &DiscreteMeasure,
    atoms: &[usize],
    seed: &AffinePlane,
    p: f64,
    scale: f64,
) -> AffinePlane {
    let d = seed.dim();
    let n = seed.n();
    let mut best = seed.clone();
    let mut best_err = lp_plane_error(mu, atoms, &best, p);
    for sweep in 0..2 {
        let window = scale * 0.5f64.powi(sweep);
        // orthonormal complement of the current frame
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for k in 0..n {
            dirs.push(best.frame_row(k).to_vec());
        }
        for e in 0..d {
            if dirs.len() == d {
                break;
            }
            let mut v = vec![0.0; d];
            v[e] = 1.0;
            for u in &dirs {
                let c = vecmath::dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= c * ui;
                }
            }
            let nn = vecmath::norm(&v);
            if nn > 1e-8 {
                for vi in v.iter_mut() {
                    *vi /= nn;
                }
                dirs.push(v);
            }
        }
        let normals: Vec<Vec<f64>> = dirs[n..].to_vec();
        for nu in &normals {
            let eval = |t: f64| {
                let cand = best.translate(&vecmath::scale(nu, t));
                lp_plane_error(mu, atoms, &cand, p)
            };
            let (t, e) = golden_min_plain(eval, -window, window, 1e-3 * window.max(1e-300));
            if e < best_err {
                best = best.translate(&vecmath::scale(nu, t));
                best_err = e;
            }
        }
        for k in 0..n {
            for nu in &normals {
                let base_frame: Vec<Vec<f64>> =
                    (0..n).map(|r| best.frame_row(r).to_vec()).collect();
                let eval = |theta: f64| {
                    let mut rows = base_frame.clone();
                    rows[k] =
                        vecmath::axpy(&vecmath::scale(&rows[k], theta.cos()), theta.sin(), nu);
                    match AffinePlane::new(best.base().to_vec(), &rows) {
                        Ok(cand) => lp_plane_error(mu, atoms, &cand, p),
                        Err(_) => f64::INFINITY,
                    }
                };
                let w = (2.0 * scale / seed.dim() as f64).min(0.8).max(1e-6);
                let (theta, e) = golden_min_plain(eval, -w, w, 1e-4 * w);
                if e < best_err {
                    let mut rows = base_frame;
                    rows[k] =
                        vecmath::axpy(&vecmath::scale(&rows[k], theta.cos()), theta.sin(), nu);
                    if let Ok(cand) = AffinePlane::new(best.base().to_vec(), &rows) {
                        best = cand;
                        best_err = e;
                    }
                }
            }
        }
    }
    best
}

/// Golden-section minimization of a unimodal function.
fn golden_min_plain(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

fn golden_min_try(
    mut f: impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d)?;
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x)?;
    Ok((x, fx))
}

// ---------------------------------------------------------------------------
// beta coefficients
// ---------------------------------------------------------------------------

fn axis_plane_through(x: &[f64], n: usize) -> AffinePlane {
    AffinePlane::axis_aligned(x.to_vec(), n).expect("axis plane")
}

/// `β_{μ,p}(x, r)`, normalized by `μ(B(x,3r))`. Errors with `EmptyBall`
/// when that normalization mass vanishes — never silently 0.
pub fn beta_p(
    mu: &DiscreteMeasure,
    x: &[f64],
    r: f64,
    p: f64,
    n: usize,
) -> Result<CoefficientResult> {
    if p != 1.0 && p != 2.0 {
        return Err(CoreError::InvalidInput(format!(
            "beta_p implemented for p ∈ {{1,2}}, got {p}"
        )));
    }
    let ball = Ball::new(x.to_vec(), r);
    let m3 = mu.ball_mass(&ball.scaled(3.0));
    if m3 <= 0.0 {
        return Err(CoreError::EmptyBall {
            center: x.to_vec(),
            radius: 3.0 * r,
        });
    }
    let atoms = mu.atoms_in_ball(&ball);
    if atoms.is_empty() {
        return Ok(CoefficientResult {
            kind: if p == 1.0 { CoefKind::Beta1 } else { CoefKind::Beta2 },
            value: 0.0,
            ball,
            plane: Some(axis_plane_through(x, n)),
            constant: None,
            plan: None,
            residual: 0.0,
            approximate: false,
            quad_spacing: None,
        });
    }
    let (pca_plane, _eigvals) = weighted_pca_plane(mu, &atoms, n)?;
    if p == 2.0 {
        let err = lp_plane_error(mu, &atoms, &pca_plane, 2.0);
        let value = (err / (m3 * r * r)).max(0.0).sqrt();
        return Ok(CoefficientResult {
            kind: CoefKind::Beta2,
            value,
            ball,
            plane: Some(pca_plane),
            constant: None,
            plan: None,
            residual: 0.0,
            approximate: false,
            quad_spacing: None,
        });
    }
    // p = 1: refine the p = 2 plane by local descent; witness approximate
    let beta2_val = (lp_plane_error(mu, &atoms, &pca_plane, 2.0) / (m3 * r * r)).sqrt();
    let scale = (beta2_val * r).max(1e-9 * r);
    let plane = plane_descent(mu, &atoms, &pca_plane, 1.0, scale);
    let err = lp_plane_error(mu, &atoms, &plane, 1.0);
    Ok(CoefficientResult {
        kind: CoefKind::Beta1,
        value: err / (m3 * r),
        ball,
        plane: Some(plane),
        constant: None,
        plan: None,
        residual: 0.0,
        approximate: true,
        quad_spacing: None,
    })
}

/// `β^h_{μ,p}(x, r)`, normalized by `rⁿ`; defined (as 0) on empty balls.
pub fn beta_homogeneous(
    mu: &DiscreteMeasure,
    x: &[f64],
    r: f64,
    p: f64,
    n: usize,
) -> Result<CoefficientResult> {
    let ball = Ball::new(x.to_vec(), r);
    let m3 = mu.ball_mass(&ball.scaled(3.0));
    let kind = if p == 1.0 { CoefKind::BetaH1 } else { CoefKind::BetaH2 };
    if m3 <= 0.0 {
        return Ok(CoefficientResult {
            kind,
            value: 0.0,
            ball,
            plane: Some(axis_plane_through(x, n)),
            constant: None,
            plan: None,
            residual: 0.0,
            approximate: false,
            quad_spacing: None,
        });
    }
    // β^h = β · (μ(B(x,3r))/rⁿ)^{1/p}
    let mut res = beta_p(mu, x, r, p, n)?;
    res.kind = kind;
    res.value *= (m3 / r.powi(n as i32)).powf(1.0 / p);
    Ok(res)
}

// ---------------------------------------------------------------------------
// alpha coefficients
// ---------------------------------------------------------------------------

/// Search configuration for the α-type upper-bound heuristics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AlphaConfig {
    /// Total candidate planes (PCA seed counts as one).
    pub plane_candidates: usize,
    /// Seed for the deterministic perturbation stream.
    pub seed: u64,
    /// Relative tolerance of the golden-section search in `c`.
    pub c_rel_tol: f64,
    /// Quadrature spacing as a fraction of `r(B)`.
    pub quad_spacing_frac: f64,
    /// LP node cap per side (above it: aggregation, flagged approximate).
    pub node_cap: usize,
    /// Hard cap on quadrature nodes.
    pub quad_cap: usize,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        AlphaConfig {
            plane_candidates: 13,
            seed: 0x5EED,
            c_rel_tol: 1e-4,
            quad_spacing_frac: 1.0 / 24.0,
            node_cap: 400,
            quad_cap: crate::plane::DEFAULT_QUADRATURE_CAP,
        }
    }
}

impl AlphaConfig {
    /// Cheap preset for dense (atom × scale) sweeps: single candidate
    /// plane, coarse `c` tolerance, small LP. Results flagged approximate.
    pub fn fast() -> Self {
        AlphaConfig {
            plane_candidates: 1,
            seed: 0x5EED,
            c_rel_tol: 2e-2,
            quad_spacing_frac: 1.0 / 12.0,
            node_cap: 120,
            quad_cap: crate::plane::DEFAULT_QUADRATURE_CAP,
        }
    }

    /// Mid-grade preset for per-cube witnesses.
    pub fn witness() -> Self {
        AlphaConfig {
            plane_candidates: 2,
            seed: 0x5EED,
            c_rel_tol: 1e-3,
            quad_spacing_frac: 1.0 / 16.0,
            node_cap: 200,
            quad_cap: crate::plane::DEFAULT_QUADRATURE_CAP,
        }
    }
}

/// Translate a plane towards the ball center until it intersects `0.9B`.
fn clamp_plane_to_ball(plane: &AffinePlane, ball: &Ball) -> AffinePlane {
    let h = plane.dist(&ball.center);
    let target = 0.9 * ball.radius;
    if h <= target {
        return plane.clone();
    }
    let proj = plane.project(&ball.center);
    let dir = vecmath::sub(&ball.center, &proj);
    plane.translate(&vecmath::scale(&dir, (h - target) / h))
}

/// Candidate planes: the β₂ plane of `B` plus seeded perturbations with
/// rotation/offset scales tied to the β₂ value.
fn candidate_planes(
    mu: &DiscreteMeasure,
    ball: &Ball,
    n: usize,
    cfg: &AlphaConfig,
) -> Result<Vec<AffinePlane>> {
    let atoms = mu.atoms_in_ball(ball);
    let d = mu.dim();
    let (seed_plane, beta2_val) = if atoms.is_empty() {
        (axis_plane_through(&ball.center, n), 0.1)
    } else {
        let (plane, _) = weighted_pca_plane(mu, &atoms, n)?;
        let m3 = mu.ball_mass(&ball.scaled(3.0)).max(1e-300);
        let val =
            (lp_plane_error(mu, &atoms, &plane, 2.0) / (m3 * ball.radius * ball.radius)).sqrt();
        (plane, val)
    };
    let mut out = vec![clamp_plane_to_ball(&seed_plane, ball)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rot_scale = (2.0 * beta2_val).clamp(1e-3, 0.3);
    let off_scale = (2.0 * beta2_val * ball.radius).clamp(1e-4 * ball.radius, 0.3 * ball.radius);
    for _ in 0..cfg.plane_candidates.saturating_sub(1) {
        let mut rows: Vec<Vec<f64>> = (0..n).map(|k| seed_plane.frame_row(k).to_vec()).collect();
        for row in rows.iter_mut() {
            for c in row.iter_mut() {
                *c += rot_scale * rng.random_range(-1.0..1.0);
            }
        }
        let mut base = seed_plane.base().to_vec();
        for c in base.iter_mut().take(d) {
            *c += off_scale * rng.random_range(-1.0..1.0);
        }
        if let Ok(p) = AffinePlane::new(base, &rows) {
            out.push(clamp_plane_to_ball(&p, ball));
        }
    }
    Ok(out)
}

/// Minimize `c ↦ F_B(μ, c·quad)` by golden section on an adaptive bracket.
fn minimize_in_c(solver: &FbFlatSolver, cfg: &AlphaConfig) -> Result<(f64, f64)> {
    let quad_mass = solver.quad_mass();
    if quad_mass <= 0.0 {
        return Ok((0.0, solver.eval(0.0)?));
    }
    let c_match = solver.mu_mass() / quad_mass;
    let mut hi = (4.0 * c_match).max(1e-12);
    for _ in 0..8 {
        let f_hi = solver.eval(hi)?;
        let f_in = solver.eval(0.75 * hi)?;
        if f_in <= f_hi {
            break;
        }
        hi *= 2.0;
    }
    let tol = cfg.c_rel_tol * hi;
    golden_min_try(|c| solver.eval(c), 0.0, hi, tol)
}

/// `α_μ(B)`: documented upper bound on
/// `inf_{c,L} F_B(μ, c·ℋⁿ|_L)/(r(B)·μ(3B))`.
pub fn alpha(
    mu: &DiscreteMeasure,
    ball: &Ball,
    n: usize,
    cfg: &AlphaConfig,
) -> Result<CoefficientResult> {
    let m3 = mu.ball_mass(&ball.scaled(3.0));
    if m3 <= 0.0 {
        return Err(CoreError::EmptyBall {
            center: ball.center.clone(),
            radius: 3.0 * ball.radius,
        });
    }
    let delta = cfg.quad_spacing_frac * ball.radius;
    let mut best: Option<(f64, f64, AffinePlane, bool)> = None;
    for plane in candidate_planes(mu, ball, n, cfg)? {
        let quad = flat_quadrature(&plane, ball, delta, cfg.quad_cap)?;
        let solver = FbFlatSolver::new(mu, &quad, ball, cfg.node_cap)?;
        let (c, f) = minimize_in_c(&solver, cfg)?;
        if best.as_ref().is_none_or(|(fb, _, _, _)| f < *fb) {
            best = Some((f, c, plane, solver.approximate));
        }
    }
    let (f, c, plane, approx) = best.expect("at least one candidate plane");
    Ok(CoefficientResult {
        kind: CoefKind::Alpha,
        value: f / (ball.radius * m3),
        ball: ball.clone(),
        plane: Some(plane),
        constant: Some(c),
        plan: None,
        residual: 0.0,
        approximate: approx,
        quad_spacing: Some(delta),
    })
}

/// `α^h_μ(x, r) = (μ(B(x,3r))/rⁿ)·α_μ(x, r)`.
pub fn alpha_homogeneous(
    mu: &DiscreteMeasure,
    x: &[f64],
    r: f64,
    n: usize,
    cfg: &AlphaConfig,
) -> Result<CoefficientResult> {
    let ball = Ball::new(x.to_vec(), r);
    let m3 = mu.ball_mass(&ball.scaled(3.0));
    let mut res = alpha(mu, &ball, n, cfg)?;
    res.kind = CoefKind::AlphaH;
    res.value *= m3 / r.powi(n as i32);
    Ok(res)
}

// ---------------------------------------------------------------------------
// cutoff profile and alpha_p
// ---------------------------------------------------------------------------

/// The fixed radial cutoff `φ(t) = min(1, (3−t)₊²)`: identically 1 on
/// `B(0,2)`, supported in `B(0,3)`. It satisfies the two-sided bound
/// `c⁻¹·dist(t,∂B(0,3))² ≤ φ ≤ c·dist(t,∂B(0,3))²` with `c = 9` (sharp at
/// the origin) and the gradient bound `|φ'| ≤ 2·dist(t,∂B(0,3))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CutoffProfile;

impl CutoffProfile {
    /// Value at radial coordinate `t = |y − x|/r`.
    pub fn eval(t: f64) -> f64 {
        let s = (3.0 - t).max(0.0);
        (s * s).min(1.0)
    }

    /// |dφ/dt| at radial coordinate `t`.
    pub fn grad_abs(t: f64) -> f64 {
        if (2.0..3.0).contains(&t) {
            2.0 * (3.0 - t)
        } else {
            0.0
        }
    }

    /// `φ_B(y) = φ((y − z(B))/r(B))`.
    pub fn eval_at(ball: &Ball, y: &[f64]) -> f64 {
        Self::eval(vecmath::dist(y, &ball.center) / ball.radius)
    }

    /// Smallest constant making the value sandwich hold on a radial grid.
    pub fn sandwich_constant(samples: usize) -> f64 {
        let mut c = 1.0f64;
        for k in 0..samples {
            let t = 3.0 * (k as f64 + 0.5) / samples as f64;
            let phi = Self::eval(t);
            let d2 = (3.0 - t) * (3.0 - t);
            if phi > 0.0 && d2 > 0.0 {
                c = c.max(phi / d2).max(d2 / phi);
            }
        }
        c
    }
}

/// `α_{μ,p}(B)`: Wasserstein flatness with the cutoff `φ_B`. The quadrature
/// side is renormalized to match the μ side exactly (the quadrature error
/// is absorbed into `a_{B,L}` and recorded via the returned constant).
pub fn alpha_p(
    mu: &DiscreteMeasure,
    ball: &Ball,
    p: f64,
    n: usize,
    cfg: &AlphaConfig,
) -> Result<CoefficientResult> {
    if p != 1.0 && p != 2.0 {
        return Err(CoreError::InvalidInput(format!(
            "alpha_p implemented for p ∈ {{1,2}}, got {p}"
        )));
    }
    let m3 = mu.ball_mass(&ball.scaled(3.0));
    if m3 <= 0.0 {
        return Err(CoreError::EmptyBall {
            center: ball.center.clone(),
            radius: 3.0 * ball.radius,
        });
    }
    let support = mu.atoms_in_ball(&ball.scaled(3.0));
    let mut mu_pts: Vec<Vec<f64>> = Vec::new();
    let mut mu_w: Vec<f64> = Vec::new();
    for &i in &support {
        let w = mu.weight(i) * CutoffProfile::eval_at(ball, mu.point(i));
        if w > 0.0 {
            mu_pts.push(mu.point(i).to_vec());
            mu_w.push(w);
        }
    }
    let phi_mu_mass = vecmath::neumaier_sum(mu_w.iter().copied());
    if phi_mu_mass <= 0.0 {
        return Err(CoreError::EmptyBall {
            center: ball.center.clone(),
            radius: 3.0 * ball.radius,
        });
    }
    let (mu_pts, mu_w, mu_aggregated) = aggregate_capped(mu_pts, mu_w, cfg.node_cap);
    let mu_side = DiscreteMeasure::new(mu.dim(), mu_pts.into_iter().zip(mu_w))?;

    let delta = cfg.quad_spacing_frac * ball.radius;
    let mut best: Option<CoefficientResult> = None;
    for plane in candidate_planes(mu, ball, n, cfg)? {
        let quad = flat_quadrature(&plane, ball, delta, cfg.quad_cap)?;
        let mut q_pts: Vec<Vec<f64>> = Vec::new();
        let mut q_w: Vec<f64> = Vec::new();
        for i in 0..quad.len() {
            let w = quad.weights[i] * CutoffProfile::eval_at(ball, quad.node(i));
            if w > 0.0 {
                q_pts.push(quad.node(i).to_vec());
                q_w.push(w);
            }
        }
        let phi_h_mass = vecmath::neumaier_sum(q_w.iter().copied());
        if phi_h_mass <= 0.0 {
            continue;
        }
        let a_bl = phi_mu_mass / phi_h_mass;
        let (q_pts, q_w, q_aggregated) = aggregate_capped(q_pts, q_w, cfg.node_cap);
        // exact mass match: rescale the aggregated side to φ_Bμ's total
        let q_total = vecmath::neumaier_sum(q_w.iter().copied());
        let scale = phi_mu_mass / q_total;
        let nu_side = DiscreteMeasure::new(
            mu.dim(),
            q_pts.into_iter().zip(q_w.iter().map(|w| w * scale)),
        )?;
        let wres = wasserstein(&mu_side, &nu_side, p)?;
        let value = wres.value / (ball.radius * m3.powf(1.0 / p));
        if best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(CoefficientResult {
                kind: if p == 1.0 { CoefKind::Alpha1 } else { CoefKind::Alpha2 },
                value,
                ball: ball.clone(),
                plane: Some(plane.clone()),
                constant: Some(a_bl),
                plan: Some(wres.plan),
                residual: wres.duality_gap,
                approximate: mu_aggregated || q_aggregated,
                quad_spacing: Some(delta),
            });
        }
    }
    best.ok_or_else(|| {
        CoreError::InvalidInput(
            "no candidate plane intersects the ball with positive cutoff mass".into(),
        )
    })
}

fn aggregate_capped(
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    cap: usize,
) -> (Vec<Vec<f64>>, Vec<f64>, bool) {
    if points.len() <= cap {
        return (points, weights, false);
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| vecmath::lex_cmp(&points[a], &points[b]).then(a.cmp(&b)));
    let len = order.len();
    let dim = points[0].len();
    let mut out_p = Vec::with_capacity(cap);
    let mut out_w = Vec::with_capacity(cap);
    for chunk in 0..cap {
        let lo = chunk * len / cap;
        let hi = (chunk + 1) * len / cap;
        if lo == hi {
            continue;
        }
        let mut wsum = 0.0;
        let mut centroid = vec![0.0; dim];
        for &idx in &order[lo..hi] {
            wsum += weights[idx];
            for (c, x) in centroid.iter_mut().zip(&points[idx]) {
                *c += weights[idx] * x;
            }
        }
        for c in centroid.iter_mut() {
            *c /= wsum;
        }
        out_p.push(centroid);
        out_w.push(wsum);
    }
    (out_p, out_w, true)
}

// ---------------------------------------------------------------------------
// scale grids, square functions, good set
// ---------------------------------------------------------------------------

/// Geometric scale grid `r_j = r_max·q^j ≥ r_min`, discretizing `∫ f dr/r`
/// as `Σ f(r_j)·ln(1/q)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScaleGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub q: f64,
}

impl ScaleGrid {
    pub fn new(r_min: f64, r_max: f64, q: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_max >= r_min) {
            return Err(CoreError::InvalidInput(format!(
                "scale grid needs 0 < r_min ≤ r_max, got [{r_min}, {r_max}]"
            )));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(CoreError::InvalidInput(format!(
                "scale ratio q={q} must lie in (0,1)"
            )));
        }
        Ok(ScaleGrid { r_min, r_max, q })
    }

    /// Default grid: `q = 2^{-1/2}`, `r_max` = data diameter, `r_min` = 4×
    /// the nearest-neighbour median (below that the measure is atomic).
    pub fn default_for(mu: &DiscreteMeasure) -> Result<Self> {
        let diam = mu.diameter();
        let r_min = (4.0 * mu.nn_median()).max(1e-12 * diam.max(1.0));
        Self::new(r_min.min(diam.max(r_min)), diam.max(r_min), std::f64::consts::FRAC_1_SQRT_2)
    }

    pub fn radii(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut r = self.r_max;
        while r >= self.r_min * (1.0 - 1e-12) {
            out.push(r);
            r *= self.q;
        }
        out
    }

    /// Quadrature weight `ln(1/q)` of each scale.
    pub fn log_weight(&self) -> f64 {
        (1.0 / self.q).ln()
    }
}

#[derive(Debug, Clone)]
pub struct SquareFunctionResult {
    pub value: f64,
    /// Per-scale `(r_j, coef(x, r_j))`; undefined scales carry 0.
    pub per_scale: Vec<(f64, f64)>,
    /// Number of scales where the coefficient was undefined (empty ball).
    pub undefined_scales: usize,
}

/// Evaluate one coefficient at one scale; `EmptyBall` maps to `None`.
pub fn coefficient_at(
    mu: &DiscreteMeasure,
    x: &[f64],
    r: f64,
    kind: CoefKind,
    n: usize,
    cfg: &AlphaConfig,
) -> Result<Option<f64>> {
    let res = match kind {
        CoefKind::Beta1 => beta_p(mu, x, r, 1.0, n),
        CoefKind::Beta2 => beta_p(mu, x, r, 2.0, n),
        CoefKind::BetaH1 => beta_homogeneous(mu, x, r, 1.0, n),
        CoefKind::BetaH2 => beta_homogeneous(mu, x, r, 2.0, n),
        CoefKind::Alpha => alpha(mu, &Ball::new(x.to_vec(), r), n, cfg),
        CoefKind::AlphaH => alpha_homogeneous(mu, x, r, n, cfg),
        CoefKind::Alpha1 => alpha_p(mu, &Ball::new(x.to_vec(), r), 1.0, n, cfg),
        CoefKind::Alpha2 => alpha_p(mu, &Ball::new(x.to_vec(), r), 2.0, n, cfg),
    };
    match res {
        Ok(c) => Ok(Some(c.value)),
        Err(CoreError::EmptyBall { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `Σ_j coef(x, r_j)²·ln(1/q)`: the discretized square function.
pub fn square_function(
    mu: &DiscreteMeasure,
    x: &[f64],
    grid: &ScaleGrid,
    kind: CoefKind,
    n: usize,
    cfg: &AlphaConfig,
) -> Result<SquareFunctionResult> {
    let w = grid.log_weight();
    let mut per_scale = Vec::new();
    let mut undefined = 0usize;
    let mut acc = NeumaierSum::new();
    for r in grid.radii() {
        match coefficient_at(mu, x, r, kind, n, cfg)? {
            Some(v) => {
                per_scale.push((r, v));
                acc.add(v * v * w);
            }
            None => {
                per_scale.push((r, 0.0));
                undefined += 1;
            }
        }
    }
    Ok(SquareFunctionResult {
        value: acc.value(),
        per_scale,
        undefined_scales: undefined,
    })
}

/// Per-atom, per-scale table of `α² + β₂²`, from which the good set at any
/// upper scale cutoff is derived. Computing the table once makes the
/// monotonicity `G^ε_s ⊇ G^ε_r` for `s < r` structural.
#[derive(Debug, Clone)]
pub struct GoodSetTable {
    /// Scales, descending.
    pub scales: Vec<f64>,
    /// Row-major `atom × scale` values of `α(x,s)² + β₂(x,s)²`.
    pub cell: Vec<f64>,
    pub log_weight: f64,
    /// Scales above this radius were unavailable (data extent truncation).
    pub truncated_at: f64,
    pub undefined_cells: usize,
}

impl GoodSetTable {
    /// Square-function value of atom `i` over scales `≤ 1000·r`.
    pub fn square_value(&self, atom: usize, r: f64) -> f64 {
        let ns = self.scales.len();
        let mut acc = NeumaierSum::new();
        for (j, &s) in self.scales.iter().enumerate() {
            if s <= 1000.0 * r {
                acc.add(self.cell[atom * ns + j] * self.log_weight);
            }
        }
        acc.value()
    }

    /// Membership of `G^ε_r` per atom (strict inequality; ε = 0 is empty).
    pub fn membership(&self, eps: f64, r: f64) -> Vec<bool> {
        let n_atoms = self.cell.len() / self.scales.len().max(1);
        (0..n_atoms)
            .map(|i| self.square_value(i, r) < eps * eps)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GoodSetResult {
    pub good: Vec<bool>,
    pub square_values: Vec<f64>,
    pub table: GoodSetTable,
    pub eps: f64,
    pub r: f64,
}

/// The good set `G^ε_r`: atoms whose `α² + β₂²` square function over
/// `(r_min, 1000r]` stays below `ε²`. The grid's `r_max` truncates at the
/// data extent; the truncation is recorded.
pub fn good_set(
    mu: &DiscreteMeasure,
    eps: f64,
    r: f64,
    grid: &ScaleGrid,
    n: usize,
    cfg: &AlphaConfig,
) -> Result<GoodSetResult> {
    use rayon::prelude::*;
    if eps < 0.0 {
        return Err(CoreError::InvalidInput("eps must be ≥ 0".into()));
    }
    let scales: Vec<f64> = grid.radii().into_iter().filter(|&s| s <= 1000.0 * r).collect();
    let ns = scales.len();
    let rows: Vec<Result<(Vec<f64>, usize)>> = (0..mu.len())
        .into_par_iter()
        .map(|i| {
            let x = mu.point(i);
            let mut row = vec![0.0f64; ns];
            let mut undefined = 0usize;
            for (j, &s) in scales.iter().enumerate() {
                let b = beta_p(mu, x, s, 2.0, n);
                let a = alpha(mu, &Ball::new(x.to_vec(), s), n, cfg);
                match (a, b) {
                    (Ok(a), Ok(b)) => row[j] = a.value * a.value + b.value * b.value,
                    (Err(CoreError::EmptyBall { .. }), _)
                    | (_, Err(CoreError::EmptyBall { .. })) => {
                        undefined += 1;
                    }
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            }
            Ok((row, undefined))
        })
        .collect();
    let mut cell = Vec::with_capacity(mu.len() * ns);
    let mut undefined_cells = 0;
    for row in rows {
        let (r, u) = row?;
        cell.extend_from_slice(&r);
        undefined_cells += u;
    }
    let table = GoodSetTable {
        scales,
        cell,
        log_weight: grid.log_weight(),
        truncated_at: grid.r_max.min(1000.0 * r),
        undefined_cells,
    };
    let square_values: Vec<f64> = (0..mu.len()).map(|i| table.square_value(i, r)).collect();
    let good: Vec<bool> = square_values.iter().map(|&s| s < eps * eps).collect();
    Ok(GoodSetResult {
        good,
        square_values,
        table,
        eps,
        r,
    })
}
