//! Affine planes, angles between planes, and flat-measure quadrature.

use crate::error::{CoreError, Result};
use crate::measure::Ball;
use crate::vecmath::{self, NeumaierSum};
use nalgebra::DMatrix;

/// An `n`-dimensional affine plane in `ℝ^d`: a base point plus an
/// orthonormal frame of `n` direction vectors (rows).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AffinePlane {
    base: Vec<f64>,
    /// Row-major `n × d`, rows orthonormal.
    frame: Vec<f64>,
    n: usize,
    d: usize,
}

const ORTHO_TOL: f64 = 1e-12;

impl AffinePlane {
    /// Build a plane from a base point and `n` spanning vectors (rows of
    /// `frame`). The vectors are orthonormalized; degenerate spans error.
    pub fn new(base: Vec<f64>, frame_rows: &[Vec<f64>]) -> Result<Self> {
        let d = base.len();
        let n = frame_rows.len();
        if n == 0 || n > d {
            return Err(CoreError::InvalidInput(format!(
                "plane dimension n={n} must satisfy 1 ≤ n ≤ d={d}"
            )));
        }
        let mut frame: Vec<f64> = Vec::with_capacity(n * d);
        for row in frame_rows {
            if row.len() != d {
                return Err(CoreError::InvalidInput("frame row dimension mismatch".into()));
            }
            let mut v = row.clone();
            // modified Gram-Schmidt against accepted rows
            for k in 0..frame.len() / d {
                let prev = &frame[k * d..(k + 1) * d];
                let c = vecmath::dot(&v, prev);
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= c * pi;
                }
            }
            let nrm = vecmath::norm(&v);
            if nrm < 1e-10 {
                return Err(CoreError::InvalidInput(
                    "frame rows are linearly dependent".into(),
                ));
            }
            for vi in v.iter_mut() {
                *vi /= nrm;
            }
            frame.extend_from_slice(&v);
        }
        let plane = AffinePlane { base, frame, n, d };
        debug_assert!(plane.orthonormality_defect() < ORTHO_TOL);
        Ok(plane)
    }

    /// Plane spanned by the first `n` coordinate axes through `base`.
    pub fn axis_aligned(base: Vec<f64>, n: usize) -> Result<Self> {
        let d = base.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let mut e = vec![0.0; d];
                e[k] = 1.0;
                e
            })
            .collect();
        Self::new(base, &rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn frame_row(&self, k: usize) -> &[f64] {
        &self.frame[k * self.d..(k + 1) * self.d]
    }

    /// Max deviation of `F Fᵀ` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in i..self.n {
                let g = vecmath::dot(self.frame_row(i), self.frame_row(j));
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    /// Local coordinates of the orthogonal projection of `y`.
    pub fn local_coords(&self, y: &[f64]) -> Vec<f64> {
        let rel = vecmath::sub(y, &self.base);
        (0..self.n).map(|k| vecmath::dot(&rel, self.frame_row(k))).collect()
    }

    /// Point of the plane at local coordinates `t`.
    pub fn point_at(&self, t: &[f64]) -> Vec<f64> {
        let mut p = self.base.clone();
        for k in 0..self.n {
            let row = self.frame_row(k);
            for (pi, ri) in p.iter_mut().zip(row) {
                *pi += t[k] * ri;
            }
        }
        p
    }

    /// Orthogonal projection `Π_L(y)`.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        self.point_at(&self.local_coords(y))
    }

    /// `dist(y, L) = |y − Π_L(y)|`.
    pub fn dist(&self, y: &[f64]) -> f64 {
        vecmath::dist(y, &self.project(y))
    }

    /// Component of `y − base` orthogonal to the plane.
    pub fn perp_component(&self, y: &[f64]) -> Vec<f64> {
        vecmath::sub(y, &self.project(y))
    }

    pub fn translate(&self, v: &[f64]) -> AffinePlane {
        AffinePlane {
            base: vecmath::add(&self.base, v),
            frame: self.frame.clone(),
            n: self.n,
            d: self.d,
        }
    }

    /// Apply `x ↦ R x + t` (row-major `d×d` rotation) to the plane.
    pub fn apply_isometry(&self, rot: &[f64], t: &[f64]) -> Result<AffinePlane> {
        let d = self.d;
        let map = |p: &[f64], shift: bool| -> Vec<f64> {
            (0..d)
                .map(|r| vecmath::dot(&rot[r * d..(r + 1) * d], p) + if shift { t[r] } else { 0.0 })
                .collect()
        };
        let rows: Vec<Vec<f64>> = (0..self.n).map(|k| map(self.frame_row(k), false)).collect();
        Self::new(map(&self.base, true), &rows)
    }
}

/// Angle between two planes of the same dimension: the Hausdorff distance
/// between the unit balls of their parallel translates through the origin.
/// In closed form this is the sine of the largest principal angle between
/// the direction subspaces.
pub fn plane_angle(l1: &AffinePlane, l2: &AffinePlane) -> Result<f64> {
    if l1.n() != l2.n() || l1.dim() != l2.dim() {
        return Err(CoreError::InvalidInput(
            "plane_angle requires equal plane and ambient dimensions".into(),
        ));
    }
    let n = l1.n();
    // M[i][j] = <f1_i, f2_j>; singular values are the principal cosines.
    let m = DMatrix::from_fn(n, n, |i, j| vecmath::dot(l1.frame_row(i), l2.frame_row(j)));
    let svd = m.svd(false, false);
    let sigma_min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .clamp(0.0, 1.0);
    Ok((1.0 - sigma_min * sigma_min).max(0.0).sqrt())
}

/// A midpoint-rule discretization of `ℋ^n` restricted to a plane patch.
#[derive(Debug, Clone)]
pub struct PlaneQuadrature {
    pub plane: AffinePlane,
    /// Node positions in `ℝ^d`, row-major.
    pub nodes: Vec<f64>,
    /// One weight per node (each equals `spacing^n`).
    pub weights: Vec<f64>,
    pub spacing: f64,
}

impl PlaneQuadrature {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.plane.dim();
        &self.nodes[i * d..(i + 1) * d]
    }

    pub fn total_weight(&self) -> f64 {
        vecmath::neumaier_sum(self.weights.iter().copied())
    }

    /// Sum of weights of nodes strictly inside `ball`.
    pub fn mass_in_ball(&self, ball: &Ball) -> f64 {
        let mut acc = NeumaierSum::new();
        let r2 = ball.radius * ball.radius;
        for i in 0..self.len() {
            if vecmath::dist2(self.node(i), &ball.center) < r2 {
                acc.add(self.weights[i]);
            }
        }
        acc.value()
    }
}

pub const DEFAULT_QUADRATURE_CAP: usize = 200_000;

/// Regular `n`-grid of spacing `delta` on `plane`, clipped to `3B`.
///
/// The grid is anchored at the projection of the ball center onto the plane
/// and enumerated lexicographically in plane coordinates, so the node order
/// is deterministic. Node weights are `delta^n`; the relative quadrature
/// error against `ℋ^n(L ∩ λB)` is `O(delta/r)`.
pub fn flat_quadrature(
    plane: &AffinePlane,
    ball: &Ball,
    delta: f64,
    cap: usize,
) -> Result<PlaneQuadrature> {
    if !(delta > 0.0) {
        return Err(CoreError::InvalidInput("quadrature spacing must be > 0".into()));
    }
    let h = plane.dist(&ball.center);
    let outer = 3.0 * ball.radius;
    if h >= ball.radius {
        return Err(CoreError::InvalidInput(
            "flat_quadrature requires the plane to intersect B".into(),
        ));
    }
    let n = plane.n();
    let rho = (outer * outer - h * h).sqrt();
    let k_max = (rho / delta).floor() as i64;
    let width = (2 * k_max + 1) as f64;
    if width.powi(n as i32) > cap as f64 {
        return Err(CoreError::NodeCapExceeded {
            requested: width.powi(n as i32) as usize,
            cap,
        });
    }
    let t0 = plane.local_coords(&ball.center);
    let mut nodes = Vec::new();
    let mut count = 0usize;
    let mut k = vec![-k_max; n];
    let outer2 = outer * outer;
    'grid: loop {
        let t: Vec<f64> = (0..n).map(|c| t0[c] + delta * k[c] as f64).collect();
        let p = plane.point_at(&t);
        if vecmath::dist2(&p, &ball.center) < outer2 {
            nodes.extend_from_slice(&p);
            count += 1;
            if count > cap {
                return Err(CoreError::NodeCapExceeded { requested: count, cap });
            }
        }
        // lexicographic increment
        for c in (0..n).rev() {
            k[c] += 1;
            if k[c] <= k_max {
                continue 'grid;
            }
            k[c] = -k_max;
        }
        break;
    }
    let w = delta.powi(n as i32);
    Ok(PlaneQuadrature {
        plane: plane.clone(),
        nodes,
        weights: vec![w; count],
        spacing: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn line2(angle: f64, through: Vec<f64>) -> AffinePlane {
        AffinePlane::new(through, &[vec![angle.cos(), angle.sin()]]).unwrap()
    }

    #[test]
    fn identical_planes_have_zero_angle() {
        let l = line2(0.7, vec![0.0, 0.0]);
        assert!(plane_angle(&l, &l).unwrap() < 1e-12);
    }

    #[test]
    fn angle_is_translation_invariant_and_symmetric() {
        let l1 = line2(0.3, vec![0.0, 0.0]);
        let l2 = line2(1.1, vec![5.0, -2.0]);
        let l2t = l2.translate(&[100.0, 3.0]);
        let a = plane_angle(&l1, &l2).unwrap();
        let b = plane_angle(&l1, &l2t).unwrap();
        let c = plane_angle(&l2, &l1).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - c).abs() < 1e-12);
    }

    /// Discrete Hausdorff distance between unit balls of two lines in R^2,
    /// evaluated on a dense direction grid; the oracle for the closed form.
    fn hausdorff_oracle_lines(a1: f64, a2: f64) -> f64 {
        let m = 10_000;
        let pts = |ang: f64| -> Vec<[f64; 2]> {
            (0..m)
                .map(|i| {
                    let t = -1.0 + 2.0 * (i as f64) / (m as f64 - 1.0);
                    [t * ang.cos(), t * ang.sin()]
                })
                .collect()
        };
        let p1 = pts(a1);
        let p2 = pts(a2);
        let one_sided = |a: &[[f64; 2]], b: &[[f64; 2]]| -> f64 {
            a.iter()
                .map(|x| {
                    b.iter()
                        .map(|y| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        one_sided(&p1, &p2).max(one_sided(&p2, &p1))
    }

    #[test]
    fn closed_form_matches_direction_grid_oracle() {
        for (a1, a2) in [(0.0, std::f64::consts::FRAC_PI_2), (0.2, 0.9), (1.0, 1.03)] {
            let l1 = line2(a1, vec![0.0, 0.0]);
            let l2 = line2(a2, vec![0.3, 0.4]);
            let closed = plane_angle(&l1, &l2).unwrap();
            let oracle = hausdorff_oracle_lines(a1, a2);
            assert!(
                (closed - oracle).abs() < 2e-3,
                "angle mismatch: closed {closed} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn orthogonal_lines_have_angle_one() {
        let l1 = line2(0.0, vec![0.0, 0.0]);
        let l2 = line2(std::f64::consts::FRAC_PI_2, vec![0.0, 0.0]);
        assert!((plane_angle(&l1, &l2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let base: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rows: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let Ok(plane) = AffinePlane::new(base, &rows) else {
                continue;
            };
            assert!(plane.orthonormality_defect() < 1e-12);
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let proj = plane.project(&y);
            // residual orthogonal to every frame row
            let res = vecmath::sub(&y, &proj);
            for k in 0..2 {
                assert!(vecmath::dot(&res, plane.frame_row(k)).abs() < 1e-10);
            }
            // projection is the closest plane point among random candidates
            let dy = plane.dist(&y);
            for _ in 0..10 {
                let t: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                assert!(vecmath::dist(&plane.point_at(&t), &y) >= dy - 1e-10);
            }
        }
    }

    #[test]
    fn quadrature_total_weight_line_through_ball() {
        // line through B(0,1) in R^2, delta = 0.1: length of L ∩ B(0,3) is 6
        let l = line2(0.0, vec![0.0, 0.0]);
        let b = Ball::new(vec![0.0, 0.0], 1.0);
        let q = flat_quadrature(&l, &b, 0.1, DEFAULT_QUADRATURE_CAP).unwrap();
        let total = q.total_weight();
        assert!((total - 6.0).abs() / 6.0 < 0.05, "total {total}");
        // nodes lie on the plane
        for i in 0..q.len() {
            assert!(l.dist(q.node(i)) < 1e-12);
        }
    }

    #[test]
    fn quadrature_disc_area_and_refinement() {
        let plane = AffinePlane::axis_aligned(vec![0.0, 0.0, 0.0], 2).unwrap();
        let b = Ball::new(vec![0.0, 0.0, 0.0], 1.0);
        let q = flat_quadrature(&plane, &b, 0.05, DEFAULT_QUADRATURE_CAP).unwrap();
        let area = std::f64::consts::PI * 9.0;
        assert!((q.total_weight() - area).abs() / area < 0.05);

        // refining delta -> delta/2 moves the total by O(delta)
        let q2 = flat_quadrature(&plane, &b, 0.025, DEFAULT_QUADRATURE_CAP).unwrap();
        assert!((q2.total_weight() - area).abs() <= (q.total_weight() - area).abs() + 0.05 * area);
        assert!((q2.total_weight() - q.total_weight()).abs() < 6.0 * 0.05 * 3.0);
    }

    #[test]
    fn quadrature_consistency_on_interior_balls() {
        // for any ball with r >= 10 delta the node mass matches the disc volume
        let plane = AffinePlane::axis_aligned(vec![0.0, 0.0], 1).unwrap();
        let b = Ball::new(vec![0.0, 0.0], 1.0);
        let delta = 0.01;
        let q = flat_quadrature(&plane, &b, delta, DEFAULT_QUADRATURE_CAP).unwrap();
        for r in [0.1, 0.5, 1.0] {
            let probe = Ball::new(vec![0.3, 0.0], r);
            let got = q.mass_in_ball(&probe);
            let want = 2.0 * r; // chord length of the x-axis inside the ball
            assert!(
                (got - want).abs() <= want * 3.0 * delta / r,
                "r={r}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn node_cap_is_enforced() {
        let plane = AffinePlane::axis_aligned(vec![0.0, 0.0], 1).unwrap();
        let b = Ball::new(vec![0.0, 0.0], 1.0);
        match flat_quadrature(&plane, &b, 1e-6, 1000) {
            Err(CoreError::NodeCapExceeded { .. }) => {}
            other => panic!("expected node cap error, got {other:?}"),
        }
    }
}
