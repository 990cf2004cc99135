//! Discrete measures (finite weighted point sets) and balls.

use crate::error::{CoreError, Result};
use crate::kdtree::KdTree;
use crate::vecmath::{self, NeumaierSum};
use std::sync::OnceLock;

/// An open ball `B(z, r)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Ball { center, radius }
    }

    /// `λB`: same center, radius `λr`.
    pub fn scaled(&self, lambda: f64) -> Ball {
        Ball {
            center: self.center.clone(),
            radius: self.radius * lambda,
        }
    }

    /// Strict membership (open ball).
    pub fn contains(&self, p: &[f64]) -> bool {
        vecmath::dist2(p, &self.center) < self.radius * self.radius
    }

    /// Distance from an interior point to the boundary sphere, clamped at 0.
    pub fn boundary_dist(&self, p: &[f64]) -> f64 {
        (self.radius - vecmath::dist(p, &self.center)).max(0.0)
    }
}

/// A finite weighted point set standing in for a Radon measure on `ℝ^d`.
///
/// All weights are strictly positive and every mass query routes through
/// [`DiscreteMeasure::ball_mass`], which sums the weights of atoms strictly
/// inside the (open) query ball. The spatial index is an implementation
/// detail; its answers are identical to a linear scan.
#[derive(Debug)]
pub struct DiscreteMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
    index: KdTree,
    diameter: OnceLock<f64>,
    nn_median: OnceLock<f64>,
}

impl Clone for DiscreteMeasure {
    fn clone(&self) -> Self {
        // rebuilding the index keeps the type free of internal sharing
        DiscreteMeasure::from_flat(self.dim, self.coords.clone(), self.weights.clone())
            .expect("clone of a valid measure")
    }
}

impl DiscreteMeasure {
    pub fn from_flat(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::InvalidInput("ambient dimension must be ≥ 1".into()));
        }
        if coords.len() != weights.len() * dim {
            return Err(CoreError::InvalidInput(format!(
                "coordinate buffer length {} does not match {} atoms × dim {}",
                coords.len(),
                weights.len(),
                dim
            )));
        }
        if weights.is_empty() {
            return Err(CoreError::InvalidInput("measure must have at least one atom".into()));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(CoreError::InvalidInput(format!(
                    "atom {i} has non-positive or non-finite weight {w}"
                )));
            }
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::InvalidInput("non-finite coordinate".into()));
        }
        let index = KdTree::build(&coords, dim);
        Ok(DiscreteMeasure {
            dim,
            coords,
            weights,
            index,
            diameter: OnceLock::new(),
            nn_median: OnceLock::new(),
        })
    }

    pub fn new(dim: usize, atoms: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Result<Self> {
        let mut coords = Vec::new();
        let mut weights = Vec::new();
        for (p, w) in atoms {
            if p.len() != dim {
                return Err(CoreError::InvalidInput(format!(
                    "atom has {} coordinates, expected {}",
                    p.len(),
                    dim
                )));
            }
            coords.extend_from_slice(&p);
            weights.push(w);
        }
        Self::from_flat(dim, coords, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn total_mass(&self) -> f64 {
        vecmath::neumaier_sum(self.weights.iter().copied())
    }

    /// Indices of atoms strictly inside the open ball, ascending.
    pub fn atoms_in_ball(&self, ball: &Ball) -> Vec<usize> {
        self.index.ball_query(&self.coords, &ball.center, ball.radius)
    }

    /// `μ(B)`: exact sum of weights of atoms strictly inside `B`.
    pub fn ball_mass(&self, ball: &Ball) -> f64 {
        let mut acc = NeumaierSum::new();
        for i in self.atoms_in_ball(ball) {
            acc.add(self.weights[i]);
        }
        acc.value()
    }

    /// Linear-scan reference for `ball_mass`, kept as an oracle.
    pub fn ball_mass_scan(&self, ball: &Ball) -> f64 {
        let r2 = ball.radius * ball.radius;
        let mut acc = NeumaierSum::new();
        for i in 0..self.len() {
            if vecmath::dist2(self.point(i), &ball.center) < r2 {
                acc.add(self.weights[i]);
            }
        }
        acc.value()
    }

    /// `Θ_μ(B) = μ(B)/r(B)^n`, the n-dimensional density.
    pub fn density(&self, ball: &Ball, n: usize) -> f64 {
        self.ball_mass(ball) / ball.radius.powi(n as i32)
    }

    /// Exact diameter of the support (cached).
    pub fn diameter(&self) -> f64 {
        *self.diameter.get_or_init(|| {
            let n = self.len();
            let mut best = 0.0f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = vecmath::dist2(self.point(i), self.point(j));
                    if d > best {
                        best = d;
                    }
                }
            }
            best.sqrt()
        })
    }

    /// Median over atoms of the nearest-neighbour distance (cached).
    ///
    /// This is the resolution scale of the data: coefficients below a few
    /// multiples of it see isolated atoms rather than geometry.
    pub fn nn_median(&self) -> f64 {
        *self.nn_median.get_or_init(|| {
            let n = self.len();
            if n < 2 {
                return 0.0;
            }
            let mut dists: Vec<f64> = (0..n)
                .map(|i| self.index.nearest_other(&self.coords, i))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[n / 2]
        })
    }

    /// New measure with all weights multiplied by `k > 0`.
    pub fn scale_weights(&self, k: f64) -> Result<Self> {
        Self::from_flat(
            self.dim,
            self.coords.clone(),
            self.weights.iter().map(|w| w * k).collect(),
        )
    }

    /// Apply `x ↦ R x + t` to every atom. `rot` is row-major `d×d`.
    pub fn apply_isometry(&self, rot: &[f64], t: &[f64]) -> Result<Self> {
        let d = self.dim;
        if rot.len() != d * d || t.len() != d {
            return Err(CoreError::InvalidInput("isometry dimension mismatch".into()));
        }
        let mut coords = Vec::with_capacity(self.coords.len());
        for i in 0..self.len() {
            let p = self.point(i);
            for r in 0..d {
                coords.push(vecmath::dot(&rot[r * d..(r + 1) * d], p) + t[r]);
            }
        }
        Self::from_flat(d, coords, self.weights.clone())
    }

    /// Dilate space by `λ > 0` about the origin (weights unchanged).
    pub fn dilate(&self, lambda: f64) -> Result<Self> {
        Self::from_flat(
            self.dim,
            self.coords.iter().map(|c| c * lambda).collect(),
            self.weights.clone(),
        )
    }

    /// Sub-measure on the given atom indices.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        let mut weights = Vec::with_capacity(indices.len());
        for &i in indices {
            coords.extend_from_slice(self.point(i));
            weights.push(self.weights[i]);
        }
        Self::from_flat(self.dim, coords, weights)
    }

    /// Concatenate two measures over the same ambient space.
    pub fn concat(&self, other: &DiscreteMeasure) -> Result<Self> {
        if self.dim != other.dim {
            return Err(CoreError::InvalidInput("dimension mismatch in concat".into()));
        }
        let mut coords = self.coords.clone();
        coords.extend_from_slice(&other.coords);
        let mut weights = self.weights.clone();
        weights.extend_from_slice(&other.weights);
        Self::from_flat(self.dim, coords, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_mass_at_origin_inside_unit_ball() {
        let mu = DiscreteMeasure::new(2, [(vec![0.0, 0.0], 1.0)]).unwrap();
        let b = Ball::new(vec![0.0, 0.0], 1.0);
        assert_eq!(mu.ball_mass(&b), 1.0);
    }

    #[test]
    fn open_ball_excludes_boundary_atom() {
        let mu = DiscreteMeasure::new(2, [(vec![1.0, 0.0], 1.0)]).unwrap();
        let b = Ball::new(vec![0.0, 0.0], 1.0);
        assert_eq!(mu.ball_mass(&b), 0.0);
    }

    #[test]
    fn index_matches_linear_scan_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in 1..=3usize {
            let n = 100;
            let coords: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let mu = DiscreteMeasure::from_flat(d, coords, weights).unwrap();
            for _ in 0..50 {
                let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.2..1.2)).collect();
                let r = rng.random_range(0.01..2.5);
                let b = Ball::new(c, r);
                assert_eq!(mu.ball_mass(&b), mu.ball_mass_scan(&b));
            }
        }
    }

    #[test]
    fn density_formula_and_scale_covariance() {
        // mass 4 in a ball of radius 2, n = 1 -> density 2
        let mu = DiscreteMeasure::new(1, [(vec![0.0], 4.0)]).unwrap();
        let b = Ball::new(vec![0.0], 2.0);
        assert_eq!(mu.density(&b, 1), 2.0);

        // empty ball -> 0
        let far = Ball::new(vec![10.0], 2.0);
        assert_eq!(mu.density(&far, 1), 0.0);

        // joint dilation by λ with weights scaled by λ^n leaves Θ unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..1.0)).collect();
        let mu = DiscreteMeasure::from_flat(2, coords, weights).unwrap();
        let n = 1usize;
        let lambda = 3.5;
        let scaled = mu.dilate(lambda).unwrap().scale_weights(lambda.powi(n as i32)).unwrap();
        let b = Ball::new(vec![0.2, -0.1], 0.8);
        let bs = Ball::new(vec![0.2 * lambda, -0.1 * lambda], 0.8 * lambda);
        let t0 = mu.density(&b, n);
        let t1 = scaled.density(&bs, n);
        assert!((t0 - t1).abs() <= 1e-12 * (1.0 + t0.abs()));
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(DiscreteMeasure::new(1, [(vec![0.0], 0.0)]).is_err());
        assert!(DiscreteMeasure::new(1, [(vec![0.0], -1.0)]).is_err());
        assert!(DiscreteMeasure::new(1, [(vec![0.0], f64::NAN)]).is_err());
    }
}
