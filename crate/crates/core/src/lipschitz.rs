//! The localized dual-Lipschitz distance
//! `F_B(μ, ν) = sup { |∫φ dμ − ∫φ dν| : Lip(φ) ≤ 1, supp φ ⊂ B }`.
//!
//! Only atoms strictly inside `B` participate (φ vanishes outside). A node
//! assignment `φ_i` is feasible iff `|φ_i − φ_j| ≤ |x_i − x_j|` for all
//! pairs and `|φ_i| ≤ dist(x_i, ∂B)`; any such assignment extends to a
//! global `Lip₁` function supported in `B`, so the polytope is exactly the
//! restriction of the admissible class.
//!
//! The LP is solved exactly through its transportation form: surplus mass
//! (μ − ν)₊ is routed to deficit mass (ν − μ)₊ or to the boundary sphere,
//! where creating/destroying mass at `x` costs `dist(x, ∂B)`. The dual of
//! that problem is the potential LP above. Optimal potentials are recovered
//! by a c-transform, so every result carries a fully feasible certificate.

use crate::error::{CoreError, Result};
use crate::measure::{Ball, DiscreteMeasure};
use crate::plane::PlaneQuadrature;
use crate::simplex::{solve_transport, TransportInstance, TransportSolution};
use crate::vecmath::{self, NeumaierSum};

/// Default cap on LP nodes per side; above it, nodes are aggregated and the
/// result is flagged approximate.
pub const DEFAULT_FB_NODE_CAP: usize = 400;

#[derive(Debug, Clone)]
pub struct FbResult {
    pub value: f64,
    /// Node positions (union of supports inside `B` after aggregation).
    pub points: Vec<Vec<f64>>,
    /// Signed surplus `μ − ν` per node.
    pub surpluses: Vec<f64>,
    /// Optimal feasible potential per node (`|φ| ≤ dist(·, ∂B)`,
    /// all-pairs Lipschitz), with `Σ s·φ = value` up to `residual`.
    pub potentials: Vec<f64>,
    /// True when node aggregation was applied.
    pub approximate: bool,
    /// max(solver duality gap, certificate mismatch), relative.
    pub residual: f64,
}

struct SignedNodes {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Aggregate same-sign nodes down to `cap` by chunking in lexicographic
/// order; each chunk collapses to its weighted centroid with the total
/// weight. Mass-preserving and deterministic.
fn aggregate(points: Vec<Vec<f64>>, weights: Vec<f64>, cap: usize) -> (SignedNodes, bool) {
    if points.len() <= cap {
        return (SignedNodes { points, weights }, false);
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| vecmath::lex_cmp(&points[a], &points[b]).then(a.cmp(&b)));
    let len = order.len();
    let mut out_p = Vec::with_capacity(cap);
    let mut out_w = Vec::with_capacity(cap);
    for chunk in 0..cap {
        let lo = chunk * len / cap;
        let hi = (chunk + 1) * len / cap;
        if lo == hi {
            continue;
        }
        let mut wsum = 0.0;
        let dim = points[0].len();
        let mut centroid = vec![0.0; dim];
        for &idx in &order[lo..hi] {
            let w = weights[idx];
            wsum += w;
            for (c, x) in centroid.iter_mut().zip(&points[idx]) {
                *c += w * x;
            }
        }
        if wsum > 0.0 {
            for c in centroid.iter_mut() {
                *c /= wsum;
            }
            out_p.push(centroid);
            out_w.push(wsum);
        }
    }
    (
        SignedNodes {
            points: out_p,
            weights: out_w,
        },
        true,
    )
}

/// Core solver on explicit signed nodes (positions strictly inside `B`).
fn solve_signed(
    pos: SignedNodes,
    neg: SignedNodes,
    ball: &Ball,
    approximate: bool,
) -> Result<FbResult> {
    let bdist = |p: &[f64]| ball.boundary_dist(p);
    let np = pos.points.len();
    let nn = neg.points.len();

    let mut points: Vec<Vec<f64>> = Vec::with_capacity(np + nn);
    let mut surpluses: Vec<f64> = Vec::with_capacity(np + nn);
    points.extend(pos.points.iter().cloned());
    surpluses.extend(pos.weights.iter().copied());
    points.extend(neg.points.iter().cloned());
    surpluses.extend(neg.weights.iter().map(|w| -w));

    if np == 0 && nn == 0 {
        return Ok(FbResult {
            value: 0.0,
            points,
            surpluses,
            potentials: Vec::new(),
            approximate,
            residual: 0.0,
        });
    }

    // Transportation instance: sources = positive nodes + boundary,
    // sinks = negative nodes + boundary. The boundary carries a pad mass so
    // the boundary-to-boundary arc stays basic and pins the duals.
    let pos_total: f64 = vecmath::neumaier_sum(pos.weights.iter().copied());
    let neg_total: f64 = vecmath::neumaier_sum(neg.weights.iter().copied());
    let pad = 1.0 + pos_total + neg_total;

    let m = np + 1;
    let n = nn + 1;
    let mut cost = vec![0.0f64; m * n];
    let b_pos: Vec<f64> = pos.points.iter().map(|p| bdist(p)).collect();
    let b_neg: Vec<f64> = neg.points.iter().map(|p| bdist(p)).collect();
    for i in 0..np {
        for j in 0..nn {
            let d = vecmath::dist(&pos.points[i], &neg.points[j]);
            cost[i * n + j] = d.min(b_pos[i] + b_neg[j]);
        }
        cost[i * n + nn] = b_pos[i];
    }
    for j in 0..nn {
        cost[np * n + j] = b_neg[j];
    }
    // cost[np*n + nn] = 0 (boundary to boundary)

    let mut supply = Vec::with_capacity(m);
    supply.extend(pos.weights.iter().copied());
    supply.push(neg_total + pad);
    let mut demand = Vec::with_capacity(n);
    demand.extend(neg.weights.iter().copied());
    demand.push(pos_total + pad);

    let inst = TransportInstance {
        m,
        n,
        cost,
        supply,
        demand,
    };
    let sol: TransportSolution = solve_transport(&inst).map_err(|e| {
        CoreError::LpFailure(format!(
            "F_B instance ({} pos, {} neg, r={}): {e}",
            np, nn, ball.radius
        ))
    })?;

    // c-transform recovery of a fully feasible optimal potential.
    // ψ_j = −v_j − u_∂ on sinks; φ_k = min(b_k, min_j ĉ(k,j) + ψ_j).
    let u_boundary = sol.u[np];
    let psi: Vec<f64> = (0..nn).map(|j| -sol.v[j] - u_boundary).collect();
    let potentials: Vec<f64> = (0..np + nn)
        .map(|k| {
            let bk = bdist(&points[k]);
            let mut phi = bk;
            for j in 0..nn {
                let d = vecmath::dist(&points[k], &neg.points[j]);
                let c_hat = d.min(bk + b_neg[j]);
                phi = phi.min(c_hat + psi[j]);
            }
            phi
        })
        .collect();

    let mut cert = NeumaierSum::new();
    for (s, phi) in surpluses.iter().zip(&potentials) {
        cert.add(s * phi);
    }
    let value = sol.objective;
    let cert_gap = (cert.value() - value).abs() / (1.0 + value.abs());
    let residual = cert_gap.max(sol.duality_gap);

    Ok(FbResult {
        value,
        points,
        surpluses,
        potentials,
        approximate,
        residual,
    })
}

fn collect_inside(
    mu: &DiscreteMeasure,
    ball: &Ball,
    sign: f64,
    out: &mut Vec<(Vec<f64>, f64)>,
) {
    for i in mu.atoms_in_ball(ball) {
        out.push((mu.point(i).to_vec(), sign * mu.weight(i)));
    }
}

/// `F_B(μ, ν)` with optimal potentials. `node_cap` bounds the LP size per
/// sign; pass [`DEFAULT_FB_NODE_CAP`] unless profiling says otherwise.
pub fn f_b_distance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    ball: &Ball,
    node_cap: usize,
) -> Result<FbResult> {
    let mut signed: Vec<(Vec<f64>, f64)> = Vec::new();
    collect_inside(mu, ball, 1.0, &mut signed);
    collect_inside(nu, ball, -1.0, &mut signed);
    f_b_distance_signed(signed, ball, node_cap)
}

/// `F_B` on an explicit signed atom list (positions need not be distinct;
/// exactly coincident positions cancel before the LP).
pub fn f_b_distance_signed(
    mut signed: Vec<(Vec<f64>, f64)>,
    ball: &Ball,
    node_cap: usize,
) -> Result<FbResult> {
    signed.retain(|(p, _)| ball.contains(p));
    // merge exactly coincident positions so e.g. F_B(μ, μ) solves trivially
    signed.sort_by(|a, b| vecmath::lex_cmp(&a.0, &b.0));
    let mut merged: Vec<(Vec<f64>, f64)> = Vec::with_capacity(signed.len());
    for (p, w) in signed {
        match merged.last_mut() {
            Some((q, wq)) if q == &p => *wq += w,
            _ => merged.push((p, w)),
        }
    }
    let mut pos_p = Vec::new();
    let mut pos_w = Vec::new();
    let mut neg_p = Vec::new();
    let mut neg_w = Vec::new();
    for (p, w) in merged {
        if w > 0.0 {
            pos_p.push(p);
            pos_w.push(w);
        } else if w < 0.0 {
            neg_p.push(p);
            neg_w.push(-w);
        }
    }
    let (pos, ap) = aggregate(pos_p, pos_w, node_cap);
    let (neg, an) = aggregate(neg_p, neg_w, node_cap);
    solve_signed(pos, neg, ball, ap || an)
}

/// Cached `c ↦ F_B(μ, c·quadrature)` evaluator for the α coefficients.
///
/// Node sets and the cost matrix are built once; each evaluation re-solves
/// the transportation LP with the quadrature side scaled by `c`. The map is
/// convex and piecewise linear in `c`.
pub struct FbFlatSolver {
    ball: Ball,
    atom_points: Vec<Vec<f64>>,
    atom_weights: Vec<f64>,
    quad_points: Vec<Vec<f64>>,
    quad_weights: Vec<f64>,
    cost: Vec<f64>,
    b_atoms: Vec<f64>,
    b_quad: Vec<f64>,
    pub approximate: bool,
}

impl FbFlatSolver {
    pub fn new(
        mu: &DiscreteMeasure,
        quad: &PlaneQuadrature,
        ball: &Ball,
        node_cap: usize,
    ) -> Result<Self> {
        let mut atom_p = Vec::new();
        let mut atom_w = Vec::new();
        for i in mu.atoms_in_ball(ball) {
            atom_p.push(mu.point(i).to_vec());
            atom_w.push(mu.weight(i));
        }
        let mut quad_p = Vec::new();
        let mut quad_w = Vec::new();
        let r2 = ball.radius * ball.radius;
        for i in 0..quad.len() {
            let p = quad.node(i);
            if vecmath::dist2(p, &ball.center) < r2 {
                quad_p.push(p.to_vec());
                quad_w.push(quad.weights[i]);
            }
        }
        let (atoms, aa) = aggregate(atom_p, atom_w, node_cap);
        let (quads, aq) = aggregate(quad_p, quad_w, node_cap);
        let b_atoms: Vec<f64> = atoms.points.iter().map(|p| ball.boundary_dist(p)).collect();
        let b_quad: Vec<f64> = quads.points.iter().map(|p| ball.boundary_dist(p)).collect();
        let np = atoms.points.len();
        let nq = quads.points.len();
        let n = nq + 1;
        let mut cost = vec![0.0f64; (np + 1) * n];
        for i in 0..np {
            for j in 0..nq {
                let d = vecmath::dist(&atoms.points[i], &quads.points[j]);
                cost[i * n + j] = d.min(b_atoms[i] + b_quad[j]);
            }
            cost[i * n + nq] = b_atoms[i];
        }
        for j in 0..nq {
            cost[np * n + j] = b_quad[j];
        }
        Ok(FbFlatSolver {
            ball: ball.clone(),
            atom_points: atoms.points,
            atom_weights: atoms.weights,
            quad_points: quads.points,
            quad_weights: quads.weights,
            cost,
            b_atoms,
            b_quad,
            approximate: aa || aq,
        })
    }

    /// Total μ mass participating (inside `B`).
    pub fn mu_mass(&self) -> f64 {
        vecmath::neumaier_sum(self.atom_weights.iter().copied())
    }

    /// Quadrature mass inside `B` at `c = 1`.
    pub fn quad_mass(&self) -> f64 {
        vecmath::neumaier_sum(self.quad_weights.iter().copied())
    }

    /// `F_B(μ, c·ℋⁿ|_L-quadrature)`.
    pub fn eval(&self, c: f64) -> Result<f64> {
        if !(c >= 0.0) {
            return Err(CoreError::InvalidInput("c must be ≥ 0".into()));
        }
        let np = self.atom_points.len();
        let nq = self.quad_points.len();
        if np == 0 && nq == 0 {
            return Ok(0.0);
        }
        if c == 0.0 || nq == 0 {
            // tent-function optimum: every atom pays its boundary distance
            let mut acc = NeumaierSum::new();
            for (w, b) in self.atom_weights.iter().zip(&self.b_atoms) {
                acc.add(w * b);
            }
            if c > 0.0 {
                for (h, b) in self.quad_weights.iter().zip(&self.b_quad) {
                    acc.add(c * h * b);
                }
            }
            return Ok(acc.value());
        }
        let pos_total = self.mu_mass();
        let neg_total = c * self.quad_mass();
        let pad = 1.0 + pos_total + neg_total;
        let mut supply = self.atom_weights.clone();
        supply.push(neg_total + pad);
        let mut demand: Vec<f64> = self.quad_weights.iter().map(|h| c * h).collect();
        demand.push(pos_total + pad);
        let inst = TransportInstance {
            m: np + 1,
            n: nq + 1,
            cost: self.cost.clone(),
            supply,
            demand,
        };
        let sol = solve_transport(&inst).map_err(|e| {
            CoreError::LpFailure(format!(
                "F_B flat instance ({np} atoms, {nq} quad nodes, c={c}, r={}): {e}",
                self.ball.radius
            ))
        })?;
        Ok(sol.objective)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::DiscreteMeasure;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_ball2() -> Ball {
        Ball::new(vec![0.0, 0.0], 1.0)
    }

    fn rand_measure(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> DiscreteMeasure {
        let coords: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-spread..spread)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        DiscreteMeasure::from_flat(2, coords, weights).unwrap()
    }

    #[test]
    fn identical_measures_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = rand_measure(&mut rng, 10, 0.8);
        let r = f_b_distance(&mu, &mu, &unit_ball2(), DEFAULT_FB_NODE_CAP).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn point_mass_vs_nothing_pays_tent_value() {
        // F_B(m·δ_z(B), 0) = m·r(B): the tent φ = dist(·, ∂B) attains it
        let mu = DiscreteMeasure::new(2, [(vec![0.0, 0.0], 3.0)]).unwrap();
        let nu = DiscreteMeasure::new(2, [(vec![9.0, 9.0], 1.0)]).unwrap(); // outside B
        let r = f_b_distance(&mu, &nu, &unit_ball2(), DEFAULT_FB_NODE_CAP).unwrap();
        assert!((r.value - 3.0).abs() < 1e-12);
        assert_eq!(r.potentials.len(), 1);
        assert!((r.potentials[0] - 1.0).abs() < 1e-12);
    }

    /// Certificate check: the returned potential is feasible for the
    /// all-pairs LP and attains the value, so by weak duality both the
    /// primal plan and the potential are optimal.
    #[test]
    fn potentials_certify_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..30 {
            let mu = rand_measure(&mut rng, 3 + trial % 5, 0.9);
            let nu = rand_measure(&mut rng, 3 + (trial + 2) % 5, 0.9);
            let ball = unit_ball2();
            let r = f_b_distance(&mu, &nu, &ball, DEFAULT_FB_NODE_CAP).unwrap();
            // feasibility
            for (k, p) in r.points.iter().enumerate() {
                assert!(r.potentials[k].abs() <= ball.boundary_dist(p) + 1e-10);
                for (l, q) in r.points.iter().enumerate().skip(k + 1) {
                    let d = vecmath::dist(p, q);
                    assert!((r.potentials[k] - r.potentials[l]).abs() <= d + 1e-10);
                }
            }
            // attainment
            let attained: f64 = r
                .surpluses
                .iter()
                .zip(&r.potentials)
                .map(|(s, p)| s * p)
                .sum();
            assert!(
                (attained - r.value).abs() <= 1e-9 * (1.0 + r.value),
                "trial {trial}: attained {attained} vs value {}",
                r.value
            );
            assert!(r.residual < 1e-9);
        }
    }

    /// Random feasible potentials never beat the reported optimum.
    #[test]
    fn random_feasible_potentials_are_dominated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = rand_measure(&mut rng, 3, 0.9);
        let nu = rand_measure(&mut rng, 3, 0.9);
        let ball = unit_ball2();
        let r = f_b_distance(&mu, &nu, &ball, DEFAULT_FB_NODE_CAP).unwrap();
        let k = r.points.len();
        for _ in 0..500 {
            // random assignment, then Lipschitz-repair by inf-convolution
            let raw: Vec<f64> = (0..k)
                .map(|i| rng.random_range(-1.0..1.0) * ball.boundary_dist(&r.points[i]))
                .collect();
            let mut phi = vec![0.0f64; k];
            for i in 0..k {
                let mut best = ball.boundary_dist(&r.points[i]);
                for j in 0..k {
                    let d = vecmath::dist(&r.points[i], &r.points[j]);
                    best = best.min(raw[j] + d);
                }
                phi[i] = best.max(-ball.boundary_dist(&r.points[i]));
            }
            // keep only if actually feasible (repair can still clip)
            let mut feasible = true;
            for i in 0..k {
                for j in 0..k {
                    if (phi[i] - phi[j]).abs() > vecmath::dist(&r.points[i], &r.points[j]) + 1e-12 {
                        feasible = false;
                    }
                }
            }
            if !feasible {
                continue;
            }
            let val: f64 = r.surpluses.iter().zip(&phi).map(|(s, p)| s * p).sum();
            assert!(val.abs() <= r.value + 1e-9);
        }
    }

    #[test]
    fn symmetry_and_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ball = unit_ball2();
        for _ in 0..10 {
            let a = rand_measure(&mut rng, 4, 0.9);
            let b = rand_measure(&mut rng, 5, 0.9);
            let c = rand_measure(&mut rng, 6, 0.9);
            let fab = f_b_distance(&a, &b, &ball, 400).unwrap().value;
            let fba = f_b_distance(&b, &a, &ball, 400).unwrap().value;
            assert!((fab - fba).abs() < 1e-10);
            let fac = f_b_distance(&a, &c, &ball, 400).unwrap().value;
            let fcb = f_b_distance(&c, &b, &ball, 400).unwrap().value;
            assert!(fab <= fac + fcb + 1e-8);
        }
    }

    #[test]
    fn scaling_covariance() {
        // dilating space by λ (weights fixed) multiplies F_B by λ
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_measure(&mut rng, 5, 0.9);
        let b = rand_measure(&mut rng, 5, 0.9);
        let ball = unit_ball2();
        let v1 = f_b_distance(&a, &b, &ball, 400).unwrap().value;
        let lam = 3.0;
        let av = a.dilate(lam).unwrap();
        let bv = b.dilate(lam).unwrap();
        let bl = Ball::new(vec![0.0, 0.0], lam);
        let v2 = f_b_distance(&av, &bv, &bl, 400).unwrap().value;
        assert!((v2 - lam * v1).abs() < 1e-9 * (1.0 + v2.abs()));
    }

    #[test]
    fn flat_solver_matches_direct_and_is_convex_in_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu = rand_measure(&mut rng, 8, 0.9);
        let ball = unit_ball2();
        let plane = crate::plane::AffinePlane::new(vec![0.1, -0.05], &[vec![1.0, 0.3]]).unwrap();
        let quad = crate::plane::flat_quadrature(&plane, &ball, 0.05, 100_000).unwrap();
        let solver = FbFlatSolver::new(&mu, &quad, &ball, 400).unwrap();
        // agreement with the generic path at c = 0.7
        let c = 0.7;
        let mut signed: Vec<(Vec<f64>, f64)> = (0..mu.len())
            .map(|i| (mu.point(i).to_vec(), mu.weight(i)))
            .collect();
        for i in 0..quad.len() {
            signed.push((quad.node(i).to_vec(), -c * quad.weights[i]));
        }
        let direct = f_b_distance_signed(signed, &ball, 1_000_000).unwrap().value;
        let cached = solver.eval(c).unwrap();
        assert!((direct - cached).abs() < 1e-9 * (1.0 + direct));
        // three-point convexity at several triples
        for (a, b) in [(0.0, 1.0), (0.2, 2.0), (0.5, 1.5)] {
            let mid = 0.5 * (a + b);
            let fa = solver.eval(a).unwrap();
            let fb = solver.eval(b).unwrap();
            let fm = solver.eval(mid).unwrap();
            assert!(fm <= 0.5 * fa + 0.5 * fb + 1e-9 * (1.0 + fa + fb));
        }
    }
}
