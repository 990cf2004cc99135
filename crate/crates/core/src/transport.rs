//! Exact and entropic Wasserstein distances between discrete measures.

use crate::error::{CoreError, Result};
use crate::measure::DiscreteMeasure;
use crate::simplex::{solve_transport, TransportInstance};
use crate::vecmath::{self, NeumaierSum};

/// Relative mass mismatch below this is silently renormalized (and
/// recorded); above it the solve is refused.
pub const MASS_MISMATCH_TOL: f64 = 1e-9;

/// A feasible coupling between two discrete measures.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Sparse entries `(source atom, target atom, mass)`, mass > 0.
    pub entries: Vec<(usize, usize, f64)>,
    pub cost_exponent: f64,
    /// Max relative marginal violation over rows and columns.
    pub marginal_residual: f64,
}

impl TransportPlan {
    fn from_flows(
        flows: &[(usize, usize, f64)],
        p: f64,
        source_w: &[f64],
        target_w: &[f64],
    ) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = flows
            .iter()
            .filter(|&&(_, _, f)| f > 0.0)
            .map(|&(i, j, f)| (i, j, f))
            .collect();
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut rows = vec![0.0f64; source_w.len()];
        let mut cols = vec![0.0f64; target_w.len()];
        for &(i, j, f) in &entries {
            rows[i] += f;
            cols[j] += f;
        }
        let mut resid = 0.0f64;
        for (r, w) in rows.iter().zip(source_w) {
            resid = resid.max((r - w).abs() / (1.0 + w.abs()));
        }
        for (c, w) in cols.iter().zip(target_w) {
            resid = resid.max((c - w).abs() / (1.0 + w.abs()));
        }
        TransportPlan {
            entries,
            cost_exponent: p,
            marginal_residual: resid,
        }
    }

    /// `∫ |x−y|^p dπ` against explicit point sets.
    pub fn transport_cost(&self, src: &DiscreteMeasure, dst: &DiscreteMeasure) -> f64 {
        let mut acc = NeumaierSum::new();
        for &(i, j, f) in &self.entries {
            acc.add(vecmath::dist(src.point(i), dst.point(j)).powf(self.cost_exponent) * f);
        }
        acc.value()
    }
}

#[derive(Debug, Clone)]
pub struct WassersteinResult {
    /// `W_p = (optimal cost)^{1/p}`.
    pub value: f64,
    pub plan: TransportPlan,
    /// Relative duality gap reported by the LP.
    pub duality_gap: f64,
    /// Relative mass mismatch that was renormalized away (0 when exact).
    pub renormalized_by: f64,
}

fn check_masses(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<(f64, f64, f64)> {
    let ma = mu.total_mass();
    let mb = nu.total_mass();
    let rel = (ma - mb).abs() / ma.max(mb);
    if rel > MASS_MISMATCH_TOL {
        return Err(CoreError::MassMismatch {
            lhs: ma,
            rhs: mb,
            rel,
        });
    }
    Ok((ma, mb, rel))
}

/// Exact `W_p(μ, ν)` via the dense transportation LP with cost `|x−y|^p`.
pub fn wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, p: f64) -> Result<WassersteinResult> {
    if !(p >= 1.0) {
        return Err(CoreError::InvalidInput(format!("cost exponent p={p} must be ≥ 1")));
    }
    if mu.dim() != nu.dim() {
        return Err(CoreError::InvalidInput("dimension mismatch".into()));
    }
    let (ma, mb, rel) = check_masses(mu, nu)?;
    let m = mu.len();
    let n = nu.len();
    let mut cost = vec![0.0f64; m * n];
    for i in 0..m {
        let a = mu.point(i);
        for j in 0..n {
            cost[i * n + j] = vecmath::dist(a, nu.point(j)).powf(p);
        }
    }
    // mismatch below tolerance: scale the lighter side up (recorded)
    let mut demand: Vec<f64> = nu.weights().to_vec();
    if ma != mb {
        let s = ma / mb;
        for d in demand.iter_mut() {
            *d *= s;
        }
    }
    let inst = TransportInstance {
        m,
        n,
        cost,
        supply: mu.weights().to_vec(),
        demand,
    };
    let sol = solve_transport(&inst)?;
    let plan = TransportPlan::from_flows(&sol.flows, p, mu.weights(), nu.weights());
    Ok(WassersteinResult {
        value: sol.objective.max(0.0).powf(1.0 / p),
        plan,
        duality_gap: sol.duality_gap,
        renormalized_by: rel,
    })
}

#[derive(Debug, Clone)]
pub struct EntropicResult {
    pub value: f64,
    /// L∞ marginal residual of the entropic plan, relative.
    pub marginal_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Entropic (Sinkhorn) approximation of `W_p`, log-domain for stability.
///
/// The returned value is `(⟨cost, π_ε⟩)^{1/p}` for the converged entropic
/// plan; its bias above the exact value is `O(ε log N)`. On hitting
/// `max_iter` the best value is returned with `converged = false`.
pub fn wasserstein_entropic(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    p: f64,
    epsilon: f64,
    max_iter: usize,
) -> Result<EntropicResult> {
    if !(p >= 1.0) {
        return Err(CoreError::InvalidInput(format!("cost exponent p={p} must be ≥ 1")));
    }
    if !(epsilon > 0.0) {
        return Err(CoreError::InvalidInput("epsilon must be > 0".into()));
    }
    let (ma, _, _) = check_masses(mu, nu)?;
    let m = mu.len();
    let n = nu.len();
    let mut cost = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            cost[i * n + j] = vecmath::dist(mu.point(i), nu.point(j)).powf(p);
        }
    }
    // normalize to probability vectors; rescale the objective afterwards
    let a: Vec<f64> = mu.weights().iter().map(|w| w / ma).collect();
    let b_total: f64 = nu.total_mass();
    let b: Vec<f64> = nu.weights().iter().map(|w| w / b_total).collect();
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();

    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; n];
    let tol = 1e-10;
    let mut resid = f64::INFINITY;
    let mut iterations = 0;
    let logsumexp = |xs: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = xs.collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };
    for it in 0..max_iter {
        iterations = it + 1;
        // π_ij = exp((f_i + g_j − c_ij)/ε) a_i b_j; alternate exact row and
        // column scalings in the log domain
        for i in 0..m {
            let lse = logsumexp(&mut (0..n).map(|j| (g[j] - cost[i * n + j]) / epsilon + log_b[j]));
            f[i] = -epsilon * lse;
        }
        for j in 0..n {
            let lse = logsumexp(&mut (0..m).map(|i| (f[i] - cost[i * n + j]) / epsilon + log_a[i]));
            g[j] = -epsilon * lse;
        }
        // row marginal residual of the current plan
        resid = 0.0;
        for i in 0..m {
            let row: f64 = (0..n)
                .map(|j| ((f[i] + g[j] - cost[i * n + j]) / epsilon + log_a[i] + log_b[j]).exp())
                .sum();
            resid = resid.max((row - a[i]).abs() / a[i]);
        }
        if resid < tol {
            break;
        }
    }
    let mut obj = NeumaierSum::new();
    for i in 0..m {
        for j in 0..n {
            let pi = ((f[i] + g[j] - cost[i * n + j]) / epsilon + log_a[i] + log_b[j]).exp();
            obj.add(pi * cost[i * n + j]);
        }
    }
    let value = (obj.value().max(0.0) * ma).powf(1.0 / p);
    let converged = resid < tol;
    Ok(EntropicResult {
        value,
        marginal_residual: resid,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct DualityGapReport {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    /// Max Lipschitz violation of the dual potential over all support pairs.
    pub lipschitz_violation: f64,
}

/// Kantorovich duality check for `W₁`.
///
/// Primal: full transportation LP between `μ` and `ν`. Dual: a `Lip₁`
/// potential on the union of supports obtained from an independent solve of
/// the cancelled problem `(μ−ν)₊ → (ν−μ)₊` via c-transform. Strong duality
/// makes the two values equal in exact arithmetic.
pub fn w1_duality_gap(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<DualityGapReport> {
    check_masses(mu, nu)?;
    let primal = wasserstein(mu, nu, 1.0)?.value;

    // signed surplus on the union of supports, coincident points cancelled
    let mut signed: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..mu.len() {
        signed.push((mu.point(i).to_vec(), mu.weight(i)));
    }
    for j in 0..nu.len() {
        signed.push((nu.point(j).to_vec(), -nu.weight(j)));
    }
    signed.sort_by(|a, b| vecmath::lex_cmp(&a.0, &b.0));
    let mut merged: Vec<(Vec<f64>, f64)> = Vec::new();
    for (p, w) in signed {
        match merged.last_mut() {
            Some((q, wq)) if q == &p => *wq += w,
            _ => merged.push((p, w)),
        }
    }
    let mut union_points: Vec<Vec<f64>> = Vec::new();
    let mut surpluses: Vec<f64> = Vec::new();
    for i in 0..mu.len() {
        union_points.push(mu.point(i).to_vec());
        surpluses.push(mu.weight(i));
    }
    for j in 0..nu.len() {
        union_points.push(nu.point(j).to_vec());
        surpluses.push(-nu.weight(j));
    }

    let sources: Vec<(Vec<f64>, f64)> = merged
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(p, w)| (p.clone(), *w))
        .collect();
    let sinks: Vec<(Vec<f64>, f64)> = merged
        .iter()
        .filter(|(_, w)| *w < 0.0)
        .map(|(p, w)| (p.clone(), -*w))
        .collect();

    let (dual, phi) = if sources.is_empty() || sinks.is_empty() {
        (0.0, vec![0.0; union_points.len()])
    } else {
        // cancelled transportation problem, independent of the full primal
        let m = sources.len();
        let n = sinks.len();
        let mut cost = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                cost[i * n + j] = vecmath::dist(&sources[i].0, &sinks[j].0);
            }
        }
        let sup_total: f64 = sources.iter().map(|s| s.1).sum();
        let sink_total: f64 = sinks.iter().map(|s| s.1).sum();
        let mut demand: Vec<f64> = sinks.iter().map(|s| s.1).collect();
        let scale = sup_total / sink_total;
        for d in demand.iter_mut() {
            *d *= scale;
        }
        let inst = TransportInstance {
            m,
            n,
            cost,
            supply: sources.iter().map(|s| s.1).collect(),
            demand,
        };
        let sol = solve_transport(&inst)?;
        // c-transform of the sink potentials: φ(x) = min_j (|x−y_j| + ψ_j)
        // is 1-Lipschitz and optimal for the cancelled (hence the original)
        // dual by strong duality.
        let psi: Vec<f64> = (0..n).map(|j| -sol.v[j]).collect();
        let phi: Vec<f64> = union_points
            .iter()
            .map(|x| {
                (0..n)
                    .map(|j| vecmath::dist(x, &sinks[j].0) + psi[j])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mut acc = NeumaierSum::new();
        for (s, p) in surpluses.iter().zip(&phi) {
            acc.add(s * p);
        }
        (acc.value(), phi)
    };

    let mut violation = 0.0f64;
    for i in 0..union_points.len() {
        for j in (i + 1)..union_points.len() {
            let d = vecmath::dist(&union_points[i], &union_points[j]);
            violation = violation.max((phi[i] - phi[j]).abs() - d);
        }
    }

    Ok(DualityGapReport {
        primal,
        dual,
        gap: (primal - dual).abs(),
        lipschitz_violation: violation.max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_measure(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DiscreteMeasure {
        let coords: Vec<f64> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        DiscreteMeasure::from_flat(d, coords, weights).unwrap()
    }

    fn normalize(mu: &DiscreteMeasure) -> DiscreteMeasure {
        mu.scale_weights(1.0 / mu.total_mass()).unwrap()
    }

    #[test]
    fn identity_and_two_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = rand_measure(&mut rng, 6, 2);
        for p in [1.0, 2.0] {
            let r = wasserstein(&mu, &mu, p).unwrap();
            assert!(r.value < 1e-12, "W_{p}(mu,mu) = {}", r.value);
        }
        let a = DiscreteMeasure::new(3, [(vec![0.0, 0.0, 0.0], 1.0)]).unwrap();
        let b = DiscreteMeasure::new(3, [(vec![1.0, 2.0, 2.0], 1.0)]).unwrap();
        for p in [1.0, 1.5, 2.0] {
            let r = wasserstein(&a, &b, p).unwrap();
            assert!((r.value - 3.0).abs() < 1e-12);
        }
    }

    /// Uniform 4-atom measures: the optimum is a permutation matching.
    #[test]
    fn four_atom_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in [1.0, 2.0] {
            for _ in 0..20 {
                let coords_a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let coords_b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = DiscreteMeasure::from_flat(2, coords_a, vec![0.25; 4]).unwrap();
                let b = DiscreteMeasure::from_flat(2, coords_b, vec![0.25; 4]).unwrap();
                let r = wasserstein(&a, &b, p).unwrap();
                // enumerate all 24 permutations
                let perms = [
                    [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2],
                    [0, 3, 2, 1], [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0],
                    [1, 3, 0, 2], [1, 3, 2, 0], [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3],
                    [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0], [3, 0, 1, 2], [3, 0, 2, 1],
                    [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
                ];
                let best = perms
                    .iter()
                    .map(|perm| {
                        perm.iter()
                            .enumerate()
                            .map(|(i, &j)| 0.25 * vecmath::dist(a.point(i), b.point(j)).powf(p))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .powf(1.0 / p);
                assert!((r.value - best).abs() < 1e-10, "p={p}: {} vs {}", r.value, best);
            }
        }
    }

    #[test]
    fn plan_feasibility_and_metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = normalize(&rand_measure(&mut rng, 5, 2));
            let b = normalize(&rand_measure(&mut rng, 7, 2));
            let c = normalize(&rand_measure(&mut rng, 6, 2));
            for p in [1.0, 2.0] {
                let rab = wasserstein(&a, &b, p).unwrap();
                assert!(rab.plan.marginal_residual < 1e-9);
                let rba = wasserstein(&b, &a, p).unwrap();
                assert!((rab.value - rba.value).abs() < 1e-10);
                let rac = wasserstein(&a, &c, p).unwrap();
                let rcb = wasserstein(&c, &b, p).unwrap();
                assert!(rab.value <= rac.value + rcb.value + 1e-8);
            }
            // W1 <= W2 for probability measures
            let w1 = wasserstein(&a, &b, 1.0).unwrap().value;
            let w2 = wasserstein(&a, &b, 2.0).unwrap().value;
            assert!(w1 <= w2 + 1e-8);
        }
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_measure(&mut rng, 6, 3);
        let b = normalize(&rand_measure(&mut rng, 6, 3))
            .scale_weights(a.total_mass())
            .unwrap();
        let v = [0.3, -1.2, 0.7];
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let at = a.apply_isometry(&id, &v).unwrap();
        let bt = b.apply_isometry(&id, &v).unwrap();
        for p in [1.0, 2.0] {
            let r0 = wasserstein(&a, &b, p).unwrap().value;
            let r1 = wasserstein(&at, &bt, p).unwrap().value;
            assert!((r0 - r1).abs() < 1e-10 * (1.0 + r0));
        }
    }

    #[test]
    fn mass_mismatch_is_an_error() {
        let a = DiscreteMeasure::new(1, [(vec![0.0], 1.0)]).unwrap();
        let b = DiscreteMeasure::new(1, [(vec![1.0], 1.5)]).unwrap();
        match wasserstein(&a, &b, 1.0) {
            Err(CoreError::MassMismatch { .. }) => {}
            other => panic!("expected mass mismatch, got {other:?}"),
        }
    }

    #[test]
    fn entropic_forced_plan_and_accuracy() {
        let a = DiscreteMeasure::new(2, [(vec![0.0, 0.0], 1.0)]).unwrap();
        let b = DiscreteMeasure::new(2, [(vec![3.0, 4.0], 1.0)]).unwrap();
        for eps in [1e-1, 1e-3] {
            let r = wasserstein_entropic(&a, &b, 1.0, eps, 500).unwrap();
            assert!((r.value - 5.0).abs() < 1e-9, "eps {eps}: {}", r.value);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = normalize(&rand_measure(&mut rng, 50, 2));
        let b = normalize(&rand_measure(&mut rng, 50, 2));
        let exact = wasserstein(&a, &b, 2.0).unwrap().value;
        let diam2: f64 = 8.0; // (2√2)² bound for [-1,1]²
        let ent = wasserstein_entropic(&a, &b, 2.0, 1e-3 * diam2, 5000).unwrap();
        assert!(ent.converged);
        assert!(
            (ent.value - exact).abs() / exact < 0.01,
            "entropic {} vs exact {}",
            ent.value,
            exact
        );
    }

    #[test]
    fn entropic_value_monotone_in_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = normalize(&rand_measure(&mut rng, 30, 2));
        let b = normalize(&rand_measure(&mut rng, 30, 2));
        let eps0 = 1e-2 * 8.0;
        let mut last = f64::INFINITY;
        for k in 0..3 {
            let eps = eps0 / 2f64.powi(k);
            let r = wasserstein_entropic(&a, &b, 2.0, eps, 20_000).unwrap();
            assert!(r.converged);
            assert!(
                r.value <= last + 1e-6 * (1.0 + last),
                "eps {eps}: {} > previous {}",
                r.value,
                last
            );
            last = r.value;
        }
    }

    #[test]
    fn duality_gap_small_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // closed-form pair
        let a = DiscreteMeasure::new(2, [(vec![0.0, 0.0], 1.0)]).unwrap();
        let b = DiscreteMeasure::new(2, [(vec![1.0, 1.0], 1.0)]).unwrap();
        let rep = w1_duality_gap(&a, &b).unwrap();
        assert!(rep.gap < 1e-12);

        for _ in 0..25 {
            let a = normalize(&rand_measure(&mut rng, 10, 2));
            let b = normalize(&rand_measure(&mut rng, 10, 2));
            let rep = w1_duality_gap(&a, &b).unwrap();
            assert!(
                rep.gap <= 1e-7 * (1.0 + rep.primal),
                "gap {} at value {}",
                rep.gap,
                rep.primal
            );
            assert!(rep.lipschitz_violation < 1e-9);
        }
    }
}
