//! Exact solver for dense balanced transportation problems.
//!
//! Classic transportation simplex (MODI / u-v method) with a north-west
//! corner start, block pricing, and a Bland-rule fallback after long
//! degenerate stalls. Deterministic: identical instances produce identical
//! pivot sequences, bases, and dual potentials.

use crate::error::{CoreError, Result};
use crate::vecmath::{neumaier_sum, NeumaierSum};

pub struct TransportInstance {
    pub m: usize,
    pub n: usize,
    /// Row-major `m × n` costs.
    pub cost: Vec<f64>,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TransportSolution {
    /// Primal objective (compensated summation).
    pub objective: f64,
    /// Basic cells with their flows (flows may be 0 on degenerate cells).
    pub flows: Vec<(usize, usize, f64)>,
    /// Row duals.
    pub u: Vec<f64>,
    /// Column duals; `u[i] + v[j] ≤ c[i][j]` up to the pricing tolerance.
    pub v: Vec<f64>,
    pub iterations: usize,
    /// Max positive violation of dual feasibility over all cells.
    pub dual_violation: f64,
    /// |primal − dual| / (1 + |primal|).
    pub duality_gap: f64,
}

impl TransportInstance {
    #[inline]
    fn c(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }
}

/// Recompute duals from the basis tree. Returns false if the basis does not
/// span all row and column nodes.
fn compute_duals(
    inst: &TransportInstance,
    basis: &[(usize, usize, f64)],
    adj: &[Vec<(usize, usize)>],
    u: &mut [f64],
    v: &mut [f64],
) -> bool {
    let m = inst.m;
    let mut seen = vec![false; m + inst.n];
    let mut stack = Vec::with_capacity(seen.len());
    stack.push(0usize);
    u[0] = 0.0;
    seen[0] = true;
    while let Some(node) = stack.pop() {
        for &(nb, bidx) in &adj[node] {
            if seen[nb] {
                continue;
            }
            seen[nb] = true;
            let (i, j, _) = basis[bidx];
            if nb >= m {
                v[j] = inst.c(i, j) - u[i];
            } else {
                u[i] = inst.c(i, j) - v[j];
            }
            stack.push(nb);
        }
    }
    seen.iter().all(|&s| s)
}

/// Solve a balanced transportation problem. Supplies and demands must be
/// positive and balanced to ~1e-6 relative; the residual is absorbed into
/// the last demand.
pub fn solve_transport(inst: &TransportInstance) -> Result<TransportSolution> {
    let (m, n) = (inst.m, inst.n);
    if m == 0 || n == 0 {
        return Err(CoreError::LpFailure("empty transportation instance".into()));
    }
    if inst.supply.len() != m || inst.demand.len() != n || inst.cost.len() != m * n {
        return Err(CoreError::LpFailure("instance shape mismatch".into()));
    }
    let total_supply = neumaier_sum(inst.supply.iter().copied());
    let total_demand = neumaier_sum(inst.demand.iter().copied());
    let scale = total_supply.max(total_demand).max(1e-300);
    if (total_supply - total_demand).abs() > 1e-6 * scale {
        return Err(CoreError::LpFailure(format!(
            "unbalanced instance: supply {total_supply}, demand {total_demand}"
        )));
    }
    let mut demand = inst.demand.clone();
    *demand.last_mut().unwrap() += total_supply - total_demand;

    let cost_scale = inst.cost.iter().fold(0.0f64, |a, &c| a.max(c.abs())).max(1.0);
    let price_tol = 1e-12 * cost_scale;

    // --- north-west corner initial basis ---
    let mut basis: Vec<(usize, usize, f64)> = Vec::with_capacity(m + n - 1);
    {
        let mut a = inst.supply.clone();
        let mut b = demand.clone();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let f = a[i].min(b[j]).max(0.0);
            basis.push((i, j, f));
            a[i] -= f;
            b[j] -= f;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if a[i] <= b[j] && i < m - 1 {
                i += 1;
            } else if j < n - 1 {
                j += 1;
            } else {
                i += 1;
            }
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);

    // node ids: rows 0..m, cols m..m+n
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m + n];
    fn rebuild_adj(m: usize, basis: &[(usize, usize, f64)], adj: &mut [Vec<(usize, usize)>]) {
        for l in adj.iter_mut() {
            l.clear();
        }
        for (idx, &(i, j, _)) in basis.iter().enumerate() {
            adj[i].push((m + j, idx));
            adj[m + j].push((i, idx));
        }
    }
    rebuild_adj(m, &basis, &mut adj);

    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; n];
    if !compute_duals(inst, &basis, &adj, &mut u, &mut v) {
        return Err(CoreError::LpFailure("initial basis is not a spanning tree".into()));
    }

    let max_iter = 2000 * (m + n) + 20_000;
    let block = ((m * n) as f64).sqrt().ceil() as usize;
    let mut cursor = 0usize;
    let mut iterations = 0usize;
    let mut stall = 0usize;
    let mut bland = false;

    let mut visited = vec![false; m + n];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut stack: Vec<usize> = Vec::with_capacity(m + n);

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(CoreError::LpFailure(format!(
                "transportation simplex exceeded {max_iter} iterations on a {m}x{n} instance"
            )));
        }

        // --- pricing ---
        let mut enter: Option<(usize, usize)> = None;
        if bland {
            'outer: for i in 0..m {
                for j in 0..n {
                    if inst.c(i, j) - u[i] - v[j] < -price_tol {
                        enter = Some((i, j));
                        break 'outer;
                    }
                }
            }
        } else {
            let total = m * n;
            let mut best = -price_tol;
            let mut scanned = 0usize;
            while scanned < total {
                let idx = cursor;
                cursor = (cursor + 1) % total;
                scanned += 1;
                let (i, j) = (idx / n, idx % n);
                let red = inst.c(i, j) - u[i] - v[j];
                if red < best {
                    best = red;
                    enter = Some((i, j));
                }
                if enter.is_some() && scanned % block == 0 {
                    break;
                }
            }
        }
        let Some((ei, ej)) = enter else {
            break; // optimal
        };

        // --- cycle: tree path from row node ei to col node m+ej ---
        for p in parent.iter_mut() {
            *p = None;
        }
        for s in visited.iter_mut() {
            *s = false;
        }
        stack.clear();
        stack.push(ei);
        visited[ei] = true;
        while let Some(node) = stack.pop() {
            if node == m + ej {
                break;
            }
            for &(nb, bidx) in &adj[node] {
                if !visited[nb] {
                    visited[nb] = true;
                    parent[nb] = Some((node, bidx));
                    stack.push(nb);
                }
            }
        }
        if parent[m + ej].is_none() {
            return Err(CoreError::LpFailure("basis is disconnected".into()));
        }
        let mut path: Vec<usize> = Vec::new(); // basis indices from m+ej back to ei
        let mut node = m + ej;
        while node != ei {
            let (pnode, bidx) = parent[node].unwrap();
            path.push(bidx);
            node = pnode;
        }
        // entering cell gets +θ; walking the path from ei towards m+ej the
        // basic cells alternate −θ, +θ, ... starting with −θ.
        let mut theta = f64::INFINITY;
        let mut leave: Option<usize> = None;
        for (k, &bidx) in path.iter().rev().enumerate() {
            if k % 2 == 0 {
                let f = basis[bidx].2;
                if f < theta || (f <= theta && leave.is_none_or(|l| bidx < l)) {
                    theta = f;
                    leave = Some(bidx);
                }
            }
        }
        let leave = leave.ok_or_else(|| CoreError::LpFailure("no leaving arc found".into()))?;
        let theta = theta.max(0.0);

        for (k, &bidx) in path.iter().rev().enumerate() {
            if k % 2 == 0 {
                basis[bidx].2 = (basis[bidx].2 - theta).max(0.0);
            } else {
                basis[bidx].2 += theta;
            }
        }
        basis[leave] = (ei, ej, theta);
        rebuild_adj(m, &basis, &mut adj);
        if !compute_duals(inst, &basis, &adj, &mut u, &mut v) {
            return Err(CoreError::LpFailure("basis lost the spanning tree property".into()));
        }

        if theta <= 1e-15 * scale {
            stall += 1;
            if stall > 20 * (m + n) {
                bland = true;
            }
        } else {
            stall = 0;
            bland = false;
        }
    }

    // --- wrap up ---
    let mut obj = NeumaierSum::new();
    for &(i, j, f) in &basis {
        if f != 0.0 {
            obj.add(inst.c(i, j) * f);
        }
    }
    let objective = obj.value();

    let mut dual = NeumaierSum::new();
    for i in 0..m {
        dual.add(inst.supply[i] * u[i]);
    }
    for j in 0..n {
        dual.add(demand[j] * v[j]);
    }
    let dual_obj = dual.value();

    let mut violation = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            violation = violation.max(u[i] + v[j] - inst.c(i, j));
        }
    }

    Ok(TransportSolution {
        objective,
        flows: basis,
        u,
        v,
        iterations,
        dual_violation: violation.max(0.0),
        duality_gap: (objective - dual_obj).abs() / (1.0 + objective.abs()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cost_at(inst: &TransportInstance, i: usize, j: usize) -> f64 {
        inst.cost[i * inst.n + j]
    }

    /// Permutation oracle for uniform weights, m == n.
    fn permutation_oracle(inst: &TransportInstance) -> f64 {
        let n = inst.n;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        fn heap(perm: &mut Vec<usize>, k: usize, inst: &TransportInstance, best: &mut f64) {
            if k == 1 {
                let c: f64 = perm
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| cost_at(inst, i, j))
                    .sum();
                if c < *best {
                    *best = c;
                }
                return;
            }
            for i in 0..k {
                heap(perm, k - 1, inst, best);
                if k % 2 == 0 {
                    perm.swap(i, k - 1);
                } else {
                    perm.swap(0, k - 1);
                }
            }
        }
        heap(&mut perm, n, inst, &mut best);
        best / n as f64
    }

    #[test]
    fn matches_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..40 {
            let n = 2 + (trial % 6);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect();
            let inst = TransportInstance {
                m: n,
                n,
                cost,
                supply: vec![1.0 / n as f64; n],
                demand: vec![1.0 / n as f64; n],
            };
            let sol = solve_transport(&inst).unwrap();
            let oracle = permutation_oracle(&inst);
            assert!(
                (sol.objective - oracle).abs() < 1e-10,
                "trial {trial}: simplex {} vs oracle {}",
                sol.objective,
                oracle
            );
            assert!(sol.duality_gap < 1e-10);
            assert!(sol.dual_violation < 1e-9);
        }
    }

    #[test]
    fn feasibility_of_returned_flows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = rng.random_range(2..12);
            let n = rng.random_range(2..12);
            let supply: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
            let total: f64 = supply.iter().sum();
            let mut demand: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let dt: f64 = demand.iter().sum();
            for d in demand.iter_mut() {
                *d *= total / dt;
            }
            let cost: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..5.0)).collect();
            let inst = TransportInstance {
                m,
                n,
                cost,
                supply: supply.clone(),
                demand: demand.clone(),
            };
            let sol = solve_transport(&inst).unwrap();
            let mut row = vec![0.0; m];
            let mut col = vec![0.0; n];
            for &(i, j, f) in &sol.flows {
                assert!(f >= -1e-12);
                row[i] += f;
                col[j] += f;
            }
            for i in 0..m {
                assert!((row[i] - supply[i]).abs() < 1e-9 * (1.0 + supply[i]));
            }
            for j in 0..n {
                assert!((col[j] - demand[j]).abs() < 1e-9 * (1.0 + demand[j]));
            }
            for &(i, j, f) in &sol.flows {
                if f > 1e-12 {
                    assert!((cost_at(&inst, i, j) - sol.u[i] - sol.v[j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn degenerate_uniform_grid_terminates() {
        let n = 30;
        let cost: Vec<f64> = (0..n * n)
            .map(|k| ((k / n) as f64 - (k % n) as f64).abs())
            .collect();
        let inst = TransportInstance {
            m: n,
            n,
            cost,
            supply: vec![1.0; n],
            demand: vec![1.0; n],
        };
        let sol = solve_transport(&inst).unwrap();
        assert!(sol.objective.abs() < 1e-12);
    }
}
