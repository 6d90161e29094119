//! Exact balanced transportation problems via the transportation simplex
//! (northwest-corner start, MODI potentials, stepping-stone pivots).
//!
//! Sizes here are tiny (25×25 for a 5×5 grid), so the dense `O(m·n)` pricing
//! per pivot is not a concern.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Optimal flow between two marginals, with the dual potentials that certify it.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols` flow.
    pub flow: Vec<f64>,
    pub cost: f64,
    /// Row potentials `u` and column potentials `v` with `u_i + v_j ≤ c_ij`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl TransportPlan {
    pub fn flow_at(&self, i: usize, j: usize) -> f64 {
        self.flow[i * self.cols + j]
    }

    /// Verify primal feasibility, dual feasibility and complementary slackness.
    pub fn certify(&self, supply: &[f64], demand: &[f64], cost: &[f64], tol: f64) -> std::result::Result<(), String> {
        let (m, n) = (self.rows, self.cols);
        for i in 0..m {
            let s: f64 = (0..n).map(|j| self.flow_at(i, j)).sum();
            if (s - supply[i]).abs() > tol {
                return Err(format!("row {i} ships {s}, supply {}", supply[i]));
            }
        }
        for j in 0..n {
            let s: f64 = (0..m).map(|i| self.flow_at(i, j)).sum();
            if (s - demand[j]).abs() > tol {
                return Err(format!("column {j} receives {s}, demand {}", demand[j]));
            }
        }
        let mut primal = 0.0;
        for i in 0..m {
            for j in 0..n {
                let f = self.flow_at(i, j);
                if f < -tol {
                    return Err(format!("negative flow {f} at ({i}, {j})"));
                }
                let reduced = cost[i * n + j] - self.u[i] - self.v[j];
                if reduced < -tol {
                    return Err(format!("dual infeasible at ({i}, {j}): reduced cost {reduced}"));
                }
                if f > tol && reduced.abs() > tol {
                    return Err(format!("slackness violated at ({i}, {j}): flow {f}, reduced cost {reduced}"));
                }
                primal += f * cost[i * n + j];
            }
        }
        if (primal - self.cost).abs() > tol {
            return Err(format!("reported cost {} but flow costs {primal}", self.cost));
        }
        let dual: f64 = supply.iter().zip(&self.u).map(|(a, b)| a * b).sum::<f64>()
            + demand.iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>();
        if (primal - dual).abs() > tol {
            return Err(format!("duality gap {}", primal - dual));
        }
        Ok(())
    }
}

/// Solve `min Σ c_ij f_ij` subject to row sums = `supply`, column sums = `demand`, `f ≥ 0`.
///
/// Both marginals must be non-negative with totals agreeing within 1e-4; the
/// demand is rescaled to the supply total before solving.
pub fn solve(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 || cost.len() != m * n {
        return Err(Error::invalid(format!("transport sizes {m}x{n} with {} costs", cost.len())));
    }
    for (index, &value) in supply.iter().chain(demand).enumerate() {
        if !(value >= 0.0) {
            return Err(Error::NegativeMass { index, value });
        }
    }
    let ts: f64 = supply.iter().sum();
    let td: f64 = demand.iter().sum();
    if (ts - td).abs() > 1e-4 {
        return Err(Error::MassMismatch(ts - td));
    }
    let demand: Vec<f64> = if td > 0.0 { demand.iter().map(|d| d * ts / td).collect() } else { demand.to_vec() };

    let mut flow = vec![0.0; m * n];
    let mut basic = vec![false; m * n];
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + n - 1);

    // northwest corner: exactly m + n − 1 basic cells, some possibly at zero flow
    let mut s = supply.to_vec();
    let mut d = demand.clone();
    let (mut i, mut j) = (0, 0);
    loop {
        let x = if i == m - 1 && j == n - 1 { s[i].max(d[j]).max(0.0) } else { s[i].min(d[j]) };
        flow[i * n + j] = x;
        basic[i * n + j] = true;
        basis.push((i, j));
        s[i] -= x;
        d[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if j == n - 1 || (i < m - 1 && s[i] <= d[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }

    let scale = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs())).max(1.0);
    let eps = 1e-12 * scale;
    let max_pivots = 50 * m * n + 1000;
    let bland_after = 5 * m * n;
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut pivots = 0;
    loop {
        potentials(m, n, &basis, cost, &mut u, &mut v);

        let mut entering: Option<(usize, usize)> = None;
        let mut best = -eps;
        'price: for i in 0..m {
            for j in 0..n {
                if basic[i * n + j] {
                    continue;
                }
                let r = cost[i * n + j] - u[i] - v[j];
                if r < best {
                    best = r;
                    entering = Some((i, j));
                    if pivots >= bland_after {
                        break 'price;
                    }
                }
            }
        }
        let Some((ei, ej)) = entering else { break };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::invalid("transport simplex did not converge"));
        }

        let path = tree_path(m, n, &basis, ei, ej);
        // path alternates −, +, −, … starting at the edge leaving row `ei`
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &bi) in path.iter().enumerate() {
            if k % 2 == 0 {
                let (pi, pj) = basis[bi];
                let f = flow[pi * n + pj];
                if f < theta {
                    theta = f;
                    leave = bi;
                }
            }
        }
        for (k, &bi) in path.iter().enumerate() {
            let (pi, pj) = basis[bi];
            if k % 2 == 0 {
                flow[pi * n + pj] -= theta;
            } else {
                flow[pi * n + pj] += theta;
            }
        }
        flow[ei * n + ej] += theta;
        let (li, lj) = basis[leave];
        flow[li * n + lj] = 0.0;
        basic[li * n + lj] = false;
        basic[ei * n + ej] = true;
        basis[leave] = (ei, ej);
    }

    for f in flow.iter_mut() {
        if *f < 0.0 {
            *f = 0.0;
        }
    }
    let total = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    Ok(TransportPlan { rows: m, cols: n, flow, cost: total, u, v })
}

/// Solve `u_i + v_j = c_ij` over the basis tree with `u_0 = 0`.
fn potentials(m: usize, n: usize, basis: &[(usize, usize)], cost: &[f64], u: &mut [f64], v: &mut [f64]) {
    let adj = adjacency(m, n, basis);
    let mut seen = vec![false; m + n];
    let mut queue = VecDeque::new();
    // the basis may be a forest only if it is malformed; seed every component
    for root in 0..m + n {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        if root < m {
            u[root] = 0.0;
        } else {
            v[root - m] = 0.0;
        }
        queue.push_back(root);
        while let Some(node) = queue.pop_front() {
            for &bi in &adj[node] {
                let (i, j) = basis[bi];
                let other = if node < m { m + j } else { i };
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                if other < m {
                    u[i] = cost[i * n + j] - v[j];
                } else {
                    v[j] = cost[i * n + j] - u[i];
                }
                queue.push_back(other);
            }
        }
    }
}

fn adjacency(m: usize, n: usize, basis: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m + n];
    for (bi, &(i, j)) in basis.iter().enumerate() {
        adj[i].push(bi);
        adj[m + j].push(bi);
    }
    adj
}

/// Basis indices along the tree path from row node `i0` to column node `j0`.
fn tree_path(m: usize, n: usize, basis: &[(usize, usize)], i0: usize, j0: usize) -> Vec<usize> {
    let adj = adjacency(m, n, basis);
    let mut via: Vec<Option<usize>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = VecDeque::from([i0]);
    seen[i0] = true;
    let target = m + j0;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        for &bi in &adj[node] {
            let (i, j) = basis[bi];
            let other = if node < m { m + j } else { i };
            if !seen[other] {
                seen[other] = true;
                via[other] = Some(bi);
                queue.push_back(other);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while node != i0 {
        let bi = via[node].expect("basis is a spanning tree");
        path.push(bi);
        let (i, j) = basis[bi];
        node = if node == m + j { i } else { m + j };
    }
    path.reverse();
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn line_cost(n: usize) -> Vec<f64> {
        (0..n * n).map(|k| ((k / n) as f64 - (k % n) as f64).abs()).collect()
    }

    #[test]
    fn identical_marginals_cost_nothing() {
        let a = [0.2, 0.3, 0.5];
        let plan = solve(&a, &a, &line_cost(3)).unwrap();
        assert!(plan.cost.abs() < 1e-12);
        for i in 0..3 {
            assert!((plan.flow_at(i, i) - a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn textbook_instance() {
        // classic 3×4 example with optimum 743
        let supply = [7.0, 9.0, 18.0];
        let demand = [5.0, 8.0, 7.0, 14.0];
        let cost = [19.0, 30.0, 50.0, 10.0, 70.0, 30.0, 40.0, 60.0, 40.0, 8.0, 70.0, 20.0];
        let plan = solve(&supply, &demand, &cost).unwrap();
        assert!((plan.cost - 743.0).abs() < 1e-9, "{}", plan.cost);
        plan.certify(&supply, &demand, &cost, 1e-9).unwrap();
    }

    #[test]
    fn random_instances_are_certified_optimal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = rng.random_range(1..9);
            let n = rng.random_range(1..9);
            let mut a: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random() }).collect();
            let mut b: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random() }).collect();
            a[0] += 0.1;
            b[0] += 0.1;
            let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
            a.iter_mut().for_each(|x| *x /= sa);
            b.iter_mut().for_each(|x| *x /= sb);
            let c: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..10.0)).collect();
            let plan = solve(&a, &b, &c).unwrap();
            plan.certify(&a, &b, &c, 1e-9).unwrap();
        }
    }

    #[test]
    fn mass_mismatch_is_rejected() {
        assert!(matches!(solve(&[1.0], &[0.5], &[0.0]), Err(Error::MassMismatch(_))));
        assert!(solve(&[-0.1, 1.1], &[1.0], &[0.0, 0.0]).is_err());
    }
}
