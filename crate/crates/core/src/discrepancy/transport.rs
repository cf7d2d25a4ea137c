//! Exact optimal transport between uniform empirical measures.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::matrix::{dist, Matrix};

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian method
/// with potentials, `O(n³)`). Returns the total cost and `assign[i] = j`.
pub fn hungarian(cost: &Matrix) -> Result<(f64, Vec<usize>)> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape("assignment needs a square cost matrix"));
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    // 1-indexed arrays; p[j] = row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = crate::matrix::compensated_sum((0..n).map(|i| cost.get(i, assign[i])));
    Ok((total, assign))
}

/// Min-heap entry ordered by distance, then node.
struct Entry(f64, usize);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Transportation problem with integer supplies `supply[i]` and demands
/// `demand[j]` (equal totals), solved exactly by successive shortest paths
/// with Dijkstra on reduced costs. Returns the optimal total cost.
pub fn min_cost_transport(cost: &Matrix, supply: &[u64], demand: &[u64]) -> Result<f64> {
    let (n, m) = (cost.rows(), cost.cols());
    if supply.len() != n || demand.len() != m {
        return Err(Error::shape("supply/demand lengths do not match the cost matrix"));
    }
    if supply.iter().sum::<u64>() != demand.iter().sum::<u64>() {
        return Err(Error::domain("supplies and demands must balance"));
    }
    // nodes: 0..n sources, n..n+m sinks, s = n+m, t = n+m+1
    let (s, t) = (n + m, n + m + 1);
    let nodes = n + m + 2;
    let mut sup = supply.to_vec();
    let mut dem = demand.to_vec();
    let mut flow = vec![0u64; n * m];
    let mut pot = vec![0.0f64; nodes];
    let mut remaining: u64 = sup.iter().sum();
    while remaining > 0 {
        let mut d = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        let mut heap = BinaryHeap::new();
        d[s] = 0.0;
        heap.push(Entry(0.0, s));
        while let Some(Entry(du, u)) = heap.pop() {
            if done[u] || du > d[u] {
                continue;
            }
            if u == t {
                break;
            }
            done[u] = true;
            let mut relax = |v: usize, c: f64, d: &mut Vec<f64>, prev: &mut Vec<usize>| {
                let rc = (c + pot[u] - pot[v]).max(0.0);
                if d[u] + rc < d[v] {
                    d[v] = d[u] + rc;
                    prev[v] = u;
                    heap.push(Entry(d[v], v));
                }
            };
            if u == s {
                for i in 0..n {
                    if sup[i] > 0 {
                        relax(i, 0.0, &mut d, &mut prev);
                    }
                }
            } else if u < n {
                for j in 0..m {
                    relax(n + j, cost.get(u, j), &mut d, &mut prev);
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[i * m + j] > 0 {
                        relax(i, -cost.get(i, j), &mut d, &mut prev);
                    }
                }
                if dem[j] > 0 {
                    relax(t, 0.0, &mut d, &mut prev);
                }
            }
        }
        if !d[t].is_finite() {
            return Err(Error::Numerical("transport problem has no augmenting path".into()));
        }
        // bottleneck along the path t <- ... <- s
        let mut amount = u64::MAX;
        let mut v = t;
        while v != s {
            let u = prev[v];
            if u == s {
                amount = amount.min(sup[v]);
            } else if v == t {
                amount = amount.min(dem[u - n]);
            } else if u >= n && v < n {
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        let mut v = t;
        while v != s {
            let u = prev[v];
            if u == s {
                sup[v] -= amount;
            } else if v == t {
                dem[u - n] -= amount;
            } else if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                flow[v * m + (u - n)] -= amount;
            }
            v = u;
        }
        remaining -= amount;
        let dt = d[t];
        for k in 0..nodes {
            pot[k] += d[k].min(dt);
        }
    }
    let total = crate::matrix::compensated_sum(
        (0..n).flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| flow[i * m + j] > 0)
            .map(|(i, j)| flow[i * m + j] as f64 * cost.get(i, j)),
    );
    Ok(total)
}

fn same_multiset(a: &Matrix, b: &Matrix) -> bool {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return false;
    }
    let key = |m: &Matrix| {
        let mut rows: Vec<Vec<f64>> = m.iter_rows().map(|r| r.to_vec()).collect();
        rows.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
        rows
    };
    key(a) == key(b)
}

/// Exact W₁ between the uniform empirical measures on the rows of `t` and
/// `s` under the Euclidean ground metric.
pub fn wasserstein1(t: &Matrix, s: &Matrix) -> Result<f64> {
    if t.is_empty() || s.is_empty() {
        return Err(Error::domain("W1 needs two nonempty point sets"));
    }
    if t.cols() != s.cols() {
        return Err(Error::shape("point sets differ in dimension"));
    }
    if same_multiset(t, s) {
        return Ok(0.0);
    }
    let (n, m) = (t.rows(), s.rows());
    let mut cost = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            cost.set(i, j, dist(t.row(i), s.row(j)));
        }
    }
    if n == m {
        let (total, _) = hungarian(&cost)?;
        return Ok(total / n as f64);
    }
    let total = min_cost_transport(&cost, &vec![m as u64; n], &vec![n as u64; m])?;
    Ok(total / (n as f64 * m as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_examples() {
        let w = |a: &[f64], b: &[f64]| wasserstein1(&Matrix::column(a), &Matrix::column(b)).unwrap();
        assert_eq!(w(&[0.0], &[3.0]), 3.0);
        assert!((w(&[0.0, 2.0], &[1.0, 3.0]) - 1.0).abs() <= 1e-12);
        assert_eq!(w(&[0.5, 0.1], &[0.1, 0.5]), 0.0);
        // unequal sizes: {0,2} vs {1} moves half mass distance 1 each
        assert!((w(&[0.0, 2.0], &[1.0]) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn unequal_sizes_match_quantile_formula_in_1d() {
        // W1 in 1D = ∫|F_T − F_S|; compute on a fine grid of breakpoints
        let t = [0.0, 1.0, 5.0];
        let s = [2.0, 3.0];
        let mut pts: Vec<f64> = t.iter().chain(&s).copied().collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cdf = |xs: &[f64], x: f64| xs.iter().filter(|&&v| v <= x).count() as f64 / xs.len() as f64;
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (cdf(&t, w[0]) - cdf(&s, w[0])).abs() * (w[1] - w[0]);
        }
        let got = wasserstein1(&Matrix::column(&t), &Matrix::column(&s)).unwrap();
        assert!((got - area).abs() <= 1e-12);
    }

    #[test]
    fn empty_is_domain_error() {
        assert!(matches!(
            wasserstein1(&Matrix::zeros(0, 1), &Matrix::column(&[1.0])),
            Err(Error::Domain(_))
        ));
    }
}
