//! Subset and clustering selectors.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{dist, sq_dist, KahanSum, Matrix};
use crate::seed;

/// Largest number of subsets the exact k-center search will enumerate.
pub const EXACT_LIMIT: u128 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cover {
    /// Selected row indices in increasing order.
    pub indices: Vec<usize>,
    /// Hausdorff distance between the points and the selected subset.
    pub radius: f64,
    pub exact: bool,
}

fn check_m(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::Capacity {
            requested: m,
            available: n,
        });
    }
    Ok(())
}

/// `C(n, k)` saturated at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n.saturating_sub(k));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn distances(x: &Matrix) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(x.row(i), x.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn radius(d: &[f64], n: usize, chosen: &[usize]) -> f64 {
    (0..n)
        .map(|i| chosen.iter().map(|&j| d[i * n + j]).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Farthest-point traversal from row 0 (ties go to the lowest index). Within
/// a factor 2 of the optimal covering radius.
pub fn kcenter_greedy(x: &Matrix, m: usize) -> Result<Cover> {
    let n = x.rows();
    check_m(n, m)?;
    let mut chosen = vec![0usize];
    let mut near: Vec<f64> = (0..n).map(|i| dist(x.row(i), x.row(0))).collect();
    while chosen.len() < m {
        let mut best = 0;
        for i in 1..n {
            if near[i] > near[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            near[i] = near[i].min(dist(x.row(i), x.row(best)));
        }
    }
    let r = near.iter().copied().fold(0.0, f64::max);
    chosen.sort_unstable();
    Ok(Cover {
        indices: chosen,
        radius: r,
        exact: false,
    })
}

/// Minimum covering radius over all `m`-subsets, first minimizer in
/// lexicographic order.
pub fn kcenter_exact(x: &Matrix, m: usize) -> Result<Cover> {
    let n = x.rows();
    check_m(n, m)?;
    let d = distances(x);
    let mut comb: Vec<usize> = (0..m).collect();
    let mut best = (f64::INFINITY, comb.clone());
    loop {
        let r = radius(&d, n, &comb);
        if r < best.0 {
            best = (r, comb.clone());
        }
        // next combination
        let mut i = m;
        loop {
            if i == 0 {
                return Ok(Cover {
                    indices: best.1,
                    radius: best.0,
                    exact: true,
                });
            }
            i -= 1;
            if comb[i] != i + n - m {
                break;
            }
        }
        comb[i] += 1;
        for j in i + 1..m {
            comb[j] = comb[j - 1] + 1;
        }
    }
}

/// Exact search when at most [`EXACT_LIMIT`] subsets exist, greedy otherwise.
pub fn kcenter_covering(x: &Matrix, m: usize) -> Result<Cover> {
    check_m(x.rows(), m)?;
    if binomial(x.rows(), m) <= EXACT_LIMIT {
        kcenter_exact(x, m)
    } else {
        kcenter_greedy(x, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeans {
    pub centers: Matrix,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

impl KMeans {
    pub fn final_inertia(&self) -> f64 {
        self.inertia.last().copied().unwrap_or(0.0)
    }
}

fn assign(x: &Matrix, centers: &Matrix) -> (Vec<usize>, f64) {
    let mut total = KahanSum::default();
    let a = x
        .iter_rows()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centers.iter_rows().enumerate() {
                let d = sq_dist(r, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            total.add(best.1);
            best.0
        })
        .collect();
    (a, total.total())
}

/// Lloyd iterations from k-means++ seeding. A cluster that loses all its
/// points is moved onto the point farthest from its current center.
pub fn kmeans_coreset(x: &Matrix, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = x.rows();
    check_m(n, k)?;
    let mut rng = seed::rng(seed);
    let mut picked = vec![rng.random_range(0..n)];
    let mut near: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(picked[0]))).collect();
    while picked.len() < k {
        let total: f64 = near.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in near.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // rounding can leave u past the last positive weight
            if near[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| near[i] > 0.0).unwrap();
            }
            pick
        } else {
            (0..n).find(|i| !picked.contains(i)).unwrap()
        };
        picked.push(next);
        for i in 0..n {
            near[i] = near[i].min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let mut centers = x.select_rows(&picked);
    let mut history = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..iters.max(1) {
        let (a, inertia) = assign(x, &centers);
        history.push(inertia);
        if prev.as_ref() == Some(&a) {
            break;
        }
        let mut sums = Matrix::zeros(k, x.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in a.iter().enumerate() {
            counts[c] += 1;
            crate::matrix::axpy(sums.row_mut(c), 1.0, x.row(i));
        }
        for c in 0..k {
            if counts[c] > 0 {
                for v in sums.row_mut(c) {
                    *v /= counts[c] as f64;
                }
                centers.row_mut(c).copy_from_slice(&sums.row(c).to_vec());
            } else {
                let far = (0..n)
                    .max_by(|&i, &j| {
                        sq_dist(x.row(i), centers.row(a[i]))
                            .partial_cmp(&sq_dist(x.row(j), centers.row(a[j])))
                            .unwrap()
                            .then(j.cmp(&i))
                    })
                    .unwrap();
                let row = x.row(far).to_vec();
                centers.row_mut(c).copy_from_slice(&row);
            }
        }
        prev = Some(a);
    }
    let (assignment, inertia) = assign(x, &centers);
    if history.last() != Some(&inertia) {
        history.push(inertia);
    }
    Ok(KMeans {
        centers,
        assignment,
        inertia: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_cover() {
        let t = Matrix::column(&[0.0, 4.0, 10.0]);
        let c = kcenter_covering(&t, 1).unwrap();
        assert_eq!(c.indices, vec![1]);
        assert_eq!(c.radius, 6.0);
        assert_eq!(kcenter_covering(&t, 3).unwrap().radius, 0.0);
        assert!(matches!(kcenter_covering(&t, 4), Err(Error::Capacity { .. })));
        assert!(matches!(kcenter_covering(&t, 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(12, 0), 1);
        assert_eq!(binomial(40, 20), 137_846_528_820);
    }

    #[test]
    fn kmeans_pairs_give_midpoints() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]).unwrap();
        let km = kmeans_coreset(&x, 2, 20, 3).unwrap();
        let mut c: Vec<Vec<f64>> = km.centers.iter_rows().map(|r| r.to_vec()).collect();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!((km.final_inertia() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_full_k_is_exact() {
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.5, 0.5], [0.9, 0.1], [0.3, 0.8]]).unwrap();
        let km = kmeans_coreset(&x, 4, 10, 0).unwrap();
        assert_eq!(km.final_inertia(), 0.0);
        let mut got: Vec<Vec<f64>> = km.centers.iter_rows().map(|r| r.to_vec()).collect();
        let mut want: Vec<Vec<f64>> = x.iter_rows().map(|r| r.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }
}
