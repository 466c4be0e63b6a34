//! Envelope (skyline) LDLᵀ factorization without pivoting, under a reverse
//! Cuthill-McKee ordering.
//!
//! Periodic grid operators have wrap-around couplings that make the natural
//! bandwidth equal to the matrix size; RCM folds the torus so that the
//! envelope stays narrow. No pivoting is done, so the factorization exists
//! whenever every leading principal minor of the permuted matrix is nonzero.
//! Since `A = P^T L D L^T P` is a congruence, the signs of `D` give the exact
//! inertia of `A` (Sylvester's law).

use std::collections::VecDeque;

use super::sparse::CsrMatrix;
use crate::error::{Error, Result};

/// Negative, zero and positive eigenvalue counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct Inertia {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

/// Reverse Cuthill-McKee ordering of a symmetric pattern. `perm[k]` is the
/// original index placed at position `k`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        // Start each component from a pseudo-peripheral node of minimum degree.
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        let start = pseudo_peripheral(adj, start, &visited);
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            nbrs.dedup();
            for w in nbrs {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adj: &[Vec<usize>], start: usize, blocked: &[bool]) -> (usize, usize) {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    let mut last = start;
    while let Some(v) = queue.pop_front() {
        last = v;
        for &w in &adj[v] {
            if !blocked[w] && dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    (last, dist[last])
}

fn pseudo_peripheral(adj: &[Vec<usize>], start: usize, blocked: &[bool]) -> usize {
    let mut node = start;
    let (_, mut ecc) = bfs_levels(adj, node, blocked);
    for _ in 0..8 {
        let (far, _) = bfs_levels(adj, node, blocked);
        let (_, far_ecc) = bfs_levels(adj, far, blocked);
        if far_ecc <= ecc {
            break;
        }
        node = far;
        ecc = far_ecc;
    }
    node
}

/// Skyline LDLᵀ factors.
#[derive(Debug, Clone)]
pub struct Ldlt {
    n: usize,
    perm: Vec<usize>,
    /// `first[i]`: first column stored in (permuted) row `i`.
    first: Vec<usize>,
    /// Offset of row `i` in `lower`; row `i` holds columns `first[i]..i`.
    offset: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
    scale: f64,
}

impl Ldlt {
    /// Factors `a` with a freshly computed RCM ordering.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let perm = reverse_cuthill_mckee(&a.adjacency());
        Self::factor_with_ordering(a, perm)
    }

    pub fn factor_with_ordering(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.dim();
        let mut inv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let pi = inv[i];
            for (j, _) in a.row(i) {
                let pj = inv[j];
                if pj < pi {
                    first[pi] = first[pi].min(pj);
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0;
        for i in 0..n {
            offset.push(total);
            total += i - first[i];
        }
        offset.push(total);
        let mut lower = vec![0.0; total];
        let mut diag = vec![0.0; n];
        for i in 0..n {
            let pi = inv[i];
            for (j, v) in a.row(i) {
                let pj = inv[j];
                if pj == pi {
                    diag[pi] += v;
                } else if pj < pi {
                    lower[offset[pi] + pj - first[pi]] += v;
                }
            }
        }
        let scale = a.max_abs().max(f64::MIN_POSITIVE);

        // Row-oriented Crout: for row i, first form t_j = L_ij d_j, then scale.
        for i in 0..n {
            let fi = first[i];
            let oi = offset[i];
            for j in fi..i {
                let fj = first[j];
                let oj = offset[j];
                let k0 = fi.max(fj);
                let mut s = lower[oi + j - fi];
                for k in k0..j {
                    s -= lower[oi + k - fi] * lower[oj + k - fj];
                }
                lower[oi + j - fi] = s;
            }
            let mut d = diag[i];
            for j in fi..i {
                let t = lower[oi + j - fi];
                let l = t / diag[j];
                d -= l * t;
                lower[oi + j - fi] = l;
            }
            if !d.is_finite() || d.abs() <= scale * 1e-20 {
                return Err(Error::FactorizationBreakdown { pivot: i });
            }
            diag[i] = d;
        }
        Ok(Self {
            n,
            perm,
            first,
            offset,
            lower,
            diag,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn pivots(&self) -> &[f64] {
        &self.diag
    }

    /// Smallest `|d_i|` relative to the largest matrix entry.
    pub fn min_relative_pivot(&self) -> f64 {
        self.diag.iter().fold(f64::INFINITY, |a, d| a.min(d.abs())) / self.scale
    }

    pub fn inertia(&self) -> Inertia {
        let mut out = Inertia::default();
        for &d in &self.diag {
            if d < 0.0 {
                out.negative += 1;
            } else if d > 0.0 {
                out.positive += 1;
            } else {
                out.zero += 1;
            }
        }
        out
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let oi = self.offset[i];
            let mut s = x[i];
            for j in fi..i {
                s -= self.lower[oi + j - fi] * x[j];
            }
            x[i] = s;
        }
        for (xi, d) in x.iter_mut().zip(&self.diag) {
            *xi /= d;
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let oi = self.offset[i];
            let xi = x[i];
            for j in fi..i {
                x[j] -= self.lower[oi + j - fi] * xi;
            }
        }
        let mut out = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            out[p] = x[k];
        }
        out
    }

    pub fn envelope_size(&self) -> usize {
        self.lower.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize, diag: f64) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            t.push((i, i, diag));
            t.push((i, j, -1.0));
            t.push((j, i, -1.0));
        }
        CsrMatrix::from_triplets(n, &t)
    }

    #[test]
    fn rcm_keeps_ring_envelope_linear() {
        let a = ring(200, 3.0);
        let f = Ldlt::factor(&a).unwrap();
        assert!(
            f.envelope_size() <= 3 * 200,
            "envelope {}",
            f.envelope_size()
        );
    }

    #[test]
    fn solves_ring_system() {
        let a = ring(50, 2.5);
        let f = Ldlt::factor(&a).unwrap();
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.mul_vec(&x);
        let y = f.solve(&b);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn inertia_of_shifted_ring_matches_closed_form() {
        // eigenvalues of the ring are diag - 2 cos(2 pi k / n)
        let n = 40;
        let shift = 2.0 - 0.3;
        let a = ring(n, shift);
        let neg = (0..n)
            .filter(|&k| {
                shift - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos() < 0.0
            })
            .count();
        let f = Ldlt::factor(&a).unwrap();
        assert_eq!(f.inertia().negative, neg);
        assert_eq!(f.inertia().positive, n - neg);
    }

    #[test]
    fn singular_leading_minor_breaks_down() {
        let a = CsrMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        assert!(matches!(
            Ldlt::factor_with_ordering(&a, vec![0, 1]),
            Err(Error::FactorizationBreakdown { .. })
        ));
    }
}
