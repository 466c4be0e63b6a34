//! Eigenvalues of weighted operators, Morse indices by inertia, the index
//! formula for constant solutions, the singular set, and eigenvalue
//! derivatives under metric perturbations.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{perturbation_form, ScalarField, SymTensorField, TorusGrid};
use crate::linalg::{weighted_dot, weighted_norm, Ldlt, WeightedOperator};
use crate::operator::Problem;
use crate::potential::Potential;

/// Problems with at most this many unknowns are solved densely.
pub const DENSE_THRESHOLD: usize = 2000;
/// Relative tolerance for merging eigenvalues into one cluster.
pub const CLUSTER_TOL: f64 = 1e-6;
/// Relative eigenpair residual accepted by the iterative solver.
const RESIDUAL_TOL: f64 = 1e-10;
/// Residual accepted relative to `‖op‖` once the iteration stops improving.
const BACKWARD_TOL: f64 = 1e-11;
/// Restarts without a halving of the residual that count as stalled.
const STALL_RESTARTS: usize = 3;
const MAX_RESTARTS: usize = 200;
const KRYLOV_STEPS: usize = 4;
/// Distance of the shift below the spectrum, relative to its spread.
const SHIFT_OFFSET: f64 = 1e-6;

/// The smallest eigenvalues of a weighted operator with `W`-orthonormal
/// eigenvectors.
#[derive(Debug, Clone)]
pub struct SpectrumResult {
    pub eigenvalues: Vec<f64>,
    /// Nodal values of each eigenvector, `W`-orthonormal.
    pub eigenvectors: Vec<Vec<f64>>,
    pub cluster_tol: f64,
    /// Cluster id of each eigenvalue; equal ids mean a numerically
    /// repeated eigenvalue.
    pub clusters: Vec<usize>,
    /// True when every eigenvalue of the operator is present.
    pub complete: bool,
}

impl SpectrumResult {
    fn new(eigenvalues: Vec<f64>, eigenvectors: Vec<Vec<f64>>, complete: bool) -> Self {
        let clusters = cluster_ids(&eigenvalues, CLUSTER_TOL);
        Self {
            eigenvalues,
            eigenvectors,
            cluster_tol: CLUSTER_TOL,
            clusters,
            complete,
        }
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenfield(&self, grid: &std::sync::Arc<TorusGrid>, k: usize) -> ScalarField {
        ScalarField::from_parts(grid.clone(), self.eigenvectors[k].clone())
    }

    /// Number of eigenvalues in the cluster of eigenvalue `k`.
    pub fn multiplicity(&self, k: usize) -> usize {
        let id = self.clusters[k];
        self.clusters.iter().filter(|&&c| c == id).count()
    }

    /// Distinct eigenvalues (cluster means) with their multiplicities.
    pub fn distinct(&self) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            if k > 0 && self.clusters[k] == self.clusters[k - 1] {
                let last = out.last_mut().unwrap();
                last.0 += (lam - last.0) / (last.1 + 1) as f64;
                last.1 += 1;
            } else {
                out.push((lam, 1));
            }
        }
        out
    }

    /// Largest eigenvalue that is known to bound the rest of the spectrum
    /// from below.
    pub fn largest(&self) -> f64 {
        if self.complete {
            f64::INFINITY
        } else {
            self.eigenvalues
                .last()
                .copied()
                .unwrap_or(f64::NEG_INFINITY)
        }
    }
}

fn cluster_ids(values: &[f64], tol: f64) -> Vec<usize> {
    let mut ids = Vec::with_capacity(values.len());
    let mut id = 0;
    for (k, &v) in values.iter().enumerate() {
        if k > 0 && (v - values[k - 1]).abs() > tol * v.abs().max(1.0) {
            id += 1;
        }
        ids.push(id);
    }
    ids
}

/// The `m` algebraically smallest eigenpairs of `op`. When eigenvalue `m-1`
/// belongs to a cluster, the whole cluster is returned, so the result may
/// hold more than `m` pairs.
pub fn eigen_solve(op: &WeightedOperator, m: usize) -> Result<SpectrumResult> {
    let n = op.dim();
    if m > n {
        return Err(Error::InvalidArgument(format!(
            "{m} eigenvalues requested of a {n}-dimensional operator"
        )));
    }
    if m == 0 {
        return Ok(SpectrumResult::new(Vec::new(), Vec::new(), n == 0));
    }
    if n <= DENSE_THRESHOLD {
        dense_eigen(op, m)
    } else {
        iterative_eigen(op, m)
    }
}

/// Dense solve of `W^{-1/2} K W^{-1/2}`.
pub fn dense_eigen(op: &WeightedOperator, m: usize) -> Result<SpectrumResult> {
    let n = op.dim();
    let s: Vec<f64> = op.weights.iter().map(|w| 1.0 / w.sqrt()).collect();
    let mut a = op.matrix.to_dense();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] *= s[i] * s[j];
        }
    }
    let a = 0.5 * (&a + a.transpose());
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let all: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let count = complete_cluster(&all, m);
    let eigenvectors = order[..count]
        .iter()
        .map(|&k| (0..n).map(|i| eig.eigenvectors[(i, k)] * s[i]).collect())
        .collect();
    Ok(SpectrumResult::new(
        all[..count].to_vec(),
        eigenvectors,
        count == n,
    ))
}

/// Smallest `count >= m` such that eigenvalue `count` starts a new cluster.
fn complete_cluster(sorted: &[f64], m: usize) -> usize {
    let ids = cluster_ids(sorted, CLUSTER_TOL);
    let mut count = m;
    while count < sorted.len() && ids[count] == ids[m - 1] {
        count += 1;
    }
    count
}

/// Shift-invert block Krylov iteration with full `W`-reorthogonalization and
/// Rayleigh-Ritz extraction on `K`, restarted from the best Ritz vectors.
pub fn iterative_eigen(op: &WeightedOperator, m: usize) -> Result<SpectrumResult> {
    let n = op.dim();
    let w = &op.weights;
    let (lo, hi) = op.spectral_bounds();
    // Just below the Gershgorin bound: the factorization stays definite and
    // the wanted end of the spectrum is well separated after inversion.
    let sigma = lo - SHIFT_OFFSET * (hi - lo).max(1.0);
    let fac = Ldlt::factor(&op.shifted_matrix(sigma))?;
    let block = (m + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut start: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let scale = lo.abs().max(hi.abs());
    let mut history: Vec<f64> = Vec::new();
    let mut wanted = m;
    for restart in 0..MAX_RESTARTS {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut current = Vec::new();
        for v in start.drain(..) {
            if let Some(v) = orthonormalize(v, &basis, w) {
                basis.push(v.clone());
                current.push(v);
            }
        }
        for _ in 1..KRYLOV_STEPS {
            let mut next = Vec::new();
            for v in &current {
                let wv: Vec<f64> = v.iter().zip(w).map(|(a, b)| a * b).collect();
                if let Some(y) = orthonormalize(fac.solve(&wv), &basis, w) {
                    basis.push(y.clone());
                    next.push(y);
                }
            }
            if next.is_empty() || basis.len() >= n {
                break;
            }
            current = next;
        }
        let (theta, ritz) = rayleigh_ritz(op, &basis);
        let resid: Vec<f64> = ritz
            .iter()
            .zip(&theta)
            .map(|(x, &t)| eigen_residual(op, x, t))
            .collect();
        wanted = complete_cluster(&theta, m).max(wanted).min(theta.len());
        // Residuals of badly scaled operators level off near roundoff of
        // `‖op‖`; once they stop improving within the backward-error bound
        // the pairs are as accurate as the arithmetic allows.
        let worst = (0..wanted)
            .map(|k| resid[k] / (RESIDUAL_TOL * theta[k].abs().max(1.0)))
            .fold(0.0, f64::max);
        history.push(worst);
        let stalled = history.len() > STALL_RESTARTS
            && worst >= 0.5 * history[history.len() - 1 - STALL_RESTARTS];
        let at_floor = (0..wanted).all(|k| resid[k] <= BACKWARD_TOL * scale);
        let converged = worst <= 1.0 || (stalled && at_floor);
        // The cluster check must see one converged value past the cluster.
        let tail_ok = wanted >= theta.len()
            || resid[wanted] <= 1e-6 * theta[wanted].abs().max(1.0)
            || theta[wanted] - theta[wanted - 1] > 1e-3 * theta[wanted].abs().max(1.0);
        if converged && tail_ok {
            log::debug!(
                "iterative eigensolve converged after {} restarts",
                restart + 1
            );
            let count = complete_cluster(&theta[..wanted.min(theta.len())], m);
            return Ok(SpectrumResult::new(
                theta[..count].to_vec(),
                ritz.into_iter().take(count).collect(),
                false,
            ));
        }
        if wanted + 2 > block {
            return Err(Error::EigenNonConvergence(format!(
                "cluster at eigenvalue {} exceeds the block size {block}",
                theta[m - 1]
            )));
        }
        start = ritz.into_iter().take(block).collect();
    }
    Err(Error::EigenNonConvergence(format!(
        "{m} eigenpairs not converged after {MAX_RESTARTS} restarts (n = {n}, shift {sigma:e}, bounds [{lo:e}, {hi:e}])"
    )))
}

/// Two-pass Gram-Schmidt in the `W` inner product; `None` when `v` lies in
/// the span of `basis`.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>], w: &[f64]) -> Option<Vec<f64>> {
    let norm0 = weighted_norm(&v, w);
    if !(norm0 > 0.0) || !norm0.is_finite() {
        return None;
    }
    for _ in 0..2 {
        for b in basis {
            let c = weighted_dot(&v, b, w);
            crate::linalg::axpy(-c, b, &mut v);
        }
    }
    let norm = weighted_norm(&v, w);
    if norm <= 1e-10 * norm0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Ritz pairs of `W^{-1} K` on a `W`-orthonormal basis, ascending.
fn rayleigh_ritz(op: &WeightedOperator, basis: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = basis.len();
    let kb: Vec<Vec<f64>> = basis.iter().map(|b| op.matrix.mul_vec(b)).collect();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v: f64 = basis[i].iter().zip(&kb[j]).map(|(a, b)| a * b).sum();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let n = op.dim();
    let vectors = order
        .iter()
        .map(|&c| {
            let mut x = vec![0.0; n];
            for (i, b) in basis.iter().enumerate() {
                crate::linalg::axpy(eig.eigenvectors[(i, c)], b, &mut x);
            }
            x
        })
        .collect();
    (order.iter().map(|&i| eig.eigenvalues[i]).collect(), vectors)
}

/// `‖W^{-1} K x - θ x‖_W` for `‖x‖_W = 1`.
pub fn eigen_residual(op: &WeightedOperator, x: &[f64], theta: f64) -> f64 {
    let r: Vec<f64> = op
        .apply(x)
        .iter()
        .zip(x)
        .map(|(a, b)| a - theta * b)
        .collect();
    weighted_norm(&r, &op.weights)
}

/// How an index was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMethod {
    Inertia,
    Eigensolve,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MorseIndex {
    pub index: usize,
    pub nullity: usize,
    pub zero_tol: f64,
    pub method: IndexMethod,
    /// Set when the factorization broke down and the eigensolver was used.
    pub warning: Option<String>,
}

/// Default nullity tolerance `1e-8 (1 + |λ_max|)`, with `|λ_max|` bounded by
/// Gershgorin discs.
pub fn default_zero_tol(op: &WeightedOperator) -> f64 {
    let (lo, hi) = op.spectral_bounds();
    1e-8 * (1.0 + lo.abs().max(hi.abs()))
}

/// Index and nullity of a self-adjoint weighted operator by Sylvester's law
/// of inertia: `index = #neg(H + τ)` and `nullity = #neg(H - τ) - index`.
pub fn morse_index(h: &WeightedOperator, zero_tol: Option<f64>) -> Result<MorseIndex> {
    let tol = zero_tol.unwrap_or_else(|| default_zero_tol(h));
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("zero_tol {tol}")));
    }
    let by_inertia = (|| -> Result<(usize, usize)> {
        let below = h.inertia_shifted(-tol)?.negative;
        let upto = h.inertia_shifted(tol)?.negative;
        Ok((below, upto - below))
    })();
    match by_inertia {
        Ok((index, nullity)) => Ok(MorseIndex {
            index,
            nullity,
            zero_tol: tol,
            method: IndexMethod::Inertia,
            warning: None,
        }),
        Err(e) => {
            let msg = format!("inertia failed ({e}), counted eigenvalues instead");
            warn!("{msg}");
            let (index, nullity) = count_by_eigensolve(h, tol)?;
            Ok(MorseIndex {
                index,
                nullity,
                zero_tol: tol,
                method: IndexMethod::Eigensolve,
                warning: Some(msg),
            })
        }
    }
}

/// Counts eigenvalues below `-tol` and within `tol` of zero by solving for
/// more and more of the low spectrum.
fn count_by_eigensolve(h: &WeightedOperator, tol: f64) -> Result<(usize, usize)> {
    let n = h.dim();
    let mut m = 16.min(n);
    loop {
        let spec = eigen_solve(h, m)?;
        let last = *spec.eigenvalues.last().unwrap();
        if last > tol || spec.len() >= n {
            let index = spec.eigenvalues.iter().filter(|&&l| l < -tol).count();
            let nullity = spec.eigenvalues.iter().filter(|&&l| l.abs() <= tol).count();
            return Ok((index, nullity));
        }
        if m == n {
            return Err(Error::EigenNonConvergence("spectrum exhausted".into()));
        }
        m = (2 * m).min(n);
    }
}

/// Index and nullity of the constant solution `u ≡ c` read off the spectrum
/// of `-Δ_g`: eigenvalues of the Hessian are `ελ + f'(c)`.
pub fn constant_index(prob: &Problem, c: f64, spec: &SpectrumResult) -> Result<(usize, usize)> {
    let zero = prob.potential().zero_at(c).ok_or(Error::NotAZero(c))?;
    let eps = prob.epsilon();
    let (lo, hi) = prob.neg_laplacian().spectral_bounds();
    let tol = 1e-8
        * (1.0
            + (eps * lo + zero.slope)
                .abs()
                .max((eps * hi + zero.slope).abs()));
    let threshold = (tol - zero.slope) / eps;
    if spec.largest() <= threshold {
        return Err(Error::SpectrumTooShort {
            needed: threshold,
            largest: spec.largest(),
        });
    }
    let mu = spec.eigenvalues.iter().map(|&l| eps * l + zero.slope);
    let index = mu.clone().filter(|&m| m < -tol).count();
    let nullity = mu.filter(|m| m.abs() <= tol).count();
    Ok((index, nullity))
}

/// A parameter where a constant solution degenerates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SingularPoint {
    pub epsilon: f64,
    pub c: f64,
    pub lambda: f64,
    pub multiplicity: usize,
}

/// Parameters `ε = -f'(c)/λ` in the open interval `range`, for zeros `c`
/// with `f'(c) < 0` and nonzero eigenvalues `λ` of `-Δ_g`.
pub fn singular_epsilons(
    spec: &SpectrumResult,
    p: &Potential,
    range: (f64, f64),
) -> Result<Vec<SingularPoint>> {
    let (a, b) = range;
    if !(a > 0.0 && b > a) {
        return Err(Error::InvalidArgument(format!("epsilon range ({a}, {b})")));
    }
    let scale = spec.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::new();
    for z in p.zeros().iter().filter(|z| z.slope < 0.0) {
        if spec.largest() < -z.slope / a {
            return Err(Error::SpectrumTooShort {
                needed: -z.slope / a,
                largest: spec.largest(),
            });
        }
        for (lambda, multiplicity) in spec.distinct() {
            if lambda <= CLUSTER_TOL * scale {
                continue;
            }
            let eps = -z.slope / lambda;
            if eps > a && eps < b {
                out.push(SingularPoint {
                    epsilon: eps,
                    c: z.value,
                    lambda,
                    multiplicity,
                });
            }
        }
    }
    out.sort_by(|x, y| x.epsilon.total_cmp(&y.epsilon));
    out.dedup_by(|x, y| (x.epsilon - y.epsilon).abs() <= 1e-12 * y.epsilon && x.c == y.c);
    Ok(out)
}

/// True when `ε` lies within `1e-4 ε_s` of a singular parameter.
pub fn near_singular(eps: f64, singular: &[SingularPoint]) -> Option<SingularPoint> {
    singular
        .iter()
        .copied()
        .find(|s| (eps - s.epsilon).abs() < 1e-4 * s.epsilon)
}

/// First-order change of a simple eigenvalue of the linearization
/// `εΔ_g - f'(u)` along the trace-free metric perturbation `g -> g + tA`:
/// `ε ∫ <A, ∇φ ⊗ ∇φ> dVol`.
///
/// Since that operator is `-H(u)`, the matching eigenvalue of the Hessian
/// moves at the opposite rate. `phi0` must be a `W`-normalized eigenfield of
/// `H(u)` for a simple eigenvalue.
pub fn eigenvalue_derivative(
    prob: &Problem,
    a: &SymTensorField,
    u: &ScalarField,
    phi0: &ScalarField,
) -> Result<f64> {
    let w = prob.weights();
    let norm = weighted_norm(phi0.values(), w);
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "eigenfield has norm {norm}, expected 1"
        )));
    }
    let h = prob.hessian(u)?;
    let lambda = weighted_dot(phi0.values(), &h.apply(phi0.values()), w);
    let res = eigen_residual(&h, phi0.values(), lambda);
    if res > 1e-6 * lambda.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "field is not an eigenfield (residual {res:e} at eigenvalue {lambda})"
        )));
    }
    let delta = CLUSTER_TOL * lambda.abs().max(1.0);
    let multiplicity =
        h.inertia_shifted(lambda + delta)?.negative - h.inertia_shifted(lambda - delta)?.negative;
    if multiplicity != 1 {
        return Err(Error::NonSimpleEigenvalue {
            value: lambda,
            multiplicity,
        });
    }
    Ok(prob.epsilon() * perturbation_form(a, phi0, prob.metric())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::MetricField;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn circle_problem(eps: f64, n: usize) -> Problem {
        let grid = Arc::new(TorusGrid::circle(2.0 * PI, n).unwrap());
        Problem::new(eps, MetricField::euclidean(grid), Potential::cubic()).unwrap()
    }

    fn disc(k: f64, n: usize) -> f64 {
        let h = 2.0 * PI / n as f64;
        2.0 / (h * h) * (1.0 - (k * h).cos())
    }

    #[test]
    fn circle_spectrum_matches_fourier_symbol() {
        let p = circle_problem(1.0, 256);
        let spec = eigen_solve(&p.neg_laplacian(), 5).unwrap();
        let expected = [
            0.0,
            disc(1.0, 256),
            disc(1.0, 256),
            disc(2.0, 256),
            disc(2.0, 256),
        ];
        assert_eq!(spec.len(), 5);
        for (a, b) in spec.eigenvalues.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(spec.multiplicity(1), 2);
        assert_eq!(spec.distinct().len(), 3);
    }

    #[test]
    fn iterative_solver_handles_fine_grids() {
        // ‖-Δ‖ ~ 1.7e6 here, so residuals level off far above 1e-10
        let n = 4096;
        let p = circle_problem(1.0, n);
        let spec = iterative_eigen(&p.neg_laplacian(), 6).unwrap();
        let expected = [0.0, 1.0, 1.0, 2.0, 2.0, 3.0].map(|k| disc(k, n));
        assert_eq!(spec.len(), 7);
        for (a, b) in spec.eigenvalues.iter().zip(expected) {
            assert!((a - b).abs() < 1e-8 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn cluster_is_completed() {
        let p = circle_problem(1.0, 64);
        let spec = eigen_solve(&p.neg_laplacian(), 2).unwrap();
        assert_eq!(spec.len(), 3);
    }

    #[test]
    fn eigenvectors_are_weighted_orthonormal() {
        let grid = Arc::new(TorusGrid::circle(2.0 * PI, 48).unwrap());
        let factor: Vec<f64> = (0..48)
            .map(|i| 1.0 + 0.3 * (i as f64 * 0.2).sin())
            .collect();
        let metric = MetricField::conformal(grid, &factor).unwrap();
        let p = Problem::new(1.0, metric, Potential::cubic()).unwrap();
        let op = p.neg_laplacian();
        let spec = eigen_solve(&op, 6).unwrap();
        for i in 0..spec.len() {
            assert!(eigen_residual(&op, &spec.eigenvectors[i], spec.eigenvalues[i]) < 1e-8);
            for j in 0..spec.len() {
                let d = weighted_dot(&spec.eigenvectors[i], &spec.eigenvectors[j], &op.weights);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn iterative_agrees_with_dense() {
        let grid = Arc::new(TorusGrid::new(vec![2.0 * PI, 2.0 * PI], vec![24, 20]).unwrap());
        let factor: Vec<f64> = (0..grid.node_count())
            .map(|i| {
                let x = grid.coords(i);
                1.0 + 0.2 * x[0].cos() * x[1].sin()
            })
            .collect();
        let metric = MetricField::conformal(grid, &factor).unwrap();
        let p = Problem::new(0.3, metric, Potential::cubic()).unwrap();
        let h = p.hessian_values(&vec![0.0; p.node_count()]);
        let a = dense_eigen(&h, 12).unwrap();
        let b = iterative_eigen(&h, 12).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn shift_moves_spectrum() {
        let p = circle_problem(1.0, 32);
        let op = p.neg_laplacian();
        let shifted = op.plus_multiplier(&[1.0; 32]);
        let a = eigen_solve(&op, 5).unwrap();
        let b = eigen_solve(&shifted, 5).unwrap();
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            assert!((x + 1.0 - y).abs() < 1e-10);
        }
    }

    #[test]
    fn index_of_zero_at_eps_04() {
        let p = circle_problem(0.4, 256);
        let h = p.hessian_values(&vec![0.0; 256]);
        let mi = morse_index(&h, None).unwrap();
        assert_eq!((mi.index, mi.nullity), (3, 0));
        let spec = eigen_solve(&p.neg_laplacian(), 10).unwrap();
        assert_eq!(constant_index(&p, 0.0, &spec).unwrap(), (3, 0));
        assert_eq!(constant_index(&p, 1.0, &spec).unwrap(), (0, 0));
        let p2 = p.with_epsilon(2.0).unwrap();
        assert_eq!(constant_index(&p2, 0.0, &spec).unwrap(), (1, 0));
        assert!(matches!(
            constant_index(&p, 0.5, &spec),
            Err(Error::NotAZero(_))
        ));
    }

    #[test]
    fn nullity_two_at_first_singular_parameter() {
        let n = 128;
        let p = circle_problem(1.0 / disc(1.0, n), n);
        let mi = morse_index(&p.hessian_values(&vec![0.0; n]), None).unwrap();
        assert_eq!((mi.index, mi.nullity), (1, 2));
    }

    #[test]
    fn short_spectrum_is_rejected() {
        let p = circle_problem(0.01, 64);
        let spec = eigen_solve(&p.neg_laplacian(), 3).unwrap();
        assert!(matches!(
            constant_index(&p, 0.0, &spec),
            Err(Error::SpectrumTooShort { .. })
        ));
    }

    #[test]
    fn singular_set_of_cubic_on_circle() {
        let n = 256;
        let p = circle_problem(1.0, n);
        let spec = eigen_solve(&p.neg_laplacian(), 30).unwrap();
        let s = singular_epsilons(&spec, &Potential::cubic(), (0.1, 10.0)).unwrap();
        let eps: Vec<f64> = s.iter().map(|s| s.epsilon).collect();
        let expected = [1.0 / disc(3.0, n), 1.0 / disc(2.0, n), 1.0 / disc(1.0, n)];
        assert_eq!(eps.len(), 3);
        for (a, b) in eps.iter().zip(expected) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(singular_epsilons(&spec, &Potential::cubic(), (2.0, 10.0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn derivative_vanishes_for_constant_mode_and_zero_tensor() {
        let grid = Arc::new(TorusGrid::new(vec![2.0 * PI, 2.0 * PI], vec![16, 16]).unwrap());
        let metric = MetricField::euclidean(grid.clone());
        let p = Problem::new(0.5, metric, Potential::cubic()).unwrap();
        let vol = (2.0 * PI).powi(2);
        let phi = ScalarField::constant(grid.clone(), 1.0 / vol.sqrt());
        let u = ScalarField::constant(grid.clone(), 0.0);
        let a = SymTensorField::uniform(grid.clone(), &[0.3, 0.0, 0.0, -0.3]).unwrap();
        assert!(eigenvalue_derivative(&p, &a, &u, &phi).unwrap().abs() < 1e-14);
        let z = SymTensorField::zeros(grid.clone());
        assert_eq!(eigenvalue_derivative(&p, &z, &u, &phi).unwrap(), 0.0);
    }

    #[test]
    fn derivative_rejects_repeated_eigenvalue() {
        let grid = Arc::new(TorusGrid::new(vec![2.0 * PI, 2.0 * PI], vec![16, 16]).unwrap());
        let metric = MetricField::euclidean(grid.clone());
        let p = Problem::new(0.5, metric, Potential::cubic()).unwrap();
        let phi = ScalarField::from_fn(grid.clone(), |x| x[0].cos() / (PI * 2f64.sqrt()));
        let u = ScalarField::constant(grid.clone(), 0.0);
        let a = SymTensorField::uniform(grid.clone(), &[0.3, 0.0, 0.0, -0.3]).unwrap();
        assert!(matches!(
            eigenvalue_derivative(&p, &a, &u, &phi),
            Err(Error::NonSimpleEigenvalue {
                multiplicity: 4,
                ..
            })
        ));
    }
}
