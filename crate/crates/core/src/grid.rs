//! Periodic grids on flat tori, metric fields, and the discrete
//! Laplace-Beltrami operator.
//!
//! The operator is assembled from a discrete Dirichlet form
//!
//! ```text
//! a(u, v) = sum_x vol * [ sum_i c_i(x + e_i/2) D_i^+ u D_i^+ v
//!                       + sum_{i != j} C_ij(x) D_i^0 u D_j^0 v ]
//! ```
//!
//! where `C = sqrt(det g) g^{-1}` is the flux coefficient, `c_i` its diagonal
//! averaged to half nodes, `D^+` forward and `D^0` centered differences. With
//! `S` the matrix of `a` and `W = sqrt(det g) vol` the nodal weights, the
//! discrete Laplacian is `-W^{-1} S`. It is exactly self-adjoint in the
//! weighted inner product and annihilates constants. Because `a` is linear in
//! `C`, the metric derivative of the assembly is the same form evaluated at
//! `dC`, which is what [`apply_perturbed_laplacian`] assembles.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, WeightedOperator};

/// Pointwise trace-free tolerance for perturbation tensors.
pub const TRACE_FREE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TorusGrid {
    lengths: Vec<f64>,
    sizes: Vec<usize>,
}

impl TorusGrid {
    pub fn new(lengths: Vec<f64>, sizes: Vec<usize>) -> Result<Self> {
        let d = lengths.len();
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidGrid(format!("dimension {d} not in 1..=3")));
        }
        if sizes.len() != d {
            return Err(Error::InvalidGrid(format!(
                "{} lengths but {} sizes",
                d,
                sizes.len()
            )));
        }
        if let Some(l) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidGrid(format!("non-positive period {l}")));
        }
        if let Some(n) = sizes.iter().find(|&&n| n < 4) {
            return Err(Error::InvalidGrid(format!(
                "{n} nodes per axis, need at least 4"
            )));
        }
        Ok(Self { lengths, sizes })
    }

    /// The circle of length `length` with `n` nodes.
    pub fn circle(length: f64, n: usize) -> Result<Self> {
        Self::new(vec![length], vec![n])
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.sizes[axis] as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.spacing(a)).collect()
    }

    pub fn node_count(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Product of the spacings.
    pub fn cell_volume(&self) -> f64 {
        self.spacings().iter().product()
    }

    /// Lexicographic multi-index, first axis slowest.
    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        let mut rem = node;
        for a in (0..self.dim()).rev() {
            idx[a] = rem % self.sizes[a];
            rem /= self.sizes[a];
        }
        idx
    }

    pub fn node(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&i, &n)| acc * n + i % n)
    }

    /// Periodic neighbor of `node` shifted by `step` along `axis`.
    pub fn neighbor(&self, node: usize, axis: usize, step: isize) -> usize {
        let mut idx = self.multi_index(node);
        let n = self.sizes[axis] as isize;
        idx[axis] = (idx[axis] as isize + step).rem_euclid(n) as usize;
        self.node(&idx)
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .enumerate()
            .map(|(a, &i)| i as f64 * self.spacing(a))
            .collect()
    }
}

/// Per-node symmetric positive definite metric tensors.
#[derive(Debug, Clone)]
pub struct MetricField {
    grid: Arc<TorusGrid>,
    /// Row-major `d x d` blocks, one per node.
    tensors: Vec<f64>,
    sqrt_det: Vec<f64>,
    inverse: Vec<f64>,
}

impl MetricField {
    pub fn euclidean(grid: Arc<TorusGrid>) -> Self {
        let d = grid.dim();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let tensors = eye.repeat(grid.node_count());
        Self::from_tensors(grid, tensors).expect("identity is SPD")
    }

    /// Conformally flat metric `g(x) = factor(x) I`.
    pub fn conformal(grid: Arc<TorusGrid>, factor: &[f64]) -> Result<Self> {
        let d = grid.dim();
        if factor.len() != grid.node_count() {
            return Err(Error::GridMismatch);
        }
        let mut tensors = vec![0.0; d * d * factor.len()];
        for (n, &c) in factor.iter().enumerate() {
            for i in 0..d {
                tensors[n * d * d + i * d + i] = c;
            }
        }
        Self::from_tensors(grid, tensors)
    }

    /// Builds a metric from row-major `d x d` tensors, rejecting the first
    /// node where the tensor is not symmetric positive definite.
    pub fn from_tensors(grid: Arc<TorusGrid>, tensors: Vec<f64>) -> Result<Self> {
        let d = grid.dim();
        let n = grid.node_count();
        if tensors.len() != d * d * n {
            return Err(Error::GridMismatch);
        }
        let mut sqrt_det = Vec::with_capacity(n);
        let mut inverse = Vec::with_capacity(d * d * n);
        for node in 0..n {
            let block = &tensors[node * d * d..(node + 1) * d * d];
            let m = DMatrix::from_row_slice(d, d, block);
            let asym = (&m - m.transpose()).abs().max();
            if asym > 1e-12 * m.abs().max().max(1.0) {
                return Err(Error::MetricNotSpd {
                    node,
                    min_eig: f64::NAN,
                });
            }
            let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
            if !(min_eig > 0.0) || !block.iter().all(|v| v.is_finite()) {
                return Err(Error::MetricNotSpd { node, min_eig });
            }
            sqrt_det.push(m.determinant().sqrt());
            let inv = m
                .try_inverse()
                .ok_or(Error::MetricNotSpd { node, min_eig })?;
            for i in 0..d {
                for j in 0..d {
                    inverse.push(0.5 * (inv[(i, j)] + inv[(j, i)]));
                }
            }
        }
        Ok(Self {
            grid,
            tensors,
            sqrt_det,
            inverse,
        })
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn tensor(&self, node: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.tensors[node * d * d..(node + 1) * d * d]
    }

    pub fn inverse(&self, node: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.inverse[node * d * d..(node + 1) * d * d]
    }

    pub fn sqrt_det(&self) -> &[f64] {
        &self.sqrt_det
    }

    /// Nodal quadrature weights `sqrt(det g) prod h_i`.
    pub fn weights(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        self.sqrt_det.iter().map(|s| s * vol).collect()
    }

    /// Random conformal metric `g = exp(a ξ) I`, deterministic in `seed`.
    ///
    /// With `max_wavenumber = Some(k)`, `ξ` is a random trigonometric
    /// polynomial with wavenumbers up to `k` per axis scaled to
    /// `max |ξ| = 1`. With `None`, `ξ` is independent uniform noise on
    /// `[-1, 1]` at every node. On a circle every smooth metric is a
    /// reparametrization of the round one, so only the nodal variant breaks
    /// the rotation symmetry of the discrete problem.
    pub fn random_conformal(
        grid: Arc<TorusGrid>,
        amplitude: f64,
        seed: u64,
        max_wavenumber: Option<u32>,
    ) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        if !amplitude.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "metric amplitude {amplitude}"
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = grid.dim();
        let xi: Vec<f64> = match max_wavenumber {
            None => (0..grid.node_count())
                .map(|_| rng.gen_range(-1.0..=1.0))
                .collect(),
            Some(kmax) => {
                let kmax = i64::from(kmax);
                let modes: Vec<(Vec<f64>, f64, f64)> = (0..8)
                    .map(|_| {
                        let k = (0..d).map(|_| rng.gen_range(-kmax..=kmax) as f64).collect();
                        (
                            k,
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect();
                let raw: Vec<f64> = (0..grid.node_count())
                    .map(|node| {
                        let x = grid.coords(node);
                        modes
                            .iter()
                            .map(|(k, a, p)| {
                                let arg: f64 = (0..d)
                                    .map(|i| std::f64::consts::TAU * k[i] * x[i] / grid.lengths[i])
                                    .sum();
                                a * (arg + p).cos()
                            })
                            .sum()
                    })
                    .collect();
                let s = raw
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()))
                    .max(f64::MIN_POSITIVE);
                raw.iter().map(|v| v / s).collect()
            }
        };
        let factor: Vec<f64> = xi.iter().map(|v| (amplitude * v).exp()).collect();
        Self::conformal(grid, &factor)
    }

    /// Returns `g + t A`.
    pub fn perturbed(&self, a: &SymTensorField, t: f64) -> Result<Self> {
        check_same_grid(&self.grid, &a.grid)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&a.values)
            .map(|(g, a)| g + t * a)
            .collect();
        Self::from_tensors(self.grid.clone(), tensors)
    }

    /// Flux coefficient `sqrt(det g) g^{-1}` at every node.
    fn flux_coefficients(&self) -> Vec<f64> {
        let d = self.grid.dim();
        self.inverse
            .chunks(d * d)
            .zip(&self.sqrt_det)
            .flat_map(|(inv, s)| inv.iter().map(move |v| v * s))
            .collect()
    }
}

/// A real value per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<TorusGrid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<TorusGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::GridMismatch);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at node {i}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Arc<TorusGrid>, c: f64) -> Self {
        let n = grid.node_count();
        Self {
            grid,
            values: vec![c; n],
        }
    }

    pub fn from_fn(grid: Arc<TorusGrid>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.node_count()).map(|n| f(&grid.coords(n))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Wraps values already known to match the grid.
    pub(crate) fn from_parts(grid: Arc<TorusGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.grid.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn sup_norm(&self) -> f64 {
        crate::linalg::sup_norm(&self.values)
    }
}

/// Per-node symmetric `d x d` tensors, used as first order metric
/// perturbations.
#[derive(Debug, Clone)]
pub struct SymTensorField {
    grid: Arc<TorusGrid>,
    values: Vec<f64>,
    trace_free: bool,
}

impl SymTensorField {
    pub fn new(grid: Arc<TorusGrid>, values: Vec<f64>) -> Result<Self> {
        let d = grid.dim();
        if values.len() != d * d * grid.node_count() {
            return Err(Error::GridMismatch);
        }
        for (node, block) in values.chunks(d * d).enumerate() {
            for i in 0..d {
                for j in 0..i {
                    if (block[i * d + j] - block[j * d + i]).abs() > 1e-14 {
                        return Err(Error::InvalidArgument(format!(
                            "tensor not symmetric at node {node}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            grid,
            values,
            trace_free: false,
        })
    }

    /// Same tensor at every node.
    pub fn uniform(grid: Arc<TorusGrid>, block: &[f64]) -> Result<Self> {
        let values = block.repeat(grid.node_count());
        Self::new(grid, values)
    }

    pub fn zeros(grid: Arc<TorusGrid>) -> Self {
        let d = grid.dim();
        let values = vec![0.0; d * d * grid.node_count()];
        Self {
            grid,
            values,
            trace_free: true,
        }
    }

    /// Checks `|Tr_g A| <= 1e-12` at every node and sets the flag.
    pub fn into_trace_free(mut self, metric: &MetricField) -> Result<Self> {
        check_same_grid(&self.grid, &metric.grid)?;
        for node in 0..self.grid.node_count() {
            let trace = self.metric_trace(metric, node);
            if trace.abs() > TRACE_FREE_TOL {
                return Err(Error::NotTraceFree { node, trace });
            }
        }
        self.trace_free = true;
        Ok(self)
    }

    /// Removes the `g`-trace at every node: `A - (Tr_g A / d) g`.
    pub fn trace_free_part(&self, metric: &MetricField) -> Result<Self> {
        check_same_grid(&self.grid, &metric.grid)?;
        let d = self.grid.dim();
        let mut values = self.values.clone();
        for node in 0..self.grid.node_count() {
            let trace = self.metric_trace(metric, node);
            let g = metric.tensor(node);
            for k in 0..d * d {
                values[node * d * d + k] -= trace / d as f64 * g[k];
            }
        }
        Self::new(self.grid.clone(), values)?.into_trace_free(metric)
    }

    pub fn is_trace_free(&self) -> bool {
        self.trace_free
    }

    pub fn block(&self, node: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.values[node * d * d..(node + 1) * d * d]
    }

    fn metric_trace(&self, metric: &MetricField, node: usize) -> f64 {
        let inv = metric.inverse(node);
        self.block(node).iter().zip(inv).map(|(a, g)| a * g).sum()
    }
}

fn check_same_grid(a: &TorusGrid, b: &TorusGrid) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// Matrix of the discrete Dirichlet form for a per-node coefficient tensor
/// field `coef` (row-major `d x d` blocks).
fn dirichlet_form(grid: &TorusGrid, coef: &[f64]) -> CsrMatrix {
    let d = grid.dim();
    let n = grid.node_count();
    let vol = grid.cell_volume();
    let h = grid.spacings();
    let mut t = Vec::with_capacity(n * (4 * d + 8 * d * d));
    for x in 0..n {
        for i in 0..d {
            let y = grid.neighbor(x, i, 1);
            let c = 0.5 * (coef[x * d * d + i * d + i] + coef[y * d * d + i * d + i]);
            let w = vol * c / (h[i] * h[i]);
            t.push((x, x, w));
            t.push((y, y, w));
            t.push((x, y, -w));
            t.push((y, x, -w));
        }
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let c = coef[x * d * d + i * d + j];
                let w = vol * c / (4.0 * h[i] * h[j]);
                let a = [
                    (grid.neighbor(x, i, 1), 1.0),
                    (grid.neighbor(x, i, -1), -1.0),
                ];
                let b = [
                    (grid.neighbor(x, j, 1), 1.0),
                    (grid.neighbor(x, j, -1), -1.0),
                ];
                // symmetrized: w (a b^T + b a^T) / 2 for each ordered pair (i, j)
                for &(p, sp) in &a {
                    for &(q, sq) in &b {
                        t.push((p, q, 0.5 * w * sp * sq));
                        t.push((q, p, 0.5 * w * sp * sq));
                    }
                }
            }
        }
    }
    CsrMatrix::from_triplets(n, &t)
}

/// Assembles `Δ_g` in flux form. The result is negative semidefinite and
/// self-adjoint in the `sqrt(det g)`-weighted inner product.
pub fn assemble_laplace_beltrami(
    grid: &TorusGrid,
    metric: &MetricField,
) -> Result<WeightedOperator> {
    check_same_grid(grid, &metric.grid)?;
    let s = dirichlet_form(grid, &metric.flux_coefficients());
    Ok(WeightedOperator::new(s.scaled(-1.0), metric.weights()))
}

/// `sum_x field(x) sqrt(det g(x)) prod h_i`.
pub fn weighted_integral(field: &ScalarField, metric: &MetricField) -> Result<f64> {
    check_same_grid(&field.grid, &metric.grid)?;
    Ok(field
        .values
        .iter()
        .zip(metric.weights())
        .map(|(v, w)| v * w)
        .sum())
}

/// Flux coefficient of the perturbation term: `sqrt(det g) g^{-1} A g^{-1}`.
fn perturbation_coefficients(a: &SymTensorField, metric: &MetricField) -> Vec<f64> {
    let d = metric.grid.dim();
    let n = metric.grid.node_count();
    let mut out = Vec::with_capacity(d * d * n);
    for node in 0..n {
        let gi = DMatrix::from_row_slice(d, d, metric.inverse(node));
        let am = DMatrix::from_row_slice(d, d, a.block(node));
        let c = &gi * am * &gi * metric.sqrt_det[node];
        for i in 0..d {
            for j in 0..d {
                out.push(0.5 * (c[(i, j)] + c[(j, i)]));
            }
        }
    }
    out
}

/// Discrete `-∇·(A∇φ)` for a trace-free perturbation `A`, equal to the
/// derivative of the assembled Laplacian along `g -> g + tA` at `t = 0`.
pub fn apply_perturbed_laplacian(
    a: &SymTensorField,
    phi: &ScalarField,
    metric: &MetricField,
) -> Result<ScalarField> {
    check_same_grid(&a.grid, &metric.grid)?;
    check_same_grid(&phi.grid, &metric.grid)?;
    if !a.trace_free {
        // Flag may be unset on a tensor that happens to be trace-free.
        a.clone().into_trace_free(metric)?;
    }
    let p = dirichlet_form(&metric.grid, &perturbation_coefficients(a, metric));
    let w = metric.weights();
    let values = p
        .mul_vec(&phi.values)
        .into_iter()
        .zip(&w)
        .map(|(v, w)| v / w)
        .collect();
    Ok(ScalarField::from_parts(phi.grid.clone(), values))
}

/// Discrete `∫ <A, ∇φ ⊗ ∇φ> dVol`, the quadratic form of
/// [`apply_perturbed_laplacian`].
pub fn perturbation_form(
    a: &SymTensorField,
    phi: &ScalarField,
    metric: &MetricField,
) -> Result<f64> {
    let out = apply_perturbed_laplacian(a, phi, metric)?;
    Ok(crate::linalg::weighted_dot(
        &phi.values,
        &out.values,
        &metric.weights(),
    ))
}
