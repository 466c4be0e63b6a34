//! Sparse symmetric storage, envelope LDLᵀ, and the weighted operator type
//! shared by the grid, operator and spectrum modules.

mod ldlt;
mod sparse;

pub use ldlt::{reverse_cuthill_mckee, Inertia, Ldlt};
pub use sparse::CsrMatrix;

use crate::error::Result;

/// A linear operator `W^{-1} K` with `K` symmetric and `W` a positive
/// diagonal. It is self-adjoint in the inner product `<u, v> = sum u v W`.
///
/// Every operator in this crate (Laplace-Beltrami, Hessians, IMEX systems)
/// has this form with `W` the nodal volume weights.
#[derive(Debug, Clone)]
pub struct WeightedOperator {
    pub matrix: CsrMatrix,
    pub weights: Vec<f64>,
}

impl WeightedOperator {
    pub fn new(matrix: CsrMatrix, weights: Vec<f64>) -> Self {
        assert_eq!(matrix.dim(), weights.len());
        Self { matrix, weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut y = self.matrix.mul_vec(u);
        for (y, w) in y.iter_mut().zip(&self.weights) {
            *y /= w;
        }
        y
    }

    /// `s * self`.
    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.matrix.scaled(s), self.weights.clone())
    }

    /// `self + diag(m)` as a multiplication operator.
    pub fn plus_multiplier(&self, m: &[f64]) -> Self {
        let d: Vec<f64> = m.iter().zip(&self.weights).map(|(m, w)| m * w).collect();
        Self::new(self.matrix.plus_diagonal(&d), self.weights.clone())
    }

    /// Matrix of `self - shift * I` in stiffness form, `K - shift W`.
    pub fn shifted_matrix(&self, shift: f64) -> CsrMatrix {
        let d: Vec<f64> = self.weights.iter().map(|w| -shift * w).collect();
        self.matrix.plus_diagonal(&d)
    }

    /// Spectrum enclosure `[lo, hi]` from Gershgorin discs.
    pub fn spectral_bounds(&self) -> (f64, f64) {
        self.matrix.gershgorin_weighted(&self.weights)
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        weighted_dot(u, v, &self.weights)
    }

    /// Inertia of `self - shift * I`.
    pub fn inertia_shifted(&self, shift: f64) -> Result<Inertia> {
        Ok(Ldlt::factor(&self.shifted_matrix(shift))?.inertia())
    }
}

pub fn weighted_dot(u: &[f64], v: &[f64], w: &[f64]) -> f64 {
    u.iter().zip(v).zip(w).map(|((a, b), w)| a * b * w).sum()
}

pub fn weighted_norm(u: &[f64], w: &[f64]) -> f64 {
    weighted_dot(u, u, w).sqrt()
}

pub fn sup_norm(u: &[f64]) -> f64 {
    u.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}
