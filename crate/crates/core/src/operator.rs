//! The Allen-Cahn residual `R(u) = -εΔ_g u + f(u)`, the energy whose
//! weighted gradient it is, and the Hessian `H(u) = -εΔ_g + f'(u)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{assemble_laplace_beltrami, MetricField, ScalarField, TorusGrid};
use crate::linalg::{CsrMatrix, WeightedOperator};
use crate::potential::Potential;

/// A fixed `(ε, g, f)` triple with the Laplacian assembled once.
#[derive(Debug, Clone)]
pub struct Problem {
    epsilon: f64,
    metric: Arc<MetricField>,
    potential: Arc<Potential>,
    /// `Δ_g` in weighted form: matrix `-S`, weights `W`.
    laplacian: Arc<WeightedOperator>,
    /// The stiffness `S` of `-Δ_g`.
    stiffness: Arc<CsrMatrix>,
}

impl Problem {
    pub fn new(epsilon: f64, metric: MetricField, potential: Potential) -> Result<Self> {
        check_epsilon(epsilon)?;
        let laplacian = assemble_laplace_beltrami(metric.grid(), &metric)?;
        let stiffness = laplacian.matrix.scaled(-1.0);
        Ok(Self {
            epsilon,
            metric: Arc::new(metric),
            potential: Arc::new(potential),
            laplacian: Arc::new(laplacian),
            stiffness: Arc::new(stiffness),
        })
    }

    /// Same geometry and potential at another `ε`; the assembly is shared.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self {
            epsilon,
            ..self.clone()
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        self.metric.grid()
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn laplacian(&self) -> &WeightedOperator {
        &self.laplacian
    }

    /// `-Δ_g` as a weighted operator.
    pub fn neg_laplacian(&self) -> WeightedOperator {
        WeightedOperator::new((*self.stiffness).clone(), self.weights().to_vec())
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn weights(&self) -> &[f64] {
        &self.laplacian.weights
    }

    pub fn node_count(&self) -> usize {
        self.weights().len()
    }

    pub fn field(&self, values: Vec<f64>) -> Result<ScalarField> {
        ScalarField::new(self.grid().clone(), values)
    }

    pub fn residual(&self, u: &ScalarField) -> Result<ScalarField> {
        self.check(u)?;
        Ok(ScalarField::from_parts(
            self.grid().clone(),
            self.residual_values(u.values()),
        ))
    }

    pub fn energy(&self, u: &ScalarField) -> Result<f64> {
        self.check(u)?;
        Ok(self.energy_values(u.values()))
    }

    pub fn hessian(&self, u: &ScalarField) -> Result<WeightedOperator> {
        self.check(u)?;
        Ok(self.hessian_values(u.values()))
    }

    /// `R(u)` on raw nodal values.
    pub fn residual_values(&self, u: &[f64]) -> Vec<f64> {
        let mut r = self.stiffness.mul_vec(u);
        let p = &self.potential;
        for ((r, w), &ui) in r.iter_mut().zip(self.weights()).zip(u) {
            *r = self.epsilon * *r / w + p.f(ui);
        }
        r
    }

    /// `W R(u)`, the residual in stiffness form.
    pub fn weighted_residual(&self, u: &[f64]) -> Vec<f64> {
        let mut r = self.stiffness.mul_vec(u);
        let p = &self.potential;
        for ((r, w), &ui) in r.iter_mut().zip(self.weights()).zip(u) {
            *r = self.epsilon * *r + w * p.f(ui);
        }
        r
    }

    /// Weighted `L²` norm of `R(u)`.
    pub fn residual_norm(&self, u: &[f64]) -> f64 {
        crate::linalg::weighted_norm(&self.residual_values(u), self.weights())
    }

    pub fn energy_values(&self, u: &[f64]) -> f64 {
        let su = self.stiffness.mul_vec(u);
        let grad: f64 = u.iter().zip(&su).map(|(a, b)| a * b).sum();
        let pot: f64 = u
            .iter()
            .zip(self.weights())
            .map(|(&ui, w)| self.potential.F(ui) * w)
            .sum();
        0.5 * self.epsilon * grad + pot
    }

    pub fn hessian_values(&self, u: &[f64]) -> WeightedOperator {
        let d: Vec<f64> = u
            .iter()
            .zip(self.weights())
            .map(|(&ui, w)| self.potential.fprime(ui) * w)
            .collect();
        WeightedOperator::new(
            self.stiffness.scaled(self.epsilon).plus_diagonal(&d),
            self.weights().to_vec(),
        )
    }

    fn check(&self, u: &ScalarField) -> Result<()> {
        if u.grid().as_ref() == self.grid().as_ref() {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::weighted_dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn circle_problem(eps: f64, n: usize) -> Problem {
        let grid = Arc::new(TorusGrid::circle(2.0 * PI, n).unwrap());
        Problem::new(eps, MetricField::euclidean(grid), Potential::cubic()).unwrap()
    }

    #[test]
    fn constants_at_zeros_solve() {
        let p = circle_problem(0.7, 32);
        for c in [-1.0, 0.0, 1.0] {
            let r = p
                .residual(&ScalarField::constant(p.grid().clone(), c))
                .unwrap();
            assert!(r.sup_norm() < 1e-14);
        }
        let r = p
            .residual(&ScalarField::constant(p.grid().clone(), 0.5))
            .unwrap();
        assert!(r.values().iter().all(|v| (v + 0.375).abs() < 1e-14));
    }

    #[test]
    fn energy_of_constants() {
        let p = circle_problem(0.3, 64);
        let one = ScalarField::constant(p.grid().clone(), 1.0);
        let zero = ScalarField::constant(p.grid().clone(), 0.0);
        assert!(p.energy(&one).unwrap().abs() < 1e-14);
        assert!((p.energy(&zero).unwrap() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn odd_potential_gives_odd_residual_and_even_hessian() {
        let p = circle_problem(0.4, 40);
        let u = ScalarField::from_fn(p.grid().clone(), |x| {
            0.7 * x[0].sin() + 0.2 * (3.0 * x[0]).cos()
        });
        let m = u.map(|v| -v);
        let r = p.residual(&u).unwrap();
        let rm = p.residual(&m).unwrap();
        assert!(r.values().iter().zip(rm.values()).all(|(a, b)| a == &-b));
        assert_eq!(p.hessian(&u).unwrap().matrix, p.hessian(&m).unwrap().matrix);
        assert_eq!(p.energy(&u).unwrap(), p.energy(&m).unwrap());
    }

    #[test]
    fn energy_gradient_is_residual() {
        let p = circle_problem(0.5, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = 1e-5;
        let plus: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + t * b).collect();
        let minus: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - t * b).collect();
        let fd = (p.energy_values(&plus) - p.energy_values(&minus)) / (2.0 * t);
        let exact = weighted_dot(&p.residual_values(&u), &v, p.weights());
        assert!(
            (fd - exact).abs() <= 1e-6 * exact.abs().max(1.0),
            "{fd} vs {exact}"
        );
    }

    #[test]
    fn hessian_linearizes_residual() {
        let p = circle_problem(0.5, 30);
        let u: Vec<f64> = (0..30).map(|i| (i as f64 * 0.4).sin()).collect();
        let v: Vec<f64> = (0..30).map(|i| (i as f64 * 0.9).cos()).collect();
        let hv = p.hessian_values(&u).apply(&v);
        let mut errs = Vec::new();
        for t in [1e-3, 5e-4] {
            let up: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + t * b).collect();
            let rp = p.residual_values(&up);
            let r0 = p.residual_values(&u);
            let err = rp
                .iter()
                .zip(&r0)
                .zip(&hv)
                .map(|((a, b), h)| ((a - b) / t - h).abs())
                .fold(0.0f64, f64::max);
            errs.push(err);
        }
        // first order in t
        let ratio = errs[0] / errs[1];
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn hessian_at_one_is_positive_definite() {
        let p = circle_problem(0.2, 32);
        let h = p.hessian_values(&[1.0; 32]);
        let inertia = crate::linalg::Ldlt::factor(&h.matrix).unwrap().inertia();
        assert_eq!(inertia.positive, 32);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let p = circle_problem(1.0, 16);
        assert!(p.with_epsilon(0.0).is_err());
        assert!(p.with_epsilon(f64::NAN).is_err());
    }
}
