//! Polynomial nonlinearities `f`, their primitives, and the zero structure
//! that drives the index and homology computations.

use crate::error::{Error, Result};

/// Smallest admissible `|f'(c)|` at a zero.
pub const NONDEGENERACY_TOL: f64 = 1e-8;

/// One zero of `f` and the sign of `f'` there.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Zero {
    pub value: f64,
    pub slope: f64,
}

impl Zero {
    /// `+1` for stable zeros (`f' > 0`), `-1` otherwise.
    pub fn sign(&self) -> i8 {
        if self.slope > 0.0 {
            1
        } else {
            -1
        }
    }
}

/// An admissible potential: a polynomial of odd degree with positive leading
/// coefficient whose real zeros are all simple.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    /// `f(t) = sum coeffs[k] t^k`.
    coeffs: Vec<f64>,
    /// Coefficients of the normalized primitive `F`.
    primitive: Vec<f64>,
    zeros: Vec<Zero>,
    t0: f64,
    is_odd: bool,
}

impl Potential {
    /// `f(u) = u^3 - u`, with `F(u) = (u^2 - 1)^2 / 4`.
    pub fn cubic() -> Self {
        Self::from_coeffs(vec![0.0, -1.0, 0.0, 1.0]).expect("cubic is admissible")
    }

    /// `f(u) = u (u^2 - 1)(u^2 - 4) / 4`, zeros at `-2, -1, 0, 1, 2`.
    pub fn quintic() -> Self {
        Self::from_coeffs(vec![0.0, 1.0, 0.0, -1.25, 0.0, 0.25]).expect("quintic is admissible")
    }

    pub fn from_coeffs(mut coeffs: Vec<f64>) -> Result<Self> {
        while coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InadmissiblePotential(
                "non-finite coefficient".into(),
            ));
        }
        let degree = coeffs.len().saturating_sub(1);
        if degree.is_multiple_of(2) || degree < 1 {
            return Err(Error::InadmissiblePotential(format!(
                "degree {degree} is not odd"
            )));
        }
        if coeffs[degree] <= 0.0 {
            return Err(Error::InadmissiblePotential(
                "leading coefficient must be positive".into(),
            ));
        }
        let zeros = classify(&coeffs)?;
        let t0 = zeros.iter().fold(0.0f64, |a, z| a.max(z.value.abs()));
        let mut primitive = vec![0.0];
        primitive.extend(coeffs.iter().enumerate().map(|(k, c)| c / (k + 1) as f64));
        // Normalize so that F vanishes at its lowest zero of f.
        let min_at_zero = zeros
            .iter()
            .map(|z| horner(&primitive, z.value))
            .fold(f64::INFINITY, f64::min);
        primitive[0] -= min_at_zero;
        let is_odd = coeffs.iter().step_by(2).all(|&c| c == 0.0);
        let p = Self {
            coeffs,
            primitive,
            zeros,
            t0,
            is_odd,
        };
        p.check_far_field()?;
        Ok(p)
    }

    fn check_far_field(&self) -> Result<()> {
        let reach = 2.0 * self.t0.max(1.0);
        let samples = 2000;
        for k in 1..=samples {
            let t = self.t0 + (reach - self.t0) * k as f64 / samples as f64;
            if self.f(t) <= 0.0 || self.f(-t) >= 0.0 {
                return Err(Error::InadmissiblePotential(format!(
                    "f(t) sign(t) <= 0 at |t| = {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn f(&self, t: f64) -> f64 {
        horner(&self.coeffs, t)
    }

    pub fn fprime(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for (k, c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * t + k as f64 * c;
        }
        acc
    }

    #[allow(non_snake_case)]
    pub fn F(&self, t: f64) -> f64 {
        horner(&self.primitive, t)
    }

    /// Zeros `c_1 < ... < c_{2n+1}`; slopes alternate starting with `+`.
    pub fn zeros(&self) -> &[Zero] {
        &self.zeros
    }

    /// `max |c_k|`.
    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// True when `f(-t) = -f(t)`.
    pub fn is_odd(&self) -> bool {
        self.is_odd
    }

    /// `max |f'|` over `[-T0, T0]`, from the endpoints and the critical
    /// points of `f'`.
    pub fn fprime_sup(&self) -> f64 {
        self.fprime_extreme(|v| v.abs())
    }

    /// `max f'` over `[-T0, T0]`.
    pub fn fprime_max(&self) -> f64 {
        self.fprime_extreme(|v| v)
    }

    fn fprime_extreme(&self, key: impl Fn(f64) -> f64) -> f64 {
        let t0 = self.t0.max(f64::MIN_POSITIVE);
        self.fprime_candidates(-t0, t0)
            .map(key)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(min f', max f')` over the interval between `a` and `b`.
    pub fn fprime_range(&self, a: f64, b: f64) -> (f64, f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        self.fprime_candidates(lo, hi)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), v| {
                (mn.min(v), mx.max(v))
            })
    }

    /// `f'` at the endpoints and at the critical points of `f'` inside.
    fn fprime_candidates(&self, lo: f64, hi: f64) -> impl Iterator<Item = f64> + '_ {
        let d2: Vec<f64> = self
            .coeffs
            .iter()
            .enumerate()
            .skip(2)
            .map(|(k, c)| (k * (k - 1)) as f64 * c)
            .collect();
        let roots = if lo < hi {
            real_roots(&d2, lo, hi)
        } else {
            Vec::new()
        };
        [lo, hi].into_iter().chain(roots).map(|t| self.fprime(t))
    }

    /// True when `c` is one of the zeros, to `1e-10`.
    pub fn zero_at(&self, c: f64) -> Option<Zero> {
        self.zeros
            .iter()
            .copied()
            .find(|z| (z.value - c).abs() <= 1e-10 * (1.0 + c.abs()))
    }
}

/// Evaluates `sum c_k t^k`.
fn horner(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * t + ck)
}

fn derivative(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(k, ck)| k as f64 * ck)
        .collect()
}

/// Cauchy bound on the moduli of the roots.
fn root_bound(c: &[f64]) -> f64 {
    let lead = *c.last().unwrap();
    1.0 + c[..c.len() - 1]
        .iter()
        .fold(0.0f64, |a, x| a.max((x / lead).abs()))
}

/// Real roots of the polynomial `c` in `[lo, hi]`, found by isolating them
/// between consecutive critical points (recursively) and bisecting.
fn real_roots(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut c = c.to_vec();
    while c.last() == Some(&0.0) {
        c.pop();
    }
    if c.len() <= 1 {
        return Vec::new();
    }
    if c.len() == 2 {
        let r = -c[0] / c[1];
        return if (lo..=hi).contains(&r) {
            vec![r]
        } else {
            Vec::new()
        };
    }
    let mut knots = vec![lo];
    knots.extend(real_roots(&derivative(&c), lo, hi));
    knots.push(hi);
    let mut roots: Vec<f64> = Vec::new();
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (horner(&c, a), horner(&c, b));
        let r = if fa == 0.0 {
            Some(a)
        } else if fb == 0.0 {
            Some(b)
        } else if fa.signum() != fb.signum() {
            Some(bisect(&c, a, b))
        } else {
            // Touching root at a critical point: the polynomial is tangent
            // to zero there. Report it so degeneracy is caught upstream.
            let (m, fm) = if fa.abs() < fb.abs() {
                (a, fa)
            } else {
                (b, fb)
            };
            let scale =
                c.iter().fold(0.0f64, |s, x| s.max(x.abs())) * (1.0 + m.abs()).powi(c.len() as i32);
            (fm.abs() <= 1e-12 * scale && m != lo && m != hi).then_some(m)
        };
        if let Some(r) = r {
            if roots
                .last()
                .is_none_or(|&p| (r - p).abs() > 1e-12 * (1.0 + r.abs()))
            {
                roots.push(r);
            }
        }
    }
    roots
}

fn bisect(c: &[f64], mut a: f64, mut b: f64) -> f64 {
    let mut fa = horner(c, a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m == a || m == b {
            break;
        }
        let fm = horner(c, m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Ordered zeros with slope signs; rejects degenerate zeros, an even count,
/// and non-alternating slopes.
fn classify(coeffs: &[f64]) -> Result<Vec<Zero>> {
    let bound = root_bound(coeffs);
    let roots = real_roots(coeffs, -bound, bound);
    let d = derivative(coeffs);
    let zeros: Vec<Zero> = roots
        .iter()
        .map(|&r| Zero {
            value: r,
            slope: horner(&d, r),
        })
        .collect();
    if let Some(z) = zeros.iter().find(|z| z.slope.abs() <= NONDEGENERACY_TOL) {
        return Err(Error::InadmissiblePotential(format!(
            "degenerate zero at {} (f' = {:e})",
            z.value, z.slope
        )));
    }
    if zeros.len().is_multiple_of(2) {
        return Err(Error::InadmissiblePotential(format!(
            "{} zeros, expected an odd count",
            zeros.len()
        )));
    }
    for (k, z) in zeros.iter().enumerate() {
        let expected = if k % 2 == 0 { 1 } else { -1 };
        if z.sign() != expected {
            return Err(Error::InadmissiblePotential(format!(
                "slopes do not alternate at zero {}",
                z.value
            )));
        }
    }
    Ok(zeros)
}

/// Public entry point mirroring [`Potential::zeros`] for a raw coefficient
/// list.
pub fn classify_zeros(coeffs: &[f64]) -> Result<Vec<Zero>> {
    Potential::from_coeffs(coeffs.to_vec()).map(|p| p.zeros)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_values() {
        let p = Potential::cubic();
        assert_eq!(p.f(0.0), 0.0);
        assert_eq!(p.fprime(0.0), -1.0);
        assert_eq!(p.f(1.0), 0.0);
        assert_eq!(p.f(-1.0), 0.0);
        assert_eq!(p.fprime(1.0), 2.0);
        assert_eq!(p.fprime(-1.0), 2.0);
        assert_eq!(p.F(1.0), 0.0);
        assert_eq!(p.F(0.0), 0.25);
        assert_eq!(p.t0(), 1.0);
        assert!(p.is_odd());
        assert_eq!(p.fprime_sup(), 2.0);
        assert_eq!(p.fprime_max(), 2.0);
    }

    #[test]
    fn cubic_zeros() {
        let z = Potential::cubic().zeros().to_vec();
        let got: Vec<(f64, i8)> = z.iter().map(|z| (z.value, z.sign())).collect();
        assert_eq!(got.len(), 3);
        for ((v, s), (ev, es)) in got.iter().zip([(-1.0, 1), (0.0, -1), (1.0, 1)]) {
            assert!((v - ev).abs() < 1e-12);
            assert_eq!(*s, es);
        }
    }

    #[test]
    fn quintic_zeros_alternate() {
        let p = Potential::quintic();
        let z = p.zeros();
        let expected = [(-2.0, 1), (-1.0, -1), (0.0, 1), (1.0, -1), (2.0, 1)];
        assert_eq!(z.len(), 5);
        for (z, (v, s)) in z.iter().zip(expected) {
            assert!((z.value - v).abs() < 1e-12, "{z:?}");
            assert_eq!(z.sign(), s);
        }
        assert_eq!(p.t0(), 2.0);
        assert!((p.fprime_sup() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_and_bad_potentials() {
        // u^3: degenerate zero at 0
        assert!(Potential::from_coeffs(vec![0.0, 0.0, 0.0, 1.0]).is_err());
        // even degree
        assert!(Potential::from_coeffs(vec![-1.0, 0.0, 1.0]).is_err());
        // negative leading coefficient
        assert!(Potential::from_coeffs(vec![0.0, 1.0, 0.0, -1.0]).is_err());
        // u (u-1)^2 has a double root at 1
        assert!(Potential::from_coeffs(vec![0.0, 1.0, -2.0, 1.0]).is_err());
    }

    #[test]
    fn affine_potential_has_one_zero() {
        let p = Potential::from_coeffs(vec![-0.5, 1.0]).unwrap();
        assert_eq!(p.zeros().len(), 1);
        assert!((p.zeros()[0].value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_cubic() {
        // (u+1)(u-0.5)(u-2)
        let p = Potential::from_coeffs(vec![1.0, -1.5, -1.5, 1.0]).unwrap();
        let z: Vec<f64> = p.zeros().iter().map(|z| z.value).collect();
        for (a, b) in z.iter().zip([-1.0, 0.5, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!p.is_odd());
        assert_eq!(p.t0(), 2.0);
        let min_f = p
            .zeros()
            .iter()
            .map(|z| p.F(z.value))
            .fold(f64::INFINITY, f64::min);
        assert!(min_f.abs() < 1e-12);
    }

    #[test]
    fn primitive_matches_quadrature() {
        for p in [Potential::cubic(), Potential::quintic()] {
            for k in 0..=200 {
                let t = -2.5 + 5.0 * k as f64 / 200.0;
                // composite Simpson on [0, t]
                let m = 2000;
                let h = t / m as f64;
                let mut s = p.f(0.0) + p.f(t);
                for i in 1..m {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    s += w * p.f(i as f64 * h);
                }
                let integral = s * h / 3.0;
                assert!((p.F(t) - p.F(0.0) - integral).abs() <= 1e-10, "t={t}");
            }
        }
    }
}
