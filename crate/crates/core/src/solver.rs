//! Solution finding at fixed `ε` (damped and deflated Newton), branch
//! tracing in `ε` (pseudo-arclength continuation with event location),
//! branch switching at degenerate points, and the symmetric-pair check on
//! the solution set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::linalg::{axpy, sup_norm, weighted_dot, weighted_norm, Ldlt, WeightedOperator};
use crate::operator::Problem;
use crate::spectrum::{
    constant_index, eigen_solve, morse_index, near_singular, singular_epsilons, SingularPoint,
};

/// Absolute tolerance on the weighted residual norm.
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;
/// Solutions closer than this in the weighted norm are the same solution.
pub const DISTINCT_TOL: f64 = 1e-4;
/// Slack allowed on the a-priori bound `‖u‖∞ ≤ T0`.
pub const BOUND_SLACK: f64 = 1e-6;
/// Seeds run concurrently in fixed-size batches so that results do not
/// depend on the thread count.
const DEFLATION_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Iterates with `‖u‖∞` above this multiple of `T0` count as divergent.
    pub divergence_factor: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: NEWTON_TOL,
            max_iter: NEWTON_MAX_ITER,
            divergence_factor: 10.0,
        }
    }
}

/// Counters from one Newton run.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct NewtonReport {
    pub iterations: usize,
    /// Steps taken with `H + μ` because `H` was numerically singular.
    pub regularized_steps: usize,
    /// Steps where backtracking found no sufficient decrease.
    pub line_search_failures: usize,
}

/// A solution `(ε, u)` with its diagnostics.
#[derive(Debug, Clone)]
pub struct SolutionPoint {
    pub epsilon: f64,
    pub u: ScalarField,
    pub residual_norm: f64,
    pub index: usize,
    pub nullity: usize,
    pub energy: f64,
    /// Origin label: `constant`, `seed-<k>`, `branch-<k>`, ...
    pub tag: String,
    pub newton: NewtonReport,
}

/// Flat record of a [`SolutionPoint`] for reports.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SolutionSummary {
    pub tag: String,
    pub epsilon: f64,
    pub residual_norm: f64,
    pub index: usize,
    pub nullity: usize,
    pub energy: f64,
    pub sup_norm: f64,
}

impl SolutionPoint {
    /// Computes residual, index, nullity and energy of `u` at `prob`'s `ε`.
    pub fn evaluate(prob: &Problem, u: Vec<f64>, tag: impl Into<String>) -> Result<Self> {
        let residual_norm = prob.residual_norm(&u);
        let mi = morse_index(&prob.hessian_values(&u), None)?;
        Ok(Self {
            epsilon: prob.epsilon(),
            residual_norm,
            index: mi.index,
            nullity: mi.nullity,
            energy: prob.energy_values(&u),
            u: prob.field(u)?,
            tag: tag.into(),
            newton: NewtonReport::default(),
        })
    }

    pub fn values(&self) -> &[f64] {
        self.u.values()
    }

    pub fn sup_norm(&self) -> f64 {
        self.u.sup_norm()
    }

    pub fn is_nondegenerate(&self) -> bool {
        self.nullity == 0
    }

    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            tag: self.tag.clone(),
            epsilon: self.epsilon,
            residual_norm: self.residual_norm,
            index: self.index,
            nullity: self.nullity,
            energy: self.energy,
            sup_norm: self.sup_norm(),
        }
    }
}

/// Weighted distance `‖u - v‖_W`.
pub fn distance(u: &[f64], v: &[f64], w: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .zip(w)
        .map(|((a, b), w)| (a - b) * (a - b) * w)
        .sum::<f64>()
        .sqrt()
}

/// Weighted distance `‖u + v‖_W`, zero when `v = -u`.
pub fn mirror_distance(u: &[f64], v: &[f64], w: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .zip(w)
        .map(|((a, b), w)| (a + b) * (a + b) * w)
        .sum::<f64>()
        .sqrt()
}

/// Factors `K`, falling back to `K + μW` for a few `μ` when the
/// factorization breaks down or a pivot is numerically zero. Returns
/// whether a regularization was used.
pub(crate) fn factor_regularized(h: &WeightedOperator) -> Result<(Ldlt, bool)> {
    match Ldlt::factor(&h.matrix) {
        Ok(f) if f.min_relative_pivot() > 1e-13 => return Ok((f, false)),
        _ => {}
    }
    let (lo, hi) = h.spectral_bounds();
    let mu = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    for m in [mu, -mu, 1e3 * mu] {
        if let Ok(f) = Ldlt::factor(&h.shifted_matrix(-m)) {
            if f.min_relative_pivot() > 1e-13 {
                return Ok((f, true));
            }
        }
    }
    Err(Error::NewtonFailed(
        "Hessian is singular and regularization failed".into(),
    ))
}

/// Damped Newton for `R(u) = 0` from `u0`.
pub fn newton_solve(prob: &Problem, u0: &ScalarField) -> Result<SolutionPoint> {
    let (u, report) = newton_raw(prob, u0.values().to_vec(), &NewtonOptions::default())?;
    let mut point = SolutionPoint::evaluate(prob, u, "newton")?;
    point.newton = report;
    Ok(point)
}

/// Newton on raw nodal values with Armijo backtracking on `‖R‖`.
pub fn newton_raw(
    prob: &Problem,
    mut u: Vec<f64>,
    opts: &NewtonOptions,
) -> Result<(Vec<f64>, NewtonReport)> {
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial guess is not finite".into()));
    }
    let w = prob.weights().to_vec();
    let limit = opts.divergence_factor * prob.potential().t0().max(1.0);
    let mut report = NewtonReport::default();
    let mut r = prob.residual_values(&u);
    let mut norm = weighted_norm(&r, &w);
    for it in 0..opts.max_iter {
        if norm <= opts.tol {
            report.iterations = it;
            return Ok((u, report));
        }
        let (fac, regularized) = factor_regularized(&prob.hessian_values(&u))?;
        report.regularized_steps += usize::from(regularized);
        let rhs: Vec<f64> = r.iter().zip(&w).map(|(r, w)| -r * w).collect();
        let delta = fac.solve(&rhs);
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NewtonFailed("non-finite Newton step".into()));
        }
        let mut lam = 1.0;
        let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        let accepted = loop {
            let mut trial = u.clone();
            axpy(lam, &delta, &mut trial);
            let rt = prob.residual_values(&trial);
            let nt = weighted_norm(&rt, &w);
            if nt <= (1.0 - 1e-4 * lam) * norm {
                break (nt, trial, rt);
            }
            if best.as_ref().is_none_or(|b| nt < b.0) {
                best = Some((nt, trial, rt));
            }
            lam *= 0.5;
            if lam < 1e-6 {
                report.line_search_failures += 1;
                break best.take().unwrap();
            }
        };
        (norm, u, r) = accepted;
        if sup_norm(&u) > limit || !norm.is_finite() {
            return Err(Error::NewtonFailed(format!(
                "diverged at iteration {it}: ‖u‖∞ = {:.3e}",
                sup_norm(&u)
            )));
        }
    }
    if norm <= opts.tol {
        report.iterations = opts.max_iter;
        Ok((u, report))
    } else {
        Err(Error::NewtonFailed(format!(
            "residual {norm:.3e} after {} iterations",
            opts.max_iter
        )))
    }
}

/// Newton for the deflated residual `η(u) R(u)`, with
/// `η = ∏ (1/‖u - u*‖² + 1)` over the deflated set. Convergence is judged
/// on the undeflated residual. Returns `None` when the run fails or falls
/// onto a deflated solution.
fn deflated_newton(
    prob: &Problem,
    mut u: Vec<f64>,
    deflate: &[&[f64]],
    max_iter: usize,
) -> Option<Vec<f64>> {
    let w = prob.weights();
    let t0 = prob.potential().t0().max(1.0);
    for _ in 0..max_iter {
        let r = prob.residual_values(&u);
        let norm = weighted_norm(&r, w);
        if !norm.is_finite() || sup_norm(&u) > 10.0 * t0 {
            return None;
        }
        if norm <= NEWTON_TOL {
            return Some(u);
        }
        let (eta, _) = deflation_factor(&u, deflate, w)?;
        let (fac, _) = factor_regularized(&prob.hessian_values(&u)).ok()?;
        let rhs: Vec<f64> = r.iter().zip(w).map(|(r, w)| r * w).collect();
        let d = fac.solve(&rhs);
        // Dη[d] = η Σ (-2 <u - u*, d> / n⁴) / (1/n² + 1)
        let mut deta = 0.0;
        for v in deflate {
            let diff: Vec<f64> = u.iter().zip(v.iter()).map(|(a, b)| a - b).collect();
            let n2 = weighted_dot(&diff, &diff, w);
            deta += -2.0 * weighted_dot(&diff, &d, w) / (n2 * n2) / (1.0 / n2 + 1.0);
        }
        deta *= eta;
        let denom = eta + deta;
        if denom.abs() < 1e-14 * eta {
            return None;
        }
        let mut step: Vec<f64> = d.iter().map(|v| -v * eta / denom).collect();
        let cap = 2.0 * t0;
        let s = sup_norm(&step);
        if s > cap {
            step.iter_mut().for_each(|v| *v *= cap / s);
        }
        let merit = eta * norm;
        let mut lam = 1.0;
        let mut next = None;
        for _ in 0..12 {
            let mut trial = u.clone();
            axpy(lam, &step, &mut trial);
            let ok = deflation_factor(&trial, deflate, w)
                .map(|(e, _)| e * prob.residual_norm(&trial) < (1.0 - 1e-4 * lam) * merit)
                .unwrap_or(false);
            if ok {
                next = Some(trial);
                break;
            }
            lam *= 0.5;
        }
        u = next.unwrap_or_else(|| {
            let mut trial = u.clone();
            axpy(lam, &step, &mut trial);
            trial
        });
    }
    let norm = prob.residual_norm(&u);
    (norm <= NEWTON_TOL).then_some(u)
}

/// `η(u)` and the smallest distance to the deflated set; `None` when `u`
/// coincides with a deflated solution.
fn deflation_factor(u: &[f64], deflate: &[&[f64]], w: &[f64]) -> Option<(f64, f64)> {
    let mut eta = 1.0;
    let mut closest = f64::INFINITY;
    for v in deflate {
        let n2 = distance(u, v, w).powi(2);
        if n2 < 1e-24 {
            return None;
        }
        closest = closest.min(n2.sqrt());
        eta *= 1.0 / n2 + 1.0;
    }
    Some((eta, closest))
}

/// A random band-limited field with sup norm in `[0.1, 1.2] T0`.
pub fn random_seed_field(prob: &Problem, rng: &mut impl Rng) -> Vec<f64> {
    let grid = prob.grid();
    let d = grid.dim();
    let kmax = 4i64;
    let terms: Vec<(Vec<f64>, f64, f64)> = (0..6)
        .map(|_| {
            let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-kmax..=kmax) as f64).collect();
            let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            let amp = rng.gen_range(-1.0..1.0) / (1.0 + norm);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (k, amp, phase)
        })
        .collect();
    let offset = rng.gen_range(-0.5..0.5);
    let lengths = grid.lengths().to_vec();
    let mut u: Vec<f64> = (0..grid.node_count())
        .map(|node| {
            let x = grid.coords(node);
            offset
                + terms
                    .iter()
                    .map(|(k, a, p)| {
                        let arg: f64 = k
                            .iter()
                            .zip(&x)
                            .zip(&lengths)
                            .map(|((k, x), l)| std::f64::consts::TAU * k * x / l)
                            .sum();
                        a * (arg + p).cos()
                    })
                    .sum::<f64>()
        })
        .collect();
    let target = rng.gen_range(0.1..1.2) * prob.potential().t0().max(1e-3);
    let s = sup_norm(&u).max(1e-300);
    u.iter_mut().for_each(|v| *v *= target / s);
    u
}

/// Searches for solutions not in `known` by deflated Newton from `seeds`
/// random band-limited starting fields. Each solution found is deflated for
/// all later seeds.
pub fn deflated_search(
    prob: &Problem,
    known: &[SolutionPoint],
    seeds: usize,
    rng_seed: u64,
) -> Result<Vec<SolutionPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let starts: Vec<Vec<f64>> = (0..seeds)
        .map(|_| random_seed_field(prob, &mut rng))
        .collect();
    let w = prob.weights();
    let mut registry: Vec<Vec<f64>> = known.iter().map(|p| p.values().to_vec()).collect();
    let mut found = Vec::new();
    for (b, batch) in starts.chunks(DEFLATION_BATCH).enumerate() {
        let deflate: Vec<&[f64]> = registry.iter().map(Vec::as_slice).collect();
        let results: Vec<Option<Vec<f64>>> = batch
            .par_iter()
            .map(|u0| deflated_newton(prob, u0.clone(), &deflate, 100))
            .collect();
        for (j, res) in results.into_iter().enumerate() {
            let Some(u) = res else { continue };
            if registry.iter().any(|v| distance(&u, v, w) <= DISTINCT_TOL) {
                continue;
            }
            let seed_id = b * DEFLATION_BATCH + j;
            registry.push(u.clone());
            found.push(SolutionPoint::evaluate(prob, u, format!("seed-{seed_id}"))?);
        }
    }
    Ok(found)
}

/// The constant solutions `u ≡ c_k`.
pub fn constant_solutions(prob: &Problem) -> Result<Vec<SolutionPoint>> {
    prob.potential()
        .zeros()
        .iter()
        .map(|z| {
            SolutionPoint::evaluate(
                prob,
                vec![z.value; prob.node_count()],
                format!("constant({})", z.value),
            )
        })
        .collect()
}

/// Constants plus everything a deflated search finds.
pub fn find_solutions(prob: &Problem, seeds: usize, rng_seed: u64) -> Result<Vec<SolutionPoint>> {
    let mut all = constant_solutions(prob)?;
    let more = deflated_search(prob, &all, seeds, rng_seed)?;
    all.extend(more);
    Ok(all)
}

/// How [`search_solutions`] looks for solutions at a fixed `ε`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    pub seeds: usize,
    pub rng_seed: u64,
    /// Also trace the constant branches from above the largest singular
    /// parameter down to `ε` and follow every branch bifurcating on the way.
    pub continuation: bool,
    pub step: StepControl,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            seeds: 100,
            rng_seed: 0,
            continuation: true,
            step: StepControl::default(),
        }
    }
}

/// Constants, the endpoints at `ε` of all branches bifurcating from the
/// constants above `ε` (when enabled), and whatever a deflated search
/// finds beyond those.
pub fn search_solutions(prob: &Problem, opts: &SearchOptions) -> Result<Vec<SolutionPoint>> {
    let mut all = constant_solutions(prob)?;
    if opts.continuation {
        let w = prob.weights().to_vec();
        for s in bifurcated_solutions(prob, &opts.step)? {
            if !all
                .iter()
                .any(|k| distance(k.values(), s.values(), &w) <= DISTINCT_TOL)
            {
                all.push(s);
            }
        }
    }
    let more = deflated_search(prob, &all, opts.seeds, opts.rng_seed)?;
    all.extend(more);
    Ok(all)
}

/// Follows each unstable constant from above its largest singular
/// parameter down to `prob.epsilon()`, switches onto every branch that
/// bifurcates on the way, and returns where those branches cross `ε`.
pub fn bifurcated_solutions(prob: &Problem, ctrl: &StepControl) -> Result<Vec<SolutionPoint>> {
    let eps = prob.epsilon();
    let pot = prob.potential();
    let lap = prob.neg_laplacian();
    let spec = spectrum_beyond(&lap, 0.0)?;
    let lambda1 = spec
        .distinct()
        .into_iter()
        .map(|(l, _)| l)
        .find(|&l| l > crate::spectrum::CLUSTER_TOL)
        .ok_or_else(|| Error::InvalidArgument("no positive eigenvalue of -Δ".into()))?;
    let mut out = Vec::new();
    for z in pot.zeros().iter().filter(|z| z.slope < 0.0) {
        let top = -z.slope / lambda1;
        if top <= eps {
            continue;
        }
        let hi = 1.25 * top;
        let window = (eps, hi);
        let p_hi = prob.with_epsilon(hi)?;
        let start = SolutionPoint::evaluate(
            &p_hi,
            vec![z.value; prob.node_count()],
            format!("constant({})", z.value),
        )?;
        let trivial = continue_branch(prob, &start, -1.0, window, ctrl)?;
        for (k, ev) in trivial.events.iter().enumerate() {
            let Some(at) = ev.point.as_ref().filter(|p| p.nullity > 0) else {
                continue;
            };
            for seed in branch_switch(prob, at, ctrl.switch_delta)? {
                let label = format!(
                    "branch-{k}.{}{}",
                    seed.kernel_index,
                    if seed.sign > 0.0 { '+' } else { '-' }
                );
                match continue_from_seed(prob, &seed, window, ctrl) {
                    Ok(b) => {
                        if let Some(last) = b
                            .points
                            .last()
                            .filter(|p| (p.epsilon - eps).abs() <= 1e-12 * eps)
                        {
                            let mut last = last.clone();
                            last.tag = label;
                            out.push(last);
                        }
                    }
                    Err(e) => log::warn!("{label}: {e}"),
                }
            }
        }
    }
    Ok(out)
}

/// Step-size control for continuation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepControl {
    pub initial: f64,
    pub min: f64,
    pub max: f64,
    pub growth: f64,
    pub max_steps: usize,
    /// Corrector iteration budget per step.
    pub max_corrector_iter: usize,
    /// Steps converging within this many iterations grow the step.
    pub fast_iterations: usize,
    /// Arclength resolution of event location.
    pub event_tol: f64,
    /// Offset along the kernel for branch switching.
    pub switch_delta: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            initial: 1e-2,
            min: 1e-8,
            max: 1e-1,
            growth: 1.5,
            max_steps: 5000,
            max_corrector_iter: 10,
            fast_iterations: 3,
            event_tol: 1e-10,
            switch_delta: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Fold,
    BranchPoint,
    IndexChange,
    Stall,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EventKind::Fold => "fold",
            EventKind::BranchPoint => "branch-point",
            EventKind::IndexChange => "index-change",
            EventKind::Stall => "stall",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BranchEvent {
    pub arclength: f64,
    pub epsilon: f64,
    pub kind: EventKind,
    pub index_before: usize,
    pub index_after: usize,
    /// Nullity at the located point.
    pub nullity: usize,
    /// Smallest `|eigenvalue|` of the Hessian at the located point.
    pub min_abs_eigenvalue: Option<f64>,
    /// The located point, usable for branch switching.
    pub point: Option<SolutionPoint>,
}

/// Points of one continuation run in arclength order.
#[derive(Debug, Clone, Default)]
pub struct Branch {
    pub points: Vec<SolutionPoint>,
    pub arclengths: Vec<f64>,
    pub events: Vec<BranchEvent>,
}

/// A point of the extended space `(u, ε)`.
#[derive(Debug, Clone)]
struct Ext {
    u: Vec<f64>,
    eps: f64,
}

/// Inner product on `(u, ε)`: mean-square in `u` plus the square in `ε`.
struct ExtMetric<'a> {
    w: &'a [f64],
    volume: f64,
}

impl ExtMetric<'_> {
    fn new(w: &[f64]) -> ExtMetric<'_> {
        ExtMetric {
            w,
            volume: w.iter().sum(),
        }
    }

    fn dot(&self, a: &Ext, b: &Ext) -> f64 {
        weighted_dot(&a.u, &b.u, self.w) / self.volume + a.eps * b.eps
    }

    fn normalize(&self, mut a: Ext) -> Ext {
        let n = self.dot(&a, &a).sqrt();
        a.u.iter_mut().for_each(|v| *v /= n);
        a.eps /= n;
        a
    }

    fn diff(&self, a: &Ext, b: &Ext) -> Ext {
        Ext {
            u: a.u.iter().zip(&b.u).map(|(x, y)| x - y).collect(),
            eps: a.eps - b.eps,
        }
    }

    fn along(&self, a: &Ext, t: &Ext, s: f64) -> Ext {
        let mut u = a.u.clone();
        axpy(s, &t.u, &mut u);
        Ext {
            u,
            eps: a.eps + s * t.eps,
        }
    }
}

/// Solves `R(u, ε) = 0`, `<t, x - anchor> = s` by bordered Newton from
/// `pred`. Returns the corrected point and the iteration count.
fn correct(
    prob: &Problem,
    pred: Ext,
    anchor: &Ext,
    t: &Ext,
    s: f64,
    max_iter: usize,
) -> Result<(Ext, usize)> {
    let w = prob.weights();
    let m = ExtMetric::new(w);
    let limit = 10.0 * prob.potential().t0().max(1.0);
    let mut x = pred;
    for it in 0..=max_iter {
        if !(x.eps > 0.0) || !x.eps.is_finite() {
            return Err(Error::NewtonFailed(format!(
                "corrector left ε > 0 (ε = {})",
                x.eps
            )));
        }
        let p = prob.with_epsilon(x.eps)?;
        let r = p.residual_values(&x.u);
        let g = m.dot(t, &m.diff(&x, anchor)) - s;
        let norm = weighted_norm(&r, w);
        if norm <= NEWTON_TOL && g.abs() <= 1e-12 {
            return Ok((x, it));
        }
        if it == max_iter || !norm.is_finite() || sup_norm(&x.u) > limit {
            break;
        }
        let (fac, _) = factor_regularized(&p.hessian_values(&x.u))?;
        let wr: Vec<f64> = r.iter().zip(w).map(|(r, w)| r * w).collect();
        let a = fac.solve(&wr);
        let b = fac.solve(&p.stiffness().mul_vec(&x.u));
        let tb = weighted_dot(&t.u, &b, w) / m.volume;
        let ta = weighted_dot(&t.u, &a, w) / m.volume;
        let denom = t.eps - tb;
        if denom.abs() < 1e-14 {
            return Err(Error::NewtonFailed("bordered system is singular".into()));
        }
        let de = (-g + ta) / denom;
        for ((u, a), b) in x.u.iter_mut().zip(&a).zip(&b) {
            *u += -a - de * b;
        }
        x.eps += de;
    }
    Err(Error::NewtonFailed(
        "continuation corrector did not converge".into(),
    ))
}

/// Tangent `(-H⁻¹ R_ε, 1)` at a nondegenerate point, with `R_ε = -Δ u`.
fn implicit_tangent(prob: &Problem, x: &Ext) -> Result<Ext> {
    let p = prob.with_epsilon(x.eps)?;
    let (fac, _) = factor_regularized(&p.hessian_values(&x.u))?;
    let b = fac.solve(&p.stiffness().mul_vec(&x.u));
    let m = ExtMetric::new(prob.weights());
    Ok(m.normalize(Ext {
        u: b.iter().map(|v| -v).collect(),
        eps: 1.0,
    }))
}

/// Traces the branch through `start` in the direction where `ε` moves by
/// `direction` (`+1` or `-1`), inside the open window `eps_window`.
pub fn continue_branch(
    prob: &Problem,
    start: &SolutionPoint,
    direction: f64,
    eps_window: (f64, f64),
    ctrl: &StepControl,
) -> Result<Branch> {
    check_window(eps_window, start.epsilon)?;
    if start.nullity > 0 {
        return Err(Error::InvalidArgument(
            "start point is degenerate; switch branches with branch_switch".into(),
        ));
    }
    let x0 = Ext {
        u: start.values().to_vec(),
        eps: start.epsilon,
    };
    let mut t = implicit_tangent(prob, &x0)?;
    if t.eps * direction < 0.0 {
        t.u.iter_mut().for_each(|v| *v = -*v);
        t.eps = -t.eps;
    }
    trace(prob, start.clone(), t, eps_window, ctrl, &start.tag)
}

fn check_window(window: (f64, f64), eps: f64) -> Result<()> {
    let (a, b) = window;
    if !(a > 0.0 && b > a) {
        return Err(Error::InvalidArgument(format!("epsilon window ({a}, {b})")));
    }
    if !(eps >= a && eps <= b) {
        return Err(Error::InvalidArgument(format!(
            "start ε = {eps} outside window ({a}, {b})"
        )));
    }
    Ok(())
}

fn trace(
    prob: &Problem,
    start: SolutionPoint,
    t0: Ext,
    window: (f64, f64),
    ctrl: &StepControl,
    tag: &str,
) -> Result<Branch> {
    let w = prob.weights();
    let m = ExtMetric::new(w);
    let mut branch = Branch::default();
    let mut prev = Ext {
        u: start.values().to_vec(),
        eps: start.epsilon,
    };
    let mut prev_index = start.index;
    let mut s_total = 0.0;
    branch.points.push(start);
    branch.arclengths.push(0.0);
    let mut t = t0;
    let mut h = ctrl.initial.clamp(ctrl.min, ctrl.max);
    let mut steps = 0;
    while steps < ctrl.max_steps {
        let pred = m.along(&prev, &t, h);
        let leaving = pred.eps <= window.0 || pred.eps >= window.1;
        let attempt = if leaving && t.eps.abs() > 1e-12 {
            let boundary = if pred.eps <= window.0 {
                window.0
            } else {
                window.1
            };
            let hc = (boundary - prev.eps) / t.eps;
            let up = m.along(&prev, &t, hc);
            let p = prob.with_epsilon(boundary)?;
            newton_raw(&p, up.u, &NewtonOptions::default())
                .map(|(u, r)| (Ext { u, eps: boundary }, r.iterations, true))
        } else {
            correct(prob, pred, &prev, &t, h, ctrl.max_corrector_iter).map(|(x, it)| (x, it, false))
        };
        let (x, iters, last) = match attempt {
            Ok(v) => v,
            Err(e) => {
                h *= 0.5;
                if h < ctrl.min {
                    log::warn!("branch {tag} stalled at ε = {}: {e}", prev.eps);
                    branch.events.push(BranchEvent {
                        arclength: s_total,
                        epsilon: prev.eps,
                        kind: EventKind::Stall,
                        index_before: prev_index,
                        index_after: prev_index,
                        nullity: branch.points.last().map_or(0, |p| p.nullity),
                        min_abs_eigenvalue: None,
                        point: None,
                    });
                    break;
                }
                continue;
            }
        };
        steps += 1;
        let p = prob.with_epsilon(x.eps)?;
        let point = SolutionPoint::evaluate(&p, x.u.clone(), format!("{tag}/{steps}"))?;
        let chord = m.diff(&x, &prev);
        let ds = m.dot(&chord, &chord).sqrt();
        if ds == 0.0 {
            break;
        }
        let secant = m.normalize(chord);
        if point.index != prev_index {
            let folded = secant.eps * t.eps < 0.0;
            let s_end = m.dot(&t, &m.diff(&x, &prev));
            let events = locate_events(prob, &prev, &t, s_end, folded, s_total, ctrl)?;
            branch.events.extend(events);
        }
        s_total += ds;
        prev_index = point.index;
        branch.points.push(point);
        branch.arclengths.push(s_total);
        if last {
            break;
        }
        prev = x;
        t = secant;
        if iters <= ctrl.fast_iterations {
            h = (h * ctrl.growth).min(ctrl.max);
        }
    }
    Ok(branch)
}

/// Number of strictly negative eigenvalues of the Hessian at `x`, without
/// a zero tolerance, so that bisection converges onto the zero crossing.
fn sign_index(prob: &Problem, x: &Ext) -> Result<usize> {
    let p = prob.with_epsilon(x.eps)?;
    let h = p.hessian_values(&x.u);
    match Ldlt::factor(&h.matrix) {
        Ok(f) => Ok(f.inertia().negative),
        Err(_) => Ok(morse_index(&h, None)?.index),
    }
}

/// Bisects on the arclength constraint between `anchor` and the point at
/// `s_end` until every change of the negative eigenvalue count is
/// bracketed to `ctrl.event_tol`.
#[allow(clippy::too_many_arguments)]
fn locate_events(
    prob: &Problem,
    anchor: &Ext,
    t: &Ext,
    s_end: f64,
    folded: bool,
    s_offset: f64,
    ctrl: &StepControl,
) -> Result<Vec<BranchEvent>> {
    let m = ExtMetric::new(prob.weights());
    let solve_at = |s: f64, guess: Ext| correct(prob, guess, anchor, t, s, ctrl.max_corrector_iter);
    let mut events = Vec::new();
    let Ok((end, _)) = solve_at(s_end, m.along(anchor, t, s_end)) else {
        return Ok(events);
    };
    let i_end = sign_index(prob, &end)?;
    let mut lo = (0.0, anchor.clone(), sign_index(prob, anchor)?);
    while lo.2 != i_end && events.len() < 16 {
        let mut hi = (s_end, end.clone(), i_end);
        let mut failed = false;
        while hi.0 - lo.0 > ctrl.event_tol * s_end.abs().max(1.0) {
            let mid = 0.5 * (lo.0 + hi.0);
            let guess = Ext {
                u: lo
                    .1
                    .u
                    .iter()
                    .zip(&hi.1.u)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect(),
                eps: 0.5 * (lo.1.eps + hi.1.eps),
            };
            let Ok((x, _)) = solve_at(mid, guess) else {
                failed = true;
                break;
            };
            let idx = sign_index(prob, &x)?;
            if idx == lo.2 {
                lo = (mid, x, idx);
            } else {
                hi = (mid, x, idx);
            }
        }
        let p = prob.with_epsilon(hi.1.eps)?;
        let point = SolutionPoint::evaluate(&p, hi.1.u.clone(), "event")?;
        let h = p.hessian_values(&hi.1.u);
        let want = (lo.2.max(hi.2) + point.nullity + 2).min(h.dim());
        let min_abs = eigen_solve(&h, want).ok().map(|s| {
            s.eigenvalues
                .iter()
                .fold(f64::INFINITY, |a, v| a.min(v.abs()))
        });
        let kind = if folded && hi.2.abs_diff(lo.2) == 1 {
            EventKind::Fold
        } else if point.nullity > 0 {
            EventKind::BranchPoint
        } else {
            EventKind::IndexChange
        };
        events.push(BranchEvent {
            arclength: s_offset + 0.5 * (lo.0 + hi.0),
            epsilon: 0.5 * (lo.1.eps + hi.1.eps),
            kind,
            index_before: lo.2,
            index_after: hi.2,
            nullity: point.nullity,
            min_abs_eigenvalue: min_abs,
            point: Some(point),
        });
        if failed {
            break;
        }
        lo = hi;
    }
    Ok(events)
}

/// A predictor state `u* + sign δ φ` for leaving a degenerate point along
/// kernel direction `φ`.
#[derive(Debug, Clone)]
pub struct BranchSeed {
    pub epsilon: f64,
    pub base: Vec<f64>,
    /// `W`-normalized kernel field.
    pub kernel: Vec<f64>,
    pub sign: f64,
    pub delta: f64,
    pub kernel_index: usize,
    pub u: ScalarField,
}

/// Seeds along every kernel direction of the Hessian at `at`, both signs.
pub fn branch_switch(prob: &Problem, at: &SolutionPoint, delta: f64) -> Result<Vec<BranchSeed>> {
    if at.nullity == 0 {
        return Err(Error::NoKernel);
    }
    let p = prob.with_epsilon(at.epsilon)?;
    let h = p.hessian_values(at.values());
    let want = (at.index + at.nullity + 1).min(h.dim());
    let spec = eigen_solve(&h, want)?;
    let mut order: Vec<usize> = (0..spec.len()).collect();
    order.sort_by(|&a, &b| {
        spec.eigenvalues[a]
            .abs()
            .total_cmp(&spec.eigenvalues[b].abs())
    });
    let volume: f64 = p.weights().iter().sum();
    let mut seeds = Vec::new();
    for (j, &k) in order.iter().take(at.nullity).enumerate() {
        // unit mean-square amplitude
        let phi: Vec<f64> = spec.eigenvectors[k]
            .iter()
            .map(|v| v * volume.sqrt())
            .collect();
        for sign in [1.0, -1.0] {
            let mut u = at.values().to_vec();
            axpy(sign * delta, &phi, &mut u);
            seeds.push(BranchSeed {
                epsilon: at.epsilon,
                base: at.values().to_vec(),
                kernel: phi.clone(),
                sign,
                delta,
                kernel_index: j,
                u: p.field(u)?,
            });
        }
    }
    Ok(seeds)
}

/// Corrects a seed onto the emanating branch. `ε` is left free and the
/// offset `δ` along the kernel is imposed as an arclength constraint, so
/// the correction works on both sides of the bifurcation.
pub fn correct_seed(
    prob: &Problem,
    seed: &BranchSeed,
    ctrl: &StepControl,
) -> Result<SolutionPoint> {
    let m = ExtMetric::new(prob.weights());
    let anchor = Ext {
        u: seed.base.clone(),
        eps: seed.epsilon,
    };
    let t = m.normalize(Ext {
        u: seed.kernel.iter().map(|v| seed.sign * v).collect(),
        eps: 0.0,
    });
    let pred = Ext {
        u: seed.u.values().to_vec(),
        eps: seed.epsilon,
    };
    let (x, _) = correct(
        prob,
        pred,
        &anchor,
        &t,
        seed.delta,
        3 * ctrl.max_corrector_iter,
    )?;
    let p = prob.with_epsilon(x.eps)?;
    SolutionPoint::evaluate(
        &p,
        x.u,
        format!(
            "switch-{}{}",
            seed.kernel_index,
            if seed.sign > 0.0 { '+' } else { '-' }
        ),
    )
}

/// Corrects `seed` and continues the emanating branch away from the
/// bifurcation point.
pub fn continue_from_seed(
    prob: &Problem,
    seed: &BranchSeed,
    eps_window: (f64, f64),
    ctrl: &StepControl,
) -> Result<Branch> {
    let first = correct_seed(prob, seed, ctrl)?;
    check_window(eps_window, first.epsilon)?;
    let m = ExtMetric::new(prob.weights());
    let base = Ext {
        u: seed.base.clone(),
        eps: seed.epsilon,
    };
    let x = Ext {
        u: first.values().to_vec(),
        eps: first.epsilon,
    };
    let t = m.normalize(m.diff(&x, &base));
    let tag = first.tag.clone();
    trace(prob, first, t, eps_window, ctrl, &tag)
}

/// Outcome of a verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::NotApplicable => "NOT APPLICABLE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct IndexCount {
    pub index: usize,
    /// Distinct nondegenerate solutions of this index.
    pub count: usize,
    /// How many of them have their negative in the set.
    pub paired: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BifurcationReport {
    pub epsilon: f64,
    /// `Index(0)`.
    pub l: Option<usize>,
    pub counts: Vec<IndexCount>,
    /// Solutions without their negative in the set.
    pub unpaired: Vec<SolutionSummary>,
    /// Solutions violating `‖u‖∞ ≤ T0 + 1e-6`.
    pub out_of_bounds: Vec<SolutionSummary>,
    pub degenerate: Vec<SolutionSummary>,
    pub nearest_singular: Option<SingularPoint>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

/// Checks that every index `0 <= k < Index(0)` carries at least two
/// nondegenerate solutions `u`, `-u`, that the set is closed under
/// `u -> -u`, and that every solution obeys the a-priori bound.
pub fn verify_bifurcation_theorem(
    prob: &Problem,
    solutions: &[SolutionPoint],
) -> Result<BifurcationReport> {
    let eps = prob.epsilon();
    let pot = prob.potential();
    let mut report = BifurcationReport {
        epsilon: eps,
        l: None,
        counts: Vec::new(),
        unpaired: Vec::new(),
        out_of_bounds: Vec::new(),
        degenerate: Vec::new(),
        nearest_singular: None,
        verdict: Verdict::NotApplicable,
        notes: Vec::new(),
    };
    if !pot.is_odd() {
        report
            .notes
            .push("potential is not odd; u -> -u is not a symmetry".into());
        return Ok(report);
    }
    let lap = prob.neg_laplacian();
    let spec = spectrum_beyond(
        &lap,
        pot.zeros().iter().map(|z| -z.slope).fold(0.0, f64::max) / (0.5 * eps),
    )?;
    let singular = singular_epsilons(&spec, pot, (0.5 * eps, 2.0 * eps))?;
    if let Some(s) = near_singular(eps, &singular) {
        report.nearest_singular = Some(s);
        report.notes.push(format!(
            "ε = {eps} lies within 1e-4 ε_s of the singular value {}",
            s.epsilon
        ));
        return Ok(report);
    }
    report.nearest_singular = singular
        .iter()
        .copied()
        .min_by(|a, b| (a.epsilon - eps).abs().total_cmp(&(b.epsilon - eps).abs()));
    let (l, _) = constant_index(prob, 0.0, &spec)?;
    report.l = Some(l);

    let w = prob.weights();
    let mut distinct: Vec<&SolutionPoint> = Vec::new();
    for s in solutions {
        if !distinct
            .iter()
            .any(|d| distance(d.values(), s.values(), w) <= DISTINCT_TOL)
        {
            distinct.push(s);
        }
    }
    let bound = pot.t0() + BOUND_SLACK;
    for s in &distinct {
        if s.sup_norm() > bound {
            report.out_of_bounds.push(s.summary());
        }
        if !s.is_nondegenerate() {
            report.degenerate.push(s.summary());
        }
        let zero = s.sup_norm() <= DISTINCT_TOL;
        let paired = zero
            || distinct
                .iter()
                .any(|d| mirror_distance(d.values(), s.values(), w) <= DISTINCT_TOL);
        if !paired {
            report.unpaired.push(s.summary());
        }
    }
    let mut ok = report.unpaired.is_empty() && report.out_of_bounds.is_empty();
    for k in 0..l {
        let of_k: Vec<&&SolutionPoint> = distinct
            .iter()
            .filter(|s| s.index == k && s.is_nondegenerate())
            .collect();
        let paired = of_k
            .iter()
            .filter(|s| {
                of_k.iter()
                    .any(|d| mirror_distance(d.values(), s.values(), w) <= DISTINCT_TOL)
            })
            .count();
        ok &= paired >= 2;
        report.counts.push(IndexCount {
            index: k,
            count: of_k.len(),
            paired,
        });
    }
    report.verdict = if ok { Verdict::Pass } else { Verdict::Fail };
    Ok(report)
}

/// Eigenvalues of `op` up to and past `threshold`, doubling the request
/// until the spectrum is long enough.
pub fn spectrum_beyond(
    op: &WeightedOperator,
    threshold: f64,
) -> Result<crate::spectrum::SpectrumResult> {
    let n = op.dim();
    let mut m = 8.min(n);
    loop {
        let spec = eigen_solve(op, m)?;
        if spec.largest() > threshold || m == n {
            return Ok(spec);
        }
        m = (2 * m).min(n);
    }
}
