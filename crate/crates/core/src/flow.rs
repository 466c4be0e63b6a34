//! The parabolic flow `u_t = -R(u) = εΔ_g u - f(u)`, the space-constant
//! trajectories `w' = -f(w)` between adjacent zeros, the linearized mode
//! check along them, and mod-2 counting of connecting orbits between
//! solutions whose indices differ by one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::linalg::Ldlt;
use crate::operator::Problem;
use crate::potential::Potential;
use crate::solver::{distance, newton_raw, NewtonOptions, SolutionPoint};
use crate::spectrum::eigen_solve;

/// `‖R(u)‖` below which a flow state counts as an equilibrium.
pub const EQUILIBRIUM_RESIDUAL: f64 = 1e-8;
/// Distance to a known solution within which an equilibrium is identified
/// with it.
pub const EQUILIBRIUM_MATCH: f64 = 1e-3;
pub const MAX_FLOW_STEPS: usize = 100_000;
/// Relative slack on the energy decrease of an accepted step.
pub const ENERGY_SLACK: f64 = 1e-9;
/// Scalar trajectories stop this close to their target zero.
pub const SCALAR_TARGET_TOL: f64 = 1e-10;
/// Relative offset from the source zero where scalar trajectories start.
pub const SCALAR_LAUNCH: f64 = 1e-6;
/// Launch amplitude off a source solution, relative to `T0`.
pub const LAUNCH_DELTA: f64 = 1e-3;
/// Restarts of the edge tracker before a boundary is given up.
const EDGE_ROUNDS: usize = 300;
/// Edge-tracked states with `‖R‖` below this (relative) are polished.
const EDGE_POLISH: f64 = 1e-6;
/// Rejected steps halve `dt` at most this many times.
const MAX_HALVINGS: i32 = 40;

/// Largest step for which the explicit part maps `[-T0, T0]` into itself
/// and the energy cannot increase: `1 / max f'`.
pub fn default_dt(p: &Potential) -> f64 {
    1.0 / p.fprime_max().max(1e-12)
}

/// `W + dt ε S`, the matrix of one implicit solve.
fn imex_factor(prob: &Problem, dt: f64) -> Result<Ldlt> {
    let m = prob
        .stiffness()
        .scaled(dt * prob.epsilon())
        .plus_diagonal(prob.weights());
    Ldlt::factor(&m)
}

/// `(W + dt ε S)⁻¹ W (u - dt f(u))`.
fn imex_apply(prob: &Problem, fac: &Ldlt, u: &[f64], dt: f64) -> Vec<f64> {
    let p = prob.potential();
    let rhs: Vec<f64> = u
        .iter()
        .zip(prob.weights())
        .map(|(&ui, w)| w * (ui - dt * p.f(ui)))
        .collect();
    fac.solve(&rhs)
}

/// One IMEX step of length `dt`: implicit in `εΔ_g`, explicit in `f`.
pub fn flow_step(prob: &Problem, u: &ScalarField, dt: f64) -> Result<ScalarField> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time step must be positive, got {dt}"
        )));
    }
    if u.grid().as_ref() != prob.grid().as_ref() {
        return Err(Error::GridMismatch);
    }
    let values = match imex_factor(prob, dt) {
        Ok(fac) => imex_apply(prob, &fac, u.values(), dt),
        Err(_) => {
            let half = 0.5 * dt;
            let fac = imex_factor(prob, half)?;
            let mid = imex_apply(prob, &fac, u.values(), half);
            imex_apply(prob, &fac, &mid, half)
        }
    };
    prob.field(values)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowOptions {
    /// Largest step; [`default_dt`] when unset.
    pub dt_max: Option<f64>,
    pub max_steps: usize,
    pub residual_tol: f64,
    pub match_tol: f64,
    /// Keep every `record_every`-th accepted state (the last one always).
    pub record_every: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            dt_max: None,
            max_steps: MAX_FLOW_STEPS,
            residual_tol: EQUILIBRIUM_RESIDUAL,
            match_tol: EQUILIBRIUM_MATCH,
            record_every: 1,
        }
    }
}

/// Where a flow ended up.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FlowOutcome {
    /// Equilibrated at the known solution with this position in the list.
    Converged { target: usize, distance: f64 },
    /// Equilibrated away from every known solution.
    UnknownEquilibrium,
    /// Out of steps, or the step size underflowed.
    Unresolved,
}

/// A flow line `u(t)`, sampled at accepted steps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ScalarField>,
    pub energies: Vec<f64>,
    /// Source and target solutions, when the flow was launched off a known
    /// solution and equilibrated at another.
    pub limits: Option<(SolutionPoint, SolutionPoint)>,
    pub outcome: FlowOutcome,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Largest `(E_{i+1} - E_i) / (1 + |E_i|)` over accepted steps.
    pub max_energy_increase: f64,
}

impl Trajectory {
    pub fn last(&self) -> &ScalarField {
        self.states
            .last()
            .expect("a trajectory holds its initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

fn nearest(u: &[f64], known: &[SolutionPoint], w: &[f64]) -> Option<(usize, f64)> {
    known
        .iter()
        .enumerate()
        .map(|(i, s)| (i, distance(u, s.values(), w)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Integrates the flow from `u0` until it equilibrates, with `dt` halved
/// whenever a step would raise the energy.
pub fn integrate(
    prob: &Problem,
    u0: &ScalarField,
    known: &[SolutionPoint],
    opts: &FlowOptions,
) -> Result<Trajectory> {
    if u0.grid().as_ref() != prob.grid().as_ref() {
        return Err(Error::GridMismatch);
    }
    let dt_max = opts.dt_max.unwrap_or_else(|| default_dt(prob.potential()));
    if !(dt_max.is_finite() && dt_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt_max must be positive, got {dt_max}"
        )));
    }
    let w = prob.weights();
    let record_every = opts.record_every.max(1);
    let mut factors: Vec<Option<Ldlt>> = Vec::new();
    let mut level = 0i32;
    let mut streak = 0usize;
    let mut u = u0.values().to_vec();
    let mut e = prob.energy_values(&u);
    let mut t = 0.0;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![u0.clone()],
        energies: vec![e],
        limits: None,
        outcome: FlowOutcome::Unresolved,
        accepted_steps: 0,
        rejected_steps: 0,
        max_energy_increase: f64::NEG_INFINITY,
    };
    let mut recorded = true;
    for _ in 0..opts.max_steps {
        if prob.residual_norm(&u) <= opts.residual_tol {
            traj.outcome = match nearest(&u, known, w) {
                Some((target, distance)) if distance <= opts.match_tol => {
                    FlowOutcome::Converged { target, distance }
                }
                _ => FlowOutcome::UnknownEquilibrium,
            };
            break;
        }
        let dt = dt_max * 0.5f64.powi(level);
        let slot = level as usize;
        if factors.len() <= slot {
            factors.resize_with(slot + 1, || None);
        }
        if factors[slot].is_none() {
            factors[slot] = Some(imex_factor(prob, dt)?);
        }
        let next = imex_apply(prob, factors[slot].as_ref().unwrap(), &u, dt);
        let e_next = prob.energy_values(&next);
        if !(e_next <= e + ENERGY_SLACK * (1.0 + e.abs())) {
            traj.rejected_steps += 1;
            streak = 0;
            level += 1;
            if level > MAX_HALVINGS {
                break;
            }
            continue;
        }
        traj.max_energy_increase = traj.max_energy_increase.max((e_next - e) / (1.0 + e.abs()));
        u = next;
        e = e_next;
        t += dt;
        traj.accepted_steps += 1;
        recorded = traj.accepted_steps.is_multiple_of(record_every);
        if recorded {
            traj.times.push(t);
            traj.states
                .push(ScalarField::from_parts(prob.grid().clone(), u.clone()));
            traj.energies.push(e);
        }
        streak += 1;
        if streak >= 8 && level > 0 {
            level -= 1;
            streak = 0;
        }
    }
    if !recorded {
        traj.times.push(t);
        traj.states
            .push(ScalarField::from_parts(prob.grid().clone(), u));
        traj.energies.push(e);
    }
    Ok(traj)
}

/// A solution `w(t)` of `w' = -f(w)` leaving the zero `c_minus`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScalarTrajectory {
    pub c_minus: f64,
    pub c_plus: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// The space-constant flow line from the unstable zero `c_minus` to the
/// adjacent stable zero `c_plus`, by adaptive Dormand-Prince integration
/// from `c_minus + σ δ` until `|w - c_plus| < 1e-10`.
pub fn space_constant_trajectory(
    p: &Potential,
    c_minus: f64,
    c_plus: f64,
) -> Result<ScalarTrajectory> {
    let zm = p.zero_at(c_minus).ok_or(Error::NotAZero(c_minus))?;
    let zp = p.zero_at(c_plus).ok_or(Error::NotAZero(c_plus))?;
    if zm.slope >= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "f'({c_minus}) = {} ≥ 0: no descent leaves a minimum of F",
            zm.slope
        )));
    }
    if zp.slope <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "f'({c_plus}) = {} ≤ 0: not a stable zero",
            zp.slope
        )));
    }
    let (lo, hi) = (zm.value.min(zp.value), zm.value.max(zp.value));
    if let Some(z) = p.zeros().iter().find(|z| z.value > lo && z.value < hi) {
        return Err(Error::InvalidArgument(format!(
            "zeros {c_minus} and {c_plus} are not adjacent ({} lies between)",
            z.value
        )));
    }
    let sigma = (zp.value - zm.value).signum();
    let w0 = zm.value + sigma * SCALAR_LAUNCH * (hi - lo);
    let rhs = |w: f64| -p.f(w);
    let (times, values) = dormand_prince(
        rhs,
        w0,
        |w| (w - zp.value).abs() < SCALAR_TARGET_TOL,
        1e-13,
        1e-15,
    )?;
    Ok(ScalarTrajectory {
        c_minus: zm.value,
        c_plus: zp.value,
        times,
        values,
    })
}

/// Adaptive 5(4) Dormand-Prince for the autonomous scalar ODE `y' = g(y)`,
/// run until `stop(y)` holds.
fn dormand_prince(
    g: impl Fn(f64) -> f64,
    y0: f64,
    stop: impl Fn(f64) -> bool,
    rtol: f64,
    atol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let mut times = vec![0.0];
    let mut values = vec![y0];
    let (mut t, mut y) = (0.0, y0);
    let mut h = 1e-2;
    let mut k = [0.0; 7];
    k[0] = g(y);
    for _ in 0..1_000_000 {
        if stop(y) {
            return Ok((times, values));
        }
        for s in 1..7 {
            let incr: f64 = (0..s).map(|j| A[s - 1][j] * k[j]).sum();
            k[s] = g(y + h * incr);
        }
        let y_new = y + h * (0..6).map(|j| A[5][j] * k[j]).sum::<f64>();
        let err = h * (0..7).map(|j| E[j] * k[j]).sum::<f64>();
        let scale = atol + rtol * y.abs().max(y_new.abs());
        let ratio = (err / scale).abs();
        if ratio <= 1.0 {
            t += h;
            y = y_new;
            k[0] = k[6];
            times.push(t);
            values.push(y);
        }
        let factor = if ratio == 0.0 {
            5.0
        } else {
            (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h < 1e-14 {
            return Err(Error::InvalidArgument(
                "scalar integration step underflow".into(),
            ));
        }
    }
    Err(Error::InvalidArgument(
        "scalar trajectory did not reach its target".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayStatus {
    /// Every requested mode has a positive growth rate along the path.
    Verified,
    Violated,
    /// `ε` does not exceed `sup|f'| / λ₁`; no verdict.
    BoundNotSatisfied,
    /// No modes were requested.
    Empty,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModeMargin {
    pub mode: usize,
    pub lambda: f64,
    /// `min_t ε λ_k + f'(w(t))`.
    pub margin: f64,
    /// The linearized amplitude grows strictly along the sampled path.
    pub monotone: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModeDecayReport {
    pub epsilon: f64,
    /// `sup_{[-T0, T0]} |f'| / λ₁`.
    pub bound: f64,
    pub lambda1: f64,
    pub modes: Vec<ModeMargin>,
    pub min_margin: Option<f64>,
    pub status: DecayStatus,
}

/// Checks that along `w` every nonconstant mode `k ≤ modes` of the
/// linearized flow `φ_k' = (ελ_k + f'(w)) φ_k` grows, so that no bounded
/// nonconstant kernel element exists.
pub fn mode_decay_check(
    prob: &Problem,
    w: &ScalarTrajectory,
    modes: usize,
) -> Result<ModeDecayReport> {
    if w.values.is_empty() || w.values.len() != w.times.len() {
        return Err(Error::InvalidArgument(
            "empty or inconsistent trajectory".into(),
        ));
    }
    let eps = prob.epsilon();
    let p = prob.potential();
    let spec = eigen_solve(&prob.neg_laplacian(), modes.max(1) + 1)?;
    let lambda1 = spec.eigenvalues[1];
    let bound = p.fprime_sup() / lambda1;
    let mut report = ModeDecayReport {
        epsilon: eps,
        bound,
        lambda1,
        modes: Vec::new(),
        min_margin: None,
        status: DecayStatus::Empty,
    };
    if modes == 0 {
        return Ok(report);
    }
    if eps <= bound {
        report.status = DecayStatus::BoundNotSatisfied;
        return Ok(report);
    }
    // w is monotone, so it sweeps the whole interval between its ends
    let (first, last) = (w.values[0], *w.values.last().unwrap());
    let fmin = p.fprime_range(first, last).0;
    let rates: Vec<f64> = w.values.iter().map(|&v| p.fprime(v)).collect();
    for (k, &lambda) in spec.eigenvalues.iter().enumerate().skip(1).take(modes) {
        let mut log_amp = 0.0;
        let mut monotone = true;
        for i in 1..w.times.len() {
            let dt = w.times[i] - w.times[i - 1];
            let incr = 0.5 * dt * (2.0 * eps * lambda + rates[i] + rates[i - 1]);
            monotone &= incr > 0.0;
            log_amp += incr;
        }
        debug_assert!(log_amp.is_finite());
        report.modes.push(ModeMargin {
            mode: k,
            lambda,
            margin: eps * lambda + fmin,
            monotone,
        });
    }
    let min_margin = report
        .modes
        .iter()
        .map(|m| m.margin)
        .fold(f64::INFINITY, f64::min);
    report.min_margin = Some(min_margin);
    report.status = if min_margin > 0.0 && report.modes.iter().all(|m| m.monotone) {
        DecayStatus::Verified
    } else {
        DecayStatus::Violated
    };
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectionOptions {
    /// Directions sampled on the unstable circle of an index-2 source.
    pub samples: usize,
    pub rng_seed: u64,
    /// Launch amplitude in sup norm; `1e-3 T0` when unset.
    pub delta: Option<f64>,
    /// Halvings of the launch amplitude allowed while limits disagree.
    pub max_halvings: usize,
    /// Angular resolution when bisecting between basins.
    pub angle_tol: f64,
    pub flow: FlowOptions,
}

impl Default for ConnectionOptions {
    fn default() -> Self {
        Self {
            samples: 16,
            rng_seed: 0,
            delta: None,
            max_halvings: 3,
            angle_tol: 1e-6,
            flow: FlowOptions {
                record_every: usize::MAX,
                ..FlowOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LaunchLimit {
    Solution { id: usize },
    UnknownEquilibrium,
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaunchKind {
    /// A flow launched along an unstable direction; its limit is recorded.
    Direct,
    /// A flow on the boundary between two basins on the unstable circle;
    /// the recorded limit is the saddle it passes.
    BasinBoundary,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LaunchRecord {
    pub kind: LaunchKind,
    /// Angle on the unstable circle, or `0`/`π` for the two index-1 launches.
    pub angle: f64,
    pub delta: f64,
    pub limit: LaunchLimit,
}

/// The mod-2 number of flow lines from `from` to `to`, with the launches
/// it was read off.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConnectionCount {
    pub from: usize,
    pub to: usize,
    pub parity: u8,
    pub reaching: usize,
    /// Index-1 source with every launch resolved.
    pub exact: bool,
    /// No launch was unresolved.
    pub reliable: bool,
    pub launches: Vec<LaunchRecord>,
    pub notes: Vec<String>,
}

/// Counts flow lines from `solutions[from]` to `solutions[to]` modulo 2.
pub fn connection_count_mod2(
    prob: &Problem,
    solutions: &[SolutionPoint],
    from: usize,
    to: usize,
    opts: &ConnectionOptions,
) -> Result<ConnectionCount> {
    let all = connections_from(prob, solutions, from, opts)?;
    let source = &solutions[from];
    let target = solutions
        .get(to)
        .ok_or_else(|| Error::InvalidArgument(format!("no solution {to}")))?;
    if target.nullity > 0 {
        return Err(Error::DegenerateGenerator {
            id: to,
            nullity: target.nullity,
        });
    }
    if target.index + 1 != source.index {
        return Err(Error::InvalidArgument(format!(
            "target index {} is not source index {} minus one",
            target.index, source.index
        )));
    }
    Ok(all
        .into_iter()
        .find(|c| c.to == to)
        .expect("every index k-1 target is counted"))
}

/// Counts flow lines from `solutions[from]` to every solution of index one
/// lower. Index-1 sources are exact: the two launches `±δφ` along the
/// unstable eigenfield. Index-2 sources sample the unstable circle and
/// bisect between basins of index-0 limits; those counts are heuristic.
pub fn connections_from(
    prob: &Problem,
    solutions: &[SolutionPoint],
    from: usize,
    opts: &ConnectionOptions,
) -> Result<Vec<ConnectionCount>> {
    let source = solutions
        .get(from)
        .ok_or_else(|| Error::InvalidArgument(format!("no solution {from}")))?;
    if source.nullity > 0 {
        return Err(Error::DegenerateGenerator {
            id: from,
            nullity: source.nullity,
        });
    }
    let k = source.index;
    if k == 0 {
        return Err(Error::InvalidArgument(
            "a source of index 0 has no unstable direction".into(),
        ));
    }
    let p = prob.with_epsilon(source.epsilon)?;
    let h = p.hessian_values(source.values());
    let spec = eigen_solve(&h, k)?;
    let dirs: Vec<Vec<f64>> = spec.eigenvectors[..k]
        .iter()
        .map(|v| sup_normalized(v))
        .collect();
    let delta = opts.delta.unwrap_or(LAUNCH_DELTA * p.potential().t0());
    let targets: Vec<usize> = (0..solutions.len())
        .filter(|&i| solutions[i].index + 1 == k && solutions[i].nullity == 0)
        .collect();
    let mut notes = Vec::new();
    let launches = match k {
        1 => [0.0, std::f64::consts::PI]
            .par_iter()
            .map(|&angle| resolve_launch(&p, source.values(), &dirs, angle, delta, solutions, opts))
            .collect::<Result<Vec<_>>>()?,
        2 => circle_launches(&p, source.values(), &dirs, delta, solutions, opts)?,
        _ => {
            notes.push(format!(
                "index-{k} sources are not sampled; counts unresolved"
            ));
            vec![LaunchRecord {
                kind: LaunchKind::BasinBoundary,
                angle: 0.0,
                delta,
                limit: LaunchLimit::Unresolved,
            }]
        }
    };
    let counted_kind = if k == 1 {
        LaunchKind::Direct
    } else {
        LaunchKind::BasinBoundary
    };
    let reliable = launches.iter().all(|l| l.limit != LaunchLimit::Unresolved)
        && (k == 1
            || launches
                .iter()
                .all(|l| l.limit != LaunchLimit::UnknownEquilibrium));
    if k == 2 {
        notes.push("index-2 counts come from sampling the unstable circle".into());
    }
    Ok(targets
        .into_iter()
        .map(|to| {
            let reaching = launches
                .iter()
                .filter(|l| l.kind == counted_kind && l.limit == LaunchLimit::Solution { id: to })
                .count();
            ConnectionCount {
                from,
                to,
                parity: (reaching % 2) as u8,
                reaching,
                exact: k == 1 && reliable,
                reliable,
                launches: launches.clone(),
                notes: notes.clone(),
            }
        })
        .collect())
}

/// Scales `v` to unit sup norm with its largest entry positive.
fn sup_normalized(v: &[f64]) -> Vec<f64> {
    let peak = v
        .iter()
        .copied()
        .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    v.iter().map(|x| x / peak).collect()
}

fn launch_state(base: &[f64], dirs: &[Vec<f64>], angle: f64, delta: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut u = base.to_vec();
    for (i, ui) in u.iter_mut().enumerate() {
        let d = if dirs.len() >= 2 {
            c * dirs[0][i] + s * dirs[1][i]
        } else {
            c * dirs[0][i]
        };
        *ui += delta * d;
    }
    u
}

fn launch(
    prob: &Problem,
    base: &[f64],
    dirs: &[Vec<f64>],
    angle: f64,
    delta: f64,
    solutions: &[SolutionPoint],
    opts: &ConnectionOptions,
) -> Result<LaunchLimit> {
    limit_of(
        prob,
        launch_state(base, dirs, angle, delta),
        solutions,
        opts,
    )
}

/// Launches at `delta`, halving while the limit changes with the amplitude.
fn resolve_launch(
    prob: &Problem,
    base: &[f64],
    dirs: &[Vec<f64>],
    angle: f64,
    delta: f64,
    solutions: &[SolutionPoint],
    opts: &ConnectionOptions,
) -> Result<LaunchRecord> {
    let mut d = delta;
    let mut prev = launch(prob, base, dirs, angle, d, solutions, opts)?;
    for _ in 0..opts.max_halvings {
        let next = launch(prob, base, dirs, angle, 0.5 * d, solutions, opts)?;
        if next == prev {
            return Ok(LaunchRecord {
                kind: LaunchKind::Direct,
                angle,
                delta: d,
                limit: prev,
            });
        }
        d *= 0.5;
        prev = next;
    }
    Ok(LaunchRecord {
        kind: LaunchKind::Direct,
        angle,
        delta: d,
        limit: LaunchLimit::Unresolved,
    })
}

/// Samples the unstable circle of an index-2 source and bisects every
/// change of limit down to `opts.angle_tol`. The flow on a basin boundary
/// converges to a saddle of index 1, which is recorded as the boundary's
/// limit.
fn circle_launches(
    prob: &Problem,
    base: &[f64],
    dirs: &[Vec<f64>],
    delta: f64,
    solutions: &[SolutionPoint],
    opts: &ConnectionOptions,
) -> Result<Vec<LaunchRecord>> {
    let m = opts.samples.max(3);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let offset: f64 = rng.gen_range(0.0..std::f64::consts::TAU / m as f64);
    let angles: Vec<f64> = (0..m)
        .map(|j| offset + std::f64::consts::TAU * j as f64 / m as f64)
        .collect();
    let limits = angles
        .par_iter()
        .map(|&a| launch(prob, base, dirs, a, delta, solutions, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<LaunchRecord> = angles
        .iter()
        .zip(&limits)
        .map(|(&angle, &limit)| LaunchRecord {
            kind: LaunchKind::Direct,
            angle,
            delta,
            limit,
        })
        .collect();
    let boundaries: Vec<(f64, f64, LaunchLimit)> = (0..m)
        .filter(|&j| limits[j] != limits[(j + 1) % m])
        .map(|j| {
            let hi = if j + 1 == m {
                angles[0] + std::f64::consts::TAU
            } else {
                angles[j + 1]
            };
            (angles[j], hi, limits[j])
        })
        .collect();
    let crossings = boundaries
        .par_iter()
        .map(|&(mut lo, mut hi, lo_limit)| -> Result<LaunchRecord> {
            while hi - lo > opts.angle_tol {
                let mid = 0.5 * (lo + hi);
                if launch(prob, base, dirs, mid, delta, solutions, opts)? == lo_limit {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let a = launch_state(base, dirs, lo, delta);
            let b = launch_state(base, dirs, hi, delta);
            Ok(LaunchRecord {
                kind: LaunchKind::BasinBoundary,
                angle: 0.5 * (lo + hi),
                delta,
                limit: edge_track(prob, base, a, b, lo_limit, solutions, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.extend(crossings);
    Ok(records)
}

fn limit_of(
    prob: &Problem,
    u: Vec<f64>,
    solutions: &[SolutionPoint],
    opts: &ConnectionOptions,
) -> Result<LaunchLimit> {
    let traj = integrate(prob, &prob.field(u)?, solutions, &opts.flow)?;
    Ok(match traj.outcome {
        FlowOutcome::Converged { target, .. } => LaunchLimit::Solution { id: target },
        FlowOutcome::UnknownEquilibrium => LaunchLimit::UnknownEquilibrium,
        FlowOutcome::Unresolved => LaunchLimit::Unresolved,
    })
}

/// Follows the orbit on the boundary between two basins by edge
/// tracking: bisect the segment between a pair of states with different
/// limits, advance both in lockstep until they separate, and restart from
/// the last close pair. The orbit converges to a saddle, which is polished
/// by Newton once the residual is small and matched against `solutions`.
fn edge_track(
    prob: &Problem,
    source: &[f64],
    mut a: Vec<f64>,
    mut b: Vec<f64>,
    a_limit: LaunchLimit,
    solutions: &[SolutionPoint],
    opts: &ConnectionOptions,
) -> Result<LaunchLimit> {
    let w = prob.weights();
    let scale = w.iter().sum::<f64>().sqrt() * prob.potential().t0().max(1.0);
    let dt = opts
        .flow
        .dt_max
        .unwrap_or_else(|| default_dt(prob.potential()));
    let fac = imex_factor(prob, dt)?;
    let midpoint = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
    };
    // the pair starts next to the source, which must not be mistaken for
    // the saddle; polishing back onto it pushes this radius out
    let mut away = 2.0 * distance(&midpoint(&a, &b), source, w);
    for _ in 0..EDGE_ROUNDS {
        while distance(&a, &b, w) > 1e-12 * scale {
            let mid = midpoint(&a, &b);
            if limit_of(prob, mid.clone(), solutions, opts)? == a_limit {
                a = mid;
            } else {
                b = mid;
            }
        }
        let (mut close_a, mut close_b) = (a.clone(), b.clone());
        for _ in 0..opts.flow.max_steps {
            let mid = midpoint(&a, &b);
            let from_source = distance(&mid, source, w);
            if from_source > away && prob.residual_norm(&mid) <= EDGE_POLISH * scale {
                match polish(prob, mid) {
                    Some(u) if distance(&u, source, w) > opts.flow.match_tol => {
                        return Ok(match nearest(&u, solutions, w) {
                            Some((id, d)) if d <= opts.flow.match_tol => {
                                LaunchLimit::Solution { id }
                            }
                            _ => LaunchLimit::UnknownEquilibrium,
                        })
                    }
                    _ => away = 2.0 * from_source,
                }
            }
            a = imex_apply(prob, &fac, &a, dt);
            b = imex_apply(prob, &fac, &b, dt);
            let d = distance(&a, &b, w);
            if d > 1e-3 * scale {
                break;
            }
            if d < 1e-5 * scale {
                close_a.clone_from(&a);
                close_b.clone_from(&b);
            }
        }
        a = close_a;
        b = close_b;
    }
    Ok(LaunchLimit::Unresolved)
}

fn polish(prob: &Problem, u: Vec<f64>) -> Option<Vec<f64>> {
    newton_raw(prob, u, &NewtonOptions::default())
        .ok()
        .map(|(u, _)| u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{MetricField, TorusGrid};
    use crate::solver::constant_solutions;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn circle(eps: f64, n: usize, pot: Potential) -> Problem {
        let grid = Arc::new(TorusGrid::circle(2.0 * PI, n).unwrap());
        Problem::new(eps, MetricField::euclidean(grid), pot).unwrap()
    }

    #[test]
    fn constant_one_is_fixed() {
        let p = circle(0.5, 32, Potential::cubic());
        let u = ScalarField::constant(p.grid().clone(), 1.0);
        let v = flow_step(&p, &u, 0.3).unwrap();
        assert!(v.values().iter().all(|&x| (x - 1.0).abs() < 1e-14));
    }

    #[test]
    fn half_rises_toward_one() {
        let p = circle(0.5, 16, Potential::cubic());
        let u = ScalarField::constant(p.grid().clone(), 0.5);
        let v = flow_step(&p, &u, 0.1).unwrap();
        // explicit Euler on the constant mode: 0.5 + 0.1 * 0.375
        assert!(v.values().iter().all(|&x| (x - 0.5375).abs() < 1e-14));
    }

    #[test]
    fn fixed_points_are_solutions() {
        let p = circle(0.5, 24, Potential::cubic());
        let u = ScalarField::from_fn(p.grid().clone(), |x| 0.3 * x[0].cos());
        let v = flow_step(&p, &u, 0.2).unwrap();
        let moved = v
            .values()
            .iter()
            .zip(u.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(moved > 1e-3);
        // the step moves by dt (W + dt εS)⁻¹ W R(u)
        let r = p.residual_values(u.values());
        let fac = imex_factor(&p, 0.2).unwrap();
        let wr: Vec<f64> = r
            .iter()
            .zip(p.weights())
            .map(|(r, w)| 0.2 * r * w)
            .collect();
        let expect = fac.solve(&wr);
        for ((a, b), e) in u.values().iter().zip(v.values()).zip(&expect) {
            assert!((a - b - e).abs() < 1e-13);
        }
    }

    #[test]
    fn high_mode_decays_at_linear_rate() {
        let n = 64;
        let (eps, dt, k) = (0.3, 1e-3, 5.0);
        let p = circle(eps, n, Potential::cubic());
        let h = 2.0 * PI / n as f64;
        let lambda = 2.0 / (h * h) * (1.0 - (k * h).cos());
        let amp = 1e-7;
        let u = ScalarField::from_fn(p.grid().clone(), |x| 1.0 + amp * (k * x[0]).cos());
        let v = flow_step(&p, &u, dt).unwrap();
        let ratio = (v.values()[0] - 1.0) / amp;
        // one IMEX step multiplies the mode by (1 - dt f'(1)) / (1 + dt ε λ)
        let expect = (1.0 - 2.0 * dt) / (1.0 + dt * eps * lambda);
        assert!((ratio - expect).abs() < 1e-5, "{ratio} vs {expect}");
        let rate = -(ratio.ln()) / dt;
        assert!((rate - (eps * lambda + 2.0)).abs() / (eps * lambda + 2.0) < 0.02);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let p = circle(0.5, 8, Potential::cubic());
        let u = ScalarField::constant(p.grid().clone(), 0.2);
        assert!(flow_step(&p, &u, 0.0).is_err());
        assert!(flow_step(&p, &u, -1.0).is_err());
    }

    #[test]
    fn flow_from_bump_reaches_a_constant() {
        let p = circle(1.5, 32, Potential::cubic());
        let known = constant_solutions(&p).unwrap();
        let u0 = ScalarField::from_fn(p.grid().clone(), |x| 0.3 + 0.2 * x[0].sin());
        let traj = integrate(&p, &u0, &known, &FlowOptions::default()).unwrap();
        assert!(matches!(
            traj.outcome,
            FlowOutcome::Converged { target: 2, .. }
        ));
        assert!(traj
            .energies
            .windows(2)
            .all(|e| e[1] <= e[0] + ENERGY_SLACK * (1.0 + e[0].abs())));
        assert!(traj.last().sup_norm() <= 1.0 + 1e-6);
    }

    fn closed_form(t: f64, t0: f64) -> f64 {
        (1.0 + (-2.0 * (t - t0)).exp()).powf(-0.5)
    }

    #[test]
    fn scalar_trajectory_matches_closed_form() {
        let tr = space_constant_trajectory(&Potential::cubic(), 0.0, 1.0).unwrap();
        // w(0) = w0 fixes the shift: t0 = ln(1/w0² - 1) / 2
        let w0 = tr.values[0];
        let t0 = 0.5 * (1.0 / (w0 * w0) - 1.0).ln();
        let err = tr
            .times
            .iter()
            .zip(&tr.values)
            .map(|(&t, &w)| (w - closed_form(t, t0)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
        assert!(tr.values.windows(2).all(|w| w[1] > w[0]));
        assert!((tr.values.last().unwrap() - 1.0).abs() < SCALAR_TARGET_TOL);
    }

    #[test]
    fn scalar_trajectory_to_minus_one_is_mirrored() {
        let up = space_constant_trajectory(&Potential::cubic(), 0.0, 1.0).unwrap();
        let down = space_constant_trajectory(&Potential::cubic(), 0.0, -1.0).unwrap();
        assert_eq!(up.times, down.times);
        assert!(up.values.iter().zip(&down.values).all(|(a, b)| a == &-b));
    }

    #[test]
    fn scalar_trajectory_rejections() {
        let p = Potential::cubic();
        assert!(space_constant_trajectory(&p, 1.0, 0.0).is_err());
        assert!(space_constant_trajectory(&p, 0.5, 1.0).is_err());
        let q = Potential::quintic();
        let z: Vec<f64> = q.zeros().iter().map(|z| z.value).collect();
        // c2 to c5 crosses c3 and c4
        assert!(space_constant_trajectory(&q, z[1], z[4]).is_err());
        assert!(space_constant_trajectory(&q, z[1], z[2]).is_ok());
    }

    #[test]
    fn mode_margins_at_large_epsilon() {
        let p = circle(3.0, 128, Potential::cubic());
        let w = space_constant_trajectory(p.potential(), 0.0, 1.0).unwrap();
        let rep = mode_decay_check(&p, &w, 4).unwrap();
        assert_eq!(rep.status, DecayStatus::Verified);
        let h = 2.0 * PI / 128.0;
        let lambda1 = 2.0 / (h * h) * (1.0 - h.cos());
        // the smallest rate is at w = 0 where f' = -1
        assert!((rep.min_margin.unwrap() - (3.0 * lambda1 - 1.0)).abs() < 1e-9);
        assert_eq!(rep.modes.len(), 4);
    }

    #[test]
    fn mode_check_gates_on_bound() {
        let p = circle(1.0, 64, Potential::cubic());
        let w = space_constant_trajectory(p.potential(), 0.0, 1.0).unwrap();
        assert_eq!(
            mode_decay_check(&p, &w, 3).unwrap().status,
            DecayStatus::BoundNotSatisfied
        );
        let q = circle(3.0, 64, Potential::cubic());
        let rep = mode_decay_check(&q, &w, 0).unwrap();
        assert_eq!(rep.status, DecayStatus::Empty);
        assert!(rep.modes.is_empty());
    }

    #[test]
    fn cubic_saddle_connects_to_both_minima() {
        let p = circle(3.0, 32, Potential::cubic());
        let sols = constant_solutions(&p).unwrap();
        let opts = ConnectionOptions::default();
        let counts = connections_from(&p, &sols, 1, &opts).unwrap();
        assert_eq!(counts.len(), 2);
        for c in &counts {
            assert!(c.exact);
            assert_eq!(c.parity, 1);
        }
        let mut limits: Vec<LaunchLimit> = counts[0].launches.iter().map(|l| l.limit).collect();
        limits.sort_by_key(|l| match l {
            LaunchLimit::Solution { id } => *id,
            _ => usize::MAX,
        });
        assert_eq!(
            limits,
            vec![
                LaunchLimit::Solution { id: 0 },
                LaunchLimit::Solution { id: 2 }
            ]
        );
        let one = connection_count_mod2(&p, &sols, 1, 2, &opts).unwrap();
        assert_eq!((one.parity, one.reaching), (1, 1));
    }

    #[test]
    fn quintic_saddle_connects_to_its_neighbours() {
        let p = circle(10.0, 16, Potential::quintic());
        let sols = constant_solutions(&p).unwrap();
        let counts = connections_from(&p, &sols, 1, &ConnectionOptions::default()).unwrap();
        let hit: Vec<(usize, u8)> = counts.iter().map(|c| (c.to, c.parity)).collect();
        assert_eq!(hit, vec![(0, 1), (2, 1), (4, 0)]);
    }

    #[test]
    fn index_zero_source_is_rejected() {
        let p = circle(3.0, 16, Potential::cubic());
        let sols = constant_solutions(&p).unwrap();
        assert!(connections_from(&p, &sols, 0, &ConnectionOptions::default()).is_err());
        assert!(connection_count_mod2(&p, &sols, 1, 1, &ConnectionOptions::default()).is_err());
    }
}
