//! The `acmorse` command line: configuration, subcommands and output files.
//!
//! Every subcommand reads a TOML run config, computes in parallel where the
//! library does, and writes its files from the calling thread once the
//! results are in. Exit status is 0 on success, 2 when a verification
//! fails and 1 on any error.

pub mod config;
pub mod io;
pub mod plot;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{connections_from, integrate, FlowOutcome};
use crate::homology::{
    assemble_complex, homology_ranks, homology_ranks_heuristic, parity_report, Reliability,
};
use crate::linalg::weighted_dot;
use crate::operator::Problem;
use crate::solver::{
    branch_switch, constant_solutions, continue_branch, continue_from_seed, distance,
    search_solutions, spectrum_beyond, verify_bifurcation_theorem, Branch, BranchEvent, EventKind,
    SolutionPoint, SolutionSummary, Verdict,
};
use crate::spectrum::{eigen_solve, singular_epsilons};

pub use config::RunConfig;
use io::{fmt, write_field_csv, write_json, Table};
use plot::{Diagram, Mark};

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status of a malformed invocation or a failed computation.
pub const EXIT_ERROR: i32 = 1;
/// Exit status of a verification that ran and failed.
pub const EXIT_FAIL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "acmorse",
    version,
    about = "Allen-Cahn solutions, Morse indices and Z2 Morse homology on flat tori"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "ACMORSE_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed; overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Eigenvalues of -Δ_g and the singular parameters in `run.window`.
    Spectrum,
    /// Solutions at `run.epsilon` with their indices and energies.
    Solve,
    /// Solutions at evenly spaced parameters across `run.window`.
    Sweep,
    /// Branches from the constants across `run.window`, switched at branch points.
    Continue,
    /// Gradient flow from `initial` at `run.epsilon`.
    Flow,
    /// Connection counts, the chain complex and its homology at `run.epsilon`.
    Homology,
    /// Checks the index-pair count and the sup bound at `run.epsilon`.
    Verify,
}

enum Status {
    Success,
    Failed,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Error::Config(format!("--threads {n}: {e}"))),
        },
        None => execute(&cli),
    };
    match result {
        Ok(Status::Success) => EXIT_OK,
        Ok(Status::Failed) => EXIT_FAIL,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn execute(cli: &Cli) -> Result<Status> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    cfg.output.dir = match &cli.out {
        Some(out) => out.clone(),
        None => cfg.resolve(&cfg.output.dir),
    };
    std::fs::create_dir_all(&cfg.output.dir)?;
    match cli.command {
        Command::Spectrum => spectrum(&cfg),
        Command::Solve => solve(&cfg),
        Command::Sweep => sweep(&cfg),
        Command::Continue => continuation(&cfg),
        Command::Flow => flow(&cfg),
        Command::Homology => homology(&cfg),
        Command::Verify => verify(&cfg),
    }
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

fn spectrum(cfg: &RunConfig) -> Result<Status> {
    let prob = cfg.build_problem(cfg.run.epsilon.unwrap_or(1.0))?;
    let lap = prob.neg_laplacian();
    let spec = eigen_solve(&lap, cfg.spectrum.count.min(prob.node_count()))?;
    let mut t = Table::create(
        &out(cfg, "spectrum.csv"),
        &["index", "eigenvalue", "cluster"],
    )?;
    for (k, lam) in spec.eigenvalues.iter().enumerate() {
        t.row([k.to_string(), fmt(*lam), spec.clusters[k].to_string()])?;
    }
    t.finish()?;
    println!("{} eigenvalues of -Δ_g written", spec.len());
    if let Ok((a, b)) = cfg.window() {
        let pot = prob.potential();
        let steepest = pot.zeros().iter().map(|z| -z.slope).fold(0.0, f64::max);
        let long = spectrum_beyond(&lap, steepest / a)?;
        let singular = singular_epsilons(&long, pot, (a, b))?;
        let mut t = Table::create(
            &out(cfg, "singular.csv"),
            &["epsilon", "c", "lambda", "multiplicity"],
        )?;
        for s in &singular {
            t.row([
                fmt(s.epsilon),
                fmt(s.c),
                fmt(s.lambda),
                s.multiplicity.to_string(),
            ])?;
        }
        t.finish()?;
        println!("{} singular parameters in ({a}, {b})", singular.len());
    }
    Ok(Status::Success)
}

/// `sign⟨u, φ₁⟩ ‖u‖∞` with `φ₁` the first nonconstant eigenfield of `-Δ_g`;
/// the sign of the mean when `u` is orthogonal to `φ₁`.
struct Signer {
    phi: Vec<f64>,
    weights: Vec<f64>,
}

impl Signer {
    fn new(prob: &Problem) -> Result<Self> {
        let spec = eigen_solve(&prob.neg_laplacian(), 2.min(prob.node_count()))?;
        let phi = spec.eigenvectors.last().cloned().unwrap_or_default();
        Ok(Self {
            phi,
            weights: prob.weights().to_vec(),
        })
    }

    fn signed(&self, u: &[f64]) -> f64 {
        let sup = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let proj = if self.phi.len() == u.len() {
            weighted_dot(u, &self.phi, &self.weights)
        } else {
            0.0
        };
        let mean: f64 = u.iter().zip(&self.weights).map(|(a, w)| a * w).sum();
        let s = if proj.abs() > 1e-8 * sup.max(1.0) {
            proj
        } else {
            mean
        };
        if s < 0.0 {
            -sup
        } else {
            sup
        }
    }
}

const SOLUTION_HEADER: [&str; 9] = [
    "id",
    "tag",
    "epsilon",
    "index",
    "nullity",
    "energy",
    "sup_norm",
    "signed_sup",
    "residual_norm",
];

fn solution_row(id: usize, s: &SolutionPoint, signer: &Signer) -> [String; 9] {
    [
        id.to_string(),
        s.tag.clone(),
        fmt(s.epsilon),
        s.index.to_string(),
        s.nullity.to_string(),
        fmt(s.energy),
        fmt(s.sup_norm()),
        fmt(signer.signed(s.values())),
        fmt(s.residual_norm),
    ]
}

/// `solutions.csv`, `solutions.json` and a field file per solution.
fn write_solutions(cfg: &RunConfig, prob: &Problem, sols: &[SolutionPoint]) -> Result<()> {
    let signer = Signer::new(prob)?;
    let mut t = Table::create(&out(cfg, "solutions.csv"), &SOLUTION_HEADER)?;
    for (id, s) in sols.iter().enumerate() {
        t.row(solution_row(id, s, &signer))?;
    }
    t.finish()?;
    let summaries: Vec<SolutionSummary> = sols.iter().map(SolutionPoint::summary).collect();
    write_json(&out(cfg, "solutions.json"), &summaries)?;
    if cfg.output.fields {
        let dir = out(cfg, "fields");
        std::fs::create_dir_all(&dir)?;
        for (id, s) in sols.iter().enumerate() {
            write_field_csv(
                &dir.join(format!("solution_{id}.csv")),
                prob.grid(),
                s.values(),
                1,
            )?;
        }
    }
    Ok(())
}

fn solve(cfg: &RunConfig) -> Result<Status> {
    let prob = cfg.build_problem(cfg.epsilon()?)?;
    let sols = search_solutions(&prob, &cfg.search_options())?;
    write_solutions(cfg, &prob, &sols)?;
    println!("{} solutions at ε = {}", sols.len(), prob.epsilon());
    for (k, n) in index_histogram(&sols).iter().enumerate() {
        println!("  index {k}: {n}");
    }
    Ok(Status::Success)
}

fn index_histogram(sols: &[SolutionPoint]) -> Vec<usize> {
    let top = sols.iter().map(|s| s.index).max().map_or(0, |m| m + 1);
    let mut h = vec![0; top];
    for s in sols {
        h[s.index] += 1;
    }
    h
}

fn sweep(cfg: &RunConfig) -> Result<Status> {
    let (a, b) = cfg.window()?;
    let n = cfg.run.sweep_points.max(2);
    let base = cfg.build_problem(b)?;
    let opts = cfg.search_options();
    let grid: Vec<f64> = (0..n)
        .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
        .collect();
    let results: Vec<Vec<SolutionPoint>> = grid
        .par_iter()
        .map(|&eps| search_solutions(&base.with_epsilon(eps)?, &opts))
        .collect::<Result<_>>()?;
    let signer = Signer::new(&base)?;
    let mut t = Table::create(&out(cfg, "sweep.csv"), &SOLUTION_HEADER)?;
    let mut diagram = Diagram {
        title: "solutions across ε".into(),
        ..Diagram::default()
    };
    for sols in &results {
        for (id, s) in sols.iter().enumerate() {
            t.row(solution_row(id, s, &signer))?;
            diagram.points.push(Mark {
                epsilon: s.epsilon,
                value: signer.signed(s.values()),
                index: s.index,
            });
        }
    }
    t.finish()?;
    std::fs::write(out(cfg, "sweep.svg"), diagram.to_svg())?;
    println!(
        "{} solutions over {n} parameters in [{a}, {b}]",
        results.iter().map(Vec::len).sum::<usize>()
    );
    Ok(Status::Success)
}

#[derive(Serialize)]
struct BranchRecord {
    id: usize,
    /// Branch whose event this one was switched off, if any.
    parent: Option<usize>,
    tag: String,
    points: usize,
    epsilon_range: [f64; 2],
    events: Vec<EventRecord>,
}

#[derive(Serialize)]
struct EventRecord {
    arclength: f64,
    epsilon: f64,
    kind: String,
    index_before: usize,
    index_after: usize,
    nullity: usize,
}

impl From<&BranchEvent> for EventRecord {
    fn from(e: &BranchEvent) -> Self {
        Self {
            arclength: e.arclength,
            epsilon: e.epsilon,
            kind: e.kind.to_string(),
            index_before: e.index_before,
            index_after: e.index_after,
            nullity: e.nullity,
        }
    }
}

fn continuation(cfg: &RunConfig) -> Result<Status> {
    let (a, b) = cfg.window()?;
    let ctrl = cfg.continuation;
    let prob = cfg.build_problem(b)?;
    let mut branches: Vec<(Option<usize>, Branch)> = Vec::new();
    for c in constant_solutions(&prob)? {
        if c.nullity > 0 {
            warn!(
                "constant {} is degenerate at ε = {b}; not traced",
                c.sup_norm()
            );
            continue;
        }
        branches.push((None, continue_branch(&prob, &c, -1.0, (a, b), &ctrl)?));
    }
    let primaries = branches.len();
    for parent in 0..primaries {
        let events: Vec<BranchEvent> = branches[parent]
            .1
            .events
            .iter()
            .filter(|e| e.kind == EventKind::BranchPoint)
            .cloned()
            .collect();
        for e in events {
            let Some(at) = &e.point else { continue };
            let seeds = match branch_switch(&prob, at, ctrl.switch_delta) {
                Ok(s) => s,
                Err(err) => {
                    warn!("no switch at ε = {}: {err}", e.epsilon);
                    continue;
                }
            };
            let traced: Vec<Result<Branch>> = seeds
                .par_iter()
                .map(|s| continue_from_seed(&prob, s, (a, b), &ctrl))
                .collect();
            for r in traced {
                match r {
                    Ok(br) => branches.push((Some(parent), br)),
                    Err(err) => warn!("branch from ε = {} abandoned: {err}", e.epsilon),
                }
            }
        }
    }

    let signer = Signer::new(&prob)?;
    let mut diagram = Diagram {
        title: format!("branches over [{a}, {b}]"),
        ..Diagram::default()
    };
    let mut records = Vec::new();
    let bdir = out(cfg, "branches");
    std::fs::create_dir_all(&bdir)?;
    for (id, (parent, br)) in branches.iter().enumerate() {
        write_branch(&bdir.join(format!("branch_{id}.csv")), br)?;
        if cfg.output.fields {
            let fdir = bdir.join(format!("branch_{id}"));
            std::fs::create_dir_all(&fdir)?;
            for (k, p) in br.points.iter().enumerate() {
                write_field_csv(
                    &fdir.join(format!("point_{k}.csv")),
                    prob.grid(),
                    p.values(),
                    1,
                )?;
            }
        }
        diagram.curves.push(
            br.points
                .iter()
                .map(|p| Mark {
                    epsilon: p.epsilon,
                    value: signer.signed(p.values()),
                    index: p.index,
                })
                .collect(),
        );
        let eps = br.points.iter().map(|p| p.epsilon);
        records.push(BranchRecord {
            id,
            parent: *parent,
            tag: br.points.first().map(|p| p.tag.clone()).unwrap_or_default(),
            points: br.points.len(),
            epsilon_range: [
                eps.clone().fold(f64::INFINITY, f64::min),
                eps.fold(f64::NEG_INFINITY, f64::max),
            ],
            events: br.events.iter().map(EventRecord::from).collect(),
        });
    }
    write_json(&out(cfg, "branches.json"), &records)?;
    std::fs::write(out(cfg, "bifurcation.svg"), diagram.to_svg())?;
    println!(
        "{} branches ({} from constants), {} branch points",
        branches.len(),
        primaries,
        records
            .iter()
            .flat_map(|r| &r.events)
            .filter(|e| e.kind == "branch-point")
            .count()
    );
    Ok(Status::Success)
}

/// Branch points interleaved with located events by arclength.
fn write_branch(path: &Path, br: &Branch) -> Result<()> {
    let mut t = Table::create(
        path,
        &[
            "arclength",
            "epsilon",
            "sup_norm",
            "energy",
            "index",
            "nullity",
            "event",
        ],
    )?;
    let mut events = br.events.iter().peekable();
    let event_row = |e: &BranchEvent| -> [String; 7] {
        let (sup, energy) = e
            .point
            .as_ref()
            .map_or((String::new(), String::new()), |p| {
                (fmt(p.sup_norm()), fmt(p.energy))
            });
        [
            fmt(e.arclength),
            fmt(e.epsilon),
            sup,
            energy,
            e.index_after.to_string(),
            e.nullity.to_string(),
            e.kind.to_string(),
        ]
    };
    for (p, &s) in br.points.iter().zip(&br.arclengths) {
        while let Some(e) = events.next_if(|e| e.arclength < s) {
            t.row(event_row(e))?;
        }
        t.row([
            fmt(s),
            fmt(p.epsilon),
            fmt(p.sup_norm()),
            fmt(p.energy),
            p.index.to_string(),
            p.nullity.to_string(),
            String::new(),
        ])?;
    }
    for e in events {
        t.row(event_row(e))?;
    }
    t.finish()
}

#[derive(Serialize)]
struct FlowReport {
    epsilon: f64,
    outcome: FlowOutcome,
    target: Option<SolutionSummary>,
    final_time: f64,
    initial_energy: f64,
    final_energy: f64,
    accepted_steps: usize,
    rejected_steps: usize,
    max_energy_increase: f64,
}

fn flow(cfg: &RunConfig) -> Result<Status> {
    let prob = cfg.build_problem(cfg.epsilon()?)?;
    let u0 = prob.field(cfg.initial_field(prob.grid())?)?;
    let known = search_solutions(&prob, &cfg.search_options())?;
    let traj = integrate(&prob, &u0, &known, &cfg.flow)?;
    let w = prob.weights();
    let mut t = Table::create(
        &out(cfg, "trajectory.csv"),
        &["t", "energy", "sup_norm", "distance_to_nearest"],
    )?;
    for ((time, u), e) in traj.times.iter().zip(&traj.states).zip(&traj.energies) {
        let d = known
            .iter()
            .map(|s| distance(u.values(), s.values(), w))
            .fold(f64::INFINITY, f64::min);
        t.row([fmt(*time), fmt(*e), fmt(u.sup_norm()), fmt(d)])?;
    }
    t.finish()?;
    let target = match traj.outcome {
        FlowOutcome::Converged { target, .. } => Some(known[target].summary()),
        _ => None,
    };
    let report = FlowReport {
        epsilon: prob.epsilon(),
        outcome: traj.outcome,
        target,
        final_time: traj.final_time(),
        initial_energy: traj.energies[0],
        final_energy: *traj.energies.last().unwrap_or(&traj.energies[0]),
        accepted_steps: traj.accepted_steps,
        rejected_steps: traj.rejected_steps,
        max_energy_increase: traj.max_energy_increase,
    };
    write_json(&out(cfg, "flow.json"), &report)?;
    if cfg.output.fields {
        write_field_csv(
            &out(cfg, "flow_final.csv"),
            prob.grid(),
            traj.last().values(),
            1,
        )?;
    }
    println!(
        "flow ran to t = {:.6} in {} steps: {}",
        report.final_time,
        report.accepted_steps,
        serde_json::to_string(&report.outcome).unwrap_or_default()
    );
    Ok(Status::Success)
}

#[derive(Serialize)]
struct HomologyReport {
    epsilon: f64,
    reliability: Reliability,
    ranks: Option<Vec<usize>>,
    refused: Option<String>,
    parity: Option<crate::homology::ParityReport>,
}

/// Constants are the only solutions once `ελ₁` exceeds the largest
/// negative slope of `f` on `[-T0, T0]`; below that a complex of constants
/// may miss generators.
fn check_condensed(prob: &Problem) -> Result<()> {
    let pot = prob.potential();
    let (min_slope, _) = pot.fprime_range(-pot.t0(), pot.t0());
    let lambda1 = eigen_solve(&prob.neg_laplacian(), 2.min(prob.node_count()))?
        .eigenvalues
        .last()
        .copied()
        .unwrap_or(0.0);
    if prob.epsilon() * lambda1 <= -min_slope {
        return Err(Error::UnreliableComplex(format!(
            "homology.constants_only needs ε λ₁ > {} (here ε λ₁ = {}); nonconstant solutions may exist",
            -min_slope,
            prob.epsilon() * lambda1
        )));
    }
    Ok(())
}

fn homology(cfg: &RunConfig) -> Result<Status> {
    let prob = cfg.build_problem(cfg.epsilon()?)?;
    let sols = if cfg.homology.constants_only {
        check_condensed(&prob)?;
        constant_solutions(&prob)?
    } else {
        search_solutions(&prob, &cfg.search_options())?
    };
    write_solutions(cfg, &prob, &sols)?;
    let sources: Vec<usize> = (0..sols.len()).filter(|&i| sols[i].index > 0).collect();
    let complex_counts = sources
        .par_iter()
        .map(|&i| connections_from(&prob, &sols, i, &cfg.connection_options()))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<_> = complex_counts.into_iter().flatten().collect();
    write_json(&out(cfg, "connections.json"), &counts)?;
    let cx = assemble_complex(&sols, &counts)?;
    write_json(&out(cfg, "complex.json"), &cx)?;

    let ranks = match cx.reliability() {
        Reliability::Exact => homology_ranks(&cx),
        Reliability::Heuristic if cfg.homology.accept_heuristic => homology_ranks_heuristic(&cx),
        r => Err(Error::UnreliableComplex(format!(
            "boundary matrices are {r:?}; set homology.accept_heuristic to use sampled counts"
        ))),
    };
    let parity = if prob.potential().is_odd() {
        let zero = SolutionPoint::evaluate(&prob, vec![0.0; prob.node_count()], "zero")?;
        Some(parity_report(&sols, zero.index))
    } else {
        None
    };
    let report = HomologyReport {
        epsilon: prob.epsilon(),
        reliability: cx.reliability(),
        ranks: ranks.as_ref().ok().cloned(),
        refused: ranks.as_ref().err().map(ToString::to_string),
        parity,
    };
    write_json(&out(cfg, "homology.json"), &report)?;
    let ranks = ranks?;
    println!(
        "homology ranks {ranks:?} ({:?} boundary matrices)",
        report.reliability
    );
    if let Some(p) = &report.parity {
        println!("parity check: {}", p.verdict);
        if p.verdict == Verdict::Fail {
            return Ok(Status::Failed);
        }
    }
    Ok(Status::Success)
}

fn verify(cfg: &RunConfig) -> Result<Status> {
    let prob = cfg.build_problem(cfg.epsilon()?)?;
    let sols = search_solutions(&prob, &cfg.search_options())?;
    write_solutions(cfg, &prob, &sols)?;
    let report = verify_bifurcation_theorem(&prob, &sols)?;
    write_json(&out(cfg, "report.json"), &report)?;
    let text = report_text(&report);
    std::fs::write(out(cfg, "report.txt"), &text)?;
    print!("{text}");
    Ok(match report.verdict {
        Verdict::Fail => Status::Failed,
        Verdict::Pass | Verdict::NotApplicable => Status::Success,
    })
}

fn report_text(r: &crate::solver::BifurcationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "epsilon: {}", r.epsilon);
    match r.l {
        Some(l) => {
            let _ = writeln!(s, "index of u = 0: {l}");
        }
        None => {
            let _ = writeln!(s, "index of u = 0: not computed");
        }
    }
    if !r.counts.is_empty() {
        let _ = writeln!(s, "index  solutions  paired");
        for c in &r.counts {
            let _ = writeln!(s, "{:>5}  {:>9}  {:>6}", c.index, c.count, c.paired);
        }
    }
    for (label, list) in [
        ("unpaired", &r.unpaired),
        ("outside the sup bound", &r.out_of_bounds),
        ("degenerate", &r.degenerate),
    ] {
        if !list.is_empty() {
            let _ = writeln!(s, "{label}: {}", list.len());
            for x in list.iter() {
                let _ = writeln!(
                    s,
                    "  {} index {} nullity {} sup {:.6} energy {:.6}",
                    x.tag, x.index, x.nullity, x.sup_norm, x.energy
                );
            }
        }
    }
    if let Some(p) = &r.nearest_singular {
        let _ = writeln!(
            s,
            "nearest singular parameter: {} (c = {}, λ = {}, multiplicity {})",
            p.epsilon, p.c, p.lambda, p.multiplicity
        );
    }
    for n in &r.notes {
        let _ = writeln!(s, "note: {n}");
    }
    let _ = writeln!(s, "verdict: {}", r.verdict);
    s
}
