//! The Z2 Morse chain complex of a solution set: generators bucketed by
//! index, boundary matrices from mod-2 connection counts, homology ranks
//! by Gaussian elimination over Z2, and the cardinality-parity check that
//! the symmetry `u ↦ -u` forces.

use crate::error::{Error, Result};
use crate::flow::ConnectionCount;
use crate::solver::{SolutionPoint, SolutionSummary, Verdict, DISTINCT_TOL};

/// A dense matrix over Z2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Z2Matrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Z2Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged Z2 matrix".into()));
        }
        let mut m = Self::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j, v % 2 == 1);
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|b| !b)
    }

    /// `self · other` over Z2.
    pub fn mul(&self, other: &Z2Matrix) -> Result<Z2Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidArgument(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Z2Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in (0..self.cols).filter(|&k| self.get(i, k)) {
                for j in 0..other.cols {
                    if other.get(k, j) {
                        let v = out.get(i, j);
                        out.set(i, j, !v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Rank over Z2 by row reduction.
    pub fn rank(&self) -> usize {
        let mut m = self.clone();
        let mut rank = 0;
        for col in 0..m.cols {
            let Some(pivot) = (rank..m.rows).find(|&r| m.get(r, col)) else {
                continue;
            };
            for j in 0..m.cols {
                let (a, b) = (m.get(rank, j), m.get(pivot, j));
                m.set(rank, j, b);
                m.set(pivot, j, a);
            }
            for r in 0..m.rows {
                if r == rank || !m.get(r, col) {
                    continue;
                }
                for j in col..m.cols {
                    let v = m.get(r, j) ^ m.get(rank, j);
                    m.set(r, j, v);
                }
            }
            rank += 1;
        }
        rank
    }
}

impl serde::Serialize for Z2Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reliability {
    /// Every entry is an exact count from an index-1 source.
    Exact,
    /// Entries come from sampled unstable manifolds.
    Heuristic,
    /// Some entry is missing or was not resolved.
    Incomplete,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Generator {
    /// Position in the solution list the complex was built from.
    pub id: usize,
    #[serde(flatten)]
    pub summary: SolutionSummary,
}

/// `∂_k : C_k → C_{k-1}`, with rows indexed by degree `k-1` generators.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Boundary {
    pub degree: usize,
    pub matrix: Z2Matrix,
    pub reliability: Reliability,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ChainComplex {
    /// Generators of `C_k` at position `k`.
    pub generators: Vec<Vec<Generator>>,
    /// `∂_k` at position `k - 1`.
    pub boundaries: Vec<Boundary>,
}

impl ChainComplex {
    pub fn top_degree(&self) -> Option<usize> {
        self.generators.len().checked_sub(1)
    }

    pub fn rank(&self, k: usize) -> usize {
        self.generators.get(k).map_or(0, Vec::len)
    }

    pub fn boundary(&self, k: usize) -> Option<&Boundary> {
        k.checked_sub(1).and_then(|i| self.boundaries.get(i))
    }

    /// The weakest reliability among the boundary matrices.
    pub fn reliability(&self) -> Reliability {
        self.boundaries
            .iter()
            .map(|b| b.reliability)
            .max()
            .unwrap_or(Reliability::Exact)
    }

    /// Checks `∂_k ∘ ∂_{k+1} = 0` in every degree.
    pub fn check_boundary_squared(&self) -> Result<()> {
        for pair in self.boundaries.windows(2) {
            if !pair[0].matrix.mul(&pair[1].matrix)?.is_zero() {
                return Err(Error::BoundarySquareNonZero {
                    degree: pair[0].degree,
                });
            }
        }
        Ok(())
    }
}

/// `‖a - sign·v‖` with the flat cell volume as weight; solutions carry no
/// metric, and distinctness only needs the right scale.
fn flat_distance(a: &SolutionPoint, v: &[f64], sign: f64) -> f64 {
    let cell = a.u.grid().cell_volume();
    let sq: f64 = a
        .values()
        .iter()
        .zip(v)
        .map(|(x, y)| (x - sign * y).powi(2))
        .sum();
    (sq * cell).sqrt()
}

/// Buckets the solutions by index and fills each `∂_k` from the counts.
/// Matrices with a missing or unresolved entry are marked incomplete.
pub fn assemble_complex(
    solutions: &[SolutionPoint],
    counts: &[ConnectionCount],
) -> Result<ChainComplex> {
    if let Some((id, s)) = solutions.iter().enumerate().find(|(_, s)| s.nullity > 0) {
        return Err(Error::DegenerateGenerator {
            id,
            nullity: s.nullity,
        });
    }
    for (i, a) in solutions.iter().enumerate() {
        for (j, b) in solutions.iter().enumerate().skip(i + 1) {
            if flat_distance(a, b.values(), 1.0) <= DISTINCT_TOL {
                return Err(Error::InvalidArgument(format!(
                    "solutions {i} and {j} coincide"
                )));
            }
        }
    }
    let Some(top) = solutions.iter().map(|s| s.index).max() else {
        return Ok(ChainComplex::default());
    };
    let mut generators: Vec<Vec<Generator>> = vec![Vec::new(); top + 1];
    for (id, s) in solutions.iter().enumerate() {
        generators[s.index].push(Generator {
            id,
            summary: s.summary(),
        });
    }
    let boundaries = (1..=top)
        .map(|k| {
            let (rows, cols) = (&generators[k - 1], &generators[k]);
            let mut matrix = Z2Matrix::zeros(rows.len(), cols.len());
            let mut reliability = Reliability::Exact;
            for (j, src) in cols.iter().enumerate() {
                for (i, dst) in rows.iter().enumerate() {
                    match counts.iter().find(|c| c.from == src.id && c.to == dst.id) {
                        Some(c) if c.reliable => {
                            matrix.set(i, j, c.parity == 1);
                            if !c.exact {
                                reliability = reliability.max(Reliability::Heuristic);
                            }
                        }
                        _ => reliability = Reliability::Incomplete,
                    }
                }
            }
            Boundary {
                degree: k,
                matrix,
                reliability,
            }
        })
        .collect();
    Ok(ChainComplex {
        generators,
        boundaries,
    })
}

/// `dim C_k - rank ∂_k - rank ∂_{k+1}` for every degree, after checking
/// `∂² = 0`. Only complexes with exact boundary matrices are accepted.
pub fn homology_ranks(cx: &ChainComplex) -> Result<Vec<usize>> {
    if cx.reliability() != Reliability::Exact {
        return Err(Error::UnreliableComplex(format!(
            "boundary matrices are {:?}",
            cx.reliability()
        )));
    }
    ranks(cx)
}

/// As [`homology_ranks`], but also accepts heuristic boundary matrices.
pub fn homology_ranks_heuristic(cx: &ChainComplex) -> Result<Vec<usize>> {
    if cx.reliability() == Reliability::Incomplete {
        return Err(Error::UnreliableComplex(
            "some connection counts are missing or unresolved".into(),
        ));
    }
    ranks(cx)
}

fn ranks(cx: &ChainComplex) -> Result<Vec<usize>> {
    cx.check_boundary_squared()?;
    let rank_of = |k: usize| cx.boundary(k).map_or(0, |b| b.matrix.rank());
    Ok((0..cx.generators.len())
        .map(|k| cx.rank(k) - rank_of(k) - rank_of(k + 1))
        .collect())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DegreeParity {
    pub degree: usize,
    pub count: usize,
    pub odd: bool,
    pub expected_odd: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ParityReport {
    pub l: usize,
    pub degrees: Vec<DegreeParity>,
    /// Solutions whose negative is not in the set.
    pub unpaired: Vec<SolutionSummary>,
    pub verdict: Verdict,
}

/// Checks that `|C_k|` is odd exactly for `k = l`, the index of `u = 0`:
/// every other solution is paired with its negative.
pub fn parity_report(solutions: &[SolutionPoint], l: usize) -> ParityReport {
    let unpaired: Vec<SolutionSummary> = solutions
        .iter()
        .filter(|s| {
            !solutions
                .iter()
                .any(|t| flat_distance(s, t.values(), -1.0) <= DISTINCT_TOL)
        })
        .map(SolutionPoint::summary)
        .collect();
    let top = solutions.iter().map(|s| s.index).max().unwrap_or(0).max(l);
    let degrees: Vec<DegreeParity> = (0..=top)
        .map(|k| {
            let count = solutions.iter().filter(|s| s.index == k).count();
            DegreeParity {
                degree: k,
                count,
                odd: count % 2 == 1,
                expected_odd: k == l,
            }
        })
        .collect();
    let verdict = if unpaired.is_empty() && degrees.iter().all(|d| d.odd == d.expected_odd) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    ParityReport {
        l,
        degrees,
        unpaired,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{connections_from, ConnectionOptions};
    use crate::grid::{MetricField, TorusGrid};
    use crate::operator::Problem;
    use crate::potential::Potential;
    use crate::solver::constant_solutions;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn circle(eps: f64, n: usize, pot: Potential) -> Problem {
        let grid = Arc::new(TorusGrid::circle(2.0 * PI, n).unwrap());
        Problem::new(eps, MetricField::euclidean(grid), pot).unwrap()
    }

    fn all_counts(p: &Problem, sols: &[SolutionPoint]) -> Vec<ConnectionCount> {
        (0..sols.len())
            .filter(|&i| sols[i].index > 0)
            .flat_map(|i| connections_from(p, sols, i, &ConnectionOptions::default()).unwrap())
            .collect()
    }

    fn count(from: usize, to: usize, parity: u8, exact: bool) -> ConnectionCount {
        ConnectionCount {
            from,
            to,
            parity,
            reaching: parity as usize,
            exact,
            reliable: true,
            launches: Vec::new(),
            notes: Vec::new(),
        }
    }

    #[test]
    fn z2_rank_by_hand() {
        let m = Z2Matrix::from_rows(&[vec![1, 1, 0], vec![0, 1, 1], vec![1, 0, 1]]).unwrap();
        // the third row is the sum of the first two
        assert_eq!(m.rank(), 2);
        assert_eq!(Z2Matrix::zeros(3, 4).rank(), 0);
        let id = Z2Matrix::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        assert_eq!(id.rank(), 2);
        assert_eq!(
            m.mul(&m).unwrap().to_rows(),
            vec![vec![1, 0, 1], vec![1, 1, 0], vec![0, 1, 1]]
        );
    }

    #[test]
    fn cubic_complex_at_large_epsilon() {
        let p = circle(3.0, 32, Potential::cubic());
        let sols = constant_solutions(&p).unwrap();
        let cx = assemble_complex(&sols, &all_counts(&p, &sols)).unwrap();
        let ids: Vec<Vec<usize>> = cx
            .generators
            .iter()
            .map(|g| g.iter().map(|x| x.id).collect())
            .collect();
        assert_eq!(ids, vec![vec![0, 2], vec![1]]);
        assert_eq!(cx.boundaries[0].matrix.to_rows(), vec![vec![1], vec![1]]);
        assert_eq!(cx.reliability(), Reliability::Exact);
        assert_eq!(homology_ranks(&cx).unwrap(), vec![1, 0]);
    }

    #[test]
    fn quintic_complex_at_large_epsilon() {
        let p = circle(10.0, 16, Potential::quintic());
        let sols = constant_solutions(&p).unwrap();
        let cx = assemble_complex(&sols, &all_counts(&p, &sols)).unwrap();
        assert_eq!(cx.rank(0), 3);
        assert_eq!(cx.rank(1), 2);
        assert_eq!(
            cx.boundaries[0].matrix.to_rows(),
            vec![vec![1, 0], vec![1, 1], vec![0, 1]]
        );
        assert_eq!(homology_ranks(&cx).unwrap(), vec![1, 0]);
    }

    #[test]
    fn empty_complex() {
        let cx = assemble_complex(&[], &[]).unwrap();
        assert!(cx.generators.is_empty());
        assert!(homology_ranks(&cx).unwrap().iter().all(|&r| r == 0));
    }

    #[test]
    fn degree_zero_only() {
        let p = circle(3.0, 16, Potential::cubic());
        let sols: Vec<SolutionPoint> = constant_solutions(&p)
            .unwrap()
            .into_iter()
            .filter(|s| s.index == 0)
            .collect();
        let cx = assemble_complex(&sols, &[]).unwrap();
        assert_eq!(homology_ranks(&cx).unwrap(), vec![2]);
    }

    #[test]
    fn missing_counts_refuse_homology() {
        let p = circle(3.0, 16, Potential::cubic());
        let sols = constant_solutions(&p).unwrap();
        let cx = assemble_complex(&sols, &[count(1, 0, 1, true)]).unwrap();
        assert_eq!(cx.reliability(), Reliability::Incomplete);
        assert!(matches!(
            homology_ranks(&cx),
            Err(Error::UnreliableComplex(_))
        ));
        assert!(homology_ranks_heuristic(&cx).is_err());
    }

    #[test]
    fn heuristic_counts_need_opt_in() {
        let p = circle(3.0, 16, Potential::cubic());
        let sols = constant_solutions(&p).unwrap();
        let cx = assemble_complex(&sols, &[count(1, 0, 1, false), count(1, 2, 1, true)]).unwrap();
        assert_eq!(cx.reliability(), Reliability::Heuristic);
        assert!(homology_ranks(&cx).is_err());
        assert_eq!(homology_ranks_heuristic(&cx).unwrap(), vec![1, 0]);
    }

    #[test]
    fn nonzero_boundary_square_is_rejected() {
        let d1 = Z2Matrix::from_rows(&[vec![1], vec![1]]).unwrap();
        let d2 = Z2Matrix::from_rows(&[vec![1]]).unwrap();
        let cx = ChainComplex {
            generators: Vec::new(),
            boundaries: vec![
                Boundary {
                    degree: 1,
                    matrix: d1,
                    reliability: Reliability::Exact,
                },
                Boundary {
                    degree: 2,
                    matrix: d2,
                    reliability: Reliability::Exact,
                },
            ],
        };
        assert!(matches!(
            cx.check_boundary_squared(),
            Err(Error::BoundarySquareNonZero { degree: 1 })
        ));
    }

    #[test]
    fn degenerate_generator_is_rejected() {
        // at ε = 1 the constant 0 has the translation modes in its kernel
        let h = 2.0 * PI / 256.0;
        let lambda1 = 2.0 / (h * h) * (1.0 - h.cos());
        let p = circle(1.0 / lambda1, 256, Potential::cubic());
        let sols = constant_solutions(&p).unwrap();
        assert!(matches!(
            assemble_complex(&sols, &[]),
            Err(Error::DegenerateGenerator { id: 1, .. })
        ));
    }

    #[test]
    fn parity_of_constants() {
        let p = circle(3.0, 16, Potential::cubic());
        let sols = constant_solutions(&p).unwrap();
        let rep = parity_report(&sols, 1);
        assert_eq!(rep.verdict, Verdict::Pass);
        let without_zero: Vec<SolutionPoint> =
            sols.iter().filter(|s| s.index == 0).cloned().collect();
        assert_eq!(parity_report(&without_zero, 1).verdict, Verdict::Fail);
        let lopsided = vec![sols[0].clone(), sols[1].clone()];
        let rep = parity_report(&lopsided, 1);
        assert_eq!(rep.verdict, Verdict::Fail);
        assert_eq!(rep.unpaired.len(), 1);
    }
}
