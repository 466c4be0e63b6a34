use std::sync::Arc;

use proptest::prelude::*;

use acmorse::homology::Z2Matrix;
use acmorse::spectrum::morse_index;
use acmorse::{MetricField, Potential, Problem, TorusGrid};

/// Rank over GF(2) by elimination on bit rows.
fn gf2_rank(rows: &[Vec<u8>]) -> usize {
    let mut bits: Vec<u64> = rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(0u64, |acc, (j, &b)| acc | (u64::from(b & 1) << j))
        })
        .collect();
    let mut rank = 0;
    while let Some(pos) = bits.iter().position(|&b| b != 0) {
        let row = bits.swap_remove(pos);
        let pivot = row & row.wrapping_neg();
        for b in bits.iter_mut() {
            if *b & pivot != 0 {
                *b ^= row;
            }
        }
        rank += 1;
    }
    rank
}

fn transpose(rows: &[Vec<u8>], cols: usize) -> Vec<Vec<u8>> {
    (0..cols)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

fn bit_matrix() -> impl Strategy<Value = (usize, Vec<Vec<u8>>)> {
    (1usize..9, 1usize..9).prop_flat_map(|(m, n)| {
        (
            Just(n),
            prop::collection::vec(prop::collection::vec(0u8..2, n), m),
        )
    })
}

fn circle_problem(n: usize, epsilon: f64, seed: u64, pot: Potential) -> Problem {
    let grid = Arc::new(TorusGrid::circle(2.0 * std::f64::consts::PI, n).unwrap());
    let metric = MetricField::random_conformal(grid, 0.3, seed, Some(3)).unwrap();
    Problem::new(epsilon, metric, pot).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn z2_rank_matches_elimination((cols, rows) in bit_matrix()) {
        let a = Z2Matrix::from_rows(&rows).unwrap();
        prop_assert_eq!(a.rank(), gf2_rank(&rows));
        let at = Z2Matrix::from_rows(&transpose(&rows, cols)).unwrap();
        prop_assert_eq!(a.rank(), at.rank());
    }

    #[test]
    fn z2_product_rank_is_bounded(
        (cols, rows) in bit_matrix(),
        extra in prop::collection::vec(prop::collection::vec(0u8..2, 5), 8),
    ) {
        let a = Z2Matrix::from_rows(&rows).unwrap();
        let b = Z2Matrix::from_rows(&extra[..cols]).unwrap();
        let ab = a.mul(&b).unwrap();
        prop_assert!(ab.rank() <= a.rank().min(b.rank()));
    }

    #[test]
    fn odd_potential_gives_even_energy(
        seed in 0u64..1000,
        epsilon in 0.05f64..3.0,
        quintic in any::<bool>(),
        u in prop::collection::vec(-1.5f64..1.5, 16),
    ) {
        let pot = if quintic { Potential::quintic() } else { Potential::cubic() };
        let p = circle_problem(16, epsilon, seed, pot);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let (e, e_neg) = (p.energy_values(&u), p.energy_values(&neg));
        prop_assert!((e - e_neg).abs() <= 1e-12 * (1.0 + e.abs()));
        let (r, r_neg) = (p.residual_values(&u), p.residual_values(&neg));
        for (a, b) in r.iter().zip(&r_neg) {
            prop_assert!((a + b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
        let (i, i_neg) = (
            morse_index(&p.hessian_values(&u), None).unwrap(),
            morse_index(&p.hessian_values(&neg), None).unwrap(),
        );
        prop_assert_eq!(i, i_neg);
    }

    #[test]
    fn constant_energy_is_potential_times_volume(
        seed in 0u64..1000,
        c in -1.5f64..1.5,
    ) {
        let pot = Potential::cubic();
        let p = circle_problem(16, 0.5, seed, pot.clone());
        let vol: f64 = p.weights().iter().sum();
        let e = p.energy_values(&[c; 16]);
        let want = pot.F(c) * vol;
        prop_assert!((e - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }

    #[test]
    fn flat_torus_energy_is_translation_invariant(
        shift in (0usize..8, 0usize..8),
        u in prop::collection::vec(-1.5f64..1.5, 64),
    ) {
        let grid = Arc::new(TorusGrid::new(vec![3.0, 5.0], vec![8, 8]).unwrap());
        let p = Problem::new(0.7, MetricField::euclidean(grid.clone()), Potential::cubic()).unwrap();
        let moved: Vec<f64> = (0..64)
            .map(|k| {
                let idx = grid.multi_index(k);
                u[grid.node(&[(idx[0] + shift.0) % 8, (idx[1] + shift.1) % 8])]
            })
            .collect();
        let (e, e_moved) = (p.energy_values(&u), p.energy_values(&moved));
        prop_assert!((e - e_moved).abs() <= 1e-12 * (1.0 + e.abs()));
    }
}
