use karst::kron::{rank_of, singular_values, DEFAULT_RANK_TOL};
use karst::numerics::{gaussian_matrix, SeededRng};
use karst::DenseMatrix;
use proptest::prelude::*;

fn oracle_singular_values(m: &DenseMatrix) -> Vec<f64> {
    let mut sv: Vec<f64> = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
        .singular_values()
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

proptest! {
    #[test]
    fn jacobi_matches_nalgebra(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12, rank in 1usize..12) {
        let mut rng = SeededRng::new(seed);
        let rank = rank.min(rows).min(cols);
        let m = gaussian_matrix(&mut rng, rows, rank, 1.0)
            .unwrap()
            .matmul(&gaussian_matrix(&mut rng, rank, cols, 1.0).unwrap())
            .unwrap();
        let ours = singular_values(&m);
        let want = oracle_singular_values(&m);
        prop_assert_eq!(ours.len(), want.len());
        for (a, b) in ours.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10 * want[0].max(1.0), "{:?} vs {:?}", ours, want);
        }
        prop_assert_eq!(rank_of(&m, DEFAULT_RANK_TOL).unwrap(), rank);
    }
}

#[test]
fn zero_matrix_has_rank_zero() {
    assert_eq!(rank_of(&DenseMatrix::zeros(4, 3), DEFAULT_RANK_TOL).unwrap(), 0);
}
