mod common;

use common::{expand, rho2_pattern, rho3_pattern, B, GOLDEN_RHO2_F2};
use nalgebra::DMatrix;
use symcov::symsmooth::{build_auto_constraint, build_block_constraint, CoefficientLayout};

#[test]
fn auto_constraint_matches_golden() {
    let w = build_auto_constraint(3);
    let g = expand(&[vec![B::A]], 3);
    assert_eq!(w.dense(), g);
}

#[test]
fn block_constraint_rho2_matches_literal_golden() {
    let w = build_block_constraint(2, &vec![CoefficientLayout::square(2); 4]).unwrap();
    let golden = DMatrix::from_fn(16, 10, |i, j| GOLDEN_RHO2_F2[i][j] as f64);
    assert_eq!(w.dense(), golden);
    assert_eq!(expand(&rho2_pattern(), 2), golden);
}

#[test]
fn block_constraint_rho2_f4_matches_pattern() {
    let w = build_block_constraint(2, &vec![CoefficientLayout::square(4); 4]).unwrap();
    assert_eq!(w.dense(), expand(&rho2_pattern(), 4));
}

#[test]
fn block_constraint_rho3_matches_pattern() {
    let pattern = rho3_pattern();
    for f in [2, 3, 5] {
        let w = build_block_constraint(3, &vec![CoefficientLayout::square(f); 9]).unwrap();
        let g = expand(&pattern, f);
        assert_eq!((w.n_rows(), w.n_cols()), (g.nrows(), g.ncols()));
        assert_eq!(w.dense(), g, "rho = 3, F = {f}");
    }
}
