#![allow(dead_code)]

use nalgebra::DMatrix;

#[rustfmt::skip]
pub const GOLDEN_RHO2_F2: [[u8; 10]; 16] = [
    [1,0,0, 0,0,0,0, 0,0,0],
    [0,1,0, 0,0,0,0, 0,0,0],
    [0,0,1, 0,0,0,0, 0,0,0],
    [1,0,0, 0,0,0,0, 0,0,0],
    [0,0,0, 1,0,0,0, 0,0,0],
    [0,0,0, 0,1,0,0, 0,0,0],
    [0,0,0, 0,0,1,0, 0,0,0],
    [0,0,0, 0,0,0,1, 0,0,0],
    [0,0,0, 0,0,0,1, 0,0,0],
    [0,0,0, 0,1,0,0, 0,0,0],
    [0,0,0, 0,0,1,0, 0,0,0],
    [0,0,0, 1,0,0,0, 0,0,0],
    [0,0,0, 0,0,0,0, 1,0,0],
    [0,0,0, 0,0,0,0, 0,1,0],
    [0,0,0, 0,0,0,0, 0,0,1],
    [0,0,0, 0,0,0,0, 1,0,0],
];

#[derive(Clone, Copy)]
pub enum B {
    Z,
    A,
    I,
    P,
}

/// Expand a block pattern with `f x f` coefficient blocks. Sub-blocks have the
/// sizes (lower, diagonal, upper) = (f(f-1)/2, f, f(f-1)/2).
pub fn expand(pattern: &[Vec<B>], f: usize) -> DMatrix<f64> {
    let n = f * (f - 1) / 2;
    let sizes = [n, f, n];
    let full = f * f;
    let auto_cols = n + f;
    let col_width = |j: usize, pat: &[Vec<B>]| -> usize {
        for row in pat {
            match row[j] {
                B::A => return auto_cols,
                B::I | B::P => return full,
                B::Z => {}
            }
        }
        unreachable!()
    };
    let widths: Vec<usize> = (0..pattern[0].len()).map(|j| col_width(j, pattern)).collect();
    let total: usize = widths.iter().sum();
    let mut m = DMatrix::zeros(pattern.len() * full, total);
    let sub_off = |k: usize| sizes[..k].iter().sum::<usize>();
    for (bi, row) in pattern.iter().enumerate() {
        let mut col0 = 0;
        for (bj, b) in row.iter().enumerate() {
            let r0 = bi * full;
            // (sub-row block, sub-col block) pairs carrying an identity
            let pairs: &[(usize, usize)] = match b {
                B::Z => &[],
                B::A => &[(0, 0), (1, 1), (2, 0)],
                B::I => &[(0, 0), (1, 1), (2, 2)],
                B::P => &[(0, 2), (1, 1), (2, 0)],
            };
            for &(sr, sc) in pairs {
                for k in 0..sizes[sr] {
                    m[(r0 + sub_off(sr) + k, col0 + sub_off(sc) + k)] = 1.0;
                }
            }
            col0 += widths[bj];
        }
    }
    m
}

/// Block patterns of the multi-component constraint for two and three components.
pub fn rho2_pattern() -> Vec<Vec<B>> {
    use B::*;
    vec![vec![A, Z, Z], vec![Z, I, Z], vec![Z, P, Z], vec![Z, Z, A]]
}

pub fn rho3_pattern() -> Vec<Vec<B>> {
    use B::*;
    vec![
        vec![A, Z, Z, Z, Z, Z],
        vec![Z, I, Z, Z, Z, Z],
        vec![Z, Z, I, Z, Z, Z],
        vec![Z, P, Z, Z, Z, Z],
        vec![Z, Z, Z, A, Z, Z],
        vec![Z, Z, Z, Z, I, Z],
        vec![Z, Z, P, Z, Z, Z],
        vec![Z, Z, Z, Z, P, Z],
        vec![Z, Z, Z, Z, Z, A],
    ]
}
