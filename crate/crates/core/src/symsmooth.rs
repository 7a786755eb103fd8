//! Symmetric bivariate smooths: coefficient partitions, symmetry constraint
//! matrices, reduced designs and penalties, and surface evaluation.
//!
//! A full coefficient block is stored in *partition order*: first the strictly
//! lower entries of the `F_t x F_t'` coefficient matrix (column-major
//! traversal), then the diagonal, then the strictly upper entries traversed so
//! that the k-th upper entry is the mirror of the k-th lower entry.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SymCovError};
use crate::par;
use crate::splinebasis::{MarginalBasis, PenaltyMatrix};

/// Index bookkeeping for one `F_t x F_t'` coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientLayout {
    ft: usize,
    ftp: usize,
    n_lower: usize,
    n_diag: usize,
    n_upper: usize,
    /// partition position -> (b, b')
    positions: Vec<(usize, usize)>,
    /// row-major index `b * ftp + b'` -> partition position
    from_rowmajor: Vec<usize>,
}

impl CoefficientLayout {
    pub fn new(ft: usize, ftp: usize) -> Self {
        let mut positions = Vec::with_capacity(ft * ftp);
        for c in 0..ftp {
            for r in (c + 1)..ft {
                positions.push((r, c));
            }
        }
        let n_lower = positions.len();
        let n_diag = ft.min(ftp);
        positions.extend((0..n_diag).map(|k| (k, k)));
        for r in 0..ft {
            for c in (r + 1)..ftp {
                positions.push((r, c));
            }
        }
        let n_upper = positions.len() - n_lower - n_diag;
        let mut from_rowmajor = vec![0; ft * ftp];
        for (pos, &(r, c)) in positions.iter().enumerate() {
            from_rowmajor[r * ftp + c] = pos;
        }
        Self { ft, ftp, n_lower, n_diag, n_upper, positions, from_rowmajor }
    }

    pub fn square(f: usize) -> Self {
        Self::new(f, f)
    }

    pub fn ft(&self) -> usize {
        self.ft
    }

    pub fn ftp(&self) -> usize {
        self.ftp
    }

    pub fn len(&self) -> usize {
        self.ft * self.ftp
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (lower, diagonal, upper) partition sizes.
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.n_lower, self.n_diag, self.n_upper)
    }

    pub fn position(&self, pos: usize) -> (usize, usize) {
        self.positions[pos]
    }

    pub fn partition_of_rowmajor(&self, idx: usize) -> usize {
        self.from_rowmajor[idx]
    }

    /// Partition-ordered vector to row-major vector.
    pub fn to_rowmajor(&self, partition: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (pos, &(r, c)) in self.positions.iter().enumerate() {
            out[r * self.ftp + c] = partition[pos];
        }
        out
    }

    /// Row-major vector to partition-ordered vector.
    pub fn to_partition(&self, rowmajor: &[f64]) -> Vec<f64> {
        self.positions.iter().map(|&(r, c)| rowmajor[r * self.ftp + c]).collect()
    }

    /// Partition-ordered vector as the coefficient matrix.
    pub fn to_matrix(&self, partition: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.ft, self.ftp);
        for (pos, &(r, c)) in self.positions.iter().enumerate() {
            m[(r, c)] = partition[pos];
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Auto,
    Block { rho: usize },
}

/// Symmetry constraint map. Every row holds exactly one 1, stored as its column.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMatrix {
    col_of_row: Vec<usize>,
    n_cols: usize,
    kind: ConstraintKind,
}

impl ConstraintMatrix {
    pub fn n_rows(&self) -> usize {
        self.col_of_row.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn col_of_row(&self, row: usize) -> usize {
        self.col_of_row[row]
    }

    /// Number of full coefficients tied to each reduced coefficient.
    pub fn column_multiplicities(&self) -> Vec<usize> {
        let mut m = vec![0; self.n_cols];
        for &c in &self.col_of_row {
            m[c] += 1;
        }
        m
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n_rows(), self.n_cols);
        for (r, &c) in self.col_of_row.iter().enumerate() {
            w[(r, c)] = 1.0;
        }
        w
    }

    /// Identity map, for unconstrained fits.
    pub fn identity(n: usize) -> Self {
        Self { col_of_row: (0..n).collect(), n_cols: n, kind: ConstraintKind::Auto }
    }
}

/// `F^2 x F(F+1)/2` constraint for one auto-covariance.
pub fn build_auto_constraint(f: usize) -> ConstraintMatrix {
    let layout = CoefficientLayout::square(f);
    let (nl, nd, _) = layout.counts();
    let mut col_of_row = Vec::with_capacity(f * f);
    col_of_row.extend(0..nl);
    col_of_row.extend(nl..nl + nd);
    col_of_row.extend(0..nl);
    ConstraintMatrix { col_of_row, n_cols: nl + nd, kind: ConstraintKind::Auto }
}

/// Constraint for a `rho`-component term.
///
/// `layouts[s * rho + s']` describes the coefficient block of `K_{ss'}`. Block
/// rows follow `(1,1), (1,2), ..., (rho,rho)`; block columns follow the upper
/// triangle `s <= s'`.
pub fn build_block_constraint(rho: usize, layouts: &[CoefficientLayout]) -> Result<ConstraintMatrix> {
    if rho == 0 || layouts.len() != rho * rho {
        return Err(SymCovError::Dimension(format!(
            "expected {} layouts for rho = {rho}, got {}",
            rho * rho,
            layouts.len()
        )));
    }
    for s in 0..rho {
        for sp in 0..rho {
            let a = &layouts[s * rho + sp];
            let b = &layouts[sp * rho + s];
            if a.ft() != b.ftp() || a.ftp() != b.ft() {
                return Err(SymCovError::Dimension(format!(
                    "blocks ({},{}) and ({},{}) have inconsistent marginal dimensions",
                    s + 1,
                    sp + 1,
                    sp + 1,
                    s + 1
                )));
            }
            if s == sp && a.ft() != a.ftp() {
                return Err(SymCovError::Dimension(format!("auto block ({0},{0}) must be square", s + 1)));
            }
        }
    }
    // column offsets of the upper-triangle groups
    let mut group_offset = vec![vec![usize::MAX; rho]; rho];
    let mut n_cols = 0;
    for s in 0..rho {
        for sp in s..rho {
            group_offset[s][sp] = n_cols;
            let l = &layouts[s * rho + sp];
            n_cols += if s == sp {
                let (nl, nd, _) = l.counts();
                nl + nd
            } else {
                l.len()
            };
        }
    }
    let mut col_of_row = Vec::new();
    for s in 0..rho {
        for sp in 0..rho {
            let l = &layouts[s * rho + sp];
            let (nl, nd, nu) = l.counts();
            if s == sp {
                let off = group_offset[s][s];
                col_of_row.extend((0..nl).map(|k| off + k));
                col_of_row.extend((0..nd).map(|k| off + nl + k));
                col_of_row.extend((0..nu).map(|k| off + k));
            } else if s < sp {
                let off = group_offset[s][sp];
                col_of_row.extend((0..l.len()).map(|k| off + k));
            } else {
                // transposed block: lower <-> upper of the mirror group
                let off = group_offset[sp][s];
                let mirror = &layouts[sp * rho + s];
                let (ml, md, _) = mirror.counts();
                col_of_row.extend((0..nl).map(|k| off + ml + md + k));
                col_of_row.extend((0..nd).map(|k| off + ml + k));
                col_of_row.extend((0..nu).map(|k| off + k));
            }
        }
    }
    Ok(ConstraintMatrix { col_of_row, n_cols, kind: ConstraintKind::Block { rho } })
}

/// `M W`: sums the design columns tied by the constraint.
pub fn reduce_design(m: &DMatrix<f64>, w: &ConstraintMatrix) -> Result<DMatrix<f64>> {
    if m.ncols() != w.n_rows() {
        return Err(SymCovError::Dimension(format!(
            "design has {} columns, constraint has {} rows",
            m.ncols(),
            w.n_rows()
        )));
    }
    let mut out = DMatrix::zeros(m.nrows(), w.n_cols());
    for (j, &c) in w.col_of_row.iter().enumerate() {
        for i in 0..m.nrows() {
            out[(i, c)] += m[(i, j)];
        }
    }
    Ok(out)
}

/// `W^T S W`.
pub fn reduce_penalty(s: &PenaltyMatrix, w: &ConstraintMatrix) -> Result<PenaltyMatrix> {
    let reduced = reduce_gram(&s.matrix, w)?;
    Ok(PenaltyMatrix { matrix: reduced, order: s.order, shape: s.shape })
}

/// `W^T A W` for any square matrix in full coefficient coordinates.
pub fn reduce_gram(a: &DMatrix<f64>, w: &ConstraintMatrix) -> Result<DMatrix<f64>> {
    if a.nrows() != w.n_rows() || a.ncols() != w.n_rows() {
        return Err(SymCovError::Dimension(format!(
            "matrix is {}x{}, constraint has {} rows",
            a.nrows(),
            a.ncols(),
            w.n_rows()
        )));
    }
    let mut out = DMatrix::zeros(w.n_cols(), w.n_cols());
    for (i, &ci) in w.col_of_row.iter().enumerate() {
        for (j, &cj) in w.col_of_row.iter().enumerate() {
            out[(ci, cj)] += a[(i, j)];
        }
    }
    Ok(out)
}

/// `W^T v`.
pub fn reduce_vector(v: &[f64], w: &ConstraintMatrix) -> Result<Vec<f64>> {
    if v.len() != w.n_rows() {
        return Err(SymCovError::Dimension("vector length vs constraint rows".into()));
    }
    let mut out = vec![0.0; w.n_cols()];
    for (i, &c) in w.col_of_row.iter().enumerate() {
        out[c] += v[i];
    }
    Ok(out)
}

/// `W theta_r`.
pub fn expand_coefficients(theta_reduced: &[f64], w: &ConstraintMatrix) -> Result<Vec<f64>> {
    if theta_reduced.len() != w.n_cols() {
        return Err(SymCovError::Dimension(format!(
            "reduced vector has length {}, constraint has {} columns",
            theta_reduced.len(),
            w.n_cols()
        )));
    }
    Ok(w.col_of_row.iter().map(|&c| theta_reduced[c]).collect())
}

/// Least-squares reduction of a full (partition-ordered) vector: averages tied entries.
pub fn project_coefficients(theta_full: &[f64], w: &ConstraintMatrix) -> Result<Vec<f64>> {
    let sums = reduce_vector(theta_full, w)?;
    let mult = w.column_multiplicities();
    Ok(sums.iter().zip(mult).map(|(s, m)| s / m as f64).collect())
}

/// Evaluate `K(t, t') = B_t(t)^T Theta B_t'(t')` on `grid x grid`.
///
/// Only `d <= d'` is computed; the lower triangle is mirrored, so the result
/// is exactly symmetric whatever `theta` is.
pub fn evaluate_surface(
    theta: &DMatrix<f64>,
    basis_t: &MarginalBasis,
    basis_tp: &MarginalBasis,
    grid: &[f64],
) -> Result<DMatrix<f64>> {
    if theta.nrows() != basis_t.dim() || theta.ncols() != basis_tp.dim() {
        return Err(SymCovError::Dimension("coefficient matrix vs bases".into()));
    }
    let d = grid.len();
    let rows_t: Vec<_> = grid.iter().map(|&t| basis_t.eval_sparse(t)).collect::<Result<_>>()?;
    let rows_tp: Vec<_> = grid.iter().map(|&t| basis_tp.eval_sparse(t)).collect::<Result<_>>()?;
    // v[:, k] = Theta * b_tp(t_k)
    let mut v = DMatrix::<f64>::zeros(theta.nrows(), d);
    for (k, row) in rows_tp.iter().enumerate() {
        for (jj, val) in row.values.iter().enumerate() {
            let j = row.start + jj;
            for i in 0..theta.nrows() {
                v[(i, k)] += theta[(i, j)] * val;
            }
        }
    }
    let upper: Vec<Vec<f64>> = par::map_range(d, |a| {
        let row = &rows_t[a];
        (a..d)
            .map(|b| {
                row.values
                    .iter()
                    .enumerate()
                    .map(|(ii, val)| val * v[(row.start + ii, b)])
                    .sum()
            })
            .collect()
    });
    let mut out = DMatrix::zeros(d, d);
    for (a, vals) in upper.into_iter().enumerate() {
        for (off, val) in vals.into_iter().enumerate() {
            out[(a, a + off)] = val;
            out[(a + off, a)] = val;
        }
    }
    Ok(out)
}

/// Symmetric part of a square matrix, used to symmetrize debug dumps.
pub fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Reshape a row-major coefficient vector as an `ft x ftp` matrix.
pub fn rowmajor_matrix(v: &[f64], ft: usize, ftp: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(ft, ftp, v)
}

/// Column vector helper.
pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
