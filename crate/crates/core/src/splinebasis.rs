//! Marginal B-spline bases, difference penalties and tensor-product rows.
//!
//! Bivariate coefficients are stored row-major in `(b, b')`: the index of
//! basis pair `(b, b')` is `b * F' + b'`, with `b` the basis index in the
//! first argument `t` and `b'` the basis index in `t'`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SymCovError};
use crate::funcdata::{Domain, MarginalBasisSpec};
use crate::par;

/// Clamped B-spline basis with equidistant interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalBasis {
    degree: usize,
    knots: Vec<f64>,
    dim: usize,
    domain: Domain,
}

/// Nonzero stretch of one basis row: values for indices `start..start + values.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub start: usize,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (k, v) in self.values.iter().enumerate() {
            out[self.start + k] = *v;
        }
        out
    }

    pub fn dot(&self, coef: &[f64]) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| v * coef[self.start + k])
            .sum()
    }
}

impl MarginalBasis {
    pub fn new(domain: Domain, degree: usize, dim: usize) -> Result<Self> {
        if dim < degree + 1 {
            return Err(SymCovError::InvalidSpec(format!(
                "basis dimension {dim} too small for degree {degree}"
            )));
        }
        let n_interior = dim - degree - 1;
        let h = domain.width() / (n_interior + 1) as f64;
        let mut knots = Vec::with_capacity(dim + degree + 1);
        knots.extend(std::iter::repeat(domain.lo).take(degree + 1));
        knots.extend((1..=n_interior).map(|k| domain.lo + k as f64 * h));
        knots.extend(std::iter::repeat(domain.hi).take(degree + 1));
        Ok(Self { degree, knots, dim, domain })
    }

    pub fn from_spec(domain: Domain, spec: &MarginalBasisSpec) -> Result<Self> {
        Self::new(domain, spec.degree, spec.dimension)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    fn check(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * self.domain.width().max(1.0);
        if !t.is_finite() || t < self.domain.lo - tol || t > self.domain.hi + tol {
            return Err(SymCovError::Domain { point: t, lo: self.domain.lo, hi: self.domain.hi });
        }
        Ok(t.clamp(self.domain.lo, self.domain.hi))
    }

    /// Knot span index `mu` with `knots[mu] <= t < knots[mu + 1]`; the right end
    /// of the domain belongs to the last nonempty span.
    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.dim - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // binary search over knots[p..=dim]
        let (mut lo, mut hi) = (p, last + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis values at `t` (at most `degree + 1`).
    pub fn eval_sparse(&self, t: f64) -> Result<SparseRow> {
        let t = self.check(t)?;
        Ok(self.eval_sparse_unchecked(t))
    }

    pub(crate) fn eval_sparse_unchecked(&self, t: f64) -> SparseRow {
        let p = self.degree;
        let mu = self.span(t);
        let mut n = vec![0.0; p + 1];
        n[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = t - self.knots[mu + 1 - j];
            right[j] = self.knots[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        SparseRow { start: mu - p, values: n }
    }

    /// Dense row of all basis values at `t`.
    pub fn eval_row(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.eval_sparse(t)?.to_dense(self.dim))
    }
}

/// Dense `len(points) x F` design matrix, assembled in parallel row blocks.
pub fn eval_bspline_design(basis: &MarginalBasis, points: &[f64]) -> Result<DMatrix<f64>> {
    let blocks = par::chunks(points.len(), 1024);
    let rows: Vec<Result<Vec<SparseRow>>> = par::map(&blocks, |r| {
        points[r.clone()].iter().map(|&t| basis.eval_sparse(t)).collect()
    });
    let mut out = DMatrix::zeros(points.len(), basis.dim());
    let mut i = 0;
    for block in rows {
        for row in block? {
            for (k, v) in row.values.iter().enumerate() {
                out[(i, row.start + k)] = *v;
            }
            i += 1;
        }
    }
    Ok(out)
}

/// What a penalty matrix penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyShape {
    Marginal,
    KronSum,
    KronProd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
    pub order: usize,
    pub shape: PenaltyShape,
}

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.matrix[(i, j)] * x[j];
            }
            s += x[i] * row;
        }
        s
    }
}

/// `m`-th order difference operator, `(F - m) x F`.
pub fn difference_operator(f: usize, m: usize) -> Result<DMatrix<f64>> {
    if m < 1 || m >= f {
        return Err(SymCovError::InvalidSpec(format!(
            "difference order {m} invalid for dimension {f}"
        )));
    }
    let mut d = DMatrix::<f64>::identity(f, f);
    for _ in 0..m {
        let r = d.nrows();
        let mut next = DMatrix::zeros(r - 1, f);
        for i in 0..r - 1 {
            for j in 0..f {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    Ok(d)
}

/// `S = D^T D` for the `m`-th order difference operator.
pub fn difference_penalty(f: usize, m: usize) -> Result<PenaltyMatrix> {
    let d = difference_operator(f, m)?;
    Ok(PenaltyMatrix { matrix: d.transpose() * d, order: m, shape: PenaltyShape::Marginal })
}

/// Row-wise Kronecker product of two basis rows, row-major in `(b, b')`.
pub fn tensor_design_rows(bt_row: &[f64], btp_row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bt_row.len() * btp_row.len());
    for a in bt_row {
        for b in btp_row {
            out.push(a * b);
        }
    }
    out
}

/// `(S_t ⊗ I) + (I ⊗ S_t')` or `S_t ⊗ S_t'`.
///
/// With `require_symmetric` the two marginals must have the same dimension.
pub fn bivariate_penalty(
    s_t: &PenaltyMatrix,
    s_tp: &PenaltyMatrix,
    shape: PenaltyShape,
    require_symmetric: bool,
) -> Result<PenaltyMatrix> {
    let (ft, ftp) = (s_t.dim(), s_tp.dim());
    if require_symmetric && (ft != ftp || s_t.order != s_tp.order) {
        return Err(SymCovError::Dimension(format!(
            "symmetric term needs equal marginals, got {ft} and {ftp}"
        )));
    }
    let matrix = match shape {
        PenaltyShape::KronSum => {
            s_t.matrix.kronecker(&DMatrix::identity(ftp, ftp))
                + DMatrix::<f64>::identity(ft, ft).kronecker(&s_tp.matrix)
        }
        PenaltyShape::KronProd => s_t.matrix.kronecker(&s_tp.matrix),
        PenaltyShape::Marginal => {
            return Err(SymCovError::InvalidSpec("bivariate penalty needs KronSum or KronProd".into()))
        }
    };
    Ok(PenaltyMatrix { matrix, order: s_t.order, shape })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Domain {
        Domain::new(0.0, 1.0).unwrap()
    }

    /// Textbook Cox-de Boor recursion with the 0/0 = 0 convention.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, t: f64, last: usize) -> f64 {
        if p == 0 {
            let (a, b) = (knots[i], knots[i + 1]);
            if (a <= t && t < b) || (i == last && t == b && a < b) {
                return 1.0;
            }
            return 0.0;
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (t - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, t, last);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - t) / d2 * cox_de_boor(knots, i + 1, p - 1, t, last);
        }
        v
    }

    fn rank(m: &DMatrix<f64>) -> usize {
        let e = SymmetricEigen::new(m.clone());
        let max = e.eigenvalues.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
        e.eigenvalues.iter().filter(|v| v.abs() > 1e-9 * max).count()
    }

    #[test]
    fn degree_zero_left_boundary() {
        let b = MarginalBasis::new(unit(), 0, 2).unwrap();
        assert_eq!(b.eval_row(0.0).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn knot_vector_shape() {
        let b = MarginalBasis::new(unit(), 3, 10).unwrap();
        assert_eq!(b.knots().len(), 10 + 3 + 1);
        assert!(b.knots().windows(2).all(|w| w[0] <= w[1]));
        assert!(b.knots()[..4].iter().all(|&k| k == 0.0));
        assert!(b.knots()[10..].iter().all(|&k| k == 1.0));
    }

    #[test]
    fn partition_of_unity_and_sparsity() {
        let b = MarginalBasis::new(unit(), 3, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let t: f64 = rng.gen();
            let row = b.eval_row(t).unwrap();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().filter(|v| **v != 0.0).count() <= 4);
        }
        for t in [0.0, 1.0] {
            assert!((b.eval_row(t).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_cox_de_boor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (deg, dim) in [(3, 10), (2, 7), (1, 4), (3, 5)] {
            let b = MarginalBasis::new(Domain::new(-1.0, 2.0).unwrap(), deg, dim).unwrap();
            for _ in 0..200 {
                let t = rng.gen_range(-1.0..2.0);
                let row = b.eval_row(t).unwrap();
                for (i, v) in row.iter().enumerate() {
                    let o = cox_de_boor(b.knots(), i, deg, t, dim - 1);
                    assert!((v - o).abs() < 1e-13, "deg {deg} i {i} t {t}: {v} vs {o}");
                }
            }
            let row = b.eval_row(2.0).unwrap();
            assert!((row[dim - 1] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn outside_domain_errors() {
        let b = MarginalBasis::new(unit(), 3, 10).unwrap();
        assert!(matches!(b.eval_row(1.5), Err(SymCovError::Domain { .. })));
        assert!(eval_bspline_design(&b, &[0.2, -0.1]).is_err());
    }

    #[test]
    fn design_matrix_rows() {
        let b = MarginalBasis::new(unit(), 3, 10).unwrap();
        let pts: Vec<f64> = (0..2500).map(|k| k as f64 / 2499.0).collect();
        let m = eval_bspline_design(&b, &pts).unwrap();
        for (i, &t) in pts.iter().enumerate() {
            let row = b.eval_row(t).unwrap();
            for j in 0..10 {
                assert_eq!(m[(i, j)], row[j]);
            }
        }
    }

    #[test]
    fn difference_penalty_hand_case() {
        let s = difference_penalty(3, 1).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(s.matrix, expect);
        assert_eq!(rank(&difference_penalty(10, 3).unwrap().matrix), 7);
        assert!(difference_penalty(3, 3).is_err());
    }

    #[test]
    fn difference_penalty_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (f, m) in [(5, 1), (8, 2), (10, 3), (12, 4)] {
            let s = difference_penalty(f, m).unwrap();
            let x: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut d = x.clone();
            for _ in 0..m {
                d = d.windows(2).map(|w| w[1] - w[0]).collect();
            }
            let direct: f64 = d.iter().map(|v| v * v).sum();
            assert!((s.quad_form(&x) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn difference_penalty_null_space_is_polynomials() {
        for (f, m) in [(6, 1), (8, 2), (10, 3)] {
            let s = difference_penalty(f, m).unwrap();
            assert_eq!(rank(&s.matrix), f - m);
            for deg in 0..m {
                let x: Vec<f64> = (0..f).map(|i| (i as f64).powi(deg as i32)).collect();
                assert!(s.quad_form(&x).abs() < 1e-8, "deg {deg} not in null space");
            }
            let x: Vec<f64> = (0..f).map(|i| (i as f64).powi(m as i32)).collect();
            assert!(s.quad_form(&x) > 1e-6);
        }
    }

    #[test]
    fn tensor_rows() {
        assert_eq!(tensor_design_rows(&[1.0, 0.0], &[0.0, 1.0]), vec![0.0, 1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen()).collect();
        let r = tensor_design_rows(&a, &b);
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(r[i * 6 + j], a[i] * b[j]);
            }
        }
        let basis = MarginalBasis::new(unit(), 3, 10).unwrap();
        let row = basis.eval_row(0.37).unwrap();
        let tr = tensor_design_rows(&row, &row);
        assert!((tr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(tr[i * 10 + j], tr[j * 10 + i]);
            }
        }
    }

    #[test]
    fn kron_sum_hand_case() {
        let s = PenaltyMatrix {
            matrix: DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]),
            order: 1,
            shape: PenaltyShape::Marginal,
        };
        let p = bivariate_penalty(&s, &s, PenaltyShape::KronSum, true).unwrap();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[
                2., -1., -1., 0., //
                -1., 2., 0., -1., //
                -1., 0., 2., -1., //
                0., -1., -1., 2.,
            ],
        );
        assert_eq!(p.matrix, expect);
    }

    #[test]
    fn bivariate_ranks_and_null_space() {
        let s = difference_penalty(6, 2).unwrap();
        let sum = bivariate_penalty(&s, &s, PenaltyShape::KronSum, true).unwrap();
        let prod = bivariate_penalty(&s, &s, PenaltyShape::KronProd, true).unwrap();
        assert_eq!(rank(&sum.matrix), 36 - 4);
        assert_eq!(rank(&prod.matrix), 16);
        assert!(36 - rank(&prod.matrix) > 36 - rank(&sum.matrix));
        let ones = vec![1.0; 36];
        assert!(sum.quad_form(&ones).abs() < 1e-12);
        let other = difference_penalty(5, 2).unwrap();
        assert!(bivariate_penalty(&s, &other, PenaltyShape::KronSum, true).is_err());
        assert_eq!(bivariate_penalty(&s, &other, PenaltyShape::KronSum, false).unwrap().dim(), 30);
    }
}
