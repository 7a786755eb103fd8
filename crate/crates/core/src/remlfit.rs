//! Penalized weighted least squares with REML smoothing parameter selection.
//!
//! Everything works on sufficient statistics `X^T W X`, `X^T W c`, `c^T W c`
//! and the weight total `N = sum w`, so the data never need to be stored.
//!
//! Criterion (up to constants):
//! `(N - p0) log RSS_pen + log det(X^T W X + S) - log det+(S)`.

use std::ops::Range;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SymCovError};
use crate::par;

const ZERO_EIG: f64 = 1e-9;

/// How to get `log det+` of a penalty block cheaply.
#[derive(Debug, Clone, PartialEq)]
pub enum LogDetForm {
    /// One smoothing parameter; eigenvalues of the unit penalty.
    Eigen(Vec<f64>),
    /// `l1 (A ⊗ I) + l2 (I ⊗ B)` repeated `copies` times; marginal eigenvalues.
    KronSum { a: Vec<f64>, b: Vec<f64>, copies: usize },
}

fn positive_part(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(0.0_f64, f64::max);
    v.iter().map(|&x| if x > ZERO_EIG * max { x } else { 0.0 }).collect()
}

impl LogDetForm {
    pub fn n_lambda(&self) -> usize {
        match self {
            LogDetForm::Eigen(_) => 1,
            LogDetForm::KronSum { .. } => 2,
        }
    }

    pub fn null_dim(&self) -> usize {
        match self {
            LogDetForm::Eigen(e) => positive_part(e).iter().filter(|&&x| x == 0.0).count(),
            LogDetForm::KronSum { a, b, copies } => {
                let za = positive_part(a).iter().filter(|&&x| x == 0.0).count();
                let zb = positive_part(b).iter().filter(|&&x| x == 0.0).count();
                za * zb * copies
            }
        }
    }

    pub fn logdet_plus(&self, lambdas: &[f64]) -> f64 {
        match self {
            LogDetForm::Eigen(e) => positive_part(e)
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|x| (lambdas[0] * x).ln())
                .sum(),
            LogDetForm::KronSum { a, b, copies } => {
                let (a, b) = (positive_part(a), positive_part(b));
                let mut s = 0.0;
                for x in &a {
                    for y in &b {
                        if *x > 0.0 || *y > 0.0 {
                            s += (lambdas[0] * x + lambdas[1] * y).ln();
                        }
                    }
                }
                s * *copies as f64
            }
        }
    }
}

/// Penalty of one term: `sum_j lambda_j S_j` on columns `range`.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub name: String,
    pub range: Range<usize>,
    pub matrices: Vec<DMatrix<f64>>,
    pub logdet: LogDetForm,
}

#[derive(Debug, Clone)]
pub struct PenalizedSystem {
    pub xtwx: DMatrix<f64>,
    pub xtwc: DVector<f64>,
    pub ctwc: f64,
    /// Total weight; plays the role of the sample size.
    pub sum_w: f64,
    pub n_rows: usize,
    pub blocks: Vec<PenaltyBlock>,
    pub unpenalized: Vec<usize>,
}

impl PenalizedSystem {
    pub fn new(
        xtwx: DMatrix<f64>,
        xtwc: DVector<f64>,
        ctwc: f64,
        sum_w: f64,
        n_rows: usize,
        blocks: Vec<PenaltyBlock>,
        unpenalized: Vec<usize>,
    ) -> Result<Self> {
        let p = xtwx.nrows();
        if xtwx.ncols() != p || xtwc.len() != p {
            return Err(SymCovError::Dimension("normal equations are not square".into()));
        }
        for b in &blocks {
            if b.range.end > p || b.matrices.iter().any(|m| m.nrows() != b.range.len() || m.ncols() != b.range.len()) {
                return Err(SymCovError::Dimension(format!("penalty block `{}` does not fit", b.name)));
            }
            if b.matrices.len() != b.logdet.n_lambda() {
                return Err(SymCovError::Dimension(format!("penalty block `{}` smoothing parameter count", b.name)));
            }
        }
        if unpenalized.iter().any(|&c| c >= p) {
            return Err(SymCovError::Dimension("unpenalized column out of range".into()));
        }
        Ok(Self { xtwx, xtwc, ctwc, sum_w, n_rows, blocks, unpenalized })
    }

    /// Build from explicit rows (tests, small problems).
    pub fn from_rows(
        x: &DMatrix<f64>,
        c: &DVector<f64>,
        w: &DVector<f64>,
        blocks: Vec<PenaltyBlock>,
        unpenalized: Vec<usize>,
    ) -> Result<Self> {
        if x.nrows() != c.len() || w.len() != c.len() {
            return Err(SymCovError::Dimension("rows of design, response and weights".into()));
        }
        let wx = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i]);
        let xtwx = wx.transpose() * x;
        let xtwc = wx.transpose() * c;
        let ctwc = c.iter().zip(w.iter()).map(|(c, w)| w * c * c).sum();
        Self::new((&xtwx + xtwx.transpose()) * 0.5, xtwc, ctwc, w.sum(), c.len(), blocks, unpenalized)
    }

    pub fn n_params(&self) -> usize {
        self.xtwc.len()
    }

    pub fn n_lambda(&self) -> usize {
        self.blocks.iter().map(|b| b.matrices.len()).sum()
    }

    /// Null-space dimension of the penalty plus unpenalized columns.
    pub fn p0(&self) -> usize {
        self.blocks.iter().map(|b| b.logdet.null_dim()).sum::<usize>() + self.unpenalized.len()
    }

    /// `S_lambda` on the full coefficient vector.
    pub fn penalty(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.n_params();
        let mut s = DMatrix::zeros(p, p);
        let mut k = 0;
        for b in &self.blocks {
            for m in &b.matrices {
                let mut v = s.view_mut((b.range.start, b.range.start), (b.range.len(), b.range.len()));
                v += m * lambdas[k];
                k += 1;
            }
        }
        s
    }

    fn logdet_plus(&self, lambdas: &[f64]) -> f64 {
        let mut k = 0;
        let mut s = 0.0;
        for b in &self.blocks {
            let n = b.matrices.len();
            s += b.logdet.logdet_plus(&lambdas[k..k + n]);
            k += n;
        }
        s
    }

    /// Map from smoothing parameter index to (block, index within block).
    pub fn lambda_owner(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for j in 0..b.matrices.len() {
                out.push((bi, j));
            }
        }
        out
    }
}

/// Minimizer of the penalized least-squares objective at fixed smoothing parameters.
#[derive(Debug, Clone)]
pub struct Solution {
    pub coef: DVector<f64>,
    /// `||sqrt(W)(c - X a)||^2 + a^T S a`
    pub rss_pen: f64,
    pub logdet_a: f64,
    /// Ridge added to the diagonal when plain Cholesky failed (0 otherwise).
    pub ridge: f64,
    chol: Cholesky<f64, Dyn>,
}

impl Solution {
    /// Trace of `(X^T W X + S)^{-1} X^T W X` restricted to `range`.
    pub fn edf(&self, sys: &PenalizedSystem, range: Range<usize>) -> f64 {
        let f = self.chol.solve(&sys.xtwx);
        range.map(|i| f[(i, i)]).sum()
    }
}

fn failing_term(sys: &PenalizedSystem, a: &DMatrix<f64>) -> String {
    for b in &sys.blocks {
        let sub = a.view((b.range.start, b.range.start), (b.range.len(), b.range.len())).into_owned();
        if Cholesky::new(sub).is_none() {
            return b.name.clone();
        }
    }
    sys.blocks.first().map_or_else(|| "system".into(), |b| b.name.clone())
}

/// Solve `(X^T W X + S_lambda) a = X^T W c`.
///
/// Cholesky first; on failure a diagonal ridge growing from `1e-10 * max diag`
/// is tried up to six times before reporting rank deficiency.
pub fn penalized_lstsq(sys: &PenalizedSystem, lambdas: &[f64]) -> Result<Solution> {
    if lambdas.len() != sys.n_lambda() || lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(SymCovError::Config("smoothing parameters must be finite and non-negative".into()));
    }
    let a = &sys.xtwx + sys.penalty(lambdas);
    let max_diag = a.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut ridge = 0.0;
    let mut chol = Cholesky::new(a.clone());
    let mut tau = 1e-10 * max_diag;
    for _ in 0..6 {
        if chol.is_some() {
            break;
        }
        ridge = tau;
        let mut ar = a.clone();
        for i in 0..ar.nrows() {
            ar[(i, i)] += tau;
        }
        chol = Cholesky::new(ar);
        tau *= 100.0;
    }
    let chol = chol.ok_or_else(|| SymCovError::RankDeficient { term: failing_term(sys, &a) })?;
    let coef = chol.solve(&sys.xtwc);
    let rss_pen = sys.ctwc - coef.dot(&sys.xtwc);
    let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !coef.iter().all(|v| v.is_finite()) || !logdet_a.is_finite() {
        return Err(SymCovError::NonFinite("penalized least-squares solution".into()));
    }
    Ok(Solution { coef, rss_pen, logdet_a, ridge, chol })
}

fn criterion_from(sys: &PenalizedSystem, lambdas: &[f64], sol: &Solution) -> Result<f64> {
    let dof = sys.sum_w - sys.p0() as f64;
    if dof <= 0.0 {
        return Err(SymCovError::Degenerate(format!(
            "total weight {} does not exceed the null-space dimension {}",
            sys.sum_w,
            sys.p0()
        )));
    }
    let rss = sol.rss_pen.max(f64::MIN_POSITIVE * 1e10);
    Ok(dof * rss.ln() + sol.logdet_a - sys.logdet_plus(lambdas))
}

/// REML criterion at natural-log smoothing parameters.
pub fn reml_criterion(sys: &PenalizedSystem, log_lambdas: &[f64]) -> Result<f64> {
    let lambdas: Vec<f64> = log_lambdas.iter().map(|l| l.exp()).collect();
    let sol = penalized_lstsq(sys, &lambdas)?;
    let v = criterion_from(sys, &lambdas, &sol)?;
    if !v.is_finite() {
        return Err(SymCovError::NonFinite("REML criterion".into()));
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct RemlOptions {
    /// Box on the scaled log smoothing parameters.
    pub lower: f64,
    pub upper: f64,
    pub grid: Vec<f64>,
    /// Use the full tensor grid only up to this many points.
    pub max_grid_points: usize,
    pub max_iter: usize,
    pub tol_crit: f64,
    pub tol_grad: f64,
    pub fd_step: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            lower: -20.0,
            upper: 20.0,
            grid: vec![-16.0, -8.0, 0.0, 8.0, 16.0],
            max_grid_points: 15_625,
            max_iter: 200,
            tol_crit: 1e-8,
            tol_grad: 1e-4,
            fd_step: 1e-4,
        }
    }
}

/// Result of a fit of the penalized system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceFit {
    pub coef: Vec<f64>,
    /// Smoothing parameters per penalty block.
    pub lambdas: Vec<Vec<f64>>,
    pub block_names: Vec<String>,
    /// Coefficient of the first unpenalized column, if any.
    pub sigma2_raw: Option<f64>,
    /// Working residual scale of the regression.
    pub phi: f64,
    pub reml: f64,
    pub edf: Vec<f64>,
    pub converged: bool,
    pub at_bound: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub ridge: f64,
    pub n_rows: usize,
    pub timing_ms: f64,
}

impl CovarianceFit {
    pub fn block_coef(&self, sys: &PenalizedSystem, k: usize) -> Vec<f64> {
        self.coef[sys.blocks[k].range.clone()].to_vec()
    }
}

fn finish(
    sys: &PenalizedSystem,
    lambdas: &[f64],
    converged: bool,
    at_bound: bool,
    iterations: usize,
    evaluations: usize,
    start: Instant,
) -> Result<CovarianceFit> {
    let sol = penalized_lstsq(sys, lambdas)?;
    let reml = criterion_from(sys, lambdas, &sol)?;
    let mut grouped = Vec::new();
    let mut k = 0;
    for b in &sys.blocks {
        grouped.push(lambdas[k..k + b.matrices.len()].to_vec());
        k += b.matrices.len();
    }
    let dof = sys.sum_w - sys.p0() as f64;
    Ok(CovarianceFit {
        coef: sol.coef.iter().copied().collect(),
        lambdas: grouped,
        block_names: sys.blocks.iter().map(|b| b.name.clone()).collect(),
        sigma2_raw: sys.unpenalized.first().map(|&c| sol.coef[c]),
        phi: sol.rss_pen.max(0.0) / dof,
        reml,
        edf: sys.blocks.iter().map(|b| sol.edf(sys, b.range.clone())).collect(),
        converged,
        at_bound,
        iterations,
        evaluations,
        ridge: sol.ridge,
        n_rows: sys.n_rows,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Fit at fixed smoothing parameters.
pub fn fit_fixed(sys: &PenalizedSystem, lambdas: &[f64]) -> Result<CovarianceFit> {
    finish(sys, lambdas, true, false, 0, 1, Instant::now())
}

/// Scale of each smoothing parameter: `||X_kk||_F / ||S_j||_F`.
pub fn lambda_scales(sys: &PenalizedSystem) -> Vec<f64> {
    let mut out = Vec::new();
    for b in &sys.blocks {
        let xkk = sys.xtwx.view((b.range.start, b.range.start), (b.range.len(), b.range.len())).norm();
        for m in &b.matrices {
            let sn = m.norm();
            out.push(if xkk > 0.0 && sn > 0.0 { xkk / sn } else { 1.0 });
        }
    }
    out
}

pub fn optimize_reml(sys: &PenalizedSystem) -> Result<CovarianceFit> {
    optimize_reml_with(sys, &RemlOptions::default())
}

/// Box-constrained BFGS on `rho_j = log(lambda_j / s_j)` with central-difference
/// gradients, started from the best point of a coarse grid.
pub fn optimize_reml_with(sys: &PenalizedSystem, opts: &RemlOptions) -> Result<CovarianceFit> {
    let start = Instant::now();
    let dims = sys.n_lambda();
    if dims == 0 {
        return finish(sys, &[], true, false, 0, 1, start);
    }
    let scales = lambda_scales(sys);
    let to_lambda = |rho: &[f64]| -> Vec<f64> { rho.iter().zip(&scales).map(|(r, s)| s * r.exp()).collect() };
    let eval = |rho: &[f64]| -> Result<f64> {
        let l = to_lambda(rho);
        let sol = penalized_lstsq(sys, &l)?;
        criterion_from(sys, &l, &sol)
    };
    let objective = |rho: &[f64]| -> f64 {
        match eval(rho) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };
    let mut evaluations = 0;

    // grid initialization
    let candidates = grid_candidates(dims, opts);
    let values = par::map(&candidates, |x| objective(x));
    evaluations += candidates.len();
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    let mut x = candidates[best].clone();
    let mut fx = values[best];
    if !fx.is_finite() {
        // surface the underlying error
        eval(&x)?;
        return Err(SymCovError::NonFinite("REML criterion on the whole grid".into()));
    }
    if dims > 1 && candidates.len() < opts.grid.len().pow(dims as u32) {
        // coordinate sweeps from the best diagonal point
        for d in 0..dims {
            let pts: Vec<Vec<f64>> = opts
                .grid
                .iter()
                .map(|&g| {
                    let mut y = x.clone();
                    y[d] = g;
                    y
                })
                .collect();
            let vals = par::map(&pts, |y| objective(y));
            evaluations += pts.len();
            for (y, v) in pts.into_iter().zip(vals) {
                if v < fx {
                    fx = v;
                    x = y;
                }
            }
        }
    }

    let clamp = |v: f64| v.clamp(opts.lower, opts.upper);
    let grad = |x: &[f64], evals: &mut usize| -> Vec<f64> {
        (0..dims)
            .map(|i| {
                let h = opts.fd_step;
                let (lo, hi) = (clamp(x[i] - h), clamp(x[i] + h));
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] = lo;
                b[i] = hi;
                *evals += 2;
                (objective(&b) - objective(&a)) / (hi - lo)
            })
            .collect()
    };
    let project = |x: &[f64], g: &[f64]| -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                if (x[i] <= opts.lower && gi > 0.0) || (x[i] >= opts.upper && gi < 0.0) {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    };
    let inf_norm = |v: &[f64]| v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));

    let mut h = DMatrix::<f64>::identity(dims, dims);
    let mut g = grad(&x, &mut evaluations);
    let mut last_delta = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut first_update = true;
    while iterations < opts.max_iter {
        let pg = project(&x, &g);
        let gnorm = inf_norm(&pg);
        // rounding floor of the criterion and of its difference quotients
        let noise = 16.0 * f64::EPSILON * (1.0 + fx.abs());
        let tol_grad = opts.tol_grad.max(noise / opts.fd_step);
        let tol_crit = opts.tol_crit.max(noise);
        if gnorm < tol_grad && (last_delta < tol_crit || iterations == 0) {
            converged = true;
            break;
        }
        iterations += 1;
        let pgv = DVector::from_vec(pg.clone());
        let mut d = -(&h * &pgv);
        for i in 0..dims {
            if pg[i] == 0.0 && (x[i] <= opts.lower || x[i] >= opts.upper) {
                d[i] = 0.0;
            }
        }
        if d.dot(&pgv) >= 0.0 {
            h = DMatrix::identity(dims, dims);
            d = -pgv.clone();
        }
        let dmax = d.amax();
        if dmax > 5.0 {
            d *= 5.0 / dmax;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = (0..dims).map(|i| clamp(x[i] + step * d[i])).collect();
            let fnew = objective(&xn);
            evaluations += 1;
            let decrease: f64 = (0..dims).map(|i| pg[i] * (xn[i] - x[i])).sum();
            if fnew.is_finite() && fnew <= fx + 1e-4 * decrease && fnew < fx {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no decrease representable at this resolution: stationary
            converged = true;
            break;
        };
        let gn = grad(&xn, &mut evaluations);
        let s = DVector::from_iterator(dims, (0..dims).map(|i| xn[i] - x[i]));
        let y = DVector::from_iterator(dims, (0..dims).map(|i| gn[i] - g[i]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                h = DMatrix::identity(dims, dims) * (sy / y.dot(&y));
                first_update = false;
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(dims, dims);
            let a = &eye - &s * y.transpose() * rho;
            let b = &eye - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        last_delta = (fx - fnew).abs();
        x = xn;
        fx = fnew;
        g = gn;
    }
    let at_bound = x.iter().any(|&v| v <= opts.lower + 1e-6 || v >= opts.upper - 1e-6);
    let lambdas = to_lambda(&x);
    finish(sys, &lambdas, converged, at_bound, iterations, evaluations, start)
}

fn grid_candidates(dims: usize, opts: &RemlOptions) -> Vec<Vec<f64>> {
    let n = opts.grid.len();
    let total = n.checked_pow(dims as u32).unwrap_or(usize::MAX);
    if total <= opts.max_grid_points {
        (0..total)
            .map(|mut k| {
                let mut x = vec![0.0; dims];
                for xi in x.iter_mut() {
                    *xi = opts.grid[k % n];
                    k /= n;
                }
                x
            })
            .collect()
    } else {
        opts.grid.iter().map(|&g| vec![g; dims]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::Domain;
    use crate::splinebasis::{difference_penalty, eval_bspline_design, MarginalBasis};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_term(n: usize, f: usize, noise: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>, PenaltyBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = MarginalBasis::new(Domain::new(0.0, 1.0).unwrap(), 3, f).unwrap();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = eval_bspline_design(&basis, &t).unwrap();
        let c = DVector::from_iterator(
            n,
            t.iter().map(|&t| (2.0 * std::f64::consts::PI * t).sin() + noise * rng.gen_range(-1.0..1.0)),
        );
        let s = difference_penalty(f, 2).unwrap().matrix;
        let eig = SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect();
        (x, c, PenaltyBlock { name: "f".into(), range: 0..f, matrices: vec![s], logdet: LogDetForm::Eigen(eig) })
    }

    #[test]
    fn matches_augmented_least_squares() {
        let (x, c, block) = one_term(40, 8, 0.3, 1);
        let w = DVector::from_element(40, 1.0);
        let s = block.matrices[0].clone();
        let sys = PenalizedSystem::from_rows(&x, &c, &w, vec![block], vec![]).unwrap();
        for lambda in [1e-3, 0.7, 50.0] {
            let sol = penalized_lstsq(&sys, &[lambda]).unwrap();
            // augmented [X; sqrt(l) L^T] solved by QR
            let l = Cholesky::new(&s * lambda + DMatrix::identity(8, 8) * 1e-300).map(|c| c.l());
            let root = match l {
                Some(l) => l.transpose(),
                None => {
                    let e = SymmetricEigen::new(&s * lambda);
                    let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
                    DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
                }
            };
            let mut aug = DMatrix::zeros(48, 8);
            aug.view_mut((0, 0), (40, 8)).copy_from(&x);
            aug.view_mut((40, 0), (8, 8)).copy_from(&root);
            let mut rhs = DVector::zeros(48);
            rhs.rows_mut(0, 40).copy_from(&c);
            let qr = aug.qr();
            let beta = qr.r().solve_upper_triangular(&(qr.q().transpose() * rhs)).unwrap();
            assert!((&beta - &sol.coef).amax() < 1e-8 * beta.amax().max(1.0));
        }
    }

    #[test]
    fn interpolates_at_zero_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0)) + DMatrix::identity(5, 5) * 3.0;
        let c = DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0));
        let w = DVector::from_element(5, 1.0);
        let s = difference_penalty(5, 2).unwrap().matrix;
        let block = PenaltyBlock { name: "f".into(), range: 0..5, matrices: vec![s], logdet: LogDetForm::Eigen(vec![1.0; 5]) };
        let sys = PenalizedSystem::from_rows(&x, &c, &w, vec![block], vec![]).unwrap();
        let sol = penalized_lstsq(&sys, &[0.0]).unwrap();
        assert!((&x * &sol.coef - &c).amax() < 1e-10);
    }

    #[test]
    fn huge_penalty_gives_null_space_fit() {
        let (x, c, block) = one_term(60, 10, 0.1, 3);
        let s = block.matrices[0].clone();
        let w = DVector::from_element(60, 1.0);
        let sys = PenalizedSystem::from_rows(&x, &c, &w, vec![block], vec![]).unwrap();
        let sol = penalized_lstsq(&sys, &[1e12]).unwrap();
        let pen = (sol.coef.transpose() * &s * &sol.coef)[(0, 0)];
        assert!(pen < 1e-10 * sol.coef.norm_squared());
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let w = DVector::from_element(3, 1.0);
        let block = PenaltyBlock {
            name: "dup".into(),
            range: 0..2,
            matrices: vec![DMatrix::zeros(2, 2)],
            logdet: LogDetForm::Eigen(vec![0.0, 0.0]),
        };
        let sys = PenalizedSystem::from_rows(&x, &c, &w, vec![block], vec![]).unwrap();
        match penalized_lstsq(&sys, &[1.0]) {
            Err(SymCovError::RankDeficient { term }) => assert_eq!(term, "dup"),
            Ok(sol) => assert!(sol.ridge > 0.0, "a ridge must have been needed"),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn scaling_response_scales_coefficients() {
        let (x, c, block) = one_term(30, 6, 0.2, 4);
        let w = DVector::from_element(30, 1.0);
        let sys = PenalizedSystem::from_rows(&x, &c, &w, vec![block.clone()], vec![]).unwrap();
        let sys3 = PenalizedSystem::from_rows(&x, &(&c * 3.0), &w, vec![block], vec![]).unwrap();
        let a = penalized_lstsq(&sys, &[0.5]).unwrap().coef;
        let b = penalized_lstsq(&sys3, &[0.5]).unwrap().coef;
        assert!((a * 3.0 - b).amax() < 1e-10);
    }

    #[test]
    fn row_permutation_leaves_fit_unchanged() {
        let (x, c, block) = one_term(30, 6, 0.2, 5);
        let w = DVector::from_element(30, 1.0);
        let perm: Vec<usize> = (0..30).rev().collect();
        let xp = DMatrix::from_fn(30, 6, |i, j| x[(perm[i], j)]);
        let cp = DVector::from_fn(30, |i, _| c[perm[i]]);
        let a = optimize_reml(&PenalizedSystem::from_rows(&x, &c, &w, vec![block.clone()], vec![]).unwrap()).unwrap();
        let b = optimize_reml(&PenalizedSystem::from_rows(&xp, &cp, &w, vec![block], vec![]).unwrap()).unwrap();
        for (u, v) in a.coef.iter().zip(&b.coef) {
            assert!((u - v).abs() < 1e-6 * u.abs().max(1.0));
        }
    }

    #[test]
    fn duplicated_rows_with_halved_weights_keep_lambda() {
        let (x, c, block) = one_term(50, 8, 0.3, 6);
        let w = DVector::from_element(50, 1.0);
        let x2 = DMatrix::from_fn(100, 8, |i, j| x[(i % 50, j)]);
        let c2 = DVector::from_fn(100, |i, _| c[i % 50]);
        let w2 = DVector::from_element(100, 0.5);
        let a = optimize_reml(&PenalizedSystem::from_rows(&x, &c, &w, vec![block.clone()], vec![]).unwrap()).unwrap();
        let b = optimize_reml(&PenalizedSystem::from_rows(&x2, &c2, &w2, vec![block], vec![]).unwrap()).unwrap();
        assert!((a.lambdas[0][0].ln() - b.lambdas[0][0].ln()).abs() < 1e-6);
    }

    #[test]
    fn constant_shift_keeps_criterion_finite() {
        let (x, c, block) = one_term(40, 8, 0.3, 7);
        let w = DVector::from_element(40, 1.0);
        let shifted = c.add_scalar(10.0);
        let sys = PenalizedSystem::from_rows(&x, &shifted, &w, vec![block], vec![]).unwrap();
        assert!(reml_criterion(&sys, &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn noise_only_hits_the_upper_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, _, block) = one_term(200, 8, 0.0, 8);
        let c = DVector::from_fn(200, |_, _| 100.0 * rng.gen_range(-1.0..1.0));
        let w = DVector::from_element(200, 1.0);
        let fit = optimize_reml(&PenalizedSystem::from_rows(&x, &c, &w, vec![block], vec![]).unwrap()).unwrap();
        assert!(fit.at_bound);
    }

    #[test]
    fn kron_sum_logdet_matches_dense() {
        let s = difference_penalty(5, 2).unwrap().matrix;
        let eye = DMatrix::<f64>::identity(5, 5);
        let a: Vec<f64> = SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect();
        let form = LogDetForm::KronSum { a: a.clone(), b: a, copies: 1 };
        let (l1, l2) = (0.3, 7.0);
        let full = s.kronecker(&eye) * l1 + eye.kronecker(&s) * l2;
        let e = SymmetricEigen::new(full).eigenvalues;
        let max = e.amax();
        let dense: f64 = e.iter().filter(|v| **v > 1e-9 * max).map(|v| v.ln()).sum();
        assert!((form.logdet_plus(&[l1, l2]) - dense).abs() < 1e-8);
        assert_eq!(form.null_dim(), 4);
    }
}
