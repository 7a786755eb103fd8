//! Functional principal component analysis on top of the covariance smoother:
//! mean fit, Mercer decomposition on a grid, PVE truncation, EBLUP scores and
//! curve reconstruction.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::crossprod::{
    accumulate_normal_equations, AssemblyOptions, DesignLayout, FittedCovariance, InverseVarianceWeights, ObsIndex,
    TermDesign,
};
use crate::error::{Result, SymCovError};
use crate::funcdata::{
    center_responses, Component, Domain, Grouping, MeanFunction, MeanSpec, ModelSpec, ObservationTable, PveBase,
};
use crate::par;
use crate::remlfit::{optimize_reml, CovarianceFit, LogDetForm, PenaltyBlock, PenalizedSystem};
use crate::splinebasis::{difference_penalty, eval_bspline_design, MarginalBasis};
use crate::symsmooth::evaluate_surface;

/// Penalized spline estimate of the mean under working independence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanFit {
    pub basis: MarginalBasis,
    pub coef: Vec<f64>,
    pub lambda: f64,
}

impl MeanFit {
    pub fn eval_checked(&self, t: f64) -> Result<f64> {
        Ok(self.basis.eval_sparse(t)?.dot(&self.coef))
    }
}

impl MeanFunction for MeanFit {
    fn domain(&self) -> Domain {
        self.basis.domain()
    }

    fn eval(&self, t: f64) -> f64 {
        self.eval_checked(t).unwrap_or(f64::NAN)
    }
}

pub fn fit_mean(table: &ObservationTable, spec: &MeanSpec, domain: Domain) -> Result<MeanFit> {
    let basis = MarginalBasis::from_spec(domain, &spec.as_marginal())?;
    let t: Vec<f64> = table.curves.iter().flat_map(|c| c.t.iter().copied()).collect();
    let y: Vec<f64> = table.curves.iter().flat_map(|c| c.y.iter().copied()).collect();
    let mut distinct = t.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < spec.penalty_order {
        return Err(SymCovError::RankDeficient { term: "mean".into() });
    }
    let x = eval_bspline_design(&basis, &t)?;
    let s = difference_penalty(basis.dim(), spec.penalty_order)?.matrix;
    let eig = SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect();
    let block = PenaltyBlock { name: "mean".into(), range: 0..basis.dim(), matrices: vec![s], logdet: LogDetForm::Eigen(eig) };
    let n = y.len();
    let sys = PenalizedSystem::from_rows(&x, &DVector::from_vec(y), &DVector::from_element(n, 1.0), vec![block], vec![])?;
    let fit = optimize_reml(&sys)?;
    Ok(MeanFit { basis, coef: fit.coef, lambda: fit.lambdas[0][0] })
}

/// Smooth (block) covariance of one term: `K_{ss'}(t, t') = b(t)^T Theta_{ss'} b(t')`
/// for `t <= t'`, extended by symmetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceSurface {
    pub basis: MarginalBasis,
    pub rho: usize,
    pub blocks: Vec<DMatrix<f64>>,
}

impl CovarianceSurface {
    pub fn from_term(term: &TermDesign, theta_local: &[f64]) -> Self {
        let rho = term.rho();
        let mut blocks = Vec::with_capacity(rho * rho);
        for s in 0..rho {
            for sp in 0..rho {
                blocks.push(term.block_matrix(theta_local, s, sp));
            }
        }
        Self { basis: term.basis.clone(), rho, blocks }
    }

    pub fn block(&self, s: usize, sp: usize) -> &DMatrix<f64> {
        &self.blocks[s * self.rho + sp]
    }

    pub fn eval(&self, s: usize, sp: usize, t: f64, u: f64) -> Result<f64> {
        let (a, b, th) = if t <= u { (t, u, self.block(s, sp)) } else { (u, t, self.block(sp, s)) };
        let ra = self.basis.eval_sparse(a)?;
        let rb = self.basis.eval_sparse(b)?;
        let mut acc = 0.0;
        for (i, x) in ra.values.iter().enumerate() {
            for (j, y) in rb.values.iter().enumerate() {
                acc += x * th[(ra.start + i, rb.start + j)] * y;
            }
        }
        Ok(acc)
    }

    /// `rho D x rho D` matrix on an ascending grid, component-major.
    pub fn grid_matrix(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        if self.rho == 1 {
            return evaluate_surface(&self.blocks[0], &self.basis, &self.basis, grid);
        }
        let d = grid.len();
        let b = eval_bspline_design(&self.basis, grid)?;
        let raw: Vec<DMatrix<f64>> = self.blocks.iter().map(|th| &b * th * b.transpose()).collect();
        let r = self.rho;
        Ok(DMatrix::from_fn(r * d, r * d, |i, j| {
            let (s, a) = (i / d, i % d);
            let (sp, c) = (j / d, j % d);
            if a <= c {
                raw[s * r + sp][(a, c)]
            } else {
                raw[sp * r + s][(c, a)]
            }
        }))
    }
}

/// Mercer decomposition of a covariance on an equidistant midpoint grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenSystem {
    pub grid: Vec<f64>,
    /// Quadrature weight `|T| / D`.
    pub weight: f64,
    pub rho: usize,
    /// All eigenvalues, descending, negatives clipped to zero.
    pub values: Vec<f64>,
    /// Eigenfunction values, one column per eigenfunction, rows `s * D + d`.
    pub functions: DMatrix<f64>,
    pub truncation: usize,
}

impl EigenSystem {
    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    /// Values of eigenfunction `k`, component `s`, on the grid.
    pub fn phi(&self, k: usize, s: usize) -> Vec<f64> {
        let d = self.n_grid();
        (0..d).map(|i| self.functions[(s * d + i, k)]).collect()
    }

    /// Keep only the first `n` eigenfunctions.
    pub fn retain(&mut self, n: usize) {
        let n = n.min(self.functions.ncols());
        self.functions = self.functions.columns(0, n).into_owned();
        self.truncation = n;
    }

    pub fn retained_values(&self) -> &[f64] {
        &self.values[..self.truncation]
    }
}

pub fn eigendecompose_matrix(k: &DMatrix<f64>, grid: Vec<f64>, weight: f64, rho: usize) -> Result<EigenSystem> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(SymCovError::NonFinite("covariance surface".into()));
    }
    if k.nrows() != grid.len() * rho {
        return Err(SymCovError::Dimension("surface vs grid".into()));
    }
    let e = SymmetricEigen::new(k.clone());
    let mut order: Vec<usize> = (0..e.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| (weight * e.eigenvalues[i]).max(0.0)).collect();
    let scale = 1.0 / weight.sqrt();
    let mut functions = DMatrix::zeros(k.nrows(), order.len());
    for (c, &i) in order.iter().enumerate() {
        let v = e.eigenvectors.column(i);
        let mut imax = 0;
        for r in 0..v.len() {
            if v[r].abs() > v[imax].abs() + 1e-12 {
                imax = r;
            }
        }
        let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..v.len() {
            functions[(r, c)] = sign * scale * v[r];
        }
    }
    let n = values.len();
    Ok(EigenSystem { grid, weight, rho, values, functions, truncation: n })
}

pub fn eigendecompose(surface: &CovarianceSurface, domain: Domain, grid_size: usize) -> Result<EigenSystem> {
    if grid_size < 2 {
        return Err(SymCovError::Config("grid size must be at least 2".into()));
    }
    let grid = domain.midpoint_grid(grid_size);
    let k = surface.grid_matrix(&grid)?;
    eigendecompose_matrix(&k, grid, domain.width() / grid_size as f64, surface.rho)
}

/// Smallest per-term counts reaching `target`, adding eigenvalues in globally
/// descending order.
pub fn truncate_pve(systems: &[&EigenSystem], sigma2: f64, target: f64, base: PveBase) -> Result<(Vec<usize>, f64)> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(SymCovError::Config("PVE target must lie in (0, 1]".into()));
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (term, sys) in systems.iter().enumerate() {
        for (k, &v) in sys.values.iter().enumerate() {
            all.push((v, term, k));
        }
    }
    let mut total: f64 = all.iter().map(|a| a.0).sum();
    if total <= 0.0 {
        return Err(SymCovError::Degenerate("all estimated eigenvalues are zero".into()));
    }
    if base == PveBase::Observation {
        total += sigma2.max(0.0);
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut counts = vec![0; systems.len()];
    let mut cum = 0.0;
    for &(v, term, _) in &all {
        if v <= 0.0 || cum / total >= target * (1.0 - 1e-12) {
            break;
        }
        cum += v;
        counts[term] += 1;
    }
    Ok((counts, cum / total))
}

/// Evaluates retained eigenfunctions anywhere on the domain via
/// `phi_k(t) = (w / nu_k) sum_d K(t, s_d) phi_k(s_d)`.
#[derive(Debug, Clone)]
pub struct EigenEvaluator {
    basis: MarginalBasis,
    grid: Vec<f64>,
    rho: usize,
    n: usize,
    /// per (k, s): (D + 1) x F table, row `m` used when `m` grid points lie below `t`
    tables: Vec<DMatrix<f64>>,
    factor: Vec<f64>,
}

impl EigenEvaluator {
    pub fn new(surface: &CovarianceSurface, eigen: &EigenSystem) -> Result<Self> {
        let d = eigen.n_grid();
        let f = surface.basis.dim();
        let rho = surface.rho;
        let n = eigen.truncation;
        let b = eval_bspline_design(&surface.basis, &eigen.grid)?;
        let mut tables = Vec::with_capacity(n * rho);
        let mut factor = Vec::with_capacity(n);
        for k in 0..n {
            let nu = eigen.values[k];
            if nu <= 0.0 {
                return Err(SymCovError::Config(format!("eigenvalue {k} is zero but retained")));
            }
            factor.push(eigen.weight / nu);
            // prefix (below) and suffix (at or above) sums of b(s_d) phi(s_d) per component
            let mut below = vec![DMatrix::<f64>::zeros(d + 1, f); rho];
            let mut above = vec![DMatrix::<f64>::zeros(d + 1, f); rho];
            for sp in 0..rho {
                for m in 0..d {
                    let phi = eigen.functions[(sp * d + m, k)];
                    for j in 0..f {
                        below[sp][(m + 1, j)] = below[sp][(m, j)] + b[(m, j)] * phi;
                    }
                }
                for m in (0..d).rev() {
                    let phi = eigen.functions[(sp * d + m, k)];
                    for j in 0..f {
                        above[sp][(m, j)] = above[sp][(m + 1, j)] + b[(m, j)] * phi;
                    }
                }
            }
            for s in 0..rho {
                let mut table = DMatrix::zeros(d + 1, f);
                for sp in 0..rho {
                    table += &above[sp] * surface.block(s, sp).transpose();
                    table += &below[sp] * surface.block(sp, s);
                }
                tables.push(table);
            }
        }
        Ok(Self { basis: surface.basis.clone(), grid: eigen.grid.clone(), rho, n, tables, factor })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rho(&self) -> usize {
        self.rho
    }

    /// `phi_{k,s}(t)` for all retained `k` and components `s`, layout `k * rho + s`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let row = self.basis.eval_sparse(t)?;
        let m = self.grid.partition_point(|&g| g < t);
        let mut out = Vec::with_capacity(self.n * self.rho);
        for k in 0..self.n {
            for s in 0..self.rho {
                let tab = &self.tables[k * self.rho + s];
                let v: f64 = row.values.iter().enumerate().map(|(i, x)| x * tab[(m, row.start + i)]).sum();
                out.push(self.factor[k] * v);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermModel {
    pub name: String,
    pub grouping: Grouping,
    pub components: Vec<Component>,
    pub surface: CovarianceSurface,
    pub eigen: EigenSystem,
    pub lambda: Vec<f64>,
    pub edf: f64,
}

/// Everything needed to predict scores for new data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaModel {
    pub spec: ModelSpec,
    pub domain: Domain,
    pub mean: MeanFit,
    pub terms: Vec<TermModel>,
    pub sigma2_raw: f64,
    /// `max(sigma2_raw, 0)`.
    pub sigma2: f64,
    pub pve_achieved: f64,
    pub fit: CovarianceFit,
}

/// Predicted scores of one term; `values[level * n + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub term: String,
    pub level_names: Vec<String>,
    pub n: usize,
    pub values: Vec<f64>,
}

impl ScoreSet {
    pub fn get(&self, level: usize, k: usize) -> f64 {
        self.values[level * self.n + k]
    }
}

#[derive(Debug, Clone)]
pub struct ScorePrediction {
    pub sets: Vec<ScoreSet>,
    /// True when `sigma2 = 0` was replaced by a small ridge.
    pub ridge_used: bool,
    pub noise_variance: f64,
}

/// Level index of every curve for a term, and the level labels.
fn term_levels(table: &ObservationTable, grouping: &Grouping) -> Result<(Vec<usize>, Vec<String>)> {
    match grouping {
        Grouping::Curve => Ok(((0..table.n_curves()).collect(), table.curve_ids.clone())),
        Grouping::None => Ok((vec![0; table.n_curves()], vec!["all".into()])),
        Grouping::Variable(g) => {
            let gi = table
                .grouping_index(g)
                .ok_or_else(|| SymCovError::Schema(format!("unknown grouping column `g_{g}`")))?;
            Ok((table.curves.iter().map(|c| c.levels[gi]).collect(), table.level_names[gi].clone()))
        }
    }
}

fn term_slopes(table: &ObservationTable, components: &[Component]) -> Result<Vec<Option<usize>>> {
    components
        .iter()
        .map(|c| match c {
            Component::Intercept => Ok(None),
            Component::Slope(w) => table
                .slope_index(w)
                .map(Some)
                .ok_or_else(|| SymCovError::Schema(format!("unknown slope column `w_{w}`"))),
        })
        .collect()
}

fn omega(table: &ObservationTable, curve: usize, slope: Option<usize>) -> f64 {
    slope.map_or(1.0, |k| table.curves[curve].slopes[k])
}

/// `Z` rows: per term and observation, `sum_s omega_s phi_{k,s}(t)` for retained `k`.
fn score_design(model: &FpcaModel, table: &ObservationTable, evaluators: &[EigenEvaluator]) -> Result<Vec<Vec<Vec<f64>>>> {
    let obs: Vec<(usize, f64)> =
        table.curves.iter().enumerate().flat_map(|(i, c)| c.t.iter().map(move |&t| (i, t))).collect();
    let mut out = Vec::new();
    for (term, ev) in model.terms.iter().zip(evaluators) {
        let slopes = term_slopes(table, &term.components)?;
        let rows: Vec<Result<Vec<f64>>> = par::map(&obs, |&(i, t)| {
            let phi = ev.eval(t)?;
            Ok((0..ev.n())
                .map(|k| (0..ev.rho()).map(|s| omega(table, i, slopes[s]) * phi[k * ev.rho() + s]).sum())
                .collect())
        });
        out.push(rows.into_iter().collect::<Result<Vec<_>>>()?);
    }
    Ok(out)
}

/// EBLUP of all scores: `(Z^T Z / s2 + G^-1) xi = Z^T y / s2`, with the
/// curve-level block eliminated curve by curve (Schur complement).
pub fn predict_scores(model: &FpcaModel, centered: &ObservationTable) -> Result<ScorePrediction> {
    let evaluators = model
        .terms
        .iter()
        .map(|t| EigenEvaluator::new(&t.surface, &t.eigen))
        .collect::<Result<Vec<_>>>()?;
    let z = score_design(model, centered, &evaluators)?;
    let retained: Vec<f64> = model.terms.iter().flat_map(|t| t.eigen.retained_values().to_vec()).collect();
    let (s2, ridge_used) = if model.sigma2 > 0.0 {
        (model.sigma2, false)
    } else {
        let mean = if retained.is_empty() { 1.0 } else { retained.iter().sum::<f64>() / retained.len() as f64 };
        (1e-8 * mean, true)
    };
    let curve_term = model
        .terms
        .iter()
        .position(|t| t.grouping == Grouping::Curve)
        .ok_or_else(|| SymCovError::InvalidSpec("model has no CURVE term".into()))?;
    let ne = model.terms[curve_term].eigen.truncation;
    let nu_e = model.terms[curve_term].eigen.retained_values().to_vec();

    // shared unknowns
    let mut shared_off = vec![0; model.terms.len()];
    let mut levels = Vec::new();
    let mut dim = 0;
    for (k, term) in model.terms.iter().enumerate() {
        let lv = term_levels(centered, &term.grouping)?;
        if k != curve_term {
            shared_off[k] = dim;
            dim += lv.1.len() * term.eigen.truncation;
        }
        levels.push(lv);
    }
    let mut a_ss = DMatrix::<f64>::zeros(dim, dim);
    let mut r_s = DVector::<f64>::zeros(dim);
    for (k, term) in model.terms.iter().enumerate() {
        if k == curve_term {
            continue;
        }
        let n = term.eigen.truncation;
        for l in 0..levels[k].1.len() {
            for r in 0..n {
                let i = shared_off[k] + l * n + r;
                a_ss[(i, i)] += 1.0 / term.eigen.values[r];
            }
        }
    }
    struct CurveBlock {
        chol: Option<Cholesky<f64, nalgebra::Dyn>>,
        touched: Vec<usize>,
        a_se: DMatrix<f64>,
        r_e: DVector<f64>,
    }
    let mut blocks = Vec::with_capacity(centered.n_curves());
    let mut p = 0;
    for (i, c) in centered.curves.iter().enumerate() {
        // shared columns touched by this curve
        let mut touched = Vec::new();
        for (k, term) in model.terms.iter().enumerate() {
            if k == curve_term {
                continue;
            }
            let n = term.eigen.truncation;
            let base = shared_off[k] + levels[k].0[i] * n;
            touched.extend(base..base + n);
        }
        let nt = touched.len();
        let mut a_tt = DMatrix::<f64>::zeros(nt, nt);
        let mut r_t = DVector::<f64>::zeros(nt);
        let mut a_ee = DMatrix::<f64>::from_diagonal(&DVector::from_iterator(ne, nu_e.iter().map(|v| 1.0 / v)));
        let mut a_se = DMatrix::<f64>::zeros(nt, ne);
        let mut r_e = DVector::<f64>::zeros(ne);
        for (jj, &y) in c.y.iter().enumerate() {
            let zt: Vec<f64> = model
                .terms
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != curve_term)
                .flat_map(|(k, _)| z[k][p + jj].iter().copied())
                .collect();
            let ze = &z[curve_term][p + jj];
            for a in 0..nt {
                r_t[a] += zt[a] * y / s2;
                for b in 0..nt {
                    a_tt[(a, b)] += zt[a] * zt[b] / s2;
                }
                for b in 0..ne {
                    a_se[(a, b)] += zt[a] * ze[b] / s2;
                }
            }
            for a in 0..ne {
                r_e[a] += ze[a] * y / s2;
                for b in 0..ne {
                    a_ee[(a, b)] += ze[a] * ze[b] / s2;
                }
            }
        }
        p += c.len();
        let chol = if ne > 0 {
            let ch = Cholesky::new(a_ee).ok_or_else(|| SymCovError::RankDeficient { term: model.terms[curve_term].name.clone() })?;
            // Schur update on touched shared entries
            let x = ch.solve(&a_se.transpose());
            let y = ch.solve(&r_e);
            a_tt -= &a_se * &x;
            r_t -= &a_se * &y;
            Some(ch)
        } else {
            None
        };
        for (a, &ga) in touched.iter().enumerate() {
            r_s[ga] += r_t[a];
            for (b, &gb) in touched.iter().enumerate() {
                a_ss[(ga, gb)] += a_tt[(a, b)];
            }
        }
        blocks.push(CurveBlock { chol, touched, a_se, r_e });
    }
    let xi_s = if dim > 0 {
        let sym = (&a_ss + a_ss.transpose()) * 0.5;
        Cholesky::new(sym).ok_or_else(|| SymCovError::RankDeficient { term: "scores".into() })?.solve(&r_s)
    } else {
        DVector::zeros(0)
    };
    let mut sets = Vec::new();
    for (k, term) in model.terms.iter().enumerate() {
        let n = term.eigen.truncation;
        let names = levels[k].1.clone();
        let values = if k == curve_term {
            let mut v = Vec::with_capacity(blocks.len() * n);
            for b in &blocks {
                if let Some(ch) = &b.chol {
                    let xt = DVector::from_iterator(b.touched.len(), b.touched.iter().map(|&g| xi_s[g]));
                    let rhs = &b.r_e - b.a_se.transpose() * xt;
                    v.extend(ch.solve(&rhs).iter());
                }
            }
            v
        } else {
            xi_s.rows(shared_off[k], names.len() * n).iter().copied().collect()
        };
        sets.push(ScoreSet { term: term.name.clone(), level_names: names, n, values });
    }
    Ok(ScorePrediction { sets, ridge_used, noise_variance: s2 })
}

/// Fitted curves on `grid`: mean plus the truncated expansions of every term.
pub fn reconstruct(
    model: &FpcaModel,
    table: &ObservationTable,
    scores: &[ScoreSet],
    grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mu = grid.iter().map(|&t| model.mean.eval_checked(t)).collect::<Result<Vec<_>>>()?;
    let mut out = vec![mu; table.n_curves()];
    for (term, set) in model.terms.iter().zip(scores) {
        let ev = EigenEvaluator::new(&term.surface, &term.eigen)?;
        let phi = grid.iter().map(|&t| ev.eval(t)).collect::<Result<Vec<_>>>()?;
        let (lv, _) = term_levels(table, &term.grouping)?;
        let slopes = term_slopes(table, &term.components)?;
        for (i, curve) in out.iter_mut().enumerate() {
            for (d, val) in curve.iter_mut().enumerate() {
                for k in 0..ev.n() {
                    let xi = set.get(lv[i], k);
                    for s in 0..ev.rho() {
                        *val += xi * omega(table, i, slopes[s]) * phi[d][k * ev.rho() + s];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of the full pipeline.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: FpcaModel,
    pub scores: ScorePrediction,
    pub timings_ms: BTreeMap<String, f64>,
    pub layout: DesignLayout,
    pub system: PenalizedSystem,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Covariance smoothing step alone: returns the layout and the REML fit.
pub fn fit_covariance(
    centered: &ObservationTable,
    spec: &ModelSpec,
    options: AssemblyOptions,
) -> Result<(DesignLayout, PenalizedSystem, CovarianceFit)> {
    let idx = ObsIndex::new(centered);
    let layout = DesignLayout::new(spec, centered, options)?;
    let ne = accumulate_normal_equations(&idx, &layout, None)?;
    let sys = layout.penalized_system(ne)?;
    let fit = optimize_reml(&sys)?;
    if !spec.weighted_refit {
        return Ok((layout, sys, fit));
    }
    let sigma2 = fit.sigma2_raw.unwrap_or(0.0).max(0.0);
    let model = FittedCovariance::new(&idx, &layout, &fit.coef, sigma2)?;
    let weights = InverseVarianceWeights::new(&model, idx.len())?;
    let mut ne = accumulate_normal_equations(&idx, &layout, Some(&weights))?;
    ne.scale_weights(ne.n_rows as f64 / ne.sum_w);
    let sys = layout.penalized_system(ne)?;
    let refit = optimize_reml(&sys)?;
    Ok((layout, sys, refit))
}

/// Mean, covariance smoothing, eigendecomposition, truncation and scores.
pub fn fit_pipeline(table: &ObservationTable, spec: &ModelSpec) -> Result<FitReport> {
    spec.validate()?;
    spec.check_against(table)?;
    let mut timings = BTreeMap::new();
    let domain = spec.domain.unwrap_or(table.domain);
    let table = if domain != table.domain { table.clone().with_domain(domain)? } else { table.clone() };

    let t0 = Instant::now();
    let mean = fit_mean(&table, &spec.mean_spec, domain)?;
    let centered = center_responses(&table, &mean)?;
    timings.insert("mean".into(), elapsed_ms(t0));

    let t1 = Instant::now();
    let options = AssemblyOptions::for_method(spec.method, spec.diag_weight);
    let (layout, sys, fit) = fit_covariance(&centered, spec, options)?;
    timings.insert("smoothing".into(), elapsed_ms(t1));

    let t2 = Instant::now();
    let sigma2_raw = fit.sigma2_raw.unwrap_or(0.0);
    let sigma2 = sigma2_raw.max(0.0);
    let indices: Vec<usize> = (0..layout.terms.len()).collect();
    let terms = par::map(&indices, |&k| -> Result<TermModel> {
        let td = &layout.terms[k];
        let surface = CovarianceSurface::from_term(td, &fit.block_coef(&sys, k));
        let eigen = eigendecompose(&surface, domain, spec.grid_size)?;
        let ts = &spec.terms[k];
        Ok(TermModel {
            name: ts.name.clone(),
            grouping: ts.grouping.clone(),
            components: ts.components.clone(),
            surface,
            eigen,
            lambda: fit.lambdas[k].clone(),
            edf: fit.edf[k],
        })
    });
    let mut terms = terms.into_iter().collect::<Result<Vec<_>>>()?;
    let systems: Vec<&EigenSystem> = terms.iter().map(|t| &t.eigen).collect();
    let (mut counts, mut pve) = truncate_pve(&systems, sigma2, spec.pve, spec.pve_base)?;
    if let Some(fixed) = &spec.fixed_truncation {
        for (k, t) in terms.iter().enumerate() {
            if let Some(&n) = fixed.get(&t.name) {
                let positive = t.eigen.values.iter().filter(|v| **v > 0.0).count();
                if n > positive {
                    return Err(SymCovError::Config(format!(
                        "term `{}`: fixed truncation {n} exceeds {positive} positive eigenvalues",
                        t.name
                    )));
                }
                counts[k] = n;
            }
        }
        let total: f64 = terms.iter().flat_map(|t| t.eigen.values.iter()).sum::<f64>()
            + if spec.pve_base == PveBase::Observation { sigma2 } else { 0.0 };
        let kept: f64 = terms.iter().zip(&counts).map(|(t, &n)| t.eigen.values[..n].iter().sum::<f64>()).sum();
        pve = kept / total;
    }
    for (t, &n) in terms.iter_mut().zip(&counts) {
        t.eigen.retain(n);
    }
    timings.insert("eigen".into(), elapsed_ms(t2));

    let model = FpcaModel { spec: spec.clone(), domain, mean, terms, sigma2_raw, sigma2, pve_achieved: pve, fit };
    let t3 = Instant::now();
    let scores = predict_scores(&model, &centered)?;
    timings.insert("scores".into(), elapsed_ms(t3));
    Ok(FitReport { model, scores, timings_ms: timings, layout, system: sys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::Curve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn unit() -> Domain {
        Domain::new(0.0, 1.0).unwrap()
    }

    fn table_from(curves: Vec<Curve>) -> ObservationTable {
        let n = curves.len();
        ObservationTable::from_curves((0..n).map(|i| format!("c{i}")).collect(), curves, vec![], vec![], vec![], Some(unit()))
            .unwrap()
    }

    #[test]
    fn constant_mean_is_recovered() {
        let curves = (0..5)
            .map(|i| Curve { t: vec![0.1 * i as f64, 0.5, 0.9], y: vec![5.0; 3], levels: vec![], slopes: vec![] })
            .collect();
        let m = fit_mean(&table_from(curves), &MeanSpec::default(), unit()).unwrap();
        for k in 0..=20 {
            assert!((m.eval(k as f64 / 20.0) - 5.0).abs() < 1e-8);
        }
    }

    #[test]
    fn smooth_mean_is_accurate_on_dense_data() {
        let t: Vec<f64> = (0..400).map(|k| (k as f64 + 0.5) / 400.0).collect();
        let curves = vec![Curve { y: t.iter().map(|x| x.sin() + x).collect(), t, levels: vec![], slopes: vec![] }];
        let m = fit_mean(&table_from(curves), &MeanSpec::default(), unit()).unwrap();
        for k in 0..=50 {
            let x = k as f64 / 50.0;
            assert!((m.eval(x) - (x.sin() + x)).abs() < 1e-3);
        }
    }

    #[test]
    fn single_short_curve_mean_is_defined() {
        let curves = vec![Curve { t: vec![0.1, 0.4, 0.6, 0.9], y: vec![1.0, 2.0, 0.5, 1.5], levels: vec![], slopes: vec![] }];
        let m = fit_mean(&table_from(curves), &MeanSpec::default(), unit()).unwrap();
        assert!(m.eval(0.5).is_finite());
    }

    #[test]
    fn too_few_distinct_points_is_rank_error() {
        let curves = vec![Curve { t: vec![0.3, 0.3], y: vec![1.0, 2.0], levels: vec![], slopes: vec![] }];
        let err = fit_mean(&table_from(curves), &MeanSpec::default(), unit()).unwrap_err();
        assert!(matches!(err, SymCovError::RankDeficient { .. }));
    }

    fn analytic(d: usize, f: impl Fn(f64, f64) -> f64) -> (DMatrix<f64>, Vec<f64>, f64) {
        let grid = unit().midpoint_grid(d);
        let k = DMatrix::from_fn(d, d, |i, j| f(grid[i], grid[j]));
        (k, grid, 1.0 / d as f64)
    }

    #[test]
    fn rank_one_surface() {
        let phi = |t: f64| 2f64.sqrt() * (2.0 * PI * t).sin();
        let (k, grid, w) = analytic(100, |s, t| phi(s) * phi(t));
        let e = eigendecompose_matrix(&k, grid.clone(), w, 1).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-3);
        assert!(e.values[1].abs() < 1e-10);
        let est = e.phi(0, 0);
        let err: f64 = grid.iter().zip(&est).map(|(t, p)| (phi(*t) - p).powi(2).min((phi(*t) + p).powi(2))).sum();
        assert!(err / 100.0 < 1e-4);
    }

    #[test]
    fn indefinite_surface_is_clipped() {
        let f1 = |t: f64| 1.0 + 0.0 * t;
        let f2 = |t: f64| 3f64.sqrt() * (2.0 * t - 1.0);
        let (k, grid, w) = analytic(100, |s, t| f1(s) * f1(t) - 0.2 * f2(s) * f2(t));
        let e = eigendecompose_matrix(&k, grid, w, 1).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-3);
        assert!(e.values.iter().all(|v| *v >= 0.0));
        assert!(e.values[1] < 1e-10);
    }

    #[test]
    fn quadrature_orthonormality() {
        let (k, grid, w) = analytic(80, |s, t| (-(s - t).abs()).exp());
        let e = eigendecompose_matrix(&k, grid, w, 1).unwrap();
        let g = e.functions.transpose() * &e.functions * w;
        assert!((g - DMatrix::identity(80, 80)).amax() < 1e-8);
    }

    #[test]
    fn pve_cases() {
        let mk = |v: Vec<f64>| EigenSystem {
            grid: vec![0.0; v.len()],
            weight: 1.0,
            rho: 1,
            functions: DMatrix::zeros(v.len(), v.len()),
            truncation: v.len(),
            values: v,
        };
        let a = mk(vec![2.0, 1.0, 0.0, 0.0]);
        assert_eq!(truncate_pve(&[&a], 0.0, 0.95, PveBase::Process).unwrap().0, vec![2]);
        assert_eq!(truncate_pve(&[&a], 0.0, 0.5, PveBase::Process).unwrap().0, vec![1]);
        let b = mk(vec![0.5, 0.3, 0.01]);
        assert_eq!(truncate_pve(&[&a, &b], 0.0, 1.0, PveBase::Process).unwrap().0, vec![2, 3]);
        assert_eq!(truncate_pve(&[&a, &b], 0.0, 0.75, PveBase::Process).unwrap().0, vec![2, 0]);
        assert_eq!(truncate_pve(&[&a, &b], 0.0, 0.8, PveBase::Process).unwrap().0, vec![2, 1]);
        let z = mk(vec![0.0, 0.0]);
        assert!(matches!(truncate_pve(&[&z], 0.0, 0.9, PveBase::Process), Err(SymCovError::Degenerate(_))));
        // observation base puts sigma2 in the denominator
        assert_eq!(truncate_pve(&[&a], 1.0, 0.7, PveBase::Observation).unwrap().0, vec![2]);
    }

    #[test]
    fn nystrom_reproduces_grid_values() {
        let dom = unit();
        let basis = MarginalBasis::new(dom, 3, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DMatrix::from_fn(8, 3, |_, _| rng.gen_range(-1.0..1.0));
        let th = &u * u.transpose();
        let surface = CovarianceSurface { basis, rho: 1, blocks: vec![th] };
        let mut e = eigendecompose(&surface, dom, 60).unwrap();
        e.retain(3);
        let ev = EigenEvaluator::new(&surface, &e).unwrap();
        for d in (0..60).step_by(7) {
            let v = ev.eval(e.grid[d]).unwrap();
            for k in 0..3 {
                assert!((v[k] - e.functions[(d, k)]).abs() < 1e-8 * e.functions.column(k).amax());
            }
        }
    }
}
