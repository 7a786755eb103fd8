//! Simulation scenarios with known truth, rrMSE metrics and the method benchmark.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SymCovError};
use crate::fpca::{fit_pipeline, reconstruct, FitReport};
use crate::funcdata::{Curve, Domain, MeanSpec, Method, ModelSpec, ObservationTable};
use crate::par;
use crate::splinebasis::{eval_bspline_design, MarginalBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Design {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EigenShape {
    Simple,
    Complex,
}

/// One row of the Scenario 1 settings table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub id: usize,
    pub design: Design,
    pub shape: EigenShape,
    pub nu: [f64; 2],
    pub sigma2: f64,
}

pub fn setting(id: usize) -> Result<Setting> {
    use Design::*;
    use EigenShape::*;
    let big = [2.0, 1.0];
    let small = [0.15, 0.075];
    let (design, shape, nu, sigma2) = match id {
        1 => (Dense, Complex, big, 0.05),
        2 => (Dense, Complex, big, 0.5),
        3 => (Dense, Simple, big, 0.05),
        4 => (Dense, Simple, big, 0.5),
        5 => (Sparse, Simple, big, 0.05),
        6 => (Sparse, Simple, big, 0.5),
        7 => (Dense, Complex, small, 0.05),
        8 => (Dense, Complex, small, 0.5),
        9 => (Dense, Simple, small, 0.05),
        10 => (Dense, Simple, small, 0.5),
        11 => (Dense, Complex, big, 0.01),
        _ => return Err(SymCovError::Config(format!("setting must be in 1..=11, got {id}"))),
    };
    Ok(Setting { id, design, shape, nu, sigma2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: u8,
    pub setting: usize,
    pub n: usize,
    pub seed: u64,
    pub reps: usize,
}

impl ScenarioSpec {
    pub fn scenario1(setting: usize, seed: u64, reps: usize) -> Self {
        Self { scenario: 1, setting, n: 100, seed, reps }
    }

    pub fn scenario2(seed: u64, reps: usize) -> Self {
        Self { scenario: 2, setting: 0, n: 720, seed, reps }
    }

    pub fn validate(&self) -> Result<()> {
        match self.scenario {
            1 => setting(self.setting).map(|_| ()),
            2 => Ok(()),
            s => Err(SymCovError::Config(format!("scenario must be 1 or 2, got {s}"))),
        }?;
        if self.reps == 0 || self.n == 0 {
            return Err(SymCovError::Config("reps and n must be positive".into()));
        }
        Ok(())
    }
}

/// Unit-norm generating functions on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnalyticFn {
    One,
    Linear,
    Sin(u32),
    Cos(u32),
    /// Cubic spline `b(t)^T coef`.
    Spline { basis: MarginalBasis, coef: Vec<f64> },
}

impl AnalyticFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::One => 1.0,
            Self::Linear => 3f64.sqrt() * (2.0 * t - 1.0),
            Self::Sin(k) => 2f64.sqrt() * (2.0 * PI * *k as f64 * t).sin(),
            Self::Cos(k) => 2f64.sqrt() * (2.0 * PI * *k as f64 * t).cos(),
            Self::Spline { basis, coef } => basis.eval_sparse(t).map(|r| r.dot(coef)).unwrap_or(0.0),
        }
    }
}

/// L2 projections of `templates` onto a cubic spline space of dimension `dim`,
/// orthonormalized in order.
pub fn project_to_splines(templates: &[AnalyticFn], dim: usize) -> Result<Vec<AnalyticFn>> {
    let basis = MarginalBasis::new(unit(), 3, dim)?;
    let grid = unit().midpoint_grid(4000);
    let w = 1.0 / grid.len() as f64;
    let b = eval_bspline_design(&basis, &grid)?;
    let gram = b.transpose() * &b * w;
    let chol = gram.clone().cholesky().ok_or_else(|| SymCovError::Degenerate("spline Gram matrix".into()))?;
    let inner = |a: &DVector<f64>, c: &DVector<f64>| (a.transpose() * &gram * c)[(0, 0)];
    let mut out: Vec<DVector<f64>> = Vec::new();
    for f in templates {
        let rhs = b.transpose() * DVector::from_iterator(grid.len(), grid.iter().map(|&t| f.eval(t))) * w;
        let mut c = chol.solve(&rhs);
        for q in &out {
            let r = inner(q, &c);
            c -= q * r;
        }
        let norm = inner(&c, &c).sqrt();
        if norm < 1e-8 {
            return Err(SymCovError::Degenerate("template lies in the span of earlier ones".into()));
        }
        out.push(c / norm);
    }
    Ok(out.into_iter().map(|c| AnalyticFn::Spline { basis: basis.clone(), coef: c.iter().copied().collect() }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrueMean {
    SinPlusT,
    Cosine,
}

impl TrueMean {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Self::SinPlusT => t.sin() + t,
            Self::Cosine => 0.6 * (PI * t).cos(),
        }
    }
}

/// Generating parameters and realized scores of one random process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueTerm {
    pub name: String,
    pub nu: Vec<f64>,
    pub functions: Vec<AnalyticFn>,
    /// `scores[level][k]`
    pub scores: Vec<Vec<f64>>,
}

impl TrueTerm {
    pub fn covariance(&self, s: f64, t: f64) -> f64 {
        self.nu.iter().zip(&self.functions).map(|(v, f)| v * f.eval(s) * f.eval(t)).sum()
    }

    pub fn process(&self, level: usize, t: f64) -> f64 {
        self.scores[level].iter().zip(&self.functions).map(|(x, f)| x * f.eval(t)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub mean: TrueMean,
    pub terms: Vec<TrueTerm>,
    pub sigma2: f64,
}

impl Truth {
    pub fn term(&self, name: &str) -> Option<&TrueTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Generator for replicate `stream` of a seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n x K` scores with exactly zero column means and sample covariance `diag(nu)`.
pub fn decorrelated_scores<R: Rng>(rng: &mut R, n: usize, nu: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = nu.len();
    if n <= k {
        return Err(SymCovError::Config(format!("need more than {k} levels to decorrelate {k} scores")));
    }
    let mut z = DMatrix::<f64>::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    for mut c in z.column_iter_mut() {
        let m = c.mean();
        c.add_scalar_mut(-m);
    }
    let cov = z.transpose() * &z / (n as f64 - 1.0);
    let l = cov.cholesky().ok_or_else(|| SymCovError::Degenerate("score draw is singular".into()))?.l();
    let lt_inv = l.transpose().try_inverse().ok_or_else(|| SymCovError::Degenerate("score draw".into()))?;
    let w = z * lt_inv;
    Ok((0..n).map(|i| (0..k).map(|j| w[(i, j)] * nu[j].sqrt()).collect()).collect())
}

fn sorted_uniform<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
    t.sort_by(f64::total_cmp);
    t
}

fn unit() -> Domain {
    Domain { lo: 0.0, hi: 1.0 }
}

pub fn generate_scenario1(setting_id: usize, seed: u64) -> Result<(ObservationTable, Truth)> {
    generate_scenario1_stream(setting_id, 100, seed, 0)
}

pub fn generate_scenario1_stream(setting_id: usize, n: usize, seed: u64, stream: u64) -> Result<(ObservationTable, Truth)> {
    let st = setting(setting_id)?;
    let mut rng = rng_for(seed, stream);
    let functions = match st.shape {
        EigenShape::Simple => vec![AnalyticFn::One, AnalyticFn::Linear],
        EigenShape::Complex => vec![AnalyticFn::Sin(1), AnalyticFn::Cos(1)],
    };
    let scores = decorrelated_scores(&mut rng, n, &st.nu)?;
    let term = TrueTerm { name: "E".into(), nu: st.nu.to_vec(), functions, scores };
    let noise = Normal::new(0.0, st.sigma2.sqrt()).map_err(|e| SymCovError::Config(e.to_string()))?;
    let (lo, hi) = match st.design {
        Design::Dense => (40, 60),
        Design::Sparse => (3, 10),
    };
    let mean = TrueMean::SinPlusT;
    let mut curves = Vec::with_capacity(n);
    for i in 0..n {
        let d = rng.gen_range(lo..=hi);
        let t = sorted_uniform(&mut rng, d);
        let y = t.iter().map(|&x| mean.eval(x) + term.process(i, x) + noise.sample(&mut rng)).collect();
        curves.push(Curve { t, y, levels: vec![], slopes: vec![] });
    }
    let ids = (0..n).map(|i| format!("curve{i:03}")).collect();
    let table = ObservationTable::from_curves(ids, curves, vec![], vec![], vec![], Some(unit()))?;
    Ok((table, Truth { mean, terms: vec![term], sigma2: st.sigma2 }))
}

pub const SCENARIO2_B: usize = 9;
pub const SCENARIO2_C: usize = 16;
pub const SCENARIO2_REPEATS: usize = 5;

/// Generating parameters of the crossed scenario; eigenvalues may be altered for experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossedParams {
    pub nu_b: Vec<f64>,
    pub nu_c: Vec<f64>,
    pub nu_e: Vec<f64>,
    pub sigma2: f64,
    pub points: (usize, usize),
    /// Project the generating functions onto cubic splines of this dimension.
    pub spline_dim: Option<usize>,
}

impl Default for CrossedParams {
    fn default() -> Self {
        Self {
            nu_b: vec![5.86e-3, 2.71e-3],
            nu_c: vec![8.89e-3],
            nu_e: vec![19.05e-3, 7.53e-3, 2.66e-3],
            sigma2: 5.62e-3,
            points: (22, 57),
            spline_dim: Some(5),
        }
    }
}

pub fn generate_scenario2(seed: u64) -> Result<(ObservationTable, Truth)> {
    generate_scenario2_with(&CrossedParams::default(), seed, 0)
}

pub fn generate_scenario2_with(p: &CrossedParams, seed: u64, stream: u64) -> Result<(ObservationTable, Truth)> {
    let mut rng = rng_for(seed, stream);
    let n = SCENARIO2_B * SCENARIO2_C * SCENARIO2_REPEATS;
    let mk = |rng: &mut ChaCha8Rng, name: &str, levels: usize, nu: &[f64], f: Vec<AnalyticFn>| -> Result<TrueTerm> {
        let scores = if nu.iter().all(|v| *v == 0.0) {
            vec![vec![0.0; nu.len()]; levels]
        } else {
            decorrelated_scores(rng, levels, nu)?
        };
        Ok(TrueTerm { name: name.into(), nu: nu.to_vec(), functions: f, scores })
    };
    let shape = |f: Vec<AnalyticFn>| match p.spline_dim {
        Some(d) => project_to_splines(&f, d),
        None => Ok(f),
    };
    let b = mk(&mut rng, "B", SCENARIO2_B, &p.nu_b, shape(vec![AnalyticFn::One, AnalyticFn::Linear])?)?;
    let c = mk(&mut rng, "C", SCENARIO2_C, &p.nu_c, shape(vec![AnalyticFn::Sin(1)])?)?;
    let e = mk(&mut rng, "E", n, &p.nu_e, shape(vec![AnalyticFn::Cos(1), AnalyticFn::Sin(2), AnalyticFn::Cos(2)])?)?;
    let noise = Normal::new(0.0, p.sigma2.sqrt()).map_err(|e| SymCovError::Config(e.to_string()))?;
    let mean = TrueMean::Cosine;
    let mut ids = Vec::with_capacity(n);
    let mut curves = Vec::with_capacity(n);
    for lb in 0..SCENARIO2_B {
        for lc in 0..SCENARIO2_C {
            for r in 0..SCENARIO2_REPEATS {
                let i = curves.len();
                let d = rng.gen_range(p.points.0..=p.points.1);
                let t = sorted_uniform(&mut rng, d);
                let y = t
                    .iter()
                    .map(|&x| mean.eval(x) + b.process(lb, x) + c.process(lc, x) + e.process(i, x) + noise.sample(&mut rng))
                    .collect();
                ids.push(format!("b{lb}_c{lc:02}_r{r}"));
                curves.push(Curve { t, y, levels: vec![lb, lc], slopes: vec![] });
            }
        }
    }
    let level_names = vec![
        (0..SCENARIO2_B).map(|l| format!("b{l}")).collect(),
        (0..SCENARIO2_C).map(|l| format!("c{l:02}")).collect(),
    ];
    let table = ObservationTable::from_curves(ids, curves, vec!["B".into(), "C".into()], level_names, vec![], Some(unit()))?;
    Ok((table, Truth { mean, terms: vec![b, c, e], sigma2: p.sigma2 }))
}

/// Model used to fit each scenario.
pub fn scenario_model(scenario: u8, method: Method) -> ModelSpec {
    let mut spec = if scenario == 1 {
        ModelSpec::independent(10)
    } else {
        let mut s = ModelSpec::crossed("B", "C", 5);
        s.mean_spec = MeanSpec { dimension: 8, degree: 3, penalty_order: 2 };
        s.fixed_truncation = Some([("B".to_string(), 2), ("C".to_string(), 1), ("E".to_string(), 3)].into());
        s
    };
    spec.domain = Some(unit());
    spec.method = method;
    spec
}

/// `sqrt(sum (a - b)^2 / sum a^2)`.
pub fn rrmse(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(SymCovError::Dimension("rrMSE operands differ in length".into()));
    }
    let den: f64 = truth.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(SymCovError::UndefinedMetric("true value is zero".into()));
    }
    let num: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((num / den).sqrt())
}

/// rrMSE minimized over the sign of the estimate.
pub fn rrmse_signed(truth: &[f64], estimate: &[f64]) -> Result<(f64, f64)> {
    let pos = rrmse(truth, estimate)?;
    let flipped: Vec<f64> = estimate.iter().map(|v| -v).collect();
    let neg = rrmse(truth, &flipped)?;
    Ok(if neg < pos { (neg, -1.0) } else { (pos, 1.0) })
}

/// Score rrMSE normalized by the true eigenvalue.
pub fn rrmse_scores(truth: &[f64], estimate: &[f64], nu: f64) -> Result<f64> {
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(SymCovError::Dimension("score vectors differ in length".into()));
    }
    if nu <= 0.0 {
        return Err(SymCovError::UndefinedMetric("eigenvalue is zero".into()));
    }
    let mse = truth.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok((mse / nu).sqrt())
}

/// Component rrMSEs of one fit against the truth.
pub fn evaluate_fit(report: &FitReport, table: &ObservationTable, truth: &Truth) -> Result<Vec<(String, f64)>> {
    let model = &report.model;
    let grid = unit().midpoint_grid(model.spec.grid_size);
    let mut ks = Vec::new();
    let mut out = Vec::new();
    let detailed = truth.terms.len() == 1;
    for (tm, set) in model.terms.iter().zip(&report.scores.sets) {
        let Some(tt) = truth.term(&tm.name) else { continue };
        if tt.nu.iter().all(|v| *v == 0.0) {
            continue;
        }
        let khat = tm.surface.grid_matrix(&grid)?;
        let ktrue: Vec<f64> = grid.iter().flat_map(|&s| grid.iter().map(move |&t| (s, t))).map(|(s, t)| tt.covariance(s, t)).collect();
        let kest: Vec<f64> = (0..grid.len()).flat_map(|i| (0..grid.len()).map(move |j| (i, j))).map(|(i, j)| khat[(i, j)]).collect();
        ks.push((format!("K_{}", tm.name), rrmse(&ktrue, &kest)?));
        if !detailed {
            continue;
        }
        let n_est = tm.eigen.truncation;
        let mut signs = Vec::new();
        for (k, f) in tt.functions.iter().enumerate() {
            let phi_true: Vec<f64> = grid.iter().map(|&t| f.eval(t)).collect();
            let (v, sign) = if k < n_est { rrmse_signed(&phi_true, &tm.eigen.phi(k, 0))? } else { (1.0, 1.0) };
            signs.push(sign);
            out.push((format!("phi_{}_{}", tm.name, k + 1), v));
        }
        for (k, &nu) in tt.nu.iter().enumerate() {
            let est = tm.eigen.values.get(k).copied().unwrap_or(0.0);
            out.push((format!("nu_{}_{}", tm.name, k + 1), rrmse(&[nu], &[est])?));
        }
        for (k, &nu) in tt.nu.iter().enumerate() {
            let xt: Vec<f64> = tt.scores.iter().map(|s| s[k]).collect();
            let xe: Vec<f64> = (0..xt.len()).map(|l| if k < n_est { signs[k] * set.get(l, k) } else { 0.0 }).collect();
            out.push((format!("xi_{}_{}", tm.name, k + 1), rrmse_scores(&xt, &xe, nu)?));
        }
        // process: squared error averaged over levels and grid, relative to the mean variance
        let mut num = 0.0;
        for (l, _) in tt.scores.iter().enumerate() {
            for (d, &t) in grid.iter().enumerate() {
                let est: f64 = (0..n_est).map(|k| set.get(l, k) * tm.eigen.functions[(d, k)]).sum();
                num += (tt.process(l, t) - est).powi(2);
            }
        }
        let den: f64 = grid.iter().map(|&t| tt.covariance(t, t)).sum::<f64>() * tt.scores.len() as f64;
        out.push((tm.name.clone(), (num / den).sqrt()));
    }
    ks.push(("sigma2".into(), rrmse(&[truth.sigma2], &[model.sigma2])?));
    ks.append(&mut out);
    let mut out = ks;

    let fitted = reconstruct(model, table, &report.scores.sets, &grid)?;
    let mut ytrue = Vec::new();
    let mut yest = Vec::new();
    for (i, c) in table.curves.iter().enumerate() {
        for (d, &t) in grid.iter().enumerate() {
            let mut v = truth.mean.eval(t);
            for (tt, &lv) in truth.terms.iter().zip(curve_levels(truth, c, i).iter()) {
                v += tt.process(lv, t);
            }
            ytrue.push(v);
            yest.push(fitted[i][d]);
        }
    }
    out.push(("Y".into(), rrmse(&ytrue, &yest)?));
    Ok(out)
}

fn curve_levels(truth: &Truth, c: &Curve, i: usize) -> Vec<usize> {
    truth
        .terms
        .iter()
        .enumerate()
        .map(|(k, t)| if t.name == "E" { i } else { c.levels[k] })
        .collect()
}

/// Component labels `evaluate_fit` produces for a truth bundle.
pub fn expected_components(truth: &Truth) -> Vec<String> {
    let active: Vec<&TrueTerm> = truth.terms.iter().filter(|t| t.nu.iter().any(|v| *v != 0.0)).collect();
    let mut out: Vec<String> = active.iter().map(|t| format!("K_{}", t.name)).collect();
    out.push("sigma2".into());
    if truth.terms.len() == 1 {
        for t in &active {
            let k = t.nu.len();
            for prefix in ["phi", "nu", "xi"] {
                out.extend((1..=k).map(|j| format!("{prefix}_{}_{j}", t.name)));
            }
            out.push(t.name.clone());
        }
    }
    out.push("Y".into());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmseRow {
    pub replicate: usize,
    pub method: String,
    pub component: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub replicate: usize,
    pub method: String,
    pub smoothing_ms: Option<f64>,
    pub total_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub replicate: usize,
    pub method: String,
    pub term: String,
    pub truncation: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RrmseReport {
    pub rrmse: Vec<RrmseRow>,
    pub timings: Vec<TimingRow>,
    pub truncation: Vec<TruncationRow>,
    /// `(replicate, method, message)` for failed fits.
    pub failures: Vec<(usize, String, String)>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

impl RrmseReport {
    pub fn values(&self, method: Method, component: &str) -> Vec<f64> {
        self.rrmse
            .iter()
            .filter(|r| r.method == method.label() && r.component == component)
            .filter_map(|r| r.value)
            .collect()
    }

    pub fn median(&self, method: Method, component: &str) -> Option<f64> {
        median(self.values(method, component))
    }

    pub fn median_time(&self, method: Method) -> Option<f64> {
        median(self.timings.iter().filter(|r| r.method == method.label()).filter_map(|r| r.smoothing_ms).collect())
    }

    /// Share of replicates of `method` whose truncation for `term` equals `n`.
    pub fn truncation_share(&self, method: Method, term: &str, n: usize) -> f64 {
        let rows: Vec<_> = self.truncation.iter().filter(|r| r.method == method.label() && r.term == term).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.truncation == Some(n)).count() as f64 / rows.len() as f64
    }

    pub fn write_csvs(&self, dir: &std::path::Path) -> Result<()> {
        let na = |v: Option<String>| v.unwrap_or_else(|| "NA".into());
        let mut w = csv::Writer::from_path(dir.join("rrmse_report.csv"))?;
        w.write_record(["replicate", "method", "component", "value"])?;
        for r in &self.rrmse {
            w.write_record([r.replicate.to_string(), r.method.clone(), r.component.clone(), na(r.value.map(|v| v.to_string()))])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("timings.csv"))?;
        w.write_record(["replicate", "method", "smoothing_ms", "total_ms"])?;
        for r in &self.timings {
            w.write_record([
                r.replicate.to_string(),
                r.method.clone(),
                na(r.smoothing_ms.map(|v| format!("{v:.3}"))),
                na(r.total_ms.map(|v| format!("{v:.3}"))),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("truncation.csv"))?;
        w.write_record(["replicate", "method", "term", "truncation"])?;
        for r in &self.truncation {
            w.write_record([r.replicate.to_string(), r.method.clone(), r.term.clone(), na(r.truncation.map(|v| v.to_string()))])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Data and truth of one replicate.
pub fn generate_replicate(spec: &ScenarioSpec, rep: usize) -> Result<(ObservationTable, Truth)> {
    match spec.scenario {
        1 => generate_scenario1_stream(spec.setting, spec.n, spec.seed, rep as u64),
        2 => generate_scenario2_with(&CrossedParams::default(), spec.seed, rep as u64),
        s => Err(SymCovError::Config(format!("scenario must be 1 or 2, got {s}"))),
    }
}

struct MethodRun {
    rows: Vec<RrmseRow>,
    timing: TimingRow,
    truncation: Vec<TruncationRow>,
    failure: Option<String>,
}

fn run_method(spec: &ScenarioSpec, rep: usize, method: Method, table: &ObservationTable, truth: &Truth) -> MethodRun {
    let label = method.label().to_string();
    let model = scenario_model(spec.scenario, method);
    let start = Instant::now();
    let outcome = fit_pipeline(table, &model).and_then(|fit| {
        let total = start.elapsed().as_secs_f64() * 1e3;
        let comps = evaluate_fit(&fit, table, truth)?;
        Ok((fit, comps, total))
    });
    let row = |component: String, value| RrmseRow { replicate: rep, method: label.clone(), component, value };
    match outcome {
        Ok((fit, comps, total)) => MethodRun {
            rows: comps.into_iter().map(|(c, v)| row(c, Some(v))).collect(),
            timing: TimingRow {
                replicate: rep,
                method: label.clone(),
                smoothing_ms: fit.timings_ms.get("smoothing").copied(),
                total_ms: Some(total),
            },
            truncation: fit
                .model
                .terms
                .iter()
                .map(|t| TruncationRow { replicate: rep, method: label.clone(), term: t.name.clone(), truncation: Some(t.eigen.truncation) })
                .collect(),
            failure: None,
        },
        Err(e) => MethodRun {
            rows: expected_components(truth).into_iter().map(|c| row(c, None)).collect(),
            timing: TimingRow { replicate: rep, method: label.clone(), smoothing_ms: None, total_ms: None },
            truncation: truth
                .terms
                .iter()
                .map(|t| TruncationRow { replicate: rep, method: label.clone(), term: t.name.clone(), truncation: None })
                .collect(),
            failure: Some(e.to_string()),
        },
    }
}

/// Fits every method on every replicate; failed fits become NA rows.
pub fn run_benchmark(spec: &ScenarioSpec, methods: &[Method]) -> Result<RrmseReport> {
    spec.validate()?;
    if methods.is_empty() {
        return Err(SymCovError::Config("no methods selected".into()));
    }
    let runs: Vec<Result<Vec<MethodRun>>> = par::map_range(spec.reps, |rep| {
        let (table, truth) = generate_replicate(spec, rep)?;
        Ok(methods.iter().map(|&m| run_method(spec, rep, m, &table, &truth)).collect())
    });
    let mut report = RrmseReport::default();
    for (rep, r) in runs.into_iter().enumerate() {
        for run in r? {
            if let Some(msg) = run.failure {
                log::warn!("replicate {rep} {}: {msg}", run.timing.method);
                report.failures.push((rep, run.timing.method.clone(), msg));
            }
            report.rrmse.extend(run.rows);
            report.timings.push(run.timing);
            report.truncation.extend(run.truncation);
        }
    }
    Ok(report)
}

/// Tally of truncation levels per method and term.
pub fn truncation_tally(report: &RrmseReport) -> BTreeMap<(String, String), BTreeMap<usize, usize>> {
    let mut out: BTreeMap<(String, String), BTreeMap<usize, usize>> = BTreeMap::new();
    for r in &report.truncation {
        if let Some(n) = r.truncation {
            *out.entry((r.method.clone(), r.term.clone())).or_default().entry(n).or_default() += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rrmse_examples() {
        assert_eq!(rrmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rrmse(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rrmse_signed(&[1.0, -2.0], &[-1.0, 2.0]).unwrap().0, 0.0);
        assert!(matches!(rrmse(&[0.0], &[1.0]), Err(SymCovError::UndefinedMetric(_))));
        let a = [0.3, -1.2, 2.0];
        let b = [0.1, -1.0, 2.5];
        let c = -3.5;
        let sa: Vec<f64> = a.iter().map(|v| v * c).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * c).collect();
        assert!((rrmse(&a, &b).unwrap() - rrmse(&sa, &sb).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn scores_are_exactly_decorrelated() {
        let mut rng = rng_for(1, 0);
        let s = decorrelated_scores(&mut rng, 100, &[2.0, 1.0]).unwrap();
        let n = s.len() as f64;
        for k in 0..2 {
            let m: f64 = s.iter().map(|r| r[k]).sum::<f64>() / n;
            assert!(m.abs() < 1e-12);
        }
        let cov = |a: usize, b: usize| s.iter().map(|r| r[a] * r[b]).sum::<f64>() / (n - 1.0);
        assert!((cov(0, 0) - 2.0).abs() < 1e-10);
        assert!((cov(1, 1) - 1.0).abs() < 1e-10);
        assert!(cov(0, 1).abs() < 1e-10);
    }

    #[test]
    fn generators_are_deterministic_and_shaped() {
        let (a, _) = generate_scenario1(3, 7).unwrap();
        let (b, _) = generate_scenario1(3, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.curves.iter().all(|c| (40..=60).contains(&c.len())));
        let (s, _) = generate_scenario1(5, 7).unwrap();
        assert!(s.curves.iter().all(|c| (3..=10).contains(&c.len())));
        let (x, truth) = generate_scenario2(2).unwrap();
        assert_eq!(x.n_curves(), 720);
        assert_eq!(x.n_levels(0), 9);
        assert_eq!(x.n_levels(1), 16);
        assert!(x.curves.iter().all(|c| (22..=57).contains(&c.len())));
        assert_eq!(truth.terms.len(), 3);
    }

    #[test]
    fn noiseless_curves_lie_in_the_span() {
        let mut p = CrossedParams::default();
        p.sigma2 = 0.0;
        let (x, truth) = generate_scenario2_with(&p, 4, 0).unwrap();
        let c = &x.curves[17];
        for (&t, &y) in c.t.iter().zip(&c.y) {
            let v = truth.mean.eval(t)
                + truth.terms[0].process(c.levels[0], t)
                + truth.terms[1].process(c.levels[1], t)
                + truth.terms[2].process(17, t);
            assert!((v - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_setting_is_rejected() {
        assert!(setting(0).is_err());
        assert!(setting(12).is_err());
        assert!(ScenarioSpec::scenario1(3, 1, 0).validate().is_err());
    }

    #[test]
    fn one_replicate_report() {
        let spec = ScenarioSpec { scenario: 1, setting: 3, n: 40, seed: 11, reps: 1 };
        let rep = run_benchmark(&spec, &[Method::TriConstr]).unwrap();
        let (_, truth) = generate_replicate(&spec, 0).unwrap();
        let comps: Vec<String> = rep.rrmse.iter().map(|r| r.component.clone()).collect();
        assert_eq!(comps, expected_components(&truth));
        assert!(rep.rrmse.iter().all(|r| r.value.is_some_and(|v| v.is_finite() && v >= 0.0)));
        assert_eq!(rep.timings.len(), 1);
    }
}
