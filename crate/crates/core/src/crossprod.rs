//! Cross products of centered observations and the additive covariance design.
//!
//! Each random-effect term owns a block of *reduced* columns. Inside a term,
//! coefficients are addressed by a canonical full index
//! `((s * rho + s') * F + b) * F + b'` (component block `(s, s')`, then
//! row-major basis pair), which a column map sends to the reduced column
//! (through the symmetry constraint when the term is constrained).
//!
//! Two assembly paths exist: [`assemble_system`] materializes every row and is
//! meant for small data and matrix dumps; [`accumulate_normal_equations`]
//! streams over anchors, grouping partners by their active-term pattern so the
//! tensor structure `(b_p b_p^T) ⊗ Σ_q b_q b_q^T` is exploited.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SymCovError};
use crate::funcdata::{Component, Grouping, Method, ModelSpec, ObservationTable, PenaltyKind};
use crate::par;
use crate::remlfit::{LogDetForm, PenaltyBlock, PenalizedSystem};
use crate::splinebasis::{bivariate_penalty, difference_penalty, MarginalBasis, PenaltyShape};
use crate::symsmooth::{build_block_constraint, CoefficientLayout};

/// Flat view of all observations of a (centered) table.
#[derive(Debug, Clone)]
pub struct ObsIndex {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub curve: Vec<usize>,
    pub j: Vec<usize>,
    /// First global index of every curve, plus a final sentinel.
    pub offsets: Vec<usize>,
    levels: Vec<Vec<usize>>,
    slopes: Vec<Vec<f64>>,
    rank: Vec<usize>,
}

impl ObsIndex {
    pub fn new(table: &ObservationTable) -> Self {
        let n = table.n_obs();
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut curve = Vec::with_capacity(n);
        let mut j = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(table.n_curves() + 1);
        for (i, c) in table.curves.iter().enumerate() {
            offsets.push(t.len());
            for k in 0..c.len() {
                t.push(c.t[k]);
                y.push(c.y[k]);
                curve.push(i);
                j.push(k);
            }
        }
        offsets.push(t.len());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| t[a].total_cmp(&t[b]).then(curve[a].cmp(&curve[b])).then(j[a].cmp(&j[b])));
        let mut rank = vec![0; n];
        for (r, &o) in order.iter().enumerate() {
            rank[o] = r;
        }
        Self {
            t,
            y,
            curve,
            j,
            offsets,
            levels: table.curves.iter().map(|c| c.levels.clone()).collect(),
            slopes: table.curves.iter().map(|c| c.slopes.clone()).collect(),
            rank,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n_curves(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Global index of observation `j` of curve `i`.
    pub fn global(&self, i: usize, j: usize) -> usize {
        self.offsets[i] + j
    }

    /// Strict order on observations: by `t`, ties broken by `(curve, j)`.
    pub fn precedes(&self, p: usize, q: usize) -> bool {
        self.rank[p] < self.rank[q]
    }

    pub fn level(&self, p: usize, grouping: usize) -> usize {
        self.levels[self.curve[p]][grouping]
    }

    /// Slope weight `omega` of observation `p` for a component.
    pub fn omega(&self, p: usize, slope: Option<usize>) -> f64 {
        match slope {
            None => 1.0,
            Some(k) => self.slopes[self.curve[p]][k],
        }
    }
}

/// Which observations share a realization of a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermGroup {
    Curve,
    All,
    Level(usize),
}

#[derive(Debug, Clone)]
pub struct TermDesign {
    pub name: String,
    pub group: TermGroup,
    /// Slope column per component; `None` is the intercept.
    pub slopes: Vec<Option<usize>>,
    pub basis: MarginalBasis,
    pub penalty_order: usize,
    pub penalty_kind: PenaltyKind,
    pub constrained: bool,
    /// First global column of the term.
    pub offset: usize,
    pub n_cols: usize,
    col_map: Vec<usize>,
}

impl TermDesign {
    pub fn rho(&self) -> usize {
        self.slopes.len()
    }

    pub fn f(&self) -> usize {
        self.basis.dim()
    }

    pub fn full_len(&self) -> usize {
        let (r, f) = (self.rho(), self.f());
        r * r * f * f
    }

    pub fn full_index(&self, s: usize, sp: usize, b: usize, bp: usize) -> usize {
        let f = self.f();
        ((s * self.rho() + sp) * f + b) * f + bp
    }

    /// Global column of a canonical full index.
    pub fn col(&self, full: usize) -> usize {
        self.offset + self.col_map[full]
    }

    pub fn local_col(&self, full: usize) -> usize {
        self.col_map[full]
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.n_cols
    }

    /// Coefficient matrix `Theta_{ss'}` from the term's reduced coefficients.
    pub fn block_matrix(&self, theta_local: &[f64], s: usize, sp: usize) -> DMatrix<f64> {
        let f = self.f();
        DMatrix::from_fn(f, f, |b, bp| theta_local[self.col_map[self.full_index(s, sp, b, bp)]])
    }

    /// Penalty matrices in local reduced coordinates with their log-determinant form.
    pub fn penalty_block(&self) -> Result<PenaltyBlock> {
        let f = self.f();
        let marg = difference_penalty(f, self.penalty_order)?;
        let nblk = self.rho() * self.rho();
        let blockdiag = |m: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(self.full_len(), self.full_len());
            for k in 0..nblk {
                out.view_mut((k * f * f, k * f * f), (f * f, f * f)).copy_from(m);
            }
            out
        };
        let reduce = |full: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(self.n_cols, self.n_cols);
            for i in 0..full.nrows() {
                for j in 0..full.ncols() {
                    let v = full[(i, j)];
                    if v != 0.0 {
                        out[(self.col_map[i], self.col_map[j])] += v;
                    }
                }
            }
            out
        };
        let range = self.range();
        if !self.constrained && self.penalty_kind == PenaltyKind::KronSum {
            let eye = DMatrix::<f64>::identity(f, f);
            let s1 = reduce(&blockdiag(&marg.matrix.kronecker(&eye)));
            let s2 = reduce(&blockdiag(&eye.kronecker(&marg.matrix)));
            let a: Vec<f64> = SymmetricEigen::new(marg.matrix.clone()).eigenvalues.iter().copied().collect();
            return Ok(PenaltyBlock {
                name: self.name.clone(),
                range,
                matrices: vec![s1, s2],
                logdet: LogDetForm::KronSum { a: a.clone(), b: a, copies: nblk },
            });
        }
        let shape = match self.penalty_kind {
            PenaltyKind::KronSum => PenaltyShape::KronSum,
            PenaltyKind::KronProd => PenaltyShape::KronProd,
        };
        let biv = bivariate_penalty(&marg, &marg, shape, true)?;
        let s = reduce(&blockdiag(&biv.matrix));
        let s = (&s + s.transpose()) * 0.5;
        let eig: Vec<f64> = SymmetricEigen::new(s.clone()).eigenvalues.iter().copied().collect();
        Ok(PenaltyBlock { name: self.name.clone(), range, matrices: vec![s], logdet: LogDetForm::Eigen(eig) })
    }
}

/// Which products enter the regression and how they are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssemblyOptions {
    pub both_orientations: bool,
    pub constrained: bool,
    /// Weight of same-point products.
    pub diag_weight: f64,
}

impl AssemblyOptions {
    pub fn for_method(method: Method, diag_weight: f64) -> Self {
        match method {
            Method::TriConstr => Self { both_orientations: false, constrained: true, diag_weight: 1.0 },
            Method::TriConstrW => Self { both_orientations: false, constrained: true, diag_weight },
            Method::Tri => Self { both_orientations: false, constrained: false, diag_weight: 1.0 },
            Method::Whole => Self { both_orientations: true, constrained: false, diag_weight: 1.0 },
        }
    }
}

/// Column layout of the full additive design `[M^1 | ... | M^E | delta^eps]`.
#[derive(Debug, Clone)]
pub struct DesignLayout {
    pub terms: Vec<TermDesign>,
    pub eps_col: usize,
    pub n_cols: usize,
    pub options: AssemblyOptions,
}

impl DesignLayout {
    pub fn new(spec: &ModelSpec, table: &ObservationTable, options: AssemblyOptions) -> Result<Self> {
        spec.check_against(table)?;
        if spec.terms.len() > 63 {
            return Err(SymCovError::InvalidSpec("at most 63 terms are supported".into()));
        }
        let domain = spec.domain.unwrap_or(table.domain);
        let mut terms = Vec::with_capacity(spec.terms.len());
        let mut offset = 0;
        for ts in &spec.terms {
            let group = match &ts.grouping {
                Grouping::Curve => TermGroup::Curve,
                Grouping::None => TermGroup::All,
                Grouping::Variable(g) => TermGroup::Level(table.grouping_index(g).ok_or_else(|| {
                    SymCovError::Schema(format!("term `{}` references unknown grouping `{g}`", ts.name))
                })?),
            };
            let slopes = ts
                .components
                .iter()
                .map(|c| match c {
                    Component::Intercept => Ok(None),
                    Component::Slope(w) => table
                        .slope_index(w)
                        .map(Some)
                        .ok_or_else(|| SymCovError::Schema(format!("unknown slope column `w_{w}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let basis = MarginalBasis::from_spec(domain, &ts.marginal_basis)?;
            let f = basis.dim();
            let rho = slopes.len();
            let (col_map, n_cols) = if options.constrained {
                let layouts = vec![CoefficientLayout::square(f); rho * rho];
                let w = build_block_constraint(rho, &layouts)?;
                let map = (0..rho * rho * f * f)
                    .map(|full| {
                        let blk = full / (f * f);
                        let within = full % (f * f);
                        w.col_of_row(blk * f * f + layouts[0].partition_of_rowmajor(within))
                    })
                    .collect();
                (map, w.n_cols())
            } else {
                ((0..rho * rho * f * f).collect(), rho * rho * f * f)
            };
            terms.push(TermDesign {
                name: ts.name.clone(),
                group,
                slopes,
                basis,
                penalty_order: ts.marginal_basis.penalty_order,
                penalty_kind: ts.penalty_kind,
                constrained: options.constrained,
                offset,
                n_cols,
                col_map,
            });
            offset += n_cols;
        }
        Ok(Self { terms, eps_col: offset, n_cols: offset + 1, options })
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name == name)
    }

    /// Bit `k` is set when term `k` links observations `p` and `q`.
    pub fn mask(&self, idx: &ObsIndex, p: usize, q: usize) -> u64 {
        let mut m = 0u64;
        for (k, term) in self.terms.iter().enumerate() {
            let on = match term.group {
                TermGroup::Curve => idx.curve[p] == idx.curve[q],
                TermGroup::All => true,
                TermGroup::Level(g) => idx.level(p, g) == idx.level(q, g),
            };
            if on {
                m |= 1 << k;
            }
        }
        m
    }

    /// Penalized system from accumulated normal equations.
    pub fn penalized_system(&self, ne: NormalEquations) -> Result<PenalizedSystem> {
        let blocks = self.terms.iter().map(TermDesign::penalty_block).collect::<Result<Vec<_>>>()?;
        PenalizedSystem::new(ne.xtwx, ne.xtwc, ne.ctwc, ne.sum_w, ne.n_rows, blocks, vec![self.eps_col])
    }
}

/// One retained product `y_p * y_q`, with `p` the first argument of the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub i: usize,
    pub j: usize,
    pub ip: usize,
    pub jp: usize,
    /// Global observation indices.
    pub p: usize,
    pub q: usize,
    pub same_curve: bool,
    pub same_point: bool,
    /// Bit `k` set when term `k` contributes (`delta_{U(i) U(i')}`).
    pub active: u64,
}

/// Observation lists that together cover every pair with nonzero expectation.
struct PartnerSets {
    keys: Vec<SetKey>,
    lists: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Copy)]
enum SetKey {
    Curve,
    All,
    Level(usize),
}

impl PartnerSets {
    fn new(idx: &ObsIndex, layout: &DesignLayout) -> Self {
        let mut keys = Vec::new();
        if layout.terms.iter().any(|t| t.group == TermGroup::All) {
            keys.push(SetKey::All);
        } else {
            for t in &layout.terms {
                if let TermGroup::Level(g) = t.group {
                    if !keys.iter().any(|k| matches!(k, SetKey::Level(h) if *h == g)) {
                        keys.push(SetKey::Level(g));
                    }
                }
            }
            if keys.is_empty() {
                keys.push(SetKey::Curve);
            }
        }
        let mut by_rank: Vec<usize> = (0..idx.len()).collect();
        by_rank.sort_by_key(|&p| idx.rank[p]);
        let lists = keys
            .iter()
            .map(|&key| {
                let n = match key {
                    SetKey::Curve => idx.n_curves(),
                    SetKey::All => 1,
                    SetKey::Level(g) => idx.levels.iter().map(|l| l[g] + 1).max().unwrap_or(0),
                };
                let mut lists = vec![Vec::new(); n];
                for &p in &by_rank {
                    lists[Self::key_of(key, idx, p)].push(p);
                }
                lists
            })
            .collect();
        Self { keys, lists }
    }

    fn key_of(key: SetKey, idx: &ObsIndex, p: usize) -> usize {
        match key {
            SetKey::Curve => idx.curve[p],
            SetKey::All => 0,
            SetKey::Level(g) => idx.level(p, g),
        }
    }

    /// Visit every partner `q != p` of anchor `p` once. With `upper`, only
    /// partners after `p` in the observation order are visited.
    fn for_each<F: FnMut(usize)>(&self, idx: &ObsIndex, p: usize, upper: bool, mut f: F) {
        for (m, &key) in self.keys.iter().enumerate() {
            let list = &self.lists[m][Self::key_of(key, idx, p)];
            let start = if upper { list.partition_point(|&q| idx.rank[q] <= idx.rank[p]) } else { 0 };
            'partner: for &q in &list[start..] {
                if q == p {
                    continue;
                }
                for &prev in &self.keys[..m] {
                    if Self::key_of(prev, idx, q) == Self::key_of(prev, idx, p) {
                        continue 'partner;
                    }
                }
                f(q);
            }
        }
    }
}

/// All retained pairs in lexicographic `(i, i', j, j')` order.
pub fn enumerate_pairs(idx: &ObsIndex, layout: &DesignLayout) -> Vec<PairIndex> {
    let sets = PartnerSets::new(idx, layout);
    let upper = !layout.options.both_orientations;
    let make = |p: usize, q: usize| PairIndex {
        i: idx.curve[p],
        j: idx.j[p],
        ip: idx.curve[q],
        jp: idx.j[q],
        p,
        q,
        same_curve: idx.curve[p] == idx.curve[q],
        same_point: p == q,
        active: layout.mask(idx, p, q),
    };
    let mut pairs = Vec::new();
    for p in 0..idx.len() {
        pairs.push(make(p, p));
        sets.for_each(idx, p, upper, |q| pairs.push(make(p, q)));
    }
    pairs.sort_by_key(|x| (x.i, x.ip, x.j, x.jp));
    pairs
}

/// Sparse reduced design row of the product `(p, q)`, sorted by column.
pub fn design_row(idx: &ObsIndex, layout: &DesignLayout, p: usize, q: usize) -> Result<Vec<(usize, f64)>> {
    let mask = layout.mask(idx, p, q);
    let mut entries = Vec::new();
    for (k, term) in layout.terms.iter().enumerate() {
        if mask & (1 << k) == 0 {
            continue;
        }
        let bp = term.basis.eval_sparse(idx.t[p])?;
        let bq = term.basis.eval_sparse(idx.t[q])?;
        for (s, &ws) in term.slopes.iter().enumerate() {
            for (sp, &wsp) in term.slopes.iter().enumerate() {
                let om = idx.omega(p, ws) * idx.omega(q, wsp);
                for (a, va) in bp.values.iter().enumerate() {
                    for (b, vb) in bq.values.iter().enumerate() {
                        let full = term.full_index(s, sp, bp.start + a, bq.start + b);
                        entries.push((term.col(full), om * va * vb));
                    }
                }
            }
        }
    }
    if p == q {
        entries.push((layout.eps_col, 1.0));
    }
    entries.sort_by_key(|e| e.0);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
    for (c, v) in entries {
        match merged.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => merged.push((c, v)),
        }
    }
    Ok(merged)
}

/// Per-pair weights multiplying the method weights (e.g. inverse variances).
pub trait PairWeight: Sync {
    fn weight(&self, p: usize, q: usize) -> f64;
}

/// Materialized regression of cross products.
#[derive(Debug, Clone)]
pub struct CrossProductSystem {
    pub c: DVector<f64>,
    pub w: DVector<f64>,
    /// Reduced design, all term blocks followed by the error indicator column.
    pub x: DMatrix<f64>,
    pub pairs: Vec<PairIndex>,
    pub term_ranges: Vec<Range<usize>>,
    pub eps_col: usize,
}

impl CrossProductSystem {
    pub fn n_rows(&self) -> usize {
        self.c.len()
    }

    pub fn term_block(&self, k: usize) -> DMatrix<f64> {
        let r = &self.term_ranges[k];
        self.x.columns(r.start, r.len()).into_owned()
    }

    pub fn eps_column(&self) -> DVector<f64> {
        self.x.column(self.eps_col).into_owned()
    }

    pub fn normal_equations(&self) -> NormalEquations {
        let wx = DMatrix::from_fn(self.x.nrows(), self.x.ncols(), |i, j| self.x[(i, j)] * self.w[i]);
        let xtwx = wx.transpose() * &self.x;
        let xtwc = wx.transpose() * &self.c;
        let ctwc = self.c.iter().zip(self.w.iter()).map(|(c, w)| w * c * c).sum();
        NormalEquations {
            xtwx: (&xtwx + xtwx.transpose()) * 0.5,
            xtwc,
            ctwc,
            sum_w: self.w.sum(),
            n_rows: self.n_rows(),
        }
    }
}

pub fn assemble_system(
    idx: &ObsIndex,
    layout: &DesignLayout,
    pairs: &[PairIndex],
    weights: Option<&dyn PairWeight>,
) -> Result<CrossProductSystem> {
    let n = pairs.len();
    let mut x = DMatrix::zeros(n, layout.n_cols);
    let mut c = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let rows = par::map(pairs, |pr| design_row(idx, layout, pr.p, pr.q));
    for (r, (pr, row)) in pairs.iter().zip(rows).enumerate() {
        for (col, v) in row? {
            x[(r, col)] = v;
        }
        c[r] = idx.y[pr.p] * idx.y[pr.q];
        let base = if pr.same_point { layout.options.diag_weight } else { 1.0 };
        w[r] = base * weights.map_or(1.0, |pw| pw.weight(pr.p, pr.q));
    }
    Ok(CrossProductSystem {
        c,
        w,
        x,
        pairs: pairs.to_vec(),
        term_ranges: layout.terms.iter().map(TermDesign::range).collect(),
        eps_col: layout.eps_col,
    })
}

/// Sufficient statistics of a weighted least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub xtwx: DMatrix<f64>,
    pub xtwc: DVector<f64>,
    pub ctwc: f64,
    pub sum_w: f64,
    pub n_rows: usize,
}

impl NormalEquations {
    /// Rescale all weights by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        self.xtwx *= factor;
        self.xtwc *= factor;
        self.ctwc *= factor;
        self.sum_w *= factor;
    }
}

struct Feature {
    basis: usize,
    slope: Option<usize>,
}

/// Per-observation feature rows shared by all anchors.
struct Features {
    nz: usize,
    zoff: Vec<usize>,
    width: Vec<usize>,
    start: Vec<Vec<usize>>,
    vals: Vec<Vec<f64>>,
    /// feature id per (term, component)
    of: Vec<Vec<usize>>,
    basis_of_term: Vec<usize>,
    /// per basis: start index and values at every observation
    bstart: Vec<Vec<usize>>,
    bvals: Vec<Vec<f64>>,
    bwidth: Vec<usize>,
}

impl Features {
    fn new(idx: &ObsIndex, layout: &DesignLayout) -> Result<Self> {
        let mut bases: Vec<&MarginalBasis> = Vec::new();
        let mut basis_of_term = Vec::new();
        for t in &layout.terms {
            let b = match bases.iter().position(|b| **b == t.basis) {
                Some(b) => b,
                None => {
                    bases.push(&t.basis);
                    bases.len() - 1
                }
            };
            basis_of_term.push(b);
        }
        let mut bstart = Vec::new();
        let mut bvals = Vec::new();
        let mut bwidth = Vec::new();
        for b in &bases {
            let w = b.degree() + 1;
            let mut st = Vec::with_capacity(idx.len());
            let mut vs = Vec::with_capacity(idx.len() * w);
            for &t in &idx.t {
                let row = b.eval_sparse(t)?;
                st.push(row.start);
                vs.extend_from_slice(&row.values);
            }
            bstart.push(st);
            bvals.push(vs);
            bwidth.push(w);
        }
        let mut feats: Vec<Feature> = Vec::new();
        let mut of = Vec::new();
        for (k, t) in layout.terms.iter().enumerate() {
            let mut ids = Vec::new();
            for &slope in &t.slopes {
                let basis = basis_of_term[k];
                let id = match feats.iter().position(|f| f.basis == basis && f.slope == slope) {
                    Some(id) => id,
                    None => {
                        feats.push(Feature { basis, slope });
                        feats.len() - 1
                    }
                };
                ids.push(id);
            }
            of.push(ids);
        }
        let mut zoff = Vec::new();
        let mut nz = 0;
        let mut start = Vec::new();
        let mut vals = Vec::new();
        let mut width = Vec::new();
        for f in &feats {
            zoff.push(nz);
            nz += bases[f.basis].dim();
            let w = bwidth[f.basis];
            width.push(w);
            start.push(bstart[f.basis].clone());
            let mut v = bvals[f.basis].clone();
            if f.slope.is_some() {
                for p in 0..idx.len() {
                    let om = idx.omega(p, f.slope);
                    for x in &mut v[p * w..(p + 1) * w] {
                        *x *= om;
                    }
                }
            }
            vals.push(v);
        }
        Ok(Self { nz, zoff, width, start, vals, of, basis_of_term, bstart, bvals, bwidth })
    }
}

struct Slot {
    mask: u64,
    g: Vec<f64>,
    h: Vec<f64>,
    syy: f64,
    sw: f64,
    n: usize,
}

struct Partial {
    xtwx: Vec<f64>,
    xtwc: Vec<f64>,
    ctwc: f64,
    sum_w: f64,
    n_rows: usize,
}

/// Stream all retained products into `X^T W X`, `X^T W c`, `c^T W c`.
///
/// Anchors are processed in fixed chunks and the partial sums are reduced in
/// chunk order, so the result does not depend on the number of threads.
pub fn accumulate_normal_equations(
    idx: &ObsIndex,
    layout: &DesignLayout,
    weights: Option<&dyn PairWeight>,
) -> Result<NormalEquations> {
    let feats = Features::new(idx, layout)?;
    let sets = PartnerSets::new(idx, layout);
    let n = layout.n_cols;
    let chunk = (idx.len() / 64).max(256);
    let ranges = par::chunks(idx.len(), chunk);
    let partials = par::map(&ranges, |r| accumulate_chunk(idx, layout, &feats, &sets, weights, r.clone()));
    let mut xtwx = vec![0.0; n * n];
    let mut xtwc = vec![0.0; n];
    let (mut ctwc, mut sum_w, mut n_rows) = (0.0, 0.0, 0);
    for part in partials {
        for (a, b) in xtwx.iter_mut().zip(&part.xtwx) {
            *a += b;
        }
        for (a, b) in xtwc.iter_mut().zip(&part.xtwc) {
            *a += b;
        }
        ctwc += part.ctwc;
        sum_w += part.sum_w;
        n_rows += part.n_rows;
    }
    let m = DMatrix::from_row_slice(n, n, &xtwx);
    let ne = NormalEquations {
        xtwx: (&m + m.transpose()) * 0.5,
        xtwc: DVector::from_vec(xtwc),
        ctwc,
        sum_w,
        n_rows,
    };
    if !ne.ctwc.is_finite() || ne.xtwx.iter().any(|v| !v.is_finite()) {
        return Err(SymCovError::NonFinite("cross-product normal equations".into()));
    }
    Ok(ne)
}

fn accumulate_chunk(
    idx: &ObsIndex,
    layout: &DesignLayout,
    feats: &Features,
    sets: &PartnerSets,
    weights: Option<&dyn PairWeight>,
    anchors: Range<usize>,
) -> Partial {
    let n = layout.n_cols;
    let nz = feats.nz;
    let nf = feats.zoff.len();
    let upper = !layout.options.both_orientations;
    let mut out = Partial { xtwx: vec![0.0; n * n], xtwc: vec![0.0; n], ctwc: 0.0, sum_w: 0.0, n_rows: 0 };
    let mut slots: Vec<Slot> = Vec::new();
    let mut slot_of: HashMap<u64, usize> = HashMap::new();
    let mut row_buf: Vec<(usize, f64)> = Vec::new();

    for p in anchors {
        for s in &mut slots {
            s.g.iter_mut().for_each(|v| *v = 0.0);
            s.h.iter_mut().for_each(|v| *v = 0.0);
            s.syy = 0.0;
            s.sw = 0.0;
            s.n = 0;
        }
        let yp = idx.y[p];

        // same-point product, explicit row with the error indicator
        row_buf.clear();
        self_row(idx, layout, feats, p, &mut row_buf);
        let w0 = layout.options.diag_weight * weights.map_or(1.0, |pw| pw.weight(p, p));
        let c0 = yp * yp;
        for &(a, va) in &row_buf {
            out.xtwc[a] += w0 * va * c0;
            for &(b, vb) in &row_buf {
                out.xtwx[a * n + b] += w0 * va * vb;
            }
        }
        out.ctwc += w0 * c0 * c0;
        out.sum_w += w0;
        out.n_rows += 1;

        sets.for_each(idx, p, upper, |q| {
            let mask = layout.mask(idx, p, q);
            let si = *slot_of.entry(mask).or_insert_with(|| {
                slots.push(Slot { mask, g: vec![0.0; nz * nz], h: vec![0.0; nz], syy: 0.0, sw: 0.0, n: 0 });
                slots.len() - 1
            });
            let w = weights.map_or(1.0, |pw| pw.weight(p, q));
            let yq = idx.y[q];
            let slot = &mut slots[si];
            slot.sw += w;
            slot.syy += w * yq * yq;
            slot.n += 1;
            for f in 0..nf {
                let wf = feats.width[f];
                let rf = feats.zoff[f] + feats.start[f][q];
                let vf = &feats.vals[f][q * wf..(q + 1) * wf];
                for (a, va) in vf.iter().enumerate() {
                    slot.h[rf + a] += w * yq * va;
                }
                for f2 in 0..nf {
                    let wf2 = feats.width[f2];
                    let rf2 = feats.zoff[f2] + feats.start[f2][q];
                    let vf2 = &feats.vals[f2][q * wf2..(q + 1) * wf2];
                    for (a, va) in vf.iter().enumerate() {
                        let wa = w * va;
                        let row = &mut slot.g[(rf + a) * nz + rf2..(rf + a) * nz + rf2 + wf2];
                        for (g, vb) in row.iter_mut().zip(vf2) {
                            *g += wa * vb;
                        }
                    }
                }
            }
        });

        for slot in slots.iter().filter(|s| s.n > 0) {
            fold_slot(idx, layout, feats, p, slot, &mut out);
        }
    }
    out
}

/// Same-point row in reduced coordinates (unsorted, duplicates allowed).
fn self_row(idx: &ObsIndex, layout: &DesignLayout, feats: &Features, p: usize, out: &mut Vec<(usize, f64)>) {
    for (k, term) in layout.terms.iter().enumerate() {
        let bi = feats.basis_of_term[k];
        let w = feats.bwidth[bi];
        let st = feats.bstart[bi][p];
        let v = &feats.bvals[bi][p * w..(p + 1) * w];
        for (s, &ws) in term.slopes.iter().enumerate() {
            for (sp, &wsp) in term.slopes.iter().enumerate() {
                let om = idx.omega(p, ws) * idx.omega(p, wsp);
                for (a, va) in v.iter().enumerate() {
                    for (b, vb) in v.iter().enumerate() {
                        out.push((term.col(term.full_index(s, sp, st + a, st + b)), om * va * vb));
                    }
                }
            }
        }
    }
    out.push((layout.eps_col, 1.0));
}

/// Add `(a_k a_l^T) ⊗ G` blocks of one partner pattern to the partial sums.
fn fold_slot(idx: &ObsIndex, layout: &DesignLayout, feats: &Features, p: usize, slot: &Slot, out: &mut Partial) {
    let n = layout.n_cols;
    let nz = feats.nz;
    let yp = idx.y[p];
    let active: Vec<usize> = (0..layout.terms.len()).filter(|k| slot.mask & (1 << k) != 0).collect();
    out.ctwc += yp * yp * slot.syy;
    out.sum_w += slot.sw;
    out.n_rows += slot.n;
    for &k in &active {
        let tk = &layout.terms[k];
        let fk = tk.f();
        let bk = feats.basis_of_term[k];
        let wk = feats.bwidth[bk];
        let stk = feats.bstart[bk][p];
        let vk = &feats.bvals[bk][p * wk..(p + 1) * wk];
        for (s, &ws) in tk.slopes.iter().enumerate() {
            let oms = idx.omega(p, ws);
            for sp in 0..tk.rho() {
                let z1 = feats.zoff[feats.of[k][sp]];
                for (a, va) in vk.iter().enumerate() {
                    let ca = oms * va;
                    if ca == 0.0 {
                        continue;
                    }
                    let b = stk + a;
                    let row_cols: Vec<usize> = (0..fk).map(|bp| tk.col(tk.full_index(s, sp, b, bp))).collect();
                    for (bp, &rc) in row_cols.iter().enumerate() {
                        let hv = slot.h[z1 + bp];
                        if hv != 0.0 {
                            out.xtwc[rc] += yp * ca * hv;
                        }
                    }
                    for &l in &active {
                        let tl = &layout.terms[l];
                        let fl = tl.f();
                        let bl = feats.basis_of_term[l];
                        let wl = feats.bwidth[bl];
                        let stl = feats.bstart[bl][p];
                        let vl = &feats.bvals[bl][p * wl..(p + 1) * wl];
                        for (u, &wu) in tl.slopes.iter().enumerate() {
                            let omu = idx.omega(p, wu);
                            for up in 0..tl.rho() {
                                let z2 = feats.zoff[feats.of[l][up]];
                                for (c, vc) in vl.iter().enumerate() {
                                    let coef = ca * omu * vc;
                                    if coef == 0.0 {
                                        continue;
                                    }
                                    let cc = stl + c;
                                    let base_full = tl.full_index(u, up, cc, 0);
                                    for (bp, &rc) in row_cols.iter().enumerate() {
                                        let grow = &slot.g[(z1 + bp) * nz + z2..(z1 + bp) * nz + z2 + fl];
                                        let xrow = &mut out.xtwx[rc * n..(rc + 1) * n];
                                        for (cp, &g) in grow.iter().enumerate() {
                                            if g != 0.0 {
                                                xrow[tl.col(base_full + cp)] += coef * g;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Model covariance `Cov(Y_p, Y_q)` of two centered observations.
pub trait CovarianceModel: Sync {
    fn cov(&self, p: usize, q: usize) -> Result<f64>;
}

/// `Var(y_p y_q) = C_pp C_qq + C_pq^2` for every pair (Isserlis, zero means).
pub fn crossprod_variance(pairs: &[PairIndex], model: &dyn CovarianceModel) -> Result<Vec<f64>> {
    let out: Vec<Result<f64>> = par::map(pairs, |pr| {
        let cpp = model.cov(pr.p, pr.p)?;
        let cqq = model.cov(pr.q, pr.q)?;
        let cpq = model.cov(pr.p, pr.q)?;
        let v = cpp * cqq + cpq * cpq;
        if !v.is_finite() {
            return Err(SymCovError::NonFinite(format!("variance of pair ({}, {})", pr.p, pr.q)));
        }
        Ok(v)
    });
    out.into_iter().collect()
}

/// Fitted additive covariance `sum_k delta_k K_k + delta_pq sigma^2`.
pub struct FittedCovariance<'a> {
    idx: &'a ObsIndex,
    layout: &'a DesignLayout,
    /// per term, the `rho^2` coefficient blocks in `(s, s')` order
    blocks: Vec<Vec<DMatrix<f64>>>,
    rows: Vec<Vec<(usize, Vec<f64>)>>,
    sigma2: f64,
}

impl<'a> FittedCovariance<'a> {
    pub fn new(idx: &'a ObsIndex, layout: &'a DesignLayout, theta: &[f64], sigma2: f64) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut rows = Vec::new();
        for term in &layout.terms {
            let local = &theta[term.range()];
            let mut b = Vec::new();
            for s in 0..term.rho() {
                for sp in 0..term.rho() {
                    b.push(term.block_matrix(local, s, sp));
                }
            }
            blocks.push(b);
            rows.push(
                idx.t
                    .iter()
                    .map(|&t| term.basis.eval_sparse(t).map(|r| (r.start, r.values)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { idx, layout, blocks, rows, sigma2 })
    }

    fn kernel(&self, k: usize, s: usize, sp: usize, p: usize, q: usize) -> f64 {
        let rho = self.layout.terms[k].rho();
        let (a, b, blk) = if p == q || self.idx.precedes(p, q) { (p, q, s * rho + sp) } else { (q, p, sp * rho + s) };
        let th = &self.blocks[k][blk];
        let (sa, va) = &self.rows[k][a];
        let (sb, vb) = &self.rows[k][b];
        let mut acc = 0.0;
        for (i, x) in va.iter().enumerate() {
            for (j, y) in vb.iter().enumerate() {
                acc += x * th[(sa + i, sb + j)] * y;
            }
        }
        acc
    }
}

impl CovarianceModel for FittedCovariance<'_> {
    fn cov(&self, p: usize, q: usize) -> Result<f64> {
        let mask = self.layout.mask(self.idx, p, q);
        let mut c = 0.0;
        for (k, term) in self.layout.terms.iter().enumerate() {
            if mask & (1 << k) == 0 {
                continue;
            }
            for (s, &ws) in term.slopes.iter().enumerate() {
                for (sp, &wsp) in term.slopes.iter().enumerate() {
                    c += self.idx.omega(p, ws) * self.idx.omega(q, wsp) * self.kernel(k, s, sp, p, q);
                }
            }
        }
        if p == q {
            c += self.sigma2;
        }
        if !c.is_finite() {
            return Err(SymCovError::NonFinite("fitted covariance".into()));
        }
        Ok(c)
    }
}

/// Inverse-variance pair weights from a covariance model, floored for stability.
pub struct InverseVarianceWeights<'a, M: CovarianceModel> {
    model: &'a M,
    diag: Vec<f64>,
    floor: f64,
}

impl<'a, M: CovarianceModel> InverseVarianceWeights<'a, M> {
    pub fn new(model: &'a M, n_obs: usize) -> Result<Self> {
        let diag = (0..n_obs).map(|p| model.cov(p, p).map(|v| v.max(0.0))).collect::<Result<Vec<_>>>()?;
        let mean = diag.iter().sum::<f64>() / n_obs.max(1) as f64;
        let floor = (1e-3 * mean * mean).max(f64::MIN_POSITIVE);
        Ok(Self { model, diag, floor })
    }
}

impl<M: CovarianceModel> PairWeight for InverseVarianceWeights<'_, M> {
    fn weight(&self, p: usize, q: usize) -> f64 {
        let cpq = self.model.cov(p, q).unwrap_or(0.0);
        1.0 / (self.diag[p] * self.diag[q] + cpq * cpq).max(self.floor)
    }
}
