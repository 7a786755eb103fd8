//! Long-format functional observations and the model specification.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, SymCovError};

/// Closed observation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
}

impl Domain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(SymCovError::InvalidSpec(format!(
                "domain [{lo}, {hi}] must be a finite interval with lo < hi"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    /// Equidistant midpoint grid of `d` points.
    pub fn midpoint_grid(&self, d: usize) -> Vec<f64> {
        let h = self.width() / d as f64;
        (0..d).map(|k| self.lo + (k as f64 + 0.5) * h).collect()
    }
}

impl Serialize for Domain {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.lo, self.hi].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Domain {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [lo, hi] = <[f64; 2]>::deserialize(d)?;
        Domain::new(lo, hi).map_err(serde::de::Error::custom)
    }
}

/// One observed curve. Grouping levels and slope covariates are per curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    /// Dense level index per grouping variable, ordered as `ObservationTable::grouping_names`.
    pub levels: Vec<usize>,
    /// Slope covariate values, ordered as `ObservationTable::slope_names`.
    pub slopes: Vec<f64>,
}

impl Curve {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Validated long-format table, grouped by curve in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub curve_ids: Vec<String>,
    pub curves: Vec<Curve>,
    pub grouping_names: Vec<String>,
    /// Level labels per grouping variable; the position is the dense level index.
    pub level_names: Vec<Vec<String>>,
    pub slope_names: Vec<String>,
    pub domain: Domain,
}

impl ObservationTable {
    pub fn n_curves(&self) -> usize {
        self.curves.len()
    }

    pub fn n_obs(&self) -> usize {
        self.curves.iter().map(Curve::len).sum()
    }

    pub fn grouping_index(&self, name: &str) -> Option<usize> {
        self.grouping_names.iter().position(|g| g == name)
    }

    pub fn slope_index(&self, name: &str) -> Option<usize> {
        self.slope_names.iter().position(|g| g == name)
    }

    pub fn n_levels(&self, grouping: usize) -> usize {
        self.level_names[grouping].len()
    }

    /// Replace the domain after checking it covers every observation.
    pub fn with_domain(mut self, domain: Domain) -> Result<Self> {
        for c in &self.curves {
            for &t in &c.t {
                if !domain.contains(t) {
                    return Err(SymCovError::Domain {
                        point: t,
                        lo: domain.lo,
                        hi: domain.hi,
                    });
                }
            }
        }
        self.domain = domain;
        Ok(self)
    }

    /// Build a table from in-memory curves, checking the invariants.
    pub fn from_curves(
        curve_ids: Vec<String>,
        curves: Vec<Curve>,
        grouping_names: Vec<String>,
        level_names: Vec<Vec<String>>,
        slope_names: Vec<String>,
        domain: Option<Domain>,
    ) -> Result<Self> {
        if curves.is_empty() {
            return Err(SymCovError::EmptyInput("no curves".into()));
        }
        if curve_ids.len() != curves.len() || level_names.len() != grouping_names.len() {
            return Err(SymCovError::Dimension("curve or grouping metadata length".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (id, c) in curve_ids.iter().zip(&curves) {
            if c.is_empty() || c.t.len() != c.y.len() {
                return Err(SymCovError::Schema(format!("curve `{id}` has no observations")));
            }
            if c.levels.len() != grouping_names.len() || c.slopes.len() != slope_names.len() {
                return Err(SymCovError::Dimension(format!("curve `{id}` metadata")));
            }
            for (g, &l) in c.levels.iter().enumerate() {
                if l >= level_names[g].len() {
                    return Err(SymCovError::Dimension(format!("curve `{id}` level index")));
                }
            }
            for (&t, &y) in c.t.iter().zip(&c.y) {
                if !t.is_finite() || !y.is_finite() {
                    return Err(SymCovError::NonFinite(format!("curve `{id}` has non-finite t or y")));
                }
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        let auto = if hi > lo {
            Domain { lo, hi }
        } else {
            Domain { lo: lo - 0.5, hi: hi + 0.5 }
        };
        let table = Self {
            curve_ids,
            curves,
            grouping_names,
            level_names,
            slope_names,
            domain: auto,
        };
        match domain {
            Some(d) => table.with_domain(d),
            None => Ok(table),
        }
    }
}

/// Column names used when reading a long table.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    pub curve_id: String,
    pub t: String,
    pub y: String,
    /// (grouping-variable name, column name)
    pub groupings: Vec<(String, String)>,
    /// (slope covariate name, column name)
    pub slopes: Vec<(String, String)>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            curve_id: "curve_id".into(),
            t: "t".into(),
            y: "y".into(),
            groupings: Vec::new(),
            slopes: Vec::new(),
        }
    }
}

impl ColumnSchema {
    /// Default column names plus every `g_<name>` and `w_<name>` column in `header`.
    pub fn detect(header: &[&str]) -> Self {
        let mut s = Self::default();
        for h in header {
            if let Some(name) = h.strip_prefix("g_") {
                s.groupings.push((name.to_string(), h.to_string()));
            } else if let Some(name) = h.strip_prefix("w_") {
                s.slopes.push((name.to_string(), h.to_string()));
            }
        }
        s
    }
}

/// Read a CSV long table. `schema = None` detects `g_*`/`w_*` columns from the header.
pub fn load_long_table<R: Read>(
    source: R,
    schema: Option<&ColumnSchema>,
    domain: Option<Domain>,
) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let header: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => return Err(e.into()),
    };
    if header.iter().all(|h| h.is_empty()) {
        return Err(SymCovError::EmptyInput("file has no header".into()));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let detected;
    let schema = match schema {
        Some(s) => s,
        None => {
            detected = ColumnSchema::detect(&header_refs);
            &detected
        }
    };
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SymCovError::Schema(format!("missing column `{name}`")))
    };
    let id_col = col(&schema.curve_id)?;
    let t_col = col(&schema.t)?;
    let y_col = col(&schema.y)?;
    let g_cols: Vec<usize> = schema.groupings.iter().map(|(_, c)| col(c)).collect::<Result<_>>()?;
    let w_cols: Vec<usize> = schema.slopes.iter().map(|(_, c)| col(c)).collect::<Result<_>>()?;

    let n_groups = g_cols.len();
    let mut level_index: Vec<HashMap<String, usize>> = vec![HashMap::new(); n_groups];
    let mut level_names: Vec<Vec<String>> = vec![Vec::new(); n_groups];
    let mut curve_index: HashMap<String, usize> = HashMap::new();
    let mut curve_ids = Vec::new();
    let mut curves: Vec<Curve> = Vec::new();

    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let rec = rec.map_err(|e| SymCovError::Parse { row: line, msg: e.to_string() })?;
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let num = |c: usize, what: &str| -> Result<f64> {
            let s = field(c);
            let v: f64 = s.parse().map_err(|_| SymCovError::Parse {
                row: line,
                msg: format!("column `{what}`: `{s}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(SymCovError::Parse { row: line, msg: format!("column `{what}` is not finite") });
            }
            Ok(v)
        };
        let t = num(t_col, &schema.t)?;
        let y = num(y_col, &schema.y)?;
        let mut levels = Vec::with_capacity(n_groups);
        for (g, &c) in g_cols.iter().enumerate() {
            let label = field(c);
            if label.is_empty() {
                return Err(SymCovError::Parse {
                    row: line,
                    msg: format!("missing level for grouping `{}`", schema.groupings[g].0),
                });
            }
            let next = level_names[g].len();
            let idx = *level_index[g].entry(label.to_string()).or_insert_with(|| {
                level_names[g].push(label.to_string());
                next
            });
            levels.push(idx);
        }
        let slopes: Vec<f64> = w_cols
            .iter()
            .zip(&schema.slopes)
            .map(|(&c, (_, name))| num(c, name))
            .collect::<Result<_>>()?;

        let id = field(id_col).to_string();
        let ci = match curve_index.get(&id) {
            Some(&ci) => {
                let cur = &curves[ci];
                if cur.levels != levels {
                    return Err(SymCovError::Parse {
                        row: line,
                        msg: format!("grouping levels change within curve `{id}`"),
                    });
                }
                if cur.slopes != slopes {
                    return Err(SymCovError::Parse {
                        row: line,
                        msg: format!("slope covariates change within curve `{id}`"),
                    });
                }
                ci
            }
            None => {
                curve_index.insert(id.clone(), curves.len());
                curve_ids.push(id);
                curves.push(Curve { t: Vec::new(), y: Vec::new(), levels, slopes });
                curves.len() - 1
            }
        };
        curves[ci].t.push(t);
        curves[ci].y.push(y);
    }
    if curves.is_empty() {
        return Err(SymCovError::EmptyInput("no data rows".into()));
    }
    ObservationTable::from_curves(
        curve_ids,
        curves,
        schema.groupings.iter().map(|(n, _)| n.clone()).collect(),
        level_names,
        schema.slopes.iter().map(|(n, _)| n.clone()).collect(),
        domain,
    )
}

/// Write the table back in long format (`curve_id,t,y,g_*,w_*`).
///
/// Floats use the shortest round-trip representation, so reloading is exact.
pub fn write_long_table<W: Write>(table: &ObservationTable, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["curve_id".to_string(), "t".into(), "y".into()];
    header.extend(table.grouping_names.iter().map(|g| format!("g_{g}")));
    header.extend(table.slope_names.iter().map(|s| format!("w_{s}")));
    w.write_record(&header)?;
    for (id, c) in table.curve_ids.iter().zip(&table.curves) {
        for (&t, &y) in c.t.iter().zip(&c.y) {
            let mut rec = vec![id.clone(), t.to_string(), y.to_string()];
            for (g, &l) in c.levels.iter().enumerate() {
                rec.push(table.level_names[g][l].clone());
            }
            rec.extend(c.slopes.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Anything that can evaluate a mean function on the observation domain.
pub trait MeanFunction {
    fn domain(&self) -> Domain;
    fn eval(&self, t: f64) -> f64;
}

/// Mean function given by a closure, for externally supplied means.
pub struct FnMean<F: Fn(f64) -> f64> {
    pub domain: Domain,
    pub f: F,
}

impl<F: Fn(f64) -> f64> MeanFunction for FnMean<F> {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn eval(&self, t: f64) -> f64 {
        (self.f)(t)
    }
}

/// Subtract the mean from every response.
pub fn center_responses<M: MeanFunction + ?Sized>(
    table: &ObservationTable,
    mean: &M,
) -> Result<ObservationTable> {
    let dom = mean.domain();
    let tol = 1e-12 * dom.width().max(1.0);
    let mut out = table.clone();
    for c in &mut out.curves {
        for (t, y) in c.t.iter().zip(c.y.iter_mut()) {
            if *t < dom.lo - tol || *t > dom.hi + tol {
                return Err(SymCovError::Extrapolation { t: *t, lo: dom.lo, hi: dom.hi });
            }
            *y -= mean.eval(*t);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// model specification

/// Which curves share a random-effect realization.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Grouping {
    /// The smooth curve-specific residual process.
    Curve,
    /// A single process shared by every curve.
    None,
    /// A named grouping variable (column `g_<name>`).
    Variable(String),
}

impl Serialize for Grouping {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Grouping::Curve => s.serialize_str("CURVE"),
            Grouping::None => s.serialize_str("NONE"),
            Grouping::Variable(v) => s.serialize_str(v),
        }
    }
}

impl<'de> Deserialize<'de> for Grouping {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "CURVE" => Grouping::Curve,
            "NONE" => Grouping::None,
            _ => Grouping::Variable(s),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Component {
    Intercept,
    Slope(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginalBasisSpec {
    pub degree: usize,
    pub dimension: usize,
    pub penalty_order: usize,
}

impl MarginalBasisSpec {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.degree < 1 || self.dimension <= self.degree {
            return Err(SymCovError::InvalidSpec(format!(
                "{what}: need dimension > degree >= 1, got F={} d={}",
                self.dimension, self.degree
            )));
        }
        if self.penalty_order < 1 || self.penalty_order >= self.dimension {
            return Err(SymCovError::InvalidSpec(format!(
                "{what}: need 1 <= penalty order < dimension, got m={} F={}",
                self.penalty_order, self.dimension
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PenaltyKind {
    KronSum,
    KronProd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectTermSpec {
    pub name: String,
    pub grouping: Grouping,
    pub components: Vec<Component>,
    pub marginal_basis: MarginalBasisSpec,
    #[serde(default = "default_penalty_kind")]
    pub penalty_kind: PenaltyKind,
}

fn default_penalty_kind() -> PenaltyKind {
    PenaltyKind::KronSum
}

impl RandomEffectTermSpec {
    pub fn rho(&self) -> usize {
        self.components.len()
    }

    /// Single-intercept term with cubic splines and third-order Kronecker sum penalty.
    pub fn intercept(name: &str, grouping: Grouping, dimension: usize) -> Self {
        Self {
            name: name.into(),
            grouping,
            components: vec![Component::Intercept],
            marginal_basis: MarginalBasisSpec { degree: 3, dimension, penalty_order: 3 },
            penalty_kind: PenaltyKind::KronSum,
        }
    }
}

/// Estimation variant for the covariance smoother.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    /// Upper triangle with symmetry constraint.
    TriConstr,
    /// Upper triangle with symmetry constraint and down-weighted diagonal products.
    TriConstrW,
    /// Upper triangle, unconstrained coefficients.
    Tri,
    /// All ordered products, unconstrained coefficients.
    Whole,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::TriConstr, Method::TriConstrW, Method::Tri, Method::Whole];

    pub fn label(&self) -> &'static str {
        match self {
            Method::TriConstr => "tri-constr",
            Method::TriConstrW => "tri-constr-w",
            Method::Tri => "tri",
            Method::Whole => "whole",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "tri-constr" => Ok(Method::TriConstr),
            "tri-constr-w" => Ok(Method::TriConstrW),
            "tri" => Ok(Method::Tri),
            "whole" => Ok(Method::Whole),
            other => Err(SymCovError::Config(format!("unknown method `{other}`"))),
        }
    }

    pub fn constrained(&self) -> bool {
        matches!(self, Method::TriConstr | Method::TriConstrW)
    }

    pub fn both_orientations(&self) -> bool {
        matches!(self, Method::Whole)
    }
}

/// Denominator used for the proportion of variance explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PveBase {
    /// Sum of all process eigenvalues.
    #[default]
    Process,
    /// Process eigenvalues plus the error variance (variance of the observations).
    Observation,
}

impl PveBase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "process" => Ok(PveBase::Process),
            "observation" => Ok(PveBase::Observation),
            other => Err(SymCovError::Config(format!("unknown pve base `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanSpec {
    pub dimension: usize,
    pub degree: usize,
    pub penalty_order: usize,
}

impl MeanSpec {
    pub fn as_marginal(&self) -> MarginalBasisSpec {
        MarginalBasisSpec {
            degree: self.degree,
            dimension: self.dimension,
            penalty_order: self.penalty_order,
        }
    }
}

impl Default for MeanSpec {
    fn default() -> Self {
        Self { dimension: 10, degree: 3, penalty_order: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub domain: Option<Domain>,
    pub terms: Vec<RandomEffectTermSpec>,
    #[serde(default)]
    pub mean_spec: MeanSpec,
    #[serde(default = "default_pve")]
    pub pve: f64,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_diag_weight")]
    pub diag_weight: f64,
    #[serde(default)]
    pub pve_base: PveBase,
    /// Per-term truncation levels that override PVE selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_truncation: Option<BTreeMap<String, usize>>,
    /// Run one extra fit with inverse-variance row weights.
    #[serde(default)]
    pub weighted_refit: bool,
}

fn default_pve() -> f64 {
    0.95
}
fn default_grid() -> usize {
    100
}
fn default_method() -> Method {
    Method::TriConstr
}
fn default_diag_weight() -> f64 {
    0.5
}

impl ModelSpec {
    /// Independent curves: one smooth residual term.
    pub fn independent(dimension: usize) -> Self {
        Self {
            domain: None,
            terms: vec![RandomEffectTermSpec::intercept("E", Grouping::Curve, dimension)],
            mean_spec: MeanSpec::default(),
            pve: default_pve(),
            grid_size: default_grid(),
            method: default_method(),
            diag_weight: default_diag_weight(),
            pve_base: PveBase::Process,
            fixed_truncation: None,
            weighted_refit: false,
        }
    }

    /// Two crossed functional random intercepts plus the smooth residual.
    pub fn crossed(first: &str, second: &str, dimension: usize) -> Self {
        let mut s = Self::independent(dimension);
        s.terms = vec![
            RandomEffectTermSpec::intercept(first, Grouping::Variable(first.into()), dimension),
            RandomEffectTermSpec::intercept(second, Grouping::Variable(second.into()), dimension),
            RandomEffectTermSpec::intercept("E", Grouping::Curve, dimension),
        ];
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(SymCovError::InvalidSpec("grid_size must be >= 2".into()));
        }
        if !(self.pve > 0.0 && self.pve <= 1.0) {
            return Err(SymCovError::InvalidSpec("pve must lie in (0, 1]".into()));
        }
        if !(self.diag_weight > 0.0 && self.diag_weight <= 1.0) {
            return Err(SymCovError::InvalidSpec("diag_weight must lie in (0, 1]".into()));
        }
        self.mean_spec.as_marginal().validate("mean_spec")?;
        let mut curve_terms = 0;
        let mut names = std::collections::HashSet::new();
        for term in &self.terms {
            if !names.insert(term.name.as_str()) {
                return Err(SymCovError::InvalidSpec(format!("duplicate term name `{}`", term.name)));
            }
            if term.rho() < 1 {
                return Err(SymCovError::InvalidSpec(format!("term `{}` has no components", term.name)));
            }
            term.marginal_basis.validate(&term.name)?;
            if term.grouping == Grouping::Curve {
                curve_terms += 1;
                if term.rho() != 1 {
                    return Err(SymCovError::InvalidSpec("the CURVE term must have one component".into()));
                }
            }
        }
        if curve_terms != 1 {
            return Err(SymCovError::InvalidSpec(format!(
                "exactly one CURVE term required, found {curve_terms}"
            )));
        }
        Ok(())
    }

    /// Check that every grouping and slope the terms reference exists in `table`.
    pub fn check_against(&self, table: &ObservationTable) -> Result<()> {
        for term in &self.terms {
            if let Grouping::Variable(g) = &term.grouping {
                if table.grouping_index(g).is_none() {
                    return Err(SymCovError::Schema(format!(
                        "term `{}` references unknown grouping column `g_{g}`",
                        term.name
                    )));
                }
            }
            for c in &term.components {
                if let Component::Slope(w) = c {
                    if table.slope_index(w).is_none() {
                        return Err(SymCovError::Schema(format!(
                            "term `{}` references unknown slope column `w_{w}`",
                            term.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
