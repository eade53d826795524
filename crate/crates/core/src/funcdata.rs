//! Functional covariates and the reduced regression design.
//!
//! Each observed curve is smoothed onto the covariate basis by ordinary least
//! squares. Its contribution to the linear predictor is then
//! `X*_i J_i B*`, where `J_i` is the cross-Gram of the covariate and
//! coefficient bases over the subject's own domain, so fitting the functional
//! model reduces to a multiple regression on the rows `X**_i = X*_i J_i`.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{cross_gram, BSplineBasis, Domain};
use crate::{Error, Result};

/// Discrete observations of one subject's curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveObservation {
    pub subject_id: String,
    /// `(t, x)` pairs.
    pub points: Vec<(f64, f64)>,
    pub domain: Domain,
}

/// A curve represented by its coefficients in a B-spline basis.
#[derive(Debug, Clone)]
pub struct CoefCurve {
    pub subject_id: String,
    pub coeffs: Vec<f64>,
    pub basis: Arc<BSplineBasis>,
    pub domain: Domain,
}

impl CoefCurve {
    pub fn value(&self, t: f64) -> Result<f64> {
        self.basis.evaluate(&self.coeffs, t)
    }
}

/// Least-squares coefficients of `obs` in `basis_x`.
///
/// Basis functions whose support misses the subject's domain cannot be
/// identified from its points; their coefficients are set to zero. A
/// rank-deficient system fails with the subject named.
pub fn fit_curve_coeffs(obs: &CurveObservation, basis_x: &Arc<BSplineBasis>) -> Result<CoefCurve> {
    let fail = |reason: String| Error::CurveFit {
        subject: obs.subject_id.clone(),
        reason,
    };
    obs.domain.require_within(&basis_x.domain())?;
    if let Some(&(t, _)) = obs.points.iter().find(|(t, _)| !obs.domain.contains(*t)) {
        return Err(fail(format!(
            "observation at t={t} lies outside [{}, {}]",
            obs.domain.lo(),
            obs.domain.hi()
        )));
    }
    if obs.points.iter().any(|(t, x)| !t.is_finite() || !x.is_finite()) {
        return Err(fail("non-finite observation".into()));
    }
    let k = basis_x.n_basis();
    let active: Vec<usize> = (0..k)
        .filter(|&j| {
            let (a, b) = basis_x.support(j);
            a < obs.domain.hi() && b > obs.domain.lo()
        })
        .collect();
    let m = obs.points.len();
    if m < active.len() {
        return Err(fail(format!(
            "{m} observation points cannot determine {} basis coefficients",
            active.len()
        )));
    }
    let ts: Vec<f64> = obs.points.iter().map(|p| p.0).collect();
    let full = basis_x.design_matrix(&ts)?;
    let design = full.select_columns(&active);
    let rhs = DVector::from_iterator(m, obs.points.iter().map(|p| p.1));

    let qr = design.qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) || scale == 0.0 {
        return Err(fail(
            "basis design is rank deficient on the observation points".into(),
        ));
    }
    let qtb = qr.q().transpose() * rhs;
    let sol = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| fail("triangular solve failed".into()))?;
    let mut coeffs = vec![0.0; k];
    for (c, &j) in sol.iter().zip(&active) {
        coeffs[j] = *c;
    }
    Ok(CoefCurve {
        subject_id: obs.subject_id.clone(),
        coeffs,
        basis: Arc::clone(basis_x),
        domain: obs.domain,
    })
}

/// Fits every curve, in parallel, keeping input order.
pub fn fit_all_curves(obs: &[CurveObservation], basis_x: &Arc<BSplineBasis>) -> Result<Vec<CoefCurve>> {
    obs.par_iter().map(|o| fit_curve_coeffs(o, basis_x)).collect()
}

/// How a scalar covariate enters the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovariateRule {
    Linear,
    Categorical,
    /// Continuous piecewise-linear spline: `x, (x - k_1)_+, ..., (x - k_m)_+`.
    PiecewiseLinear { knots: Vec<f64> },
    /// Smooth additive term with its own cubic B-spline basis and the same
    /// shrinkage prior as the functional coefficient.
    AdaptiveSpline {
        n_basis: usize,
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
}

/// Expansion rules for the scalar covariates, in column order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarDesignSpec {
    pub rules: Vec<(String, CovariateRule)>,
}

/// `(x, (x - k_1)_+, ..., (x - k_m)_+)`.
pub fn hinge_features(x: f64, knots: &[f64]) -> Vec<f64> {
    std::iter::once(x)
        .chain(knots.iter().map(|k| (x - k).max(0.0)))
        .collect()
}

/// A column of the scalar covariate table.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarColumn {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

impl ScalarColumn {
    fn len(&self) -> usize {
        match self {
            ScalarColumn::Numeric(v) => v.len(),
            ScalarColumn::Text(v) => v.len(),
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            ScalarColumn::Numeric(v) => v.iter().map(|x| format!("{x}")).collect(),
            ScalarColumn::Text(v) => v.clone(),
        }
    }
}

/// Responses and scalar covariates keyed by subject.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScalarTable {
    pub subject_ids: Vec<String>,
    pub responses: Vec<f64>,
    pub columns: Vec<(String, ScalarColumn)>,
}

impl ScalarTable {
    /// Responses only, no covariates.
    pub fn responses_only(subject_ids: Vec<String>, responses: Vec<f64>) -> Self {
        Self {
            subject_ids,
            responses,
            columns: Vec::new(),
        }
    }

    fn column(&self, name: &str) -> Result<&ScalarColumn> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::InvalidInput(format!("no scalar covariate named `{name}`")))
    }
}

/// Column standardization applied to a continuous expanded covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub name: String,
    pub center: f64,
    pub scale: f64,
}

/// A smooth additive term in a scalar covariate.
#[derive(Debug, Clone)]
pub struct AdaptiveBlock {
    pub name: String,
    pub basis: BSplineBasis,
    /// `n x K` basis evaluations with column means removed.
    pub design: DMatrix<f64>,
    pub column_means: Vec<f64>,
}

/// The reduced design of the functional regression.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    pub subject_ids: Vec<String>,
    pub y: DVector<f64>,
    /// `n x p` expanded scalar covariates; the intercept is the last column.
    pub z: DMatrix<f64>,
    pub z_names: Vec<String>,
    pub scalings: Vec<ColumnScaling>,
    /// `n x K_B` rows `X**_i`.
    pub x_ss: DMatrix<f64>,
    pub basis_b: BSplineBasis,
    pub domains: Vec<Domain>,
    pub adaptive: Vec<AdaptiveBlock>,
}

impl RegressionDesign {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn intercept_col(&self) -> usize {
        self.z.ncols() - 1
    }

    /// Writes the design as delimited text for auditing.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["subject_id".to_string(), "y".to_string()];
        header.extend(self.z_names.iter().cloned());
        for block in &self.adaptive {
            header.extend((1..=block.basis.n_basis()).map(|k| format!("{}_s{k}", block.name)));
        }
        header.extend((1..=self.x_ss.ncols()).map(|k| format!("xss_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n() {
            let mut rec = vec![self.subject_ids[i].clone(), fmt(self.y[i])];
            rec.extend(self.z.row(i).iter().map(|v| fmt(*v)));
            for block in &self.adaptive {
                rec.extend(block.design.row(i).iter().map(|v| fmt(*v)));
            }
            rec.extend(self.x_ss.row(i).iter().map(|v| fmt(*v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<design>", e))?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse("<csv>", e)
}

/// Cross-Gram matrices for every distinct subject domain.
fn grams_by_domain(
    basis_x: &BSplineBasis,
    basis_b: &BSplineBasis,
    domains: &[Domain],
) -> Result<HashMap<(u64, u64), DMatrix<f64>>> {
    let unique: BTreeSet<(u64, u64)> = domains
        .iter()
        .map(|d| (d.lo().to_bits(), d.hi().to_bits()))
        .collect();
    unique
        .into_par_iter()
        .map(|key| {
            let dom = Domain::new(f64::from_bits(key.0), f64::from_bits(key.1))?;
            Ok((key, cross_gram(basis_x, basis_b, &dom)?.values))
        })
        .collect()
}

/// Rows `X**_i = X*_i J_i`, one per curve.
pub fn functional_rows(curves: &[CoefCurve], basis_b: &BSplineBasis) -> Result<DMatrix<f64>> {
    let kb = basis_b.n_basis();
    let mut rows = DMatrix::zeros(curves.len(), kb);
    if curves.is_empty() {
        return Ok(rows);
    }
    let basis_x = &curves[0].basis;
    if curves.iter().any(|c| c.basis.as_ref() != basis_x.as_ref()) {
        return Err(Error::InvalidInput(
            "all curves must share one covariate basis".into(),
        ));
    }
    let domains: Vec<Domain> = curves.iter().map(|c| c.domain).collect();
    let grams = grams_by_domain(basis_x, basis_b, &domains)?;
    for (i, c) in curves.iter().enumerate() {
        let j = &grams[&(c.domain.lo().to_bits(), c.domain.hi().to_bits())];
        let x = DVector::from_column_slice(&c.coeffs);
        let row = j.tr_mul(&x);
        rows.row_mut(i).copy_from(&row.transpose());
    }
    Ok(rows)
}

/// Assembles the regression design, matching curves to scalar rows by subject.
pub fn build_design(
    curves: &[CoefCurve],
    basis_b: &BSplineBasis,
    scalars: &ScalarTable,
    spec: &ScalarDesignSpec,
) -> Result<RegressionDesign> {
    let n = scalars.subject_ids.len();
    if n == 0 {
        return Err(Error::InvalidInput("design needs at least one subject".into()));
    }
    if scalars.responses.len() != n || scalars.columns.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::Dimension("scalar table columns differ in length".into()));
    }
    if let Some((i, _)) = scalars.responses.iter().enumerate().find(|(_, y)| !y.is_finite()) {
        return Err(Error::NonFinite(format!(
            "response of subject {}",
            scalars.subject_ids[i]
        )));
    }
    let by_id: HashMap<&str, &CoefCurve> = curves.iter().map(|c| (c.subject_id.as_str(), c)).collect();
    if by_id.len() != curves.len() {
        return Err(Error::InvalidInput("duplicate subject in curves".into()));
    }
    let mut seen = BTreeSet::new();
    let mut ordered = Vec::with_capacity(n);
    for id in &scalars.subject_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate subject `{id}` in scalars")));
        }
        let c = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("subject `{id}` has no curve")))?;
        ordered.push((*c).clone());
    }
    if let Some(c) = curves.iter().find(|c| !seen.contains(c.subject_id.as_str())) {
        return Err(Error::InvalidInput(format!(
            "subject `{}` has a curve but no scalar row",
            c.subject_id
        )));
    }

    let x_ss = functional_rows(&ordered, basis_b)?;

    let mut z_cols: Vec<Vec<f64>> = Vec::new();
    let mut z_names = Vec::new();
    let mut scalings = Vec::new();
    let mut adaptive = Vec::new();
    for (name, rule) in &spec.rules {
        let col = scalars.column(name)?;
        let numeric = || match col {
            ScalarColumn::Numeric(v) => {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "covariate `{name}` of subject {}",
                        scalars.subject_ids[i]
                    )));
                }
                Ok(v.clone())
            }
            ScalarColumn::Text(_) => Err(Error::InvalidInput(format!(
                "covariate `{name}` is not numeric"
            ))),
        };
        match rule {
            CovariateRule::Linear => {
                let v = numeric()?;
                let (s, c) = standardize(name, v)?;
                scalings.push(s);
                z_names.push(name.clone());
                z_cols.push(c);
            }
            CovariateRule::PiecewiseLinear { knots } => {
                let v = numeric()?;
                let (lo, hi) = min_max(&v);
                if knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidInput(format!(
                        "knots of `{name}` must be strictly increasing"
                    )));
                }
                if knots.iter().any(|&k| k <= lo || k >= hi) {
                    return Err(Error::InvalidInput(format!(
                        "knots of `{name}` must lie strictly inside the observed range [{lo}, {hi}]"
                    )));
                }
                let feats: Vec<Vec<f64>> = v.iter().map(|&x| hinge_features(x, knots)).collect();
                for j in 0..=knots.len() {
                    let label = if j == 0 {
                        name.clone()
                    } else {
                        format!("{name}_hinge{}", knots[j - 1])
                    };
                    let (s, c) = standardize(&label, feats.iter().map(|f| f[j]).collect())?;
                    scalings.push(s);
                    z_names.push(label);
                    z_cols.push(c);
                }
            }
            CovariateRule::Categorical => {
                let labels = col.labels();
                let levels: BTreeSet<&String> = labels.iter().collect();
                for level in levels.into_iter().skip(1) {
                    z_names.push(format!("{name}={level}"));
                    z_cols.push(labels.iter().map(|l| f64::from(u8::from(l == level))).collect());
                }
            }
            CovariateRule::AdaptiveSpline { n_basis, lo, hi } => {
                let v = numeric()?;
                let (vmin, vmax) = min_max(&v);
                let dom = Domain::new(lo.unwrap_or(vmin), hi.unwrap_or(vmax))?;
                let basis = BSplineBasis::cubic(dom, *n_basis)?;
                let mut design = basis.design_matrix(&v)?;
                let column_means: Vec<f64> = design.column_iter().map(|c| c.mean()).collect();
                for (j, m) in column_means.iter().enumerate() {
                    design.column_mut(j).add_scalar_mut(-m);
                }
                adaptive.push(AdaptiveBlock {
                    name: name.clone(),
                    basis,
                    design,
                    column_means,
                });
            }
        }
    }
    z_names.push("(intercept)".into());
    z_cols.push(vec![1.0; n]);
    let z = DMatrix::from_fn(n, z_cols.len(), |i, j| z_cols[j][i]);

    Ok(RegressionDesign {
        subject_ids: scalars.subject_ids.clone(),
        y: DVector::from_column_slice(&scalars.responses),
        z,
        z_names,
        scalings,
        x_ss,
        basis_b: basis_b.clone(),
        domains: ordered.iter().map(|c| c.domain).collect(),
        adaptive,
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

fn standardize(name: &str, mut v: Vec<f64>) -> Result<(ColumnScaling, Vec<f64>)> {
    let center = crate::stats::mean(&v);
    let scale = crate::stats::variance(&v).sqrt();
    if !(scale > 0.0) {
        return Err(Error::InvalidInput(format!(
            "covariate column `{name}` is constant and cannot be standardized"
        )));
    }
    for x in &mut v {
        *x = (*x - center) / scale;
    }
    Ok((
        ColumnScaling {
            name: name.to_string(),
            center,
            scale,
        },
        v,
    ))
}

/// `integral over the curve's domain of X_i(t) beta(t)`, with beta given by its
/// coefficients in `beta_basis`.
pub fn cumulative_effect(curve: &CoefCurve, beta_coeffs: &[f64], beta_basis: &BSplineBasis) -> Result<f64> {
    if beta_coeffs.len() != beta_basis.n_basis() {
        return Err(Error::Dimension(format!(
            "{} coefficients for a basis of size {}",
            beta_coeffs.len(),
            beta_basis.n_basis()
        )));
    }
    let j = cross_gram(&curve.basis, beta_basis, &curve.domain)?;
    let x = DVector::from_column_slice(&curve.coeffs);
    let b = DVector::from_column_slice(beta_coeffs);
    Ok(x.dot(&(&j.values * b)))
}

/// Reads a long-format curve file with columns `subject_id, t, x`.
///
/// Each subject's domain is `[reference.lo, max observed t]`. Subjects keep
/// their order of first appearance.
pub fn read_curves(path: &Path, reference: Domain) -> Result<Vec<CurveObservation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path, format!("missing column `{name}`")))
    };
    let (ci, ct, cx) = (col("subject_id")?, col("t")?, col("x")?);
    let mut order: Vec<String> = Vec::new();
    let mut points: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::parse(path, format!("record {}: bad number", line + 1)))
        };
        let id = rec.get(ci).unwrap_or_default().to_string();
        let entry = points.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Vec::new()
        });
        entry.push((num(ct)?, num(cx)?));
    }
    order
        .into_iter()
        .map(|id| {
            let mut pts = points.remove(&id).unwrap_or_default();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let t_max = pts.last().map(|p| p.0).unwrap_or(reference.hi());
            let domain = Domain::new(reference.lo(), t_max.min(reference.hi()))
                .map_err(|_| Error::parse(path, format!("subject `{id}` has a degenerate domain")))?;
            if pts.iter().any(|p| !reference.contains(p.0)) {
                return Err(Error::parse(
                    path,
                    format!("subject `{id}` has points outside the reference domain"),
                ));
            }
            Ok(CurveObservation {
                subject_id: id,
                points: pts,
                domain,
            })
        })
        .collect()
}

/// Writes curves in the long format read by [`read_curves`].
pub fn write_curves<W: Write>(curves: &[CurveObservation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "t", "x"]).map_err(csv_err)?;
    for c in curves {
        for (t, x) in &c.points {
            w.write_record([c.subject_id.as_str(), &format!("{t}"), &format!("{x:e}")])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<curves>", e))?;
    Ok(())
}

/// Reads a scalar file with columns `subject_id, response, covariates...`.
/// Columns that do not parse as numbers are kept as text.
pub fn read_scalars(path: &Path) -> Result<ScalarTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 2 || headers[0] != "subject_id" || headers[1] != "response" {
        return Err(Error::parse(
            path,
            "header must start with `subject_id,response`",
        ));
    }
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        for (j, col) in raw.iter_mut().enumerate() {
            col.push(rec.get(j).unwrap_or_default().to_string());
        }
    }
    let responses = raw[1]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(path, format!("record {}: bad response `{s}`", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let columns = headers[2..]
        .iter()
        .zip(raw.drain(2..))
        .map(|(name, vals)| {
            let parsed: Option<Vec<f64>> = vals.iter().map(|s| s.parse::<f64>().ok()).collect();
            let col = match parsed {
                Some(v) => ScalarColumn::Numeric(v),
                None => ScalarColumn::Text(vals),
            };
            (name.clone(), col)
        })
        .collect();
    Ok(ScalarTable {
        subject_ids: std::mem::take(&mut raw[0]),
        responses,
        columns,
    })
}

/// Writes a scalar table in the format read by [`read_scalars`].
pub fn write_scalars<W: Write>(table: &ScalarTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id".to_string(), "response".to_string()];
    header.extend(table.columns.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..table.subject_ids.len() {
        let mut rec = vec![table.subject_ids[i].clone(), format!("{:e}", table.responses[i])];
        for (_, c) in &table.columns {
            rec.push(match c {
                ScalarColumn::Numeric(v) => format!("{}", v[i]),
                ScalarColumn::Text(v) => v[i].clone(),
            });
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<scalars>", e))?;
    Ok(())
}
