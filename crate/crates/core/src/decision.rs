//! Decision analysis: locally constant summaries of the coefficient function.
//!
//! With `A` the `n x K` matrix of cell integrals `X_i(T_k)`, the summary for a
//! penalty `lambda` minimizes
//!
//! ```text
//! (1/n) ||t - A delta||^2 + lambda sum_{k>=2} |delta_k - delta_{k-1}|
//! ```
//!
//! over `delta`, where `t` are the model's posterior fitted values with the
//! scalar-covariate part removed. The whole solution path is traced by the
//! dual path algorithm for the generalized lasso after the change of variables
//! `theta = R delta` (`A = Q R`), which turns the problem into a signal
//! approximator with the full-row-rank penalty matrix `D R^-1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{BSplineBasis, Domain};
use crate::funcdata::{CoefCurve, RegressionDesign};
use crate::gibbs::{BetaSummary, PosteriorDraws};
use crate::{Error, Result};

/// Ordered breakpoints `b_0 < b_1 < ... < b_K` splitting `[b_0, b_K]` into
/// cells `[b_{k-1}, b_k)`, the last one closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    breaks: Vec<f64>,
}

impl Partition {
    pub fn new(breaks: Vec<f64>) -> Result<Self> {
        if breaks.len() < 2 {
            return Err(Error::InvalidInput("a partition needs at least two breakpoints".into()));
        }
        if breaks.iter().any(|b| !b.is_finite()) || breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("partition breakpoints must be finite and strictly increasing".into()));
        }
        Ok(Self { breaks })
    }

    /// `k` equal cells.
    pub fn uniform(domain: Domain, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("a partition needs at least one cell".into()));
        }
        let w = domain.width() / k as f64;
        let mut b: Vec<f64> = (0..k).map(|i| domain.lo() + w * i as f64).collect();
        b.push(domain.hi());
        Self::new(b)
    }

    /// The knot spans of a basis.
    pub fn from_basis(basis: &BSplineBasis) -> Self {
        Self {
            breaks: basis.breakpoints(),
        }
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn n_cells(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn cell(&self, k: usize) -> (f64, f64) {
        (self.breaks[k], self.breaks[k + 1])
    }

    pub fn domain(&self) -> Domain {
        Domain::new(self.breaks[0], self.breaks[self.breaks.len() - 1]).expect("validated breakpoints")
    }

    /// Index of the cell containing `t`, if any.
    pub fn locate(&self, t: f64) -> Option<usize> {
        let last = self.breaks.len() - 1;
        if t < self.breaks[0] || t > self.breaks[last] {
            return None;
        }
        if t == self.breaks[last] {
            return Some(last - 1);
        }
        Some(self.breaks.partition_point(|&b| b <= t) - 1)
    }
}

/// `n x K` matrix of `X_i(T_k) = integral over T_k and T_i of X_i`, zero where
/// the cell misses the subject's domain.
pub fn aggregate(curves: &[CoefCurve], partition: &Partition) -> Result<DMatrix<f64>> {
    let k = partition.n_cells();
    let mut out = DMatrix::zeros(curves.len(), k);
    for (i, c) in curves.iter().enumerate() {
        let outer = c.basis.domain();
        let pd = partition.domain();
        if pd.lo() < outer.lo() - 1e-12 || pd.hi() > outer.hi() + 1e-12 {
            return Err(Error::DomainMismatch {
                lo: pd.lo(),
                hi: pd.hi(),
                outer_lo: outer.lo(),
                outer_hi: outer.hi(),
            });
        }
        for j in 0..k {
            let (a, b) = partition.cell(j);
            let (a, b) = (a.max(c.domain.lo()), b.min(c.domain.hi()));
            if b <= a {
                continue;
            }
            let sub = Domain::new(a.max(outer.lo()), b.min(outer.hi()))?;
            let ints = c.basis.integrals(&sub)?;
            out[(i, j)] = ints.iter().zip(&c.coeffs).map(|(w, x)| w * x).sum();
        }
    }
    Ok(out)
}

/// First differences `(D delta)_k = delta_{k+1} - delta_k`.
fn first_diff_matrix(k: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(k - 1, k);
    for r in 0..k - 1 {
        d[(r, r)] = -1.0;
        d[(r, r + 1)] = 1.0;
    }
    d
}

/// Least squares `argmin ||m x - rhs||` for a tall full-column-rank `m`,
/// for several right-hand sides at once.
fn lstsq(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.ncols() == 0 {
        return Ok(DMatrix::zeros(0, rhs.ncols()));
    }
    let qr = m.clone().qr();
    let qtb = qr.q().transpose() * rhs;
    qr.r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: "least-squares factor".into(),
        })
}

/// Kind of event at a path knot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Start,
    Hit(usize),
    Leave(usize),
    End,
}

/// A stretch of the dual path with a fixed boundary set, valid from `lo` up
/// to the previous segment's `lo`.
#[derive(Debug, Clone)]
struct Segment {
    lo: f64,
    boundary: Vec<bool>,
    signs: Vec<f64>,
}

/// One solution on the path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEntry {
    pub lambda: f64,
    pub delta: DVector<f64>,
    /// `fused[k]` when `delta_{k+1} = delta_k` is imposed exactly.
    pub fused: Vec<bool>,
}

impl PathEntry {
    /// Number of level changes between adjacent cells.
    pub fn level_changes(&self) -> usize {
        self.fused.iter().filter(|f| !**f).count()
    }
}

/// The complete fused lasso path of one dataset.
#[derive(Debug, Clone)]
pub struct FusedLassoPath {
    n: usize,
    r: DMatrix<f64>,
    y_tilde: DVector<f64>,
    dt: DMatrix<f64>,
    segments: Vec<Segment>,
    /// `(lambda_tilde, segment index used for the primal at the knot)`.
    knots: Vec<(f64, usize)>,
    pub rank_deficient: bool,
}

impl FusedLassoPath {
    /// Traces the path for design `a` and targets `t`. A rank-deficient `a`
    /// is ridged by `1e-8 trace(A'A) / K`, flagged in `rank_deficient`.
    pub fn solve(a: &DMatrix<f64>, t: &DVector<f64>) -> Result<Self> {
        let (n, k) = a.shape();
        if k < 2 {
            return Err(Error::InvalidInput("the fused lasso needs at least two cells".into()));
        }
        if t.len() != n {
            return Err(Error::Dimension(format!("{} targets for {n} design rows", t.len())));
        }
        if t.iter().chain(a.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("fused lasso inputs".into()));
        }
        let (mut r, mut y_tilde) = reduce(a, t);
        let rank_deficient = n < k || {
            let diag_max = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
            (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * diag_max)
        };
        if rank_deficient {
            let rho = 1e-8 * a.norm_squared().max(f64::MIN_POSITIVE) / k as f64;
            log::warn!("aggregated design is rank deficient; adding ridge {rho:e}");
            let mut aug = DMatrix::zeros(n + k, k);
            aug.rows_mut(0, n).copy_from(a);
            for i in 0..k {
                aug[(n + i, i)] = rho.sqrt();
            }
            let mut taug = DVector::zeros(n + k);
            taug.rows_mut(0, n).copy_from(t);
            (r, y_tilde) = reduce(&aug, &taug);
        }
        let rinv = r
            .clone()
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: "aggregated design factor".into(),
            })?;
        let dt = first_diff_matrix(k) * rinv;
        let mut path = Self {
            n,
            r,
            y_tilde,
            dt,
            segments: Vec::new(),
            knots: Vec::new(),
            rank_deficient,
        };
        path.trace()?;
        Ok(path)
    }

    /// `u_I = a - lambda b` on the interior set of a boundary configuration.
    fn interior_coefs(&self, boundary: &[bool], signs: &[f64]) -> Result<(Vec<usize>, DVector<f64>, DVector<f64>)> {
        let m = boundary.len();
        let interior: Vec<usize> = (0..m).filter(|&i| !boundary[i]).collect();
        let k = self.dt.ncols();
        let di_t = DMatrix::from_fn(k, interior.len(), |r, c| self.dt[(interior[c], r)]);
        let mut v = DVector::zeros(k);
        for i in (0..m).filter(|&i| boundary[i]) {
            v += self.dt.row(i).transpose() * signs[i];
        }
        let rhs = DMatrix::from_fn(k, 2, |r, c| if c == 0 { self.y_tilde[r] } else { v[r] });
        let sol = lstsq(&di_t, &rhs)?;
        Ok((interior, sol.column(0).into_owned(), sol.column(1).into_owned()))
    }

    fn trace(&mut self) -> Result<()> {
        let m = self.dt.nrows();
        let mut boundary = vec![false; m];
        let mut signs = vec![0.0; m];
        let mut lam = f64::INFINITY;
        let mut last = Event::Start;
        let mut left_sign = 0.0;
        let max_steps = 50 * m + 100;
        for _ in 0..max_steps {
            let (interior, a, b) = self.interior_coefs(&boundary, &signs)?;
            let below = lam * (1.0 - 1e-12);
            // Hitting times: u_i(lambda) = a_i - lambda b_i reaches +-lambda.
            let mut best = (0.0, Event::End);
            for (j, &i) in interior.iter().enumerate() {
                for s in [1.0, -1.0] {
                    // A coordinate that just left sits at its old bound at the
                    // current knot; only the opposite bound is reachable.
                    if last == Event::Leave(i) && s == left_sign {
                        continue;
                    }
                    let den = b[j] + s;
                    if den == 0.0 {
                        continue;
                    }
                    let cand = a[j] / den;
                    if cand > best.0 && cand < below {
                        best = (cand, Event::Hit(i));
                    }
                }
            }
            // Leaving times: a boundary coordinate leaves when its primal
            // difference changes sign.
            if boundary.iter().any(|&x| x) {
                let mut fit_a = self.y_tilde.clone();
                let mut fit_b = DVector::zeros(self.dt.ncols());
                for (j, &i) in interior.iter().enumerate() {
                    fit_a -= self.dt.row(i).transpose() * a[j];
                    fit_b -= self.dt.row(i).transpose() * b[j];
                }
                for i in (0..m).filter(|&i| boundary[i]) {
                    fit_b += self.dt.row(i).transpose() * signs[i];
                }
                for i in (0..m).filter(|&i| boundary[i]) {
                    if last == Event::Hit(i) {
                        continue;
                    }
                    let row = self.dt.row(i);
                    let c = signs[i] * (row * &fit_a)[0];
                    let d = signs[i] * (row * &fit_b)[0];
                    if c < 0.0 && d < 0.0 {
                        let cand = c / d;
                        if cand > best.0 && cand < below {
                            best = (cand, Event::Leave(i));
                        }
                    }
                }
            }
            let (next, event) = best;
            let seg_above = self.segments.len();
            self.segments.push(Segment {
                lo: next,
                boundary: boundary.clone(),
                signs: signs.clone(),
            });
            match event {
                Event::Hit(i) => {
                    let j = interior.iter().position(|&x| x == i).expect("interior coordinate");
                    let u = a[j] - next * b[j];
                    boundary[i] = true;
                    signs[i] = u.signum();
                    self.knots.push((next, seg_above));
                }
                Event::Leave(i) => {
                    left_sign = signs[i];
                    boundary[i] = false;
                    signs[i] = 0.0;
                    self.knots.push((next, seg_above + 1));
                }
                Event::End => {
                    self.knots.push((0.0, seg_above));
                    return Ok(());
                }
                Event::Start => unreachable!(),
            }
            last = event;
            lam = next;
        }
        Err(Error::NonFinite(format!(
            "fused lasso path did not terminate within {max_steps} steps"
        )))
    }

    /// Number of rows of the original design.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Penalties of every knot on the objective's scale, decreasing, ending
    /// at 0.
    pub fn knots(&self) -> Vec<f64> {
        self.knots.iter().map(|(l, _)| self.to_lambda(*l)).collect()
    }

    fn to_lambda(&self, lt: f64) -> f64 {
        2.0 * lt / self.n as f64
    }

    /// Primal solution for a segment at `lambda_tilde`: the least-squares fit
    /// of `y~ - lambda D~_B' s` within the piecewise constant vectors that
    /// respect the segment's fused differences.
    fn primal(&self, seg: &Segment, lt: f64) -> Result<PathEntry> {
        let k = self.dt.ncols();
        let fused: Vec<bool> = seg.boundary.iter().map(|b| !b).collect();
        let mut group = vec![0usize; k];
        for j in 1..k {
            group[j] = group[j - 1] + usize::from(!fused[j - 1]);
        }
        let g = group[k - 1] + 1;
        let c = DMatrix::from_fn(k, g, |r, col| if group[r] == col { 1.0 } else { 0.0 });
        let mut rhs = self.y_tilde.clone();
        for i in (0..seg.boundary.len()).filter(|&i| seg.boundary[i]) {
            rhs -= self.dt.row(i).transpose() * (lt * seg.signs[i]);
        }
        let rc = &self.r * &c;
        let gamma = lstsq(&rc, &DMatrix::from_column_slice(k, 1, rhs.as_slice()))?;
        let delta = &c * gamma.column(0);
        Ok(PathEntry {
            lambda: self.to_lambda(lt),
            delta,
            fused,
        })
    }

    /// Solution at an arbitrary `lambda >= 0`.
    pub fn solution_at(&self, lambda: f64) -> Result<PathEntry> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidInput(format!("penalty must be nonnegative, got {lambda}")));
        }
        let lt = lambda * self.n as f64 / 2.0;
        let seg = self
            .segments
            .iter()
            .find(|s| lt >= s.lo)
            .unwrap_or_else(|| self.segments.last().expect("nonempty path"));
        let mut e = self.primal(seg, lt)?;
        e.lambda = lambda;
        Ok(e)
    }

    /// Solutions at every knot.
    pub fn entries(&self) -> Result<Vec<PathEntry>> {
        self.knots.iter().map(|&(lt, s)| self.primal(&self.segments[s], lt)).collect()
    }

    /// Solutions at up to `max` knots, always keeping the first and the last.
    pub fn stored_entries(&self, max: usize) -> Result<Vec<PathEntry>> {
        let total = self.knots.len();
        let idx: Vec<usize> = if total <= max || max < 2 {
            (0..total).collect()
        } else {
            let mut v: Vec<usize> = (0..max)
                .map(|j| ((j as f64) * (total - 1) as f64 / (max - 1) as f64).round() as usize)
                .collect();
            v.dedup();
            v
        };
        let out: Vec<PathEntry> = idx
            .into_iter()
            .map(|i| {
                let (lt, s) = self.knots[i];
                self.primal(&self.segments[s], lt)
            })
            .collect::<Result<_>>()?;
        for w in out.windows(2) {
            if w[1].level_changes() < w[0].level_changes() {
                log::debug!(
                    "level count decreased from lambda {} to {}",
                    w[0].lambda,
                    w[1].lambda
                );
            }
        }
        Ok(out)
    }
}

/// Thin QR reduction `(R, Q' t)`.
fn reduce(a: &DMatrix<f64>, t: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let qr = a.clone().qr();
    let q = qr.q();
    let y = q.tr_mul(t);
    (qr.r(), y)
}

/// Largest violation of the optimality conditions of the fused lasso at
/// `delta`, computed from the primal only. With `g = -(2 / (n lambda)) A'(A
/// delta - t)` the conditions are `sum g = 0` and `v_k = -sum_{i<=k} g_i` in
/// `[-1, 1]`, equal to the sign of `delta_{k+1} - delta_k` where that is
/// nonzero. Differences with `|.| <= zero_tol` count as zero.
pub fn kkt_residual(a: &DMatrix<f64>, t: &DVector<f64>, delta: &DVector<f64>, lambda: f64, zero_tol: f64) -> f64 {
    let n = a.nrows() as f64;
    let grad = a.tr_mul(&(a * delta - t)) * (2.0 / n);
    if lambda == 0.0 {
        return grad.amax();
    }
    let g = -grad / lambda;
    let k = g.len();
    let mut res: f64 = 0.0;
    let mut cum = 0.0;
    for i in 0..k - 1 {
        cum += g[i];
        let v = -cum;
        res = res.max(v.abs() - 1.0);
        let diff = delta[i + 1] - delta[i];
        if diff.abs() > zero_tol {
            res = res.max((v - diff.signum()).abs());
        }
    }
    cum += g[k - 1];
    res.max(cum.abs())
}

/// `argmin_c ||t - c A 1||`.
pub fn constant_fit(a: &DMatrix<f64>, t: &DVector<f64>) -> f64 {
    let s = a.column_sum();
    s.dot(t) / s.norm_squared()
}

/// `(1/n) ||y_adj - A delta||^2`.
pub fn empirical_mse(delta: &DVector<f64>, y_adj: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
    (y_adj - a * delta).norm_squared() / y_adj.len() as f64
}

/// `E~[s, l] = (1/n) ||target_s - A delta_l||^2` for each predictive target
/// (one per column of `targets`) and each path entry.
pub fn predictive_mse_draws(entries: &[PathEntry], targets: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    let fits = DMatrix::from_columns(&entries.iter().map(|e| a * &e.delta).collect::<Vec<_>>());
    let fit_sq: Vec<f64> = fits.column_iter().map(|c| c.norm_squared()).collect();
    let cross = targets.tr_mul(&fits);
    let mut out = DMatrix::zeros(targets.ncols(), entries.len());
    for s in 0..targets.ncols() {
        let tt = targets.column(s).norm_squared();
        for l in 0..entries.len() {
            out[(s, l)] = ((tt - 2.0 * cross[(s, l)] + fit_sq[l]) / n).max(0.0);
        }
    }
    out
}

/// Membership and selection within the acceptable family.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptableFamily {
    pub lambda_min: usize,
    /// `D~[s, l]`, percent increase of predictive loss over `lambda_min`.
    pub pct_diff: DMatrix<f64>,
    pub members: Vec<bool>,
    pub simplest: usize,
    /// `epsilon` and `1 - epsilon` empirical quantiles of `D~` per entry.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Builds the acceptable family. Entry `l` is a member when the lower
/// `(1 - epsilon)` prediction interval `[q_epsilon, inf)` of `D~_l` contains 0,
/// i.e. when at least `ceil(epsilon S)` draws satisfy `D~ <= 0`; with
/// `epsilon = 0` every entry is a member. The simplest member has the fewest
/// level changes, ties going to the larger penalty.
pub fn acceptable_family(
    lambdas: &[f64],
    level_changes: &[usize],
    empirical: &[f64],
    predictive: &DMatrix<f64>,
    epsilon: f64,
) -> Result<AcceptableFamily> {
    let l_total = lambdas.len();
    if l_total == 0 {
        return Err(Error::InvalidInput("empty path".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    if level_changes.len() != l_total || empirical.len() != l_total || predictive.ncols() != l_total {
        return Err(Error::Dimension("path diagnostics have inconsistent lengths".into()));
    }
    let s_total = predictive.nrows();
    if s_total == 0 {
        return Err(Error::InvalidInput("no predictive draws".into()));
    }
    let lambda_min = (0..l_total)
        .min_by(|&i, &j| empirical[i].total_cmp(&empirical[j]))
        .expect("nonempty");
    let mut pct = DMatrix::zeros(s_total, l_total);
    for s in 0..s_total {
        let base = predictive[(s, lambda_min)];
        for l in 0..l_total {
            pct[(s, l)] = if l == lambda_min {
                0.0
            } else {
                100.0 * (predictive[(s, l)] - base) / base
            };
        }
    }
    let need = (epsilon * s_total as f64).ceil() as usize;
    let mut members = Vec::with_capacity(l_total);
    let mut lower = Vec::with_capacity(l_total);
    let mut upper = Vec::with_capacity(l_total);
    for l in 0..l_total {
        let mut col: Vec<f64> = pct.column(l).iter().copied().collect();
        let nonpos = col.iter().filter(|&&d| d <= 0.0).count();
        members.push(nonpos >= need);
        col.sort_by(|a, b| a.total_cmp(b));
        lower.push(crate::stats::quantile_sorted(&col, epsilon));
        upper.push(crate::stats::quantile_sorted(&col, 1.0 - epsilon));
    }
    let simplest = (0..l_total)
        .filter(|&l| members[l])
        .min_by(|&i, &j| {
            level_changes[i]
                .cmp(&level_changes[j])
                .then(lambdas[j].total_cmp(&lambdas[i]))
        })
        .expect("lambda_min is always a member");
    Ok(AcceptableFamily {
        lambda_min,
        pct_diff: pct,
        members,
        simplest,
        lower,
        upper,
    })
}

/// Sign label of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Zero,
    Negative,
}

impl Label {
    pub fn symbol(&self) -> &'static str {
        match self {
            Label::Positive => "+",
            Label::Zero => "0",
            Label::Negative => "-",
        }
    }

    pub fn of(level: f64, zero_tol: f64) -> Self {
        if level.abs() <= zero_tol {
            Label::Zero
        } else if level > 0.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

/// A maximal interval with one level (or one label, after merging).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: f64,
    pub end: f64,
    pub level: f64,
    pub label: Label,
}

/// `beta(t) = level_k` on each run of fused cells.
#[derive(Debug, Clone, PartialEq)]
pub struct LocallyConstantEstimate {
    pub lambda: f64,
    pub partition: Partition,
    /// Cell levels.
    pub delta: Vec<f64>,
    /// Maximal runs of equal level, labeled with `zero_tol = 0`.
    pub runs: Vec<Window>,
}

impl LocallyConstantEstimate {
    pub fn new(partition: &Partition, entry: &PathEntry) -> Result<Self> {
        let k = partition.n_cells();
        if entry.delta.len() != k || entry.fused.len() + 1 != k {
            return Err(Error::Dimension("path entry does not match the partition".into()));
        }
        let mut runs: Vec<Window> = Vec::new();
        for j in 0..k {
            let (a, b) = partition.cell(j);
            let level = entry.delta[j];
            match runs.last_mut() {
                Some(r) if entry.fused[j - 1] || r.level == level => r.end = b,
                _ => runs.push(Window {
                    start: a,
                    end: b,
                    level,
                    label: Label::of(level, 0.0),
                }),
            }
        }
        Ok(Self {
            lambda: entry.lambda,
            partition: partition.clone(),
            delta: entry.delta.iter().copied().collect(),
            runs,
        })
    }

    pub fn value(&self, t: f64) -> Option<f64> {
        self.partition.locate(t).map(|k| self.delta[k])
    }
}

/// Labels runs by sign with `|level| <= zero_tol` as zero, then merges
/// neighbours with equal labels; merged levels are length-weighted means.
pub fn extract_windows(estimate: &LocallyConstantEstimate, zero_tol: f64) -> Vec<Window> {
    merge_labeled(estimate.runs.iter().map(|r| Window {
        label: Label::of(r.level, zero_tol),
        ..r.clone()
    }))
}

fn merge_labeled(items: impl Iterator<Item = Window>) -> Vec<Window> {
    let mut out: Vec<Window> = Vec::new();
    for w in items {
        match out.last_mut() {
            Some(prev) if prev.label == w.label => {
                let (l1, l2) = (prev.end - prev.start, w.end - w.start);
                prev.level = if l1 + l2 > 0.0 {
                    (prev.level * l1 + w.level * l2) / (l1 + l2)
                } else {
                    prev.level
                };
                prev.end = w.end;
            }
            _ => out.push(w),
        }
    }
    out
}

/// Pointwise labels of the credible-interval competitor: `+` where the 95%
/// band lies above 0, `-` where it lies below.
pub fn ci_labels(summary: &BetaSummary) -> Vec<Label> {
    summary
        .lower95
        .iter()
        .zip(&summary.upper95)
        .map(|(&l, &u)| {
            if l > 0.0 {
                Label::Positive
            } else if u < 0.0 {
                Label::Negative
            } else {
                Label::Zero
            }
        })
        .collect()
}

/// Windows formed by contiguous equally labeled grid points of the
/// credible-interval competitor; each spans from its first to last point.
pub fn ci_windows(summary: &BetaSummary) -> Vec<Window> {
    let labels = ci_labels(summary);
    merge_labeled(summary.grid.iter().zip(&labels).zip(&summary.mean).map(|((&t, &l), &m)| Window {
        start: t,
        end: t,
        level: m,
        label: l,
    }))
}

/// Labels of an estimate at grid points. A point shared by two windows
/// takes the label of the one it starts.
pub fn labels_on_grid(windows: &[Window], grid: &[f64]) -> Vec<Label> {
    grid.iter()
        .map(|&t| {
            windows
                .iter()
                .find(|w| t >= w.start && t < w.end)
                .or_else(|| windows.iter().find(|w| t >= w.start && t <= w.end))
                .map(|w| w.label)
                .unwrap_or(Label::Zero)
        })
        .collect()
}

/// Settings of the decision analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecisionConfig {
    pub epsilon: f64,
    pub zero_tol: f64,
    /// Maximum number of stored path entries.
    pub max_path: usize,
    /// Posterior draws used for predictive losses; `0` uses all.
    pub predictive_draws: usize,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.10,
            zero_tol: 0.0,
            max_path: 100,
            predictive_draws: 0,
        }
    }
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        if !(self.zero_tol >= 0.0) {
            return Err(Error::Config(format!("zero_tol must be nonnegative, got {}", self.zero_tol)));
        }
        if self.max_path < 2 {
            return Err(Error::Config("max_path must be at least 2".into()));
        }
        Ok(())
    }
}

/// Everything the decision analysis produces.
#[derive(Debug, Clone)]
pub struct DecisionAnalysis {
    pub entries: Vec<PathEntry>,
    pub empirical: Vec<f64>,
    pub family: AcceptableFamily,
    pub estimate: LocallyConstantEstimate,
    pub windows: Vec<Window>,
    pub rank_deficient: bool,
}

/// Runs the decision analysis for one fitted model: pseudo-data from the
/// posterior mean of `X** B*`, empirical losses against the covariate-adjusted
/// responses, and predictive losses from `X** B*^(s) + N(0, sigma2^(s))`.
pub fn analyze<R: Rng + ?Sized>(
    design: &RegressionDesign,
    curves: &[CoefCurve],
    draws: &PosteriorDraws,
    partition: &Partition,
    config: &DecisionConfig,
    rng: &mut R,
) -> Result<DecisionAnalysis> {
    config.validate()?;
    if curves.len() != design.n() {
        return Err(Error::Dimension(format!("{} curves for {} subjects", curves.len(), design.n())));
    }
    let a = aggregate(curves, partition)?;
    let adjust = draws.adjustment_mean(design);
    let targets = &design.x_ss * draws.b_star_mean();
    let y_adj = &design.y - &adjust;
    let path = FusedLassoPath::solve(&a, &targets)?;
    let entries = path.stored_entries(config.max_path)?;
    let empirical: Vec<f64> = entries.iter().map(|e| empirical_mse(&e.delta, &y_adj, &a)).collect();

    let s_total = draws.n_draws();
    let use_s = if config.predictive_draws == 0 {
        s_total
    } else {
        config.predictive_draws.min(s_total)
    };
    let picks: Vec<usize> = (0..use_s).map(|j| j * s_total / use_s).collect();
    let mut predictive = DMatrix::zeros(use_s, entries.len());
    const BATCH: usize = 256;
    for (chunk_i, chunk) in picks.chunks(BATCH).enumerate() {
        let b = DMatrix::from_fn(design.x_ss.ncols(), chunk.len(), |r, c| draws.b_star[(chunk[c], r)]);
        let mut t = &design.x_ss * b;
        for (c, &s) in chunk.iter().enumerate() {
            let sd = draws.sigma2[s].sqrt();
            for v in t.column_mut(c).iter_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let e = predictive_mse_draws(&entries, &t, &a);
        predictive.rows_mut(chunk_i * BATCH, chunk.len()).copy_from(&e);
    }
    let lambdas: Vec<f64> = entries.iter().map(|e| e.lambda).collect();
    let changes: Vec<usize> = entries.iter().map(|e| e.level_changes()).collect();
    let family = acceptable_family(&lambdas, &changes, &empirical, &predictive, config.epsilon)?;
    let estimate = LocallyConstantEstimate::new(partition, &entries[family.simplest])?;
    let windows = extract_windows(&estimate, config.zero_tol);
    Ok(DecisionAnalysis {
        entries,
        empirical,
        family,
        estimate,
        windows,
        rank_deficient: path.rank_deficient,
    })
}
