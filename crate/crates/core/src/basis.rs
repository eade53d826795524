//! Equally spaced clamped B-spline bases, exact cross-Gram integrals and the
//! second-difference operator used by the shrinkage prior.
//!
//! Integrals of spline products are computed span by span with a
//! Gauss–Legendre rule of `max(degree) + 1` nodes, which is exact for the
//! product of two polynomials of those degrees. Spans are split at every knot
//! of either basis and at the subdomain endpoints, so subject domains may end
//! at arbitrary real points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::quadrature::GaussLegendre;
use crate::{Error, Result};

/// A closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lo: f64,
    hi: f64,
}

impl Domain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidDomain { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    pub fn contains_domain(&self, other: &Domain) -> bool {
        other.lo >= self.lo && other.hi <= self.hi
    }

    /// Intersection, or `None` when it is empty or a single point.
    pub fn intersect(&self, other: &Domain) -> Option<Domain> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo < hi).then_some(Domain { lo, hi })
    }

    pub(crate) fn require_within(&self, outer: &Domain) -> Result<()> {
        // Tolerate round-off in endpoints read back from text files.
        let tol = 1e-12 * outer.width().max(1.0);
        if self.lo < outer.lo - tol || self.hi > outer.hi + tol {
            return Err(Error::DomainMismatch {
                lo: self.lo,
                hi: self.hi,
                outer_lo: outer.lo,
                outer_hi: outer.hi,
            });
        }
        Ok(())
    }
}

/// A clamped B-spline basis with equally spaced interior knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    domain: Domain,
    degree: usize,
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Builds a basis of `n_basis` functions of the given degree on `domain`.
    ///
    /// Boundary knots are repeated `degree + 1` times; the `n_basis - degree - 1`
    /// interior knots split the domain into equal spans.
    pub fn new(domain: Domain, n_basis: usize, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::InvalidBasis("degree must be at least 1".into()));
        }
        if n_basis < degree + 1 {
            return Err(Error::InvalidBasis(format!(
                "{n_basis} basis functions are too few for degree {degree} (need at least {})",
                degree + 1
            )));
        }
        let n_spans = n_basis - degree;
        let mut knots = Vec::with_capacity(n_basis + degree + 1);
        knots.extend(std::iter::repeat_n(domain.lo, degree + 1));
        let step = domain.width() / n_spans as f64;
        knots.extend((1..n_spans).map(|i| domain.lo + step * i as f64));
        knots.extend(std::iter::repeat_n(domain.hi, degree + 1));
        Ok(Self {
            domain,
            degree,
            knots,
        })
    }

    /// Cubic basis, the default throughout.
    pub fn cubic(domain: Domain, n_basis: usize) -> Result<Self> {
        Self::new(domain, n_basis, 3)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.knots.len() - self.degree - 1]
    }

    pub fn n_spans(&self) -> usize {
        self.n_basis() - self.degree
    }

    /// Distinct knot values: the span boundaries, including both domain ends.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_spans() + 1);
        out.push(self.domain.lo);
        out.extend_from_slice(self.interior_knots());
        out.push(self.domain.hi);
        out
    }

    /// Support `[lo, hi]` of basis function `k`.
    pub fn support(&self, k: usize) -> (f64, f64) {
        (self.knots[k], self.knots[k + self.degree + 1])
    }

    /// Knot-vector index `mu` with `knots[mu] <= t < knots[mu + 1]`; the right
    /// domain end belongs to the last span.
    fn span_index(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.n_basis() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        // Equal spacing makes the span directly computable; guard the edges
        // against round-off.
        let step = self.domain.width() / self.n_spans() as f64;
        let mut mu = p + (((t - self.domain.lo) / step).floor().max(0.0) as usize);
        mu = mu.min(last);
        while mu > p && t < self.knots[mu] {
            mu -= 1;
        }
        while mu < last && t >= self.knots[mu + 1] {
            mu += 1;
        }
        mu
    }

    /// The `degree + 1` possibly nonzero basis values at `t` without a domain
    /// check. Returns the index of the first of them.
    pub(crate) fn eval_local(&self, t: f64, out: &mut [f64]) -> usize {
        let p = self.degree;
        debug_assert_eq!(out.len(), p + 1);
        let mu = self.span_index(t);
        let u = &self.knots;
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        assert!(p < 16, "degree too large");
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[mu + 1 - j];
            right[j] = u[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        mu - p
    }

    /// Nonzero-window evaluation: `(first index, values)` with `degree + 1`
    /// values.
    pub fn eval_nonzero(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        self.check_point(t)?;
        let mut vals = vec![0.0; self.degree + 1];
        let first = self.eval_local(t, &mut vals);
        Ok((first, vals))
    }

    /// All `K` basis values at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let (first, vals) = self.eval_nonzero(t)?;
        let mut out = vec![0.0; self.n_basis()];
        out[first..first + vals.len()].copy_from_slice(&vals);
        Ok(out)
    }

    /// `m x K` design matrix of basis values at the given points.
    pub fn design_matrix(&self, ts: &[f64]) -> Result<DMatrix<f64>> {
        let mut mat = DMatrix::zeros(ts.len(), self.n_basis());
        let mut vals = vec![0.0; self.degree + 1];
        for (row, &t) in ts.iter().enumerate() {
            self.check_point(t)?;
            let first = self.eval_local(t, &mut vals);
            for (j, v) in vals.iter().enumerate() {
                mat[(row, first + j)] = *v;
            }
        }
        Ok(mat)
    }

    /// Value of the spline `sum_k coeffs[k] * psi_k(t)`.
    pub fn evaluate(&self, coeffs: &[f64], t: f64) -> Result<f64> {
        if coeffs.len() != self.n_basis() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                self.n_basis()
            )));
        }
        self.check_point(t)?;
        Ok(self.evaluate_unchecked(coeffs, t))
    }

    pub(crate) fn evaluate_unchecked(&self, coeffs: &[f64], t: f64) -> f64 {
        let mut vals = [0.0; 16];
        let vals = &mut vals[..self.degree + 1];
        let first = self.eval_local(t, vals);
        vals.iter()
            .zip(&coeffs[first..])
            .map(|(v, c)| v * c)
            .sum()
    }

    fn check_point(&self, t: f64) -> Result<()> {
        if !self.domain.contains(t) {
            return Err(Error::OutOfDomain {
                t,
                lo: self.domain.lo,
                hi: self.domain.hi,
            });
        }
        Ok(())
    }

    /// `[integral over sub of psi_k]_k`.
    pub fn integrals(&self, sub: &Domain) -> Result<DVector<f64>> {
        sub.require_within(&self.domain)?;
        let mut out = DVector::zeros(self.n_basis());
        let rule = GaussLegendre::new(self.degree + 1);
        let mut vals = vec![0.0; self.degree + 1];
        for (a, b) in pieces(sub, &[self.knots()]) {
            for (t, w) in rule.mapped(a, b) {
                let first = self.eval_local(t, &mut vals);
                for (j, v) in vals.iter().enumerate() {
                    out[first + j] += w * v;
                }
            }
        }
        Ok(out)
    }

    /// `integral over sub of spline(coeffs) * f`, with `f` smooth between the
    /// given extra breakpoints. `nodes` Gauss points are used per piece.
    pub fn integrate_against(
        &self,
        coeffs: &[f64],
        sub: &Domain,
        extra_breaks: &[f64],
        nodes: usize,
        mut f: impl FnMut(f64) -> f64,
    ) -> Result<f64> {
        if coeffs.len() != self.n_basis() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a basis of size {}",
                coeffs.len(),
                self.n_basis()
            )));
        }
        sub.require_within(&self.domain)?;
        let rule = GaussLegendre::new(nodes.max(self.degree + 1));
        let mut total = 0.0;
        for (a, b) in pieces(sub, &[self.knots(), extra_breaks]) {
            for (t, w) in rule.mapped(a, b) {
                total += w * self.evaluate_unchecked(coeffs, t) * f(t);
            }
        }
        Ok(total)
    }
}

/// Splits `sub` at every breakpoint of the given sequences lying strictly
/// inside it.
pub(crate) fn pieces(sub: &Domain, breaks: &[&[f64]]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = breaks
        .iter()
        .flat_map(|b| b.iter().copied())
        .filter(|&x| x > sub.lo && x < sub.hi)
        .collect();
    cuts.push(sub.lo);
    cuts.push(sub.hi);
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[0], w[1]))
        .collect()
}

/// `J = [integral over the domain of phi_j psi_k]`, a `K_X x K_B` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossGram {
    pub values: DMatrix<f64>,
    pub domain: Domain,
}

/// Exact cross-Gram matrix of two bases over `sub`.
pub fn cross_gram(basis_x: &BSplineBasis, basis_b: &BSplineBasis, sub: &Domain) -> Result<CrossGram> {
    sub.require_within(&basis_x.domain)?;
    sub.require_within(&basis_b.domain)?;
    let px = basis_x.degree;
    let pb = basis_b.degree;
    let rule = GaussLegendre::new(px.max(pb) + 1);
    let mut values = DMatrix::zeros(basis_x.n_basis(), basis_b.n_basis());
    let mut vx = vec![0.0; px + 1];
    let mut vb = vec![0.0; pb + 1];
    for (a, b) in pieces(sub, &[basis_x.knots(), basis_b.knots()]) {
        for (t, w) in rule.mapped(a, b) {
            let fx = basis_x.eval_local(t, &mut vx);
            let fb = basis_b.eval_local(t, &mut vb);
            for (j, x) in vx.iter().enumerate() {
                let wx = w * x;
                for (k, y) in vb.iter().enumerate() {
                    values[(fx + j, fb + k)] += wx * y;
                }
            }
        }
    }
    Ok(CrossGram { values, domain: *sub })
}

/// The `K x K` second-difference operator: unit first and last rows, and
/// interior rows carrying the `(1, -2, 1)` stencil starting one column to the
/// left of the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecondDiffOperator {
    k: usize,
}

/// Builds the second-difference operator for `k >= 3` coefficients.
pub fn second_diff(k: usize) -> Result<SecondDiffOperator> {
    if k < 3 {
        return Err(Error::InvalidBasis(format!(
            "second differences need at least 3 coefficients, got {k}"
        )));
    }
    Ok(SecondDiffOperator { k })
}

impl SecondDiffOperator {
    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.k;
        let mut d = DMatrix::zeros(k, k);
        d[(0, 0)] = 1.0;
        d[(k - 1, k - 1)] = 1.0;
        for row in 1..k - 1 {
            d[(row, row - 1)] = 1.0;
            d[(row, row)] = -2.0;
            d[(row, row + 1)] = 1.0;
        }
        d
    }

    /// `D b`.
    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.k, "coefficient length");
        let k = self.k;
        let mut out = Vec::with_capacity(k);
        out.push(b[0]);
        out.extend(b.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]));
        out.push(b[k - 1]);
        out
    }

    /// The `K - 2` interior second differences of `b`.
    pub fn interior(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.k, "coefficient length");
        b.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect()
    }

    /// Solves `D b = w` by forward recursion.
    pub fn solve(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.k, "right-hand side length");
        let k = self.k;
        let mut b = vec![0.0; k];
        b[0] = w[0];
        b[k - 1] = w[k - 1];
        if k == 3 {
            b[1] = (b[0] + b[2] - w[1]) / 2.0;
            return b;
        }
        // Rows 1..k-2 give b[r+1] = w[r] - b[r-1] + 2 b[r]; with b[0] known,
        // b is affine in the unknown b[1], fixed by the last row.
        let run = |b1: f64| {
            let mut v = vec![0.0; k];
            v[0] = w[0];
            v[1] = b1;
            for r in 1..k - 1 {
                v[r + 1] = w[r] - v[r - 1] + 2.0 * v[r];
            }
            v
        };
        let v0 = run(0.0);
        let v1 = run(1.0);
        let slope = v1[k - 1] - v0[k - 1];
        let b1 = (w[k - 1] - v0[k - 1]) / slope;
        for (i, bi) in b.iter_mut().enumerate() {
            *bi = v0[i] + b1 * (v1[i] - v0[i]);
        }
        b
    }

    /// `D' diag(1 / prior_var) D`, pentadiagonal, returned dense.
    pub fn weighted_gram(&self, prior_var: &[f64]) -> DMatrix<f64> {
        let k = self.k;
        assert_eq!(prior_var.len(), k, "prior variance length");
        let mut q = DMatrix::zeros(k, k);
        self.add_weighted_gram(prior_var, &mut q);
        q
    }

    /// Adds `D' diag(1 / prior_var) D` into `q`.
    pub(crate) fn add_weighted_gram(&self, prior_var: &[f64], q: &mut DMatrix<f64>) {
        let k = self.k;
        q[(0, 0)] += 1.0 / prior_var[0];
        q[(k - 1, k - 1)] += 1.0 / prior_var[k - 1];
        const STENCIL: [f64; 3] = [1.0, -2.0, 1.0];
        for row in 1..k - 1 {
            let w = 1.0 / prior_var[row];
            for (a, sa) in STENCIL.iter().enumerate() {
                for (b, sb) in STENCIL.iter().enumerate() {
                    q[(row - 1 + a, row - 1 + b)] += w * sa * sb;
                }
            }
        }
    }
}
