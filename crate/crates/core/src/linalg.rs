//! Gaussian draws in canonical (precision, linear term) form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Cholesky factor of `q`, retried once with `1e-8 * trace / K` added to the
/// diagonal when the first attempt fails.
pub fn cholesky_with_jitter(q: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    if let Some(chol) = q.clone().cholesky() {
        return Ok(chol);
    }
    let k = q.nrows();
    let jitter = 1e-8 * q.trace().abs().max(f64::MIN_POSITIVE) / k as f64;
    log::warn!("{context}: precision not positive definite, adding jitter {jitter:e}");
    let mut q = q.clone();
    for i in 0..k {
        q[(i, i)] += jitter;
    }
    q.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        context: context.to_string(),
    })
}

/// Draw from `N(Q^{-1} l, Q^{-1})`.
pub fn sample_canonical<R: Rng + ?Sized>(
    q: &DMatrix<f64>,
    l: &DVector<f64>,
    rng: &mut R,
    context: &str,
) -> Result<DVector<f64>> {
    let chol = cholesky_with_jitter(q, context)?;
    let mean = chol.solve(l);
    let z = DVector::from_fn(q.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    // Q = L L'; L' x = z gives x ~ N(0, Q^{-1}).
    let lt = chol.l().transpose();
    let x = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: context.to_string(),
        })?;
    Ok(mean + x)
}

/// Cholesky factor `L` of a symmetric positive definite tridiagonal matrix,
/// stored as its diagonal and subdiagonal. All operations are O(n).
#[derive(Debug, Clone)]
pub struct TridiagCholesky {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl TridiagCholesky {
    /// Factors the matrix with diagonal `d` and off-diagonal `e` (`e[i]` sits
    /// at positions `(i, i+1)` and `(i+1, i)`).
    pub fn new(d: &[f64], e: &[f64]) -> Result<Self> {
        let n = d.len();
        if e.len() + 1 != n.max(1) {
            return Err(Error::Dimension(format!(
                "tridiagonal with {n} diagonal and {} off-diagonal entries",
                e.len()
            )));
        }
        let mut diag = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(e.len());
        for i in 0..n {
            let mut a = d[i];
            if i > 0 {
                let s = e[i - 1] / diag[i - 1];
                sub.push(s);
                a -= s * s;
            }
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::NotPositiveDefinite {
                    context: "tridiagonal log-volatility precision".into(),
                });
            }
            diag.push(a.sqrt());
        }
        Ok(Self { diag, sub })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            if i > 0 {
                b[i] -= self.sub[i - 1] * b[i - 1];
            }
            b[i] /= self.diag[i];
        }
    }

    /// Solves `L' x = b` in place.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = b.len();
        for i in (0..n).rev() {
            if i + 1 < n {
                b[i] -= self.sub[i] * b[i + 1];
            }
            b[i] /= self.diag[i];
        }
    }

    /// `Q^{-1} l`.
    pub fn solve(&self, l: &[f64]) -> Vec<f64> {
        let mut x = l.to_vec();
        self.solve_lower(&mut x);
        self.solve_upper(&mut x);
        x
    }

    /// Draw from `N(Q^{-1} l, Q^{-1})`.
    pub fn sample<R: Rng + ?Sized>(&self, l: &[f64], rng: &mut R) -> Vec<f64> {
        let mut mean = self.solve(l);
        let mut z: Vec<f64> = (0..self.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.solve_upper(&mut z);
        for (m, x) in mean.iter_mut().zip(z) {
            *m += x;
        }
        mean
    }
}
