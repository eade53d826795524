//! Dynamic horseshoe machinery.
//!
//! The prior is placed on the interior second differences `w_k` of the spline
//! coefficients:
//!
//! ```text
//! w_k | h_k ~ N(0, exp(h_k))
//! h_1 = mu_h + eta_1,   h_{k+1} = mu_h + phi (h_k - mu_h) + eta_{k+1}
//! eta_k ~ Z(a, b, 0, 1)          (a = b = 1/2: horseshoe)
//! exp(mu_h / 2) ~ C+(0, 1),  (phi + 1) / 2 ~ Beta(10, 2)
//! ```
//!
//! Two parameter expansions make the log-volatility update conditionally
//! Gaussian. `log(w_k^2)` is `h_k` plus log-chi-square noise, approximated by a
//! ten-component Gaussian mixture with indicators `s_k`, and each innovation is
//! written as `eta_k | xi_k ~ N((a - b) / (2 xi_k), 1 / xi_k)` with
//! `xi_k ~ PG(a + b, eta_k)`. Given `(s, xi)`, `h` has a tridiagonal precision
//! and is drawn jointly in O(K). The half-Cauchy on `exp(mu_h / 2)` is the
//! horseshoe member of the same family (`mu_h ~ Z(1/2, 1/2, 0, 1)`), so it is
//! expanded the same way and `mu_h` is conditionally Gaussian too.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::TridiagCholesky;
use crate::{Error, Result};

/// Offset added to squared second differences before taking logs.
pub const LOG_SQ_OFFSET: f64 = 1e-10;

/// Ten-component Gaussian mixture approximating the log-chi-square(1)
/// distribution, from Omori, Chib, Shephard & Nakajima (2007, J. Econometrics,
/// Table 1). Means are for `log(eps^2)` directly, so they average to about
/// -1.2704.
pub const MIX_PROBS: [f64; 10] = [
    0.00609, 0.04775, 0.13057, 0.20674, 0.22715, 0.18842, 0.12047, 0.05591, 0.01575, 0.00115,
];
pub const MIX_MEANS: [f64; 10] = [
    1.92677, 1.34744, 0.73504, 0.02266, -0.85173, -1.97278, -3.46788, -5.55246, -8.68384,
    -14.65000,
];
pub const MIX_VARS: [f64; 10] = [
    0.11265, 0.17788, 0.26768, 0.40611, 0.62699, 0.98583, 1.57469, 2.54498, 4.16591, 7.33342,
];

/// Shape of the innovations and priors of the AR(1) log-volatility model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DhsConfig {
    /// Z-distribution shapes; `a = b = 1/2` is the horseshoe.
    pub a: f64,
    pub b: f64,
    /// Beta prior on `(phi + 1) / 2`.
    pub phi_prior: (f64, f64),
}

impl Default for DhsConfig {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 0.5,
            phi_prior: (10.0, 2.0),
        }
    }
}

impl DhsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::Config(format!(
                "Z-distribution shapes must be positive, got a={} b={}",
                self.a, self.b
            )));
        }
        if !(self.phi_prior.0 > 0.0 && self.phi_prior.1 > 0.0) {
            return Err(Error::Config("phi prior shapes must be positive".into()));
        }
        Ok(())
    }

    /// Pólya-Gamma shape of the innovation expansion.
    fn pg_shape(&self) -> f64 {
        self.a + self.b
    }

    /// Linear tilt of the innovation expansion.
    fn kappa(&self) -> f64 {
        (self.a - self.b) / 2.0
    }
}

/// State of the log-volatility process for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DhsState {
    /// `h_k = log(lambda_k^2)` for the `K - 2` interior second differences.
    pub h: Vec<f64>,
    pub mu_h: f64,
    pub phi: f64,
    /// Common prior scale of the two boundary coefficients.
    pub lambda0: f64,
    /// Mixture component of each `log(w_k^2)`.
    pub indicators: Vec<u8>,
    /// `xi_k`, the expansion variable of innovation `eta_k`.
    pub pg_evol: Vec<f64>,
    /// Expansion variable of `mu_h`.
    pub pg_mu: f64,
}

impl DhsState {
    /// Starting values from a pilot estimate of the second differences.
    pub fn initialize(d2_pilot: &[f64]) -> Result<Self> {
        let m = d2_pilot.len();
        if m == 0 {
            return Err(Error::InvalidInput("no second differences".into()));
        }
        if d2_pilot.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pilot second differences".into()));
        }
        let var = if m > 1 {
            crate::stats::variance(d2_pilot)
        } else {
            d2_pilot[0] * d2_pilot[0]
        };
        let h0 = var.max(f64::MIN_POSITIVE).ln().clamp(-20.0, 20.0);
        Ok(Self {
            h: vec![h0; m],
            mu_h: h0,
            phi: 0.9,
            lambda0: 1.0,
            indicators: vec![4; m],
            pg_evol: vec![1.0; m],
            pg_mu: 1.0,
        })
    }

    /// Joint draw of every quantity from the prior, including exact draws of
    /// the expansion variables given the innovations.
    pub fn sample_prior<R: Rng + ?Sized>(
        m: usize,
        config: &DhsConfig,
        lambda0_prior: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        let mu_h = sample_z(0.5, 0.5, rng)?;
        let pg_mu = sample_polya_gamma(1.0, mu_h, rng)?;
        let (pa, pb) = config.phi_prior;
        let beta = Beta::new(pa, pb).map_err(|e| Error::Config(e.to_string()))?;
        let phi = 2.0 * beta.sample(rng) - 1.0;
        let mut h = Vec::with_capacity(m);
        let mut pg_evol = Vec::with_capacity(m);
        for k in 0..m {
            let eta = sample_z(config.a, config.b, rng)?;
            pg_evol.push(sample_polya_gamma(config.pg_shape(), eta, rng)?);
            let prev = if k == 0 { 0.0 } else { h[k - 1] - mu_h };
            h.push(mu_h + phi * prev + eta);
        }
        let prec = Gamma::new(lambda0_prior.0, 1.0 / lambda0_prior.1)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng);
        Ok(Self {
            h,
            mu_h,
            phi,
            lambda0: prec.recip().sqrt(),
            indicators: vec![0; m],
            pg_evol,
            pg_mu,
        })
    }

    /// One full update of the log-volatility block given the current
    /// interior second differences `d2`, in the order: mixture indicators,
    /// log-volatilities, innovation expansion variables, `mu_h`, `phi`.
    pub fn update<R: Rng + ?Sized>(&mut self, d2: &[f64], config: &DhsConfig, rng: &mut R) -> Result<()> {
        self.indicators = sample_mixture_indicators(d2, &self.h, rng)?;
        self.h = sample_log_vols(d2, self, config, rng)?;
        sample_pg_auxiliaries(self, config, rng)?;
        let (mu, phi) = sample_ar_params(&self.h.clone(), config, self, rng)?;
        self.mu_h = mu;
        self.phi = phi;
        Ok(())
    }

    /// Prior variances `exp(h_k)` of the interior second differences.
    pub fn interior_variances(&self) -> impl Iterator<Item = f64> + '_ {
        self.h.iter().map(|h| h.exp())
    }
}

/// A draw from `Z(a, b, 0, 1)`, the law of `log(G_a / G_b)` for independent
/// unit-rate gammas.
pub fn sample_z<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let ga = Gamma::new(a, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let gb = Gamma::new(b, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(ga.sample(rng).ln() - gb.sample(rng).ln())
}

const PG_TRUNC: f64 = 0.64;
const PG_SERIES_TERMS: usize = 200;

/// Draw from the Pólya-Gamma distribution `PG(shape, tilt)`.
///
/// `shape == 1` uses Devroye's exact alternating-series sampler; other shapes
/// use the infinite convolution of gammas truncated at 200 terms, with the
/// mean of the dropped tail added back.
pub fn sample_polya_gamma<R: Rng + ?Sized>(shape: f64, tilt: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(Error::InvalidInput(format!(
            "Pólya-Gamma shape must be positive, got {shape}"
        )));
    }
    if !tilt.is_finite() {
        return Err(Error::NonFinite("Pólya-Gamma tilt".into()));
    }
    if shape == 1.0 {
        return Ok(sample_pg1(tilt, rng));
    }
    let gamma = Gamma::new(shape, 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let c2 = tilt * tilt / (4.0 * PI * PI);
    let mut total = 0.0;
    for k in 1..=PG_SERIES_TERMS {
        let kh = k as f64 - 0.5;
        total += gamma.sample(rng) / (kh * kh + c2);
    }
    let n = PG_SERIES_TERMS as f64;
    let tail = if c2 > 0.0 {
        let d = c2.sqrt();
        (0.5 * PI - (n / d).atan()) / d
    } else {
        1.0 / n
    };
    Ok((total + shape * tail) / (2.0 * PI * PI))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes' Chebyshev fit,
/// relative error below 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Coefficient `a_n(x)` of the alternating series for the J*(1, z) density.
fn pg_series_coef(n: usize, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > PG_TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let nh = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * nh * nh / x).exp()
    } else {
        0.0
    }
}

/// Probability of proposing from the truncated exponential piece.
fn pg_texp_mass(z: f64) -> f64 {
    let t = PG_TRUNC;
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + std_normal_cdf(b).ln();
    let xa = x0 + z + std_normal_cdf(a).ln();
    let qdivp = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + qdivp)
}

/// Inverse Gaussian `IG(1/z, 1)` truncated to `(0, PG_TRUNC)`.
fn pg_truncated_inv_gauss<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = PG_TRUNC;
    if z < 1.0 / t {
        // Mean beyond the truncation: propose from the truncated Lévy law and
        // accept with the tilt.
        loop {
            let (mut e1, mut e2): (f64, f64) = (rng.sample(Exp1), rng.sample(Exp1));
            while e1 * e1 > 2.0 * e2 / t {
                e1 = rng.sample(Exp1);
                e2 = rng.sample(Exp1);
            }
            let x = t / (1.0 + e1 * t).powi(2);
            if rng.random::<f64>() <= (-0.5 * z * z * x).exp() {
                return x;
            }
        }
    }
    let mu = 1.0 / z;
    loop {
        let y: f64 = rng.sample::<f64, _>(StandardNormal).powi(2);
        let mu_y = mu * y;
        let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
        if rng.random::<f64>() > mu / (mu + x) {
            x = mu * mu / x;
        }
        if x <= t {
            return x;
        }
    }
}

/// Exact `PG(1, tilt)` draw.
fn sample_pg1<R: Rng + ?Sized>(tilt: f64, rng: &mut R) -> f64 {
    let z = 0.5 * tilt.abs();
    let fz = PI * PI / 8.0 + 0.5 * z * z;
    let p_exp = pg_texp_mass(z);
    loop {
        let x = if rng.random::<f64>() < p_exp {
            PG_TRUNC + rng.sample::<f64, _>(Exp1) / fz
        } else {
            pg_truncated_inv_gauss(z, rng)
        };
        let mut s = pg_series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= pg_series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += pg_series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// Normalized full-conditional probabilities of the mixture indicator given
/// the residual `log(w^2 + offset) - h`.
pub fn mixture_probabilities(resid: f64) -> [f64; 10] {
    let mut logp = [0.0; 10];
    for j in 0..10 {
        let d = resid - MIX_MEANS[j];
        logp[j] = MIX_PROBS[j].ln() - 0.5 * MIX_VARS[j].ln() - 0.5 * d * d / MIX_VARS[j];
    }
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; 10];
    let mut total = 0.0;
    for j in 0..10 {
        p[j] = (logp[j] - max).exp();
        total += p[j];
    }
    for x in &mut p {
        *x /= total;
    }
    p
}

/// `log(w^2 + offset)`.
pub fn log_square(w: f64) -> f64 {
    (w * w + LOG_SQ_OFFSET).ln()
}

/// Draws each mixture indicator from its discrete full conditional.
pub fn sample_mixture_indicators<R: Rng + ?Sized>(d2: &[f64], h: &[f64], rng: &mut R) -> Result<Vec<u8>> {
    if d2.len() != h.len() {
        return Err(Error::Dimension(format!(
            "{} second differences, {} log-volatilities",
            d2.len(),
            h.len()
        )));
    }
    d2.iter()
        .zip(h)
        .map(|(&w, &hk)| {
            if !w.is_finite() || !hk.is_finite() {
                return Err(Error::NonFinite("mixture indicator inputs".into()));
            }
            let p = mixture_probabilities(log_square(w) - hk);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    return Ok(j as u8);
                }
            }
            Ok(9)
        })
        .collect()
}

/// Tridiagonal precision and linear term of the Gaussian full conditional of
/// `h` given indicators and expansion variables.
#[derive(Debug, Clone)]
pub struct LogVolConditional {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
    pub linear: Vec<f64>,
}

/// Builds the canonical parameters of `h | s, xi, mu_h, phi, w`.
pub fn log_vol_conditional(d2: &[f64], state: &DhsState, config: &DhsConfig) -> Result<LogVolConditional> {
    let m = state.h.len();
    if d2.len() != m || state.indicators.len() != m || state.pg_evol.len() != m {
        return Err(Error::Dimension("log-volatility state lengths differ".into()));
    }
    if d2.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("second differences".into()));
    }
    let (mu, phi) = (state.mu_h, state.phi);
    let kappa = config.kappa();
    let xi = &state.pg_evol;
    // Work with e_k = h_k - mu. The state equations
    //   e_1 ~ N(kappa/xi_1, 1/xi_1),  e_k - phi e_{k-1} ~ N(kappa/xi_k, 1/xi_k)
    // give prior precision F' Xi F and linear term F' kappa 1, F unit lower
    // bidiagonal with -phi below the diagonal.
    let mut diag = vec![0.0; m];
    let mut off = vec![0.0; m.saturating_sub(1)];
    let mut linear = vec![0.0; m];
    for k in 0..m {
        diag[k] += xi[k];
        linear[k] += kappa;
        if k + 1 < m {
            diag[k] += phi * phi * xi[k + 1];
            off[k] = -phi * xi[k + 1];
            linear[k] -= phi * kappa;
        }
    }
    for k in 0..m {
        let s = state.indicators[k] as usize;
        let v = MIX_VARS[s];
        diag[k] += 1.0 / v;
        linear[k] += (log_square(d2[k]) - MIX_MEANS[s] - mu) / v;
    }
    Ok(LogVolConditional { diag, off, linear })
}

/// Joint draw of the log-volatilities from their Gaussian full conditional,
/// in linear time.
pub fn sample_log_vols<R: Rng + ?Sized>(
    d2: &[f64],
    state: &DhsState,
    config: &DhsConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cond = log_vol_conditional(d2, state, config)?;
    let chol = TridiagCholesky::new(&cond.diag, &cond.off)?;
    let e = chol.sample(&cond.linear, rng);
    let h: Vec<f64> = e.into_iter().map(|x| x + state.mu_h).collect();
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log-volatility draw".into()));
    }
    Ok(h)
}

/// Innovations `eta_k` implied by the current `h`, `mu_h` and `phi`.
pub fn innovations(h: &[f64], mu: f64, phi: f64) -> Vec<f64> {
    (0..h.len())
        .map(|k| {
            let prev = if k == 0 { 0.0 } else { h[k - 1] - mu };
            (h[k] - mu) - phi * prev
        })
        .collect()
}

/// Redraws `xi_k ~ PG(a + b, eta_k)`.
pub fn sample_pg_auxiliaries<R: Rng + ?Sized>(state: &mut DhsState, config: &DhsConfig, rng: &mut R) -> Result<()> {
    let eta = innovations(&state.h, state.mu_h, state.phi);
    for (xi, e) in state.pg_evol.iter_mut().zip(eta) {
        *xi = sample_polya_gamma(config.pg_shape(), e, rng)?;
    }
    Ok(())
}

/// Draws `(mu_h, phi)`: `mu_h` from its Gaussian full conditional (then its
/// expansion variable), `phi` by slice sampling on `(-1, 1)`.
pub fn sample_ar_params<R: Rng + ?Sized>(
    h: &[f64],
    config: &DhsConfig,
    state: &mut DhsState,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let m = h.len();
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log-volatilities".into()));
    }
    if state.phi.abs() >= 1.0 {
        return Err(Error::InvalidInput(format!("|phi| = {} is not below 1", state.phi.abs())));
    }
    let kappa = config.kappa();
    let xi = &state.pg_evol;
    let phi = state.phi;

    // mu_h: prior N(0, 1/xi_mu); e_1 term and (1 - phi) mu terms.
    let c = 1.0 - phi;
    let mut prec = state.pg_mu + xi[0];
    let mut lin = xi[0] * h[0] - kappa;
    for k in 1..m {
        prec += c * c * xi[k];
        lin += c * (xi[k] * (h[k] - phi * h[k - 1]) - kappa);
    }
    let mu = lin / prec + rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
    state.pg_mu = sample_polya_gamma(1.0, mu, rng)?;

    // phi: Beta prior on (phi + 1) / 2 times the Gaussian state equations.
    let (pa, pb) = config.phi_prior;
    let e: Vec<f64> = h.iter().map(|x| x - mu).collect();
    let log_target = |p: f64| -> f64 {
        let u = 0.5 * (p + 1.0);
        let mut lp = (pa - 1.0) * u.ln() + (pb - 1.0) * (1.0 - u).ln();
        for k in 1..m {
            let r = e[k] - p * e[k - 1] - kappa / xi[k];
            lp -= 0.5 * xi[k] * r * r;
        }
        lp
    };
    let phi_new = slice_sample_bounded(phi, -1.0, 1.0, log_target, rng);
    Ok((mu, phi_new))
}

/// Univariate slice sampler whose initial bracket is the whole open interval
/// `(lo, hi)`, shrunk towards the current point on rejection.
fn slice_sample_bounded<R: Rng + ?Sized>(
    x0: f64,
    lo: f64,
    hi: f64,
    log_f: impl Fn(f64) -> f64,
    rng: &mut R,
) -> f64 {
    let level = log_f(x0) + (1.0 - rng.random::<f64>()).ln();
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let x = a + (b - a) * rng.random::<f64>();
        if x > lo && x < hi && log_f(x) > level {
            return x;
        }
        if x < x0 {
            a = x;
        } else {
            b = x;
        }
    }
    x0
}

/// `lambda0^{-2} ~ Gamma(shape + 1, rate + (b_1^2 + b_K^2) / 2)` and returns
/// `lambda0`.
pub fn sample_lambda0<R: Rng + ?Sized>(boundary: (f64, f64), prior: (f64, f64), rng: &mut R) -> Result<f64> {
    if !boundary.0.is_finite() || !boundary.1.is_finite() {
        return Err(Error::NonFinite("boundary coefficients".into()));
    }
    let (shape, rate) = lambda0_conditional(boundary, prior);
    let prec = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .sample(rng);
    Ok(prec.max(f64::MIN_POSITIVE).recip().sqrt())
}

/// Shape and rate of the Gamma full conditional of `lambda0^{-2}`.
pub fn lambda0_conditional(boundary: (f64, f64), prior: (f64, f64)) -> (f64, f64) {
    (
        prior.0 + 1.0,
        prior.1 + 0.5 * (boundary.0 * boundary.0 + boundary.1 * boundary.1),
    )
}
