//! The Gibbs sampler for the reduced model
//!
//! ```text
//! y = Z alpha + X** B* + sum_a W_a theta_a + eps,   eps ~ N(0, sigma^2 I)
//! ```
//!
//! where `Z` holds the scalar covariates (intercept last, flat prior), `X**`
//! the functional design rows and each `W_a` an adaptive-spline term. Every
//! spline block has coefficients `B` with `D B ~ N(0, diag(lambda0^2,
//! lambda_2^2, ..., lambda_{K-1}^2, lambda0^2))`; the interior scales follow
//! the dynamic horseshoe or one of the two P-spline baselines.
//!
//! Cross-products between blocks are computed once per fit, so block updates
//! cost O(K^2) independent of `n`; only the residual sum of squares touches
//! the data each sweep.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{second_diff, BSplineBasis, SecondDiffOperator};
use crate::dhs::{sample_lambda0, DhsConfig, DhsState};
use crate::funcdata::RegressionDesign;
use crate::linalg::sample_canonical;
use crate::stats::quantile_sorted;
use crate::{Error, Result};

/// Shrinkage prior on the interior second differences of a spline block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PriorKind {
    #[default]
    #[serde(rename = "dhs")]
    Dhs,
    /// One common `lambda^2` for every interior difference.
    #[serde(rename = "pspline")]
    GlobalPspline,
    /// Independent `lambda_k^2`.
    #[serde(rename = "local-pspline")]
    LocalPspline,
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Dhs => "dhs",
            PriorKind::GlobalPspline => "pspline",
            PriorKind::LocalPspline => "local-pspline",
        }
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dhs" => Ok(PriorKind::Dhs),
            "pspline" => Ok(PriorKind::GlobalPspline),
            "local-pspline" => Ok(PriorKind::LocalPspline),
            other => Err(Error::Config(format!(
                "unknown prior `{other}` (expected dhs, pspline or local-pspline)"
            ))),
        }
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `Gamma(shape, rate)` prior on a precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub const DIFFUSE: GammaPrior = GammaPrior { shape: 0.01, rate: 0.01 };

    fn validate(&self, what: &str) -> Result<()> {
        if self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what} prior needs positive shape and rate, got ({}, {})",
                self.shape, self.rate
            )))
        }
    }

    /// Draws the variance `1 / G` where `G ~ Gamma(shape + extra_shape, rate +
    /// extra_rate)`.
    fn sample_variance<R: Rng + ?Sized>(&self, extra_shape: f64, extra_rate: f64, rng: &mut R) -> Result<f64> {
        let shape = self.shape + extra_shape;
        let rate = self.rate + extra_rate;
        let g = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| Error::InvalidInput(format!("gamma({shape}, {rate}): {e}")))?
            .sample(rng);
        Ok(g.max(f64::MIN_POSITIVE).recip())
    }
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self::DIFFUSE
    }
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub prior: PriorKind,
    pub burnin: usize,
    pub draws: usize,
    pub thin: usize,
    pub seed: u64,
    /// Prior on `sigma^-2`.
    pub sigma_prior: GammaPrior,
    /// Prior on each `sigma_j^-2` of the penalized scalar covariates.
    pub alpha_prior: GammaPrior,
    /// Prior on `lambda^-2` (P-spline variants).
    pub lambda_prior: GammaPrior,
    /// Prior on `lambda0^-2`.
    pub lambda0_prior: GammaPrior,
    /// Prior variance of the intercept; `None` is the flat prior.
    pub intercept_var: Option<f64>,
    pub dhs: DhsConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            prior: PriorKind::Dhs,
            burnin: 10_000,
            draws: 10_000,
            thin: 1,
            seed: 0,
            sigma_prior: GammaPrior::DIFFUSE,
            alpha_prior: GammaPrior::DIFFUSE,
            lambda_prior: GammaPrior::DIFFUSE,
            lambda0_prior: GammaPrior::DIFFUSE,
            intercept_var: None,
            dhs: DhsConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burnin < 1 || self.draws < 1 || self.thin < 1 {
            return Err(Error::Config(format!(
                "burnin, draws and thin must be at least 1 (got {}, {}, {})",
                self.burnin, self.draws, self.thin
            )));
        }
        self.sigma_prior.validate("sigma")?;
        self.alpha_prior.validate("alpha")?;
        self.lambda_prior.validate("lambda")?;
        self.lambda0_prior.validate("lambda0")?;
        if let Some(v) = self.intercept_var {
            if !(v > 0.0) {
                return Err(Error::Config(format!("intercept variance must be positive, got {v}")));
            }
        }
        self.dhs.validate()
    }
}

/// Local scales of one spline block.
#[derive(Debug, Clone, PartialEq)]
pub enum Shrinkage {
    Dhs(DhsState),
    Global { lambda2: f64, lambda0: f64 },
    Local { lambda2: Vec<f64>, lambda0: f64 },
}

impl Shrinkage {
    pub fn lambda0(&self) -> f64 {
        match self {
            Shrinkage::Dhs(s) => s.lambda0,
            Shrinkage::Global { lambda0, .. } | Shrinkage::Local { lambda0, .. } => *lambda0,
        }
    }

    fn set_lambda0(&mut self, v: f64) {
        match self {
            Shrinkage::Dhs(s) => s.lambda0 = v,
            Shrinkage::Global { lambda0, .. } | Shrinkage::Local { lambda0, .. } => *lambda0 = v,
        }
    }

    /// Prior variances of `D B`, boundary entries first and last.
    pub fn prior_var(&self, k: usize) -> Vec<f64> {
        let l0 = self.lambda0().powi(2);
        let mut v = Vec::with_capacity(k);
        v.push(l0);
        match self {
            Shrinkage::Dhs(s) => v.extend(s.interior_variances()),
            Shrinkage::Global { lambda2, .. } => v.extend(std::iter::repeat_n(*lambda2, k - 2)),
            Shrinkage::Local { lambda2, .. } => v.extend_from_slice(lambda2),
        }
        v.push(l0);
        v
    }

    fn initial(kind: PriorKind, pilot: &[f64]) -> Result<Self> {
        let var = if pilot.len() > 1 {
            crate::stats::variance(pilot).max(1e-8)
        } else {
            1.0
        };
        Ok(match kind {
            PriorKind::Dhs => Shrinkage::Dhs(DhsState::initialize(pilot)?),
            PriorKind::GlobalPspline => Shrinkage::Global { lambda2: var, lambda0: 1.0 },
            PriorKind::LocalPspline => Shrinkage::Local {
                lambda2: vec![var; pilot.len()],
                lambda0: 1.0,
            },
        })
    }

    /// Updates every scale given the block coefficients.
    fn update<R: Rng + ?Sized>(&mut self, coeffs: &[f64], d: &SecondDiffOperator, cfg: &FitConfig, rng: &mut R) -> Result<()> {
        let w = d.interior(coeffs);
        match self {
            Shrinkage::Dhs(s) => s.update(&w, &cfg.dhs, rng)?,
            Shrinkage::Global { lambda2, .. } => {
                let ss: f64 = w.iter().map(|x| x * x).sum();
                *lambda2 = cfg.lambda_prior.sample_variance(0.5 * w.len() as f64, 0.5 * ss, rng)?;
            }
            Shrinkage::Local { lambda2, .. } => {
                for (l, wk) in lambda2.iter_mut().zip(&w) {
                    *l = cfg.lambda_prior.sample_variance(0.5, 0.5 * wk * wk, rng)?;
                }
            }
        }
        let k = coeffs.len();
        let l0 = sample_lambda0(
            (coeffs[0], coeffs[k - 1]),
            (cfg.lambda0_prior.shape, cfg.lambda0_prior.rate),
            rng,
        )?;
        self.set_lambda0(l0);
        Ok(())
    }
}

/// Gaussian full conditional in canonical form.
#[derive(Debug, Clone)]
pub struct BlockConditional {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl BlockConditional {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, context: &str) -> Result<DVector<f64>> {
        sample_canonical(&self.precision, &self.linear, rng, context)
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        let chol = crate::linalg::cholesky_with_jitter(&self.precision, "conditional mean")?;
        Ok(chol.solve(&self.linear))
    }
}

/// Conditional of spline coefficients: `Q = X'X / sigma^2 + D' Lambda^-1 D`,
/// `l = X' y_c / sigma^2`, where `y_c` excludes this block's contribution.
pub fn b_star_conditional(
    xtx: &DMatrix<f64>,
    xty_c: &DVector<f64>,
    sigma2: f64,
    prior_var: &[f64],
    d: &SecondDiffOperator,
) -> BlockConditional {
    let mut precision = xtx / sigma2;
    d.add_weighted_gram(prior_var, &mut precision);
    BlockConditional {
        precision,
        linear: xty_c / sigma2,
    }
}

/// Conditional of scalar effects: `Q = Z'Z / sigma^2 + diag(1 / prior_var)`
/// with infinite prior variance meaning a flat prior.
pub fn alpha_conditional(ztz: &DMatrix<f64>, zty_c: &DVector<f64>, sigma2: f64, prior_var: &[f64]) -> BlockConditional {
    let mut precision = ztz / sigma2;
    for (j, v) in prior_var.iter().enumerate() {
        precision[(j, j)] += 1.0 / v;
    }
    BlockConditional {
        precision,
        linear: zty_c / sigma2,
    }
}

/// `sigma^2` given the residual sum of squares, and the `sigma_j^2` of the
/// penalized scalar effects.
pub fn sample_variances<R: Rng + ?Sized>(
    ssr: f64,
    n: usize,
    penalized_alpha: &[f64],
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if !ssr.is_finite() || ssr < 0.0 {
        return Err(Error::NonFinite(format!("residual sum of squares {ssr}")));
    }
    let sigma2 = sigma2_conditional(ssr, n, &cfg.sigma_prior).sample_variance(0.0, 0.0, rng)?;
    let sj = penalized_alpha
        .iter()
        .map(|&a| sigma_j2_conditional(a, &cfg.alpha_prior).sample_variance(0.0, 0.0, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((sigma2, sj))
}

/// Gamma full conditional of `sigma^-2`.
pub fn sigma2_conditional(ssr: f64, n: usize, prior: &GammaPrior) -> GammaPrior {
    GammaPrior {
        shape: prior.shape + 0.5 * n as f64,
        rate: prior.rate + 0.5 * ssr,
    }
}

/// Gamma full conditional of `sigma_j^-2` given the effect `alpha_j`.
pub fn sigma_j2_conditional(alpha_j: f64, prior: &GammaPrior) -> GammaPrior {
    GammaPrior {
        shape: prior.shape + 0.5,
        rate: prior.rate + 0.5 * alpha_j * alpha_j,
    }
}

/// Current values of every unknown in one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Scalar effects, intercept last.
    pub alpha: DVector<f64>,
    /// Prior variances of the penalized scalar effects.
    pub sigma_j2: Vec<f64>,
    pub sigma2: f64,
    /// `B*` first, then one entry per adaptive term.
    pub splines: Vec<DVector<f64>>,
    pub shrinkage: Vec<Shrinkage>,
}

/// Precomputed cross-products and the fixed-scan sweep.
pub struct Sampler<'a> {
    design: &'a RegressionDesign,
    config: FitConfig,
    y: DVector<f64>,
    /// Block 0 is `Z`, block 1 is `X**`, then the adaptive terms.
    gram: Vec<Vec<DMatrix<f64>>>,
    xty: Vec<DVector<f64>>,
    diffs: Vec<SecondDiffOperator>,
}

impl<'a> Sampler<'a> {
    pub fn new(design: &'a RegressionDesign, config: FitConfig) -> Result<Self> {
        config.validate()?;
        let n = design.n();
        if n == 0 {
            return Err(Error::InvalidInput("empty design".into()));
        }
        if design.z.nrows() != n || design.x_ss.nrows() != n {
            return Err(Error::Dimension("design blocks disagree on n".into()));
        }
        for a in &design.adaptive {
            if a.design.nrows() != n {
                return Err(Error::Dimension(format!("adaptive term `{}` has wrong row count", a.name)));
            }
        }
        let kb = design.x_ss.ncols();
        if kb < 4 {
            return Err(Error::Config(format!("K_B must be at least 4, got {kb}")));
        }
        let mut blocks: Vec<&DMatrix<f64>> = vec![&design.z, &design.x_ss];
        blocks.extend(design.adaptive.iter().map(|a| &a.design));
        let gram = blocks
            .iter()
            .map(|xj| blocks.iter().map(|xl| xj.transpose() * *xl).collect())
            .collect();
        let mut diffs = Vec::new();
        for b in &blocks[1..] {
            diffs.push(second_diff(b.ncols())?);
        }
        let mut s = Self {
            design,
            config,
            y: design.y.clone(),
            gram,
            xty: Vec::new(),
            diffs,
        };
        s.set_response(design.y.clone())?;
        Ok(s)
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    fn blocks(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        [&self.design.z, &self.design.x_ss]
            .into_iter()
            .chain(self.design.adaptive.iter().map(|a| &a.design))
    }

    /// Replaces the response vector.
    pub fn set_response(&mut self, y: DVector<f64>) -> Result<()> {
        if y.len() != self.design.n() {
            return Err(Error::Dimension(format!("{} responses for {} rows", y.len(), self.design.n())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("responses".into()));
        }
        self.xty = self.blocks().map(|x| x.tr_mul(&y)).collect();
        self.y = y;
        Ok(())
    }

    fn alpha_prior_var(&self, state: &ChainState) -> Vec<f64> {
        let mut v = state.sigma_j2.clone();
        v.push(self.config.intercept_var.unwrap_or(f64::INFINITY));
        v
    }

    fn coeffs<'s>(&self, state: &'s ChainState, j: usize) -> &'s DVector<f64> {
        if j == 0 {
            &state.alpha
        } else {
            &state.splines[j - 1]
        }
    }

    /// `X_j' (y - sum_{l != j} X_l theta_l)`.
    fn partial_xty(&self, state: &ChainState, j: usize) -> DVector<f64> {
        let mut r = self.xty[j].clone();
        for l in 0..self.xty.len() {
            if l != j {
                r -= &self.gram[j][l] * self.coeffs(state, l);
            }
        }
        r
    }

    /// `sum_l X_l theta_l`.
    pub fn fitted(&self, state: &ChainState) -> DVector<f64> {
        let mut f = &self.design.z * &state.alpha;
        for (x, c) in self.blocks().skip(1).zip(&state.splines) {
            f += x * c;
        }
        f
    }

    /// Ridge start with unit penalty on `D'D`, `sigma^2 = var(y)`.
    pub fn initial_state(&self) -> Result<ChainState> {
        let n = self.design.n();
        let p = self.design.p();
        let ybar = self.y.mean();
        let mut alpha = DVector::zeros(p);
        alpha[p - 1] = ybar;
        let yc = self.y.add_scalar(-ybar);
        let mut splines = Vec::new();
        let mut shrinkage = Vec::new();
        for (j, x) in self.blocks().enumerate().skip(1) {
            let d = &self.diffs[j - 1];
            let ones = vec![1.0; x.ncols()];
            let cond = b_star_conditional(&self.gram[j][j], &x.tr_mul(&yc), 1.0, &ones, d);
            let b = cond.mean()?;
            shrinkage.push(Shrinkage::initial(self.config.prior, &d.interior(b.as_slice()))?);
            splines.push(b);
        }
        let var = if n > 1 { crate::stats::variance(self.y.as_slice()) } else { 1.0 };
        Ok(ChainState {
            alpha,
            sigma_j2: vec![1.0; p - 1],
            sigma2: if var > 0.0 { var } else { 1.0 },
            splines,
            shrinkage,
        })
    }

    /// One sweep in the order `B*`, adaptive terms, `alpha`, local scales and
    /// AR parameters, `lambda0`, variances.
    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R, iteration: usize) -> Result<()> {
        let fail = |e: Error| match e {
            Error::Sampler { .. } => e,
            other => Error::Sampler {
                iteration,
                reason: other.to_string(),
            },
        };
        for j in 1..self.xty.len() {
            let k = state.splines[j - 1].len();
            let pv = state.shrinkage[j - 1].prior_var(k);
            let cond = b_star_conditional(&self.gram[j][j], &self.partial_xty(state, j), state.sigma2, &pv, &self.diffs[j - 1]);
            let ctx = if j == 1 { "B* full conditional" } else { "adaptive-term full conditional" };
            state.splines[j - 1] = cond.sample(rng, ctx).map_err(fail)?;
        }
        let cond = alpha_conditional(&self.gram[0][0], &self.partial_xty(state, 0), state.sigma2, &self.alpha_prior_var(state));
        state.alpha = cond.sample(rng, "alpha full conditional").map_err(fail)?;
        for (j, sh) in state.shrinkage.iter_mut().enumerate() {
            sh.update(state.splines[j].as_slice(), &self.diffs[j], &self.config, rng).map_err(fail)?;
        }
        let resid = &self.y - self.fitted(state);
        let ssr = resid.norm_squared();
        let p = state.alpha.len();
        let (s2, sj) = sample_variances(ssr, self.design.n(), &state.alpha.as_slice()[..p - 1], &self.config, rng).map_err(fail)?;
        state.sigma2 = s2;
        state.sigma_j2 = sj;
        if !state.sigma2.is_finite()
            || state.alpha.iter().any(|v| !v.is_finite())
            || state.splines.iter().any(|b| b.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Sampler {
                iteration,
                reason: "non-finite parameter after sweep".into(),
            });
        }
        Ok(())
    }

    /// Exact joint draw of every unknown from the prior. Needs a proper
    /// intercept prior.
    pub fn sample_prior_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ChainState> {
        let cfg = &self.config;
        let iv = cfg.intercept_var.ok_or_else(|| Error::Config("prior draws need a proper intercept prior".into()))?;
        let p = self.design.p();
        let sigma2 = cfg.sigma_prior.sample_variance(0.0, 0.0, rng)?;
        let sigma_j2 = (0..p - 1)
            .map(|_| cfg.alpha_prior.sample_variance(0.0, 0.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut alpha = DVector::zeros(p);
        for j in 0..p - 1 {
            alpha[j] = sigma_j2[j].sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        alpha[p - 1] = iv.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let mut splines = Vec::new();
        let mut shrinkage = Vec::new();
        for d in &self.diffs {
            let k = d.dim();
            let l0 = cfg.lambda0_prior.sample_variance(0.0, 0.0, rng)?.sqrt();
            let sh = match cfg.prior {
                PriorKind::Dhs => {
                    let mut s = DhsState::sample_prior(k - 2, &cfg.dhs, (cfg.lambda0_prior.shape, cfg.lambda0_prior.rate), rng)?;
                    s.lambda0 = l0;
                    Shrinkage::Dhs(s)
                }
                PriorKind::GlobalPspline => Shrinkage::Global {
                    lambda2: cfg.lambda_prior.sample_variance(0.0, 0.0, rng)?,
                    lambda0: l0,
                },
                PriorKind::LocalPspline => Shrinkage::Local {
                    lambda2: (0..k - 2)
                        .map(|_| cfg.lambda_prior.sample_variance(0.0, 0.0, rng))
                        .collect::<Result<Vec<_>>>()?,
                    lambda0: l0,
                },
            };
            let w: Vec<f64> = sh
                .prior_var(k)
                .iter()
                .map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            splines.push(DVector::from_vec(d.solve(&w)));
            shrinkage.push(sh);
        }
        Ok(ChainState {
            alpha,
            sigma_j2,
            sigma2,
            splines,
            shrinkage,
        })
    }

    /// Draws `y ~ N(fitted, sigma^2 I)` under the given state.
    pub fn simulate_response<R: Rng + ?Sized>(&self, state: &ChainState, rng: &mut R) -> DVector<f64> {
        let s = state.sigma2.sqrt();
        self.fitted(state).map(|m| m + s * rng.sample::<f64, _>(StandardNormal))
    }
}

/// Stored posterior draws; each matrix has one row per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub prior: PriorKind,
    pub seed: u64,
    pub b_star: DMatrix<f64>,
    /// Intercept in the last column.
    pub alpha: DMatrix<f64>,
    pub sigma2: Vec<f64>,
    pub sigma_j2: DMatrix<f64>,
    pub adaptive: Vec<DMatrix<f64>>,
    /// Log-volatilities of the `B*` block (DHS only).
    pub h: Option<DMatrix<f64>>,
    pub mu_h: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda0: Vec<f64>,
    /// Posterior mean of the fitted values `y_hat_i`.
    pub fitted_mean: DVector<f64>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.sigma2.len()
    }

    pub fn b_star_draw(&self, s: usize) -> DVector<f64> {
        self.b_star.row(s).transpose()
    }

    pub fn b_star_mean(&self) -> DVector<f64> {
        self.b_star.row_mean().transpose()
    }

    pub fn alpha_mean(&self) -> DVector<f64> {
        self.alpha.row_mean().transpose()
    }

    /// `Z alpha^(s) + sum_a W_a theta_a^(s)`: everything but the functional term.
    pub fn adjustment_draw(&self, design: &RegressionDesign, s: usize) -> DVector<f64> {
        let mut out = &design.z * self.alpha.row(s).transpose();
        for (a, d) in design.adaptive.iter().zip(&self.adaptive) {
            out += &a.design * d.row(s).transpose();
        }
        out
    }

    /// Posterior mean of the adjustment.
    pub fn adjustment_mean(&self, design: &RegressionDesign) -> DVector<f64> {
        let mut out = &design.z * self.alpha_mean();
        for (a, d) in design.adaptive.iter().zip(&self.adaptive) {
            out += &a.design * d.row_mean().transpose();
        }
        out
    }

    pub fn check_design(&self, design: &RegressionDesign) -> Result<()> {
        if self.b_star.ncols() != design.x_ss.ncols()
            || self.alpha.ncols() != design.p()
            || self.adaptive.len() != design.adaptive.len()
            || self.fitted_mean.len() != design.n()
        {
            return Err(Error::Dimension("posterior draws do not match the design".into()));
        }
        Ok(())
    }
}

/// Runs the chain with a generator seeded from `config.seed`.
pub fn fit(design: &RegressionDesign, config: &FitConfig) -> Result<PosteriorDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    fit_with_rng(design, config, &mut rng)
}

pub fn fit_with_rng<R: Rng + ?Sized>(design: &RegressionDesign, config: &FitConfig, rng: &mut R) -> Result<PosteriorDraws> {
    let sampler = Sampler::new(design, config.clone())?;
    let mut state = sampler.initial_state()?;
    let s_total = config.draws;
    let kb = design.x_ss.ncols();
    let p = design.p();
    let mut out = PosteriorDraws {
        prior: config.prior,
        seed: config.seed,
        b_star: DMatrix::zeros(s_total, kb),
        alpha: DMatrix::zeros(s_total, p),
        sigma2: Vec::with_capacity(s_total),
        sigma_j2: DMatrix::zeros(s_total, p - 1),
        adaptive: design.adaptive.iter().map(|a| DMatrix::zeros(s_total, a.design.ncols())).collect(),
        h: (config.prior == PriorKind::Dhs).then(|| DMatrix::zeros(s_total, kb - 2)),
        mu_h: Vec::new(),
        phi: Vec::new(),
        lambda0: Vec::with_capacity(s_total),
        fitted_mean: DVector::zeros(design.n()),
    };
    let total = config.burnin + s_total * config.thin;
    let mut s = 0;
    for it in 0..total {
        sampler.sweep(&mut state, rng, it)?;
        if it < config.burnin || (it - config.burnin) % config.thin != 0 {
            continue;
        }
        out.b_star.set_row(s, &state.splines[0].transpose());
        out.alpha.set_row(s, &state.alpha.transpose());
        out.sigma2.push(state.sigma2);
        for (j, v) in state.sigma_j2.iter().enumerate() {
            out.sigma_j2[(s, j)] = *v;
        }
        for (m, b) in out.adaptive.iter_mut().zip(&state.splines[1..]) {
            m.set_row(s, &b.transpose());
        }
        let sh = &state.shrinkage[0];
        out.lambda0.push(sh.lambda0());
        if let (Some(h), Shrinkage::Dhs(d)) = (out.h.as_mut(), sh) {
            for (k, v) in d.h.iter().enumerate() {
                h[(s, k)] = *v;
            }
            out.mu_h.push(d.mu_h);
            out.phi.push(d.phi);
        }
        out.fitted_mean += sampler.fitted(&state);
        s += 1;
    }
    out.fitted_mean /= s_total as f64;
    Ok(out)
}

/// Pointwise posterior summary of `beta(t)` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower50: Vec<f64>,
    pub upper50: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

impl BetaSummary {
    pub fn mean_width95(&self) -> f64 {
        let n = self.grid.len() as f64;
        self.lower95.iter().zip(&self.upper95).map(|(l, u)| u - l).sum::<f64>() / n
    }
}

/// Pointwise mean and equal-tailed 50% and 95% intervals of the curves
/// `psi(t)' B*^(s)`.
pub fn summarize_beta(b_star: &DMatrix<f64>, basis: &BSplineBasis, grid: &[f64]) -> Result<BetaSummary> {
    let s_total = b_star.nrows();
    if s_total == 0 {
        return Err(Error::InvalidInput("no posterior draws to summarize".into()));
    }
    if b_star.ncols() != basis.n_basis() {
        return Err(Error::Dimension(format!(
            "{} coefficients per draw for a basis of size {}",
            b_star.ncols(),
            basis.n_basis()
        )));
    }
    // (grid x K) * (K x S): one column of curve values per draw.
    let curves = basis.design_matrix(grid)? * b_star.transpose();
    let mut out = BetaSummary {
        grid: grid.to_vec(),
        mean: Vec::with_capacity(grid.len()),
        lower50: Vec::with_capacity(grid.len()),
        upper50: Vec::with_capacity(grid.len()),
        lower95: Vec::with_capacity(grid.len()),
        upper95: Vec::with_capacity(grid.len()),
    };
    let mut row = vec![0.0; s_total];
    for g in 0..grid.len() {
        for (s, v) in row.iter_mut().enumerate() {
            *v = curves[(g, s)];
        }
        out.mean.push(row.iter().sum::<f64>() / s_total as f64);
        row.sort_by(|a, b| a.total_cmp(b));
        out.lower50.push(quantile_sorted(&row, 0.25));
        out.upper50.push(quantile_sorted(&row, 0.75));
        out.lower95.push(quantile_sorted(&row, 0.025));
        out.upper95.push(quantile_sorted(&row, 0.975));
    }
    Ok(out)
}

/// One posterior predictive draw `y~^(s) = Z alpha^(s) + X** B*^(s) + ... +
/// N(0, sigma2^(s))`.
pub fn predictive_draw<R: Rng + ?Sized>(draws: &PosteriorDraws, design: &RegressionDesign, s: usize, rng: &mut R) -> DVector<f64> {
    let sd = draws.sigma2[s].sqrt();
    let mean = &design.x_ss * draws.b_star_draw(s) + draws.adjustment_draw(design, s);
    mean.map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
}

/// All predictive draws, one row per posterior draw.
pub fn predictive_draws<R: Rng + ?Sized>(draws: &PosteriorDraws, design: &RegressionDesign, rng: &mut R) -> Result<DMatrix<f64>> {
    draws.check_design(design)?;
    let mut out = DMatrix::zeros(draws.n_draws(), design.n());
    for s in 0..draws.n_draws() {
        out.set_row(s, &predictive_draw(draws, design, s, rng).transpose());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Domain;
    use crate::funcdata::AdaptiveBlock;
    use crate::stats::{mean, std_error};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gaussian_matrix(r: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| r.sample::<f64, _>(StandardNormal))
    }

    /// A design with random functional rows and `p - 1` random covariates.
    pub(crate) fn toy_design(n: usize, kb: usize, p: usize, seed: u64) -> RegressionDesign {
        let mut r = rng(seed);
        let mut z = gaussian_matrix(&mut r, n, p);
        for i in 0..n {
            z[(i, p - 1)] = 1.0;
        }
        let x_ss = gaussian_matrix(&mut r, n, kb);
        let y = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        RegressionDesign {
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            y,
            z,
            z_names: (0..p).map(|j| if j + 1 == p { "(intercept)".into() } else { format!("z{j}") }).collect(),
            scalings: Vec::new(),
            x_ss,
            basis_b: BSplineBasis::cubic(Domain::new(0.0, 1.0).unwrap(), kb).unwrap(),
            domains: vec![Domain::new(0.0, 1.0).unwrap(); n],
            adaptive: Vec::new(),
        }
    }

    #[test]
    fn prior_kind_round_trip() {
        for k in [PriorKind::Dhs, PriorKind::GlobalPspline, PriorKind::LocalPspline] {
            assert_eq!(k.name().parse::<PriorKind>().unwrap(), k);
        }
        assert!("ridge".parse::<PriorKind>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = FitConfig::default();
        assert_eq!((c.burnin, c.draws, c.thin), (10_000, 10_000, 1));
        assert!(c.validate().is_ok());
        assert!(FitConfig { draws: 0, ..c.clone() }.validate().is_err());
        let bad = FitConfig {
            sigma_prior: GammaPrior { shape: 0.0, rate: 1.0 },
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn b_star_prior_only_covariance() {
        let k = 5;
        let d = second_diff(k).unwrap();
        let cond = b_star_conditional(&DMatrix::zeros(k, k), &DVector::zeros(k), 1.0, &vec![1.0; k], &d);
        let dd = d.to_dense();
        let want = (dd.transpose() * &dd).try_inverse().unwrap();
        assert!((&cond.precision - dd.transpose() * &dd).amax() < 1e-12);
        let mut r = rng(1);
        let n = 100_000;
        let mut second = DMatrix::zeros(k, k);
        for _ in 0..n {
            let x = cond.sample(&mut r, "prior").unwrap();
            second += &x * x.transpose();
        }
        second /= n as f64;
        for i in 0..k {
            for j in 0..k {
                let w = want[(i, j)];
                let tol = 0.05 * w.abs().max(0.1 * (want[(i, i)] * want[(j, j)]).sqrt());
                assert!((second[(i, j)] - w).abs() < tol, "({i},{j}) {} vs {w}", second[(i, j)]);
            }
        }
    }

    #[test]
    fn b_star_conditional_matches_dense_oracle() {
        let mut r = rng(2);
        let (n, k) = (10, 6);
        let x = gaussian_matrix(&mut r, n, k);
        let y = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let sigma2 = 0.7;
        let pv: Vec<f64> = (0..k).map(|j| 0.5 + j as f64).collect();
        let d = second_diff(k).unwrap();
        let cond = b_star_conditional(&(x.transpose() * &x), &x.tr_mul(&y), sigma2, &pv, &d);
        let dd = d.to_dense();
        let lam_inv = DMatrix::from_diagonal(&DVector::from_iterator(k, pv.iter().map(|v| 1.0 / v)));
        let q = x.transpose() * &x / sigma2 + dd.transpose() * lam_inv * &dd;
        let l = x.transpose() * &y / sigma2;
        assert!((&cond.precision - &q).amax() < 1e-10);
        let want = q.try_inverse().unwrap() * l;
        assert!((cond.mean().unwrap() - want).amax() < 1e-10);
    }

    #[test]
    fn b_star_small_noise_approaches_least_squares() {
        let mut r = rng(3);
        let (n, k) = (40, 6);
        let x = gaussian_matrix(&mut r, n, k);
        let y = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let d = second_diff(k).unwrap();
        let cond = b_star_conditional(&(x.transpose() * &x), &x.tr_mul(&y), 1e-8, &vec![1.0; k], &d);
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.tr_mul(&y);
        assert!((cond.mean().unwrap() - ols).amax() < 1e-6);
    }

    #[test]
    fn alpha_intercept_only_and_degenerate_prior() {
        let n = 50;
        let z = DMatrix::from_element(n, 1, 1.0);
        let y = DVector::from_fn(n, |i, _| (i as f64).sin() + 2.0);
        let cond = alpha_conditional(&(z.transpose() * &z), &z.tr_mul(&y), 0.5, &[f64::INFINITY]);
        assert!((cond.mean().unwrap()[0] - y.mean()).abs() < 1e-12);
        assert!((cond.precision[(0, 0)] - n as f64 / 0.5).abs() < 1e-12);

        let mut r = rng(4);
        let z = gaussian_matrix(&mut r, n, 3);
        let cond = alpha_conditional(&(z.transpose() * &z), &z.tr_mul(&y), 1.0, &[1.0, 1e-14, 1e8]);
        let draws: Vec<f64> = (0..200).map(|_| cond.sample(&mut r, "a").unwrap()[1]).collect();
        assert!(draws.iter().all(|a| a.abs() < 1e-5));
    }

    #[test]
    fn alpha_orthonormal_design_large_prior_is_ols() {
        let mut r = rng(5);
        let z = gaussian_matrix(&mut r, 30, 3);
        let q = z.clone().qr().q();
        let y = DVector::from_fn(30, |_, _| r.sample::<f64, _>(StandardNormal));
        let cond = alpha_conditional(&(q.transpose() * &q), &q.tr_mul(&y), 1.0, &[1e12; 3]);
        assert!((cond.mean().unwrap() - q.tr_mul(&y)).amax() < 1e-9);
    }

    #[test]
    fn variance_updates_match_gamma_moments() {
        let mut r = rng(6);
        let cfg = FitConfig::default();
        let n = 20;
        // Zero residuals: sigma^-2 ~ Gamma(0.01 + n/2, 0.01); alpha_j = 0:
        // sigma_j^-2 ~ Gamma(0.51, 0.01).
        let (mut p1, mut p2) = (Vec::new(), Vec::new());
        for _ in 0..40_000 {
            let (s2, sj) = sample_variances(0.0, n, &[0.0], &cfg, &mut r).unwrap();
            p1.push(1.0 / s2);
            p2.push(1.0 / sj[0]);
        }
        assert!((mean(&p1) - 10.01 / 0.01).abs() < 3.0 * std_error(&p1));
        assert!((mean(&p2) - 0.51 / 0.01).abs() < 3.0 * std_error(&p2));
        // Fixed residuals: E[sigma^2] = (b0 + SSR/2) / (a0 + n/2 - 1).
        let ssr = 37.0;
        let s: Vec<f64> = (0..40_000)
            .map(|_| sample_variances(ssr, n, &[], &cfg, &mut r).unwrap().0)
            .collect();
        let want = (0.01 + ssr / 2.0) / (0.01 + n as f64 / 2.0 - 1.0);
        assert!((mean(&s) - want).abs() < 3.0 * std_error(&s));
        assert!(sample_variances(f64::NAN, n, &[], &cfg, &mut r).is_err());
    }

    #[test]
    fn fixed_scale_subsampler_matches_conjugate_mean() {
        // Intercept-free block sampling with Lambda and sigma^2 held fixed.
        let design = toy_design(20, 5, 1, 7);
        let cfg = FitConfig::default();
        let sampler = Sampler::new(&design, cfg).unwrap();
        let mut st = sampler.initial_state().unwrap();
        st.alpha[0] = 0.3;
        st.sigma2 = 0.8;
        let pv = vec![2.0; 5];
        let d = second_diff(5).unwrap();
        let yc = &design.y - &design.z * &st.alpha;
        let x = &design.x_ss;
        let q = x.transpose() * x / 0.8 + d.weighted_gram(&pv);
        let want = q.clone().try_inverse().unwrap() * x.tr_mul(&yc) / 0.8;
        let mut r = rng(8);
        let n = 20_000;
        let mut draws = vec![Vec::with_capacity(n); 5];
        for _ in 0..n {
            let cond = b_star_conditional(&sampler.gram[1][1], &sampler.partial_xty(&st, 1), st.sigma2, &pv, &d);
            let b = cond.sample(&mut r, "b").unwrap();
            for k in 0..5 {
                draws[k].push(b[k]);
            }
        }
        for k in 0..5 {
            assert!((mean(&draws[k]) - want[k]).abs() < 3.0 * std_error(&draws[k]));
        }
    }

    #[test]
    fn fit_produces_configured_draw_count() {
        let design = toy_design(60, 8, 2, 9);
        for prior in [PriorKind::Dhs, PriorKind::GlobalPspline, PriorKind::LocalPspline] {
            let cfg = FitConfig {
                prior,
                burnin: 50,
                draws: 40,
                thin: 2,
                seed: 1,
                ..Default::default()
            };
            let d = fit(&design, &cfg).unwrap();
            assert_eq!(d.n_draws(), 40);
            assert_eq!(d.b_star.nrows(), 40);
            assert!(d.sigma2.iter().all(|&s| s > 0.0));
            assert_eq!(d.h.is_some(), prior == PriorKind::Dhs);
            let again = fit(&design, &cfg).unwrap();
            assert_eq!(d, again);
        }
    }

    #[test]
    fn fit_handles_adaptive_terms() {
        let mut design = toy_design(80, 8, 1, 10);
        let basis = BSplineBasis::cubic(Domain::new(0.0, 1.0).unwrap(), 6).unwrap();
        let ts: Vec<f64> = (0..80).map(|i| i as f64 / 79.0).collect();
        let mut w = basis.design_matrix(&ts).unwrap();
        let means: Vec<f64> = w.column_iter().map(|c| c.mean()).collect();
        for (j, m) in means.iter().enumerate() {
            w.column_mut(j).add_scalar_mut(-m);
        }
        design.adaptive.push(AdaptiveBlock {
            name: "age".into(),
            basis,
            design: w,
            column_means: means,
        });
        let cfg = FitConfig { burnin: 20, draws: 20, ..Default::default() };
        let d = fit(&design, &cfg).unwrap();
        assert_eq!(d.adaptive.len(), 1);
        assert_eq!(d.adaptive[0].ncols(), 6);
    }

    #[test]
    fn summary_single_draw_and_sort_oracle() {
        let basis = BSplineBasis::cubic(Domain::new(0.0, 1.0).unwrap(), 6).unwrap();
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let b = DMatrix::from_row_slice(1, 6, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        let s = summarize_beta(&b, &basis, &grid).unwrap();
        for (g, t) in grid.iter().enumerate() {
            let v = basis.evaluate(b.row(0).transpose().as_slice(), *t).unwrap();
            assert!((s.mean[g] - v).abs() < 1e-12);
            assert_eq!(s.lower95[g], s.upper95[g]);
        }
        let mut r = rng(11);
        let many = gaussian_matrix(&mut r, 101, 6);
        let s = summarize_beta(&many, &basis, &grid).unwrap();
        let vals: Vec<f64> = (0..101)
            .map(|i| basis.evaluate(many.row(i).transpose().as_slice(), 0.3).unwrap())
            .collect();
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        // (n - 1) p with n = 101 hits order statistics exactly at 25% / 75%.
        assert!((s.lower50[3] - sorted[25]).abs() < 1e-12);
        assert!((s.upper50[3] - sorted[75]).abs() < 1e-12);
        assert!((s.lower95[3] - (sorted[2] + 0.5 * (sorted[3] - sorted[2]))).abs() < 1e-12);
        for g in 0..grid.len() {
            assert!(s.lower95[g] <= s.lower50[g] && s.lower50[g] <= s.upper50[g] && s.upper50[g] <= s.upper95[g]);
        }
        assert!(summarize_beta(&DMatrix::zeros(0, 6), &basis, &grid).is_err());
    }

    #[test]
    fn symmetric_draws_give_symmetric_interval() {
        let basis = BSplineBasis::cubic(Domain::new(0.0, 1.0).unwrap(), 5).unwrap();
        let mut r = rng(12);
        let half = gaussian_matrix(&mut r, 200, 5);
        let both = DMatrix::from_fn(400, 5, |i, j| if i < 200 { half[(i, j)] } else { -half[(i - 200, j)] });
        let s = summarize_beta(&both, &basis, &[0.5]).unwrap();
        assert!(s.mean[0].abs() < 1e-12);
        assert!((s.lower95[0] + s.upper95[0]).abs() < 1e-12);
    }

    #[test]
    fn predictive_draws_moments() {
        let design = toy_design(30, 6, 2, 13);
        let cfg = FitConfig { burnin: 200, draws: 2000, ..Default::default() };
        let d = fit(&design, &cfg).unwrap();
        let pred = predictive_draws(&d, &design, &mut rng(14)).unwrap();
        let mean_s2 = mean(&d.sigma2);
        for i in 0..design.n() {
            let col: Vec<f64> = pred.column(i).iter().copied().collect();
            assert!(crate::stats::variance(&col) >= mean_s2 * 0.9);
            assert!((mean(&col) - d.fitted_mean[i]).abs() < 3.0 * std_error(&col));
        }
        let mut zero = d.clone();
        zero.sigma2.iter_mut().for_each(|s| *s = 0.0);
        let y0 = predictive_draw(&zero, &design, 0, &mut rng(15));
        let want = &design.x_ss * d.b_star_draw(0) + d.adjustment_draw(&design, 0);
        assert!((y0 - want).amax() < 1e-12);
    }
}
