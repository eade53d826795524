//! Synthetic designs and evaluation metrics.
//!
//! Curves are Gaussian-process draws on a regular grid with a squared
//! exponential kernel and an optionally seasonal mean `sin(2 pi t / T + phi_i)`,
//! `phi_i ~ U(0, 1)`. Responses are `y_i = integral of X_i beta + eps_i` with
//! `sigma^2 = var(signal) / snr`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BSplineBasis, Domain};
use crate::decision::{analyze, ci_labels, labels_on_grid, DecisionConfig, Label, Partition};
use crate::funcdata::{build_design, fit_all_curves, CoefCurve, CurveObservation, ScalarDesignSpec, ScalarTable};
use crate::gibbs::{fit, summarize_beta, FitConfig, PriorKind};
use crate::linalg::cholesky_with_jitter;
use crate::{Error, Result};

/// Regular observation grid `lo, lo + h, ..., hi` with `points` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            points: 101,
        }
    }
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        let mut v: Vec<f64> = (0..self.points).map(|i| self.lo + h * i as f64).collect();
        v[self.points - 1] = self.hi;
        v
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::new(self.lo, self.hi)
    }
}

/// Gaussian-process covariate model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub seasonal: bool,
    pub period: f64,
    pub sigma_x: f64,
    pub length_scale: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            seasonal: true,
            period: 365.0 / 295.0,
            sigma_x: 0.7,
            length_scale: 0.01,
        }
    }
}

/// The smooth coefficient function with a positive bump at 1/3 and a negative
/// one at 2/3.
pub fn true_beta_smooth(t: f64) -> f64 {
    8.0 / (2.0 + (20.0 - 60.0 * t).exp() + (60.0 * t - 20.0).exp())
        - 12.0 / (2.0 + (40.0 - 60.0 * t).exp() + (60.0 * t - 40.0).exp())
}

/// True coefficient function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Truth {
    Smooth,
    /// `levels[j]` between consecutive breakpoints; one more level than
    /// breakpoints.
    LocallyConstant { breakpoints: Vec<f64>, levels: Vec<f64> },
    /// Linear interpolation of `(t, beta)` points, constant beyond the ends.
    Custom { points: Vec<(f64, f64)> },
}

impl Default for Truth {
    fn default() -> Self {
        Truth::Smooth
    }
}

impl Truth {
    /// Default locally constant truth: zero, then adjacent negative, positive
    /// and negative windows, then zero, on fifths of the unit interval.
    pub fn default_locally_constant() -> Self {
        Truth::LocallyConstant {
            breakpoints: vec![0.2, 0.4, 0.6, 0.8],
            levels: vec![0.0, -1.0, 1.0, -1.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Truth::Smooth => Ok(()),
            Truth::LocallyConstant { breakpoints, levels } => {
                if levels.len() != breakpoints.len() + 1 {
                    return Err(Error::Config(format!(
                        "{} levels for {} breakpoints (need one more level)",
                        levels.len(),
                        breakpoints.len()
                    )));
                }
                if breakpoints.windows(2).any(|w| w[1] <= w[0]) || levels.iter().chain(breakpoints).any(|v| !v.is_finite()) {
                    return Err(Error::Config("breakpoints must be finite and strictly increasing".into()));
                }
                Ok(())
            }
            Truth::Custom { points } => {
                if points.is_empty() || points.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::Config("custom truth needs points with increasing t".into()));
                }
                Ok(())
            }
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Truth::Smooth => true_beta_smooth(t),
            Truth::LocallyConstant { breakpoints, levels } => levels[breakpoints.partition_point(|&b| b <= t)],
            Truth::Custom { points } => {
                let j = points.partition_point(|p| p.0 <= t);
                if j == 0 {
                    points[0].1
                } else if j == points.len() {
                    points[j - 1].1
                } else {
                    let (a, b) = (points[j - 1], points[j]);
                    a.1 + (t - a.0) / (b.0 - a.0) * (b.1 - a.1)
                }
            }
        }
    }

    /// Points where the truth is not smooth.
    pub fn breaks(&self) -> Vec<f64> {
        match self {
            Truth::Smooth => Vec::new(),
            Truth::LocallyConstant { breakpoints, .. } => breakpoints.clone(),
            Truth::Custom { points } => points.iter().map(|p| p.0).collect(),
        }
    }
}

/// A synthetic design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationDesign {
    pub n: usize,
    pub snr: f64,
    pub grid: GridSpec,
    pub gp: GpConfig,
    pub truth: Truth,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        Self {
            n: 500,
            snr: 5.0,
            grid: GridSpec::default(),
            gp: GpConfig::default(),
            truth: Truth::Smooth,
            replicates: 1,
            seed: 0,
        }
    }
}

impl SimulationDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if self.grid.points < 2 || !(self.grid.hi > self.grid.lo) {
            return Err(Error::Config("grid needs at least two points on a nonempty interval".into()));
        }
        if !(self.gp.sigma_x >= 0.0 && self.gp.length_scale > 0.0 && self.gp.period > 0.0) {
            return Err(Error::Config("GP scales must be positive".into()));
        }
        self.truth.validate()
    }
}

/// Draws `n` curves on the grid.
pub fn gen_curves<R: Rng + ?Sized>(design: &SimulationDesign, rng: &mut R) -> Result<Vec<CurveObservation>> {
    design.validate()?;
    let grid = design.grid.values();
    let m = grid.len();
    let gp = &design.gp;
    let kern = DMatrix::from_fn(m, m, |i, j| {
        let d = grid[i] - grid[j];
        gp.sigma_x * gp.sigma_x * (-d * d / (2.0 * gp.length_scale * gp.length_scale)).exp()
    });
    let chol = if gp.sigma_x > 0.0 {
        Some(cholesky_with_jitter(&kern, "covariate kernel")?.l())
    } else {
        None
    };
    let domain = design.grid.domain()?;
    let mut out = Vec::with_capacity(design.n);
    for i in 0..design.n {
        let phase: f64 = rng.random();
        let mut x = DVector::from_fn(m, |j, _| {
            if gp.seasonal {
                (2.0 * PI * grid[j] / gp.period + phase).sin()
            } else {
                0.0
            }
        });
        if let Some(l) = &chol {
            let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            x += l * z;
        }
        out.push(CurveObservation {
            subject_id: format!("s{:06}", i + 1),
            points: grid.iter().copied().zip(x.iter().copied()).collect(),
            domain,
        });
    }
    Ok(out)
}

/// Noiseless signal `integral over T_i of X_i beta` for each smoothed curve,
/// with Gauss rules split at the truth's breakpoints.
pub fn signals(curves: &[CoefCurve], truth: &Truth) -> Result<Vec<f64>> {
    let breaks = truth.breaks();
    curves
        .iter()
        .map(|c| c.basis.integrate_against(&c.coeffs, &c.domain, &breaks, 10, |t| truth.value(t)))
        .collect()
}

/// Trapezoid-rule signal on the raw observations, for independent checks.
pub fn signal_trapezoid(obs: &CurveObservation, truth: &Truth) -> f64 {
    obs.points
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 * truth.value(w[0].0) + w[1].1 * truth.value(w[1].0)))
        .sum()
}

/// Simulated responses and the noise scale used.
#[derive(Debug, Clone, PartialEq)]
pub struct Responses {
    pub y: Vec<f64>,
    pub signal: Vec<f64>,
    pub sigma: f64,
}

/// `y_i = signal_i + N(0, sigma^2)` with `sigma^2 = var(signal) / snr` and no
/// intercept.
pub fn gen_responses<R: Rng + ?Sized>(curves: &[CoefCurve], truth: &Truth, snr: f64, rng: &mut R) -> Result<Responses> {
    if !(snr > 0.0) {
        return Err(Error::InvalidInput(format!("snr must be positive, got {snr}")));
    }
    let signal = signals(curves, truth)?;
    if signal.len() < 2 {
        return Err(Error::InvalidInput("need at least two subjects".into()));
    }
    let var = crate::stats::variance(&signal);
    let scale = signal.iter().map(|s| s.abs()).fold(0.0, f64::max);
    if !(var > 1e-24 * scale.max(1.0).powi(2)) {
        return Err(Error::InvalidInput("degenerate signal: every subject has the same integral".into()));
    }
    let sigma = (var / snr).sqrt();
    let y = signal
        .iter()
        .map(|s| s + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Responses { y, signal, sigma })
}

/// Accuracy of an estimate of the coefficient function on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub l2_error: f64,
    pub mean_ci_width: f64,
    pub pointwise_coverage: f64,
    /// `NaN` when the truth has no positive (negative) points.
    pub tpr: f64,
    pub tnr: f64,
}

/// `sqrt(integral (est - truth)^2)` by the trapezoid rule on the grid.
pub fn l2_error(grid: &[f64], estimate: &[f64], truth: &[f64]) -> f64 {
    let sq: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).collect();
    grid.windows(2)
        .zip(sq.windows(2))
        .map(|(g, s)| 0.5 * (g[1] - g[0]) * (s[0] + s[1]))
        .sum::<f64>()
        .sqrt()
}

/// Fractions of truly positive points labeled `+` and truly negative points
/// labeled `-`.
pub fn tpr_tnr(truth: &[f64], labels: &[Label]) -> (f64, f64) {
    let rate = |want: Label, sel: &dyn Fn(f64) -> bool| {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| sel(truth[i])).collect();
        if idx.is_empty() {
            f64::NAN
        } else {
            idx.iter().filter(|&&i| labels[i] == want).count() as f64 / idx.len() as f64
        }
    };
    (rate(Label::Positive, &|v| v > 0.0), rate(Label::Negative, &|v| v < 0.0))
}

/// All metrics for one estimate with bands and window labels on a grid.
pub fn evaluate(
    grid: &[f64],
    truth: &[f64],
    estimate: &[f64],
    lower: &[f64],
    upper: &[f64],
    labels: &[Label],
) -> Result<EvalMetrics> {
    let m = grid.len();
    if [truth.len(), estimate.len(), lower.len(), upper.len(), labels.len()].iter().any(|&l| l != m) {
        return Err(Error::Dimension("evaluation inputs are not on a common grid".into()));
    }
    if m < 2 {
        return Err(Error::InvalidInput("evaluation grid needs at least two points".into()));
    }
    let covered = (0..m).filter(|&i| lower[i] <= truth[i] && truth[i] <= upper[i]).count();
    let width = (0..m).map(|i| upper[i] - lower[i]).sum::<f64>() / m as f64;
    if width.is_infinite() {
        log::warn!("credible bands are unbounded");
    }
    let (tpr, tnr) = tpr_tnr(truth, labels);
    Ok(EvalMetrics {
        l2_error: l2_error(grid, estimate, truth),
        mean_ci_width: width,
        pointwise_coverage: covered as f64 / m as f64,
        tpr,
        tnr,
    })
}

/// A replicate study: the design, the competing priors and MCMC settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub design: SimulationDesign,
    pub methods: Vec<PriorKind>,
    /// Basis sizes for the covariate curves and the coefficient function.
    pub kx: usize,
    pub kb: usize,
    pub fit: FitConfig,
    /// Run the decision analysis for DHS fits.
    pub decision: Option<DecisionConfig>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            design: SimulationDesign::default(),
            methods: vec![PriorKind::Dhs, PriorKind::GlobalPspline, PriorKind::LocalPspline],
            kx: 53,
            kb: 53,
            fit: FitConfig::default(),
            decision: None,
        }
    }
}

/// One entry of a tidy metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub replicate: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// Outcome of one replicate; failures are kept, not propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub result: std::result::Result<Vec<MetricRow>, String>,
}

/// Generator of replicate `r`: stream `r` of the study seed.
pub fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// A simulated dataset with its smoothed curves.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub observations: Vec<CurveObservation>,
    pub curves: Vec<CoefCurve>,
    pub responses: Responses,
}

pub fn simulate_dataset<R: Rng + ?Sized>(design: &SimulationDesign, kx: usize, rng: &mut R) -> Result<Dataset> {
    let observations = gen_curves(design, rng)?;
    let basis_x = Arc::new(BSplineBasis::cubic(design.grid.domain()?, kx)?);
    let curves = fit_all_curves(&observations, &basis_x)?;
    let responses = gen_responses(&curves, &design.truth, design.snr, rng)?;
    Ok(Dataset {
        observations,
        curves,
        responses,
    })
}

/// Fits every method on one replicate and returns its metric rows.
pub fn run_replicate(study: &StudyConfig, replicate: usize) -> Result<Vec<MetricRow>> {
    let mut rng = replicate_rng(study.design.seed, replicate);
    let data = simulate_dataset(&study.design, study.kx, &mut rng)?;
    let grid = study.design.grid.values();
    let truth: Vec<f64> = grid.iter().map(|&t| study.design.truth.value(t)).collect();
    let basis_b = BSplineBasis::cubic(study.design.grid.domain()?, study.kb)?;
    let ids = data.curves.iter().map(|c| c.subject_id.clone()).collect();
    let table = ScalarTable::responses_only(ids, data.responses.y.clone());
    let design = build_design(&data.curves, &basis_b, &table, &ScalarDesignSpec::default())?;
    let mut rows = Vec::new();
    let mut push = |method: &str, metric: &str, value: f64| {
        rows.push(MetricRow {
            replicate,
            method: method.to_string(),
            metric: metric.to_string(),
            value,
        })
    };
    for &method in &study.methods {
        let cfg = FitConfig {
            prior: method,
            seed: rng.random(),
            ..study.fit.clone()
        };
        let draws = fit(&design, &cfg)?;
        let summary = summarize_beta(&draws.b_star, &basis_b, &grid)?;
        let ci = ci_labels(&summary);
        let m = evaluate(&grid, &truth, &summary.mean, &summary.lower95, &summary.upper95, &ci)?;
        let name = method.name();
        push(name, "l2_error", m.l2_error);
        push(name, "mean_ci_width", m.mean_ci_width);
        push(name, "coverage", m.pointwise_coverage);
        push(name, "tpr_ci", m.tpr);
        push(name, "tnr_ci", m.tnr);
        if let (Some(dc), PriorKind::Dhs) = (&study.decision, method) {
            let partition = Partition::from_basis(&basis_b);
            let da = analyze(&design, &data.curves, &draws, &partition, dc, &mut rng)?;
            let lc: Vec<f64> = grid.iter().map(|&t| da.estimate.value(t).unwrap_or(0.0)).collect();
            let labels = labels_on_grid(&da.windows, &grid);
            let (tpr, tnr) = tpr_tnr(&truth, &labels);
            push(name, "tpr_da", tpr);
            push(name, "tnr_da", tnr);
            push(name, "l2_lc", l2_error(&grid, &lc, &truth));
            push(name, "lambda_da", da.estimate.lambda);
            push(name, "levels_da", da.estimate.runs.len() as f64);
        }
    }
    Ok(rows)
}

/// Runs the given replicates concurrently; results are ordered by replicate.
pub fn run_study(study: &StudyConfig, replicates: &[usize]) -> Vec<ReplicateOutcome> {
    let mut out: Vec<ReplicateOutcome> = replicates
        .par_iter()
        .map(|&r| ReplicateOutcome {
            replicate: r,
            result: run_replicate(study, r).map_err(|e| e.to_string()),
        })
        .collect();
    out.sort_by_key(|o| o.replicate);
    out
}
