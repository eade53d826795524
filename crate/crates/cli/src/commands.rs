//! The five subcommands. Each writes its outputs under `out_dir` together
//! with a resolved-config snapshot `<command>.config.toml`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use basofr::archive::{atomic_write, read_archive, write_archive, Table};
use basofr::basis::{BSplineBasis, Domain};
use basofr::decision::{analyze, ci_labels, labels_on_grid, Label, Partition};
use basofr::funcdata::{build_design, fit_all_curves, read_curves, read_scalars, write_curves, write_scalars, CoefCurve, RegressionDesign, ScalarTable};
use basofr::gibbs::{fit, summarize_beta, BetaSummary};
use basofr::simulate::{evaluate, l2_error, replicate_rng, run_study, simulate_dataset, tpr_tnr, MetricRow};
use basofr::{Error, Result};

use crate::config::RunConfig;

pub const BETA_SUMMARY: &str = "beta_summary.csv";
pub const PATH_TABLE: &str = "path.csv";
pub const WINDOWS_TABLE: &str = "windows.csv";
pub const EVALUATION_TABLE: &str = "evaluation.csv";
pub const METRICS_TABLE: &str = "metrics.csv";
pub const FAILURES_TABLE: &str = "failures.csv";

/// Validates, then writes the snapshot and returns the config hash.
fn prepare(cfg: &RunConfig, command: &str) -> Result<String> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let text = cfg.to_toml()?;
    let hash = cfg.hash()?;
    atomic_write(&cfg.out_dir.join(format!("{command}.config.toml")), |w| {
        writeln!(w, "# config_hash={hash}")?;
        w.write_all(text.as_bytes())?;
        Ok(())
    })?;
    Ok(hash)
}

fn f(x: f64) -> String {
    format!("{x}")
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let hash = prepare(cfg, "simulate")?;
    let design = &cfg.simulate;
    for r in 0..design.replicates {
        let dir = if design.replicates == 1 {
            cfg.out_dir.clone()
        } else {
            cfg.out_dir.join(format!("rep_{r:04}"))
        };
        let mut rng = replicate_rng(design.seed, r);
        let data = simulate_dataset(design, cfg.data.kx, &mut rng)?;
        atomic_write(&dir.join("curves.csv"), |w| {
            writeln!(w, "# config_hash={hash}")?;
            write_curves(&data.observations, w)?;
            Ok(())
        })?;
        let ids = data.observations.iter().map(|o| o.subject_id.clone()).collect();
        let table = ScalarTable::responses_only(ids, data.responses.y.clone());
        atomic_write(&dir.join("scalars.csv"), |w| {
            writeln!(w, "# config_hash={hash}")?;
            write_scalars(&table, w)?;
            Ok(())
        })?;
        let mut truth = Table::new(["t", "beta"]);
        for t in design.grid.values() {
            truth.push([f(t), f(design.truth.value(t))]);
        }
        truth.write(&dir.join("truth.csv"), &hash)?;
        println!(
            "{}: {} subjects, noise sd {:.4}",
            dir.display(),
            data.observations.len(),
            data.responses.sigma
        );
    }
    Ok(())
}

struct Loaded {
    curves: Vec<CoefCurve>,
    design: RegressionDesign,
}

fn load_design(cfg: &RunConfig) -> Result<Loaded> {
    let domain = Domain::new(cfg.data.domain.0, cfg.data.domain.1)?;
    let obs = read_curves(&cfg.curves_path(), domain)?;
    let scalars = read_scalars(&cfg.scalars_path())?;
    let basis_x = Arc::new(BSplineBasis::cubic(domain, cfg.data.kx)?);
    let curves = fit_all_curves(&obs, &basis_x)?;
    let basis_b = BSplineBasis::cubic(domain, cfg.data.kb)?;
    let design = build_design(&curves, &basis_b, &scalars, &cfg.data.covariates)?;
    Ok(Loaded { curves, design })
}

pub fn fit_cmd(cfg: &RunConfig) -> Result<()> {
    let hash = prepare(cfg, "fit")?;
    let loaded = load_design(cfg)?;
    let draws = fit(&loaded.design, &cfg.fit)?;
    let manifest = write_archive(&cfg.archive_path(), &draws, &hash)?;
    let s2 = draws.sigma2.iter().sum::<f64>() / draws.n_draws() as f64;
    println!(
        "{} draws ({} prior, n = {}, K_B = {}) written to {}; posterior mean sigma2 = {:.5}",
        manifest.draws,
        cfg.fit.prior,
        loaded.design.n(),
        cfg.data.kb,
        cfg.archive_path().display(),
        s2
    );
    Ok(())
}

pub fn summarize(cfg: &RunConfig) -> Result<()> {
    let hash = prepare(cfg, "summarize")?;
    let loaded = load_design(cfg)?;
    let (_, draws) = read_archive(&cfg.archive_path())?;
    draws.check_design(&loaded.design)?;
    let basis_b = &loaded.design.basis_b;
    let dom = basis_b.domain();
    let m = cfg.summary.grid_points;
    let grid: Vec<f64> = (0..m)
        .map(|i| if i + 1 == m { dom.hi() } else { dom.lo() + dom.width() * i as f64 / (m - 1) as f64 })
        .collect();
    let summary = summarize_beta(&draws.b_star, basis_b, &grid)?;

    let partition = Partition::from_basis(basis_b);
    let mut rng = replicate_rng(cfg.fit.seed, 1);
    let da = analyze(&loaded.design, &loaded.curves, &draws, &partition, &cfg.decision, &mut rng)?;

    let ci = ci_labels(&summary);
    let lc_labels = labels_on_grid(&da.windows, &grid);
    let mut t = Table::new(["t", "mean", "lower50", "upper50", "lower95", "upper95", "lc", "label_ci", "label_da"]);
    for i in 0..m {
        t.push([
            f(grid[i]),
            f(summary.mean[i]),
            f(summary.lower50[i]),
            f(summary.upper50[i]),
            f(summary.lower95[i]),
            f(summary.upper95[i]),
            f(da.estimate.value(grid[i]).unwrap_or(f64::NAN)),
            ci[i].symbol().into(),
            lc_labels[i].symbol().into(),
        ]);
    }
    t.write(&cfg.out_dir.join(BETA_SUMMARY), &hash)?;

    let fam = &da.family;
    let mut p = Table::new(["lambda", "levels", "empirical_loss", "mean_pct_diff", "lower", "upper", "acceptable", "simplest"]);
    for (l, e) in da.entries.iter().enumerate() {
        let col = fam.pct_diff.column(l);
        p.push([
            f(e.lambda),
            (e.level_changes() + 1).to_string(),
            f(da.empirical[l]),
            f(col.sum() / col.len() as f64),
            f(fam.lower[l]),
            f(fam.upper[l]),
            fam.members[l].to_string(),
            (l == fam.simplest).to_string(),
        ]);
    }
    p.write(&cfg.out_dir.join(PATH_TABLE), &hash)?;

    let mut w = Table::new(["start", "end", "level", "label"]);
    for win in &da.windows {
        w.push([f(win.start), f(win.end), f(win.level), win.label.symbol().into()]);
    }
    w.write(&cfg.out_dir.join(WINDOWS_TABLE), &hash)?;

    println!(
        "lambda = {:.4e} ({} levels, {} of {} path entries acceptable)",
        da.estimate.lambda,
        da.estimate.runs.len(),
        fam.members.iter().filter(|&&b| b).count(),
        da.entries.len()
    );
    for win in &da.windows {
        println!("  [{:.4}, {:.4}] {} {:+.4}", win.start, win.end, win.label.symbol(), win.level);
    }
    Ok(())
}

fn parse_col(t: &Table, name: &str, path: &Path) -> Result<Vec<f64>> {
    let j = t.column(name).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("missing column `{name}`"),
    })?;
    t.rows
        .iter()
        .map(|r| {
            r[j].parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("column `{name}`: {e}"),
            })
        })
        .collect()
}

fn parse_labels(t: &Table, name: &str, path: &Path) -> Result<Vec<Label>> {
    let j = t.column(name).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("missing column `{name}`"),
    })?;
    t.rows
        .iter()
        .map(|r| match r[j].as_str() {
            "+" => Ok(Label::Positive),
            "0" => Ok(Label::Zero),
            "-" => Ok(Label::Negative),
            other => Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("bad label `{other}`"),
            }),
        })
        .collect()
}

/// Scores the summaries in `out_dir` against the simulation truth.
pub fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let hash = prepare(cfg, "evaluate")?;
    let path = cfg.out_dir.join(BETA_SUMMARY);
    let (t, _) = Table::read(&path)?;
    let summary = BetaSummary {
        grid: parse_col(&t, "t", &path)?,
        mean: parse_col(&t, "mean", &path)?,
        lower50: parse_col(&t, "lower50", &path)?,
        upper50: parse_col(&t, "upper50", &path)?,
        lower95: parse_col(&t, "lower95", &path)?,
        upper95: parse_col(&t, "upper95", &path)?,
    };
    let lc = parse_col(&t, "lc", &path)?;
    let da_labels = parse_labels(&t, "label_da", &path)?;
    let grid = &summary.grid;
    let truth: Vec<f64> = grid.iter().map(|&x| cfg.simulate.truth.value(x)).collect();
    let m = evaluate(grid, &truth, &summary.mean, &summary.lower95, &summary.upper95, &ci_labels(&summary))?;
    let (tpr_da, tnr_da) = tpr_tnr(&truth, &da_labels);

    let rows = [
        ("posterior", "l2_error", m.l2_error),
        ("posterior", "mean_ci_width", m.mean_ci_width),
        ("posterior", "coverage", m.pointwise_coverage),
        ("posterior", "tpr", m.tpr),
        ("posterior", "tnr", m.tnr),
        ("decision", "l2_error", l2_error(grid, &lc, &truth)),
        ("decision", "tpr", tpr_da),
        ("decision", "tnr", tnr_da),
    ];
    let mut out = Table::new(["estimator", "metric", "value"]);
    for (e, k, v) in rows {
        out.push([e.to_string(), k.to_string(), f(v)]);
        println!("{e:>9} {k:<13} {v:.4}");
    }
    out.write(&cfg.out_dir.join(EVALUATION_TABLE), &hash)
}

/// Replicates already present in a metrics table written under `hash`.
fn completed(path: &Path, hash: &str) -> Result<(Vec<MetricRow>, BTreeSet<usize>)> {
    if !path.exists() {
        return Ok((Vec::new(), BTreeSet::new()));
    }
    let (t, old) = Table::read(path)?;
    if old.as_deref() != Some(hash) {
        log::warn!("{} was written under another configuration; starting over", path.display());
        return Ok((Vec::new(), BTreeSet::new()));
    }
    let reps = parse_col(&t, "replicate", path)?;
    let vals = parse_col(&t, "value", path)?;
    let (jm, jk) = (t.column("method"), t.column("metric"));
    let (Some(jm), Some(jk)) = (jm, jk) else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: "missing method or metric column".into(),
        });
    };
    let rows: Vec<MetricRow> = t
        .rows
        .iter()
        .zip(reps.iter().zip(&vals))
        .map(|(r, (&rep, &value))| MetricRow {
            replicate: rep as usize,
            method: r[jm].clone(),
            metric: r[jk].clone(),
            value,
        })
        .collect();
    let done = rows.iter().map(|r| r.replicate).collect();
    Ok((rows, done))
}

/// Runs the study, skipping replicates already in `metrics.csv`. Failed
/// replicates go to `failures.csv` and are retried on the next run. Returns
/// the number of failures.
pub fn replicate(cfg: &RunConfig) -> Result<usize> {
    let hash = prepare(cfg, "replicate")?;
    let metrics_path: PathBuf = cfg.out_dir.join(METRICS_TABLE);
    let (mut rows, done) = completed(&metrics_path, &hash)?;
    let todo: Vec<usize> = (0..cfg.study.design.replicates).filter(|r| !done.contains(r)).collect();
    if !done.is_empty() {
        println!("resuming: {} replicates done, {} to run", done.len(), todo.len());
    }
    let outcomes = run_study(&cfg.study, &todo);
    let mut failures = Table::new(["replicate", "error"]);
    for o in outcomes {
        match o.result {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::error!("replicate {} failed: {e}", o.replicate);
                failures.push([o.replicate.to_string(), e]);
            }
        }
    }
    rows.sort_by(|a, b| a.replicate.cmp(&b.replicate));
    let mut t = Table::new(["replicate", "method", "metric", "value"]);
    for r in &rows {
        t.push([r.replicate.to_string(), r.method.clone(), r.metric.clone(), f(r.value)]);
    }
    t.write(&metrics_path, &hash)?;
    failures.write(&cfg.out_dir.join(FAILURES_TABLE), &hash)?;

    let mut keys: Vec<(String, String)> = rows.iter().map(|r| (r.method.clone(), r.metric.clone())).collect();
    keys.sort();
    keys.dedup();
    for (method, metric) in keys {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric && r.value.is_finite())
            .map(|r| r.value)
            .collect();
        if !v.is_empty() {
            println!("{method:>13} {metric:<13} mean {:.4} over {}", v.iter().sum::<f64>() / v.len() as f64, v.len());
        }
    }
    Ok(failures.rows.len())
}
