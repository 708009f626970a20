//! The six subcommands.

use std::path::{Path, PathBuf};

use btdz_core::analysis::{monte_carlo_task_variance, policy_occupancies, return_variance, TaskSource};
use btdz_core::io::write_atomic;
use btdz_core::tasks::sample_uniform_sphere;
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepAxis};
use crate::error::CliError;
use crate::pipeline::{Access, Prerequisites, RunOptions, Workspace};
use crate::report::{self, aggregate, check_dominance, ReportRow, Stamp, SummaryRow};
use crate::svg::{LineChart, Point, Series};

/// Absolute tolerance of the per-z quadratic-form check.
pub const QUADRATIC_TOL: f64 = 1e-9;
/// Monte Carlo agreement, in standard errors.
pub const PROP1_SIGMAS: f64 = 3.0;

fn stamp(cfg: &ExperimentConfig, command: String) -> Stamp {
    Stamp {
        config_hash: cfg.hash(),
        command,
    }
}

pub fn gen_dataset(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, CliError> {
    let ws = Workspace::new(cfg.clone(), opts.clone(), Prerequisites::BUILD_ALL)?;
    opts.install(|| ws.gen_datasets())?
}

pub fn fit_btd(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, CliError> {
    let pre = Prerequisites {
        datasets: Access::Require,
        ..Prerequisites::BUILD_ALL
    };
    let ws = Workspace::new(cfg.clone(), opts.clone(), pre)?;
    opts.install(|| ws.fit_btd())?
}

pub fn train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, CliError> {
    let pre = Prerequisites {
        datasets: Access::Require,
        gmms: Access::Require,
        libraries: Access::Build,
    };
    let ws = Workspace::new(cfg.clone(), opts.clone(), pre)?;
    opts.install(|| ws.train())?
}

/// Rows of a report CSV written earlier (GPI margins are not re-read).
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, CliError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let bad = |what: &str| CliError::Config(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != report::REPORT_COLUMNS.len() {
            return Err(bad("row width"));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(report::REPORT_COLUMNS[i]));
        rows.push(ReportRow {
            env: rec[0].to_string(),
            feature_family: rec[1].to_string(),
            d: rec[2].parse().map_err(|_| bad("d"))?,
            sampler: rec[3].to_string(),
            alpha: if rec[4].is_empty() { None } else { Some(num(4)?) },
            k: if rec[5].is_empty() { None } else { Some(rec[5].parse().map_err(|_| bad("K"))?) },
            seed: rec[6].parse().map_err(|_| bad("seed"))?,
            task_name: rec[7].to_string(),
            ret: num(8)?,
            oracle: num(9)?,
            ratio: num(10)?,
            gpi_gap: 0.0,
            wall_ms: 0,
        });
    }
    Ok(rows)
}

pub fn eval(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>, CliError> {
    let path = opts.out.join("report.csv");
    if path.is_file() && !opts.force {
        log::info!("skip {}: already exists (use --force to recompute)", path.display());
        check_dominance(&read_report(&path)?)?;
        return Ok(vec![path]);
    }
    let pre = Prerequisites {
        datasets: Access::Require,
        gmms: Access::Require,
        libraries: Access::Require,
    };
    let ws = Workspace::new(cfg.clone(), opts.clone(), pre)?;
    let rows = opts.install(|| ws.evaluate(std::slice::from_ref(cfg)))??;
    report::write_report(&path, &rows, &stamp(cfg, "eval".into()))?;
    check_dominance(&rows)?;
    Ok(vec![path])
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub report: PathBuf,
    pub summary_path: PathBuf,
    pub svg: Option<PathBuf>,
}

fn sweep_chart(axis: SweepAxis, values: &[serde_json::Value], summary: &[SummaryRow], cfg: &ExperimentConfig) -> LineChart {
    let categorical = axis == SweepAxis::Sampler;
    let x_of = |i: usize| -> f64 {
        if categorical {
            i as f64
        } else {
            values[i].as_f64().unwrap_or(f64::NAN)
        }
    };
    // one series per environment; summary rows come in sweep-value order
    let points = summary
        .iter()
        .enumerate()
        .map(|(i, s)| Point {
            x: x_of(i),
            y: s.ratio_mean,
            err: s.ratio_se,
        })
        .collect();
    LineChart {
        title: format!("{} / {}: oracle ratio vs {}", cfg.env_name(), cfg.feature_family, axis.name()),
        x_label: axis.name().into(),
        y_label: "mean oracle ratio (± SE over seeds)".into(),
        series: vec![Series {
            name: cfg.env_name(),
            points,
        }],
        x_ticks: if categorical {
            values
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64, v.as_str().unwrap_or_default().to_string()))
                .collect()
        } else {
            Vec::new()
        },
        log2_x: axis == SweepAxis::Dim,
    }
}

/// Evaluate every sweep value over every seed and test task; write the row
/// CSV, the seed-aggregated summary and optionally an SVG chart.
pub fn sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepOutput, CliError> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("the config has no `sweep` section".into()))?;
    let name = format!("sweep_{}", spec.axis.name());
    let report_path = opts.out.join(format!("{name}.csv"));
    let summary_path = opts.out.join(format!("{name}_summary.csv"));
    let svg_path = spec.svg.then(|| opts.out.join(format!("{name}.svg")));
    let st = stamp(cfg, format!("sweep axis={}", spec.axis.name()));

    let rows = if report_path.is_file() && !opts.force {
        log::info!("skip {}: already exists (use --force to recompute)", report_path.display());
        read_report(&report_path)?
    } else {
        let configs = spec
            .values
            .iter()
            .map(|v| cfg.apply_axis(spec.axis, v))
            .collect::<Result<Vec<_>, _>>()?;
        let ws = Workspace::new(cfg.clone(), opts.clone(), Prerequisites::BUILD_ALL)?;
        let rows = opts.install(|| ws.evaluate(&configs))??;
        report::write_report(&report_path, &rows, &st)?;
        rows
    };
    let summary = aggregate(&rows);
    report::write_summary(&summary_path, &summary, &st)?;
    if let Some(p) = &svg_path {
        write_atomic(p, sweep_chart(spec.axis, &spec.values, &summary, cfg).render().as_bytes())?;
    }
    check_dominance(&rows)?;
    Ok(SweepOutput {
        rows,
        summary,
        report: report_path,
        summary_path,
        svg: svg_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop1Row {
    pub env: String,
    pub feature_family: String,
    pub d: usize,
    pub seed: u64,
    pub n_z: usize,
    pub n_policies: usize,
    pub mc_estimate: f64,
    pub mc_se: f64,
    pub predicted: f64,
    pub z_score: f64,
    pub max_quadratic_error: f64,
    pub pass: bool,
}

/// Monte Carlo `E_z[Var_pi(J)]` over uniform tasks against `Tr(Sigma)/d`,
/// and `Var_pi(psi^T z) = z^T Sigma z` on individual tasks, per seed.
pub fn validate_prop1(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<Prop1Row>, CliError> {
    let ws = Workspace::new(cfg.clone(), opts.clone(), Prerequisites::BUILD_ALL)?;
    let p = cfg.prop1;
    let rows = opts.install(|| {
        cfg.seeds
            .iter()
            .map(|&seed| {
                let ds = match cfg.feature_family {
                    btdz_core::features::FeatureFamily::LraP | btdz_core::features::FeatureFamily::LraSr => {
                        Some(ws.dataset(seed, Access::Build)?)
                    }
                    _ => None,
                };
                let phi = cfg.feature_family.build(&ws.mdp, ds.as_ref(), cfg.d, seed)?;
                let mc = monte_carlo_task_variance(&ws.mdp, &phi, TaskSource::Uniform, p.n_z, p.n_policies, seed)?;
                let predicted = mc.policy_covariance.trace() / cfg.d as f64;
                let occ = policy_occupancies(&ws.mdp, &phi, p.n_policies, seed)?;
                let zs = sample_uniform_sphere(cfg.d, p.n_quadratic, seed ^ 0x5eed)?;
                let mut max_err = 0.0f64;
                for z in zs.iter() {
                    let direct = return_variance(&occ, z)?;
                    let quad = z.dot(&(&mc.policy_covariance * z));
                    max_err = max_err.max((direct - quad).abs());
                }
                let z_score = if mc.std_error > 0.0 {
                    (mc.estimate - predicted).abs() / mc.std_error
                } else if mc.estimate == predicted {
                    0.0
                } else {
                    f64::INFINITY
                };
                Ok(Prop1Row {
                    env: ws.env.clone(),
                    feature_family: cfg.feature_family.to_string(),
                    d: cfg.d,
                    seed,
                    n_z: p.n_z,
                    n_policies: p.n_policies,
                    mc_estimate: mc.estimate,
                    mc_se: mc.std_error,
                    predicted,
                    z_score,
                    max_quadratic_error: max_err,
                    pass: z_score <= PROP1_SIGMAS && max_err <= QUADRATIC_TOL,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;

    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    let mut bytes = format!(
        "# btdz {}\n# config_sha256 {}\n# command validate-prop1\n",
        report::VERSION,
        cfg.hash()
    )
    .into_bytes();
    bytes.extend(body);
    write_atomic(&opts.out.join("prop1.csv"), &bytes)?;

    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("seed {}: z = {:.2}, quadratic error {:e}", r.seed, r.z_score, r.max_quadratic_error))
        .collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::Acceptance(format!("identity check failed ({})", failed.join("; "))))
    }
}
