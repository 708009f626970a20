//! Report rows, CSV output and seed aggregation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use btdz_core::io::write_atomic;

use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Slack allowed on the oracle-dominance checks.
pub const RETURN_SLACK: f64 = 1e-9;
pub const RATIO_SLACK: f64 = 1e-6;
/// GPI values may trail the best library member by this much (relative).
pub const GPI_SLACK: f64 = 1e-8;

pub const REPORT_COLUMNS: [&str; 11] = [
    "env",
    "feature_family",
    "d",
    "sampler",
    "alpha",
    "K",
    "seed",
    "task_name",
    "return",
    "oracle",
    "ratio",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub env: String,
    pub feature_family: String,
    pub d: usize,
    pub sampler: String,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub seed: u64,
    pub task_name: String,
    pub ret: f64,
    pub oracle: f64,
    pub ratio: f64,
    /// `min_s V_gpi(s) - max_i V_i(s)` under the inferred reward, scaled by
    /// the largest |value|; negative means GPI lost to a library member.
    pub gpi_gap: f64,
    pub wall_ms: u128,
}

/// Provenance lines written as `#` comments above every CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub command: String,
}

impl Stamp {
    fn header(&self) -> String {
        format!(
            "# btdz {VERSION}\n# config_sha256 {}\n# command {}\n",
            self.config_hash, self.command
        )
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_body<I, R>(columns: &[&str], records: I) -> Result<Vec<u8>, CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(columns)?;
    for r in records {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

fn with_stamp(stamp: &Stamp, body: Vec<u8>) -> Vec<u8> {
    let mut out = stamp.header().into_bytes();
    out.extend(body);
    out
}

fn key_fields(r: &ReportRow) -> Vec<String> {
    vec![
        r.env.clone(),
        r.feature_family.clone(),
        r.d.to_string(),
        r.sampler.clone(),
        opt(r.alpha),
        opt(r.k),
        r.seed.to_string(),
        r.task_name.clone(),
    ]
}

pub fn report_body(rows: &[ReportRow]) -> Result<Vec<u8>, CliError> {
    csv_body(
        &REPORT_COLUMNS,
        rows.iter().map(|r| {
            let mut f = key_fields(r);
            f.extend([r.ret.to_string(), r.oracle.to_string(), r.ratio.to_string()]);
            f
        }),
    )
}

/// Path of the wall-clock sidecar next to a report.
pub fn timing_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.timing.csv"))
}

/// Report CSV plus a `.timing.csv` sidecar with wall-clock and GPI margins.
pub fn write_report(path: &Path, rows: &[ReportRow], stamp: &Stamp) -> Result<(), CliError> {
    write_atomic(path, &with_stamp(stamp, report_body(rows)?))?;
    let mut cols: Vec<&str> = REPORT_COLUMNS[..8].to_vec();
    cols.extend(["gpi_gap", "wall_ms"]);
    let timing = csv_body(
        &cols,
        rows.iter().map(|r| {
            let mut f = key_fields(r);
            f.extend([r.gpi_gap.to_string(), r.wall_ms.to_string()]);
            f
        }),
    )?;
    write_atomic(&timing_path(path), &with_stamp(stamp, timing))?;
    Ok(())
}

/// Strip the `#` provenance lines, leaving the CSV body.
pub fn csv_body_of(bytes: &[u8]) -> &[u8] {
    let mut rest = bytes;
    while rest.first() == Some(&b'#') {
        match rest.iter().position(|&b| b == b'\n') {
            Some(i) => rest = &rest[i + 1..],
            None => return &[],
        }
    }
    rest
}

/// Mean and standard error of the mean (None below two samples).
pub fn mean_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// One aggregated cell: task-averaged values per seed, then mean and
/// standard error across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub env: String,
    pub feature_family: String,
    pub d: usize,
    pub sampler: String,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub n_seeds: usize,
    pub n_tasks: usize,
    pub ratio_mean: f64,
    pub ratio_se: Option<f64>,
    pub return_mean: f64,
    pub return_se: Option<f64>,
    pub per_seed_ratio: Vec<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "env",
    "feature_family",
    "d",
    "sampler",
    "alpha",
    "K",
    "n_seeds",
    "n_tasks",
    "ratio_mean",
    "ratio_se",
    "return_mean",
    "return_se",
];

/// Groups rows by everything but seed and task, in order of first
/// appearance.
pub fn aggregate(rows: &[ReportRow]) -> Vec<SummaryRow> {
    type Key = (String, String, usize, String, Option<u64>, Option<usize>);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, BTreeMap<u64, Vec<&ReportRow>>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.env.clone(),
            r.feature_family.clone(),
            r.d,
            r.sampler.clone(),
            r.alpha.map(f64::to_bits),
            r.k,
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().entry(r.seed).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let per_seed = &groups[&key];
            let task_mean = |f: fn(&ReportRow) -> f64| -> Vec<f64> {
                per_seed
                    .values()
                    .map(|rs| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64)
                    .collect()
            };
            let ratios = task_mean(|r| r.ratio);
            let returns = task_mean(|r| r.ret);
            let (ratio_mean, ratio_se) = mean_se(&ratios);
            let (return_mean, return_se) = mean_se(&returns);
            let (env, feature_family, d, sampler, alpha, k) = key;
            SummaryRow {
                env,
                feature_family,
                d,
                sampler,
                alpha: alpha.map(f64::from_bits),
                k,
                n_seeds: per_seed.len(),
                n_tasks: per_seed.values().map(Vec::len).max().unwrap_or(0),
                ratio_mean,
                ratio_se,
                return_mean,
                return_se,
                per_seed_ratio: ratios,
            }
        })
        .collect()
}

pub fn summary_body(rows: &[SummaryRow]) -> Result<Vec<u8>, CliError> {
    csv_body(
        &SUMMARY_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.env.clone(),
                r.feature_family.clone(),
                r.d.to_string(),
                r.sampler.clone(),
                opt(r.alpha),
                opt(r.k),
                r.n_seeds.to_string(),
                r.n_tasks.to_string(),
                r.ratio_mean.to_string(),
                opt(r.ratio_se),
                r.return_mean.to_string(),
                opt(r.return_se),
            ]
        }),
    )
}

pub fn write_summary(path: &Path, rows: &[SummaryRow], stamp: &Stamp) -> Result<(), CliError> {
    write_atomic(path, &with_stamp(stamp, summary_body(rows)?))?;
    Ok(())
}

/// Oracle dominance (`oracle >= return - 1e-9`, `ratio <= 1 + 1e-6`) and
/// GPI dominance on every row.
pub fn check_dominance(rows: &[ReportRow]) -> Result<(), CliError> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| {
            !(r.oracle >= r.ret - RETURN_SLACK) || !(r.ratio <= 1.0 + RATIO_SLACK) || !(r.gpi_gap >= -GPI_SLACK)
        })
        .map(|r| {
            format!(
                "{}/{}/d={}/{}/seed {}/{}: return {} oracle {} ratio {} gpi_gap {}",
                r.env, r.feature_family, r.d, r.sampler, r.seed, r.task_name, r.ret, r.oracle, r.ratio, r.gpi_gap
            )
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!(
            "{} rows violate dominance: {}",
            bad.len(),
            bad.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, task: &str, ret: f64, oracle: f64) -> ReportRow {
        ReportRow {
            env: "corridor".into(),
            feature_family: "lra_sr".into(),
            d: 8,
            sampler: "mixed".into(),
            alpha: Some(0.5),
            k: Some(20),
            seed,
            task_name: task.into(),
            ret,
            oracle,
            ratio: btdz_core::engine::oracle_ratio(ret, oracle),
            gpi_gap: 0.0,
            wall_ms: 7,
        }
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((se.unwrap() - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[3.0]), (3.0, None));
    }

    #[test]
    fn aggregation_averages_tasks_then_seeds() {
        let rows = vec![
            row(0, "a", 1.0, 2.0),
            row(0, "b", 2.0, 2.0),
            row(1, "a", 2.0, 2.0),
            row(1, "b", 2.0, 2.0),
        ];
        let s = aggregate(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].n_seeds, 2);
        assert_eq!(s[0].n_tasks, 2);
        assert_eq!(s[0].per_seed_ratio, vec![0.75, 1.0]);
        assert_eq!(s[0].ratio_mean, 0.875);
        assert_eq!(s[0].return_mean, 1.75);
        assert!((s[0].ratio_se.unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn csv_layout_and_stamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        let stamp = Stamp {
            config_hash: "abc".into(),
            command: "eval".into(),
        };
        let mut r = row(3, "reach, corner", 1.5, 2.0);
        r.alpha = None;
        write_report(&p, &[r], &stamp).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let body = String::from_utf8(csv_body_of(text.as_bytes()).to_vec()).unwrap();
        assert!(text.starts_with("# btdz "));
        assert_eq!(
            body,
            "env,feature_family,d,sampler,alpha,K,seed,task_name,return,oracle,ratio\n\
             corridor,lra_sr,8,mixed,,20,3,\"reach, corner\",1.5,2,0.75\n"
        );
        let timing = std::fs::read_to_string(timing_path(&p)).unwrap();
        assert!(timing.contains("gpi_gap,wall_ms") && timing.contains(",0,7\n"));
    }

    #[test]
    fn dominance_violations_are_reported() {
        assert!(check_dominance(&[row(0, "a", 1.0, 2.0)]).is_ok());
        assert!(check_dominance(&[row(0, "a", 1.0 + 1e-10, 1.0)]).is_ok());
        let e = check_dominance(&[row(0, "a", 1.1, 1.0)]).unwrap_err();
        assert_eq!(e.exit_code(), 4);
        let mut r = row(0, "a", 1.0, 2.0);
        r.gpi_gap = -1e-3;
        assert!(check_dominance(&[r]).is_err());
    }
}
