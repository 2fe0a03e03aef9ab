//! Monte-Carlo sweeps over seeded instances, CSV output and comparison
//! tables.

mod config;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

pub use config::{config_reference, ExperimentConfig, Scheme, SolverOptions, SweepAxis};

use crate::baselines::{baseline1_solve, baseline2_solve, brute_force};
use crate::error::{Error, Result};
use crate::instance::{derive_seed, random_instance, ProblemInstance};
use crate::monotonic::polyblock_solve_from;
use crate::rates::{validate_policy_with, RateReport, ReceiverModel, Tolerance};
use crate::sca::algorithm1_solve;
use crate::solution::SolveResult;
use stats::{spearman, Spearman};

/// Receiver model a scheme's policies are validated against.
pub fn receiver_of(scheme: Scheme) -> ReceiverModel {
    match scheme {
        Scheme::Baseline1 => ReceiverModel::TreatAsNoise,
        _ => ReceiverModel::Sic,
    }
}

/// One scheme on one instance.
#[derive(Debug, Clone)]
pub struct SchemeRun {
    pub result: SolveResult,
    /// `None` when the scheme found no feasible policy.
    pub report: Option<RateReport>,
    /// Oracle grid bound `L·δ`, or the certified gap of the optimal scheme.
    pub error_bound: f64,
    pub seconds: f64,
}

/// Runs `scheme`. The optimal scheme starts from the SCA policy, taken from
/// `sca` when given (its time is then charged to both).
pub fn solve_scheme(
    scheme: Scheme,
    instance: &ProblemInstance,
    opts: &SolverOptions,
    seed: u64,
    sca: Option<&SchemeRun>,
) -> Result<SchemeRun> {
    let start = Instant::now();
    let mut extra = 0.0;
    let mut error_bound = 0.0;
    let result = match scheme {
        Scheme::Sca => algorithm1_solve(instance, &opts.sca, None)?,
        Scheme::Baseline1 => baseline1_solve(instance, &opts.sca)?,
        Scheme::Baseline2 => baseline2_solve(instance, seed, &opts.baseline2)?,
        Scheme::Oracle => {
            let (r, res) = brute_force(instance, &opts.oracle)?;
            error_bound = res.bound();
            r
        }
        Scheme::Optimal => {
            let warm = match sca {
                Some(run) => {
                    extra = run.seconds;
                    run.result.clone()
                }
                None => algorithm1_solve(instance, &opts.sca, None)?,
            };
            let incumbent = warm.status.has_policy().then_some(&warm.policy);
            let r = polyblock_solve_from(instance, &opts.optimal, incumbent)?;
            error_bound = r.gap().unwrap_or(0.0);
            r
        }
    };
    let seconds = start.elapsed().as_secs_f64() + extra;
    let report = if result.status.has_policy() {
        let rep = validate_policy_with(
            &result.policy,
            instance,
            Tolerance::default(),
            receiver_of(scheme),
        )
        .map_err(|v| Error::Validation(format!("{scheme} policy: {v:?}")))?;
        Some(rep)
    } else {
        None
    };
    Ok(SchemeRun {
        result,
        report,
        error_bound,
        seconds,
    })
}

/// Per-instance outcome of one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizationRecord {
    pub point: usize,
    pub sweep_value: f64,
    pub realization: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub status: String,
    pub feasible: bool,
    pub weighted: f64,
    pub avg_pu: f64,
    pub avg_su: f64,
    pub avg_user: f64,
    pub error_bound: f64,
    pub seconds: f64,
}

/// Averages of one scheme at one sweep point, over feasible realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sweep_value: f64,
    pub scheme: Scheme,
    pub avg_pu: f64,
    pub avg_su: f64,
    pub avg_user: f64,
    pub avg_weighted: f64,
    pub feasibility_rate: f64,
    /// Largest per-instance error bound (oracle grid bound or optimal gap).
    pub max_error_bound: f64,
    pub solve_seconds: f64,
    /// Feasible realizations behind the averages.
    pub realizations: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub axis: &'static str,
    pub rows: Vec<MetricRow>,
    pub records: Vec<RealizationRecord>,
}

/// Instance seed of a realization. The sweep point is left out so every
/// point sees the same draws.
pub fn instance_seed(master: u64, realization: usize) -> u64 {
    derive_seed(master, &[realization as u64])
}

fn run_one(
    cfg: &ExperimentConfig,
    point: usize,
    realization: usize,
) -> Result<Vec<RealizationRecord>> {
    let (topology, overrides) = cfg.point(point);
    let seed = instance_seed(cfg.master_seed, realization);
    let instance = random_instance(&topology, seed, &overrides)?;
    let b2_seed = derive_seed(cfg.master_seed, &[realization as u64, point as u64, 2]);
    let sweep_value = cfg.axis.values()[point];
    let mut order = cfg.schemes.clone();
    // SCA first so the optimal scheme can start from it.
    order.sort_by_key(|s| *s != Scheme::Sca);
    let mut sca_run: Option<SchemeRun> = None;
    let mut runs = BTreeMap::new();
    for scheme in order {
        let run = solve_scheme(scheme, &instance, &cfg.solvers, b2_seed, sca_run.as_ref())
            .map_err(|e| {
                if matches!(e, Error::Validation(_)) {
                    let name = format!("failed_p{point}_r{realization}_{scheme}.instance");
                    let path = cfg.output_dir.join(&name);
                    if fs::create_dir_all(&cfg.output_dir).is_ok()
                        && fs::write(&path, instance.to_text()).is_ok()
                    {
                        return Error::Validation(format!(
                            "{e}; instance saved to {}",
                            path.display()
                        ));
                    }
                }
                e
            })?;
        if scheme == Scheme::Sca {
            sca_run = Some(run.clone());
        }
        runs.insert(scheme, run);
    }
    Ok(cfg
        .schemes
        .iter()
        .map(|&scheme| {
            let run = &runs[&scheme];
            let rep = run.report.as_ref();
            RealizationRecord {
                point,
                sweep_value,
                realization,
                seed,
                scheme,
                status: run.result.status.to_string(),
                feasible: rep.is_some(),
                weighted: rep.map_or(0.0, |r| r.weighted_total),
                avg_pu: rep.map_or(0.0, RateReport::average_pu_throughput),
                avg_su: rep.map_or(0.0, RateReport::average_su_throughput),
                avg_user: rep.map_or(0.0, RateReport::average_user_throughput),
                error_bound: run.error_bound,
                seconds: run.seconds,
            }
        })
        .collect())
}

/// Runs every (point, realization) job in parallel and reduces in order.
/// Files are written when `write` is set.
pub fn run_sweep(cfg: &ExperimentConfig, write: bool) -> Result<SweepOutput> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.axis.len())
        .flat_map(|p| (0..cfg.realizations).map(move |r| (p, r)))
        .collect();
    let per_job: Vec<Vec<RealizationRecord>> = jobs
        .par_iter()
        .map(|&(p, r)| run_one(cfg, p, r))
        .collect::<Result<_>>()?;
    let records: Vec<RealizationRecord> = per_job.into_iter().flatten().collect();
    let rows = summarize(cfg, &records);
    let out = SweepOutput {
        axis: cfg.axis.name(),
        rows,
        records,
    };
    if write {
        write_outputs(cfg, &out)?;
    }
    Ok(out)
}

fn summarize(cfg: &ExperimentConfig, records: &[RealizationRecord]) -> Vec<MetricRow> {
    let values = cfg.axis.values();
    let mut rows = Vec::new();
    for (p, &v) in values.iter().enumerate() {
        for &scheme in &cfg.schemes {
            let all: Vec<&RealizationRecord> = records
                .iter()
                .filter(|r| r.point == p && r.scheme == scheme)
                .collect();
            let ok: Vec<&&RealizationRecord> = all.iter().filter(|r| r.feasible).collect();
            let mean = |f: fn(&RealizationRecord) -> f64| {
                if ok.is_empty() {
                    0.0
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            rows.push(MetricRow {
                sweep_value: v,
                scheme,
                avg_pu: mean(|r| r.avg_pu),
                avg_su: mean(|r| r.avg_su),
                avg_user: mean(|r| r.avg_user),
                avg_weighted: mean(|r| r.weighted),
                feasibility_rate: ok.len() as f64 / all.len().max(1) as f64,
                max_error_bound: ok.iter().map(|r| r.error_bound).fold(0.0, f64::max),
                solve_seconds: all.iter().map(|r| r.seconds).sum::<f64>() / all.len().max(1) as f64,
                realizations: ok.len(),
            });
        }
    }
    rows
}

pub const SUMMARY_HEADER: &str =
    "axis,sweep_value,scheme,avg_pu_throughput,avg_su_throughput,avg_user_throughput,avg_weighted_throughput,feasibility_rate,max_error_bound,realizations";
const RECORD_HEADER: &str =
    "point,sweep_value,realization,seed,scheme,status,feasible,weighted_throughput,avg_pu_throughput,avg_su_throughput,avg_user_throughput,error_bound";

/// Metric files: name and accessor.
const METRICS: [(&str, fn(&MetricRow) -> f64); 5] = [
    ("pu_throughput", |r| r.avg_pu),
    ("su_throughput", |r| r.avg_su),
    ("user_throughput", |r| r.avg_user),
    ("weighted_throughput", |r| r.avg_weighted),
    ("feasibility", |r| r.feasibility_rate),
];

fn write_outputs(cfg: &ExperimentConfig, out: &SweepOutput) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut timing = String::from("sweep_value,scheme,mean_solve_seconds\n");
    for r in &out.rows {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{}",
            out.axis,
            r.sweep_value,
            r.scheme,
            r.avg_pu,
            r.avg_su,
            r.avg_user,
            r.avg_weighted,
            r.feasibility_rate,
            r.max_error_bound,
            r.realizations
        );
        let _ = writeln!(timing, "{},{},{}", r.sweep_value, r.scheme, r.solve_seconds);
    }
    fs::write(dir.join("summary.csv"), summary)?;
    fs::write(dir.join("timing.csv"), timing)?;

    let mut records = format!("{RECORD_HEADER}\n");
    for r in &out.records {
        let _ = writeln!(
            records,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.point,
            r.sweep_value,
            r.realization,
            r.seed,
            r.scheme,
            r.status,
            r.feasible,
            r.weighted,
            r.avg_pu,
            r.avg_su,
            r.avg_user,
            r.error_bound
        );
    }
    fs::write(dir.join("realizations.csv"), records)?;

    for (name, get) in METRICS {
        let mut s = format!(
            "{},{}\n",
            out.axis,
            cfg.schemes
                .iter()
                .map(|s| s.name())
                .collect::<Vec<_>>()
                .join(",")
        );
        for v in cfg.axis.values() {
            let cells: Vec<String> = cfg
                .schemes
                .iter()
                .map(|&sc| {
                    out.rows
                        .iter()
                        .find(|r| r.sweep_value == v && r.scheme == sc)
                        .map_or(String::new(), |r| get(r).to_string())
                })
                .collect();
            let _ = writeln!(s, "{v},{}", cells.join(","));
        }
        fs::write(dir.join(format!("{name}.csv")), s)?;
    }

    let mut manifest = String::from("# crnoma sweep manifest\n");
    let _ = writeln!(manifest, "version = {}", env!("CARGO_PKG_VERSION"));
    manifest.push_str(&cfg.to_text());
    manifest.push_str("# instance seeds by realization\n");
    for r in 0..cfg.realizations {
        let _ = writeln!(manifest, "seed.{r} = {}", instance_seed(cfg.master_seed, r));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Spearman trend of a per-realization metric against the sweep value.
pub fn trend(
    records: &[RealizationRecord],
    scheme: Scheme,
    metric: fn(&RealizationRecord) -> f64,
) -> Spearman {
    let pts: Vec<&RealizationRecord> = records
        .iter()
        .filter(|r| r.scheme == scheme && r.feasible)
        .collect();
    let x: Vec<f64> = pts.iter().map(|r| r.sweep_value).collect();
    let y: Vec<f64> = pts.iter().map(|r| metric(r)).collect();
    spearman(&x, &y)
}

/// Summary rows parsed back from `summary.csv`.
pub fn read_summary(path: &Path) -> Result<(String, Vec<MetricRow>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(Error::Compare(format!(
            "{}: not a summary file",
            path.display()
        )));
    }
    let mut axis = None;
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 10 {
            return Err(Error::Compare(format!(
                "{}: malformed row '{line}'",
                path.display()
            )));
        }
        let f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Compare(format!("bad number '{s}'")))
        };
        match &axis {
            None => axis = Some(c[0].to_string()),
            Some(a) if a != c[0] => {
                return Err(Error::Compare("mixed sweep axes in one file".into()))
            }
            _ => {}
        }
        rows.push(MetricRow {
            sweep_value: f(c[1])?,
            scheme: c[2]
                .parse()
                .map_err(|_| Error::Compare(format!("unknown scheme '{}'", c[2])))?,
            avg_pu: f(c[3])?,
            avg_su: f(c[4])?,
            avg_user: f(c[5])?,
            avg_weighted: f(c[6])?,
            feasibility_rate: f(c[7])?,
            max_error_bound: f(c[8])?,
            solve_seconds: 0.0,
            realizations: c[9]
                .parse()
                .map_err(|_| Error::Compare(format!("bad count '{}'", c[9])))?,
        });
    }
    Ok((axis.unwrap_or_default(), rows))
}

fn read_records(path: &Path) -> Result<Vec<RealizationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let c: Vec<&str> = line.split(',').collect();
        let bad = || Error::Compare(format!("{}: malformed row '{line}'", path.display()));
        if c.len() != 12 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(RealizationRecord {
            point: c[0].parse().map_err(|_| bad())?,
            sweep_value: f(c[1])?,
            realization: c[2].parse().map_err(|_| bad())?,
            seed: c[3].parse().map_err(|_| bad())?,
            scheme: c[4].parse().map_err(|_| bad())?,
            status: c[5].to_string(),
            feasible: c[6] == "true",
            weighted: f(c[7])?,
            avg_pu: f(c[8])?,
            avg_su: f(c[9])?,
            avg_user: f(c[10])?,
            error_bound: f(c[11])?,
            seconds: 0.0,
        });
    }
    Ok(out)
}

/// Expected ordering of mean weighted throughput.
const ORDER: [Scheme; 4] = [
    Scheme::Optimal,
    Scheme::Sca,
    Scheme::Baseline1,
    Scheme::Baseline2,
];

/// Per-point ordering and gaps, and Spearman trends of the PU and SU
/// averages. Realization files next to each summary feed the trends.
pub fn compare_report(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Compare("no summary files given".into()));
    }
    let mut axis: Option<String> = None;
    let mut values: Option<BTreeSet<u64>> = None;
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut records: Vec<RealizationRecord> = Vec::new();
    for path in paths {
        let (a, rs) = read_summary(path)?;
        if axis.as_ref().is_some_and(|x| *x != a) {
            return Err(Error::Compare(format!(
                "{}: sweep axis {a} differs",
                path.display()
            )));
        }
        axis = Some(a);
        let vs: BTreeSet<u64> = rs.iter().map(|r| r.sweep_value.to_bits()).collect();
        if values.as_ref().is_some_and(|x| *x != vs) {
            return Err(Error::Compare(format!(
                "{}: sweep values differ",
                path.display()
            )));
        }
        values = Some(vs);
        for r in rs {
            if rows
                .iter()
                .any(|x| x.scheme == r.scheme && x.sweep_value == r.sweep_value)
            {
                return Err(Error::Compare(format!(
                    "scheme {} appears in more than one file",
                    r.scheme
                )));
            }
            rows.push(r);
        }
        let rec = path.with_file_name("realizations.csv");
        if rec.exists() {
            records.extend(read_records(&rec)?);
        }
    }
    let axis = axis.unwrap_or_default();
    let mut points: Vec<f64> = rows.iter().map(|r| r.sweep_value).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();

    let mut out = String::new();
    let _ = writeln!(out, "sweep axis: {axis}");
    for v in &points {
        let mut here: Vec<&MetricRow> = rows.iter().filter(|r| r.sweep_value == *v).collect();
        here.sort_by(|a, b| {
            b.avg_weighted
                .total_cmp(&a.avg_weighted)
                .then(a.scheme.cmp(&b.scheme))
        });
        let _ = writeln!(out, "\n{axis} = {v}");
        let _ = writeln!(
            out,
            "  {:<10} {:>10} {:>9} {:>9} {:>9} {:>8} {:>9}",
            "scheme", "weighted", "pu", "su", "user", "feasible", "vs_opt"
        );
        let opt = here
            .iter()
            .find(|r| r.scheme == Scheme::Optimal)
            .map(|r| r.avg_weighted);
        for r in &here {
            let rel = opt.map_or("-".to_string(), |o| {
                if o > 0.0 {
                    format!("{:.4}", r.avg_weighted / o)
                } else {
                    "-".into()
                }
            });
            let _ = writeln!(
                out,
                "  {:<10} {:>10.4} {:>9.4} {:>9.4} {:>9.4} {:>8.3} {:>9}",
                r.scheme.name(),
                r.avg_weighted,
                r.avg_pu,
                r.avg_su,
                r.avg_user,
                r.feasibility_rate,
                rel
            );
        }
        let present: Vec<&MetricRow> = ORDER
            .iter()
            .filter_map(|s| here.iter().find(|r| r.scheme == *s).copied())
            .collect();
        if present.len() >= 2 {
            let ok = present
                .windows(2)
                .all(|w| w[0].avg_weighted >= w[1].avg_weighted);
            let names: Vec<&str> = present.iter().map(|r| r.scheme.name()).collect();
            let _ = writeln!(
                out,
                "  ordering {}: {}",
                names.join(" >= "),
                if ok { "holds" } else { "violated" }
            );
        }
        if let (Some(o), Some(orc)) = (
            here.iter().find(|r| r.scheme == Scheme::Optimal),
            here.iter().find(|r| r.scheme == Scheme::Oracle),
        ) {
            let _ = writeln!(
                out,
                "  |optimal - oracle| = {:.3e} (oracle grid bound {:.3e})",
                (o.avg_weighted - orc.avg_weighted).abs(),
                orc.max_error_bound
            );
        }
    }
    if !records.is_empty() && points.len() >= 2 {
        let _ = writeln!(out, "\ntrends against {axis} (Spearman, per realization)");
        let schemes: BTreeSet<Scheme> = records.iter().map(|r| r.scheme).collect();
        for s in schemes {
            let pu = trend(&records, s, |r| r.avg_pu);
            let su = trend(&records, s, |r| r.avg_su);
            let _ = writeln!(
                out,
                "  {:<10} pu rho={:+.3} p={:.2e}   su rho={:+.3} p={:.2e}   n={}",
                s.name(),
                pu.rho,
                pu.p_value,
                su.rho,
                su.p_value,
                pu.n
            );
        }
    }
    Ok(out)
}
