//! End-to-end acceptance run: one PASS/FAIL line per criterion. Runs as a
//! plain binary (`harness = false`) so the lines are always printed.

use std::collections::BTreeMap;
use std::time::Instant;

use crnoma::baselines::{
    baseline1_solve, baseline2_solve, brute_force, Baseline2Options, OracleOptions,
};
use crnoma::harness::{run_sweep, trend, ExperimentConfig, RealizationRecord, Scheme, SweepAxis};
use crnoma::instance::{random_instance, InstanceOverrides, ProblemInstance, Topology};
use crnoma::monotonic::{
    box_bounds, in_g, in_h, polyblock_solve, polyblock_solve_from, project_onto_g, AuxiliaryPoint,
    PolyblockOptions,
};
use crnoma::rates::{validate_policy_with, ReceiverModel, Tolerance};
use crnoma::sca::{algorithm1_detailed, build_relaxed_problem, LogSum, ScaOptions, ScaOutcome};
use crnoma::solution::{SolveResult, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const EPSILON: f64 = 1e-2;
const PER_INSTANCE_LIMIT_S: f64 = 300.0;
const SUITE_LIMIT_S: f64 = 900.0;

fn instance(num_subcarriers: usize, seed: u64, r_req: f64) -> ProblemInstance {
    let mut t = Topology::desk_scale();
    t.num_subcarriers = num_subcarriers;
    let o = InstanceOverrides {
        r_req,
        ..InstanceOverrides::default()
    };
    random_instance(&t, seed, &o).expect("instance")
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(n: usize, title: &str, v: &Verdict) {
    println!(
        "criterion {n} {title}: {} | {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
}

/// Validation outcomes of every policy produced in the run.
#[derive(Default)]
struct Policies {
    checked: usize,
    failures: Vec<String>,
}

impl Policies {
    fn check(&mut self, what: &str, r: &SolveResult, inst: &ProblemInstance, rx: ReceiverModel) {
        if !r.status.has_policy() {
            return;
        }
        self.checked += 1;
        if let Err(v) = validate_policy_with(&r.policy, inst, Tolerance::default(), rx) {
            self.failures.push(format!("{what}: {v:?}"));
        }
    }
}

struct BatchCase {
    inst: ProblemInstance,
    reference: SolveResult,
    sca: ScaOutcome,
    b1: SolveResult,
    b2: SolveResult,
    pb_seconds: f64,
    oracle: Option<(SolveResult, f64)>,
}

fn solve_case(inst: ProblemInstance, with_oracle: bool) -> BatchCase {
    let opts = ScaOptions::default();
    let sca = algorithm1_detailed(&inst, &opts, None).expect("sca");
    let t0 = Instant::now();
    // Small cases are solved cold; larger ones start from the SCA policy.
    let reference = if with_oracle {
        polyblock_solve(&inst, &PolyblockOptions::default()).expect("polyblock")
    } else {
        let inc = sca.result.status.has_policy().then_some(&sca.result.policy);
        polyblock_solve_from(&inst, &PolyblockOptions::default(), inc).expect("polyblock")
    };
    let pb_seconds = t0.elapsed().as_secs_f64();
    let oracle = with_oracle.then(|| {
        let (r, res) = brute_force(&inst, &OracleOptions::default()).expect("oracle");
        (r, res.bound())
    });
    let b1 = baseline1_solve(&inst, &opts).expect("baseline1");
    let b2 = baseline2_solve(&inst, 7, &Baseline2Options::default()).expect("baseline2");
    BatchCase {
        inst,
        reference,
        sca,
        b1,
        b2,
        pb_seconds,
        oracle,
    }
}

fn criterion1(cases: &[BatchCase]) -> Verdict {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_diff: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    let mut bad = Vec::new();
    for (s, c) in cases.iter().enumerate() {
        let (bf, bound) = c.oracle.as_ref().expect("oracle run");
        slowest = slowest.max(c.pb_seconds);
        let both = (c.reference.status.has_policy(), bf.status.has_policy());
        let diff = match both {
            (true, true) => (c.reference.objective - bf.objective).abs(),
            (false, false) => 0.0,
            _ => f64::INFINITY,
        };
        worst_diff = worst_diff.max(diff);
        let excess = diff - (EPSILON + bound);
        worst_excess = worst_excess.max(excess);
        if excess > 0.0 || c.pb_seconds >= PER_INSTANCE_LIMIT_S {
            bad.push(s);
        }
    }
    Verdict {
        pass: bad.is_empty(),
        detail: format!(
            "{} instances, max |pb-bf| {worst_diff:.3e}, max excess over eps+L*delta {worst_excess:.3e}, slowest {slowest:.2}s, failing {bad:?}",
            cases.len()
        ),
    }
}

fn criterion2(cases: &[BatchCase]) -> Verdict {
    let ratios: Vec<f64> = cases
        .iter()
        .filter(|c| c.reference.status.has_policy())
        .map(|c| {
            if !c.sca.result.status.has_policy() {
                0.0
            } else if c.reference.objective <= 0.0 {
                1.0
            } else {
                c.sca.result.objective / c.reference.objective
            }
        })
        .collect();
    let n = ratios.len();
    let above95 = ratios.iter().filter(|&&r| r >= 0.95).count();
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let frac = above95 as f64 / n.max(1) as f64;
    Verdict {
        pass: n > 0 && frac >= 0.90 && min >= 0.90,
        detail: format!(
            "{n} instances, {:.1}% at >= 0.95, min ratio {min:.4}",
            100.0 * frac
        ),
    }
}

/// Rows with the same penalty factor must not increase.
fn worst_rise(trace: &Trace) -> f64 {
    let rho = trace
        .columns
        .iter()
        .position(|c| *c == "rho")
        .expect("rho column");
    let obj = trace
        .columns
        .iter()
        .position(|c| *c == "penalized_objective")
        .expect("objective column");
    trace
        .rows
        .windows(2)
        .filter(|w| w[0][rho] == w[1][rho])
        .map(|w| w[1][obj] - w[0][obj])
        .fold(f64::NEG_INFINITY, f64::max)
}

fn criterion3(cases: &[BatchCase]) -> Verdict {
    let mut worst = f64::NEG_INFINITY;
    let mut steps = 0;
    let mut rejected = 0;
    for c in cases {
        let t = &c.sca.result.trace;
        worst = worst.max(worst_rise(t));
        steps += t.rows.len();
        rejected += c.sca.diagnostics.rejected_steps;
    }
    Verdict {
        pass: worst <= 1e-9,
        detail: format!(
            "{steps} iterations over {} instances, largest rise {worst:.3e}, steps refused by the descent guard {rejected}",
            cases.len()
        ),
    }
}

fn criterion4(cases: &[BatchCase]) -> Verdict {
    let n = cases.len();
    let integral = cases
        .iter()
        .filter(|c| c.sca.relaxed.is_some() && c.sca.diagnostics.max_fractionality <= 1e-3)
        .count();
    let deltas: Vec<f64> = cases
        .iter()
        .filter(|c| c.sca.relaxed.is_some())
        .map(|c| c.sca.diagnostics.rounding_delta)
        .collect();
    let worst_delta = deltas.iter().copied().fold(0.0, f64::max);
    let small = deltas.iter().filter(|&&d| d < 1e-6).count();
    let worst_frac = cases
        .iter()
        .map(|c| c.sca.diagnostics.max_fractionality)
        .fold(0.0, f64::max);
    let frac_ok = integral as f64 >= 0.99 * n as f64;
    Verdict {
        pass: frac_ok && small == deltas.len(),
        detail: format!(
            "binaries within 1e-3 on {integral}/{n} (worst {worst_frac:.2e}); rounding change < 1e-6 on {small}/{} (worst {worst_delta:.3e} bits/s/Hz)",
            deltas.len()
        ),
    }
}

/// Means over realizations where every listed scheme is feasible.
fn paired_means(
    records: &[RealizationRecord],
    schemes: &[Scheme],
    metric: fn(&RealizationRecord) -> f64,
) -> BTreeMap<usize, (f64, Vec<f64>, usize)> {
    let mut by_point: BTreeMap<(usize, usize), Vec<&RealizationRecord>> = BTreeMap::new();
    for r in records {
        by_point
            .entry((r.point, r.realization))
            .or_default()
            .push(r);
    }
    let mut out: BTreeMap<usize, (f64, Vec<f64>, usize)> = BTreeMap::new();
    for ((p, _), recs) in by_point {
        let vals: Option<Vec<f64>> = schemes
            .iter()
            .map(|s| {
                recs.iter()
                    .find(|r| r.scheme == *s && r.feasible)
                    .map(|r| metric(r))
            })
            .collect();
        let value = recs[0].sweep_value;
        let e = out.entry(p).or_insert((value, vec![0.0; schemes.len()], 0));
        if let Some(v) = vals {
            for (acc, x) in e.1.iter_mut().zip(v) {
                *acc += x;
            }
            e.2 += 1;
        }
    }
    for e in out.values_mut() {
        let n = e.2.max(1) as f64;
        e.1.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn criterion6(records: &[RealizationRecord]) -> Verdict {
    let order = [
        Scheme::Optimal,
        Scheme::Sca,
        Scheme::Baseline1,
        Scheme::Baseline2,
    ];
    let means = paired_means(records, &order, |r| r.weighted);
    let mut violations = Vec::new();
    let mut table = Vec::new();
    for (value, m, n) in means.values() {
        table.push(format!(
            "{value}:[{}] n={n}",
            m.iter()
                .map(|x| format!("{x:.2}"))
                .collect::<Vec<_>>()
                .join(",")
        ));
        for w in 0..order.len() - 1 {
            if m[w] < m[w + 1] - 1e-9 * m[w].abs().max(1.0) {
                violations.push(format!("{}<{} at {value}", order[w], order[w + 1]));
            }
        }
    }
    let mut trends = Vec::new();
    let mut trend_ok = true;
    for s in [Scheme::Optimal, Scheme::Sca] {
        let pu = trend(records, s, |r| r.avg_pu);
        let su = trend(records, s, |r| r.avg_su);
        trend_ok &= pu.rho < 0.0 && pu.p_value < 0.05 && su.rho > 0.0 && su.p_value < 0.05;
        trends.push(format!(
            "{s} pu rho={:.3} p={:.2e}, su rho={:.3} p={:.2e}",
            pu.rho, pu.p_value, su.rho, su.p_value
        ));
    }
    Verdict {
        pass: violations.is_empty() && trend_ok,
        detail: format!(
            "paired means (opt,sca,b1,b2) {}; ordering violations {violations:?}; trends: {}",
            table.join(" "),
            trends.join("; ")
        ),
    }
}

fn criterion7(r1: &[RealizationRecord], r2: &[RealizationRecord], schemes: &[Scheme]) -> Verdict {
    let mut problems = Vec::new();
    let mut lines = Vec::new();
    for &s in schemes {
        // Same seeds at both requirements, so realizations pair up.
        let mut joined: Vec<RealizationRecord> =
            r1.iter().filter(|r| r.scheme == s).cloned().collect();
        joined.extend(
            r2.iter()
                .filter(|r| r.scheme == s)
                .map(|r| RealizationRecord {
                    scheme: Scheme::Oracle,
                    ..r.clone()
                }),
        );
        let paired = paired_means(&joined, &[s, Scheme::Oracle], |r| r.avg_user);
        for (value, m, n) in paired.values() {
            lines.push(format!(
                "{s} K=J={value}: r1 {:.3} r2 {:.3} (n={n})",
                m[0], m[1]
            ));
            if m[1] > m[0] + 1e-9 {
                problems.push(format!("{s} r_req=2 above r_req=1 at K=J={value}"));
            }
        }
        for (tag, recs) in [("r1", r1), ("r2", r2)] {
            let mut per_point: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
            for r in recs.iter().filter(|r| r.scheme == s && r.feasible) {
                let e = per_point.entry(r.point).or_insert((r.sweep_value, 0.0, 0));
                e.1 += r.avg_user;
                e.2 += 1;
            }
            let series: Vec<(f64, f64)> = per_point
                .values()
                .map(|e| (e.0, e.1 / e.2.max(1) as f64))
                .collect();
            lines.push(format!(
                "{s} {tag} means {}",
                series
                    .iter()
                    .map(|(v, m)| format!("{v}:{m:.3}"))
                    .collect::<Vec<_>>()
                    .join(",")
            ));
            for w in series.windows(2) {
                if w[1].1 < w[0].1 - 1e-9 {
                    problems.push(format!(
                        "{s} {tag} decreases from K=J={} to {}",
                        w[0].0, w[1].0
                    ));
                }
            }
        }
    }
    Verdict {
        pass: problems.is_empty(),
        detail: format!("{}; violations {problems:?}", lines.join("; ")),
    }
}

fn random_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

fn gradient_check() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut points = 0;
    let mut worst: f64 = 0.0;
    for s in 0..10u64 {
        let inst = instance(2 + (s as usize % 3), 3000 + s, (s % 2) as f64);
        let m = build_relaxed_problem(&inst, ReceiverModel::Sic);
        let parts: Vec<&LogSum> = [&m.dc.a, &m.dc.b]
            .into_iter()
            .chain(m.dc.relay.iter().flat_map(|(b, d)| [b, d]))
            .chain(m.dc.qos.iter().flat_map(|(r, t)| [r, t]))
            .collect();
        for _ in 0..10 {
            let x: Vec<f64> = (0..m.n)
                .map(|j| random_in(&mut rng, m.lower[j], m.upper[j]))
                .collect();
            points += 1;
            for part in &parts {
                for (j, g) in part.gradient(&x) {
                    let h = 1e-6 * m.upper[j].max(1e-3);
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (part.value(&xp) - part.value(&xm)) / (2.0 * h);
                    worst = worst.max((g - fd).abs() / g.abs().max(1e-8));
                }
            }
        }
    }
    (points, worst)
}

fn random_aux(rng: &mut ChaCha8Rng, inst: &ProblemInstance) -> AuxiliaryPoint {
    let b = box_bounds(inst);
    AuxiliaryPoint {
        u: b.u_max.mapv(|m| random_in(rng, 1.0, m)),
        v: b.v_max.mapv(|m| random_in(rng, 1.0, m)),
        xi: b.xi_max.mapv(|m| random_in(rng, 1.0, m)),
    }
}

/// Like [`random_aux`] but with one mode per subcarrier: idle, direct `k`
/// or pair `(k, j)`.
fn random_single_mode(rng: &mut ChaCha8Rng, inst: &ProblemInstance) -> AuxiliaryPoint {
    let (num_pu, num_su, n) = inst.dims();
    let mut p = random_aux(rng, inst);
    for i in 0..n {
        let pick = rng.random_range(0..1 + num_pu + num_pu * num_su);
        for k in 0..num_pu {
            if pick != 1 + k {
                p.xi[[k, i]] = 1.0;
            }
            for j in 0..num_su {
                if pick != 1 + num_pu + k * num_su + j {
                    p.u[[k, j, i]] = 1.0;
                    p.v[[k, j, i]] = 1.0;
                }
            }
        }
    }
    p
}

/// `(pairs, failures)` for `G` (shrinking a member) and `H` (growing a member).
fn set_checks() -> ((usize, usize), (usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut g_pairs, mut g_bad, mut h_pairs, mut h_bad) = (0, 0, 0, 0);
    let mut s = 0u64;
    while g_pairs < 1000 || h_pairs < 1000 {
        let inst = instance(2, 4000 + s, [0.0, 1.0, 3.0][s as usize % 3]);
        s += 1;
        let bounds = box_bounds(&inst);
        for _ in 0..20 {
            if g_pairs < 1000 {
                let x = project_onto_g(&random_single_mode(&mut rng, &inst), &inst);
                let y = AuxiliaryPoint {
                    u: x.u.mapv(|a| 1.0 + rng.random::<f64>() * (a - 1.0)),
                    v: x.v.mapv(|a| 1.0 + rng.random::<f64>() * (a - 1.0)),
                    xi: x.xi.mapv(|a| 1.0 + rng.random::<f64>() * (a - 1.0)),
                };
                g_pairs += 1;
                if !(in_g(&x, &inst).unwrap_or(false) && in_g(&y, &inst).unwrap_or(false)) {
                    g_bad += 1;
                }
            }
            if h_pairs < 1000 {
                let x = random_aux(&mut rng, &inst);
                if in_h(&x, &inst) {
                    let y = AuxiliaryPoint {
                        u: ndarray::Zip::from(&x.u)
                            .and(&bounds.u_max)
                            .map_collect(|&a, &m| a + rng.random::<f64>() * (m - a)),
                        v: ndarray::Zip::from(&x.v)
                            .and(&bounds.v_max)
                            .map_collect(|&a, &m| a + rng.random::<f64>() * (m - a)),
                        xi: ndarray::Zip::from(&x.xi)
                            .and(&bounds.xi_max)
                            .map_collect(|&a, &m| a + rng.random::<f64>() * (m - a)),
                    };
                    h_pairs += 1;
                    if !in_h(&y, &inst) {
                        h_bad += 1;
                    }
                }
            }
        }
    }
    ((g_pairs, g_bad), (h_pairs, h_bad))
}

fn sweep_records(
    cfg: &ExperimentConfig,
    policies: &mut Policies,
    label: &str,
) -> Vec<RealizationRecord> {
    match run_sweep(cfg, false) {
        Ok(out) => {
            policies.checked += out.records.iter().filter(|r| r.feasible).count();
            out.records
        }
        Err(e) => {
            policies.failures.push(format!("{label} sweep: {e}"));
            Vec::new()
        }
    }
}

fn main() {
    let start = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut policies = Policies::default();

    let small: Vec<BatchCase> = (0..30u64)
        .into_par_iter()
        .map(|s| solve_case(instance(2, 1000 + s, (s % 2) as f64), true))
        .collect();
    let medium: Vec<BatchCase> = (0..50u64)
        .into_par_iter()
        .map(|s| solve_case(instance(4, 2000 + s, (s % 2) as f64), false))
        .collect();
    eprintln!("batch solved in {:.1}s", start.elapsed().as_secs_f64());
    let batch: Vec<&BatchCase> = small.iter().chain(medium.iter()).collect();
    for c in &batch {
        policies.check("optimal", &c.reference, &c.inst, ReceiverModel::Sic);
        policies.check("sca", &c.sca.result, &c.inst, ReceiverModel::Sic);
        policies.check("baseline1", &c.b1, &c.inst, ReceiverModel::TreatAsNoise);
        policies.check("baseline2", &c.b2, &c.inst, ReceiverModel::Sic);
        if let Some((bf, _)) = &c.oracle {
            policies.check("oracle", bf, &c.inst, ReceiverModel::Sic);
        }
    }
    let all: Vec<BatchCase> = small.into_iter().chain(medium).collect();
    verdicts.push((1, "oracle equivalence", criterion1(&all[..30])));
    verdicts.push((2, "suboptimal quality", criterion2(&all)));
    verdicts.push((3, "MM descent", criterion3(&all)));
    verdicts.push((4, "penalty integrality", criterion4(&all)));

    let t6 = Instant::now();
    let cfg6 = ExperimentConfig::default();
    let rec6 = sweep_records(&cfg6, &mut policies, "distance");
    eprintln!("distance sweep in {:.1}s", t6.elapsed().as_secs_f64());

    let t7 = Instant::now();
    let schemes7 = vec![Scheme::Sca, Scheme::Baseline2];
    let users = |r_req: f64| {
        let mut cfg = ExperimentConfig {
            axis: SweepAxis::NumUsers(vec![1, 2, 3]),
            schemes: schemes7.clone(),
            ..ExperimentConfig::default()
        };
        cfg.topology.set_normalized_distance(0.6);
        cfg.overrides.r_req = r_req;
        cfg
    };
    let rec7a = sweep_records(&users(1.0), &mut policies, "users r_req=1");
    let rec7b = sweep_records(&users(2.0), &mut policies, "users r_req=2");
    eprintln!("user sweeps in {:.1}s", t7.elapsed().as_secs_f64());

    verdicts.push((
        5,
        "feasibility",
        Verdict {
            pass: policies.failures.is_empty(),
            detail: format!(
                "{} policies validated, {} failures {:?}",
                policies.checked,
                policies.failures.len(),
                policies.failures.iter().take(3).collect::<Vec<_>>()
            ),
        },
    ));
    verdicts.push((6, "scheme ordering and trends", criterion6(&rec6)));
    verdicts.push((
        7,
        "QoS and user-count monotonicity",
        criterion7(&rec7a, &rec7b, &schemes7),
    ));

    let (points, worst_grad) = gradient_check();
    let ((gp, gb), (hp, hb)) = set_checks();
    let elapsed = start.elapsed().as_secs_f64();
    verdicts.push((
        8,
        "numerical hygiene",
        Verdict {
            pass: worst_grad <= 1e-5 && gb == 0 && hb == 0 && elapsed < SUITE_LIMIT_S,
            detail: format!(
                "{points} gradient points, worst relative error {worst_grad:.2e}; G normal {gp} pairs {gb} failures; H conormal {hp} pairs {hb} failures; acceptance run {elapsed:.0}s"
            ),
        },
    ));

    for (n, title, v) in &verdicts {
        report(*n, title, v);
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.2.pass).map(|v| v.0).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria PASS");
    } else {
        println!("acceptance: FAIL on {failed:?}");
        std::process::exit(1);
    }
}
