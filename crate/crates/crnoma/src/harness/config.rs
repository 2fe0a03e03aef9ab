//! Experiment configuration: flat `section.key = value` text.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::baselines::{Baseline2Options, OracleOptions};
use crate::error::{Error, Result};
use crate::instance::{dbm_to_watts, InstanceOverrides, Topology};
use crate::monotonic::PolyblockOptions;
use crate::sca::ScaOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Optimal,
    Sca,
    Baseline1,
    Baseline2,
    Oracle,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Optimal,
        Scheme::Sca,
        Scheme::Baseline1,
        Scheme::Baseline2,
        Scheme::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Optimal => "optimal",
            Scheme::Sca => "sca",
            Scheme::Baseline1 => "baseline1",
            Scheme::Baseline2 => "baseline2",
            Scheme::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    NormalizedDistance(Vec<f64>),
    /// `K = J` values.
    NumUsers(Vec<usize>),
    /// Per-PU rate requirement.
    Qos(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::NormalizedDistance(_) => "normalized_distance",
            SweepAxis::NumUsers(_) => "num_users",
            SweepAxis::Qos(_) => "qos",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            SweepAxis::NormalizedDistance(v) | SweepAxis::Qos(v) => v.clone(),
            SweepAxis::NumUsers(v) => v.iter().map(|&k| k as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::NormalizedDistance(v) | SweepAxis::Qos(v) => v.len(),
            SweepAxis::NumUsers(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Topology and overrides at sweep point `p`.
    pub fn apply(&self, p: usize, topology: &mut Topology, overrides: &mut InstanceOverrides) {
        match self {
            SweepAxis::NormalizedDistance(v) => topology.set_normalized_distance(v[p]),
            SweepAxis::NumUsers(v) => {
                topology.num_pu = v[p];
                topology.num_su = v[p];
            }
            SweepAxis::Qos(v) => overrides.r_req = v[p],
        }
    }
}

/// Solver settings shared by `solve` and `sweep`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub optimal: PolyblockOptions,
    pub sca: ScaOptions,
    pub baseline2: Baseline2Options,
    pub oracle: OracleOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            optimal: PolyblockOptions::default(),
            sca: ScaOptions::default(),
            baseline2: Baseline2Options::default(),
            oracle: OracleOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub topology: Topology,
    pub overrides: InstanceOverrides,
    pub schemes: Vec<Scheme>,
    pub axis: SweepAxis,
    pub realizations: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub solvers: SolverOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            topology: Topology::desk_scale(),
            overrides: InstanceOverrides::default(),
            schemes: vec![
                Scheme::Optimal,
                Scheme::Sca,
                Scheme::Baseline1,
                Scheme::Baseline2,
            ],
            axis: SweepAxis::NormalizedDistance(vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]),
            realizations: 50,
            master_seed: 1,
            output_dir: PathBuf::from("results"),
            solvers: SolverOptions::default(),
        }
    }
}

/// `(key, meaning)` for every accepted key; defaults come from
/// [`ExperimentConfig::default`].
const KEYS: &[(&str, &str)] = &[
    ("topology.num_subcarriers", "subcarriers N_F"),
    ("topology.num_pu", "primary users K"),
    ("topology.num_su", "secondary users J"),
    (
        "topology.normalized_distance",
        "station separation, (L - d_ref)/(d_pt_max - d_ref)",
    ),
    ("topology.d_ref", "reference distance, m"),
    ("topology.d_pt_max", "primary service radius, m"),
    ("topology.d_st_max", "secondary service radius, m"),
    ("topology.pathloss_exponent", "path-loss exponent"),
    ("topology.gain_pt_dbi", "primary station antenna gain, dBi"),
    (
        "topology.gain_st_dbi",
        "secondary station antenna gain, dBi",
    ),
    ("topology.carrier_hz", "carrier frequency, Hz"),
    ("topology.subcarrier_bw_hz", "subcarrier bandwidth, Hz"),
    ("topology.noise_dbm", "noise per subcarrier, dBm"),
    ("instance.p_max_pt_dbm", "primary station budget, dBm"),
    ("instance.p_max_st_dbm", "secondary station budget, dBm"),
    ("instance.r_req", "PU rate requirement, bits/s/Hz"),
    ("instance.weight_pu", "PU weight w"),
    ("instance.weight_su", "SU weight mu"),
    ("sweep.axis", "normalized_distance | num_users | qos"),
    ("sweep.values", "comma-separated sweep values"),
    ("sweep.realizations", "instances per sweep point"),
    ("sweep.master_seed", "seed all instance seeds derive from"),
    (
        "sweep.schemes",
        "comma-separated: optimal, sca, baseline1, baseline2, oracle",
    ),
    ("output.dir", "output directory"),
    ("optimal.epsilon", "polyblock tolerance, bits/s/Hz"),
    ("optimal.max_iter", "polyblock iteration cap"),
    (
        "sca.rho",
        "penalty factor, or 'auto' for 10 log2(1 + P_st/noise)",
    ),
    ("sca.delta_obj", "relative change that ends the SCA loop"),
    ("sca.theta_bin", "integrality tolerance of relaxed binaries"),
    ("sca.max_outer", "outer iterations per penalty level"),
    (
        "sca.max_escalations",
        "penalty x4 retries when binaries stay fractional",
    ),
    (
        "baseline2.redraws",
        "random assignments tried before giving up",
    ),
    (
        "baseline2.secondary_only",
        "randomize only the SU pairing (true/false)",
    ),
    ("oracle.levels", "grid points per power variable"),
    ("oracle.refinements", "x5 grid refinements"),
];

fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Defaults overridden by the keys present in `text`. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        let mut axis_name: Option<String> = None;
        let mut values: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            match key {
                "sweep.axis" => axis_name = Some(value.to_string()),
                "sweep.values" => values = Some(value.to_string()),
                _ => cfg.set(key, value)?,
            }
        }
        if axis_name.is_some() || values.is_some() {
            let name = axis_name.unwrap_or_else(|| cfg.axis.name().to_string());
            let values = match values {
                Some(v) => v,
                None if name == cfg.axis.name() => join(&cfg.axis.values()),
                None => {
                    return Err(Error::Config(
                        "sweep.values is required with a non-default sweep.axis".into(),
                    ))
                }
            };
            cfg.axis = match name.as_str() {
                "normalized_distance" => {
                    SweepAxis::NormalizedDistance(parse_list("sweep.values", &values)?)
                }
                "num_users" => SweepAxis::NumUsers(parse_list("sweep.values", &values)?),
                "qos" => SweepAxis::Qos(parse_list("sweep.values", &values)?),
                other => return Err(Error::Config(format!("unknown sweep axis '{other}'"))),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.topology;
        let o = &mut self.overrides;
        let s = &mut self.solvers;
        match key {
            "topology.num_subcarriers" => t.num_subcarriers = parse(key, value)?,
            "topology.num_pu" => t.num_pu = parse(key, value)?,
            "topology.num_su" => t.num_su = parse(key, value)?,
            "topology.normalized_distance" => t.set_normalized_distance(parse(key, value)?),
            "topology.d_ref" => {
                let d = t.normalized_distance();
                t.d_ref = parse(key, value)?;
                t.set_normalized_distance(d);
            }
            "topology.d_pt_max" => {
                let d = t.normalized_distance();
                t.d_pt_max = parse(key, value)?;
                t.set_normalized_distance(d);
            }
            "topology.d_st_max" => t.d_st_max = parse(key, value)?,
            "topology.pathloss_exponent" => t.pathloss_exponent = parse(key, value)?,
            "topology.gain_pt_dbi" => t.gain_pt_dbi = parse(key, value)?,
            "topology.gain_st_dbi" => t.gain_st_dbi = parse(key, value)?,
            "topology.carrier_hz" => t.carrier_hz = parse(key, value)?,
            "topology.subcarrier_bw_hz" => t.subcarrier_bw_hz = parse(key, value)?,
            "topology.noise_dbm" => t.noise_dbm = parse(key, value)?,
            "instance.p_max_pt_dbm" => o.p_max_pt = dbm_to_watts(parse(key, value)?),
            "instance.p_max_st_dbm" => o.p_max_st = dbm_to_watts(parse(key, value)?),
            "instance.r_req" => o.r_req = parse(key, value)?,
            "instance.weight_pu" => o.weight_pu = parse(key, value)?,
            "instance.weight_su" => o.weight_su = parse(key, value)?,
            "sweep.realizations" => self.realizations = parse(key, value)?,
            "sweep.master_seed" => self.master_seed = parse(key, value)?,
            "sweep.schemes" => self.schemes = parse_list(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "optimal.epsilon" => s.optimal.epsilon = parse(key, value)?,
            "optimal.max_iter" => s.optimal.max_iter = parse(key, value)?,
            "sca.rho" => {
                s.sca.rho = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "sca.delta_obj" => s.sca.delta_obj = parse(key, value)?,
            "sca.theta_bin" => s.sca.theta_bin = parse(key, value)?,
            "sca.max_outer" => s.sca.max_outer = parse(key, value)?,
            "sca.max_escalations" => s.sca.max_escalations = parse(key, value)?,
            "baseline2.redraws" => s.baseline2.redraws = parse(key, value)?,
            "baseline2.secondary_only" => s.baseline2.secondary_only = parse(key, value)?,
            "oracle.levels" => s.oracle.levels = parse(key, value)?,
            "oracle.refinements" => s.oracle.refinements = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.realizations == 0 {
            return bad("sweep.realizations must be at least 1".into());
        }
        if self.schemes.is_empty() {
            return bad("sweep.schemes is empty".into());
        }
        if self.axis.is_empty() {
            return bad("sweep.values is empty".into());
        }
        match &self.axis {
            SweepAxis::NormalizedDistance(v) => {
                if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return bad(format!("normalized distance {x} outside [0, 1]"));
                }
            }
            SweepAxis::NumUsers(v) => {
                if v.contains(&0) {
                    return bad("num_users values must be positive".into());
                }
            }
            SweepAxis::Qos(v) => {
                if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                    return bad(format!("rate requirement {x} is negative"));
                }
            }
        }
        if self.solvers.oracle.levels < 8 {
            return bad("oracle.levels must be at least 8".into());
        }
        for p in 0..self.axis.len() {
            let (t, o) = self.point(p);
            t.validate().map_err(|e| Error::Config(e.to_string()))?;
            if !(o.p_max_pt > 0.0
                && o.p_max_st > 0.0
                && o.r_req >= 0.0
                && o.weight_pu >= 0.0
                && o.weight_su >= 0.0)
            {
                return bad("budgets must be positive, rates and weights nonnegative".into());
            }
            let cap = &self.solvers.oracle;
            if self.schemes.contains(&Scheme::Oracle)
                && (t.num_subcarriers > cap.max_subcarriers
                    || t.num_pu > cap.max_pu
                    || t.num_su > cap.max_su)
            {
                return bad(format!(
                    "oracle needs N_F <= {}, K <= {}, J <= {}",
                    cap.max_subcarriers, cap.max_pu, cap.max_su
                ));
            }
        }
        Ok(())
    }

    /// Topology and overrides at sweep point `p`.
    pub fn point(&self, p: usize) -> (Topology, InstanceOverrides) {
        let mut t = self.topology.clone();
        let mut o = self.overrides.clone();
        self.axis.apply(p, &mut t, &mut o);
        (t, o)
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.topology;
        let o = &self.overrides;
        let s = &self.solvers;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("topology.num_subcarriers", t.num_subcarriers.to_string());
        put("topology.num_pu", t.num_pu.to_string());
        put("topology.num_su", t.num_su.to_string());
        put("topology.d_ref", t.d_ref.to_string());
        put("topology.d_pt_max", t.d_pt_max.to_string());
        put(
            "topology.normalized_distance",
            t.normalized_distance().to_string(),
        );
        put("topology.d_st_max", t.d_st_max.to_string());
        put(
            "topology.pathloss_exponent",
            t.pathloss_exponent.to_string(),
        );
        put("topology.gain_pt_dbi", t.gain_pt_dbi.to_string());
        put("topology.gain_st_dbi", t.gain_st_dbi.to_string());
        put("topology.carrier_hz", t.carrier_hz.to_string());
        put("topology.subcarrier_bw_hz", t.subcarrier_bw_hz.to_string());
        put("topology.noise_dbm", t.noise_dbm.to_string());
        put(
            "instance.p_max_pt_dbm",
            watts_to_dbm(o.p_max_pt).to_string(),
        );
        put(
            "instance.p_max_st_dbm",
            watts_to_dbm(o.p_max_st).to_string(),
        );
        put("instance.r_req", o.r_req.to_string());
        put("instance.weight_pu", o.weight_pu.to_string());
        put("instance.weight_su", o.weight_su.to_string());
        put("sweep.axis", self.axis.name().to_string());
        put("sweep.values", join(&self.axis.values()));
        put("sweep.realizations", self.realizations.to_string());
        put("sweep.master_seed", self.master_seed.to_string());
        put("sweep.schemes", join(&self.schemes));
        put("output.dir", self.output_dir.display().to_string());
        put("optimal.epsilon", s.optimal.epsilon.to_string());
        put("optimal.max_iter", s.optimal.max_iter.to_string());
        put(
            "sca.rho",
            s.sca.rho.map_or("auto".to_string(), |r| r.to_string()),
        );
        put("sca.delta_obj", s.sca.delta_obj.to_string());
        put("sca.theta_bin", s.sca.theta_bin.to_string());
        put("sca.max_outer", s.sca.max_outer.to_string());
        put("sca.max_escalations", s.sca.max_escalations.to_string());
        put("baseline2.redraws", s.baseline2.redraws.to_string());
        put(
            "baseline2.secondary_only",
            s.baseline2.secondary_only.to_string(),
        );
        put("oracle.levels", s.oracle.levels.to_string());
        put("oracle.refinements", s.oracle.refinements.to_string());
        out
    }
}

/// Key reference with defaults, for `--help`.
pub fn config_reference() -> String {
    let defaults = ExperimentConfig::default().to_text();
    let mut out = String::new();
    for (key, doc) in KEYS {
        let value = defaults
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
            .unwrap_or("");
        let _ = writeln!(out, "  {key} = {value}\n      {doc}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.schemes, cfg.schemes);
        assert_eq!(back.axis, cfg.axis);
    }

    #[test]
    fn parses_sections_and_comments() {
        let text = "# users\nsweep.axis = num_users\nsweep.values = 1, 2,3\n\ntopology.num_subcarriers = 4 # small\nsca.rho = 100\nsweep.schemes = sca,baseline2\n";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.axis, SweepAxis::NumUsers(vec![1, 2, 3]));
        assert_eq!(cfg.topology.num_subcarriers, 4);
        assert_eq!(cfg.solvers.sca.rho, Some(100.0));
        assert_eq!(cfg.schemes, vec![Scheme::Sca, Scheme::Baseline2]);
        let (t, _) = cfg.point(2);
        assert_eq!((t.num_pu, t.num_su), (3, 3));
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "sweep.realizations = 0",
            "nope.key = 1",
            "sweep.values = 0.2, 1.5",
            "sweep.schemes = optimal, magic",
            "sweep.axis = qos",
            "topology.num_pu = 1\ntopology.num_pu = 2",
            "sweep.schemes = oracle",
            "oracle.levels = 4",
            "just words",
        ] {
            assert!(
                matches!(ExperimentConfig::from_text(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn distance_mapping_is_exact() {
        let cfg = ExperimentConfig::from_text("sweep.values = 0.25").unwrap();
        let (t, _) = cfg.point(0);
        assert_eq!(t.distance_pt_st, 10.0 + 0.25 * 490.0);
        assert!((t.normalized_distance() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reference_lists_every_key() {
        let r = config_reference();
        for (k, _) in KEYS {
            assert!(r.contains(k));
        }
        assert!(r.contains("sweep.realizations = 50"));
    }
}
