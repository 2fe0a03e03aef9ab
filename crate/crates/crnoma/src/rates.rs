//! Achievable rates, SIC admissibility, weighted throughput and the policy
//! validator.
//!
//! A subcarrier carries at most one transmission: idle, direct to one PU,
//! or one relayed NOMA pair. The pair mode needs the relay indicator, so
//! `Σ_{k,j} s_{k,j}^i ≤ c_ST^i` is checked alongside C7 and C8.

use std::f64::consts::LN_2;
use std::fmt;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::instance::{ChannelState, ProblemInstance};
use crate::textio;

#[inline]
pub fn log2_1p(x: f64) -> f64 {
    x.ln_1p() / LN_2
}

pub fn direct_rate(q: f64, f: f64) -> f64 {
    log2_1p(q * f)
}

pub fn relay_hop_rate(q_st: f64, f_st: f64) -> f64 {
    0.5 * log2_1p(q_st * f_st)
}

pub fn noma_pu_rate(p_pu: f64, p_su: f64, h: f64) -> f64 {
    0.5 * log2_1p(p_pu * h / (p_su * h + 1.0))
}

pub fn noma_su_rate(p_su: f64, g: f64) -> f64 {
    0.5 * log2_1p(p_su * g)
}

/// SU rate when the PU signal is treated as noise (no SIC).
pub fn tin_su_rate(p_su: f64, p_pu: f64, g: f64) -> f64 {
    0.5 * log2_1p(p_su * g / (p_pu * g + 1.0))
}

pub fn is_sic_admissible(channels: &ChannelState, i: usize, k: usize, j: usize) -> bool {
    channels.h_st_pu[[k, i]] <= channels.g_st_su[[j, i]]
}

/// All `(i, j, k)` with `H_k^i ≤ G_j^i`, ordered by subcarrier, then SU, then PU.
pub fn sic_admissible_pairs(channels: &ChannelState) -> Vec<(usize, usize, usize)> {
    let (num_pu, num_su, n) = channels.dims();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..num_su {
            for k in 0..num_pu {
                if is_sic_admissible(channels, i, k, j) {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

/// How the SU receiver handles the co-scheduled PU signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceiverModel {
    /// SIC at the SU; pairs must satisfy `H ≤ G`.
    Sic,
    /// PU signal treated as noise; any pair is allowed.
    TreatAsNoise,
}

impl ReceiverModel {
    pub fn su_rate(self, p_pu: f64, p_su: f64, g: f64) -> f64 {
        match self {
            ReceiverModel::Sic => noma_su_rate(p_su, g),
            ReceiverModel::TreatAsNoise => tin_su_rate(p_su, p_pu, g),
        }
    }

    pub fn pair_allowed(self, channels: &ChannelState, i: usize, k: usize, j: usize) -> bool {
        match self {
            ReceiverModel::Sic => is_sic_admissible(channels, i, k, j),
            ReceiverModel::TreatAsNoise => true,
        }
    }
}

/// The transmission carried by one subcarrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Idle,
    Direct(usize),
    Pair(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `c[k][i]`
    pub c_direct: Array2<bool>,
    /// `c_ST[i]`
    pub c_relay: Array1<bool>,
    /// `s[k][j][i]`
    pub s_pair: Array3<bool>,
}

impl Assignment {
    pub fn empty(num_pu: usize, num_su: usize, n: usize) -> Self {
        Assignment {
            c_direct: Array2::from_elem((num_pu, n), false),
            c_relay: Array1::from_elem(n, false),
            s_pair: Array3::from_elem((num_pu, num_su, n), false),
        }
    }

    pub fn from_modes(num_pu: usize, num_su: usize, modes: &[Mode]) -> Self {
        let mut a = Self::empty(num_pu, num_su, modes.len());
        for (i, m) in modes.iter().enumerate() {
            match *m {
                Mode::Idle => {}
                Mode::Direct(k) => a.c_direct[[k, i]] = true,
                Mode::Pair(k, j) => {
                    a.c_relay[i] = true;
                    a.s_pair[[k, j, i]] = true;
                }
            }
        }
        a
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (k, j, n) = self.s_pair.dim();
        (k, j, n)
    }

    /// Checks C7, C8 and single-mode use of subcarrier `i`.
    pub fn check_subcarrier(&self, i: usize) -> std::result::Result<(), ConstraintId> {
        let (num_pu, num_su, _) = self.dims();
        let direct = (0..num_pu).filter(|&k| self.c_direct[[k, i]]).count();
        if direct + self.c_relay[i] as usize > 1 {
            return Err(ConstraintId::C8 { i });
        }
        let mut pairs = 0;
        for k in 0..num_pu {
            let pk = (0..num_su).filter(|&j| self.s_pair[[k, j, i]]).count();
            if self.c_direct[[k, i]] as usize + pk > 1 {
                return Err(ConstraintId::C7 { i, k });
            }
            pairs += pk;
        }
        if pairs > self.c_relay[i] as usize {
            return Err(ConstraintId::SingleMode { i });
        }
        Ok(())
    }

    /// The mode of subcarrier `i`; a relay indicator without a pair is idle.
    pub fn mode(&self, i: usize) -> Result<Mode> {
        self.check_subcarrier(i)
            .map_err(|c| Error::InvalidAssignment(c.to_string()))?;
        let (num_pu, num_su, _) = self.dims();
        for k in 0..num_pu {
            if self.c_direct[[k, i]] {
                return Ok(Mode::Direct(k));
            }
            for j in 0..num_su {
                if self.s_pair[[k, j, i]] {
                    return Ok(Mode::Pair(k, j));
                }
            }
        }
        Ok(Mode::Idle)
    }

    pub fn modes(&self) -> Result<Vec<Mode>> {
        (0..self.dims().2).map(|i| self.mode(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    pub q_direct: Array2<f64>,
    pub q_relay: Array1<f64>,
    pub p_pu: Array2<f64>,
    pub p_su: Array2<f64>,
}

impl PowerAllocation {
    pub fn zeros(num_pu: usize, num_su: usize, n: usize) -> Self {
        PowerAllocation {
            q_direct: Array2::zeros((num_pu, n)),
            q_relay: Array1::zeros(n),
            p_pu: Array2::zeros((num_pu, n)),
            p_su: Array2::zeros((num_su, n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub assignment: Assignment,
    pub powers: PowerAllocation,
}

impl Policy {
    pub fn zeros(num_pu: usize, num_su: usize, n: usize) -> Self {
        Policy {
            assignment: Assignment::empty(num_pu, num_su, n),
            powers: PowerAllocation::zeros(num_pu, num_su, n),
        }
    }

    pub fn to_text(&self) -> String {
        let (k, j, n) = self.assignment.dims();
        let mut out = format!("crnoma-policy v1 K={k} J={j} NF={n}\n");
        textio::push_flags(&mut out, "c_direct", &self.assignment.c_direct);
        textio::push_flags(&mut out, "c_relay", &self.assignment.c_relay);
        textio::push_flags(&mut out, "s_pair", &self.assignment.s_pair);
        textio::push_array(&mut out, "q_direct", &self.powers.q_direct);
        textio::push_array(&mut out, "q_relay", &self.powers.q_relay);
        textio::push_array(&mut out, "p_pu", &self.powers.p_pu);
        textio::push_array(&mut out, "p_su", &self.powers.p_su);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = textio::parse_header(lines.next().unwrap_or_default(), "crnoma-policy")?;
        let k: usize = textio::header_value(&header, "K")?;
        let j: usize = textio::header_value(&header, "J")?;
        let n: usize = textio::header_value(&header, "NF")?;
        let mut arrays = textio::parse_arrays(lines)?;
        let flags = |v: Vec<f64>| -> Result<Vec<bool>> {
            v.into_iter()
                .map(|x| match x {
                    x if x == 0.0 => Ok(false),
                    x if x == 1.0 => Ok(true),
                    x => Err(Error::Parse(format!("binary entry {x} is not 0 or 1"))),
                })
                .collect()
        };
        let err = |e: ndarray::ShapeError| Error::Parse(e.to_string());
        Ok(Policy {
            assignment: Assignment {
                c_direct: Array2::from_shape_vec(
                    (k, n),
                    flags(textio::take_array(&mut arrays, "c_direct", k * n)?)?,
                )
                .map_err(err)?,
                c_relay: Array1::from(flags(textio::take_array(&mut arrays, "c_relay", n)?)?),
                s_pair: Array3::from_shape_vec(
                    (k, j, n),
                    flags(textio::take_array(&mut arrays, "s_pair", k * j * n)?)?,
                )
                .map_err(err)?,
            },
            powers: PowerAllocation {
                q_direct: Array2::from_shape_vec(
                    (k, n),
                    textio::take_array(&mut arrays, "q_direct", k * n)?,
                )
                .map_err(err)?,
                q_relay: Array1::from(textio::take_array(&mut arrays, "q_relay", n)?),
                p_pu: Array2::from_shape_vec(
                    (k, n),
                    textio::take_array(&mut arrays, "p_pu", k * n)?,
                )
                .map_err(err)?,
                p_su: Array2::from_shape_vec(
                    (j, n),
                    textio::take_array(&mut arrays, "p_su", j * n)?,
                )
                .map_err(err)?,
            },
        })
    }
}

/// Identifies one constraint of the allocation problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintId {
    Shape,
    /// Relayed PU rate within the relay-hop capacity.
    C1 {
        i: usize,
        k: usize,
        j: usize,
    },
    /// PU QoS.
    C2 {
        k: usize,
    },
    /// Secondary budget.
    C3,
    /// Primary budget.
    C4,
    C7 {
        i: usize,
        k: usize,
    },
    C8 {
        i: usize,
    },
    /// At most one pair, and only on a subcarrier handed to the secondary station.
    SingleMode {
        i: usize,
    },
    /// Nonnegative, finite power.
    C9,
    Sic {
        i: usize,
        k: usize,
        j: usize,
    },
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintId::Shape => write!(f, "shape"),
            ConstraintId::C1 { i, k, j } => write!(f, "C1(i={i},k={k},j={j})"),
            ConstraintId::C2 { k } => write!(f, "C2(k={k})"),
            ConstraintId::C3 => write!(f, "C3"),
            ConstraintId::C4 => write!(f, "C4"),
            ConstraintId::C7 { i, k } => write!(f, "C7(i={i},k={k})"),
            ConstraintId::C8 { i } => write!(f, "C8(i={i})"),
            ConstraintId::SingleMode { i } => write!(f, "single-mode(i={i})"),
            ConstraintId::C9 => write!(f, "C9"),
            ConstraintId::Sic { i, k, j } => write!(f, "SIC(i={i},k={k},j={j})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: ConstraintId,
    /// Amount by which the constraint is violated (positive).
    pub margin: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violated by {:.3e}", self.constraint, self.margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Additive, bits/s/Hz.
    pub rate: f64,
    /// Relative to the budget.
    pub budget_rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rate: 1e-6,
            budget_rel: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub pu_rate: Vec<f64>,
    pub su_rate: Vec<f64>,
    pub per_subcarrier_u: Vec<f64>,
    pub weighted_total: f64,
    pub qos_met: Vec<bool>,
    pub relay_constraint_met: bool,
}

impl RateReport {
    /// Sum of all user rates divided by the number of users.
    pub fn average_user_throughput(&self) -> f64 {
        let total: f64 = self.pu_rate.iter().chain(self.su_rate.iter()).sum();
        total / (self.pu_rate.len() + self.su_rate.len()).max(1) as f64
    }

    pub fn average_pu_throughput(&self) -> f64 {
        self.pu_rate.iter().sum::<f64>() / self.pu_rate.len().max(1) as f64
    }

    pub fn average_su_throughput(&self) -> f64 {
        self.su_rate.iter().sum::<f64>() / self.su_rate.len().max(1) as f64
    }
}

/// Per-link rates of one subcarrier under a given receiver model.
struct SubcarrierRates {
    /// (k, direct rate)
    direct: Option<(usize, f64)>,
    /// (k, j, PU rate, SU rate)
    pair: Option<(usize, usize, f64, f64)>,
}

fn subcarrier_rates(
    policy: &Policy,
    channels: &ChannelState,
    i: usize,
    model: ReceiverModel,
) -> Result<SubcarrierRates> {
    let p = &policy.powers;
    Ok(match policy.assignment.mode(i)? {
        Mode::Idle => SubcarrierRates {
            direct: None,
            pair: None,
        },
        Mode::Direct(k) => SubcarrierRates {
            direct: Some((
                k,
                direct_rate(p.q_direct[[k, i]], channels.f_direct[[k, i]]),
            )),
            pair: None,
        },
        Mode::Pair(k, j) => {
            let (pp, ps) = (p.p_pu[[k, i]], p.p_su[[j, i]]);
            SubcarrierRates {
                direct: None,
                pair: Some((
                    k,
                    j,
                    noma_pu_rate(pp, ps, channels.h_st_pu[[k, i]]),
                    model.su_rate(pp, ps, channels.g_st_su[[j, i]]),
                )),
            }
        }
    })
}

/// Weighted throughput `U^i` of subcarrier `i`.
pub fn subcarrier_throughput(
    policy: &Policy,
    channels: &ChannelState,
    weights: (f64, f64),
    i: usize,
) -> Result<f64> {
    subcarrier_throughput_with(policy, channels, weights, i, ReceiverModel::Sic)
}

pub fn subcarrier_throughput_with(
    policy: &Policy,
    channels: &ChannelState,
    (w, mu): (f64, f64),
    i: usize,
    model: ReceiverModel,
) -> Result<f64> {
    let r = subcarrier_rates(policy, channels, i, model)?;
    let mut u = 0.0;
    if let Some((_, c)) = r.direct {
        u += w * c;
    }
    if let Some((_, _, rp, rs)) = r.pair {
        u += w * rp + mu * rs;
    }
    Ok(u)
}

pub fn validate_policy(
    policy: &Policy,
    instance: &ProblemInstance,
    tol: Tolerance,
) -> std::result::Result<RateReport, Vec<Violation>> {
    validate_policy_with(policy, instance, tol, ReceiverModel::Sic)
}

/// Checks C1–C9, single-mode use, and (for SIC) pair admissibility.
pub fn validate_policy_with(
    policy: &Policy,
    instance: &ProblemInstance,
    tol: Tolerance,
    model: ReceiverModel,
) -> std::result::Result<RateReport, Vec<Violation>> {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let a = &policy.assignment;
    let p = &policy.powers;
    let shapes_ok = a.dims() == (num_pu, num_su, n)
        && a.c_direct.dim() == (num_pu, n)
        && a.c_relay.len() == n
        && p.q_direct.dim() == (num_pu, n)
        && p.q_relay.len() == n
        && p.p_pu.dim() == (num_pu, n)
        && p.p_su.dim() == (num_su, n);
    if !shapes_ok {
        return Err(vec![Violation {
            constraint: ConstraintId::Shape,
            margin: f64::INFINITY,
        }]);
    }

    let mut violations = Vec::new();
    let all_powers = p
        .q_direct
        .iter()
        .chain(&p.q_relay)
        .chain(&p.p_pu)
        .chain(&p.p_su);
    let worst_negative = all_powers.fold(0.0f64, |m, &x| {
        if x.is_finite() {
            m.max(-x)
        } else {
            f64::INFINITY
        }
    });
    if worst_negative > 0.0 {
        violations.push(Violation {
            constraint: ConstraintId::C9,
            margin: worst_negative,
        });
    }

    let mut pu_rate = vec![0.0; num_pu];
    let mut su_rate = vec![0.0; num_su];
    let mut per_subcarrier_u = vec![0.0; n];
    let mut relay_ok = true;
    let mut budget_pt = 0.0;
    let mut budget_st = 0.0;
    for i in 0..n {
        if let Err(c) = a.check_subcarrier(i) {
            violations.push(Violation {
                constraint: c,
                margin: 1.0,
            });
            continue;
        }
        for k in 0..num_pu {
            if a.c_direct[[k, i]] {
                budget_pt += p.q_direct[[k, i]];
            }
        }
        if a.c_relay[i] {
            budget_pt += p.q_relay[i];
        }
        let rates = subcarrier_rates(policy, ch, i, model).expect("subcarrier already checked");
        let mut u = 0.0;
        if let Some((k, c)) = rates.direct {
            pu_rate[k] += c;
            u += instance.weight_pu * c;
        }
        if let Some((k, j, rp, rs)) = rates.pair {
            budget_st += p.p_pu[[k, i]] + p.p_su[[j, i]];
            if model == ReceiverModel::Sic && !is_sic_admissible(ch, i, k, j) {
                violations.push(Violation {
                    constraint: ConstraintId::Sic { i, k, j },
                    margin: ch.h_st_pu[[k, i]] - ch.g_st_su[[j, i]],
                });
            }
            let capacity = if a.c_relay[i] {
                relay_hop_rate(p.q_relay[i], ch.f_relay_hop[i])
            } else {
                0.0
            };
            if rp - capacity > tol.rate {
                relay_ok = false;
                violations.push(Violation {
                    constraint: ConstraintId::C1 { i, k, j },
                    margin: rp - capacity,
                });
            }
            pu_rate[k] += rp;
            su_rate[j] += rs;
            u += instance.weight_pu * rp + instance.weight_su * rs;
        }
        per_subcarrier_u[i] = u;
    }

    let mut qos_met = vec![true; num_pu];
    for k in 0..num_pu {
        let short = instance.r_req[k] - pu_rate[k];
        if short > tol.rate {
            qos_met[k] = false;
            violations.push(Violation {
                constraint: ConstraintId::C2 { k },
                margin: short,
            });
        }
    }
    if budget_st > instance.p_max_st * (1.0 + tol.budget_rel) {
        violations.push(Violation {
            constraint: ConstraintId::C3,
            margin: budget_st - instance.p_max_st,
        });
    }
    if budget_pt > instance.p_max_pt * (1.0 + tol.budget_rel) {
        violations.push(Violation {
            constraint: ConstraintId::C4,
            margin: budget_pt - instance.p_max_pt,
        });
    }

    if violations.is_empty() {
        Ok(RateReport {
            weighted_total: per_subcarrier_u.iter().sum(),
            pu_rate,
            su_rate,
            per_subcarrier_u,
            qos_met,
            relay_constraint_met: relay_ok,
        })
    } else {
        Err(violations)
    }
}

/// Weighted throughput of a policy whose assignment is structurally valid,
/// ignoring power and QoS feasibility.
pub fn weighted_throughput(
    policy: &Policy,
    instance: &ProblemInstance,
    model: ReceiverModel,
) -> Result<f64> {
    let weights = (instance.weight_pu, instance.weight_su);
    (0..instance.num_subcarriers())
        .map(|i| subcarrier_throughput_with(policy, &instance.channels, weights, i, model))
        .sum()
}
