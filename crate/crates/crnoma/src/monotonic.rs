//! Globally ε-optimal solver: the problem is rewritten over auxiliary SINR
//! variables `(u, v, ξ)` and maximized with an outer polyblock approximation.
//!
//! `u_{k,j}^i` and `v_{k,j}^i` stand for `1 + SINR` of the PU and SU in a
//! relayed pair, `ξ_k^i` for `1 + SNR` of a direct link. The feasible set is
//! `G ∩ H` with `G` normal (power budgets, relay capacity, one mode per
//! subcarrier) and `H` conormal (PU rate requirements).

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::LN_2;

use ndarray::{Array1, Array2, Array3};

use crate::convex::{lp_feasible, LinearFeasibilityProblem};
use crate::error::{Error, Result};
use crate::instance::{ChannelState, ProblemInstance};
use crate::rates::{
    is_sic_admissible, validate_policy, Assignment, Mode, Policy, PowerAllocation, Tolerance,
};
use crate::solution::{SolveResult, SolveStatus, Trace};

/// Values are 1 wherever no coordinate exists.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryPoint {
    /// `u[k][j][i]`
    pub u: Array3<f64>,
    /// `v[k][j][i]`
    pub v: Array3<f64>,
    /// `xi[k][i]`
    pub xi: Array2<f64>,
}

impl AuxiliaryPoint {
    pub fn ones(num_pu: usize, num_su: usize, n: usize) -> Self {
        AuxiliaryPoint {
            u: Array3::from_elem((num_pu, num_su, n), 1.0),
            v: Array3::from_elem((num_pu, num_su, n), 1.0),
            xi: Array2::from_elem((num_pu, n), 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub u_max: Array3<f64>,
    pub v_max: Array3<f64>,
    pub xi_max: Array2<f64>,
}

/// Upper corner of the search box. `u` is also capped by what the relay hop
/// can forward with the whole PT budget.
pub fn box_bounds(instance: &ProblemInstance) -> BoxBounds {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let mut b = BoxBounds {
        u_max: Array3::from_elem((num_pu, num_su, n), 1.0),
        v_max: Array3::from_elem((num_pu, num_su, n), 1.0),
        xi_max: Array2::from_elem((num_pu, n), 1.0),
    };
    for i in 0..n {
        for k in 0..num_pu {
            b.xi_max[[k, i]] = 1.0 + instance.p_max_pt * ch.f_direct[[k, i]];
            for j in 0..num_su {
                if is_sic_admissible(ch, i, k, j) {
                    let relay = 1.0 + instance.p_max_pt * ch.f_relay_hop[i];
                    b.u_max[[k, j, i]] = (1.0 + instance.p_max_st * ch.h_st_pu[[k, i]]).min(relay);
                    b.v_max[[k, j, i]] = 1.0 + instance.p_max_st * ch.g_st_su[[j, i]];
                }
            }
        }
    }
    b
}

/// Substituted products `s·p` and `c·q`.
#[derive(Debug, Clone, PartialEq)]
pub struct TildePowers {
    /// `q[k][i]`
    pub q: Array2<f64>,
    pub q_st: Array1<f64>,
    /// `p_pu[k][j][i]`
    pub p_pu: Array3<f64>,
    /// `p_su[k][j][i]`
    pub p_su: Array3<f64>,
}

impl TildePowers {
    pub fn zeros(num_pu: usize, num_su: usize, n: usize) -> Self {
        TildePowers {
            q: Array2::zeros((num_pu, n)),
            q_st: Array1::zeros(n),
            p_pu: Array3::zeros((num_pu, num_su, n)),
            p_su: Array3::zeros((num_pu, num_su, n)),
        }
    }
}

/// `(Ĩ_PU, Ĩ_SU, S̃_PU)` for triple `(i, k, j)`.
pub fn penalty_interference(
    t: &TildePowers,
    ch: &ChannelState,
    i: usize,
    k: usize,
    j: usize,
) -> (f64, f64, f64) {
    let (num_pu, num_su, _) = ch.dims();
    let mut cross = t.q[[k, i]];
    for n in (0..num_su).filter(|&n| n != j) {
        for m in (0..num_pu).filter(|&m| m != k) {
            cross += t.p_pu[[m, n, i]] + t.p_su[[m, n, i]];
        }
    }
    let others: f64 = (0..num_pu).filter(|&m| m != k).map(|m| t.q[[m, i]]).sum();
    (
        cross * ch.h_st_pu[[k, i]],
        cross * ch.g_st_su[[j, i]],
        (t.q_st[i] + others) * ch.f_direct[[k, i]],
    )
}

/// `Σ ½[w·log₂u + μ·log₂v] + Σ w·log₂ξ`.
pub fn monotone_objective(point: &AuxiliaryPoint, (w, mu): (f64, f64)) -> f64 {
    let l = |x: &f64| x.ln() / LN_2;
    0.5 * w * point.u.iter().map(l).sum::<f64>()
        + 0.5 * mu * point.v.iter().map(l).sum::<f64>()
        + w * point.xi.iter().map(l).sum::<f64>()
}

/// Membership in `G`, decided by the linear program over tilde powers.
pub fn in_g(point: &AuxiliaryPoint, instance: &ProblemInstance) -> Result<bool> {
    let space = Space::new(instance);
    let Some(z) = space.flatten(point) else {
        return Ok(false);
    };
    if z.iter()
        .zip(&space.coords)
        .any(|(x, c)| *x > c.upper * (1.0 + 1e-12))
    {
        return Ok(false);
    }
    if space.first_conflict(&z).is_some() {
        return Ok(false);
    }
    let lp = membership_lp(point, instance);
    Ok(lp_feasible(&lp)?.is_some())
}

struct LpIndex {
    num_pu: usize,
    num_su: usize,
    n: usize,
}

impl LpIndex {
    fn q(&self, k: usize, i: usize) -> usize {
        k * self.n + i
    }
    fn q_st(&self, i: usize) -> usize {
        self.num_pu * self.n + i
    }
    fn p_pu(&self, k: usize, j: usize, i: usize) -> usize {
        self.num_pu * self.n + self.n + (k * self.num_su + j) * self.n + i
    }
    fn p_su(&self, k: usize, j: usize, i: usize) -> usize {
        self.p_pu(k, j, i) + self.num_pu * self.num_su * self.n
    }
    fn len(&self) -> usize {
        self.num_pu * self.n + self.n + 2 * self.num_pu * self.num_su * self.n
    }
}

fn membership_lp(point: &AuxiliaryPoint, instance: &ProblemInstance) -> LinearFeasibilityProblem {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let ix = LpIndex { num_pu, num_su, n };
    let mut lp = LinearFeasibilityProblem::new(ix.len());
    let mut st_budget = Vec::new();
    let mut pt_budget = Vec::new();
    for i in 0..n {
        pt_budget.push((ix.q_st(i), 1.0));
        for k in 0..num_pu {
            pt_budget.push((ix.q(k, i), 1.0));
            for j in 0..num_su {
                if is_sic_admissible(ch, i, k, j) {
                    st_budget.push((ix.p_pu(k, j, i), 1.0));
                    st_budget.push((ix.p_su(k, j, i), 1.0));
                } else {
                    // Non-admissible pairs carry no power.
                    lp.add_sparse_row(&[(ix.p_pu(k, j, i), 1.0), (ix.p_su(k, j, i), 1.0)], 0.0);
                }
            }
        }
    }
    lp.add_sparse_row(&st_budget, instance.p_max_st);
    lp.add_sparse_row(&pt_budget, instance.p_max_pt);

    // Terms of the shared penalty bracket, before scaling by H or G.
    let cross = |i: usize, k: usize, j: usize| {
        let mut t = vec![(ix.q(k, i), 1.0)];
        for nn in (0..num_su).filter(|&nn| nn != j) {
            for m in (0..num_pu).filter(|&m| m != k) {
                t.push((ix.p_pu(m, nn, i), 1.0));
                t.push((ix.p_su(m, nn, i), 1.0));
            }
        }
        t
    };
    for i in 0..n {
        for k in 0..num_pu {
            let xi = point.xi[[k, i]] - 1.0;
            if xi > 0.0 {
                // (ξ−1)(S̃_PU + 1) ≤ q̃·F
                let f = ch.f_direct[[k, i]];
                let mut row = vec![(ix.q(k, i), -f), (ix.q_st(i), xi * f)];
                row.extend(
                    (0..num_pu)
                        .filter(|&m| m != k)
                        .map(|m| (ix.q(m, i), xi * f)),
                );
                lp.add_sparse_row(&row, -xi);
            }
            for j in 0..num_su {
                let h = ch.h_st_pu[[k, i]];
                let g = ch.g_st_su[[j, i]];
                let u = point.u[[k, j, i]] - 1.0;
                if u > 0.0 {
                    // (u−1)(p̃_SU·H + Ĩ_PU + 1) ≤ p̃_PU·H
                    let mut row = vec![(ix.p_pu(k, j, i), -h), (ix.p_su(k, j, i), u * h)];
                    row.extend(cross(i, k, j).into_iter().map(|(c, a)| (c, a * u * h)));
                    lp.add_sparse_row(&row, -u);
                    // Relay hop: u − 1 ≤ q̃_ST·F_ST
                    lp.add_sparse_row(&[(ix.q_st(i), -ch.f_relay_hop[i])], -u);
                }
                let v = point.v[[k, j, i]] - 1.0;
                if v > 0.0 {
                    // (v−1)(Ĩ_SU + 1) ≤ p̃_SU·G
                    let mut row = vec![(ix.p_su(k, j, i), -g)];
                    row.extend(cross(i, k, j).into_iter().map(|(c, a)| (c, a * v * g)));
                    lp.add_sparse_row(&row, -v);
                }
            }
        }
    }
    lp
}

/// Membership in `H`: every PU meets its rate requirement.
pub fn in_h(point: &AuxiliaryPoint, instance: &ProblemInstance) -> bool {
    let (num_pu, num_su, n) = instance.dims();
    (0..num_pu).all(|k| {
        let mut r = 0.0;
        for i in 0..n {
            r += point.xi[[k, i]].log2();
            for j in 0..num_su {
                r += 0.5 * point.u[[k, j, i]].log2();
            }
        }
        r >= instance.r_req[k] - 1e-12
    })
}

/// Largest point of `G` on the segment from the all-ones corner to `vertex`.
/// A vertex whose support mixes modes on a subcarrier gives the corner.
pub fn project_onto_g(vertex: &AuxiliaryPoint, instance: &ProblemInstance) -> AuxiliaryPoint {
    let space = Space::new(instance);
    let corner = || {
        AuxiliaryPoint::ones(
            instance.num_pu(),
            instance.num_su(),
            instance.num_subcarriers(),
        )
    };
    let Some(z) = space.flatten(vertex) else {
        return corner();
    };
    if space.first_conflict(&z).is_some() {
        return corner();
    }
    let (lo, _) = space.project(&z);
    space.unflatten(&space.along(&z, lo))
}

/// Minimal tilde powers that realize `point`, or `None` if its support mixes
/// modes on a subcarrier. These powers witness the membership LP.
pub fn minimal_tilde_powers(
    point: &AuxiliaryPoint,
    instance: &ProblemInstance,
) -> Option<TildePowers> {
    let space = Space::new(instance);
    let z = space.flatten(point)?;
    space
        .first_conflict(&z)
        .is_none()
        .then(|| space.tilde_powers(&z))
}

/// Turns a point of `G ∩ H` into a policy using its minimal powers.
pub fn recover_policy(point: &AuxiliaryPoint, instance: &ProblemInstance) -> Result<Policy> {
    let t = minimal_tilde_powers(point, instance)
        .ok_or_else(|| Error::Recovery("point mixes transmission modes on a subcarrier".into()))?;
    policy_from_tilde(&t, instance)
}

fn policy_from_tilde(t: &TildePowers, instance: &ProblemInstance) -> Result<Policy> {
    let (num_pu, num_su, n) = instance.dims();
    let mut modes = vec![Mode::Idle; n];
    let mut powers = PowerAllocation::zeros(num_pu, num_su, n);
    for i in 0..n {
        for k in 0..num_pu {
            if t.q[[k, i]] > 0.0 {
                if modes[i] != Mode::Idle {
                    return Err(Error::Recovery(format!(
                        "subcarrier {i} has two active modes"
                    )));
                }
                modes[i] = Mode::Direct(k);
                powers.q_direct[[k, i]] = t.q[[k, i]];
            }
            for j in 0..num_su {
                if t.p_pu[[k, j, i]] > 0.0 || t.p_su[[k, j, i]] > 0.0 {
                    if modes[i] != Mode::Idle {
                        return Err(Error::Recovery(format!(
                            "subcarrier {i} has two active modes"
                        )));
                    }
                    modes[i] = Mode::Pair(k, j);
                    powers.p_pu[[k, i]] = t.p_pu[[k, j, i]];
                    powers.p_su[[j, i]] = t.p_su[[k, j, i]];
                    powers.q_relay[i] = t.q_st[i];
                }
            }
        }
    }
    Ok(Policy {
        assignment: Assignment::from_modes(num_pu, num_su, &modes),
        powers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyblockOptions {
    /// Absolute optimality tolerance, bits/s/Hz.
    pub epsilon: f64,
    /// Vertex expansions before giving up.
    pub max_iter: usize,
    pub record_trace: bool,
}

impl Default for PolyblockOptions {
    fn default() -> Self {
        PolyblockOptions {
            epsilon: 1e-2,
            max_iter: 20_000,
            record_trace: false,
        }
    }
}

pub fn polyblock_solve(instance: &ProblemInstance, opts: &PolyblockOptions) -> Result<SolveResult> {
    polyblock_solve_from(instance, opts, None)
}

/// Polyblock solve, optionally seeded with a feasible policy whose value
/// becomes the initial incumbent.
pub fn polyblock_solve_from(
    instance: &ProblemInstance,
    opts: &PolyblockOptions,
    incumbent: Option<&Policy>,
) -> Result<SolveResult> {
    instance.validate()?;
    let (num_pu, num_su, n) = instance.dims();
    let space = Space::new(instance);
    let mut trace = Trace::new(&["iteration", "cbv", "bound", "vertices"]);

    let corner: Vec<f64> = space.coords.iter().map(|c| c.upper).collect();
    if !space.meets_qos(&corner) {
        return Ok(SolveResult::infeasible(
            Policy::zeros(num_pu, num_su, n),
            0,
            trace,
        ));
    }

    let mut cbv = f64::NEG_INFINITY;
    let mut best: Option<Vec<f64>> = None;
    let mut seeded: Option<(Policy, f64)> = None;
    if space.meets_qos(&vec![1.0; space.dim()]) {
        cbv = 0.0;
        best = Some(vec![1.0; space.dim()]);
    }
    if let Some(p) = incumbent {
        if let Ok(report) = validate_policy(p, instance, Tolerance::default()) {
            if report.weighted_total > cbv {
                cbv = report.weighted_total;
                seeded = Some((p.clone(), report.weighted_total));
                best = None;
            }
        }
    }

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    // Largest bound among discarded vertices that still meet the QoS.
    let mut pruned = f64::NEG_INFINITY;
    let mut push = |heap: &mut BinaryHeap<Vertex>, pruned: &mut f64, z: Vec<f64>, cbv: f64| {
        if !space.meets_qos(&z) {
            return;
        }
        let bound = space.objective(&z);
        if bound > cbv + opts.epsilon {
            heap.push(Vertex { bound, seq, z });
            seq += 1;
        } else {
            *pruned = pruned.max(bound);
        }
    };
    push(&mut heap, &mut pruned, corner, cbv);

    let mut iterations = 0;
    let mut status = SolveStatus::Optimal;
    while let Some(vx) = heap.pop() {
        if vx.bound <= cbv + opts.epsilon || iterations >= opts.max_iter {
            if vx.bound > cbv + opts.epsilon {
                status = SolveStatus::MaxIterations;
            }
            heap.push(vx);
            break;
        }
        iterations += 1;
        if let Some(i) = space.first_conflict(&vx.z) {
            for child in space.mode_split(&vx.z, i) {
                push(&mut heap, &mut pruned, child, cbv);
            }
        } else {
            let (lo, hi) = space.project(&vx.z);
            let x = space.along(&vx.z, lo);
            if space.meets_qos(&x) {
                let val = space.objective(&x);
                if val > cbv {
                    cbv = val;
                    best = Some(x);
                    seeded = None;
                }
            }
            if lo < 1.0 {
                let cut = space.along(&vx.z, hi);
                for m in 0..space.dim() {
                    if vx.z[m] > cut[m] {
                        let mut child = vx.z.clone();
                        child[m] = cut[m];
                        push(&mut heap, &mut pruned, child, cbv);
                    }
                }
            }
        }
        if opts.record_trace {
            let bound = heap.peek().map_or(cbv, |v| v.bound).max(pruned).max(cbv);
            trace.push(vec![iterations as f64, cbv, bound, heap.len() as f64]);
        }
    }
    let top_bound = heap
        .peek()
        .map_or(f64::NEG_INFINITY, |v| v.bound)
        .max(pruned);

    let (policy, objective) = match (best, seeded) {
        (_, Some((p, v))) => (p, v),
        (Some(x), None) => {
            let policy = policy_from_tilde(&space.tilde_powers(&x), instance)?;
            let report = validate_policy(&policy, instance, Tolerance::default()).map_err(|v| {
                Error::Recovery(format!("recovered policy fails validation: {v:?}"))
            })?;
            (policy, report.weighted_total)
        }
        (None, None) => {
            let status = if status == SolveStatus::MaxIterations {
                SolveStatus::NotFound
            } else {
                SolveStatus::Infeasible
            };
            let mut r =
                SolveResult::infeasible(Policy::zeros(num_pu, num_su, n), iterations, trace);
            r.status = status;
            if status == SolveStatus::NotFound {
                r.upper_bound = Some(top_bound);
            }
            return Ok(r);
        }
    };
    Ok(SolveResult {
        status,
        policy,
        objective,
        upper_bound: Some(top_bound.max(objective)),
        iterations,
        trace,
    })
}

#[derive(Debug)]
struct Vertex {
    bound: f64,
    seq: u64,
    z: Vec<f64>,
}

impl PartialEq for Vertex {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Vertex {}

impl PartialOrd for Vertex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Vertex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    U,
    V,
    Xi,
}

#[derive(Debug, Clone)]
struct Coord {
    i: usize,
    k: usize,
    j: usize,
    kind: Kind,
    mode: Mode,
    upper: f64,
    /// Objective weight on `log₂ z`.
    weight: f64,
    /// Weight on `log₂ z` in PU `k`'s rate.
    qos_weight: f64,
}

/// Flat coordinate system holding only non-degenerate coordinates.
struct Space<'a> {
    instance: &'a ProblemInstance,
    coords: Vec<Coord>,
    by_subcarrier: Vec<Vec<usize>>,
}

impl<'a> Space<'a> {
    fn new(instance: &'a ProblemInstance) -> Self {
        let ch = &instance.channels;
        let (num_pu, num_su, n) = instance.dims();
        let bounds = box_bounds(instance);
        let (w, mu) = (instance.weight_pu, instance.weight_su);
        let mut coords = Vec::new();
        let mut by_subcarrier = vec![Vec::new(); n];
        for i in 0..n {
            for k in 0..num_pu {
                let up = bounds.xi_max[[k, i]];
                if up > 1.0 {
                    by_subcarrier[i].push(coords.len());
                    coords.push(Coord {
                        i,
                        k,
                        j: 0,
                        kind: Kind::Xi,
                        mode: Mode::Direct(k),
                        upper: up,
                        weight: w,
                        qos_weight: 1.0,
                    });
                }
            }
            for k in 0..num_pu {
                for j in 0..num_su {
                    if !is_sic_admissible(ch, i, k, j) {
                        continue;
                    }
                    for (kind, up, weight, qos_weight) in [
                        (Kind::U, bounds.u_max[[k, j, i]], 0.5 * w, 0.5),
                        (Kind::V, bounds.v_max[[k, j, i]], 0.5 * mu, 0.0),
                    ] {
                        if up > 1.0 {
                            by_subcarrier[i].push(coords.len());
                            coords.push(Coord {
                                i,
                                k,
                                j,
                                kind,
                                mode: Mode::Pair(k, j),
                                upper: up,
                                weight,
                                qos_weight,
                            });
                        }
                    }
                }
            }
        }
        Space {
            instance,
            coords,
            by_subcarrier,
        }
    }

    fn dim(&self) -> usize {
        self.coords.len()
    }

    /// `None` if a structurally-one entry differs from 1 or an entry is below 1.
    fn flatten(&self, p: &AuxiliaryPoint) -> Option<Vec<f64>> {
        let (num_pu, num_su, n) = self.instance.dims();
        if p.u.dim() != (num_pu, num_su, n)
            || p.v.dim() != (num_pu, num_su, n)
            || p.xi.dim() != (num_pu, n)
        {
            return None;
        }
        let mut mark = self.unflatten(&vec![f64::NAN; self.dim()]);
        let mut z = Vec::with_capacity(self.dim());
        for c in &self.coords {
            let (slot, val) = match c.kind {
                Kind::U => (&mut mark.u[[c.k, c.j, c.i]], p.u[[c.k, c.j, c.i]]),
                Kind::V => (&mut mark.v[[c.k, c.j, c.i]], p.v[[c.k, c.j, c.i]]),
                Kind::Xi => (&mut mark.xi[[c.k, c.i]], p.xi[[c.k, c.i]]),
            };
            *slot = val;
            z.push(val);
        }
        let all =
            p.u.iter()
                .zip(mark.u.iter())
                .chain(p.v.iter().zip(mark.v.iter()))
                .chain(p.xi.iter().zip(mark.xi.iter()));
        for (val, m) in all {
            let structural = !m.is_nan();
            if !(*val >= 1.0) || (!structural && *val > 1.0 + 1e-12) {
                return None;
            }
        }
        Some(z)
    }

    fn unflatten(&self, z: &[f64]) -> AuxiliaryPoint {
        let (num_pu, num_su, n) = self.instance.dims();
        let mut p = AuxiliaryPoint::ones(num_pu, num_su, n);
        for (c, &val) in self.coords.iter().zip(z) {
            match c.kind {
                Kind::U => p.u[[c.k, c.j, c.i]] = val,
                Kind::V => p.v[[c.k, c.j, c.i]] = val,
                Kind::Xi => p.xi[[c.k, c.i]] = val,
            }
        }
        p
    }

    fn objective(&self, z: &[f64]) -> f64 {
        self.coords
            .iter()
            .zip(z)
            .map(|(c, x)| c.weight * x.log2())
            .sum()
    }

    fn meets_qos(&self, z: &[f64]) -> bool {
        let mut rate = vec![0.0; self.instance.num_pu()];
        for (c, x) in self.coords.iter().zip(z) {
            rate[c.k] += c.qos_weight * x.log2();
        }
        rate.iter()
            .zip(&self.instance.r_req)
            .all(|(r, req)| *r >= req - 1e-12)
    }

    /// First subcarrier whose active coordinates belong to different modes.
    fn first_conflict(&self, z: &[f64]) -> Option<usize> {
        (0..self.by_subcarrier.len()).find(|&i| self.active_mode(z, i).is_none())
    }

    /// `Some(Idle)` for an unused subcarrier, `None` on a conflict.
    fn active_mode(&self, z: &[f64], i: usize) -> Option<Mode> {
        let mut mode = Mode::Idle;
        for &m in &self.by_subcarrier[i] {
            if z[m] > 1.0 {
                if mode == Mode::Idle {
                    mode = self.coords[m].mode;
                } else if mode != self.coords[m].mode {
                    return None;
                }
            }
        }
        Some(mode)
    }

    /// One child per mode present on subcarrier `i`, keeping only that
    /// mode's coordinates there.
    fn mode_split(&self, z: &[f64], i: usize) -> Vec<Vec<f64>> {
        let mut modes: Vec<Mode> = Vec::new();
        for &m in &self.by_subcarrier[i] {
            if z[m] > 1.0 && !modes.contains(&self.coords[m].mode) {
                modes.push(self.coords[m].mode);
            }
        }
        modes
            .into_iter()
            .map(|mode| {
                let mut child = z.to_vec();
                for &m in &self.by_subcarrier[i] {
                    if self.coords[m].mode != mode {
                        child[m] = 1.0;
                    }
                }
                child
            })
            .collect()
    }

    /// `1 + λ(z − 1)`.
    fn along(&self, z: &[f64], lambda: f64) -> Vec<f64> {
        z.iter().map(|x| 1.0 + lambda * (x - 1.0)).collect()
    }

    /// Minimal (ST, PT) power use of a point with a valid support.
    fn cost(&self, z: &[f64]) -> (f64, f64) {
        let ch = &self.instance.channels;
        let (mut st, mut pt) = (0.0, 0.0);
        for i in 0..self.by_subcarrier.len() {
            let mut u = 1.0;
            let mut v = 1.0;
            let mut pair = None;
            for &m in &self.by_subcarrier[i] {
                if z[m] <= 1.0 {
                    continue;
                }
                let c = &self.coords[m];
                match c.kind {
                    Kind::Xi => pt += (z[m] - 1.0) / ch.f_direct[[c.k, i]],
                    Kind::U => {
                        u = z[m];
                        pair = Some((c.k, c.j));
                    }
                    Kind::V => {
                        v = z[m];
                        pair = Some((c.k, c.j));
                    }
                }
            }
            if let Some((k, j)) = pair {
                let (p_pu, p_su, q_st) = pair_powers(ch, i, k, j, u, v);
                st += p_pu + p_su;
                pt += q_st;
            }
        }
        (st, pt)
    }

    fn feasible(&self, z: &[f64]) -> bool {
        let (st, pt) = self.cost(z);
        st <= self.instance.p_max_st && pt <= self.instance.p_max_pt
    }

    /// Exact boundary of `G` along the ray from the all-ones corner through
    /// `z`, as `(λ_in, λ*)`: the `λ_in` point lies in `G` and every point
    /// strictly above the `λ*` point lies outside.
    ///
    /// Along the ray the minimal ST power is `λ·A₁ + λ²·A₂` and the minimal
    /// PT power is `λ·B₁`.
    fn project(&self, z: &[f64]) -> (f64, f64) {
        let ch = &self.instance.channels;
        let (mut a1, mut a2, mut b1) = (0.0, 0.0, 0.0);
        for i in 0..self.by_subcarrier.len() {
            let (mut au, mut av) = (0.0, 0.0);
            let mut pair = None;
            for &m in &self.by_subcarrier[i] {
                let c = &self.coords[m];
                let d = z[m] - 1.0;
                if d <= 0.0 {
                    continue;
                }
                match c.kind {
                    Kind::Xi => b1 += d / ch.f_direct[[c.k, i]],
                    Kind::U => {
                        au = d;
                        pair = Some((c.k, c.j));
                    }
                    Kind::V => {
                        av = d;
                        pair = Some((c.k, c.j));
                    }
                }
            }
            if let Some((k, j)) = pair {
                let h = ch.h_st_pu[[k, i]];
                let g = ch.g_st_su[[j, i]];
                if av > 0.0 {
                    a1 += av / g;
                }
                if au > 0.0 {
                    a1 += au / h;
                    b1 += au / ch.f_relay_hop[i];
                    if av > 0.0 {
                        a2 += au * av / g;
                    }
                }
            }
        }
        let (p_st, p_pt) = (self.instance.p_max_st, self.instance.p_max_pt);
        let mut star: f64 = 1.0;
        if a1 > 0.0 || a2 > 0.0 {
            star = star.min(2.0 * p_st / (a1 + (a1 * a1 + 4.0 * a2 * p_st).sqrt()));
        }
        if b1 > 0.0 {
            star = star.min(p_pt / b1);
        }
        let mut inside = star;
        while inside > 0.0 && !self.feasible(&self.along(z, inside)) {
            inside *= 1.0 - 1e-12;
            if star - inside > 1e-9 * star {
                inside = 0.0;
            }
        }
        (inside, star)
    }

    fn tilde_powers(&self, z: &[f64]) -> TildePowers {
        let ch = &self.instance.channels;
        let (num_pu, num_su, n) = self.instance.dims();
        let mut t = TildePowers::zeros(num_pu, num_su, n);
        let p = self.unflatten(z);
        for i in 0..n {
            match self.active_mode(z, i) {
                Some(Mode::Direct(k)) => t.q[[k, i]] = (p.xi[[k, i]] - 1.0) / ch.f_direct[[k, i]],
                Some(Mode::Pair(k, j)) => {
                    let (p_pu, p_su, q_st) =
                        pair_powers(ch, i, k, j, p.u[[k, j, i]], p.v[[k, j, i]]);
                    t.p_pu[[k, j, i]] = p_pu;
                    t.p_su[[k, j, i]] = p_su;
                    t.q_st[i] = q_st;
                }
                _ => {}
            }
        }
        t
    }
}

/// Minimal `(p_PU, p_SU, q_ST)` giving SINRs `u − 1`, `v − 1` on a pair.
fn pair_powers(ch: &ChannelState, i: usize, k: usize, j: usize, u: f64, v: f64) -> (f64, f64, f64) {
    let h = ch.h_st_pu[[k, i]];
    let g = ch.g_st_su[[j, i]];
    let p_su = if v > 1.0 { (v - 1.0) / g } else { 0.0 };
    if u > 1.0 {
        let p_pu = (u - 1.0) * (p_su * h + 1.0) / h;
        (p_pu, p_su, (u - 1.0) / ch.f_relay_hop[i])
    } else {
        (0.0, p_su, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{random_instance, InstanceOverrides, Topology};
    use crate::rates::weighted_throughput;
    use crate::rates::ReceiverModel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(num_pu: usize, num_su: usize, n: usize, seed: u64, r_req: f64) -> ProblemInstance {
        let mut t = Topology::desk_scale();
        t.num_pu = num_pu;
        t.num_su = num_su;
        t.num_subcarriers = n;
        let o = InstanceOverrides {
            r_req,
            ..InstanceOverrides::default()
        };
        random_instance(&t, seed, &o).unwrap()
    }

    fn single_pair(h: f64, g: f64, f_st: f64, f: f64) -> ProblemInstance {
        let mut ch = ChannelState::zeros(1, 1, 1);
        ch.h_st_pu[[0, 0]] = h;
        ch.g_st_su[[0, 0]] = g;
        ch.f_relay_hop[0] = f_st;
        ch.f_direct[[0, 0]] = f;
        ProblemInstance {
            channels: ch,
            p_max_pt: 10.0,
            p_max_st: 10.0,
            r_req: vec![0.0],
            weight_pu: 2.0,
            weight_su: 1.0,
            noise_w: 1.0,
        }
    }

    /// Random point inside the box with a valid support.
    fn random_point(space: &Space, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut z: Vec<f64> = space
            .coords
            .iter()
            .map(|c| 1.0 + rng.random::<f64>().powi(3) * (c.upper - 1.0))
            .collect();
        for i in 0..space.by_subcarrier.len() {
            if let Some(&m) =
                space.by_subcarrier[i].get(rng.random_range(0..space.by_subcarrier[i].len().max(1)))
            {
                let keep = space.coords[m].mode;
                for &o in &space.by_subcarrier[i] {
                    if space.coords[o].mode != keep {
                        z[o] = 1.0;
                    }
                }
            }
        }
        z
    }

    #[test]
    fn zero_tilde_powers_give_zero_penalties() {
        let inst = tiny(2, 2, 1, 1, 0.0);
        let t = TildePowers::zeros(2, 2, 1);
        assert_eq!(
            penalty_interference(&t, &inst.channels, 0, 0, 1),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn direct_power_penalizes_own_pairs() {
        let mut ch = ChannelState::zeros(2, 2, 1);
        ch.h_st_pu.fill(1.0);
        let mut t = TildePowers::zeros(2, 2, 1);
        t.q[[0, 0]] = 2.0;
        assert_eq!(penalty_interference(&t, &ch, 0, 0, 1).0, 2.0);
    }

    #[test]
    fn penalties_match_naive_loops() {
        let inst = tiny(2, 2, 1, 3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = TildePowers::zeros(2, 2, 1);
        t.q.mapv_inplace(|_| rng.random());
        t.q_st.mapv_inplace(|_| rng.random());
        t.p_pu.mapv_inplace(|_| rng.random());
        t.p_su.mapv_inplace(|_| rng.random());
        let ch = &inst.channels;
        for k in 0..2 {
            for j in 0..2 {
                let mut bracket = t.q[[k, 0]];
                for n in 0..2 {
                    for m in 0..2 {
                        if n != j && m != k {
                            bracket += t.p_pu[[m, n, 0]] + t.p_su[[m, n, 0]];
                        }
                    }
                }
                let other_q = t.q[[1 - k, 0]];
                let (a, b, c) = penalty_interference(&t, ch, 0, k, j);
                assert_eq!(a, bracket * ch.h_st_pu[[k, 0]]);
                assert_eq!(b, bracket * ch.g_st_su[[j, 0]]);
                assert_eq!(c, (t.q_st[0] + other_q) * ch.f_direct[[k, 0]]);
            }
        }
    }

    #[test]
    fn objective_hand_values() {
        let mut p = AuxiliaryPoint::ones(1, 1, 1);
        assert_eq!(monotone_objective(&p, (2.0, 1.0)), 0.0);
        p.u[[0, 0, 0]] = 4.0;
        assert_relative_eq!(monotone_objective(&p, (2.0, 1.0)), 2.0, epsilon = 1e-12);
        let mut q = AuxiliaryPoint::ones(1, 1, 1);
        q.xi[[0, 0]] = 8.0;
        assert_relative_eq!(monotone_objective(&q, (2.0, 1.0)), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn corner_and_box_membership() {
        let inst = tiny(2, 2, 2, 11, 0.0);
        let ones = AuxiliaryPoint::ones(2, 2, 2);
        assert!(in_g(&ones, &inst).unwrap());
        let mut over = ones.clone();
        over.xi[[0, 0]] = box_bounds(&inst).xi_max[[0, 0]] * 1.01;
        assert!(!in_g(&over, &inst).unwrap());
    }

    #[test]
    fn relay_row_matches_grid_oracle() {
        // One admissible pair: u is reachable iff some (p_PU, p_SU, q_ST)
        // on a grid satisfies M1, the relay row and both budgets.
        let inst = single_pair(0.5, 2.0, 0.3, 0.0);
        let ch = &inst.channels;
        for x in [0.1, 0.5, 1.0, 2.0, 2.9, 3.1, 4.0, 4.9, 5.1] {
            let mut p = AuxiliaryPoint::ones(1, 1, 1);
            p.u[[0, 0, 0]] = 1.0 + x;
            if p.u[[0, 0, 0]] > box_bounds(&inst).u_max[[0, 0, 0]] {
                assert!(!in_g(&p, &inst).unwrap());
                continue;
            }
            let mut grid = false;
            let steps = 200;
            'outer: for a in 0..=steps {
                let p_pu = 10.0 * a as f64 / steps as f64;
                for b in 0..=(steps - a) {
                    let p_su = 10.0 * b as f64 / steps as f64;
                    for c in 0..=steps {
                        let q_st = 10.0 * c as f64 / steps as f64;
                        let m1 = x * (p_su * ch.h_st_pu[[0, 0]] + 1.0)
                            <= p_pu * ch.h_st_pu[[0, 0]] + 1e-9;
                        if m1 && x <= q_st * ch.f_relay_hop[0] + 1e-9 {
                            grid = true;
                            break 'outer;
                        }
                    }
                }
            }
            // Grid resolution is fine enough away from the two boundaries
            // (x = 3 from the relay, x = 5 from the ST budget).
            assert_eq!(in_g(&p, &inst).unwrap(), grid, "x = {x}");
            assert_eq!(in_g(&p, &inst).unwrap(), x <= 10.0 * 0.3 && x <= 10.0 * 0.5);
        }
    }

    #[test]
    fn qos_membership_examples() {
        let mut inst = single_pair(1.0, 2.0, 1.0, 1.0);
        let ones = AuxiliaryPoint::ones(1, 1, 1);
        assert!(in_h(&ones, &inst));
        inst.r_req = vec![1.5];
        assert!(!in_h(&ones, &inst));
        let mut p = ones.clone();
        p.xi[[0, 0]] = 2f64.powf(1.5);
        assert!(in_h(&p, &inst));
    }

    #[test]
    fn fast_oracle_agrees_with_lp() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..20 {
            let inst = tiny(2, 2, 2, seed, 0.0);
            let space = Space::new(&inst);
            for _ in 0..10 {
                let z = random_point(&space, &mut rng);
                // Stay clear of the boundary, where the LP tolerance decides.
                let (st, pt) = space.cost(&z);
                let slack = (1.0 - st / inst.p_max_st).min(1.0 - pt / inst.p_max_pt);
                if slack.abs() < 1e-6 {
                    continue;
                }
                let p = space.unflatten(&z);
                assert_eq!(in_g(&p, &inst).unwrap(), space.feasible(&z), "seed {seed}");
                if space.feasible(&z) {
                    let t = minimal_tilde_powers(&p, &inst).unwrap();
                    let lp = membership_lp(&p, &inst);
                    let ix = LpIndex {
                        num_pu: 2,
                        num_su: 2,
                        n: 2,
                    };
                    let mut x = vec![0.0; ix.len()];
                    for i in 0..2 {
                        x[ix.q_st(i)] = t.q_st[i];
                        for k in 0..2 {
                            x[ix.q(k, i)] = t.q[[k, i]];
                            for j in 0..2 {
                                x[ix.p_pu(k, j, i)] = t.p_pu[[k, j, i]];
                                x[ix.p_su(k, j, i)] = t.p_su[[k, j, i]];
                            }
                        }
                    }
                    assert!(lp.satisfied_by(&x));
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let inst = tiny(1, 1, 1, 2, 0.0);
        let ones = AuxiliaryPoint::ones(1, 1, 1);
        assert_eq!(project_onto_g(&ones, &inst), ones);
        let space = Space::new(&inst);
        let mut z: Vec<f64> = space.coords.iter().map(|c| c.upper).collect();
        let first = space.coords[0].mode;
        for (m, c) in space.coords.iter().enumerate() {
            if c.mode != first {
                z[m] = 1.0;
            }
        }
        let inside = space.along(&z, 0.1);
        let p = space.unflatten(&inside);
        assert_eq!(project_onto_g(&p, &inst), p);
        // Grid search along the ray.
        let steps = 100_000;
        let grid = (0..=steps)
            .map(|s| s as f64 / steps as f64)
            .take_while(|&l| space.feasible(&space.along(&z, l)))
            .last()
            .unwrap();
        let (lo, hi) = space.project(&z);
        assert!((lo - grid).abs() <= 2e-5, "{lo} vs {grid}");
        assert!(hi - lo <= 1e-9 * hi);
        assert!(space.feasible(&space.along(&z, lo)));
        assert!(!space.feasible(&space.along(&z, hi * (1.0 + 1e-9))));
    }

    #[test]
    fn single_direct_link_capacity() {
        let mut ch = ChannelState::zeros(1, 0, 1);
        ch.f_direct[[0, 0]] = 3.0;
        let inst = ProblemInstance {
            channels: ch,
            p_max_pt: 10.0,
            p_max_st: 10.0,
            r_req: vec![0.0],
            weight_pu: 2.0,
            weight_su: 1.0,
            noise_w: 1.0,
        };
        let r = polyblock_solve(&inst, &PolyblockOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        let want = 2.0 * 31f64.log2();
        assert!(r.objective <= want + 1e-9);
        assert!(want - r.objective <= 1e-2);
    }

    #[test]
    fn single_pair_recovers_pair_binaries() {
        let inst = single_pair(0.5, 2.0, 0.3, 0.0);
        let r = polyblock_solve(&inst, &PolyblockOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.policy.assignment.s_pair[[0, 0, 0]]);
        assert!(r.policy.assignment.c_relay[0]);
        assert!(r.gap().unwrap() <= 1e-2);
    }

    #[test]
    fn all_ones_recovers_empty_policy() {
        let inst = tiny(2, 2, 2, 4, 0.0);
        let p = recover_policy(&AuxiliaryPoint::ones(2, 2, 2), &inst).unwrap();
        assert_eq!(p, Policy::zeros(2, 2, 2));
    }

    #[test]
    fn recovered_policy_reaches_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..10 {
            let inst = tiny(2, 2, 2, seed, 0.0);
            let space = Space::new(&inst);
            let z = random_point(&space, &mut rng);
            let (lo, _) = space.project(&z);
            let x = space.along(&z, lo);
            let p = space.unflatten(&x);
            let pol = recover_policy(&p, &inst).unwrap();
            let u = validate_policy(&pol, &inst, Tolerance::default())
                .unwrap()
                .weighted_total;
            assert!(u >= monotone_objective(&p, (2.0, 1.0)) - 1e-6);
            assert_relative_eq!(
                u,
                weighted_throughput(&pol, &inst, ReceiverModel::Sic).unwrap()
            );
        }
    }

    #[test]
    fn solve_is_feasible_and_certified_on_small_instances() {
        for seed in 0..4 {
            let inst = tiny(2, 2, 2, seed, 1.0);
            let r = polyblock_solve(&inst, &PolyblockOptions::default()).unwrap();
            if r.status == SolveStatus::Infeasible {
                continue;
            }
            assert_eq!(r.status, SolveStatus::Optimal, "seed {seed}");
            validate_policy(&r.policy, &inst, Tolerance::default()).unwrap();
            assert!(r.gap().unwrap() <= 1e-2);
        }
    }

    #[test]
    fn impossible_qos_is_infeasible() {
        let inst = tiny(1, 1, 1, 9, 500.0);
        let r = polyblock_solve(&inst, &PolyblockOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn trace_has_monotone_incumbent_and_bound() {
        let inst = tiny(2, 2, 2, 17, 0.0);
        let opts = PolyblockOptions {
            record_trace: true,
            ..PolyblockOptions::default()
        };
        let r = polyblock_solve(&inst, &opts).unwrap();
        for w in r.trace.rows.windows(2) {
            assert!(w[1][1] >= w[0][1]);
        }
        let last = r.trace.rows.last().unwrap();
        assert!(last[2] - last[1] <= 1e-2 + 1e-12 || r.status != SolveStatus::Optimal);
    }

    #[test]
    fn mixed_support_projects_to_corner() {
        let inst = tiny(2, 2, 2, 3, 0.0);
        let b = box_bounds(&inst);
        let p = AuxiliaryPoint {
            u: b.u_max.clone(),
            v: b.v_max.clone(),
            xi: b.xi_max.clone(),
        };
        assert_eq!(project_onto_g(&p, &inst), AuxiliaryPoint::ones(2, 2, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn g_is_normal(seed in 0u64..1000, shrink in 0.0f64..1.0, pick in 0usize..64) {
            let inst = tiny(2, 2, 2, seed, 0.0);
            let space = Space::new(&inst);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_point(&space, &mut rng);
            let (lo, _) = space.project(&z);
            let x = space.along(&z, lo);
            let mut y = x.clone();
            let m = pick % space.dim();
            y[m] = 1.0 + shrink * (y[m] - 1.0);
            prop_assert!(space.feasible(&x));
            prop_assert!(space.feasible(&y));
            prop_assert!(space.first_conflict(&y).is_none());
        }

        #[test]
        fn h_is_conormal(seed in 0u64..1000, grow in 0.0f64..1.0, r_req in 0.0f64..4.0) {
            let inst = tiny(2, 2, 2, seed, r_req);
            let space = Space::new(&inst);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x = random_point(&space, &mut rng);
            let y: Vec<f64> = x.iter().zip(&space.coords).map(|(v, c)| v + grow * (c.upper - v)).collect();
            if in_h(&space.unflatten(&x), &inst) {
                prop_assert!(in_h(&space.unflatten(&y), &inst));
            }
        }
    }
}
