//! Low-complexity solver: big-M decomposition of the binary-power products,
//! relaxed binaries with a concave penalty, and successive convex
//! approximation of the resulting d.c. program.
//!
//! Every rate term is a weighted `log₂(1 + a·x)` with `a ≥ 0`, so each d.c.
//! part is a [`LogSum`]. Concave parts that appear with a plus sign in a
//! `≤ 0` form (or in the minimized objective) are replaced by their tangent;
//! the others are kept exactly.

use std::f64::consts::LN_2;

use ndarray::{Array1, Array2, Array3};

use crate::convex::nlp::merge_sparse;
use crate::convex::{
    solve_convex, Affine, ConvexFn, LogTerm, NlpOptions, NlpSolution, NlpStatus,
    SmoothConvexProgram,
};
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::rates::{
    validate_policy_with, weighted_throughput, Assignment, Mode, Policy, PowerAllocation,
    ReceiverModel, Tolerance,
};
use crate::solution::{SolveResult, SolveStatus, Trace};

/// `weight · log₂(1 + Σ a·x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTermBits {
    pub weight: f64,
    pub coeffs: Vec<(usize, f64)>,
}

/// `constant + Σ weight·log₂(1 + a·x)`, concave in `x ≥ 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogSum {
    pub constant: f64,
    pub terms: Vec<LogTermBits>,
}

impl LogSum {
    fn push(&mut self, weight: f64, coeffs: Vec<(usize, f64)>) {
        let coeffs: Vec<(usize, f64)> = coeffs.into_iter().filter(|&(_, a)| a != 0.0).collect();
        if weight != 0.0 && !coeffs.is_empty() {
            self.terms.push(LogTermBits { weight, coeffs });
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.weight * (t.coeffs.iter().map(|&(j, a)| a * x[j]).sum::<f64>()).ln_1p() / LN_2
            })
            .sum::<f64>()
            + self.constant
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut g = Vec::new();
        for t in &self.terms {
            let arg = 1.0 + t.coeffs.iter().map(|&(j, a)| a * x[j]).sum::<f64>();
            let s = t.weight / (arg * LN_2);
            g.extend(t.coeffs.iter().map(|&(j, a)| (j, s * a)));
        }
        merge_sparse(g)
    }

    /// First-order expansion at `x0`; overestimates the concave sum.
    pub fn tangent(&self, x0: &[f64]) -> Affine {
        let g = self.gradient(x0);
        let c = self.value(x0) - g.iter().map(|&(j, a)| a * x0[j]).sum::<f64>();
        Affine::new(g, c)
    }

    /// `−Σ weight·log₂(1 + a·x)` as barrier log terms (constant excluded).
    fn negated_logs(&self) -> Vec<LogTerm> {
        self.terms
            .iter()
            .map(|t| LogTerm {
                weight: t.weight / LN_2,
                arg: Affine::new(t.coeffs.clone(), 1.0),
            })
            .collect()
    }
}

/// The d.c. pieces of the penalized problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DcParts {
    /// Concave gain part of `Ū`.
    pub a: LogSum,
    /// Concave part subtracted in `Ū = A − B`.
    pub b: LogSum,
    /// Relaxed binaries entering `H = Σ b` and `M = Σ b²`.
    pub binaries: Vec<usize>,
    /// Relay rows `B_{k,j}^i − D_{k,j}^i ≤ 0`.
    pub relay: Vec<(LogSum, LogSum)>,
    /// QoS rows `R_k − T_k ≤ 0`, with `R_req` in `R`'s constant.
    pub qos: Vec<(LogSum, LogSum)>,
}

/// Affine surrogates at an expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogates {
    pub b_bar: Affine,
    pub m_bar: Affine,
    pub relay_bar: Vec<Affine>,
    pub qos_bar: Vec<Affine>,
}

pub fn linearize_at(dc: &DcParts, x: &[f64]) -> Surrogates {
    let mut m_terms = Vec::with_capacity(dc.binaries.len());
    let mut m_const = 0.0;
    for &b in &dc.binaries {
        m_terms.push((b, 2.0 * x[b]));
        m_const -= x[b] * x[b];
    }
    Surrogates {
        b_bar: dc.b.tangent(x),
        m_bar: Affine::new(m_terms, m_const),
        relay_bar: dc.relay.iter().map(|(b, _)| b.tangent(x)).collect(),
        qos_bar: dc.qos.iter().map(|(r, _)| r.tangent(x)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    C3,
    C4,
    C7,
    C8,
    SingleMode,
    C10,
    C11,
    C12,
    C13,
    C14,
    C15,
    C16,
    C17,
    C18,
    C19,
    C20,
    C21,
}

/// Variable positions; `None` marks a variable absent from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct VarIndex {
    pub q_t: Array2<Option<usize>>,
    pub q_st_t: Array1<Option<usize>>,
    pub p_pu_t: Array3<Option<usize>>,
    pub p_su_t: Array3<Option<usize>>,
    pub q: Array2<Option<usize>>,
    pub q_st: Array1<Option<usize>>,
    pub p_pu: Array2<Option<usize>>,
    pub p_su: Array2<Option<usize>>,
    pub c: Array2<Option<usize>>,
    pub c_st: Array1<Option<usize>>,
    pub s: Array3<Option<usize>>,
}

impl VarIndex {
    fn empty(num_pu: usize, num_su: usize, n: usize) -> Self {
        VarIndex {
            q_t: Array2::from_elem((num_pu, n), None),
            q_st_t: Array1::from_elem(n, None),
            p_pu_t: Array3::from_elem((num_pu, num_su, n), None),
            p_su_t: Array3::from_elem((num_pu, num_su, n), None),
            q: Array2::from_elem((num_pu, n), None),
            q_st: Array1::from_elem(n, None),
            p_pu: Array2::from_elem((num_pu, n), None),
            p_su: Array2::from_elem((num_su, n), None),
            c: Array2::from_elem((num_pu, n), None),
            c_st: Array1::from_elem(n, None),
            s: Array3::from_elem((num_pu, num_su, n), None),
        }
    }
}

/// Relaxed (or mode-fixed) problem in flat variables.
#[derive(Debug, Clone)]
pub struct ScaModel {
    pub receiver: ReceiverModel,
    pub dims: (usize, usize, usize),
    pub n: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub blocks: Vec<usize>,
    /// `a·x ≤ b`
    pub rows: Vec<(Vec<(usize, f64)>, f64)>,
    pub row_kinds: Vec<RowKind>,
    pub dc: DcParts,
    pub ix: VarIndex,
    /// Set when binaries are fixed.
    pub modes: Option<Vec<Mode>>,
}

struct Builder {
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    blocks: Vec<usize>,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    row_kinds: Vec<RowKind>,
}

impl Builder {
    fn var(&mut self, block: usize, hi: f64) -> Option<usize> {
        self.lower.push(0.0);
        self.upper.push(hi);
        self.blocks.push(block);
        self.n += 1;
        Some(self.n - 1)
    }

    fn row(&mut self, kind: RowKind, terms: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push((terms, rhs));
        self.row_kinds.push(kind);
    }
}

/// Relaxed problem over all links the receiver model allows.
pub fn build_relaxed_problem(instance: &ProblemInstance, receiver: ReceiverModel) -> ScaModel {
    build_masked(instance, receiver, None)
}

/// Relaxed problem where only pairs with `pair_mask[[k, j, i]]` may be used.
pub fn build_masked(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    pair_mask: Option<&Array3<bool>>,
) -> ScaModel {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let (p_pt, p_st) = (instance.p_max_pt, instance.p_max_st);
    let mut ix = VarIndex::empty(num_pu, num_su, n);
    let mut b = Builder {
        n: 0,
        lower: Vec::new(),
        upper: Vec::new(),
        blocks: Vec::new(),
        rows: Vec::new(),
        row_kinds: Vec::new(),
    };
    let allowed = |i: usize, k: usize, j: usize| {
        receiver.pair_allowed(ch, i, k, j) && pair_mask.is_none_or(|m| m[[k, j, i]])
    };
    for i in 0..n {
        let relay_live = ch.f_relay_hop[i] > 0.0;
        for k in 0..num_pu {
            ix.q_t[[k, i]] = b.var(i, p_pt);
            ix.q[[k, i]] = b.var(i, p_pt);
            ix.c[[k, i]] = b.var(i, 1.0);
        }
        ix.c_st[i] = b.var(i, 1.0);
        if relay_live {
            ix.q_st_t[i] = b.var(i, p_pt);
            ix.q_st[i] = b.var(i, p_pt);
        }
        for k in 0..num_pu {
            for j in 0..num_su {
                if !allowed(i, k, j) {
                    continue;
                }
                ix.s[[k, j, i]] = b.var(i, 1.0);
                ix.p_su_t[[k, j, i]] = b.var(i, p_st);
                if relay_live && ch.h_st_pu[[k, i]] > 0.0 {
                    ix.p_pu_t[[k, j, i]] = b.var(i, p_st);
                    if ix.p_pu[[k, i]].is_none() {
                        ix.p_pu[[k, i]] = b.var(i, p_st);
                    }
                }
                if ix.p_su[[j, i]].is_none() {
                    ix.p_su[[j, i]] = b.var(i, p_st);
                }
            }
        }
    }

    let mut st_budget = Vec::new();
    let mut pt_budget = Vec::new();
    for i in 0..n {
        let cst = ix.c_st[i].unwrap();
        for k in 0..num_pu {
            let (qt, q, c) = (
                ix.q_t[[k, i]].unwrap(),
                ix.q[[k, i]].unwrap(),
                ix.c[[k, i]].unwrap(),
            );
            pt_budget.push((qt, 1.0));
            b.row(RowKind::C10, vec![(qt, 1.0), (c, -p_pt)], 0.0);
            b.row(RowKind::C14, vec![(q, 1.0), (qt, -1.0), (c, p_pt)], p_pt);
            b.row(RowKind::C15, vec![(qt, 1.0), (q, -1.0)], 0.0);
        }
        if let (Some(qt), Some(q)) = (ix.q_st_t[i], ix.q_st[i]) {
            pt_budget.push((qt, 1.0));
            b.row(RowKind::C11, vec![(qt, 1.0), (cst, -p_pt)], 0.0);
            b.row(RowKind::C16, vec![(q, 1.0), (qt, -1.0), (cst, p_pt)], p_pt);
            b.row(RowKind::C17, vec![(qt, 1.0), (q, -1.0)], 0.0);
        }
        let mut single = vec![(cst, -1.0)];
        let mut c8 = vec![(cst, 1.0)];
        for k in 0..num_pu {
            let c = ix.c[[k, i]].unwrap();
            c8.push((c, 1.0));
            let mut c7 = vec![(c, 1.0)];
            for j in 0..num_su {
                let Some(s) = ix.s[[k, j, i]] else { continue };
                c7.push((s, 1.0));
                single.push((s, 1.0));
                let pst = ix.p_su_t[[k, j, i]].unwrap();
                let ps = ix.p_su[[j, i]].unwrap();
                st_budget.push((pst, 1.0));
                b.row(RowKind::C13, vec![(pst, 1.0), (s, -p_st)], 0.0);
                b.row(RowKind::C20, vec![(ps, 1.0), (pst, -1.0), (s, p_st)], p_st);
                b.row(RowKind::C21, vec![(pst, 1.0), (ps, -1.0)], 0.0);
                if let Some(ppt) = ix.p_pu_t[[k, j, i]] {
                    let pp = ix.p_pu[[k, i]].unwrap();
                    st_budget.push((ppt, 1.0));
                    b.row(RowKind::C12, vec![(ppt, 1.0), (s, -p_st)], 0.0);
                    b.row(RowKind::C18, vec![(pp, 1.0), (ppt, -1.0), (s, p_st)], p_st);
                    b.row(RowKind::C19, vec![(ppt, 1.0), (pp, -1.0)], 0.0);
                }
            }
            b.row(RowKind::C7, c7, 1.0);
        }
        b.row(RowKind::C8, c8, 1.0);
        b.row(RowKind::SingleMode, single, 0.0);
    }
    if !st_budget.is_empty() {
        b.row(RowKind::C3, st_budget, p_st);
    }
    b.row(RowKind::C4, pt_budget, p_pt);

    let mut binaries: Vec<usize> = Vec::new();
    binaries.extend(ix.c.iter().flatten());
    binaries.extend(ix.c_st.iter().flatten());
    binaries.extend(ix.s.iter().flatten());
    binaries.sort_unstable();
    let dc = dc_parts(instance, receiver, &ix, binaries);
    ScaModel {
        receiver,
        dims: (num_pu, num_su, n),
        n: b.n,
        lower: b.lower,
        upper: b.upper,
        blocks: b.blocks,
        rows: b.rows,
        row_kinds: b.row_kinds,
        dc,
        ix,
        modes: None,
    }
}

/// Power-only problem for a fixed mode per subcarrier. Tilde and raw powers
/// coincide and binaries are constants, so only the tilde powers of the
/// active links remain.
pub fn build_fixed_problem(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    modes: &[Mode],
) -> ScaModel {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let (p_pt, p_st) = (instance.p_max_pt, instance.p_max_st);
    let mut ix = VarIndex::empty(num_pu, num_su, n);
    let mut b = Builder {
        n: 0,
        lower: Vec::new(),
        upper: Vec::new(),
        blocks: Vec::new(),
        rows: Vec::new(),
        row_kinds: Vec::new(),
    };
    let mut st_budget = Vec::new();
    let mut pt_budget = Vec::new();
    for (i, mode) in modes.iter().enumerate() {
        match *mode {
            Mode::Idle => {}
            Mode::Direct(k) => {
                let v = b.var(i, p_pt);
                ix.q_t[[k, i]] = v;
                pt_budget.push((v.unwrap(), 1.0));
            }
            Mode::Pair(k, j) => {
                let v = b.var(i, p_st);
                ix.p_su_t[[k, j, i]] = v;
                st_budget.push((v.unwrap(), 1.0));
                if ch.f_relay_hop[i] > 0.0 && ch.h_st_pu[[k, i]] > 0.0 {
                    let p = b.var(i, p_st);
                    let q = b.var(i, p_pt);
                    ix.p_pu_t[[k, j, i]] = p;
                    ix.q_st_t[i] = q;
                    st_budget.push((p.unwrap(), 1.0));
                    pt_budget.push((q.unwrap(), 1.0));
                }
            }
        }
    }
    if !st_budget.is_empty() {
        b.row(RowKind::C3, st_budget, p_st);
    }
    if !pt_budget.is_empty() {
        b.row(RowKind::C4, pt_budget, p_pt);
    }
    let dc = dc_parts(instance, receiver, &ix, Vec::new());
    ScaModel {
        receiver,
        dims: (num_pu, num_su, n),
        n: b.n,
        lower: b.lower,
        upper: b.upper,
        blocks: b.blocks,
        rows: b.rows,
        row_kinds: b.row_kinds,
        dc,
        ix,
        modes: Some(modes.to_vec()),
    }
}

fn dc_parts(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    ix: &VarIndex,
    binaries: Vec<usize>,
) -> DcParts {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let (w, mu) = (instance.weight_pu, instance.weight_su);
    let mut dc = DcParts {
        binaries,
        ..DcParts::default()
    };
    let mut qos_r: Vec<LogSum> = instance
        .r_req
        .iter()
        .map(|&r| LogSum {
            constant: r,
            terms: Vec::new(),
        })
        .collect();
    let mut qos_t = vec![LogSum::default(); num_pu];
    for i in 0..n {
        let f_st = ch.f_relay_hop[i];
        for k in 0..num_pu {
            if let Some(q) = ix.q_t[[k, i]] {
                let f = ch.f_direct[[k, i]];
                dc.a.push(w, vec![(q, f)]);
                qos_t[k].push(1.0, vec![(q, f)]);
            }
            let h = ch.h_st_pu[[k, i]];
            for j in 0..num_su {
                let Some(ps) = ix.p_su_t[[k, j, i]] else {
                    continue;
                };
                let g = ch.g_st_su[[j, i]];
                let pp = ix.p_pu_t[[k, j, i]];
                match (receiver, pp) {
                    (ReceiverModel::TreatAsNoise, Some(pp)) => {
                        dc.a.push(0.5 * mu, vec![(pp, g), (ps, g)]);
                        dc.b.push(0.5 * mu, vec![(pp, g)]);
                    }
                    _ => dc.a.push(0.5 * mu, vec![(ps, g)]),
                }
                let Some(pp) = pp else { continue };
                dc.a.push(0.5 * w, vec![(pp, h), (ps, h)]);
                dc.b.push(0.5 * w, vec![(ps, h)]);
                qos_t[k].push(0.5, vec![(pp, h), (ps, h)]);
                qos_r[k].push(0.5, vec![(ps, h)]);
                let mut bb = LogSum::default();
                bb.push(0.5, vec![(pp, h), (ps, h)]);
                let mut dd = LogSum::default();
                dd.push(0.5, vec![(ps, h)]);
                dd.push(
                    0.5,
                    vec![(
                        ix.q_st_t[i].expect("relay power exists with PU power"),
                        f_st,
                    )],
                );
                dc.relay.push((bb, dd));
            }
        }
    }
    for (r, t) in qos_r.into_iter().zip(qos_t) {
        if r.constant > 0.0 {
            dc.qos.push((r, t));
        }
    }
    dc
}

impl ScaModel {
    /// `Ū = A − B`.
    pub fn throughput(&self, x: &[f64]) -> f64 {
        self.dc.a.value(x) - self.dc.b.value(x)
    }

    /// `−Ū + ρ·Σ(b − b²)`.
    pub fn penalized_objective(&self, x: &[f64], rho: f64) -> f64 {
        let pen: f64 = self.dc.binaries.iter().map(|&b| x[b] - x[b] * x[b]).sum();
        -self.throughput(x) + rho * pen
    }

    pub fn max_fractionality(&self, x: &[f64]) -> f64 {
        self.dc
            .binaries
            .iter()
            .map(|&b| x[b].min(1.0 - x[b]))
            .fold(0.0, f64::max)
    }

    /// Worst violation of the exact (unlinearized) constraints.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in &self.rows {
            let v = a.iter().map(|&(j, c)| c * x[j]).sum::<f64>() - b;
            worst = worst.max(v / b.abs().max(1.0));
        }
        for (bb, dd) in &self.dc.relay {
            worst = worst.max(bb.value(x) - dd.value(x));
        }
        for (r, t) in &self.dc.qos {
            worst = worst.max(r.value(x) - t.value(x));
        }
        for j in 0..self.n {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        worst
    }

    /// Convex restriction at `x_r`.
    pub fn restricted_program(&self, x_r: &[f64], rho: f64) -> SmoothConvexProgram {
        let s = linearize_at(&self.dc, x_r);
        let mut linear = s.b_bar.terms.clone();
        let mut constant = s.b_bar.constant;
        if rho != 0.0 {
            for &b in &self.dc.binaries {
                linear.push((b, rho));
            }
            linear.extend(s.m_bar.terms.iter().map(|&(j, a)| (j, -rho * a)));
            constant -= rho * s.m_bar.constant;
        }
        let mut p = SmoothConvexProgram::new(self.n);
        p.objective = ConvexFn {
            linear: Affine::new(merge_sparse(linear), constant),
            logs: self.dc.a.negated_logs(),
        };
        for (a, b) in &self.rows {
            p.constraints.push(ConvexFn::affine(a.clone(), -b));
        }
        for ((_, dd), bar) in self.dc.relay.iter().zip(&s.relay_bar) {
            p.constraints.push(ConvexFn {
                linear: Affine::new(bar.terms.clone(), bar.constant - dd.constant),
                logs: dd.negated_logs(),
            });
        }
        for ((_, t), bar) in self.dc.qos.iter().zip(&s.qos_bar) {
            p.constraints.push(ConvexFn {
                linear: Affine::new(bar.terms.clone(), bar.constant - t.constant),
                logs: t.negated_logs(),
            });
        }
        p.lower = self.lower.clone();
        p.upper = self.upper.clone();
        p.blocks = Some(self.blocks.clone());
        p
    }

    pub fn to_flat(&self, v: &ScaVariables) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        let ix = &self.ix;
        let put = |x: &mut Vec<f64>, slot: Option<usize>, val: f64| {
            if let Some(p) = slot {
                x[p] = val;
            }
        };
        for ((k, i), slot) in ix.q_t.indexed_iter() {
            put(&mut x, *slot, v.q_tilde[[k, i]]);
            put(&mut x, ix.q[[k, i]], v.q[[k, i]]);
            put(&mut x, ix.c[[k, i]], v.c[[k, i]]);
            put(&mut x, ix.p_pu[[k, i]], v.p_pu[[k, i]]);
        }
        for (i, slot) in ix.q_st_t.indexed_iter() {
            put(&mut x, *slot, v.q_st_tilde[i]);
            put(&mut x, ix.q_st[i], v.q_st[i]);
            put(&mut x, ix.c_st[i], v.c_st[i]);
        }
        for ((k, j, i), slot) in ix.p_pu_t.indexed_iter() {
            put(&mut x, *slot, v.p_pu_tilde[[k, j, i]]);
            put(&mut x, ix.p_su_t[[k, j, i]], v.p_su_tilde[[k, j, i]]);
            put(&mut x, ix.s[[k, j, i]], v.s[[k, j, i]]);
        }
        for ((j, i), slot) in ix.p_su.indexed_iter() {
            put(&mut x, *slot, v.p_su[[j, i]]);
        }
        x
    }

    /// Absent variables read as 0; with fixed modes, binaries come from the
    /// modes and raw powers equal the tilde powers.
    pub fn from_flat(&self, x: &[f64]) -> ScaVariables {
        let (num_pu, num_su, n) = self.dims;
        let mut v = ScaVariables::zeros(num_pu, num_su, n);
        let ix = &self.ix;
        let get = |slot: Option<usize>| slot.map_or(0.0, |p| x[p]);
        for ((k, i), slot) in ix.q_t.indexed_iter() {
            v.q_tilde[[k, i]] = get(*slot);
            v.q[[k, i]] = get(ix.q[[k, i]]);
            v.c[[k, i]] = get(ix.c[[k, i]]);
            v.p_pu[[k, i]] = get(ix.p_pu[[k, i]]);
        }
        for (i, slot) in ix.q_st_t.indexed_iter() {
            v.q_st_tilde[i] = get(*slot);
            v.q_st[i] = get(ix.q_st[i]);
            v.c_st[i] = get(ix.c_st[i]);
        }
        for ((k, j, i), slot) in ix.p_pu_t.indexed_iter() {
            v.p_pu_tilde[[k, j, i]] = get(*slot);
            v.p_su_tilde[[k, j, i]] = get(ix.p_su_t[[k, j, i]]);
            v.s[[k, j, i]] = get(ix.s[[k, j, i]]);
        }
        for ((j, i), slot) in ix.p_su.indexed_iter() {
            v.p_su[[j, i]] = get(*slot);
        }
        if let Some(modes) = &self.modes {
            for (i, m) in modes.iter().enumerate() {
                match *m {
                    Mode::Idle => {}
                    Mode::Direct(k) => {
                        v.c[[k, i]] = 1.0;
                        v.q[[k, i]] = v.q_tilde[[k, i]];
                    }
                    Mode::Pair(k, j) => {
                        v.c_st[i] = 1.0;
                        v.s[[k, j, i]] = 1.0;
                        v.q_st[i] = v.q_st_tilde[i];
                        v.p_pu[[k, i]] = v.p_pu_tilde[[k, j, i]];
                        v.p_su[[j, i]] = v.p_su_tilde[[k, j, i]];
                    }
                }
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaVariables {
    pub q_tilde: Array2<f64>,
    pub q_st_tilde: Array1<f64>,
    pub p_pu_tilde: Array3<f64>,
    pub p_su_tilde: Array3<f64>,
    pub q: Array2<f64>,
    pub q_st: Array1<f64>,
    pub p_pu: Array2<f64>,
    pub p_su: Array2<f64>,
    pub c: Array2<f64>,
    pub c_st: Array1<f64>,
    pub s: Array3<f64>,
}

impl ScaVariables {
    pub fn zeros(num_pu: usize, num_su: usize, n: usize) -> Self {
        ScaVariables {
            q_tilde: Array2::zeros((num_pu, n)),
            q_st_tilde: Array1::zeros(n),
            p_pu_tilde: Array3::zeros((num_pu, num_su, n)),
            p_su_tilde: Array3::zeros((num_pu, num_su, n)),
            q: Array2::zeros((num_pu, n)),
            q_st: Array1::zeros(n),
            p_pu: Array2::zeros((num_pu, n)),
            p_su: Array2::zeros((num_su, n)),
            c: Array2::zeros((num_pu, n)),
            c_st: Array1::zeros(n),
            s: Array3::zeros((num_pu, num_su, n)),
        }
    }

    /// Binaries thresholded at 0.5. Returns `None` if the result breaks the
    /// one-mode-per-subcarrier rule.
    pub fn rounded_modes(&self) -> Option<Vec<Mode>> {
        let (num_pu, num_su, n) = self.s.dim();
        let mut modes = Vec::with_capacity(n);
        for i in 0..n {
            let mut mode = Mode::Idle;
            let mut count = 0;
            for k in 0..num_pu {
                if self.c[[k, i]] > 0.5 {
                    mode = Mode::Direct(k);
                    count += 1;
                }
                for j in 0..num_su {
                    if self.s[[k, j, i]] > 0.5 {
                        mode = Mode::Pair(k, j);
                        count += 1;
                    }
                }
            }
            if count > 1 {
                return None;
            }
            modes.push(mode);
        }
        Some(modes)
    }

    /// Policy carrying the tilde powers of the links active in `modes`.
    pub fn policy_for(&self, modes: &[Mode]) -> Policy {
        let (num_pu, num_su, n) = self.s.dim();
        let mut powers = PowerAllocation::zeros(num_pu, num_su, n);
        for (i, m) in modes.iter().enumerate() {
            match *m {
                Mode::Idle => {}
                Mode::Direct(k) => powers.q_direct[[k, i]] = self.q_tilde[[k, i]],
                Mode::Pair(k, j) => {
                    powers.p_pu[[k, i]] = self.p_pu_tilde[[k, j, i]];
                    powers.p_su[[j, i]] = self.p_su_tilde[[k, j, i]];
                    powers.q_relay[i] = self.q_st_tilde[i];
                }
            }
        }
        Policy {
            assignment: Assignment::from_modes(num_pu, num_su, modes),
            powers,
        }
    }
}

/// Default penalty `10·log₂(1 + P_max^ST/σ²)`.
pub fn default_rho(instance: &ProblemInstance) -> f64 {
    10.0 * (instance.p_max_st / instance.noise_w).ln_1p() / LN_2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaOptions {
    /// `None` selects [`default_rho`].
    pub rho: Option<f64>,
    /// Relative objective change declaring convergence (twice in a row).
    pub delta_obj: f64,
    pub theta_bin: f64,
    /// Outer iterations per penalty level.
    pub max_outer: usize,
    pub max_escalations: usize,
    pub escalation_factor: f64,
    pub nlp: NlpOptions,
}

impl Default for ScaOptions {
    fn default() -> Self {
        ScaOptions {
            rho: None,
            delta_obj: 1e-5,
            theta_bin: 1e-3,
            max_outer: 100,
            max_escalations: 3,
            escalation_factor: 4.0,
            // Subproblems start next to their solution.
            nlp: NlpOptions {
                mu_start: 1e-2,
                tau_kkt: 1e-6,
                ..NlpOptions::default()
            },
        }
    }
}

/// One convex restriction solve from `x_r`.
pub fn sca_iteration(
    model: &ScaModel,
    x_r: &[f64],
    rho: f64,
    nlp: &NlpOptions,
) -> Result<NlpSolution> {
    let prog = model.restricted_program(x_r, rho);
    solve_convex(&prog, Some(x_r), nlp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaDiagnostics {
    pub initializer_feasible: bool,
    /// Largest `min(b, 1−b)` over relaxed binaries at the final iterate.
    pub max_fractionality: f64,
    /// `|Ū(relaxed) − U(rounded)|` before the fixed-binary re-solve.
    pub rounding_delta: f64,
    pub escalations: usize,
    pub final_rho: f64,
    pub outer_iterations: usize,
    /// Steps whose penalized objective rose and were discarded.
    pub rejected_steps: usize,
    /// Largest rise among discarded steps.
    pub worst_rejected_rise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaOutcome {
    pub result: SolveResult,
    pub diagnostics: ScaDiagnostics,
    /// Final relaxed iterate.
    pub relaxed: Option<ScaVariables>,
}

pub fn algorithm1_solve(
    instance: &ProblemInstance,
    opts: &ScaOptions,
    start: Option<&ScaVariables>,
) -> Result<SolveResult> {
    Ok(solve_relaxed(instance, ReceiverModel::Sic, None, opts, start)?.result)
}

pub fn algorithm1_detailed(
    instance: &ProblemInstance,
    opts: &ScaOptions,
    start: Option<&ScaVariables>,
) -> Result<ScaOutcome> {
    solve_relaxed(instance, ReceiverModel::Sic, None, opts, start)
}

struct MmRun {
    x: Vec<f64>,
    iterations: usize,
    rejected: usize,
    worst_rise: f64,
    converged: bool,
}

/// Majorize-minimize loop at fixed `ρ`; the first step is always taken.
fn mm_loop(
    model: &ScaModel,
    x0: &[f64],
    rho: f64,
    opts: &ScaOptions,
    trace: &mut Trace,
    first_free: bool,
) -> Result<Option<MmRun>> {
    let mut x = x0.to_vec();
    let mut cur = model.penalized_objective(&x, rho);
    let mut small = 0;
    let mut run = MmRun {
        x: Vec::new(),
        iterations: 0,
        rejected: 0,
        worst_rise: 0.0,
        converged: false,
    };
    for it in 0..opts.max_outer {
        let sol = sca_iteration(model, &x, rho, &opts.nlp)?;
        if sol.status == NlpStatus::Infeasible {
            if it == 0 && first_free {
                return Ok(None);
            }
            break;
        }
        let next = model.penalized_objective(&sol.x, rho);
        if next > cur && !(it == 0 && first_free) {
            run.rejected += 1;
            run.worst_rise = run.worst_rise.max(next - cur);
            run.converged = true;
            break;
        }
        let rel = (cur - next).abs() / cur.abs().max(1.0);
        x = sol.x;
        cur = next;
        run.iterations += 1;
        trace.push(vec![
            (trace.rows.len() + 1) as f64,
            rho,
            cur,
            model.throughput(&x),
            model.max_fractionality(&x),
            sol.newton_steps as f64,
        ]);
        small = if rel <= opts.delta_obj && it > 0 {
            small + 1
        } else {
            0
        };
        if small >= 2 {
            run.converged = true;
            break;
        }
    }
    run.x = x;
    Ok(Some(run))
}

pub(crate) fn trace_columns() -> Trace {
    Trace::new(&[
        "iteration",
        "rho",
        "penalized_objective",
        "throughput",
        "max_fractionality",
        "inner_iterations",
    ])
}

/// Algorithm 1 on the relaxed problem, then rounding and a fixed-mode
/// re-solve of the powers.
pub(crate) fn solve_relaxed(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    pair_mask: Option<&Array3<bool>>,
    opts: &ScaOptions,
    start: Option<&ScaVariables>,
) -> Result<ScaOutcome> {
    instance.validate()?;
    let (num_pu, num_su, n) = instance.dims();
    let model = build_masked(instance, receiver, pair_mask);
    let mut trace = trace_columns();
    let mut diag = ScaDiagnostics {
        initializer_feasible: false,
        max_fractionality: 0.0,
        rounding_delta: 0.0,
        escalations: 0,
        final_rho: 0.0,
        outer_iterations: 0,
        rejected_steps: 0,
        worst_rejected_rise: 0.0,
    };
    let init = match start {
        Some(s) => Some(s.clone()),
        None => initialize_masked(instance, receiver, pair_mask),
    };
    let infeasible = |trace: Trace, diag: ScaDiagnostics| ScaOutcome {
        result: SolveResult::infeasible(
            Policy::zeros(num_pu, num_su, n),
            diag.outer_iterations,
            trace,
        ),
        diagnostics: diag,
        relaxed: None,
    };
    let Some(init) = init else {
        return Ok(infeasible(trace, diag));
    };
    let x0 = model.to_flat(&init);
    diag.initializer_feasible = model.max_violation(&x0) <= 1e-9;

    let mut rho = opts.rho.unwrap_or_else(|| default_rho(instance));
    let Some(mut run) = mm_loop(&model, &x0, rho, opts, &mut trace, true)? else {
        return Ok(infeasible(trace, diag));
    };
    let mut converged = run.converged;
    diag.outer_iterations += run.iterations;
    diag.rejected_steps += run.rejected;
    diag.worst_rejected_rise = diag.worst_rejected_rise.max(run.worst_rise);
    while model.max_fractionality(&run.x) > opts.theta_bin
        && diag.escalations < opts.max_escalations
    {
        rho *= opts.escalation_factor;
        diag.escalations += 1;
        let x = run.x.clone();
        run =
            mm_loop(&model, &x, rho, opts, &mut trace, false)?.expect("restart point is feasible");
        converged = run.converged;
        diag.outer_iterations += run.iterations;
        diag.rejected_steps += run.rejected;
        diag.worst_rejected_rise = diag.worst_rejected_rise.max(run.worst_rise);
    }
    diag.final_rho = rho;
    diag.max_fractionality = model.max_fractionality(&run.x);
    let relaxed = model.from_flat(&run.x);

    let modes = relaxed
        .rounded_modes()
        .ok_or_else(|| Error::Numerical("rounded binaries break the one-mode rule".into()))?;
    let rounded = relaxed.policy_for(&modes);
    diag.rounding_delta =
        (model.throughput(&run.x) - weighted_throughput(&rounded, instance, receiver)?).abs();

    let status = if diag.max_fractionality > opts.theta_bin {
        SolveStatus::Fractional
    } else if converged {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    let fixed = solve_fixed_modes(instance, receiver, &modes, &relaxed, opts)?;
    let Some(mut result) = fixed else {
        return Ok(ScaOutcome {
            result: SolveResult::infeasible(
                Policy::zeros(num_pu, num_su, n),
                diag.outer_iterations,
                trace,
            ),
            diagnostics: diag,
            relaxed: Some(relaxed),
        });
    };
    result.status = status;
    result.iterations += diag.outer_iterations;
    result.trace = trace;
    Ok(ScaOutcome {
        result,
        diagnostics: diag,
        relaxed: Some(relaxed),
    })
}

/// Optimizes powers for fixed modes by SCA from `start`. `None` when no
/// feasible power allocation is found.
pub fn solve_fixed_modes(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    modes: &[Mode],
    start: &ScaVariables,
    opts: &ScaOptions,
) -> Result<Option<SolveResult>> {
    let model = build_fixed_problem(instance, receiver, modes);
    let mut trace = trace_columns();
    let x0 = model.to_flat(start);
    let run = if model.n == 0 {
        if model.max_violation(&x0) > 0.0 {
            return Ok(None);
        }
        MmRun {
            x: x0,
            iterations: 0,
            rejected: 0,
            worst_rise: 0.0,
            converged: true,
        }
    } else {
        match mm_loop(&model, &x0, 0.0, opts, &mut trace, true)? {
            Some(r) => r,
            None => return Ok(None),
        }
    };
    let vars = model.from_flat(&run.x);
    let policy = vars.policy_for(modes);
    let report = validate_policy_with(&policy, instance, Tolerance::default(), receiver)
        .map_err(|v| Error::Numerical(format!("fixed-mode solution fails validation: {v:?}")))?;
    Ok(Some(SolveResult {
        status: if run.converged {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        },
        policy,
        objective: report.weighted_total,
        upper_bound: None,
        iterations: run.iterations,
        trace,
    }))
}

/// Greedy feasible starting point with binaries at 0/1.
pub fn initialize(instance: &ProblemInstance) -> Option<ScaVariables> {
    initialize_masked(instance, ReceiverModel::Sic, None)
}

pub(crate) fn initialize_masked(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    pair_mask: Option<&Array3<bool>>,
) -> Option<ScaVariables> {
    let mut modes = greedy_modes(instance, receiver, pair_mask)?;
    improve_modes(instance, receiver, pair_mask, &mut modes);
    powers_for_modes(instance, &modes)
}

/// Single-subcarrier mode swaps, kept when they raise the throughput of the
/// [`powers_for_modes`] point.
fn improve_modes(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    pair_mask: Option<&Array3<bool>>,
    modes: &mut [Mode],
) {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let score = |modes: &[Mode]| {
        powers_for_modes(instance, modes)
            .and_then(|v| weighted_throughput(&v.policy_for(modes), instance, receiver).ok())
    };
    let Some(mut best) = score(modes) else { return };
    for _ in 0..10 {
        let mut changed = false;
        for i in 0..n {
            let mut options = vec![Mode::Idle];
            options.extend((0..num_pu).map(Mode::Direct));
            for k in 0..num_pu {
                for j in 0..num_su {
                    if receiver.pair_allowed(ch, i, k, j) && pair_mask.is_none_or(|m| m[[k, j, i]])
                    {
                        options.push(Mode::Pair(k, j));
                    }
                }
            }
            let mut keep = modes[i];
            for m in options {
                if m == keep {
                    continue;
                }
                modes[i] = m;
                if let Some(u) = score(modes).filter(|&u| u > best + 1e-9) {
                    best = u;
                    keep = m;
                    changed = true;
                }
            }
            modes[i] = keep;
        }
        if !changed {
            break;
        }
    }
}

/// Per subcarrier: the stronger of the best direct link and the best pair,
/// then subcarriers are moved to direct links of PUs whose rate requirement
/// cannot be met within the PT budget.
fn greedy_modes(
    instance: &ProblemInstance,
    receiver: ReceiverModel,
    pair_mask: Option<&Array3<bool>>,
) -> Option<Vec<Mode>> {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let (w, mu) = (instance.weight_pu, instance.weight_su);
    let share_pt = instance.p_max_pt / n as f64;
    let share_st = instance.p_max_st / n as f64;
    let lg = |x: f64| x.ln_1p() / LN_2;
    let mut modes = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = (0.0, Mode::Idle);
        for k in 0..num_pu {
            let score = w * lg(share_pt * ch.f_direct[[k, i]]);
            if score > best.0 {
                best = (score, Mode::Direct(k));
            }
        }
        for k in 0..num_pu {
            for j in 0..num_su {
                if !receiver.pair_allowed(ch, i, k, j) || pair_mask.is_some_and(|m| !m[[k, j, i]]) {
                    continue;
                }
                let pu =
                    lg(0.5 * share_st * ch.h_st_pu[[k, i]]).min(lg(share_pt * ch.f_relay_hop[i]));
                let score = 0.5 * w * pu + 0.5 * mu * lg(0.5 * share_st * ch.g_st_su[[j, i]]);
                if score > best.0 {
                    best = (score, Mode::Pair(k, j));
                }
            }
        }
        modes.push(best.1);
    }
    let mut locked = vec![false; n];
    loop {
        let need: Vec<Option<f64>> = (0..num_pu)
            .map(|k| direct_power_needed(instance, &modes, k))
            .collect();
        let total: Option<f64> = need.iter().copied().sum();
        if total.is_some_and(|t| t <= instance.p_max_pt) {
            return Some(modes);
        }
        // Most deficient PU: unreachable first, then the largest need.
        let k = (0..num_pu)
            .filter(|&k| instance.r_req[k] > 0.0)
            .max_by(|&a, &b| {
                let key = |k: usize| need[k].unwrap_or(f64::INFINITY);
                key(a).total_cmp(&key(b)).then(b.cmp(&a))
            })?;
        let i = (0..n)
            .filter(|&i| !locked[i] && modes[i] != Mode::Direct(k) && ch.f_direct[[k, i]] > 0.0)
            .max_by(|&a, &b| {
                ch.f_direct[[k, a]]
                    .total_cmp(&ch.f_direct[[k, b]])
                    .then(b.cmp(&a))
            })?;
        modes[i] = Mode::Direct(k);
        locked[i] = true;
    }
}

/// Minimal PT power for PU `k` to meet its requirement on its direct links
/// alone (water-filling), `None` if it has no usable direct link.
fn direct_power_needed(instance: &ProblemInstance, modes: &[Mode], k: usize) -> Option<f64> {
    let gains: Vec<f64> = modes
        .iter()
        .enumerate()
        .filter(|(_, m)| **m == Mode::Direct(k))
        .map(|(i, _)| instance.channels.f_direct[[k, i]])
        .collect();
    min_power_waterfill(&gains, target_rate(instance.r_req[k])).map(|q| q.iter().sum())
}

fn target_rate(r: f64) -> f64 {
    if r > 0.0 {
        r * (1.0 + 1e-6) + 1e-9
    } else {
        0.0
    }
}

/// Powers minimizing `Σ q` subject to `Σ log₂(1 + q·g) ≥ r`.
pub(crate) fn min_power_waterfill(gains: &[f64], r: f64) -> Option<Vec<f64>> {
    if r <= 0.0 {
        return Some(vec![0.0; gains.len()]);
    }
    let mut order: Vec<usize> = (0..gains.len()).filter(|&t| gains[t] > 0.0).collect();
    if order.is_empty() {
        return None;
    }
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    let mut log_sum = 0.0;
    let mut out = vec![0.0; gains.len()];
    for m in 1..=order.len() {
        log_sum += gains[order[m - 1]].log2();
        let log_nu = (r - log_sum) / m as f64;
        let nu = log_nu.exp2();
        let ok_last = nu > 1.0 / gains[order[m - 1]];
        let ok_next = m == order.len() || nu <= 1.0 / gains[order[m]];
        if ok_last && ok_next {
            for &t in &order[..m] {
                out[t] = nu - 1.0 / gains[t];
            }
            return Some(out);
        }
    }
    None
}

/// Feasible 0/1 point for `modes`: QoS water-filling first, the rest of the
/// PT budget split evenly over PT links, the ST budget split evenly over
/// pairs, and PU powers trimmed to what the relay hop can forward.
pub(crate) fn powers_for_modes(instance: &ProblemInstance, modes: &[Mode]) -> Option<ScaVariables> {
    spread_powers(instance, modes, true)
}

/// As [`powers_for_modes`]; without `qos` the rate requirements are ignored
/// and the result always exists.
pub(crate) fn spread_powers(
    instance: &ProblemInstance,
    modes: &[Mode],
    qos: bool,
) -> Option<ScaVariables> {
    let ch = &instance.channels;
    let (num_pu, num_su, n) = instance.dims();
    let mut v = ScaVariables::zeros(num_pu, num_su, n);
    let mut used_pt = 0.0;
    for k in 0..num_pu {
        let idx: Vec<usize> = (0..n).filter(|&i| modes[i] == Mode::Direct(k)).collect();
        let gains: Vec<f64> = idx.iter().map(|&i| ch.f_direct[[k, i]]).collect();
        let r = if qos {
            target_rate(instance.r_req[k])
        } else {
            0.0
        };
        let q = min_power_waterfill(&gains, r)?;
        for (t, &i) in idx.iter().enumerate() {
            v.q_tilde[[k, i]] = q[t];
            used_pt += q[t];
        }
    }
    if used_pt > instance.p_max_pt {
        return None;
    }
    let relays: Vec<usize> = (0..n)
        .filter(|&i| matches!(modes[i], Mode::Pair(k, _) if ch.f_relay_hop[i] > 0.0 && ch.h_st_pu[[k, i]] > 0.0))
        .collect();
    let direct = modes
        .iter()
        .filter(|m| matches!(m, Mode::Direct(_)))
        .count();
    let pt_links = direct + relays.len();
    let extra = if pt_links > 0 {
        (instance.p_max_pt - used_pt) / pt_links as f64
    } else {
        0.0
    };
    let pairs = modes.iter().filter(|m| matches!(m, Mode::Pair(..))).count();
    let st_share = if pairs > 0 {
        instance.p_max_st / pairs as f64
    } else {
        0.0
    };
    for (i, m) in modes.iter().enumerate() {
        match *m {
            Mode::Idle => {}
            Mode::Direct(k) => {
                v.q_tilde[[k, i]] += extra;
                v.c[[k, i]] = 1.0;
            }
            Mode::Pair(k, j) => {
                v.c_st[i] = 1.0;
                v.s[[k, j, i]] = 1.0;
                let p_su = 0.5 * st_share;
                v.p_su_tilde[[k, j, i]] = p_su;
                if relays.contains(&i) {
                    let h = ch.h_st_pu[[k, i]];
                    let q_st = extra;
                    let cap = q_st * ch.f_relay_hop[i] * (p_su * h + 1.0) / h;
                    v.q_st_tilde[i] = q_st;
                    v.p_pu_tilde[[k, j, i]] = (0.5 * st_share).min(cap);
                }
            }
        }
    }
    v.q.assign(&v.q_tilde);
    v.q_st.assign(&v.q_st_tilde);
    for (i, m) in modes.iter().enumerate() {
        if let Mode::Pair(k, j) = *m {
            v.p_pu[[k, i]] = v.p_pu_tilde[[k, j, i]];
            v.p_su[[j, i]] = v.p_su_tilde[[k, j, i]];
        }
    }
    Some(v)
}
