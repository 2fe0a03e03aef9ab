//! Log-barrier interior-point method for programs whose objective and
//! constraints are affine functions minus nonnegative multiples of
//! `ln(affine)`.
//!
//! Variables can be grouped into blocks. Hessian terms confined to one block
//! are factored per block; the few rank-one terms that cross blocks are
//! handled with the Woodbury identity.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Affine { terms, constant }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |s, &(j, a)| s + a * x[j])
    }
}

/// `weight · ln(arg(x))`, entering a [`ConvexFn`] with a minus sign.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTerm {
    pub weight: f64,
    pub arg: Affine,
}

/// `linear(x) − Σ_l weight_l · ln(arg_l(x))`, convex for nonnegative weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvexFn {
    pub linear: Affine,
    pub logs: Vec<LogTerm>,
}

impl ConvexFn {
    pub fn affine(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        ConvexFn {
            linear: Affine::new(terms, constant),
            logs: Vec::new(),
        }
    }

    /// `None` outside the domain of a log term.
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        let mut v = self.linear.eval(x);
        for l in &self.logs {
            let a = l.arg.eval(x);
            if !(a > 0.0) {
                return None;
            }
            v -= l.weight * a.ln();
        }
        Some(v)
    }

    /// Sparse gradient with merged indices.
    pub fn gradient(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut g: Vec<(usize, f64)> = self.linear.terms.clone();
        for l in &self.logs {
            let s = -l.weight / l.arg.eval(x);
            g.extend(l.arg.terms.iter().map(|&(j, a)| (j, s * a)));
        }
        merge_sparse(g)
    }
}

pub(crate) fn merge_sparse(mut v: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    v.sort_unstable_by_key(|e| e.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(v.len());
    for (j, a) in v {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += a,
            _ => out.push((j, a)),
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct SmoothConvexProgram {
    pub n: usize,
    pub objective: ConvexFn,
    /// Each entry must be `≤ 0`.
    pub constraints: Vec<ConvexFn>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Optional block id per variable, used to factor the Newton system.
    pub blocks: Option<Vec<usize>>,
}

impl SmoothConvexProgram {
    pub fn new(n: usize) -> Self {
        SmoothConvexProgram {
            n,
            objective: ConvexFn::default(),
            constraints: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            blocks: None,
        }
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for c in &self.constraints {
            worst = worst.max(c.eval(x).unwrap_or(f64::INFINITY));
        }
        for j in 0..self.n {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        worst
    }

    fn strictly_inside(&self, x: &[f64]) -> bool {
        (0..self.n).all(|j| x[j] > self.lower[j] && x[j] < self.upper[j])
            && self
                .constraints
                .iter()
                .all(|c| matches!(c.eval(x), Some(v) if v < 0.0))
            && self.objective.eval(x).is_some()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Numerical(format!("malformed convex program: {m}")));
        if self.lower.len() != self.n || self.upper.len() != self.n {
            return bad("bound vectors have the wrong length");
        }
        if (0..self.n).any(|j| !(self.lower[j] < self.upper[j])) {
            return bad("empty or degenerate box");
        }
        if let Some(b) = &self.blocks {
            if b.len() != self.n {
                return bad("block map has the wrong length");
            }
        }
        let fns = std::iter::once(&self.objective).chain(self.constraints.iter());
        for f in fns {
            if f.logs.iter().any(|l| !(l.weight >= 0.0)) {
                return bad("negative log weight breaks convexity");
            }
            let idx = f
                .linear
                .terms
                .iter()
                .chain(f.logs.iter().flat_map(|l| l.arg.terms.iter()));
            for &(j, a) in idx {
                if j >= self.n || !a.is_finite() {
                    return bad("term index out of range or non-finite coefficient");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlpOptions {
    pub tau_kkt: f64,
    pub tau_feas: f64,
    /// Newton steps per barrier stage.
    pub max_iter: usize,
    pub mu_start: f64,
    pub mu_factor: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            tau_kkt: 1e-7,
            tau_feas: 1e-8,
            max_iter: 200,
            mu_start: 1.0,
            mu_factor: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: NlpStatus,
    /// Constraint multipliers `μ/(−f_i)` at the returned point.
    pub multipliers: Vec<f64>,
    pub newton_steps: usize,
}

/// Minimizes the program from `start` (phase one is run when the start is
/// missing or not strictly feasible).
pub fn solve_convex(
    program: &SmoothConvexProgram,
    start: Option<&[f64]>,
    opts: &NlpOptions,
) -> Result<NlpSolution> {
    program.validate()?;
    let mut steps = 0;
    let x0 = match start {
        Some(s) if s.len() == program.n && program.strictly_inside(s) => s.to_vec(),
        _ => match phase_one(program, start, opts, &mut steps)? {
            Some(x) => x,
            None => {
                let x = start
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| interior_guess(program, None));
                return Ok(NlpSolution {
                    objective: program.objective.eval(&x).unwrap_or(f64::NAN),
                    x,
                    kkt_residual: f64::INFINITY,
                    status: NlpStatus::Infeasible,
                    multipliers: vec![0.0; program.constraints.len()],
                    newton_steps: steps,
                });
            }
        },
    };
    let mut solver = Barrier::new(program);
    let mut x = x0;
    let mut mu = opts.mu_start;
    let mut exhausted = false;
    loop {
        let (s, ok) = solver.center(&mut x, mu, opts.max_iter, |_, _| false)?;
        steps += s;
        exhausted |= !ok;
        if mu <= opts.tau_kkt {
            break;
        }
        mu *= opts.mu_factor;
    }
    let (multipliers, kkt) = kkt_residual(program, &x, mu);
    let violation = program.max_violation(&x);
    let status = if !exhausted && kkt <= opts.tau_kkt && violation <= opts.tau_feas {
        NlpStatus::Optimal
    } else {
        NlpStatus::MaxIterations
    };
    Ok(NlpSolution {
        objective: program
            .objective
            .eval(&x)
            .expect("iterate stays in the domain"),
        x,
        kkt_residual: kkt,
        status,
        multipliers,
        newton_steps: steps,
    })
}

/// Scaled KKT residual at `x`. Multipliers come from the barrier estimate
/// `μ/(−f_i)` or from a weighted least-squares fit of stationarity over the
/// near-active constraints, whichever scores better. Stationarity residual on
/// a coordinate is absorbed by its box multiplier and charged through the
/// box complementarity.
pub fn kkt_residual(program: &SmoothConvexProgram, x: &[f64], mu: f64) -> (Vec<f64>, f64) {
    let n = program.n;
    let mut g0 = vec![0.0; n];
    for (j, g) in program.objective.gradient(x) {
        g0[j] += g;
    }
    let values: Vec<f64> = program
        .constraints
        .iter()
        .map(|c| c.eval(x).unwrap_or(f64::INFINITY))
        .collect();
    let grads: Vec<Vec<(usize, f64)>> = program.constraints.iter().map(|c| c.gradient(x)).collect();
    let score = |lambdas: &[f64]| {
        let mut r = g0.clone();
        let mut res = 0.0f64;
        for (i, lam) in lambdas.iter().enumerate() {
            res = res.max(lam * values[i].abs());
            for &(j, g) in &grads[i] {
                r[j] += lam * g;
            }
        }
        for j in 0..n {
            let slack = if r[j] > 0.0 {
                x[j] - program.lower[j]
            } else {
                program.upper[j] - x[j]
            };
            res = res.max(r[j].abs() * slack.min(1.0));
        }
        res
    };
    let barrier: Vec<f64> = values.iter().map(|f| mu / -f).collect();
    let best = score(&barrier);
    match least_squares_multipliers(program, x, &g0, &values, &grads) {
        Some(fit) => {
            let s = score(&fit);
            if s < best {
                (fit, s)
            } else {
                (barrier, best)
            }
        }
        None => (barrier, best),
    }
}

fn least_squares_multipliers(
    program: &SmoothConvexProgram,
    x: &[f64],
    g0: &[f64],
    values: &[f64],
    grads: &[Vec<(usize, f64)>],
) -> Option<Vec<f64>> {
    let active: Vec<usize> = (0..values.len()).filter(|&i| values[i] > -1e-3).collect();
    let m = active.len();
    if m == 0 {
        return None;
    }
    let w: Vec<f64> = (0..program.n)
        .map(|j| {
            (x[j] - program.lower[j])
                .min(program.upper[j] - x[j])
                .min(1.0)
        })
        .collect();
    let mut dense = vec![vec![0.0; program.n]; m];
    for (a, &i) in active.iter().enumerate() {
        for &(j, g) in &grads[i] {
            dense[a][j] = w[j] * g;
        }
    }
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    for a in 0..m {
        for b in 0..=a {
            let v: f64 = dense[a].iter().zip(&dense[b]).map(|(p, q)| p * q).sum();
            ata[a * m + b] = v;
            ata[b * m + a] = v;
        }
        atb[a] = -dense[a]
            .iter()
            .zip(g0)
            .zip(&w)
            .map(|((p, g), wj)| p * g * wj)
            .sum::<f64>();
    }
    let trace: f64 = (0..m).map(|a| ata[a * m + a]).sum();
    for a in 0..m {
        ata[a * m + a] += 1e-14 * trace.max(1e-300);
    }
    factor_regularized(&mut ata, m).ok()?;
    chol_solve(&ata, m, &mut atb);
    let mut out = vec![0.0; values.len()];
    for (a, &i) in active.iter().enumerate() {
        out[i] = atb[a].max(0.0);
    }
    Some(out)
}

fn interior_guess(program: &SmoothConvexProgram, start: Option<&[f64]>) -> Vec<f64> {
    interior_guess_with(program, start, 1e-3)
}

/// Worst constraint value, `None` outside a log domain.
fn worst_constraint(program: &SmoothConvexProgram, x: &[f64]) -> Option<f64> {
    let mut worst = f64::NEG_INFINITY;
    for c in &program.constraints {
        worst = worst.max(c.eval(x)?);
    }
    program.objective.eval(x)?;
    Some(worst)
}

fn interior_guess_with(program: &SmoothConvexProgram, start: Option<&[f64]>, rel: f64) -> Vec<f64> {
    (0..program.n)
        .map(|j| {
            let (lo, hi) = (program.lower[j], program.upper[j]);
            let base = start
                .map(|s| s[j])
                .unwrap_or(match (lo.is_finite(), hi.is_finite()) {
                    (true, true) => 0.5 * (lo + hi),
                    (true, false) => lo + 1.0,
                    (false, true) => hi - 1.0,
                    (false, false) => 0.0,
                });
            if lo.is_finite() && hi.is_finite() {
                let margin = rel * (hi - lo);
                base.clamp(lo + margin, hi - margin)
            } else if lo.is_finite() {
                base.max(lo + 1e-3)
            } else if hi.is_finite() {
                base.min(hi - 1e-3)
            } else {
                base
            }
        })
        .collect()
}

/// Minimizes `s` subject to `f_i(x) ≤ s`, stopping once all `f_i < 0`.
fn phase_one(
    program: &SmoothConvexProgram,
    start: Option<&[f64]>,
    opts: &NlpOptions,
    steps: &mut usize,
) -> Result<Option<Vec<f64>>> {
    let start = start.filter(|s| s.len() == program.n);
    let n = program.n;
    // A boundary start pulled in by a wide margin can land far outside
    // rows with large coefficients; keep the least violated candidate.
    let mut best: Option<(Vec<f64>, f64)> = None;
    for rel in [1e-3, 1e-6, 1e-9] {
        let x = interior_guess_with(program, start, rel);
        if let Some(w) = worst_constraint(program, &x) {
            if best.as_ref().is_none_or(|b| w < b.1) {
                best = Some((x, w));
            }
        }
        if start.is_none() {
            break;
        }
    }
    let Some((x0, worst)) = best else {
        return Ok(None);
    };
    if worst < 0.0 {
        return Ok(Some(x0));
    }
    let mut aug = SmoothConvexProgram::new(n + 1);
    aug.lower[..n].copy_from_slice(&program.lower);
    aug.upper[..n].copy_from_slice(&program.upper);
    aug.lower[n] = -1.0;
    aug.objective = ConvexFn::affine(vec![(n, 1.0)], 0.0);
    aug.constraints = program
        .constraints
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.linear.terms.push((n, -1.0));
            c
        })
        .collect();
    // Keep the original objective's log arguments positive as well.
    for l in &program.objective.logs {
        aug.constraints.push(ConvexFn {
            linear: Affine::new(Vec::new(), 0.0),
            logs: vec![LogTerm {
                weight: 1.0,
                arg: l.arg.clone(),
            }],
        });
    }
    let mut z = x0;
    z.push(worst.max(-0.5) + 1.0);
    let mut solver = Barrier::new(&aug);
    let mut mu = opts.mu_start;
    let done =
        |p: &SmoothConvexProgram, z: &[f64]| z[n] < 0.0 && program.strictly_inside(&z[..p.n - 1]);
    loop {
        let (s, _) = solver.center(&mut z, mu, opts.max_iter, |p, z| done(p, z))?;
        *steps += s;
        if done(&aug, &z) {
            z.truncate(n);
            return Ok(Some(z));
        }
        if mu <= opts.tau_kkt {
            return Ok(None);
        }
        mu *= opts.mu_factor;
    }
}

struct Barrier<'a> {
    p: &'a SmoothConvexProgram,
    sys: NewtonSystem,
}

impl<'a> Barrier<'a> {
    fn new(p: &'a SmoothConvexProgram) -> Self {
        Barrier {
            p,
            sys: NewtonSystem::new(p.n, p.blocks.as_deref()),
        }
    }

    /// `f0 + μ·barrier`; `None` outside the strict interior.
    fn value(&self, x: &[f64], mu: f64) -> Option<f64> {
        let p = self.p;
        let mut v = p.objective.eval(x)?;
        let mut b = 0.0;
        for c in &p.constraints {
            let f = c.eval(x)?;
            if !(f < 0.0) {
                return None;
            }
            b -= (-f).ln();
        }
        for j in 0..p.n {
            let (lo, hi) = (p.lower[j], p.upper[j]);
            if lo.is_finite() {
                let s = x[j] - lo;
                if !(s > 0.0) {
                    return None;
                }
                b -= s.ln();
            }
            if hi.is_finite() {
                let s = hi - x[j];
                if !(s > 0.0) {
                    return None;
                }
                b -= s.ln();
            }
        }
        v += mu * b;
        Some(v)
    }

    fn assemble(&mut self, x: &[f64], mu: f64) -> Vec<f64> {
        let p = self.p;
        let n = p.n;
        self.sys.clear();
        let mut g = vec![0.0; n];
        for &(j, a) in &p.objective.linear.terms {
            g[j] += a;
        }
        for l in &p.objective.logs {
            let arg = l.arg.eval(x);
            for &(j, a) in &l.arg.terms {
                g[j] -= l.weight * a / arg;
            }
            self.sys.add_rank1(l.weight / (arg * arg), &l.arg.terms);
        }
        for c in &p.constraints {
            let mut f = c.linear.eval(x);
            let mut args = Vec::with_capacity(c.logs.len());
            for l in &c.logs {
                let a = l.arg.eval(x);
                f -= l.weight * a.ln();
                args.push(a);
            }
            let inv = 1.0 / (-f);
            let grad = c.gradient_with_args(&args);
            for &(j, a) in &grad {
                g[j] += mu * inv * a;
            }
            self.sys.add_rank1(mu * inv * inv, &grad);
            for (l, a) in c.logs.iter().zip(&args) {
                self.sys
                    .add_rank1(mu * inv * l.weight / (a * a), &l.arg.terms);
            }
        }
        for j in 0..n {
            let (lo, hi) = (p.lower[j], p.upper[j]);
            if lo.is_finite() {
                let s = x[j] - lo;
                g[j] -= mu / s;
                self.sys.add_diag(j, mu / (s * s));
            }
            if hi.is_finite() {
                let s = hi - x[j];
                g[j] += mu / s;
                self.sys.add_diag(j, mu / (s * s));
            }
        }
        g
    }

    /// Damped Newton centering. Returns (steps, converged).
    fn center(
        &mut self,
        x: &mut Vec<f64>,
        mu: f64,
        max_iter: usize,
        stop: impl Fn(&SmoothConvexProgram, &[f64]) -> bool,
    ) -> Result<(usize, bool)> {
        let n = self.p.n;
        let mut phi = self
            .value(x, mu)
            .ok_or_else(|| Error::Numerical("barrier iterate left the domain".into()))?;
        let mut trial = vec![0.0; n];
        for it in 0..max_iter {
            let g = self.assemble(x, mu);
            let mut dx: Vec<f64> = g.iter().map(|v| -v).collect();
            self.sys.solve(&mut dx)?;
            let dec2 = -g.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>();
            if !dec2.is_finite() {
                return Err(Error::Numerical("non-finite Newton decrement".into()));
            }
            if dec2 <= 1e-8 * mu || dec2 <= 1e-15 * (1.0 + phi.abs()) {
                return Ok((it, true));
            }
            // Largest step keeping the box strictly feasible.
            let mut t: f64 = 1.0;
            for j in 0..n {
                if dx[j] < 0.0 && self.p.lower[j].is_finite() {
                    t = t.min(0.99 * (x[j] - self.p.lower[j]) / -dx[j]);
                }
                if dx[j] > 0.0 && self.p.upper[j].is_finite() {
                    t = t.min(0.99 * (self.p.upper[j] - x[j]) / dx[j]);
                }
            }
            let quadratic = dec2 < 0.01 * mu;
            let mut accepted = false;
            for _ in 0..80 {
                for j in 0..n {
                    trial[j] = x[j] + t * dx[j];
                }
                if let Some(v) = self.value(&trial, mu) {
                    if v <= phi - 0.01 * t * dec2 || (quadratic && v <= phi + 1e-12 * phi.abs()) {
                        phi = v;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                return Ok((it, dec2 <= 1e-6 * mu));
            }
            std::mem::swap(x, &mut trial);
            if stop(self.p, x) {
                return Ok((it + 1, true));
            }
        }
        Ok((max_iter, false))
    }
}

impl ConvexFn {
    fn gradient_with_args(&self, args: &[f64]) -> Vec<(usize, f64)> {
        if self.logs.is_empty() {
            return self.linear.terms.clone();
        }
        let mut g: Vec<(usize, f64)> = self.linear.terms.clone();
        for (l, a) in self.logs.iter().zip(args) {
            let s = -l.weight / a;
            g.extend(l.arg.terms.iter().map(|&(j, c)| (j, s * c)));
        }
        merge_sparse(g)
    }
}

/// Block-diagonal plus low-rank symmetric positive definite system.
struct NewtonSystem {
    n: usize,
    block_of: Vec<usize>,
    pos: Vec<usize>,
    members: Vec<Vec<usize>>,
    mats: Vec<Vec<f64>>,
    low_rank: Vec<(f64, Vec<(usize, f64)>)>,
}

impl NewtonSystem {
    fn new(n: usize, blocks: Option<&[usize]>) -> Self {
        let ids: Vec<usize> = match blocks {
            Some(b) => b.to_vec(),
            None => vec![0; n],
        };
        let mut remap = std::collections::BTreeMap::new();
        for &b in &ids {
            let next = remap.len();
            remap.entry(b).or_insert(next);
        }
        let block_of: Vec<usize> = ids.iter().map(|b| remap[b]).collect();
        let mut members = vec![Vec::new(); remap.len()];
        let mut pos = vec![0; n];
        for j in 0..n {
            pos[j] = members[block_of[j]].len();
            members[block_of[j]].push(j);
        }
        let mats = members
            .iter()
            .map(|m| vec![0.0; m.len() * m.len()])
            .collect();
        NewtonSystem {
            n,
            block_of,
            pos,
            members,
            mats,
            low_rank: Vec::new(),
        }
    }

    fn clear(&mut self) {
        for m in &mut self.mats {
            m.iter_mut().for_each(|v| *v = 0.0);
        }
        self.low_rank.clear();
    }

    fn add_diag(&mut self, j: usize, v: f64) {
        let b = self.block_of[j];
        let sz = self.members[b].len();
        let p = self.pos[j];
        self.mats[b][p * sz + p] += v;
    }

    fn add_rank1(&mut self, w: f64, v: &[(usize, f64)]) {
        if w == 0.0 || v.is_empty() {
            return;
        }
        let b = self.block_of[v[0].0];
        if v.iter().all(|&(j, _)| self.block_of[j] == b) {
            let sz = self.members[b].len();
            let m = &mut self.mats[b];
            for &(r, a) in v {
                let pr = self.pos[r] * sz;
                let wa = w * a;
                for &(c, bb) in v {
                    m[pr + self.pos[c]] += wa * bb;
                }
            }
        } else {
            self.low_rank.push((w, v.to_vec()));
        }
    }

    /// Overwrites `rhs` with the solution.
    fn solve(&mut self, rhs: &mut [f64]) -> Result<()> {
        for b in 0..self.mats.len() {
            let sz = self.members[b].len();
            factor_regularized(&mut self.mats[b], sz)?;
        }
        let y = self.block_solve(rhs);
        if self.low_rank.is_empty() {
            rhs.copy_from_slice(&y);
            return Ok(());
        }
        let r = self.low_rank.len();
        let mut w_cols: Vec<Vec<f64>> = Vec::with_capacity(r);
        for (w, v) in &self.low_rank {
            let mut col = vec![0.0; self.n];
            let s = w.sqrt();
            for &(j, a) in v {
                col[j] += s * a;
            }
            w_cols.push(self.block_solve(&col));
        }
        // S = I + Vᵀ B⁻¹ V.
        let mut s = vec![0.0; r * r];
        for (c1, (w, v)) in self.low_rank.iter().enumerate() {
            let sw = w.sqrt();
            for c2 in 0..r {
                s[c1 * r + c2] = v.iter().map(|&(j, a)| sw * a * w_cols[c2][j]).sum::<f64>();
            }
            s[c1 * r + c1] += 1.0;
        }
        for c1 in 0..r {
            for c2 in 0..c1 {
                let avg = 0.5 * (s[c1 * r + c2] + s[c2 * r + c1]);
                s[c1 * r + c2] = avg;
                s[c2 * r + c1] = avg;
            }
        }
        let mut t: Vec<f64> = self
            .low_rank
            .iter()
            .map(|(w, v)| w.sqrt() * v.iter().map(|&(j, a)| a * y[j]).sum::<f64>())
            .collect();
        factor_regularized(&mut s, r)?;
        chol_solve(&s, r, &mut t);
        for j in 0..self.n {
            rhs[j] = y[j] - (0..r).map(|c| w_cols[c][j] * t[c]).sum::<f64>();
        }
        Ok(())
    }

    fn block_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        let mut buf = Vec::new();
        for (b, m) in self.members.iter().enumerate() {
            buf.clear();
            buf.extend(m.iter().map(|&j| rhs[j]));
            chol_solve(&self.mats[b], m.len(), &mut buf);
            for (p, &j) in m.iter().enumerate() {
                out[j] = buf[p];
            }
        }
        out
    }
}

/// In-place Cholesky with a growing diagonal shift on failure.
fn factor_regularized(a: &mut [f64], n: usize) -> Result<()> {
    let original = a.to_vec();
    let max_diag = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut shift = 0.0;
    for _ in 0..12 {
        if cholesky(a, n) {
            return Ok(());
        }
        shift = if shift == 0.0 {
            1e-14 * max_diag
        } else {
            shift * 100.0
        };
        a.copy_from_slice(&original);
        for i in 0..n {
            a[i * n + i] += shift;
        }
    }
    Err(Error::Numerical(
        "Newton matrix is not positive definite".into(),
    ))
}

fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}
