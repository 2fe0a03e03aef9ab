//! Phase-one simplex feasibility oracle for `A·x ≤ b, x ≥ 0`.

use crate::error::{Error, Result};

const PIVOT_EPS: f64 = 1e-11;
const COST_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LinearFeasibilityProblem {
    n: usize,
    rows: Vec<(Vec<f64>, f64)>,
    /// Feasibility tolerance on row-scaled constraints.
    pub tol: f64,
}

impl LinearFeasibilityProblem {
    pub fn new(n: usize) -> Self {
        LinearFeasibilityProblem {
            n,
            rows: Vec::new(),
            tol: 1e-9,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn add_row(&mut self, coeffs: &[f64], rhs: f64) {
        assert_eq!(
            coeffs.len(),
            self.n,
            "row length must equal the variable count"
        );
        self.rows.push((coeffs.to_vec(), rhs));
    }

    pub fn add_sparse_row(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let mut row = vec![0.0; self.n];
        for &(j, a) in terms {
            row[j] += a;
        }
        self.rows.push((row, rhs));
    }

    /// Row-scaled residual `max_i (a_i·x − b_i)/‖a_i‖_∞`.
    pub fn max_scaled_violation(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|(a, b)| {
                let s = row_scale(a);
                (a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() - b) / s
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn satisfied_by(&self, x: &[f64]) -> bool {
        x.len() == self.n && x.iter().all(|v| *v >= 0.0) && self.max_scaled_violation(x) <= self.tol
    }
}

fn row_scale(a: &[f64]) -> f64 {
    let s = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Returns a witness `x ≥ 0` with `A·x ≤ b + τ·scale`, or `None` if the
/// system is infeasible.
pub fn lp_feasible(problem: &LinearFeasibilityProblem) -> Result<Option<Vec<f64>>> {
    if problem.n == 0 {
        return Err(Error::Numerical(
            "linear feasibility problem without variables".into(),
        ));
    }
    let tol = problem.tol;
    let n = problem.n;

    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(problem.rows.len());
    for (a, b) in &problem.rows {
        if a.iter().chain(std::iter::once(b)).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite coefficient".into()));
        }
        if a.iter().all(|v| *v == 0.0) {
            if *b < -tol {
                return Ok(None);
            }
            continue;
        }
        let s = row_scale(a);
        rows.push((a.iter().map(|v| v / s).collect(), b / s));
    }
    let m = rows.len();
    if m == 0 {
        return Ok(Some(vec![0.0; n]));
    }
    let num_art = rows.iter().filter(|(_, b)| *b < 0.0).count();
    // Columns: structural | slack | artificial | rhs.
    let art0 = n + m;
    let width = n + m + num_art + 1;
    let rhs = width - 1;
    let mut t = vec![0.0; (m + 1) * width];
    let mut basis = vec![0usize; m];
    let mut next_art = art0;
    for (r, (a, b)) in rows.iter().enumerate() {
        let row = &mut t[r * width..(r + 1) * width];
        if *b >= 0.0 {
            row[..n].copy_from_slice(a);
            row[n + r] = 1.0;
            row[rhs] = *b;
            basis[r] = n + r;
        } else {
            for (dst, src) in row[..n].iter_mut().zip(a) {
                *dst = -src;
            }
            row[n + r] = -1.0;
            row[next_art] = 1.0;
            row[rhs] = -b;
            basis[r] = next_art;
            next_art += 1;
        }
    }
    // Objective row holds reduced costs of `Σ artificials` and −z in the rhs.
    for r in 0..m {
        if basis[r] >= art0 {
            for c in 0..width {
                let v = t[r * width + c];
                t[m * width + c] -= v;
            }
        }
    }
    for c in art0..rhs {
        t[m * width + c] = 0.0;
    }

    let max_iter = 10_000 + 50 * (m + n) * (m + n).min(100);
    let mut iter = 0;
    loop {
        let obj = &t[m * width..(m + 1) * width];
        // Bland: lowest-index improving column; artificials never re-enter.
        let entering = (0..art0).find(|&c| obj[c] < -COST_EPS);
        let Some(e) = entering else { break };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            let a = t[r * width + e];
            if a > PIVOT_EPS {
                let ratio = t[r * width + rhs] / a;
                match leave {
                    None => leave = Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-14 * (1.0 + lratio.abs())
                            || (ratio <= lratio + 1e-14 * (1.0 + lratio.abs())
                                && basis[r] < basis[lr])
                        {
                            leave = Some((r, ratio));
                        }
                    }
                }
            }
        }
        let Some((pr, _)) = leave else {
            return Err(Error::Numerical(
                "phase-one objective unbounded below".into(),
            ));
        };
        pivot(&mut t, width, m + 1, pr, e);
        basis[pr] = e;
        iter += 1;
        if iter > max_iter {
            return Err(Error::Numerical("simplex iteration limit reached".into()));
        }
    }

    let infeasibility = -t[m * width + rhs];
    if infeasibility > tol {
        return Ok(None);
    }
    let mut x = vec![0.0; n];
    for r in 0..m {
        if basis[r] < n {
            x[basis[r]] = t[r * width + rhs].max(0.0);
        }
    }
    if !problem.satisfied_by(&x) {
        return Err(Error::Numerical(format!(
            "phase-one witness violates rows by {:.3e}",
            problem.max_scaled_violation(&x)
        )));
    }
    Ok(Some(x))
}

fn pivot(t: &mut [f64], width: usize, nrows: usize, pr: usize, pc: usize) {
    let p = t[pr * width + pc];
    for c in 0..width {
        t[pr * width + c] /= p;
    }
    t[pr * width + pc] = 1.0;
    let (before, rest) = t.split_at_mut(pr * width);
    let (prow, after) = rest.split_at_mut(width);
    let eliminate = |row: &mut [f64]| {
        let f = row[pc];
        if f != 0.0 {
            for (dst, src) in row.iter_mut().zip(prow.iter()) {
                *dst -= f * src;
            }
            row[pc] = 0.0;
        }
    };
    for row in before.chunks_mut(width) {
        eliminate(row);
    }
    for row in after.chunks_mut(width).take(nrows - pr - 1) {
        eliminate(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut p = LinearFeasibilityProblem::new(1);
        p.add_row(&[1.0], 1.0);
        p.add_row(&[-1.0], -2.0);
        assert_eq!(lp_feasible(&p).unwrap(), None);
    }

    #[test]
    fn origin_is_a_witness() {
        let mut p = LinearFeasibilityProblem::new(2);
        p.add_row(&[1.0, 1.0], 1.0);
        assert_eq!(lp_feasible(&p).unwrap(), Some(vec![0.0, 0.0]));
    }

    #[test]
    fn witness_satisfies_lower_bounds() {
        let mut p = LinearFeasibilityProblem::new(2);
        p.add_row(&[-1.0, 0.0], -1.5);
        p.add_row(&[0.0, -2.0], -1.0);
        p.add_row(&[1.0, 1.0], 3.0);
        let x = lp_feasible(&p).unwrap().unwrap();
        assert!(x[0] >= 1.5 - 1e-9 && x[1] >= 0.5 - 1e-9 && x[0] + x[1] <= 3.0 + 1e-9);
    }

    #[test]
    fn zero_rows_are_decided_directly() {
        let mut p = LinearFeasibilityProblem::new(2);
        p.add_row(&[0.0, 0.0], -1.0);
        assert_eq!(lp_feasible(&p).unwrap(), None);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut p = LinearFeasibilityProblem::new(1);
        p.add_row(&[f64::NAN], 1.0);
        assert!(lp_feasible(&p).is_err());
    }

    /// Gaussian elimination with partial pivoting; `None` when singular.
    fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[piv][col].abs() < 1e-10 {
                return None;
            }
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        Some(x)
    }

    /// A pointed polyhedron is nonempty iff one of its vertices exists:
    /// try every choice of `n` tight constraints among rows and `x ≥ 0`.
    fn vertex_enumeration_feasible(rows: &[(Vec<f64>, f64)], n: usize) -> bool {
        let mut all: Vec<(Vec<f64>, f64)> = rows.to_vec();
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = -1.0;
            all.push((e, 0.0));
        }
        let total = all.len();
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let a: Vec<Vec<f64>> = idx.iter().map(|&i| all[i].0.clone()).collect();
            let b: Vec<f64> = idx.iter().map(|&i| all[i].1).collect();
            if let Some(x) = solve_square(a, b) {
                let ok = all.iter().all(|(a, b)| {
                    let s = row_scale(a);
                    (a.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() - b) / s <= 1e-7
                });
                if ok {
                    return true;
                }
            }
            // Next combination in lexicographic order.
            let mut pos = n;
            while pos > 0 {
                pos -= 1;
                if idx[pos] < total - n + pos {
                    idx[pos] += 1;
                    for q in pos + 1..n {
                        idx[q] = idx[q - 1] + 1;
                    }
                    break;
                }
                if pos == 0 {
                    return false;
                }
            }
        }
    }

    fn random_system(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<(Vec<f64>, f64)> {
        (0..m)
            .map(|_| {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = rng.random_range(-0.25..1.0);
                (a, b)
            })
            .collect()
    }

    #[test]
    fn agrees_with_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut feasible = 0;
        let shapes = [
            (20usize, 3usize, 60usize),
            (20, 5, 40),
            (20, 7, 4),
            (12, 8, 6),
        ];
        for (m, n, count) in shapes {
            for _ in 0..count {
                let rows = random_system(&mut rng, m, n);
                let mut p = LinearFeasibilityProblem::new(n);
                for (a, b) in &rows {
                    p.add_row(a, *b);
                }
                let got = lp_feasible(&p).unwrap();
                let want = vertex_enumeration_feasible(&rows, n);
                assert_eq!(got.is_some(), want, "m={m} n={n} rows={rows:?}");
                if let Some(x) = got {
                    assert!(p.satisfied_by(&x));
                    feasible += 1;
                }
            }
        }
        assert!(
            feasible > 10 && feasible < 100,
            "need both outcomes, got {feasible} feasible"
        );
    }

    #[test]
    fn degenerate_rows_terminate() {
        let mut p = LinearFeasibilityProblem::new(3);
        for _ in 0..6 {
            p.add_row(&[1.0, -1.0, 0.0], 0.0);
            p.add_row(&[-1.0, 1.0, 0.0], 0.0);
            p.add_row(&[0.0, 0.0, -1.0], -1.0);
        }
        p.add_row(&[-1.0, -1.0, 1.0], -1.0);
        let x = lp_feasible(&p).unwrap().unwrap();
        assert!(p.satisfied_by(&x));
    }
}
