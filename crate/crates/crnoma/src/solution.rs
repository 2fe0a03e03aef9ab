//! Result type shared by every solver.

use std::fmt;

use crate::rates::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    /// Certified within the requested tolerance.
    Optimal,
    /// Stationary point reached (SCA-type solvers).
    Converged,
    MaxIterations,
    Infeasible,
    /// Iteration cap reached before any feasible policy was found.
    NotFound,
    /// Relaxed binaries not integral at convergence.
    Fractional,
}

impl SolveStatus {
    pub fn has_policy(self) -> bool {
        !matches!(self, SolveStatus::Infeasible | SolveStatus::NotFound)
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NotFound => "not_found",
            SolveStatus::Fractional => "fractional",
        };
        f.write_str(s)
    }
}

/// Column-named iteration log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(columns: &[&'static str]) -> Self {
        Trace {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// All-zero policy when infeasible.
    pub policy: Policy,
    /// Weighted throughput of `policy`, bits/s/Hz.
    pub objective: f64,
    /// Certified upper bound on the optimum, when the solver provides one.
    pub upper_bound: Option<f64>,
    pub iterations: usize,
    pub trace: Trace,
}

impl SolveResult {
    pub fn infeasible(policy: Policy, iterations: usize, trace: Trace) -> Self {
        SolveResult {
            status: SolveStatus::Infeasible,
            policy,
            objective: 0.0,
            upper_bound: None,
            iterations,
            trace,
        }
    }

    pub fn gap(&self) -> Option<f64> {
        self.upper_bound.map(|b| (b - self.objective).max(0.0))
    }
}
