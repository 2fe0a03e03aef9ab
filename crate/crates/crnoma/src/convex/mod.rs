pub mod lp;
pub mod nlp;

pub use lp::{lp_feasible, LinearFeasibilityProblem};
pub use nlp::{
    solve_convex, Affine, ConvexFn, LogTerm, NlpOptions, NlpSolution, NlpStatus,
    SmoothConvexProgram,
};
