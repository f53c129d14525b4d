//! Primal-dual interior point solver for equality-constrained programs with
//! box bounds. Complementarity is relaxed by a fixed `epsilon` and each
//! variable and bound multiplier gets its own step length.

pub mod kkt;
pub mod linalg;
pub mod problem;
pub mod solver;

#[cfg(test)]
mod testing;

pub use kkt::{build_kkt, check_kkt, KktReport, KktState};
pub use linalg::{CsrMatrix, LinalgError, SparseLu, Triplets};
pub use problem::{OptProblem, SolverConfig, StepRule, Variable};
pub use solver::{solve, solve_observed, IterationRecord, IterationView, OptSolution, SolveError, SolveStatus};
