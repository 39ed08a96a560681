//! Symbolic execution with pluggable state-selection strategies.

mod explore;
mod expr;
mod search;
mod solver;
mod state;

pub use explore::*;
pub use expr::{Atom, Constraint, ExprRef, SymExpr, Value};
pub use search::*;
pub use solver::{solve_path_condition, SolveResult, SolverConfig, SolverError};
pub use state::{model_bytes, ExecState, Executor, Status, Stepped, SymFrame, MAX_SYMBOLIC_STORE_LEN};
