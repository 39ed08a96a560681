//! Vulnerability analysis over a minimal imperative IR: distance-guided
//! symbolic execution, compositional per-function analysis, hybrid
//! fuzzing/symbolic scheduling and severity scoring.

pub mod cli;
pub mod fuzz;
pub mod graphs;
pub mod ir;
pub mod macke;
pub mod munch;
pub mod severity;
pub mod sonar;
pub mod symex;
