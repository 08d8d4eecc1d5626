//! Multivariable model-reference adaptive control with least-squares
//! adaptation: gain factorizations, closed-loop simulation and analysis.

pub mod analysis;
pub mod cli;
pub mod closed_loop;
pub mod controller;
pub mod dynamics;
pub mod factorization;
pub mod output;
pub mod scenario;

pub use closed_loop::{run, Integration, RunError, Scenario, Trace};
pub use factorization::{find_dplus, ldu_factor, leading_minors, sdu_factor, FactorError};
pub use scenario::{builtin, resolve, ScenarioFile};
