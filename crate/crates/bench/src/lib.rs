//! Desk-scale experiments for the kNN attention estimators: forward error
//! against `k`, runtime scaling in `n`, gradient error budgets and gradient
//! descent with estimated gradients. Results are flat CSV tables.

pub mod data;
pub mod error;
pub mod experiments;
pub mod results;
pub mod spec;

pub use error::{BenchError, BenchResult};
pub use experiments::{run, run_error_vs_k, run_grad_bounds, run_grad_descent, run_runtime_vs_n};
pub use results::{to_csv_bytes, write_csv, write_csv_file, ResultRow, CSV_HEADER};
pub use spec::{Experiment, ExperimentSpec, Gradient, IndexChoice, KChoice, Loss, Upstream, DEFAULT_ORACLE_CAP};
