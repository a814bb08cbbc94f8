//! Experiment drivers shared by the command line, the Python bindings and
//! the acceptance tests.

pub mod bench;
pub mod compare;
pub mod gradsuite;

pub use bench::{run_bench, BenchRow, BenchSpec};
pub use compare::{run_comparison, ComparisonReport, ComparisonSpec, SeedResult};
pub use gradsuite::{check_case, gradient_suite, suite_cases, GradCase, GradCaseResult};
