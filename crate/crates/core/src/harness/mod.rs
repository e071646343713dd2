//! Configuration, evaluation, run orchestration and artifacts.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod run;

pub use config::ExperimentConfig;
pub use eval::{evaluate, EvalReport, EvalSpec};
pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use run::{cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train, cmd_train_with};
