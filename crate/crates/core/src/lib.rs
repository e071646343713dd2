//! Action-applicability policy optimization on a synthetic keyed-lookup task
//! family.
//!
//! A small autoregressive policy learns *when* to emit an auxiliary
//! construction span. Each training task is rolled out three ways (aux
//! forced, aux masked, unconstrained); the first two give a per-task utility
//! gap and perplexity baseline that shape the reward of the third.

pub mod env;
pub mod error;
pub mod exec;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod trajectory;
pub mod vocab;

pub use error::{Error, Result};
pub use exec::Execution;
