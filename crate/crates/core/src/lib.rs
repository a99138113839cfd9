//! Off-policy policy optimization for autoregressive softmax policies.
//!
//! The crate implements the truncated-importance-sampling family of policy
//! gradient estimators (SFT, naive REINFORCE, off-policy REINFORCE, truncated
//! IS and tapered off-policy REINFORCE), PPO and DPO comparison losses, exact
//! enumeration oracles that check them, and a small training and evaluation
//! harness on synthetic verifiable-answer tasks.
//!
//! Module map:
//!
//! * [`policy`]: tabular and feature-linear softmax policies, sampling,
//!   exact log-probabilities and gradients, support enumeration;
//! * [`task`]: synthetic answer-marker tasks and their scoring;
//! * [`objectives`]: clip/taper algebra, per-trajectory gradients, surrogate
//!   objectives and the analytic identities around them;
//! * [`dataset`]: dataset generation, composition and the baseline /
//!   effective-proportion algebra;
//! * [`trainer`]: minibatch gradient ascent and the multi-iteration loop;
//! * [`oracle`]: exhaustive enumeration, finite differences, bias reports;
//! * [`metrics`] and [`experiment`]: evaluation and the experiment runner
//!   used by the `taperlab` binary.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod numeric;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use objectives::{GradientEstimate, MethodConfig, MethodKind, TruncationLimits};
pub use policy::{PolicyKind, PolicyParams, PolicyShape, PromptId, TokenId, Trajectory, Vocabulary};
pub use task::{ScoreResult, TaskConfig, TaskSuite};
