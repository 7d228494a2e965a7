//! Preference-guided inference-time alignment for finite-horizon token MDPs.
//!
//! A frozen reference policy generates token sequences; alignment happens
//! purely at decode time by reweighting its next-token distribution with
//! `exp(score / eta)` for a guidance score. The crate provides
//!
//! - the deterministic token-MDP substrate ([`mdp`]): states, policies,
//!   rollouts, greedy decoding, and exhaustive completion enumeration;
//! - exact KL-regularized soft values ([`soft_value`]): backward induction,
//!   the forward log-expectation form, policy tilting, and KL estimators;
//! - a Bradley-Terry preference layer ([`preference`]): constrained logistic
//!   MLE over a feature map, with the logit transform that turns win
//!   probabilities against a greedy reference completion into guidance scores;
//! - the iterative preference-alignment loop ([`pita`]) and value-guided
//!   baselines ([`baselines`]);
//! - the star-graph task with its analytically faulty reference policy
//!   ([`star_graph`]);
//! - numerical experiments for the estimation-error and regret behaviour of
//!   the constrained MLE ([`theory`]);
//! - dataset/result serialization ([`metrics`]) and the CLI entry points
//!   ([`cli`]).
//!
//! Start with the runnable examples (`cargo run --example soft_bellman`,
//! `--example pita_star_graph`, ...) for end-to-end usage.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod mdp;
pub mod metrics;
pub mod pita;
pub mod preference;
pub mod seeding;
pub mod soft_value;
pub mod star_graph;
pub mod theory;

pub use error::Error;
pub use mdp::{Completion, Environment, Policy, State, Token};

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
