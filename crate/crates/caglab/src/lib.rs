//! Desk-scale laboratory for counterfactual failures in language-conditioned
//! control policies, and counterfactual action guidance (CAG) as the fix.
//!
//! The crate builds a deterministic gridworld tabletop, manufactures a biased
//! imitation dataset from a scripted expert, trains tiny feedforward policies
//! (one language-conditioned, one vision-only), and evaluates dual-branch
//! guided inference against the baseline across counterfactual task suites.
//!
//! Modules follow the pipeline order:
//!
//! - [`sim`] — the gridworld: scenes, actions, events, observation encoding
//! - [`suites`] — counterfactual task suites over shared scene layouts
//! - [`dataset`] — scripted expert plus biased demonstration collection
//! - [`policy`] — two-layer policy nets, exact gradients, training
//! - [`guidance`] — dual-branch action mixing and the Bayesian oracle
//! - [`eval`] — rollouts, faithful/biased classification, metrics, sweeps
//! - [`config`] / [`pipeline`] — experiment config and the command layer

pub mod config;
pub mod dataset;
pub mod eval;
pub mod guidance;
pub mod pipeline;
pub mod policy;
pub mod seeding;
pub mod sim;
pub mod suites;
