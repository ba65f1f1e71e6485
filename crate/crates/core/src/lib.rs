//! Cross-domain offline reinforcement learning with supported policy and
//! value optimization, on self-contained toy continuous-control tasks.
//!
//! The crate is organised bottom-up:
//! - [`nn`] / [`params`]: MLPs, reverse-mode autodiff, Adam, EMA targets
//! - [`envs`]: deterministic toy environments with parameterized dynamics
//! - [`dataset`]: offline transition datasets (collect / subsample / mix)
//! - [`density`]: CVAE density estimation and support filtering
//! - [`agent`]: the TD3-based learner with support constraints
//! - [`augment`]: pseudo-model and noising source-data generators
//! - [`metrics`]: evaluation rollouts, normalized scores, diagnostics
//! - [`harness`]: config-driven end-to-end experiment pipelines

pub mod agent;
pub mod augment;
pub mod dataset;
pub mod density;
pub mod envs;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
