//! Counterfactual inference for language-model agents.
//!
//! The crate models an agent's action choice as a Gumbel-max structural
//! mechanism over the logits produced by a black-box policy. Holding the
//! abduced noise fixed while intervening on the state yields token-level
//! counterfactuals; lifting the same construction to a discrete abstraction
//! of the action space yields abstract counterfactuals that stay comparable
//! across interventions which change the surface text.
//!
//! - [`dist`]: categorical distributions and the Gumbel-max mechanism
//! - [`envsim`]: branching text scenes used as the agent's environment
//! - [`fixtures`]: record/replay stores for provider interactions
//! - [`policy`]: policy providers, state references, and interventions
//! - [`abstraction`]: abstraction spaces, classifiers, and topic discovery
//! - [`engine`]: the counterfactual inference engine and its verifier
//! - [`metrics`]: evaluation metrics over counterfactual samples

pub mod abstraction;
pub mod dist;
pub mod engine;
pub mod envsim;
pub mod fixtures;
pub(crate) mod httpclient;
pub mod metrics;
pub mod policy;

#[cfg(test)]
pub(crate) mod testhttp;
