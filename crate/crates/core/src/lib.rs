//! Core library for a two-sided sealed-bid crowdfunding market in which
//! multiple model owners jointly fund the training of one machine-learning
//! model across a set of base stations.
//!
//! The crate provides:
//!
//! - [`mechanism`]: welfare-maximizing model selection and the Clarke pivot
//!   tax that makes truthful claims a weakly dominant strategy;
//! - [`settlement`]: exact integer payment pools, share apportionment,
//!   budget-balance verification, and tax recycling;
//! - [`ledger`]: a simulated smart contract: a phased state machine with
//!   deposits, commit-reveal sealed bids, punishment votes, settlement, and
//!   a hash-chained replayable event log;
//! - [`agents`]: bidding and target-selection strategies for simulated
//!   participants;
//! - [`flsim`]: a synthetic stand-in for federated training that maps data
//!   budgets to per-label accuracy and station contributions;
//! - [`oracle`]: an independent brute-force verifier for the mechanism's
//!   incentive properties;
//! - [`scenario`] and [`sim`]: reproducible multi-round experiment drivers.

pub mod agents;
pub mod fixtures;
pub mod flsim;
pub mod ledger;
pub mod mechanism;
pub mod money;
pub mod oracle;
pub mod rng;
pub mod scenario;
pub mod settlement;
pub mod sim;
pub mod types;

pub use money::Money;
pub use types::{ModelId, ModelProposal, ParticipantId, Profile, Role};
