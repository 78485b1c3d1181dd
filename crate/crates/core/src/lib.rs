//! Deterministic epoch simulator and policy library for the Intermediating
//! DFMM Asset (IDA).
//!
//! The crate is organised by balance-sheet side:
//!
//! - [`state`]: pool and system snapshots plus the accounting identities;
//! - [`policy`]: liability levers (differential fee, prudential market
//!   operations, threshold modulation);
//! - [`assets`]: asset-mix management (weights, correlation adjustment,
//!   expected shortfall, the constrained target optimizer);
//! - [`sim`]: scenario configuration, agents and the epoch loop.

pub mod assets;
pub mod market;
pub mod policy;
pub mod sim;
pub mod state;

#[cfg(test)]
mod testkit;
