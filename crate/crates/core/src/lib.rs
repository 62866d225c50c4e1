//! Cross-chain exchange through a committee of simulated enclaves.

pub mod amm;
pub mod chain;
pub mod consensus;
pub mod crypto;
pub mod enclave;
pub mod encoding;
pub mod harness;
pub mod htlc;
pub mod lightclient;
pub mod merkle;
pub mod types;
pub mod vault;
