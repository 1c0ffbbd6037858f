//! Multi-party set intersection key agreement (SIKA) and the output protocols
//! built on it: cardinality, delegated PSI, labeled delegated PSI with
//! encrypted payload, and threshold-gated payload release.
//!
//! `n` data providers each hold a set of identifiers. They exchange oblivious
//! key-value stores pairwise, then upload blinded pseudonyms to a collector
//! that has no input of its own. The collector unblinds, links the records
//! present at every provider, and recovers a per-record key for exactly those
//! records, which it can use to decrypt their payloads.

pub mod bits;
pub mod error;
pub mod gf128;
pub mod okvs;
pub mod outputs;
pub mod primitives;
pub mod protocol;
pub mod session;
pub mod shamir;

#[cfg(test)]
mod test_stats;

pub use bits::{BitString, Kappa, SecurityParams};
pub use error::{Error, Result};
