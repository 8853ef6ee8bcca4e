//! Deterministic simulation of a decentralized, privacy-preserving
//! clinical data exchange, with a colluding adversary that scores how much
//! of each patient's history it can reassemble.

pub mod adversary;
pub mod anonymizer;
pub mod coordination;
pub mod crypto;
pub mod key_pool;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod sim;
