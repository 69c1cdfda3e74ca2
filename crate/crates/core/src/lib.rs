//! Batched asynchronous Byzantine fault tolerant consensus for nodes sharing
//! one broadcast medium, plus a deterministic simulator of that medium.

pub mod aba;
pub mod components;
pub mod consensus;
pub mod crypto;
pub mod netsim;
pub mod packets;
pub mod run;
pub mod types;

pub use types::{
    fault_threshold, quorum_sizes, ConfigError, Hash, NodeId, NodeSet, Proposal, SystemConfig,
    Tick, Vote,
};
