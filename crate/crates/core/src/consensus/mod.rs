//! Epoch state machines, the protocol registry and the node runtime that
//! connects them to the simulator.

pub mod byzantine;
pub mod component;
pub mod dumbo;
pub mod hbbft;
pub mod host;
pub mod multihop;
pub mod registry;

use std::sync::Arc;

use crate::components::{BatchMode, Ctx, Out};
use crate::crypto::CryptoSuite;
use crate::packets::{Body, Header};
use crate::types::{expand, hash_parts, Hash, NodeId, SystemConfig, Tick};

pub use byzantine::Behavior;
pub use host::{GlobalLink, HostStats, ProtocolHost, Wiring};
pub use registry::{Protocol, Registry};

/// What one node commits at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochOutput {
    pub epoch: u16,
    /// `(origin, payload)` in ascending origin order.
    pub included: Vec<(NodeId, Vec<u8>)>,
}

impl EpochOutput {
    pub fn digest(&self) -> Hash {
        let mut parts: Vec<Vec<u8>> = vec![self.epoch.to_le_bytes().to_vec()];
        for (o, p) in &self.included {
            parts.push(vec![o.0]);
            parts.push((p.len() as u32).to_le_bytes().to_vec());
            parts.push(p.clone());
        }
        let refs: Vec<&[u8]> = parts.iter().map(|p| p.as_slice()).collect();
        hash_parts(&refs, 32)
    }

    pub fn origins(&self) -> Vec<NodeId> {
        self.included.iter().map(|x| x.0).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MachineStats {
    /// Tick of the 2f+1-th broadcast delivery.
    pub quorum_tick: Option<Tick>,
    /// Tick the agreement phase was entered.
    pub aba_start: Option<Tick>,
    /// Decision round per agreement instance.
    pub decide_rounds: Vec<u8>,
    /// `(round, coin)` pairs drawn by shared-coin engines.
    pub coins: Vec<(u8, bool)>,
    pub recover_requests: u64,
    pub recover_timeouts: u64,
    /// Extra attempts after an empty selection or a replaced leader.
    pub reattempts: u64,
    /// Selected vectors that failed validation.
    pub invalid_vectors: u64,
}

pub trait EpochMachine {
    fn start(&mut self, now: Tick, out: &mut Out);
    /// Returns true if local state changed.
    fn on_message(&mut self, header: &Header, body: &Body, now: Tick, out: &mut Out) -> bool;
    fn has_pending(&self) -> bool;
    fn poll(&mut self, force: bool, now: Tick, out: &mut Out);
    fn on_stall(&mut self, now: Tick, out: &mut Out);
    fn output(&self) -> Option<&EpochOutput>;
    fn stats(&self) -> MachineStats;
    /// Internal state for diagnosing stuck runs.
    fn describe(&self) -> String {
        String::new()
    }
}

/// Everything a node needs to build its epoch machines.
#[derive(Clone)]
pub struct NodeEnv {
    pub me: NodeId,
    /// Size and fault bound of the group running the protocol.
    pub cfg: SystemConfig,
    pub mode: BatchMode,
    pub crypto: Arc<CryptoSuite>,
    pub proposal_bytes: usize,
    pub seed: u64,
    /// Overrides the protocol's default use of threshold encryption.
    pub encrypt: Option<bool>,
    /// Fixed proposal replacing the generated one.
    pub payload: Option<Vec<u8>>,
}

impl NodeEnv {
    pub fn ctx(&self, scope: &[u8]) -> Ctx {
        Ctx {
            me: self.me,
            n: self.cfg.n_nodes,
            f: self.cfg.f,
            hash_len: self.cfg.hash_len,
            frag_cap: self.cfg.layout().fragment_cap(self.cfg.d_align),
            retx_interval: self.cfg.retx_interval,
            mode: self.mode,
            prefix: scope.to_vec(),
            crypto: self.crypto.clone(),
        }
    }

    /// Deterministic proposal of this node for `epoch`.
    pub fn proposal(&self, epoch: u16) -> Vec<u8> {
        if let Some(p) = &self.payload {
            return p.clone();
        }
        proposal_for(self.seed, self.me, epoch, self.proposal_bytes)
    }
}

pub fn proposal_for(seed: u64, node: NodeId, epoch: u16, len: usize) -> Vec<u8> {
    expand(
        &[
            b"proposal",
            &seed.to_le_bytes(),
            &[node.0],
            &epoch.to_le_bytes(),
        ],
        len,
    )
}

/// Scope prefix shared by every signed tag of one epoch.
pub fn scope(protocol: &str, epoch: u16, extra: &[u8]) -> Vec<u8> {
    let mut s = protocol.as_bytes().to_vec();
    s.extend(epoch.to_le_bytes());
    s.extend(extra);
    s
}
