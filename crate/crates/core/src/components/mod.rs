//! Broadcast primitives run as batches of N parallel instances, one per
//! leader. Each batch keeps its own votes and turns them into packets either
//! cumulatively (one packet carries the sender's whole state for every
//! instance) or one packet per logical message.

pub mod cbc;
pub mod prbc;
pub mod rbc;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::crypto::CryptoSuite;
use crate::packets::{BaselineBody, Body, InitBody, Routing};
use crate::types::{NodeId, NodeSet, Tick};

pub use cbc::{CbcBatch, CbcKind};
pub use prbc::PrbcBatch;
pub use rbc::RbcBatch;

/// Message family byte used by baseline and recovery packets.
pub mod family {
    pub const RBC: u8 = 1;
    pub const CBC: u8 = 2;
    pub const PRBC: u8 = 3;
    pub const ABA_LC: u8 = 4;
    pub const ABA_SC: u8 = 5;
    pub const CBC_SMALL: u8 = 6;
    pub const DEC: u8 = 7;
    pub const RESULT: u8 = 8;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BatchMode {
    /// Cumulative packets covering every instance and phase.
    Batched,
    /// One packet per logical message.
    Baseline,
}

/// Identity and parameters shared by all components of one node and scope.
#[derive(Clone)]
pub struct Ctx {
    pub me: NodeId,
    pub n: usize,
    pub f: usize,
    pub hash_len: usize,
    pub frag_cap: usize,
    pub retx_interval: Tick,
    pub mode: BatchMode,
    /// Scope string prefixed to every signed tag.
    pub prefix: Vec<u8>,
    pub crypto: Arc<CryptoSuite>,
}

impl Ctx {
    pub fn tag(&self, parts: &[&[u8]]) -> Vec<u8> {
        let mut t = self.prefix.clone();
        for p in parts {
            t.push(b'|');
            t.extend_from_slice(p);
        }
        t
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn batched(&self) -> bool {
        self.mode == BatchMode::Batched
    }
}

/// Where a packet goes: the sender's own channel, or the global channel
/// with a routing header.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Target {
    #[default]
    Local,
    Global(Routing),
}

#[derive(Clone, Debug)]
pub struct Emit {
    pub body: Body,
    pub retx: bool,
    pub target: Target,
}

/// Packets produced during one activation. `target` applies to everything
/// sent until it is changed.
#[derive(Default, Debug)]
pub struct Out {
    pub items: Vec<Emit>,
    pub target: Target,
}

impl Out {
    pub fn send(&mut self, body: Body) {
        self.items.push(Emit {
            body,
            retx: false,
            target: self.target,
        });
    }

    pub fn resend(&mut self, body: Body) {
        self.items.push(Emit {
            body,
            retx: true,
            target: self.target,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Invalid,
    Pending,
}

/// Splits a proposal into INIT fragments. An empty proposal is one empty fragment.
pub fn fragments(value: &[u8], cap: usize, instance: u8, initial_nack: NodeSet) -> Vec<InitBody> {
    let cap = cap.max(1);
    let chunks: Vec<&[u8]> = if value.is_empty() {
        vec![&[][..]]
    } else {
        value.chunks(cap).collect()
    };
    let total = chunks.len() as u16;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| InitBody {
            instance,
            seq: i as u16,
            total,
            fragment: c.to_vec(),
            initial_nack,
        })
        .collect()
}

/// Fragments received from one sender for one instance.
#[derive(Clone, Debug, Default)]
pub struct Reassembly {
    total: Option<u16>,
    parts: BTreeMap<u16, Vec<u8>>,
    done: bool,
}

impl Reassembly {
    /// Adds a fragment; returns the whole value once the last one arrives.
    pub fn add(&mut self, b: &InitBody) -> Option<Vec<u8>> {
        if self.done {
            return None;
        }
        match self.total {
            None => self.total = Some(b.total),
            Some(t) if t != b.total => return None,
            _ => {}
        }
        self.parts
            .entry(b.seq)
            .or_insert_with(|| b.fragment.clone());
        if self.parts.len() == b.total as usize {
            self.done = true;
            Some(self.parts.values().flatten().copied().collect())
        } else {
            None
        }
    }
}

/// Drops a response if the same key was answered less than `gap` ago.
#[derive(Default, Debug)]
pub struct Limiter {
    last: HashMap<u64, Tick>,
}

impl Limiter {
    pub fn allow(&mut self, key: u64, now: Tick, gap: Tick) -> bool {
        match self.last.get(&key) {
            Some(&t) if now < t + gap => false,
            _ => {
                self.last.insert(key, now);
                true
            }
        }
    }
}

/// Peers other than `me` packed into N-1 bits in id order.
pub fn peer_bits(me: NodeId, set: NodeSet) -> u64 {
    let mut out = 0u64;
    let mut k = 0;
    for i in 0..64usize {
        if i == me.idx() {
            continue;
        }
        if set.contains(i) {
            out |= 1 << k;
        }
        k += 1;
        if k == 63 {
            break;
        }
    }
    out
}

/// Whether `who` is set in bits packed by [`peer_bits`] from `owner`'s view.
pub fn peer_bits_has(owner: NodeId, bits: u64, who: NodeId) -> bool {
    if who == owner {
        return false;
    }
    let k = if who.idx() < owner.idx() {
        who.idx()
    } else {
        who.idx() - 1
    };
    k < 63 && bits >> k & 1 == 1
}

/// Inverse of [`peer_bits`]; `owner` itself is never included.
pub fn peer_set(owner: NodeId, bits: u64, n: usize) -> NodeSet {
    let mut s = NodeSet::default();
    for i in 0..n.min(64) {
        if peer_bits_has(owner, bits, NodeId(i as u8)) {
            s.insert(i);
        }
    }
    s
}

pub fn baseline(
    family: u8,
    phase: u8,
    round: u8,
    instance: u8,
    sub: u8,
    value: Vec<u8>,
    nack: u64,
) -> Body {
    Body::Baseline(BaselineBody {
        family,
        phase,
        round,
        instance,
        sub,
        value,
        nack,
    })
}
