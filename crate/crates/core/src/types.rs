//! Shared vocabulary: node ids, system parameters, hashes, votes.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest network a single channel supports. Node sets are `u64` bitmaps.
pub const MAX_NODES: usize = 64;

pub type Tick = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("need at least 4 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("at most {MAX_NODES} nodes per channel, got {0}")]
    TooManyNodes(usize),
    #[error("f = {f} exceeds (n-1)/3 for n = {n}")]
    FaultBound { n: usize, f: usize },
    #[error("invalid parameter {name}: {reason}")]
    Invalid { name: &'static str, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u8);

impl NodeId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Largest f tolerated by `n` nodes.
pub fn fault_threshold(n: usize) -> Result<usize, ConfigError> {
    if n < 4 {
        return Err(ConfigError::TooFewNodes(n));
    }
    if n > MAX_NODES {
        return Err(ConfigError::TooManyNodes(n));
    }
    Ok((n - 1) / 3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quorums {
    /// Matching ECHOs needed to send READY.
    pub echo: usize,
    /// Matching READYs needed to amplify a READY.
    pub ready_amplify: usize,
    /// Matching READYs needed to deliver.
    pub deliver: usize,
}

pub fn quorum_sizes(cfg: &SystemConfig) -> Quorums {
    let f = cfg.f;
    Quorums {
        echo: 2 * f + 1,
        ready_amplify: f + 1,
        deliver: 2 * f + 1,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub n_nodes: usize,
    pub f: usize,
    /// Frame alignment unit D in bytes; every frame is between D and 2D long.
    pub d_align: usize,
    /// Ticks without progress before a node rebroadcasts its latest state.
    pub retx_interval: Tick,
    pub hash_len: usize,
    pub sig_len: usize,
    pub tsig_len: usize,
    pub proof_len: usize,
    /// Channel throughput in bytes per tick.
    pub bitrate: usize,
    /// Contention window: backoff is drawn uniformly from `0..backoff_window`.
    pub backoff_window: Tick,
    /// Idle ticks after which a partially settled batch is flushed.
    pub batch_window: Tick,
    /// Packets for future epochs kept per node.
    pub buffer_cap: usize,
    /// Rounds an agreement instance may run before it is declared stuck.
    pub round_cap: u8,
    pub rng_seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_nodes: 4,
            f: 1,
            d_align: 256,
            retx_interval: 400,
            hash_len: 32,
            sig_len: 40,
            tsig_len: 21,
            proof_len: 21,
            bitrate: 16,
            backoff_window: 16,
            batch_window: 40,
            buffer_cap: 64,
            round_cap: 64,
            rng_seed: 0,
        }
    }
}

impl SystemConfig {
    /// Defaults for `n` nodes with the largest tolerated `f` and a frame unit
    /// large enough for every packet layout.
    pub fn for_nodes(n: usize) -> Result<SystemConfig, ConfigError> {
        let f = fault_threshold(n)?;
        let mut cfg = SystemConfig {
            n_nodes: n,
            f,
            ..SystemConfig::default()
        };
        cfg.d_align = cfg.min_d_align();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn max_packet(&self) -> usize {
        2 * self.d_align
    }

    /// Smallest power-of-two D (at least 128) whose 2D bound fits the
    /// largest packet layout.
    pub fn min_d_align(&self) -> usize {
        let need = crate::packets::max_layout_len(&self.layout());
        let mut d = 128;
        while 2 * d < need {
            d *= 2;
        }
        d
    }

    pub fn layout(&self) -> crate::packets::LayoutParams {
        crate::packets::LayoutParams {
            n: self.n_nodes,
            f: self.f,
            hash_len: self.hash_len,
            sig_len: self.sig_len,
            tsig_len: self.tsig_len,
            proof_len: self.proof_len,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let max_f = fault_threshold(self.n_nodes)?;
        if self.f > max_f {
            return Err(ConfigError::FaultBound {
                n: self.n_nodes,
                f: self.f,
            });
        }
        let bad = |name, reason: &str| {
            Err(ConfigError::Invalid {
                name,
                reason: reason.into(),
            })
        };
        if self.hash_len == 0 || self.hash_len > 32 {
            return bad("hash_len", "must be in 1..=32");
        }
        if self.sig_len == 0 || self.sig_len > 255 {
            return bad("sig_len", "must be in 1..=255");
        }
        if self.tsig_len < 8 || self.tsig_len > 255 {
            return bad("tsig_len", "must be in 8..=255");
        }
        if self.proof_len > 255 {
            return bad("proof_len", "must be at most 255");
        }
        if self.bitrate == 0 {
            return bad("bitrate", "must be positive");
        }
        if self.backoff_window == 0 {
            return bad("backoff_window", "must be positive");
        }
        if self.retx_interval == 0 || self.batch_window == 0 {
            return bad("retx_interval", "timers must be positive");
        }
        if self.round_cap == 0 {
            return bad("round_cap", "must be positive");
        }
        let need = crate::packets::max_layout_len(&self.layout());
        if self.max_packet() < need {
            return Err(ConfigError::Invalid {
                name: "d_align",
                reason: format!(
                    "2D = {} is below the largest layout ({} bytes)",
                    self.max_packet(),
                    need
                ),
            });
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<SystemConfig, ConfigError> {
        let cfg: SystemConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SystemConfig, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::from_toml_str(&s)
    }
}

/// Truncated SHA-256 digest, `len` bytes significant.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Hash {
    len: u8,
    bytes: [u8; 32],
}

impl Hash {
    pub fn zero(len: usize) -> Hash {
        Hash {
            len: len as u8,
            bytes: [0; 32],
        }
    }

    pub fn from_slice(b: &[u8]) -> Hash {
        assert!(b.len() <= 32, "hash longer than 32 bytes");
        let mut bytes = [0u8; 32];
        bytes[..b.len()].copy_from_slice(b);
        Hash {
            len: b.len() as u8,
            bytes,
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl fmt::Debug for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.as_bytes().iter().take(6) {
            write!(f, "{:02x}", b)?;
        }
        Ok(())
    }
}

pub fn hash(data: &[u8]) -> Hash {
    hash_with_len(data, 32)
}

pub fn hash_with_len(data: &[u8], len: usize) -> Hash {
    let d = Sha256::digest(data);
    Hash::from_slice(&d[..len])
}

/// Hash of several byte strings, each length-prefixed.
pub fn hash_parts(parts: &[&[u8]], len: usize) -> Hash {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p);
    }
    Hash::from_slice(&h.finalize()[..len])
}

/// Deterministic byte stream of arbitrary length derived from `parts`.
pub fn expand(parts: &[&[u8]], out_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_len);
    let mut ctr = 0u32;
    while out.len() < out_len {
        let mut h = Sha256::new();
        h.update(ctr.to_le_bytes());
        for p in parts {
            h.update((p.len() as u32).to_le_bytes());
            h.update(p);
        }
        let d = h.finalize();
        let take = (out_len - out.len()).min(32);
        out.extend_from_slice(&d[..take]);
        ctr += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Vote {
    Zero,
    One,
    Bottom,
}

impl Vote {
    pub fn from_bool(b: bool) -> Vote {
        if b {
            Vote::One
        } else {
            Vote::Zero
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Vote::Zero => Some(false),
            Vote::One => Some(true),
            Vote::Bottom => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    pub payload: Vec<u8>,
    pub origin: NodeId,
    pub epoch: u16,
}

/// Set of node ids as a bitmap.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeSet(pub u64);

impl NodeSet {
    pub fn full(n: usize) -> NodeSet {
        if n >= 64 {
            NodeSet(u64::MAX)
        } else {
            NodeSet((1u64 << n) - 1)
        }
    }

    pub fn insert(&mut self, i: usize) -> bool {
        let had = self.contains(i);
        self.0 |= 1 << i;
        !had
    }

    pub fn remove(&mut self, i: usize) {
        self.0 &= !(1 << i);
    }

    pub fn contains(&self, i: usize) -> bool {
        i < 64 && self.0 >> i & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let v = self.0;
        (0..64).filter(move |i| v >> i & 1 == 1)
    }

    pub fn union(self, o: NodeSet) -> NodeSet {
        NodeSet(self.0 | o.0)
    }
}

impl fmt::Debug for NodeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        assert_eq!(fault_threshold(4), Ok(1));
        assert_eq!(fault_threshold(7), Ok(2));
        assert_eq!(fault_threshold(10), Ok(3));
        assert_eq!(fault_threshold(3), Err(ConfigError::TooFewNodes(3)));
        assert!(fault_threshold(65).is_err());
    }

    #[test]
    fn quorum_values() {
        let cfg = SystemConfig::for_nodes(7).unwrap();
        let q = quorum_sizes(&cfg);
        assert_eq!((q.echo, q.ready_amplify, q.deliver), (5, 3, 5));
    }

    #[test]
    fn config_rejects_bad_f() {
        let mut cfg = SystemConfig::for_nodes(4).unwrap();
        cfg.f = 2;
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::FaultBound { .. })
        ));
    }

    #[test]
    fn config_toml() {
        let cfg = SystemConfig::from_toml_str("n_nodes = 7\nf = 2\nd_align = 512\n").unwrap();
        assert_eq!(cfg.n_nodes, 7);
        assert_eq!(cfg.max_packet(), 1024);
        assert!(SystemConfig::from_toml_str("n_nodes = 7\nbogus = 1\n").is_err());
    }

    #[test]
    fn hash_truncation() {
        let a = hash_with_len(b"abc", 8);
        let b = hash(b"abc");
        assert_eq!(a.as_bytes(), &b.as_bytes()[..8]);
        assert_eq!(
            b.as_bytes()[..4],
            [0xba, 0x78, 0x16, 0xbf],
            "sha-256 of 'abc' starts with ba7816bf"
        );
    }

    #[test]
    fn expand_prefix_stable() {
        let a = expand(&[b"x"], 40);
        let b = expand(&[b"x"], 70);
        assert_eq!(a.len(), 40);
        assert_eq!(&b[..40], &a[..]);
    }

    #[test]
    fn nodeset_ops() {
        let mut s = NodeSet::default();
        assert!(s.insert(3));
        assert!(!s.insert(3));
        s.insert(0);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 3]);
        assert_eq!(NodeSet::full(4).len(), 4);
    }
}
