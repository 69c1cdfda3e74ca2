//! Binary agreement engines. One engine runs k instances; engines are
//! created by [`AbaKind`] and driven through the [`Aba`] trait.

pub mod lc;
pub mod sc;

use crate::components::{BatchMode, Ctx, Out};
use crate::crypto::CoinScheme;
use crate::packets::Body;
use crate::types::{NodeId, Tick};

pub use lc::LcBatch;
pub use sc::ScBatch;

pub trait Aba {
    /// Inputs one bit per instance. Nothing is sent before this call.
    fn start(&mut self, inputs: &[bool], now: Tick, out: &mut Out);
    fn handle(&mut self, sender: NodeId, body: &Body, retx: bool, now: Tick, out: &mut Out)
        -> bool;
    fn has_pending(&self) -> bool;
    fn poll(&mut self, force: bool, out: &mut Out);
    fn stall(&mut self, out: &mut Out);
    fn decided(&self, i: usize) -> Option<bool>;
    fn decide_round(&self, i: usize) -> Option<u8>;
    fn k(&self) -> usize;
    fn started(&self) -> bool;
    /// Current round of the engine (the highest among sub-engines).
    fn round(&self) -> u8;
    /// `(round, coin)` for every coin this engine has combined.
    fn coins(&self) -> Vec<(u8, bool)>;

    /// Human-readable internal state for diagnostics.
    fn describe(&self) -> String {
        String::new()
    }

    fn all_decided(&self) -> bool {
        (0..self.k()).all(|i| self.decided(i).is_some())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AbaKind {
    /// Bracha with local coins.
    LocalCoin,
    /// Shared coin from threshold signatures.
    SharedCoin,
    /// Shared coin from verifiable coin flipping.
    CoinFlip,
}

impl AbaKind {
    pub fn name(self) -> &'static str {
        match self {
            AbaKind::LocalCoin => "aba-lc",
            AbaKind::SharedCoin => "aba-sc",
            AbaKind::CoinFlip => "aba-cp",
        }
    }

    pub fn from_name(s: &str) -> Option<AbaKind> {
        [AbaKind::LocalCoin, AbaKind::SharedCoin, AbaKind::CoinFlip]
            .into_iter()
            .find(|k| k.name() == s)
    }

    /// An engine for instances `base..base + k`. Unbatched shared-coin
    /// engines run each instance separately with its own coin.
    pub fn engine(self, c: Ctx, base: u8, k: usize, round_cap: u8) -> Box<dyn Aba> {
        match self {
            AbaKind::LocalCoin => Box::new(LcBatch::new(c, base, k, round_cap)),
            AbaKind::SharedCoin | AbaKind::CoinFlip => {
                let scheme = if self == AbaKind::SharedCoin {
                    CoinScheme::ThresholdSig
                } else {
                    CoinScheme::Flip
                };
                if c.mode == BatchMode::Baseline && k > 1 {
                    let parts = (0..k)
                        .map(|i| {
                            Box::new(ScBatch::new(
                                c.clone(),
                                base.wrapping_add(i as u8),
                                1,
                                round_cap,
                                scheme,
                            )) as Box<dyn Aba>
                        })
                        .collect();
                    Box::new(Split { parts })
                } else {
                    Box::new(ScBatch::new(c, base, k, round_cap, scheme))
                }
            }
        }
    }
}

/// k independent single-instance engines behind one interface.
pub struct Split {
    parts: Vec<Box<dyn Aba>>,
}

impl Aba for Split {
    fn start(&mut self, inputs: &[bool], now: Tick, out: &mut Out) {
        for (i, p) in self.parts.iter_mut().enumerate() {
            p.start(&[inputs.get(i).copied().unwrap_or(false)], now, out);
        }
    }

    fn handle(
        &mut self,
        sender: NodeId,
        body: &Body,
        retx: bool,
        now: Tick,
        out: &mut Out,
    ) -> bool {
        let mut changed = false;
        for p in &mut self.parts {
            changed |= p.handle(sender, body, retx, now, out);
        }
        changed
    }

    fn has_pending(&self) -> bool {
        self.parts.iter().any(|p| p.has_pending())
    }

    fn poll(&mut self, force: bool, out: &mut Out) {
        for p in &mut self.parts {
            p.poll(force, out);
        }
    }

    fn stall(&mut self, out: &mut Out) {
        for p in &mut self.parts {
            if !p.all_decided() {
                p.stall(out);
            }
        }
    }

    fn decided(&self, i: usize) -> Option<bool> {
        self.parts.get(i)?.decided(0)
    }

    fn decide_round(&self, i: usize) -> Option<u8> {
        self.parts.get(i)?.decide_round(0)
    }

    fn k(&self) -> usize {
        self.parts.len()
    }

    fn started(&self) -> bool {
        self.parts.iter().all(|p| p.started())
    }

    fn round(&self) -> u8 {
        self.parts.iter().map(|p| p.round()).max().unwrap_or(1)
    }

    fn coins(&self) -> Vec<(u8, bool)> {
        self.parts.iter().flat_map(|p| p.coins()).collect()
    }

    fn describe(&self) -> String {
        self.parts.iter().map(|p| p.describe()).collect()
    }
}
