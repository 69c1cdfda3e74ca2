//! Faulty behaviors, applied to a node's outgoing packets before signing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::Emit;
use crate::packets::{Body, ScEntry, SmallValue};
use crate::types::{Hash, NodeId, NodeSet, Tick, Vote};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// Sends nothing.
    Silent,
    /// Sends every packet twice: once honestly, once with altered content.
    Equivocate,
    /// Sends agreement votes with flipped values.
    VoteFlipper,
    /// Broadcasts corrupted proposals in its own instances.
    BadLeader,
    /// Holds every packet as long as retransmission timers allow.
    DelayMaximizer,
}

impl Behavior {
    pub const ALL: [Behavior; 5] = [
        Behavior::Silent,
        Behavior::Equivocate,
        Behavior::VoteFlipper,
        Behavior::BadLeader,
        Behavior::DelayMaximizer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Behavior::Silent => "silent",
            Behavior::Equivocate => "equivocate",
            Behavior::VoteFlipper => "vote-flipper",
            Behavior::BadLeader => "bad-leader",
            Behavior::DelayMaximizer => "delay-maximizer",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Behavior {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Behavior::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown behavior `{s}`"))
    }
}

/// Per-node state of a faulty behavior.
pub struct Adversary {
    pub behavior: Behavior,
    me: NodeId,
    rng: ChaCha8Rng,
    held: Vec<(Tick, u16, Emit)>,
    hold: Tick,
}

impl Adversary {
    pub fn new(behavior: Behavior, me: NodeId, seed: u64, hold: Tick) -> Adversary {
        Adversary {
            behavior,
            me,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xb12a << 16 ^ me.0 as u64),
            held: Vec::new(),
            hold,
        }
    }

    /// Packets to send now in place of `e`.
    pub fn filter(&mut self, epoch: u16, e: Emit, now: Tick) -> Vec<Emit> {
        match self.behavior {
            Behavior::Silent => Vec::new(),
            Behavior::Equivocate => {
                let twin = Emit {
                    body: mutate(&e.body, &mut self.rng, true),
                    ..e.clone()
                };
                vec![e, twin]
            }
            Behavior::VoteFlipper => vec![Emit {
                body: flip_votes(&e.body),
                ..e
            }],
            Behavior::BadLeader => vec![Emit {
                body: corrupt_own(&e.body, self.me, &mut self.rng),
                ..e
            }],
            Behavior::DelayMaximizer => {
                self.held.push((now + self.hold, epoch, e));
                Vec::new()
            }
        }
    }

    /// Held packets due by `now`, with their epochs.
    pub fn release(&mut self, now: Tick) -> Vec<(u16, Emit)> {
        let (due, keep): (Vec<_>, Vec<_>) = self.held.drain(..).partition(|(t, _, _)| *t <= now);
        self.held = keep;
        due.into_iter().map(|(_, ep, e)| (ep, e)).collect()
    }

    pub fn next_release(&self) -> Option<Tick> {
        self.held.iter().map(|h| h.0).min()
    }
}

fn flip(v: Vote) -> Vote {
    match v {
        Vote::Zero => Vote::One,
        Vote::One => Vote::Zero,
        Vote::Bottom => Vote::Bottom,
    }
}

fn swap_bits(x: u8) -> u8 {
    (x & !3) | (x & 1) << 1 | (x & 2) >> 1
}

fn flip_votes(b: &Body) -> Body {
    let mut b = b.clone();
    match &mut b {
        Body::AbaLc(x) => {
            for blocks in &mut x.blocks {
                for blk in blocks.iter_mut() {
                    for v in blk.values.iter_mut().flatten() {
                        *v = flip(*v);
                    }
                }
            }
        }
        Body::RbcSmall(x) => {
            for v in x.block.values.iter_mut().flatten() {
                *v = flip(*v);
            }
        }
        Body::AbaSc(x) => {
            for e in &mut x.entries {
                *e = ScEntry {
                    bval: swap_bits(e.bval),
                    aux: swap_bits(e.aux),
                    bin: swap_bits(e.bin),
                    aux_nack: e.aux_nack,
                };
            }
        }
        Body::Baseline(x)
            if x.family == crate::components::family::ABA_LC && x.value.len() == 1 =>
        {
            x.value[0] = match x.value[0] {
                1 => 2,
                2 => 1,
                v => v,
            };
        }
        _ => {}
    }
    b
}

fn scramble(bytes: &mut [u8], rng: &mut ChaCha8Rng) {
    for x in bytes.iter_mut() {
        *x ^= rng.gen::<u8>() | 1;
    }
}

fn other_hash(h: &Hash, rng: &mut ChaCha8Rng) -> Hash {
    let mut b = h.as_bytes().to_vec();
    scramble(&mut b, rng);
    Hash::from_slice(&b)
}

fn other_set(s: NodeSet, rng: &mut ChaCha8Rng) -> NodeSet {
    let members: Vec<usize> = s.iter().collect();
    let hi = members.iter().max().copied().unwrap_or(0) + 1;
    let mut out = s;
    if let Some(&drop) = members.get(rng.gen_range(0..members.len().max(1))) {
        for cand in 0..=hi {
            if !s.contains(cand) && cand != drop {
                out.remove(drop);
                out.insert(cand);
                break;
            }
        }
    }
    out
}

/// A conflicting version of `b` as seen by a partition of receivers.
fn mutate(b: &Body, rng: &mut ChaCha8Rng, votes: bool) -> Body {
    let mut b = if votes { flip_votes(b) } else { b.clone() };
    match &mut b {
        Body::RbcInit(x) | Body::CbcInit(x) => scramble(&mut x.fragment, rng),
        Body::RbcEr(x) => {
            for h in &mut x.hashes {
                *h = other_hash(h, rng);
            }
        }
        Body::CbcEf(x) => {
            for h in &mut x.hashes {
                *h = other_hash(h, rng);
            }
        }
        Body::CbcSmall(x) => {
            for v in x.values.iter_mut().flatten() {
                if let SmallValue::Ids(s) = v {
                    *s = other_set(*s, rng);
                }
            }
        }
        Body::DecShare(x) => {
            for (_, s) in &mut x.shares {
                scramble(s, rng);
            }
        }
        Body::CoinShare(x) => {
            if let Some(s) = &mut x.share {
                scramble(s, rng);
            }
        }
        Body::Attest(x) => x.digest = other_hash(&x.digest, rng),
        Body::GlobalDone(x) => x.digest = other_hash(&x.digest, rng),
        Body::Baseline(x) => {
            if x.family != crate::components::family::ABA_LC {
                scramble(&mut x.value, rng)
            }
        }
        _ => {}
    }
    b
}

fn corrupt_own(b: &Body, me: NodeId, rng: &mut ChaCha8Rng) -> Body {
    let mut b = b.clone();
    match &mut b {
        Body::RbcInit(x) | Body::CbcInit(x) if x.instance == me.0 => scramble(&mut x.fragment, rng),
        Body::CbcSmall(x) => {
            if let Some(Some(SmallValue::Ids(s))) = x.values.get_mut(me.idx()) {
                *s = other_set(*s, rng);
            }
        }
        Body::Baseline(x) if x.instance == me.0 && x.phase == 0 => scramble(&mut x.value, rng),
        Body::Attest(x) => x.digest = other_hash(&x.digest, rng),
        _ => {}
    }
    b
}
