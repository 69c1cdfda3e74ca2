//! Asynchronous common subset from N reliable broadcasts and N binary
//! agreements, optionally with threshold-encrypted proposals.

use std::collections::BTreeMap;

use super::{scope, EpochMachine, EpochOutput, MachineStats, NodeEnv};
use crate::aba::{Aba, AbaKind};
use crate::components::{baseline, family, Ctx, Limiter, Out, RbcBatch};
use crate::crypto::{Ciphertext, Share};
use crate::packets::{Body, DecShareBody, Header};
use crate::types::{NodeId, NodeSet, Tick};

/// Stalls spent waiting for included values before a recovery counts as timed out.
pub const RECOVER_PATIENCE: u32 = 16;

pub fn enc_tag(c: &Ctx, origin: usize) -> Vec<u8> {
    c.tag(&[b"ENC", &[origin as u8]])
}

#[derive(Clone, Debug, Default)]
struct DecSlot {
    /// `Some(None)` marks a ciphertext that failed validation.
    ct: Option<Option<Ciphertext>>,
    my_share: Option<Vec<u8>>,
    shares: BTreeMap<NodeId, Vec<u8>>,
    unverified: BTreeMap<NodeId, Vec<u8>>,
    plain: Option<Vec<u8>>,
}

/// Threshold decryption of the committed ciphertexts.
pub struct Decryptor {
    c: Ctx,
    slots: Vec<DecSlot>,
    wanted: NodeSet,
    pending: bool,
    queue: Vec<Body>,
    limiter: Limiter,
}

impl Decryptor {
    pub fn new(c: Ctx) -> Decryptor {
        let n = c.n;
        Decryptor {
            c,
            slots: vec![DecSlot::default(); n],
            wanted: NodeSet::default(),
            pending: false,
            queue: Vec::new(),
            limiter: Limiter::default(),
        }
    }

    /// Supplies the committed ciphertext bytes of instance `i`.
    pub fn set_ciphertext(&mut self, i: usize, bytes: &[u8]) {
        if self.slots[i].ct.is_some() {
            return;
        }
        self.wanted.insert(i);
        let ct = Ciphertext::from_bytes(bytes).filter(|ct| ct.tag == enc_tag(&self.c, i));
        let valid = ct.is_some();
        self.slots[i].ct = Some(ct);
        if !valid {
            return;
        }
        let ct = self.slots[i].ct.clone().flatten().expect("valid");
        let share = self.c.crypto.dec_share(self.c.me, &ct);
        self.slots[i].my_share = Some(share.bytes.clone());
        self.slots[i].shares.insert(self.c.me, share.bytes.clone());
        if self.c.batched() {
            self.pending = true;
        } else {
            self.queue
                .push(baseline(family::DEC, 0, 0, i as u8, 0, share.bytes, 0));
        }
        let buffered: Vec<(NodeId, Vec<u8>)> = std::mem::take(&mut self.slots[i].unverified)
            .into_iter()
            .collect();
        for (s, b) in buffered {
            self.add(s, i, &b);
        }
        self.try_decrypt(i);
    }

    fn add(&mut self, from: NodeId, i: usize, bytes: &[u8]) -> bool {
        if i >= self.c.n || from.idx() >= self.c.n {
            return false;
        }
        let slot = &mut self.slots[i];
        if slot.plain.is_some() || slot.shares.contains_key(&from) {
            return false;
        }
        match &slot.ct {
            None => {
                slot.unverified
                    .entry(from)
                    .or_insert_with(|| bytes.to_vec());
                false
            }
            Some(None) => false,
            Some(Some(ct)) => {
                let share = Share {
                    signer: from,
                    bytes: bytes.to_vec(),
                };
                if !self.c.crypto.dec_verify_share(ct, &share) {
                    return false;
                }
                slot.shares.insert(from, share.bytes);
                self.try_decrypt(i);
                true
            }
        }
    }

    fn try_decrypt(&mut self, i: usize) {
        let slot = &mut self.slots[i];
        if slot.plain.is_some() || slot.shares.len() <= self.c.f {
            return;
        }
        let Some(Some(ct)) = &slot.ct else { return };
        let shares: Vec<Share> = slot
            .shares
            .iter()
            .map(|(s, b)| Share {
                signer: *s,
                bytes: b.clone(),
            })
            .collect();
        if let Ok(p) = self.c.crypto.decrypt(ct, &shares) {
            slot.plain = Some(p);
        }
    }

    fn done_set(&self) -> NodeSet {
        let mut s = NodeSet::default();
        for (i, x) in self.slots.iter().enumerate() {
            if x.plain.is_some() || matches!(x.ct, Some(None)) {
                s.insert(i);
            }
        }
        s
    }

    pub fn snapshot(&self) -> Body {
        Body::DecShare(DecShareBody {
            shares: self
                .slots
                .iter()
                .enumerate()
                .filter_map(|(i, x)| x.my_share.as_ref().map(|s| (i as u8, s.clone())))
                .collect(),
            nack: self.done_set(),
        })
    }

    pub fn handle(
        &mut self,
        sender: NodeId,
        body: &Body,
        retx: bool,
        now: Tick,
        out: &mut Out,
    ) -> bool {
        let mut changed = false;
        match body {
            Body::DecShare(b) => {
                for (i, sh) in &b.shares {
                    changed |= self.add(sender, *i as usize, sh);
                }
                if retx {
                    let helpful = self
                        .slots
                        .iter()
                        .enumerate()
                        .any(|(i, x)| x.my_share.is_some() && !b.nack.contains(i));
                    if helpful && self.limiter.allow(0, now, self.c.retx_interval / 2) {
                        out.send(self.snapshot());
                    }
                }
            }
            Body::Baseline(b) if b.family == family::DEC => {
                let i = b.instance as usize;
                changed |= self.add(sender, i, &b.value);
                let peer_done = b.nack & 1 == 1;
                if retx
                    && !peer_done
                    && i < self.c.n
                    && self
                        .limiter
                        .allow(1 + i as u64, now, self.c.retx_interval / 2)
                {
                    if let Some(sh) = &self.slots[i].my_share {
                        out.send(baseline(family::DEC, 0, 0, i as u8, 0, sh.clone(), 0));
                    }
                }
            }
            _ => {}
        }
        changed
    }

    pub fn has_pending(&self) -> bool {
        self.pending || !self.queue.is_empty()
    }

    /// `all_known`: every committed ciphertext has been supplied.
    pub fn poll(&mut self, force: bool, all_known: bool, out: &mut Out) {
        if !self.c.batched() {
            for b in self.queue.drain(..) {
                out.send(b);
            }
            return;
        }
        if self.pending && (all_known || force) {
            self.pending = false;
            out.send(self.snapshot());
        }
    }

    pub fn stall(&mut self, out: &mut Out) {
        if self.slots.iter().all(|x| x.my_share.is_none()) {
            return;
        }
        if self.c.batched() {
            out.resend(self.snapshot());
        } else {
            for (i, x) in self.slots.iter().enumerate() {
                if let Some(sh) = &x.my_share {
                    out.resend(baseline(
                        family::DEC,
                        0,
                        0,
                        i as u8,
                        0,
                        sh.clone(),
                        x.plain.is_some() as u64,
                    ));
                }
            }
        }
    }

    /// Plaintexts in ascending instance order once every wanted instance is
    /// decrypted or known invalid.
    pub fn result(&self) -> Option<Vec<(NodeId, Vec<u8>)>> {
        let mut out = Vec::new();
        for i in self.wanted.iter() {
            match &self.slots[i] {
                DecSlot { plain: Some(p), .. } => out.push((NodeId(i as u8), p.clone())),
                DecSlot { ct: Some(None), .. } => {}
                _ => return None,
            }
        }
        Some(out)
    }
}

/// The N broadcast instances whose ABA decided 1, or `None` until all decided.
pub fn decided_set(aba: &dyn Aba) -> Option<NodeSet> {
    let mut s = NodeSet::default();
    for i in 0..aba.k() {
        if aba.decided(i)? {
            s.insert(i);
        }
    }
    Some(s)
}

/// Instances of the first `q` deliveries; ties at one tick go to lower ids.
pub fn select_fastest(order: &[(usize, Tick)], q: usize) -> NodeSet {
    let mut v = order.to_vec();
    v.sort_by_key(|&(i, t)| (t, i));
    let mut s = NodeSet::default();
    for (i, _) in v.into_iter().take(q) {
        s.insert(i);
    }
    s
}

pub struct HbbftMachine {
    env: NodeEnv,
    epoch: u16,
    encrypt: bool,
    c: Ctx,
    rbc: RbcBatch,
    aba: Box<dyn Aba>,
    dec: Decryptor,
    stats: MachineStats,
    waiting_stalls: u32,
    output: Option<EpochOutput>,
}

impl HbbftMachine {
    pub fn new(name: &str, kind: AbaKind, encrypt: bool, env: NodeEnv, epoch: u16) -> HbbftMachine {
        let c = env.ctx(&scope(name, epoch, &[]));
        let n = env.cfg.n_nodes;
        HbbftMachine {
            rbc: RbcBatch::new(c.clone()),
            aba: kind.engine(c.clone(), 0, n, env.cfg.round_cap),
            dec: Decryptor::new(c.clone()),
            c,
            env,
            epoch,
            encrypt,
            stats: MachineStats::default(),
            waiting_stalls: 0,
            output: None,
        }
    }

    fn progress(&mut self, now: Tick, out: &mut Out) {
        let q = self.c.quorum();
        if !self.aba.started() && self.rbc.delivered_count() >= q {
            let chosen = select_fastest(self.rbc.delivery_order(), q);
            let inputs: Vec<bool> = (0..self.c.n).map(|i| chosen.contains(i)).collect();
            self.stats.quorum_tick = Some(now);
            self.stats.aba_start = Some(now);
            self.aba.start(&inputs, now, out);
        }
        if self.output.is_some() {
            return;
        }
        let Some(set) = decided_set(self.aba.as_ref()) else {
            return;
        };
        if set.iter().any(|i| self.rbc.delivered(i).is_none()) {
            return;
        }
        if !self.encrypt {
            let included = set
                .iter()
                .map(|i| (NodeId(i as u8), self.rbc.delivered(i).unwrap().to_vec()))
                .collect();
            self.output = Some(EpochOutput {
                epoch: self.epoch,
                included,
            });
            return;
        }
        for i in set.iter() {
            let v = self.rbc.delivered(i).unwrap().to_vec();
            self.dec.set_ciphertext(i, &v);
        }
        if let Some(included) = self.dec.result() {
            self.output = Some(EpochOutput {
                epoch: self.epoch,
                included,
            });
        }
    }
}

impl EpochMachine for HbbftMachine {
    fn start(&mut self, now: Tick, out: &mut Out) {
        let p = self.env.proposal(self.epoch);
        let v = if self.encrypt {
            self.c
                .crypto
                .encrypt(&enc_tag(&self.c, self.c.me.idx()), &p)
                .to_bytes()
        } else {
            p
        };
        self.rbc.start(Some(v), now, out);
        self.progress(now, out);
    }

    fn on_message(&mut self, h: &Header, body: &Body, now: Tick, out: &mut Out) -> bool {
        let changed = match body {
            Body::AbaLc(_) | Body::AbaSc(_) => self.aba.handle(h.sender, body, h.retx, now, out),
            Body::Baseline(b) if b.family == family::ABA_LC => {
                self.aba.handle(h.sender, body, h.retx, now, out)
            }
            Body::DecShare(_) => self.dec.handle(h.sender, body, h.retx, now, out),
            Body::Baseline(b) if b.family == family::DEC => {
                self.dec.handle(h.sender, body, h.retx, now, out)
            }
            _ => self.rbc.handle(h.sender, body, h.retx, now, out),
        };
        let had = self.output.is_some();
        self.progress(now, out);
        changed || had != self.output.is_some()
    }

    fn has_pending(&self) -> bool {
        self.rbc.has_pending() || self.aba.has_pending() || self.dec.has_pending()
    }

    fn poll(&mut self, force: bool, _now: Tick, out: &mut Out) {
        self.rbc.poll(force, out);
        self.aba.poll(force, out);
        let all_known = decided_set(self.aba.as_ref())
            .is_some_and(|s| s.iter().all(|i| self.rbc.delivered(i).is_some()));
        self.dec.poll(force, all_known, out);
    }

    fn on_stall(&mut self, _now: Tick, out: &mut Out) {
        self.rbc.stall(out);
        if self.aba.started() {
            self.aba.stall(out);
        }
        self.dec.stall(out);
        if let Some(set) = decided_set(self.aba.as_ref()) {
            if set.iter().any(|i| self.rbc.delivered(i).is_none()) {
                self.stats.recover_requests += 1;
                self.waiting_stalls += 1;
                if self.waiting_stalls == RECOVER_PATIENCE {
                    self.stats.recover_timeouts += 1;
                }
            }
        }
    }

    fn output(&self) -> Option<&EpochOutput> {
        self.output.as_ref()
    }

    fn describe(&self) -> String {
        let rbc: Vec<usize> = self.rbc.delivery_order().iter().map(|x| x.0).collect();
        format!(
            "rbc {:?} output {}\n{}",
            rbc,
            self.output.is_some(),
            self.aba.describe()
        )
    }

    fn stats(&self) -> MachineStats {
        let mut s = self.stats.clone();
        s.decide_rounds = (0..self.aba.k())
            .map(|i| self.aba.decide_round(i).unwrap_or(0))
            .collect();
        s.coins = self.aba.coins();
        s
    }
}

/// hbbft-lc, hbbft-sc and beat differ in the agreement engine and whether
/// proposals are encrypted by default.
pub struct HbbftProtocol {
    pub name: &'static str,
    pub aba: AbaKind,
    pub encrypt: bool,
}

impl HbbftProtocol {
    pub const ALL: [HbbftProtocol; 3] = [
        HbbftProtocol {
            name: "hbbft-lc",
            aba: AbaKind::LocalCoin,
            encrypt: true,
        },
        HbbftProtocol {
            name: "hbbft-sc",
            aba: AbaKind::SharedCoin,
            encrypt: true,
        },
        HbbftProtocol {
            name: "beat",
            aba: AbaKind::CoinFlip,
            encrypt: true,
        },
    ];
}

impl super::Protocol for HbbftProtocol {
    fn name(&self) -> &str {
        self.name
    }

    fn machine(&self, env: &NodeEnv, epoch: u16) -> Box<dyn EpochMachine> {
        let encrypt = env.encrypt.unwrap_or(self.encrypt);
        Box::new(HbbftMachine::new(
            self.name,
            self.aba,
            encrypt,
            env.clone(),
            epoch,
        ))
    }
}
