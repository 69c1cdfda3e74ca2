//! Common subset from N provable broadcasts, a consistent broadcast of
//! 2f+1 delivery proofs per node, and a serial sequence of binary
//! agreements over a random permutation of the nodes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hbbft::{enc_tag, select_fastest, Decryptor, RECOVER_PATIENCE};
use super::{scope, EpochMachine, EpochOutput, MachineStats, NodeEnv};
use crate::aba::{Aba, AbaKind};
use crate::components::cbc::{set_to_value, value_to_set};
use crate::components::{family, CbcBatch, CbcKind, Ctx, Limiter, Out, PrbcBatch, Validity};
use crate::crypto::{CoinScheme, Share};
use crate::packets::{Body, CoinShareBody, Header};
use crate::types::{hash_parts, NodeId, NodeSet, Tick};

/// Permutation draws per epoch before giving up.
pub const MAX_ATTEMPTS: u8 = 4;
pub const PURPOSE_PERMUTATION: u8 = 1;

/// Encodes `(instance, proof)` pairs as a count byte followed by the pairs.
pub fn encode_vector(items: &[(usize, Vec<u8>)]) -> Vec<u8> {
    let mut v = vec![items.len() as u8];
    for (i, p) in items {
        v.push(*i as u8);
        v.extend_from_slice(p);
    }
    v
}

pub fn decode_vector(bytes: &[u8], proof_len: usize) -> Option<Vec<(usize, Vec<u8>)>> {
    let (&count, rest) = bytes.split_first()?;
    if rest.len() != count as usize * (1 + proof_len) {
        return None;
    }
    Some(
        rest.chunks(1 + proof_len)
            .map(|c| (c[0] as usize, c[1..].to_vec()))
            .collect(),
    )
}

/// Node order for the serial agreements, drawn from the combined coin.
pub fn permutation(combined: &[u8], n: usize) -> Vec<usize> {
    let h = hash_parts(&[b"PERM", combined], 32);
    let mut seed = [0u8; 32];
    seed.copy_from_slice(h.as_bytes());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::from_seed(seed));
    order
}

#[derive(Default)]
struct CoinRound {
    shares: BTreeMap<NodeId, Vec<u8>>,
    mine: Option<Vec<u8>>,
    order: Option<Vec<usize>>,
}

pub struct DumboMachine {
    env: NodeEnv,
    epoch: u16,
    kind: AbaKind,
    encrypt: bool,
    c: Ctx,
    prbc: PrbcBatch,
    vcbc: CbcBatch,
    commit: CbcBatch,
    vcbc_started: bool,
    commit_started: bool,
    /// Ids named by the first 2f+1 delivered commit sets.
    wait_for: Option<NodeSet>,
    coins: BTreeMap<u8, CoinRound>,
    abas: BTreeMap<u8, Box<dyn Aba>>,
    attempt: u8,
    pos: usize,
    selected: Option<usize>,
    included: Option<Vec<usize>>,
    dec: Decryptor,
    limiter: Limiter,
    stats: MachineStats,
    waiting_stalls: u32,
    output: Option<EpochOutput>,
}

impl DumboMachine {
    pub fn new(name: &str, kind: AbaKind, encrypt: bool, env: NodeEnv, epoch: u16) -> DumboMachine {
        let c = env.ctx(&scope(name, epoch, &[]));
        DumboMachine {
            prbc: PrbcBatch::new(c.clone()),
            vcbc: CbcBatch::new(c.clone(), CbcKind::Standard, true),
            commit: CbcBatch::new(c.clone(), CbcKind::Small, true),
            dec: Decryptor::new(c.clone()),
            c,
            env,
            epoch,
            kind,
            encrypt,
            vcbc_started: false,
            commit_started: false,
            wait_for: None,
            coins: BTreeMap::new(),
            abas: BTreeMap::new(),
            attempt: 0,
            pos: 0,
            selected: None,
            included: None,
            limiter: Limiter::default(),
            stats: MachineStats::default(),
            waiting_stalls: 0,
            output: None,
        }
    }

    fn coin_tag(&self, attempt: u8) -> Vec<u8> {
        self.c.tag(&[b"PI", &[attempt]])
    }

    fn coin_scheme(&self) -> CoinScheme {
        match self.kind {
            AbaKind::CoinFlip => CoinScheme::Flip,
            _ => CoinScheme::ThresholdSig,
        }
    }

    fn base(&self, attempt: u8, pos: usize) -> u8 {
        (attempt as usize * self.c.n + pos) as u8
    }

    fn max_base(&self) -> usize {
        MAX_ATTEMPTS as usize * self.c.n
    }

    fn engine(&mut self, base: u8) -> &mut Box<dyn Aba> {
        let (c, kind, cap) = (self.c.clone(), self.kind, self.env.cfg.round_cap);
        self.abas
            .entry(base)
            .or_insert_with(|| kind.engine(c, base, 1, cap))
    }

    fn coin_body(&self, attempt: u8) -> Option<Body> {
        let cr = self.coins.get(&attempt)?;
        let mut nack = NodeSet::default();
        for s in cr.shares.keys() {
            nack.insert(s.idx());
        }
        Some(Body::CoinShare(CoinShareBody {
            purpose: PURPOSE_PERMUTATION,
            attempt,
            share: cr.mine.clone(),
            nack,
        }))
    }

    fn release_coin(&mut self, attempt: u8, out: &mut Out) {
        let tag = self.coin_tag(attempt);
        let share = self
            .c
            .crypto
            .coin_share(self.coin_scheme(), self.c.me, &tag);
        let me = self.c.me;
        let cr = self.coins.entry(attempt).or_default();
        if cr.mine.is_some() {
            return;
        }
        cr.mine = Some(share.bytes.clone());
        cr.shares.insert(me, share.bytes);
        self.try_coin(attempt);
        if let Some(b) = self.coin_body(attempt) {
            out.send(b);
        }
    }

    fn try_coin(&mut self, attempt: u8) {
        let tag = self.coin_tag(attempt);
        let scheme = self.coin_scheme();
        let n = self.c.n;
        let f = self.c.f;
        let Some(cr) = self.coins.get_mut(&attempt) else {
            return;
        };
        if cr.order.is_some() || cr.shares.len() <= f {
            return;
        }
        let shares: Vec<Share> = cr
            .shares
            .iter()
            .map(|(s, b)| Share {
                signer: *s,
                bytes: b.clone(),
            })
            .collect();
        if let Ok(bytes) = self.c.crypto.coin_combine(scheme, &tag, &shares) {
            cr.order = Some(permutation(&bytes, n));
        }
    }

    fn on_coin(
        &mut self,
        sender: NodeId,
        b: &CoinShareBody,
        retx: bool,
        now: Tick,
        out: &mut Out,
    ) -> bool {
        if b.purpose != PURPOSE_PERMUTATION || b.attempt >= MAX_ATTEMPTS {
            return false;
        }
        let mut changed = false;
        if let Some(sh) = &b.share {
            let tag = self.coin_tag(b.attempt);
            let share = Share {
                signer: sender,
                bytes: sh.clone(),
            };
            let known = self
                .coins
                .get(&b.attempt)
                .is_some_and(|c| c.shares.contains_key(&sender));
            if !known
                && self
                    .c
                    .crypto
                    .coin_verify_share(self.coin_scheme(), &tag, &share)
            {
                self.coins
                    .entry(b.attempt)
                    .or_default()
                    .shares
                    .insert(sender, share.bytes);
                self.try_coin(b.attempt);
                changed = true;
            }
        }
        let mine = self.coins.get(&b.attempt).is_some_and(|c| c.mine.is_some());
        if retx
            && mine
            && !b.nack.contains(self.c.me.idx())
            && self
                .limiter
                .allow(b.attempt as u64, now, self.c.retx_interval / 2)
        {
            if let Some(body) = self.coin_body(b.attempt) {
                out.send(body);
            }
        }
        changed
    }

    fn revalidate(&mut self) -> bool {
        let q = self.c.quorum();
        let proof_len = self.env.cfg.tsig_len;
        let prbc = &self.prbc;
        let n = self.c.n;
        let mut changed = self.vcbc.revalidate(&mut |_, v| {
            let Some(items) = decode_vector(v, proof_len) else {
                return Validity::Invalid;
            };
            let mut seen = NodeSet::default();
            for (i, p) in &items {
                if *i >= n || seen.contains(*i) || !prbc.verify_proof(*i, p) {
                    return Validity::Invalid;
                }
                seen.insert(*i);
            }
            if items.len() == q {
                Validity::Valid
            } else {
                Validity::Invalid
            }
        });
        let vcbc = &self.vcbc;
        changed |= self.commit.revalidate(&mut |_, v| match value_to_set(v) {
            Some(s) if s.len() == q && s.iter().all(|j| j < n) => {
                if s.iter().all(|j| vcbc.delivered(j).is_some()) {
                    Validity::Valid
                } else {
                    Validity::Pending
                }
            }
            _ => Validity::Invalid,
        });
        changed
    }

    fn progress(&mut self, now: Tick, out: &mut Out) {
        let q = self.c.quorum();
        loop {
            let mut again = self.revalidate();
            if !self.vcbc_started && self.prbc.proof_order().len() >= q {
                let items: Vec<(usize, Vec<u8>)> = self.prbc.proof_order()[..q]
                    .iter()
                    .map(|&i| (i, self.prbc.proof(i).expect("proof listed").to_vec()))
                    .collect();
                self.vcbc_started = true;
                self.stats.quorum_tick = Some(now);
                self.vcbc.start(encode_vector(&items), now, out);
                again = true;
            }
            if !self.commit_started && self.vcbc.delivered_count() >= q {
                let set = select_fastest(self.vcbc.delivery_order(), q);
                self.commit_started = true;
                self.commit.start(set_to_value(set), now, out);
                again = true;
            }
            if self.wait_for.is_none() && self.commit.delivered_count() >= q {
                let chosen = select_fastest(self.commit.delivery_order(), q);
                let mut all = NodeSet::default();
                for j in chosen.iter() {
                    if let Some(s) = self.commit.delivered(j).and_then(value_to_set) {
                        for x in s.iter() {
                            all.insert(x);
                        }
                    }
                }
                self.wait_for = Some(all);
                self.stats.aba_start = Some(now);
                self.release_coin(0, out);
                again = true;
            }
            again |= self.agree(now, out);
            if !again {
                break;
            }
        }
        self.finish();
    }

    fn check_vector(&self, j: usize) -> Option<Vec<usize>> {
        let items = decode_vector(self.vcbc.delivered(j)?, self.env.cfg.tsig_len)?;
        let mut seen = NodeSet::default();
        for (i, p) in &items {
            if *i >= self.c.n || !seen.insert(*i) || !self.prbc.verify_proof(*i, p) {
                return None;
            }
        }
        (items.len() == self.c.quorum()).then(|| seen.iter().collect())
    }

    fn advance(&mut self, out: &mut Out) {
        self.pos += 1;
        if self.pos == self.c.n {
            self.pos = 0;
            self.attempt += 1;
            self.stats.reattempts += 1;
            if self.attempt < MAX_ATTEMPTS {
                self.release_coin(self.attempt, out);
            }
        }
    }

    /// Runs the serial agreements; true if anything moved.
    fn agree(&mut self, now: Tick, out: &mut Out) -> bool {
        let Some(wait) = self.wait_for else {
            return false;
        };
        let mut changed = false;
        while self.included.is_none() && self.attempt < MAX_ATTEMPTS {
            let Some(order) = self.coins.get(&self.attempt).and_then(|c| c.order.clone()) else {
                break;
            };
            let base = self.base(self.attempt, self.pos);
            let cand = order[self.pos];
            if !self.engine(base).started() {
                if wait.iter().any(|j| self.vcbc.delivered(j).is_none()) {
                    break;
                }
                let input = self.vcbc.delivered(cand).is_some();
                self.engine(base).start(&[input], now, out);
                changed = true;
            }
            match self.abas[&base].decided(0) {
                None => break,
                Some(false) => {}
                Some(true) => {
                    if self.vcbc.delivered(cand).is_none() {
                        break;
                    }
                    if let Some(list) = self.check_vector(cand) {
                        self.selected = Some(cand);
                        self.included = Some(list);
                        return true;
                    }
                    self.stats.invalid_vectors += 1;
                }
            }
            self.advance(out);
            changed = true;
        }
        changed
    }

    fn values_known(&self) -> bool {
        self.included
            .as_ref()
            .is_some_and(|l| l.iter().all(|&i| self.prbc.delivered(i).is_some()))
    }

    fn finish(&mut self) {
        if self.output.is_some() || !self.values_known() {
            return;
        }
        let list = self.included.clone().expect("checked");
        if !self.encrypt {
            let included = list
                .iter()
                .map(|&i| (NodeId(i as u8), self.prbc.delivered(i).unwrap().to_vec()))
                .collect();
            self.output = Some(EpochOutput {
                epoch: self.epoch,
                included,
            });
            return;
        }
        for &i in &list {
            let v = self.prbc.delivered(i).unwrap().to_vec();
            self.dec.set_ciphertext(i, &v);
        }
        if let Some(included) = self.dec.result() {
            self.output = Some(EpochOutput {
                epoch: self.epoch,
                included,
            });
        }
    }

    fn current_base(&self) -> Option<u8> {
        (self.attempt < MAX_ATTEMPTS).then(|| self.base(self.attempt, self.pos))
    }

    /// Agreement instance an incoming packet belongs to.
    fn aba_base(body: &Body) -> Option<u8> {
        match body {
            Body::AbaLc(b) => Some(b.base),
            Body::AbaSc(b) => Some(b.base),
            Body::Baseline(b) if b.family == family::ABA_LC => Some(b.instance),
            _ => None,
        }
    }
}

impl EpochMachine for DumboMachine {
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
        self.prbc.start(Some(v), now, out);
        self.progress(now, out);
    }

    fn on_message(&mut self, h: &Header, body: &Body, now: Tick, out: &mut Out) -> bool {
        let changed = match body {
            Body::CoinShare(b) => self.on_coin(h.sender, b, h.retx, now, out),
            Body::DecShare(_) => self.dec.handle(h.sender, body, h.retx, now, out),
            Body::Baseline(b) if b.family == family::DEC => {
                self.dec.handle(h.sender, body, h.retx, now, out)
            }
            _ => match Self::aba_base(body) {
                Some(base) if (base as usize) < self.max_base() => {
                    self.engine(base).handle(h.sender, body, h.retx, now, out)
                }
                Some(_) => false,
                None => {
                    let a = self.prbc.handle(h.sender, body, h.retx, now, out);
                    let b = self.vcbc.handle(h.sender, body, h.retx, now, out);
                    let c = self.commit.handle(h.sender, body, h.retx, now, out);
                    a || b || c
                }
            },
        };
        let had = self.output.is_some();
        self.progress(now, out);
        changed || had != self.output.is_some()
    }

    fn has_pending(&self) -> bool {
        self.prbc.has_pending()
            || self.vcbc.has_pending()
            || self.commit.has_pending()
            || self.abas.values().any(|a| a.has_pending())
            || self.dec.has_pending()
    }

    fn poll(&mut self, force: bool, _now: Tick, out: &mut Out) {
        self.prbc.poll(force, out);
        self.vcbc.poll(force, out);
        self.commit.poll(force, out);
        for a in self.abas.values_mut() {
            if a.has_pending() {
                a.poll(force, out);
            }
        }
        let all_known = self.values_known();
        self.dec.poll(force, all_known, out);
    }

    fn on_stall(&mut self, _now: Tick, out: &mut Out) {
        self.prbc.stall(out);
        self.vcbc.stall(out);
        self.commit.stall(out);
        if self.wait_for.is_some() {
            if let Some(b) = self.coin_body(self.attempt.min(MAX_ATTEMPTS - 1)) {
                out.resend(b);
            }
        }
        if let Some(base) = self.current_base() {
            if let Some(a) = self.abas.get_mut(&base).filter(|a| a.started()) {
                a.stall(out);
            }
        }
        self.dec.stall(out);
        let waiting_vector = self.included.is_none()
            && self
                .current_base()
                .and_then(|b| self.abas.get(&b))
                .and_then(|a| a.decided(0))
                == Some(true);
        let waiting_values = self.included.is_some() && !self.values_known();
        if waiting_vector || waiting_values {
            self.stats.recover_requests += 1;
            self.waiting_stalls += 1;
            if self.waiting_stalls == RECOVER_PATIENCE {
                self.stats.recover_timeouts += 1;
            }
        }
    }

    fn output(&self) -> Option<&EpochOutput> {
        self.output.as_ref()
    }

    fn describe(&self) -> String {
        let prbc = self.prbc.proof_order().to_vec();
        let vcbc: Vec<usize> = self.vcbc.delivery_order().iter().map(|x| x.0).collect();
        let commit: Vec<usize> = self.commit.delivery_order().iter().map(|x| x.0).collect();
        let coins: Vec<(u8, usize, bool)> = self
            .coins
            .iter()
            .map(|(a, c)| (*a, c.shares.len(), c.order.is_some()))
            .collect();
        let mut s = format!(
            "proofs {prbc:?} vcbc {vcbc:?} commit {commit:?} wait {:?} coins {coins:?} attempt {} pos {} selected {:?} output {}\n",
            self.wait_for.map(|w| w.iter().collect::<Vec<_>>()),
            self.attempt,
            self.pos,
            self.selected,
            self.output.is_some()
        );
        for (b, a) in &self.abas {
            s += &format!("aba {b}: {}\n", a.describe());
        }
        s
    }

    fn stats(&self) -> MachineStats {
        let mut s = self.stats.clone();
        s.decide_rounds = self
            .abas
            .values()
            .filter_map(|a| a.decide_round(0))
            .collect();
        s.coins = self.abas.values().flat_map(|a| a.coins()).collect();
        s
    }
}

/// dumbo-lc and dumbo-sc differ in the agreement engine.
pub struct DumboProtocol {
    pub name: &'static str,
    pub aba: AbaKind,
    pub encrypt: bool,
}

impl DumboProtocol {
    pub const ALL: [DumboProtocol; 2] = [
        DumboProtocol {
            name: "dumbo-lc",
            aba: AbaKind::LocalCoin,
            encrypt: false,
        },
        DumboProtocol {
            name: "dumbo-sc",
            aba: AbaKind::SharedCoin,
            encrypt: false,
        },
    ];
}

impl super::Protocol for DumboProtocol {
    fn name(&self) -> &str {
        self.name
    }

    fn machine(&self, env: &NodeEnv, epoch: u16) -> Box<dyn EpochMachine> {
        let encrypt = env.encrypt.unwrap_or(self.encrypt);
        Box::new(DumboMachine::new(
            self.name,
            self.aba,
            encrypt,
            env.clone(),
            epoch,
        ))
    }
}
