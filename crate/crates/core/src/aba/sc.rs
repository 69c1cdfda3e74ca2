//! Signature-free binary agreement (BVAL/AUX) with a shared coin. All
//! instances of a batch advance in lockstep and draw one coin per round.

use std::collections::BTreeMap;

use super::Aba;
use crate::components::{Ctx, Limiter, Out};
use crate::crypto::{CoinScheme, Share};
use crate::packets::{AbaScBody, Body, ScEntry};
use crate::types::{NodeId, NodeSet, Tick};

const P_BVAL: u8 = 1;
const P_AUX: u8 = 2;
const P_SHARE: u8 = 4;
const P_TERM: u8 = 8;

#[derive(Clone, Debug, Default)]
struct InstRound {
    bval_from: [NodeSet; 2],
    aux_from: [NodeSet; 2],
    my_bval: u8,
    my_aux: u8,
    bin: u8,
    bin_first: Option<u8>,
    vals: Option<u8>,
}

#[derive(Clone, Debug, Default)]
struct RoundSc {
    inst: Vec<InstRound>,
    shares: BTreeMap<NodeId, Vec<u8>>,
    my_share: Option<Vec<u8>>,
    coin: Option<bool>,
}

pub struct ScBatch {
    c: Ctx,
    base: u8,
    k: usize,
    round_cap: u8,
    scheme: CoinScheme,
    started: bool,
    round: u8,
    est: Vec<bool>,
    complete: Vec<bool>,
    decided: Vec<Option<(bool, u8)>>,
    /// `[instance][sender]`: decided value and first round it counts for.
    terms: Vec<Vec<Option<(bool, u8)>>>,
    rounds: BTreeMap<u8, RoundSc>,
    pending: BTreeMap<u8, u8>,
    limiter: Limiter,
}

fn bit(v: bool) -> u8 {
    if v {
        2
    } else {
        1
    }
}

impl ScBatch {
    pub fn new(c: Ctx, base: u8, k: usize, round_cap: u8, scheme: CoinScheme) -> ScBatch {
        let n = c.n;
        ScBatch {
            c,
            base,
            k,
            round_cap,
            scheme,
            started: false,
            round: 1,
            est: vec![false; k],
            complete: vec![false; k],
            decided: vec![None; k],
            terms: vec![vec![None; n]; k],
            rounds: BTreeMap::new(),
            pending: BTreeMap::new(),
            limiter: Limiter::default(),
        }
    }

    pub fn coin_tag(&self, r: u8) -> Vec<u8> {
        self.c.tag(&[b"ABA", &[self.base, self.k as u8, r]])
    }

    fn round_mut(&mut self, r: u8) -> &mut RoundSc {
        let k = self.k;
        self.rounds.entry(r).or_insert_with(|| RoundSc {
            inst: vec![InstRound::default(); k],
            ..RoundSc::default()
        })
    }

    fn mark(&mut self, r: u8, kind: u8) {
        *self.pending.entry(r).or_insert(0) |= kind;
    }

    fn effective(&self, r: u8, i: usize, v: usize, aux: bool) -> NodeSet {
        let ir = &self.rounds[&r].inst[i];
        let mut s = if aux { ir.aux_from[v] } else { ir.bval_from[v] };
        for (sender, t) in self.terms[i].iter().enumerate() {
            if let Some((d, tr)) = t {
                if *d as usize == v && *tr <= r {
                    s.insert(sender);
                }
            }
        }
        s
    }

    fn release_share(&mut self, r: u8) {
        if self.round_mut(r).my_share.is_some() {
            return;
        }
        let share = self
            .c
            .crypto
            .coin_share(self.scheme, self.c.me, &self.coin_tag(r));
        let me = self.c.me;
        let rs = self.round_mut(r);
        rs.my_share = Some(share.bytes.clone());
        rs.shares.insert(me, share.bytes);
        self.mark(r, P_SHARE);
        self.try_coin(r);
    }

    fn try_coin(&mut self, r: u8) {
        let tag = self.coin_tag(r);
        let f = self.c.f;
        let rs = self.round_mut(r);
        if rs.coin.is_some() || rs.shares.len() <= f {
            return;
        }
        let shares: Vec<Share> = rs
            .shares
            .iter()
            .map(|(s, b)| Share {
                signer: *s,
                bytes: b.clone(),
            })
            .collect();
        if let Ok(v) = self.c.crypto.coin(self.scheme, &tag, &shares) {
            self.round_mut(r).coin = Some(v);
        }
    }

    fn step(&mut self) -> bool {
        let r = self.round;
        let n = self.c.n;
        let f = self.c.f;
        let q = self.c.quorum();
        let mut changed = false;
        self.round_mut(r);
        for i in 0..self.k {
            if self.decided[i].is_some() || self.complete[i] {
                continue;
            }
            for v in 0..2usize {
                let cnt = self.terms[i]
                    .iter()
                    .filter(|t| t.is_some_and(|(d, _)| d as usize == v))
                    .count();
                if cnt > f {
                    self.decided[i] = Some((v == 1, r));
                    self.est[i] = v == 1;
                    self.complete[i] = true;
                    changed = true;
                }
            }
            if self.complete[i] {
                continue;
            }
            for v in 0..2usize {
                let b = 1u8 << v;
                let cnt = self.effective(r, i, v, false).len();
                let ir = &mut self.rounds.get_mut(&r).expect("round exists").inst[i];
                if cnt > f && ir.my_bval & b == 0 {
                    ir.my_bval |= b;
                    ir.bval_from[v].insert(self.c.me.idx());
                    changed = true;
                    self.mark(r, P_BVAL);
                }
            }
            for v in 0..2usize {
                let b = 1u8 << v;
                let cnt = self.effective(r, i, v, false).len();
                let ir = &mut self.rounds.get_mut(&r).expect("round exists").inst[i];
                if cnt >= q && ir.bin & b == 0 {
                    ir.bin |= b;
                    ir.bin_first.get_or_insert(b);
                    changed = true;
                }
            }
            let me = self.c.me.idx();
            let ir = &mut self.rounds.get_mut(&r).expect("round exists").inst[i];
            if ir.my_aux == 0 {
                if let Some(b) = ir.bin_first {
                    ir.my_aux = b;
                    ir.aux_from[b as usize >> 1].insert(me);
                    changed = true;
                    self.mark(r, P_AUX);
                }
            }
            let ir = &self.rounds[&r].inst[i];
            if ir.vals.is_none() && ir.bin != 0 {
                let bin = ir.bin;
                let a0 = self.effective(r, i, 0, true);
                let a1 = self.effective(r, i, 1, true);
                let mut count = 0;
                let mut vals = 0u8;
                for s in 0..n {
                    let mut mine = 0u8;
                    if a0.contains(s) {
                        mine |= 1;
                    }
                    if a1.contains(s) {
                        mine |= 2;
                    }
                    if mine != 0 && mine & !bin == 0 {
                        count += 1;
                        vals |= mine;
                    }
                }
                if count >= n - f {
                    self.rounds.get_mut(&r).expect("round exists").inst[i].vals = Some(vals);
                    changed = true;
                }
            }
        }
        let waiting: Vec<usize> = (0..self.k)
            .filter(|&i| self.decided[i].is_none() && !self.complete[i])
            .collect();
        if !waiting.is_empty()
            && waiting
                .iter()
                .all(|&i| self.rounds[&r].inst[i].vals.is_some())
        {
            if self.rounds[&r].my_share.is_none() {
                self.release_share(r);
                changed = true;
            }
            if let Some(coin) = self.rounds[&r].coin {
                for i in waiting {
                    let vals = self.rounds[&r].inst[i].vals.expect("checked above");
                    if vals == 1 || vals == 2 {
                        let b = vals == 2;
                        if b == coin {
                            self.decided[i] = Some((b, r));
                        }
                        self.est[i] = b;
                    } else {
                        self.est[i] = coin;
                    }
                    self.complete[i] = true;
                }
                changed = true;
            }
        }
        if (0..self.k).all(|i| self.complete[i] || self.decided[i].is_some_and(|(_, d)| d < r))
            && r < self.round_cap
        {
            let next = r + 1;
            self.round = next;
            self.round_mut(next);
            let me = self.c.me.idx();
            let mut any_active = false;
            for i in 0..self.k {
                self.complete[i] = false;
                if self.decided[i].is_some() {
                    continue;
                }
                any_active = true;
                let b = bit(self.est[i]);
                let ir = &mut self.round_mut(next).inst[i];
                ir.my_bval |= b;
                ir.bval_from[b as usize >> 1].insert(me);
            }
            if any_active {
                self.mark(next, P_BVAL);
            } else {
                self.mark(next, P_TERM);
                self.release_share(next);
            }
            changed = true;
        }
        changed
    }

    fn finished(&self) -> bool {
        self.decided
            .iter()
            .all(|d| d.is_some_and(|(_, r)| r < self.round))
    }

    fn fixpoint(&mut self) {
        if !self.started {
            return;
        }
        while !self.finished() && self.step() {}
    }

    fn snapshot(&self, r: u8) -> Body {
        let rs = self.rounds.get(&r);
        let entries = (0..self.k)
            .map(|i| {
                if let Some((d, dr)) = self.decided[i] {
                    if r > dr {
                        return ScEntry {
                            bval: bit(d),
                            aux: bit(d),
                            bin: bit(d),
                            aux_nack: 2,
                        };
                    }
                }
                let Some(ir) = rs.map(|x| &x.inst[i]) else {
                    return ScEntry::default();
                };
                ScEntry {
                    bval: ir.my_bval,
                    aux: ir.my_aux,
                    bin: ir.bin,
                    aux_nack: ir.vals.is_some() as u8,
                }
            })
            .collect();
        let mut share_nack = NodeSet::default();
        if let Some(rs) = rs {
            for s in rs.shares.keys() {
                share_nack.insert(s.idx());
            }
        }
        Body::AbaSc(AbaScBody {
            round: r,
            base: self.base,
            entries,
            share: rs.and_then(|x| x.my_share.clone()),
            share_nack,
        })
    }
}

impl Aba for ScBatch {
    fn start(&mut self, inputs: &[bool], _now: Tick, out: &mut Out) {
        if self.started {
            return;
        }
        self.started = true;
        let me = self.c.me.idx();
        for i in 0..self.k {
            self.est[i] = inputs.get(i).copied().unwrap_or(false);
            let b = bit(self.est[i]);
            let ir = &mut self.round_mut(1).inst[i];
            ir.my_bval |= b;
            ir.bval_from[b as usize >> 1].insert(me);
        }
        self.mark(1, P_BVAL);
        self.fixpoint();
        self.poll(false, out);
    }

    fn handle(
        &mut self,
        sender: NodeId,
        body: &Body,
        retx: bool,
        now: Tick,
        out: &mut Out,
    ) -> bool {
        let Body::AbaSc(b) = body else { return false };
        let s = sender.idx();
        if b.base != self.base
            || b.entries.len() != self.k
            || s >= self.c.n
            || b.round == 0
            || b.round > self.round_cap
        {
            return false;
        }
        let r = b.round;
        let mut changed = false;
        self.round_mut(r);
        for (i, e) in b.entries.iter().enumerate() {
            if e.aux_nack & 2 != 0 {
                if (e.bval == 1 || e.bval == 2) && self.terms[i][s].is_none_or(|(_, tr)| tr > r) {
                    let prev = self.terms[i][s];
                    let d = e.bval == 2;
                    if prev.is_none_or(|(pd, _)| pd == d) {
                        self.terms[i][s] = Some((d, r));
                        changed = true;
                    }
                }
                continue;
            }
            let ir = &mut self.rounds.get_mut(&r).expect("round exists").inst[i];
            for v in 0..2 {
                if e.bval & (1 << v) != 0 {
                    changed |= ir.bval_from[v].insert(s);
                }
                if e.aux & (1 << v) != 0 {
                    changed |= ir.aux_from[v].insert(s);
                }
            }
        }
        if let Some(sh) = &b.share {
            if !self.rounds[&r].shares.contains_key(&sender) {
                let share = Share {
                    signer: sender,
                    bytes: sh.clone(),
                };
                if self
                    .c
                    .crypto
                    .coin_verify_share(self.scheme, &self.coin_tag(r), &share)
                {
                    self.round_mut(r).shares.insert(sender, share.bytes);
                    self.try_coin(r);
                    changed = true;
                }
            }
        }
        self.fixpoint();
        if retx && self.started {
            if self.finished() && r >= self.round && !b.share_nack.contains(self.c.me.idx()) {
                self.release_share(r);
            }
            let lacks_share =
                self.rounds[&r].my_share.is_some() && !b.share_nack.contains(self.c.me.idx());
            let lacks_votes = b.entries.iter().enumerate().any(|(i, e)| {
                let voted = e.aux_nack & 1 == 0 && self.rounds[&r].inst[i].my_bval != 0;
                voted || (self.decided[i].is_some() && e.aux_nack & 2 == 0)
            });
            if (lacks_share || lacks_votes)
                && self.limiter.allow(r as u64, now, self.c.retx_interval / 2)
            {
                out.send(self.snapshot(r));
                self.pending.remove(&r);
            }
            let t = self.round;
            let lacks_term =
                b.entries.iter().enumerate().any(|(i, e)| {
                    e.aux_nack & 2 == 0 && self.decided[i].is_some_and(|(_, d)| d < t)
                });
            if r < t
                && lacks_term
                && self
                    .limiter
                    .allow(1 << 16 | t as u64, now, self.c.retx_interval / 2)
            {
                out.send(self.snapshot(t));
            }
        }
        changed
    }

    fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    fn poll(&mut self, force: bool, out: &mut Out) {
        if !self.started {
            return;
        }
        let ready: Vec<u8> = self
            .pending
            .iter()
            .filter(|(&r, &mask)| {
                force
                    || mask & (P_BVAL | P_SHARE | P_TERM) != 0
                    || (0..self.k).all(|i| {
                        self.decided[i].is_some_and(|(_, d)| d < r)
                            || self.rounds.get(&r).is_some_and(|x| x.inst[i].my_aux != 0)
                    })
            })
            .map(|(&r, _)| r)
            .collect();
        for r in ready {
            self.pending.remove(&r);
            out.send(self.snapshot(r));
        }
    }

    fn stall(&mut self, out: &mut Out) {
        if !self.started {
            return;
        }
        out.resend(self.snapshot(self.round));
        if self.round > 1 {
            out.resend(self.snapshot(self.round - 1));
        }
    }

    fn decided(&self, i: usize) -> Option<bool> {
        self.decided.get(i)?.map(|d| d.0)
    }

    fn describe(&self) -> String {
        let mut s = format!(
            "base {} round {} complete {:?} decided {:?} terms {:?}\n",
            self.base, self.round, self.complete, self.decided, self.terms
        );
        for (r, rs) in &self.rounds {
            s += &format!(
                "  r{r} coin {:?} shares {:?} mine {}\n",
                rs.coin,
                rs.shares.keys().collect::<Vec<_>>(),
                rs.my_share.is_some()
            );
            for (i, ir) in rs.inst.iter().enumerate() {
                s += &format!("    i{i} {:?}\n", ir);
            }
        }
        s
    }

    fn decide_round(&self, i: usize) -> Option<u8> {
        self.decided.get(i)?.map(|d| d.1)
    }

    fn k(&self) -> usize {
        self.k
    }

    fn started(&self) -> bool {
        self.started
    }

    fn round(&self) -> u8 {
        self.round
    }

    fn coins(&self) -> Vec<(u8, bool)> {
        self.rounds
            .iter()
            .filter_map(|(r, x)| x.coin.map(|c| (*r, c)))
            .collect()
    }
}
