//! Bracha reliable broadcast, N instances at once.

use std::collections::BTreeMap;

use super::{baseline, family, fragments, peer_bits, peer_bits_has, Ctx, Limiter, Out, Reassembly};
use crate::packets::{Body, RbcErBody, RecoverBody};
use crate::types::{hash_with_len, Hash, NodeId, NodeSet, Tick};

const PH_ECHO: u8 = 1;
const PH_READY: u8 = 2;

#[derive(Clone, Debug)]
struct Inst {
    reasm: BTreeMap<NodeId, Reassembly>,
    values: BTreeMap<Hash, Vec<u8>>,
    leader_hash: Option<Hash>,
    echo_from: Vec<Option<Hash>>,
    ready_from: Vec<Option<Hash>>,
    my_echo: Option<Hash>,
    my_ready: Option<Hash>,
    echo_quorum: bool,
    delivered: Option<Hash>,
}

impl Inst {
    fn new(n: usize) -> Inst {
        Inst {
            reasm: BTreeMap::new(),
            values: BTreeMap::new(),
            leader_hash: None,
            echo_from: vec![None; n],
            ready_from: vec![None; n],
            my_echo: None,
            my_ready: None,
            echo_quorum: false,
            delivered: None,
        }
    }

    fn count(votes: &[Option<Hash>]) -> BTreeMap<Hash, usize> {
        let mut m = BTreeMap::new();
        for h in votes.iter().flatten() {
            *m.entry(*h).or_insert(0) += 1;
        }
        m
    }

    /// The value this node would hand to a peer that lacks it.
    fn relay_value(&self) -> Option<&Vec<u8>> {
        let h = self.delivered.or(self.leader_hash)?;
        self.values.get(&h)
    }

    fn has_value(&self) -> bool {
        self.delivered
            .or(self.my_ready)
            .or(self.leader_hash)
            .is_some_and(|h| self.values.contains_key(&h))
    }
}

pub struct RbcBatch {
    c: Ctx,
    inst: Vec<Inst>,
    order: Vec<(usize, Tick)>,
    pending_echo: bool,
    pending_ready: bool,
    queue: Vec<Body>,
    limiter: Limiter,
}

impl RbcBatch {
    pub fn new(c: Ctx) -> RbcBatch {
        let n = c.n;
        RbcBatch {
            c,
            inst: vec![Inst::new(n); n],
            order: Vec::new(),
            pending_echo: false,
            pending_ready: false,
            queue: Vec::new(),
            limiter: Limiter::default(),
        }
    }

    pub fn ctx(&self) -> &Ctx {
        &self.c
    }

    /// Broadcasts this node's proposal, if it has one.
    pub fn start(&mut self, proposal: Option<Vec<u8>>, now: Tick, out: &mut Out) {
        let me = self.c.me.idx();
        if let Some(v) = proposal {
            let h = hash_with_len(&v, self.c.hash_len);
            self.inst[me].values.insert(h, v);
            self.inst[me].leader_hash = Some(h);
            self.set_echo(me, h);
            self.send_init(me, out);
            self.evaluate(me, now);
        }
    }

    fn initial_nack(&self) -> NodeSet {
        let mut s = NodeSet::default();
        for (i, inst) in self.inst.iter().enumerate() {
            if inst.has_value() {
                s.insert(i);
            }
        }
        s
    }

    fn send_init(&self, i: usize, out: &mut Out) {
        if let Some(v) = self.inst[i].relay_value() {
            for b in fragments(v, self.c.frag_cap, i as u8, self.initial_nack()) {
                out.send(Body::RbcInit(b));
            }
        }
    }

    fn set_echo(&mut self, i: usize, h: Hash) {
        let me = self.c.me.idx();
        let inst = &mut self.inst[i];
        inst.my_echo = Some(h);
        inst.echo_from[me] = Some(h);
        if self.c.batched() {
            self.pending_echo = true;
        } else {
            let nack = peer_bits(self.c.me, voters(&inst.echo_from));
            self.queue.push(baseline(
                family::RBC,
                PH_ECHO,
                0,
                i as u8,
                0,
                h.as_bytes().to_vec(),
                nack,
            ));
        }
    }

    fn set_ready(&mut self, i: usize, h: Hash) {
        let me = self.c.me.idx();
        let inst = &mut self.inst[i];
        inst.my_ready = Some(h);
        inst.ready_from[me] = Some(h);
        if self.c.batched() {
            self.pending_ready = true;
        } else {
            let nack = peer_bits(self.c.me, voters(&inst.ready_from));
            self.queue.push(baseline(
                family::RBC,
                PH_READY,
                0,
                i as u8,
                0,
                h.as_bytes().to_vec(),
                nack,
            ));
        }
    }

    fn evaluate(&mut self, i: usize, now: Tick) -> bool {
        let q = self.c.quorum();
        let amp = self.c.f + 1;
        let mut changed = false;
        loop {
            let inst = &self.inst[i];
            let echoes = Inst::count(&inst.echo_from);
            let readies = Inst::count(&inst.ready_from);
            let echo_q = echoes.iter().find(|(_, c)| **c >= q).map(|(h, _)| *h);
            if echo_q.is_some() && !inst.echo_quorum {
                self.inst[i].echo_quorum = true;
                changed = true;
            }
            if self.inst[i].my_ready.is_none() {
                let amp_h = readies.iter().find(|(_, c)| **c >= amp).map(|(h, _)| *h);
                if let Some(h) = echo_q.or(amp_h) {
                    self.set_ready(i, h);
                    changed = true;
                    continue;
                }
            }
            let inst = &self.inst[i];
            if inst.delivered.is_none() {
                if let Some((h, _)) = readies
                    .iter()
                    .find(|(h, c)| **c >= q && inst.values.contains_key(h))
                {
                    self.inst[i].delivered = Some(*h);
                    self.order.push((i, now));
                    changed = true;
                }
            }
            return changed;
        }
    }

    pub fn handle(
        &mut self,
        sender: NodeId,
        body: &Body,
        retx: bool,
        now: Tick,
        out: &mut Out,
    ) -> bool {
        let n = self.c.n;
        let s = sender.idx();
        if s >= n {
            return false;
        }
        match body {
            Body::RbcInit(b) => {
                let i = b.instance as usize;
                if i >= n {
                    return false;
                }
                let mut changed = false;
                if let Some(v) = self.inst[i].reasm.entry(sender).or_default().add(b) {
                    let h = hash_with_len(&v, self.c.hash_len);
                    let inst = &mut self.inst[i];
                    inst.values.entry(h).or_insert(v);
                    if s == i && inst.leader_hash.is_none() {
                        inst.leader_hash = Some(h);
                        if inst.my_echo.is_none() {
                            self.set_echo(i, h);
                        }
                    }
                    changed = true;
                    changed |= self.evaluate(i, now);
                }
                if retx {
                    self.respond_values(b.initial_nack, now, out);
                }
                changed
            }
            Body::RbcEr(b) => {
                if b.hashes.len() != n || b.hashes.iter().any(|h| h.len() != self.c.hash_len) {
                    return false;
                }
                let mut changed = false;
                for i in 0..n {
                    let inst = &mut self.inst[i];
                    let mut touched = false;
                    if b.echo.contains(i) && inst.echo_from[s].is_none() {
                        inst.echo_from[s] = Some(b.hashes[i]);
                        touched = true;
                    }
                    if b.ready.contains(i) && inst.ready_from[s].is_none() {
                        inst.ready_from[s] = Some(b.hashes[i]);
                        touched = true;
                    }
                    if touched {
                        changed = true;
                        self.evaluate(i, now);
                    }
                }
                if retx {
                    self.respond_values(b.initial_nack, now, out);
                    let behind = (0..n).any(|i| {
                        !b.ready_nack.contains(i)
                            && (self.inst[i].my_echo.is_some() || self.inst[i].my_ready.is_some())
                    });
                    if behind && self.limiter.allow(u64::MAX, now, self.c.retx_interval / 2) {
                        out.send(Body::RbcEr(self.snapshot()));
                    }
                }
                changed
            }
            Body::Recover(b) if b.family == family::RBC => {
                for &(i, _) in &b.requests {
                    let i = i as usize;
                    if i < n && self.limiter.allow(i as u64, now, self.c.retx_interval / 2) {
                        self.send_init(i, out);
                    }
                }
                false
            }
            Body::Baseline(b) if b.family == family::RBC => {
                let i = b.instance as usize;
                if i >= n || b.value.len() != self.c.hash_len {
                    return false;
                }
                let h = Hash::from_slice(&b.value);
                let inst = &mut self.inst[i];
                let slot = match b.phase {
                    PH_ECHO => &mut inst.echo_from[s],
                    PH_READY => &mut inst.ready_from[s],
                    _ => return false,
                };
                let mut changed = false;
                if slot.is_none() {
                    *slot = Some(h);
                    changed = true;
                    self.evaluate(i, now);
                }
                if retx {
                    let mine = match b.phase {
                        PH_ECHO => self.inst[i].my_echo,
                        _ => self.inst[i].my_ready,
                    };
                    let key = 1 << 32 | (b.phase as u64) << 8 | i as u64;
                    if let Some(m) = mine.filter(|_| !peer_bits_has(sender, b.nack, self.c.me)) {
                        if self.limiter.allow(key, now, self.c.retx_interval / 2) {
                            let votes = if b.phase == PH_ECHO {
                                &self.inst[i].echo_from
                            } else {
                                &self.inst[i].ready_from
                            };
                            let nack = peer_bits(self.c.me, voters(votes));
                            out.send(baseline(
                                family::RBC,
                                b.phase,
                                0,
                                i as u8,
                                0,
                                m.as_bytes().to_vec(),
                                nack,
                            ));
                        }
                    }
                }
                changed
            }
            _ => false,
        }
    }

    fn respond_values(&mut self, peer_has: NodeSet, now: Tick, out: &mut Out) {
        for i in 0..self.c.n {
            if !peer_has.contains(i)
                && self.inst[i].relay_value().is_some()
                && self.limiter.allow(i as u64, now, self.c.retx_interval / 2)
            {
                self.send_init(i, out);
            }
        }
    }

    pub fn snapshot(&self) -> RbcErBody {
        let n = self.c.n;
        let mut b = RbcErBody {
            hashes: vec![Hash::zero(self.c.hash_len); n],
            echo: NodeSet::default(),
            ready: NodeSet::default(),
            echo_nack: NodeSet::default(),
            ready_nack: NodeSet::default(),
            initial_nack: self.initial_nack(),
        };
        for (i, inst) in self.inst.iter().enumerate() {
            if let Some(h) = inst.my_ready.or(inst.my_echo) {
                b.hashes[i] = h;
            }
            if inst.my_echo.is_some() && inst.my_echo == Some(b.hashes[i]) {
                b.echo.insert(i);
            }
            if inst.my_ready.is_some() {
                b.ready.insert(i);
            }
            if inst.echo_quorum {
                b.echo_nack.insert(i);
            }
            if inst.delivered.is_some() {
                b.ready_nack.insert(i);
            }
        }
        b
    }

    pub fn has_pending(&self) -> bool {
        self.pending_echo || self.pending_ready || !self.queue.is_empty()
    }

    /// Emits pending votes: at once in baseline mode, as one cumulative
    /// packet once the pending phases are complete for every instance (or
    /// when `force`d) in batched mode.
    pub fn poll(&mut self, force: bool, out: &mut Out) {
        if !self.c.batched() {
            for b in self.queue.drain(..) {
                out.send(b);
            }
            return;
        }
        if !(self.pending_echo || self.pending_ready) {
            return;
        }
        let settled = (!self.pending_echo || self.inst.iter().all(|x| x.my_echo.is_some()))
            && (!self.pending_ready || self.inst.iter().all(|x| x.my_ready.is_some()));
        if settled || force {
            self.pending_echo = false;
            self.pending_ready = false;
            out.send(Body::RbcEr(self.snapshot()));
        }
    }

    /// Rebroadcasts current state and asks for values that a READY quorum
    /// vouches for but this node lacks.
    pub fn stall(&mut self, out: &mut Out) {
        let n = self.c.n;
        if self.c.batched() {
            out.resend(Body::RbcEr(self.snapshot()));
        } else {
            for (i, inst) in self
                .inst
                .iter()
                .enumerate()
                .filter(|(_, x)| x.delivered.is_none())
            {
                for (ph, mine, votes) in [
                    (PH_ECHO, inst.my_echo, &inst.echo_from),
                    (PH_READY, inst.my_ready, &inst.ready_from),
                ] {
                    if let Some(h) = mine {
                        let nack = peer_bits(self.c.me, voters(votes));
                        out.resend(baseline(
                            family::RBC,
                            ph,
                            0,
                            i as u8,
                            0,
                            h.as_bytes().to_vec(),
                            nack,
                        ));
                    }
                }
            }
        }
        let mut requests = Vec::new();
        for i in 0..n {
            let inst = &self.inst[i];
            let readies = Inst::count(&inst.ready_from);
            let wanted = readies.iter().any(|(h, _)| !inst.values.contains_key(h));
            let echoed_unseen = !inst.has_value() && inst.echo_from.iter().any(|e| e.is_some());
            if inst.delivered.is_none() && (wanted || echoed_unseen) {
                requests.push((i as u8, 0xffff));
            }
        }
        if !requests.is_empty() {
            out.resend(Body::Recover(RecoverBody {
                family: family::RBC,
                requests,
            }));
        }
    }

    pub fn delivered(&self, i: usize) -> Option<&[u8]> {
        let inst = self.inst.get(i)?;
        inst.delivered
            .and_then(|h| inst.values.get(&h))
            .map(|v| v.as_slice())
    }

    pub fn delivered_hash(&self, i: usize) -> Option<Hash> {
        self.inst.get(i)?.delivered
    }

    /// Delivered instances with their delivery tick, in delivery order.
    pub fn delivery_order(&self) -> &[(usize, Tick)] {
        &self.order
    }

    pub fn delivered_count(&self) -> usize {
        self.order.len()
    }

    pub fn all_delivered(&self) -> bool {
        self.order.len() == self.c.n
    }

    pub fn echo_count(&self, i: usize) -> usize {
        self.inst[i].echo_from.iter().flatten().count()
    }
}

fn voters(v: &[Option<Hash>]) -> NodeSet {
    let mut s = NodeSet::default();
    for (i, x) in v.iter().enumerate() {
        if x.is_some() {
            s.insert(i);
        }
    }
    s
}
