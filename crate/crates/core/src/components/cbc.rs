//! Consistent broadcast: the leader gathers 2f+1 signature shares on its
//! value and broadcasts the combined signature as FINISH.

use std::collections::BTreeMap;

use super::{baseline, family, fragments, Ctx, Limiter, Out, Reassembly, Validity};
use crate::crypto::Share;
use crate::packets::{Body, CbcEfBody, CbcSmallBody, Keyed, SmallValue};
use crate::types::{hash_with_len, Hash, NodeId, NodeSet, Tick};

const PH_INIT: u8 = 0;
const PH_ECHO: u8 = 1;
const PH_FINISH: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CbcKind {
    /// Arbitrary values sent as INIT fragments.
    Standard,
    /// 2f+1 node id lists carried inside the vote packet itself.
    Small,
}

pub fn set_to_value(s: NodeSet) -> Vec<u8> {
    s.0.to_le_bytes().to_vec()
}

pub fn value_to_set(v: &[u8]) -> Option<NodeSet> {
    Some(NodeSet(u64::from_le_bytes(v.try_into().ok()?)))
}

#[derive(Clone, Debug)]
struct Inst {
    reasm: BTreeMap<NodeId, Reassembly>,
    values: BTreeMap<Hash, Vec<u8>>,
    leader_hash: Option<Hash>,
    validity: Validity,
    my_share: Option<(Hash, Vec<u8>)>,
    shares: BTreeMap<NodeId, Vec<u8>>,
    finish: Option<(Hash, Vec<u8>)>,
    delivered: bool,
}

impl Inst {
    fn new() -> Inst {
        Inst {
            reasm: BTreeMap::new(),
            values: BTreeMap::new(),
            leader_hash: None,
            validity: Validity::Pending,
            my_share: None,
            shares: BTreeMap::new(),
            finish: None,
            delivered: false,
        }
    }

    fn shown_hash(&self) -> Option<Hash> {
        self.finish.as_ref().map(|f| f.0).or(self.leader_hash)
    }

    fn relay_value(&self) -> Option<&Vec<u8>> {
        self.values.get(&self.shown_hash()?)
    }
}

pub struct CbcBatch {
    c: Ctx,
    kind: CbcKind,
    needs_validation: bool,
    inst: Vec<Inst>,
    order: Vec<(usize, Tick)>,
    pending_init: bool,
    pending_echo: bool,
    pending_finish: bool,
    queue: Vec<Body>,
    limiter: Limiter,
}

impl CbcBatch {
    /// With `needs_validation`, leader values are echoed only after
    /// [`CbcBatch::revalidate`] accepts them.
    pub fn new(c: Ctx, kind: CbcKind, needs_validation: bool) -> CbcBatch {
        let n = c.n;
        CbcBatch {
            c,
            kind,
            needs_validation,
            inst: vec![Inst::new(); n],
            order: Vec::new(),
            pending_init: false,
            pending_echo: false,
            pending_finish: false,
            queue: Vec::new(),
            limiter: Limiter::default(),
        }
    }

    fn fam(&self) -> u8 {
        match self.kind {
            CbcKind::Standard => family::CBC,
            CbcKind::Small => family::CBC_SMALL,
        }
    }

    pub fn tag(&self, i: usize, h: &Hash) -> Vec<u8> {
        let name: &[u8] = match self.kind {
            CbcKind::Standard => b"CBC",
            CbcKind::Small => b"CBCS",
        };
        self.c.tag(&[name, &[i as u8], h.as_bytes()])
    }

    pub fn start(&mut self, value: Vec<u8>, now: Tick, out: &mut Out) {
        let me = self.c.me.idx();
        let h = hash_with_len(&value, self.c.hash_len);
        self.inst[me].values.insert(h, value.clone());
        self.inst[me].leader_hash = Some(h);
        self.inst[me].validity = Validity::Valid;
        let share = self.c.crypto.tsig_share(self.c.me, &self.tag(me, &h));
        self.inst[me].my_share = Some((h, share.bytes.clone()));
        self.inst[me].shares.insert(self.c.me, share.bytes);
        match self.kind {
            CbcKind::Standard => {
                for b in fragments(&value, self.c.frag_cap, me as u8, self.initial_nack()) {
                    out.send(Body::CbcInit(b));
                }
            }
            CbcKind::Small => {
                if self.c.batched() {
                    self.pending_init = true;
                } else {
                    self.queue
                        .push(baseline(self.fam(), PH_INIT, 0, me as u8, 0, value, 0));
                }
            }
        }
        self.try_combine(now);
    }

    fn initial_nack(&self) -> NodeSet {
        let mut s = NodeSet::default();
        for (i, inst) in self.inst.iter().enumerate() {
            if inst.relay_value().is_some() {
                s.insert(i);
            }
        }
        s
    }

    fn learn_value(&mut self, i: usize, from: NodeId, v: Vec<u8>) -> bool {
        let h = hash_with_len(&v, self.c.hash_len);
        let inst = &mut self.inst[i];
        let fresh = !inst.values.contains_key(&h);
        inst.values.entry(h).or_insert(v);
        let mut changed = fresh;
        if from.idx() == i && inst.leader_hash.is_none() {
            inst.leader_hash = Some(h);
            changed = true;
            if !self.needs_validation {
                self.echo(i, Validity::Valid);
            }
        }
        changed
    }

    fn echo(&mut self, i: usize, v: Validity) {
        let me = self.c.me.idx();
        let inst = &mut self.inst[i];
        inst.validity = v;
        if v != Validity::Valid || inst.my_share.is_some() || i == me {
            return;
        }
        let Some(h) = inst.leader_hash else { return };
        let share = self.c.crypto.tsig_share(self.c.me, &self.tag(i, &h));
        let inst = &mut self.inst[i];
        inst.my_share = Some((h, share.bytes.clone()));
        if self.c.batched() {
            self.pending_echo = true;
        } else {
            self.queue
                .push(baseline(self.fam(), PH_ECHO, 0, i as u8, 0, share.bytes, 0));
        }
    }

    /// Re-checks leader values still awaiting validation. Returns true if any
    /// verdict changed.
    pub fn revalidate(&mut self, check: &mut dyn FnMut(usize, &[u8]) -> Validity) -> bool {
        let mut changed = false;
        for i in 0..self.c.n {
            let inst = &self.inst[i];
            if inst.validity != Validity::Pending {
                continue;
            }
            let Some(h) = inst.leader_hash else { continue };
            let v = check(i, &inst.values[&h]);
            if v != Validity::Pending {
                self.echo(i, v);
                changed = true;
            }
        }
        changed
    }

    fn add_share(&mut self, from: NodeId, i: usize, h: &Hash, bytes: &[u8], now: Tick) -> bool {
        let me = self.c.me.idx();
        if i != me
            || self.inst[me].leader_hash.as_ref() != Some(h)
            || self.inst[me].shares.contains_key(&from)
        {
            return false;
        }
        let share = Share {
            signer: from,
            bytes: bytes.to_vec(),
        };
        if !self.c.crypto.tsig_verify_share(&self.tag(i, h), &share) {
            return false;
        }
        self.inst[me].shares.insert(from, share.bytes);
        self.try_combine(now);
        true
    }

    fn try_combine(&mut self, now: Tick) {
        let me = self.c.me.idx();
        let inst = &self.inst[me];
        if inst.finish.is_some() || inst.shares.len() < self.c.quorum() {
            return;
        }
        let h = inst.leader_hash.expect("leader value set at start");
        let shares: Vec<Share> = inst
            .shares
            .iter()
            .map(|(s, b)| Share {
                signer: *s,
                bytes: b.clone(),
            })
            .collect();
        if let Ok(sig) = self.c.crypto.tsig_combine(&self.tag(me, &h), &shares) {
            self.inst[me].finish = Some((h, sig.clone()));
            if self.c.batched() {
                self.pending_finish = true;
            } else {
                let mut v = h.as_bytes().to_vec();
                v.extend(sig);
                self.queue
                    .push(baseline(self.fam(), PH_FINISH, 0, me as u8, 0, v, 0));
            }
            self.try_deliver(me, now);
        }
    }

    fn add_finish(&mut self, i: usize, h: Hash, sig: &[u8], now: Tick) -> bool {
        if self.inst[i].finish.is_some() || !self.c.crypto.tsig_verify(&self.tag(i, &h), sig) {
            return false;
        }
        self.inst[i].finish = Some((h, sig.to_vec()));
        self.try_deliver(i, now);
        true
    }

    fn try_deliver(&mut self, i: usize, now: Tick) {
        let inst = &mut self.inst[i];
        if let Some((h, _)) = &inst.finish {
            if !inst.delivered && inst.values.contains_key(h) {
                inst.delivered = true;
                self.order.push((i, now));
            }
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
        let mut changed = false;
        match (self.kind, body) {
            (CbcKind::Standard, Body::CbcInit(b)) => {
                let i = b.instance as usize;
                if i >= n {
                    return false;
                }
                if let Some(v) = self.inst[i].reasm.entry(sender).or_default().add(b) {
                    changed |= self.learn_value(i, sender, v);
                    self.try_deliver(i, now);
                }
                if retx {
                    self.respond_values(b.initial_nack, now, out);
                }
            }
            (CbcKind::Standard, Body::CbcEf(b)) => {
                if b.hashes.len() != n || b.hashes.iter().any(|h| h.len() != self.c.hash_len) {
                    return false;
                }
                for (i, sh) in &b.echo_shares {
                    changed |= self.add_share(sender, *i as usize, &b.hashes[*i as usize], sh, now);
                }
                for (i, sig) in &b.finish {
                    changed |= self.add_finish(*i as usize, b.hashes[*i as usize], sig, now);
                }
                if retx {
                    self.respond_values(b.initial_nack, now, out);
                    self.respond_state(b.echo_nack, b.finish_nack, now, out);
                }
            }
            (CbcKind::Small, Body::CbcSmall(b)) => {
                if b.values.len() != n {
                    return false;
                }
                let mut hashes = vec![None; n];
                for (j, v) in b.values.iter().enumerate() {
                    if let Some(SmallValue::Ids(set)) = v {
                        let bytes = set_to_value(*set);
                        hashes[j] = Some(hash_with_len(&bytes, self.c.hash_len));
                        changed |= self.learn_value(
                            j,
                            if j == s { sender } else { NodeId(u8::MAX) },
                            bytes,
                        );
                        self.try_deliver(j, now);
                    }
                }
                for (i, sh) in &b.echo_shares {
                    if let Some(h) = hashes[*i as usize] {
                        changed |= self.add_share(sender, *i as usize, &h, sh, now);
                    }
                }
                for (i, sig) in &b.finish {
                    if let Some(h) = hashes[*i as usize] {
                        changed |= self.add_finish(*i as usize, h, sig, now);
                    }
                }
                if retx {
                    let mut has = NodeSet::default();
                    for (j, v) in b.values.iter().enumerate() {
                        if v.is_some() {
                            has.insert(j);
                        }
                    }
                    if (0..n).any(|j| !has.contains(j) && self.inst[j].relay_value().is_some()) {
                        self.respond_state(NodeSet::default(), NodeSet::default(), now, out);
                    } else {
                        self.respond_state(b.echo_nack, b.finish_nack, now, out);
                    }
                }
            }
            (_, Body::Recover(b)) if b.family == self.fam() => {
                for &(i, _) in &b.requests {
                    let i = i as usize;
                    if i < n && self.limiter.allow(i as u64, now, self.c.retx_interval / 2) {
                        if self.c.batched() {
                            self.send_value(i, out);
                        } else {
                            self.relay_baseline(i, out);
                        }
                    }
                }
            }
            (_, Body::Baseline(b)) if b.family == self.fam() => {
                let i = b.instance as usize;
                if i >= n {
                    return false;
                }
                match b.phase {
                    PH_INIT if self.kind == CbcKind::Small => {
                        if value_to_set(&b.value).is_some_and(|x| x.len() == self.c.quorum()) {
                            changed |= self.learn_value(i, sender, b.value.clone());
                            self.try_deliver(i, now);
                        }
                    }
                    PH_ECHO => {
                        if let Some(h) = self.inst[self.c.me.idx()].leader_hash {
                            changed |= self.add_share(sender, i, &h, &b.value, now);
                        }
                    }
                    PH_FINISH if b.value.len() > self.c.hash_len => {
                        let h = Hash::from_slice(&b.value[..self.c.hash_len]);
                        changed |= self.add_finish(i, h, &b.value[self.c.hash_len..], now);
                    }
                    _ => {}
                }
                let peer_done = b.nack & 1 == 1;
                if retx
                    && !peer_done
                    && self
                        .limiter
                        .allow(1 << 40 | i as u64, now, self.c.retx_interval / 2)
                {
                    self.resend_baseline(i, out, false);
                }
            }
            _ => {}
        }
        changed
    }

    fn send_value(&self, i: usize, out: &mut Out) {
        let Some(v) = self.inst[i].relay_value() else {
            return;
        };
        match self.kind {
            CbcKind::Standard => {
                for b in fragments(v, self.c.frag_cap, i as u8, self.initial_nack()) {
                    out.send(Body::CbcInit(b));
                }
            }
            CbcKind::Small => out.send(self.snapshot()),
        }
    }

    /// Value and finish certificate of instance `i`, as baseline packets.
    fn relay_baseline(&self, i: usize, out: &mut Out) {
        let inst = &self.inst[i];
        let Some((h, sig)) = &inst.finish else { return };
        let Some(v) = inst.values.get(h) else { return };
        match self.kind {
            CbcKind::Standard => {
                for b in fragments(v, self.c.frag_cap, i as u8, self.initial_nack()) {
                    out.send(Body::CbcInit(b));
                }
            }
            CbcKind::Small => out.send(baseline(self.fam(), PH_INIT, 0, i as u8, 0, v.clone(), 0)),
        }
        let mut f = h.as_bytes().to_vec();
        f.extend(sig);
        out.send(baseline(self.fam(), PH_FINISH, 0, i as u8, 0, f, 0));
    }

    fn respond_values(&mut self, peer_has: NodeSet, now: Tick, out: &mut Out) {
        for i in 0..self.c.n {
            if !peer_has.contains(i)
                && self.inst[i].relay_value().is_some()
                && self.limiter.allow(i as u64, now, self.c.retx_interval / 2)
            {
                self.send_value(i, out);
            }
        }
    }

    fn respond_state(&mut self, echoed: NodeSet, finished: NodeSet, now: Tick, out: &mut Out) {
        let helpful = self.inst.iter().enumerate().any(|(i, x)| {
            (x.finish.is_some() && !finished.contains(i))
                || (x.my_share.is_some() && !echoed.contains(i))
        });
        if (helpful || echoed.is_empty())
            && self.limiter.allow(u64::MAX, now, self.c.retx_interval / 2)
        {
            out.send(self.snapshot());
        }
    }

    fn keyed_state(&self, shown: &[Option<Hash>]) -> (Vec<Keyed>, Vec<Keyed>, NodeSet, NodeSet) {
        let me = self.c.me.idx();
        let mut shares = Vec::new();
        let mut finish = Vec::new();
        let mut echo_nack = NodeSet::default();
        let mut finish_nack = NodeSet::default();
        for (i, inst) in self.inst.iter().enumerate() {
            if let Some((h, sh)) = &inst.my_share {
                echo_nack.insert(i);
                if i != me && shown[i] == Some(*h) {
                    shares.push((i as u8, sh.clone()));
                }
            }
            if let Some((h, sig)) = &inst.finish {
                finish_nack.insert(i);
                if shown[i] == Some(*h) {
                    finish.push((i as u8, sig.clone()));
                }
            }
        }
        (shares, finish, echo_nack, finish_nack)
    }

    pub fn snapshot(&self) -> Body {
        let n = self.c.n;
        match self.kind {
            CbcKind::Standard => {
                let shown: Vec<Option<Hash>> = self.inst.iter().map(|x| x.shown_hash()).collect();
                let (echo_shares, finish, echo_nack, finish_nack) = self.keyed_state(&shown);
                Body::CbcEf(CbcEfBody {
                    hashes: shown
                        .iter()
                        .map(|h| h.unwrap_or(Hash::zero(self.c.hash_len)))
                        .collect(),
                    echo_shares,
                    finish,
                    echo_nack,
                    finish_nack,
                    initial_nack: self.initial_nack(),
                })
            }
            CbcKind::Small => {
                let mut values = vec![None; n];
                let mut shown = vec![None; n];
                for (i, inst) in self.inst.iter().enumerate() {
                    if let (Some(h), Some(v)) = (inst.shown_hash(), inst.relay_value()) {
                        if let Some(set) = value_to_set(v).filter(|s| s.len() == self.c.quorum()) {
                            values[i] = Some(SmallValue::Ids(set));
                            shown[i] = Some(h);
                        }
                    }
                }
                let (echo_shares, finish, echo_nack, finish_nack) = self.keyed_state(&shown);
                Body::CbcSmall(CbcSmallBody {
                    values,
                    echo_shares,
                    finish,
                    echo_nack,
                    finish_nack,
                })
            }
        }
    }

    pub fn has_pending(&self) -> bool {
        self.pending_init || self.pending_echo || self.pending_finish || !self.queue.is_empty()
    }

    pub fn poll(&mut self, force: bool, out: &mut Out) {
        if !self.c.batched() {
            for b in self.queue.drain(..) {
                out.send(b);
            }
            return;
        }
        if !(self.pending_init || self.pending_echo || self.pending_finish) {
            return;
        }
        let me = self.c.me.idx();
        let echo_settled = self
            .inst
            .iter()
            .enumerate()
            .all(|(i, x)| i == me || x.my_share.is_some() || x.validity == Validity::Invalid);
        if !self.pending_echo || echo_settled || force {
            self.pending_init = false;
            self.pending_echo = false;
            self.pending_finish = false;
            out.send(self.snapshot());
        }
    }

    fn resend_baseline(&self, i: usize, out: &mut Out, retx: bool) {
        let me = self.c.me.idx();
        let inst = &self.inst[i];
        let done = inst.delivered as u64;
        let mut items = Vec::new();
        if i == me && self.kind == CbcKind::Small {
            if let Some(v) = inst.relay_value() {
                items.push(baseline(
                    self.fam(),
                    PH_INIT,
                    0,
                    i as u8,
                    0,
                    v.clone(),
                    done,
                ));
            }
        }
        if i == me && self.kind == CbcKind::Standard && retx && inst.finish.is_none() {
            self.send_value(i, out);
        }
        if i != me {
            if let Some((_, sh)) = &inst.my_share {
                items.push(baseline(
                    self.fam(),
                    PH_ECHO,
                    0,
                    i as u8,
                    0,
                    sh.clone(),
                    done,
                ));
            }
        }
        if let Some((h, sig)) = &inst.finish {
            let mut v = h.as_bytes().to_vec();
            v.extend(sig);
            items.push(baseline(self.fam(), PH_FINISH, 0, i as u8, 0, v, done));
        }
        for b in items {
            if retx {
                out.resend(b);
            } else {
                out.send(b);
            }
        }
    }

    pub fn stall(&mut self, out: &mut Out) {
        if self.c.batched() {
            out.resend(self.snapshot());
        } else {
            for i in 0..self.c.n {
                self.resend_baseline(i, out, true);
            }
        }
        let requests: Vec<(u8, u16)> = self
            .inst
            .iter()
            .enumerate()
            .filter(|(_, x)| !x.delivered && (x.finish.is_some() || !self.c.batched()))
            .map(|(i, _)| (i as u8, 0xffff))
            .collect();
        if !requests.is_empty() {
            out.resend(Body::Recover(crate::packets::RecoverBody {
                family: self.fam(),
                requests,
            }));
        }
    }

    pub fn delivered(&self, i: usize) -> Option<&[u8]> {
        let inst = self.inst.get(i)?;
        if !inst.delivered {
            return None;
        }
        let (h, _) = inst.finish.as_ref()?;
        inst.values.get(h).map(|v| v.as_slice())
    }

    /// Combined signature proving delivery of instance `i`.
    pub fn finish_sig(&self, i: usize) -> Option<&[u8]> {
        self.inst.get(i)?.finish.as_ref().map(|f| f.1.as_slice())
    }

    pub fn delivery_order(&self) -> &[(usize, Tick)] {
        &self.order
    }

    pub fn delivered_count(&self) -> usize {
        self.order.len()
    }

    pub fn all_delivered(&self) -> bool {
        self.order.len() == self.c.n
    }
}
