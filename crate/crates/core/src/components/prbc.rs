//! Provable reliable broadcast: RBC plus a DONE round of threshold signature
//! shares. 2f+1 shares on instance i combine into a proof that i was
//! delivered by at least f+1 correct nodes.

use std::collections::BTreeMap;

use super::{baseline, family, Ctx, Limiter, Out, RbcBatch};
use crate::crypto::Share;
use crate::packets::{Body, PrbcDoneBody};
use crate::types::{NodeId, NodeSet, Tick};

const PH_DONE: u8 = 3;

pub struct PrbcBatch {
    rbc: RbcBatch,
    my_shares: Vec<Option<Vec<u8>>>,
    /// Shares from peers, counted once the instance is delivered locally.
    shares: Vec<BTreeMap<NodeId, Vec<u8>>>,
    proofs: Vec<Option<Vec<u8>>>,
    proof_order: Vec<usize>,
    pending_done: bool,
    queue: Vec<Body>,
    limiter: Limiter,
}

pub fn proof_tag(c: &Ctx, i: usize) -> Vec<u8> {
    c.tag(&[b"PRBC", &[i as u8]])
}

impl PrbcBatch {
    pub fn new(c: Ctx) -> PrbcBatch {
        let n = c.n;
        PrbcBatch {
            rbc: RbcBatch::new(c),
            my_shares: vec![None; n],
            shares: vec![BTreeMap::new(); n],
            proofs: vec![None; n],
            proof_order: Vec::new(),
            pending_done: false,
            queue: Vec::new(),
            limiter: Limiter::default(),
        }
    }

    fn c(&self) -> &Ctx {
        self.rbc.ctx()
    }

    pub fn rbc(&self) -> &RbcBatch {
        &self.rbc
    }

    pub fn start(&mut self, proposal: Option<Vec<u8>>, now: Tick, out: &mut Out) {
        self.rbc.start(proposal, now, out);
        self.after_rbc();
    }

    /// Checks a proof for instance `i` produced by any node.
    pub fn verify_proof(&self, i: usize, sig: &[u8]) -> bool {
        i < self.c().n && self.c().crypto.tsig_verify(&proof_tag(self.c(), i), sig)
    }

    fn after_rbc(&mut self) {
        for i in 0..self.c().n {
            if self.my_shares[i].is_some() || self.rbc.delivered(i).is_none() {
                continue;
            }
            let c = self.c();
            let share = c.crypto.tsig_share(c.me, &proof_tag(c, i));
            self.my_shares[i] = Some(share.bytes.clone());
            self.shares[i].insert(share.signer, share.bytes.clone());
            if self.c().batched() {
                self.pending_done = true;
            } else {
                self.queue.push(baseline(
                    family::PRBC,
                    PH_DONE,
                    0,
                    i as u8,
                    0,
                    share.bytes,
                    0,
                ));
            }
            self.try_combine(i);
        }
    }

    fn add_share(&mut self, from: NodeId, i: usize, bytes: &[u8]) -> bool {
        if i >= self.c().n || self.shares[i].contains_key(&from) || self.proofs[i].is_some() {
            return false;
        }
        let share = Share {
            signer: from,
            bytes: bytes.to_vec(),
        };
        if !self
            .c()
            .crypto
            .tsig_verify_share(&proof_tag(self.c(), i), &share)
        {
            return false;
        }
        self.shares[i].insert(from, share.bytes);
        self.try_combine(i);
        true
    }

    fn try_combine(&mut self, i: usize) {
        if self.proofs[i].is_some()
            || self.my_shares[i].is_none()
            || self.shares[i].len() < self.c().quorum()
        {
            return;
        }
        let shares: Vec<Share> = self.shares[i]
            .iter()
            .map(|(s, b)| Share {
                signer: *s,
                bytes: b.clone(),
            })
            .collect();
        if let Ok(sig) = self
            .c()
            .crypto
            .tsig_combine(&proof_tag(self.c(), i), &shares)
        {
            self.proofs[i] = Some(sig);
            self.proof_order.push(i);
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
        let mut changed = false;
        match body {
            Body::PrbcDone(b) => {
                for (i, sh) in &b.shares {
                    changed |= self.add_share(sender, *i as usize, sh);
                }
                if retx {
                    let missing = (0..self.c().n)
                        .any(|i| self.my_shares[i].is_some() && !b.done_nack.contains(i));
                    if missing && self.limiter.allow(0, now, self.c().retx_interval / 2) {
                        out.send(Body::PrbcDone(self.snapshot()));
                    }
                }
            }
            Body::Baseline(b) if b.family == family::PRBC => {
                if b.phase == PH_DONE {
                    changed |= self.add_share(sender, b.instance as usize, &b.value);
                }
                let i = b.instance as usize;
                let peer_done = b.nack & 1 == 1;
                if retx
                    && !peer_done
                    && i < self.c().n
                    && self
                        .limiter
                        .allow(1 + i as u64, now, self.c().retx_interval / 2)
                {
                    if let Some(sh) = &self.my_shares[i] {
                        out.send(baseline(
                            family::PRBC,
                            PH_DONE,
                            0,
                            i as u8,
                            0,
                            sh.clone(),
                            self.proofs[i].is_some() as u64,
                        ));
                    }
                }
            }
            _ => {
                changed |= self.rbc.handle(sender, body, retx, now, out);
            }
        }
        self.after_rbc();
        changed
    }

    pub fn snapshot(&self) -> PrbcDoneBody {
        let mut done_nack = NodeSet::default();
        for (i, p) in self.proofs.iter().enumerate() {
            if p.is_some() {
                done_nack.insert(i);
            }
        }
        PrbcDoneBody {
            shares: self
                .my_shares
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.as_ref().map(|s| (i as u8, s.clone())))
                .collect(),
            done_nack,
        }
    }

    pub fn has_pending(&self) -> bool {
        self.rbc.has_pending() || self.pending_done || !self.queue.is_empty()
    }

    pub fn poll(&mut self, force: bool, out: &mut Out) {
        self.rbc.poll(force, out);
        if !self.c().batched() {
            for b in self.queue.drain(..) {
                out.send(b);
            }
            return;
        }
        if self.pending_done && (self.rbc.all_delivered() || force) {
            self.pending_done = false;
            out.send(Body::PrbcDone(self.snapshot()));
        }
    }

    pub fn stall(&mut self, out: &mut Out) {
        self.rbc.stall(out);
        if self.c().batched() {
            if self.my_shares.iter().any(|s| s.is_some()) {
                out.resend(Body::PrbcDone(self.snapshot()));
            }
        } else {
            for (i, s) in self.my_shares.iter().enumerate() {
                if let Some(sh) = s {
                    out.resend(baseline(
                        family::PRBC,
                        PH_DONE,
                        0,
                        i as u8,
                        0,
                        sh.clone(),
                        self.proofs[i].is_some() as u64,
                    ));
                }
            }
        }
    }

    pub fn proof(&self, i: usize) -> Option<&[u8]> {
        self.proofs.get(i)?.as_deref()
    }

    /// Instances with a proof, in the order proofs were formed.
    pub fn proof_order(&self) -> &[usize] {
        &self.proof_order
    }

    pub fn delivered(&self, i: usize) -> Option<&[u8]> {
        self.rbc.delivered(i)
    }
}
