//! Clustered operation. Each cluster agrees locally and attests the digest
//! of its output; a rotating leader per cluster submits the attestation to
//! a global agreement among leaders on the shared inter-cluster channel.
//! Members replace a leader whose submission is missing or forged.
//!
//! ATTEST packets carry a kind in the top bits of `cluster`: a member's
//! share on the local channel, a leader's submission on the global channel,
//! a relayed submission, or a replacement vote.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::byzantine::Adversary;
use super::host::{GlobalLink, MachineFactory, ProtocolHost, Wiring};
use super::{EpochMachine, EpochOutput, MachineStats, NodeEnv, Protocol};
use crate::components::{Limiter, Out, Target};
use crate::crypto::{CryptoSuite, Share, Sizes};
use crate::netsim::Topology;
use crate::packets::{AttestBody, Body, GlobalDoneBody, Header, Routing};
use crate::run::{drive, sim_params, RunResult, RunSetup};
use crate::types::{
    fault_threshold, hash_parts, ConfigError, Hash, NodeId, NodeSet, SystemConfig, Tick,
};

/// Stalls a member waits for its leader's submission before voting to replace it.
pub const SUBMIT_PATIENCE: u32 = 3;
/// Stalls a leader waits for every cluster's submission before starting anyway.
pub const GLOBAL_WAIT: u32 = 10;

const KIND_MASK: u8 = 0xC0;
const KIND_SHARE: u8 = 0x00;
const KIND_RELAY: u8 = 0x40;
const KIND_REPLACE: u8 = 0x80;
/// `attempt` of a GLOBAL_DONE that asks peers for the certified output.
const REQUEST: u8 = 0xFF;
const BROADCAST: u8 = 0xFF;

/// Local index of the leader of `cluster` after `round` replacements.
pub fn leader_of(seed: u64, epoch: u16, cluster: usize, size: usize, round: u8) -> usize {
    let h = hash_parts(
        &[
            b"leader",
            &seed.to_le_bytes(),
            &epoch.to_le_bytes(),
            &[cluster as u8],
        ],
        32,
    );
    let mut s = [0u8; 32];
    s.copy_from_slice(h.as_bytes());
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut ChaCha8Rng::from_seed(s));
    order[round as usize % size]
}

pub fn attest_tag(epoch: u16, cluster: usize, digest: &Hash) -> Vec<u8> {
    [
        b"ATT".as_slice(),
        &epoch.to_le_bytes(),
        &[cluster as u8],
        digest.as_bytes(),
    ]
    .concat()
}

fn replace_tag(epoch: u16, cluster: usize, round: u8) -> Vec<u8> {
    [
        b"REPL".as_slice(),
        &epoch.to_le_bytes(),
        &[cluster as u8, round],
    ]
    .concat()
}

fn done_tag(epoch: u16, included: NodeSet, digest: &Hash) -> Vec<u8> {
    [
        b"DONE".as_slice(),
        &epoch.to_le_bytes(),
        &included.0.to_le_bytes(),
        digest.as_bytes(),
    ]
    .concat()
}

/// What one node needs to take part in clustered operation.
#[derive(Clone)]
pub struct ClusterEnv {
    pub protocol: Arc<dyn Protocol>,
    pub cluster: usize,
    /// Environment of the local protocol, ids local to the cluster.
    pub local: NodeEnv,
    /// Environment of the global protocol, `me` being the cluster slot.
    pub global: NodeEnv,
    /// Key sets of every cluster, for checking attestations.
    pub suites: Vec<Arc<CryptoSuite>>,
    pub seed: u64,
}

impl ClusterEnv {
    fn n_clusters(&self) -> usize {
        self.suites.len()
    }

    fn size(&self) -> usize {
        self.local.cfg.n_nodes
    }
}

pub struct MultiHopMachine {
    env: ClusterEnv,
    epoch: u16,
    local: Box<dyn EpochMachine>,
    digest: Option<Hash>,
    att_shares: BTreeMap<NodeId, Vec<u8>>,
    /// Shares received before the local output, checked once it is known.
    att_early: BTreeMap<NodeId, (Hash, Vec<u8>)>,
    att_sig: Option<Vec<u8>>,
    round: u8,
    votes: BTreeMap<NodeId, Vec<u8>>,
    replaced: BTreeMap<u8, Vec<u8>>,
    voted: bool,
    leader_ok: bool,
    waiting: u32,
    global: Option<Box<dyn EpochMachine>>,
    global_started: bool,
    global_wait: u32,
    /// Verified attestations per cluster.
    submissions: BTreeMap<usize, (Hash, Vec<u8>)>,
    done_shares: BTreeMap<(u64, Hash), BTreeMap<NodeId, Vec<u8>>>,
    my_done: Option<GlobalDoneBody>,
    cert: Option<(NodeSet, Hash, Vec<u8>)>,
    limiter: Limiter,
    output: Option<EpochOutput>,
}

impl MultiHopMachine {
    pub fn new(env: ClusterEnv, epoch: u16) -> MultiHopMachine {
        let local = env.protocol.machine(&env.local, epoch);
        MultiHopMachine {
            env,
            epoch,
            local,
            digest: None,
            att_shares: BTreeMap::new(),
            att_early: BTreeMap::new(),
            att_sig: None,
            round: 0,
            votes: BTreeMap::new(),
            replaced: BTreeMap::new(),
            voted: false,
            leader_ok: false,
            waiting: 0,
            global: None,
            global_started: false,
            global_wait: 0,
            submissions: BTreeMap::new(),
            done_shares: BTreeMap::new(),
            my_done: None,
            cert: None,
            limiter: Limiter::default(),
            output: None,
        }
    }

    fn me(&self) -> NodeId {
        self.env.local.me
    }

    fn c(&self) -> usize {
        self.env.cluster
    }

    fn suite(&self) -> &CryptoSuite {
        &self.env.local.crypto
    }

    fn gsuite(&self) -> &CryptoSuite {
        &self.env.global.crypto
    }

    fn hash_len(&self) -> usize {
        self.env.local.cfg.hash_len
    }

    pub fn leader(&self) -> usize {
        leader_of(
            self.env.seed,
            self.epoch,
            self.c(),
            self.env.size(),
            self.round,
        )
    }

    fn am_leader(&self) -> bool {
        self.leader() == self.me().idx()
    }

    fn routing(&self) -> Target {
        Target::Global(Routing {
            src_cluster: self.c() as u8,
            dst_cluster: BROADCAST,
            seq: self.round,
        })
    }

    fn global_out(&self) -> Out {
        Out {
            items: Vec::new(),
            target: self.routing(),
        }
    }

    fn share_set(&self) -> NodeSet {
        let mut s = NodeSet::default();
        for k in self.att_shares.keys() {
            s.insert(k.idx());
        }
        s
    }

    fn submitted_set(&self) -> NodeSet {
        let mut s = NodeSet::default();
        for k in self.submissions.keys() {
            s.insert(*k);
        }
        s
    }

    fn check_attestation(&self, cluster: usize, digest: &Hash, sig: &[u8]) -> bool {
        self.env
            .suites
            .get(cluster)
            .is_some_and(|s| s.tsig_verify(&attest_tag(self.epoch, cluster, digest), sig))
    }

    fn share_body(&self) -> Option<Body> {
        let d = self.digest?;
        let sig = self.att_shares.get(&self.me())?.clone();
        Some(Body::Attest(AttestBody {
            cluster: self.c() as u8 | KIND_SHARE,
            digest: d,
            sig,
            nack: self.share_set(),
        }))
    }

    fn submission_body(&self, cluster: usize) -> Option<Body> {
        let (d, sig) = self.submissions.get(&cluster)?;
        Some(Body::Attest(AttestBody {
            cluster: cluster as u8,
            digest: *d,
            sig: sig.clone(),
            nack: self.submitted_set(),
        }))
    }

    fn vote_body(&self, round: u8) -> Option<Body> {
        let sig = match self.replaced.get(&round) {
            Some(cert) => cert.clone(),
            None => self.votes.get(&self.me())?.clone(),
        };
        let mut nack = NodeSet::default();
        for k in self.votes.keys() {
            nack.insert(k.idx());
        }
        Some(Body::Attest(AttestBody {
            cluster: KIND_REPLACE | round,
            digest: Hash::zero(self.hash_len()),
            sig,
            nack,
        }))
    }

    fn cert_body(&self) -> Option<Body> {
        let (s, d, sig) = self.cert.as_ref()?;
        Some(Body::GlobalDone(GlobalDoneBody {
            attempt: self.round,
            digest: *d,
            included: *s,
            sig: Some(sig.clone()),
        }))
    }

    fn add_att_share(&mut self, from: NodeId, digest: Hash, sig: &[u8]) -> bool {
        let Some(d) = self.digest else {
            self.att_early.entry(from).or_insert((digest, sig.to_vec()));
            return false;
        };
        if digest != d || self.att_shares.contains_key(&from) || self.att_sig.is_some() {
            return false;
        }
        let share = Share {
            signer: from,
            bytes: sig.to_vec(),
        };
        let tag = attest_tag(self.epoch, self.c(), &d);
        if !self.suite().tsig_verify_share(&tag, &share) {
            return false;
        }
        self.att_shares.insert(from, share.bytes);
        if self.att_shares.len() >= 2 * self.env.local.cfg.f + 1 {
            let shares: Vec<Share> = self
                .att_shares
                .iter()
                .map(|(s, b)| Share {
                    signer: *s,
                    bytes: b.clone(),
                })
                .collect();
            if let Ok(sig) = self.suite().tsig_combine(&tag, &shares) {
                self.submissions.insert(self.c(), (d, sig.clone()));
                self.att_sig = Some(sig);
            }
        }
        true
    }

    fn vote(&mut self, out: &mut Out) {
        if self.voted {
            return;
        }
        self.voted = true;
        let share = self
            .suite()
            .tsig_share(self.me(), &replace_tag(self.epoch, self.c(), self.round));
        let me = self.me();
        self.add_vote(me, &share.bytes, out);
        if let Some(b) = self.vote_body(self.round) {
            out.send(b);
        }
    }

    fn add_vote(&mut self, from: NodeId, sig: &[u8], out: &mut Out) -> bool {
        let tag = replace_tag(self.epoch, self.c(), self.round);
        if self.suite().tsig_verify(&tag, sig) {
            self.advance(sig.to_vec(), out);
            return true;
        }
        let share = Share {
            signer: from,
            bytes: sig.to_vec(),
        };
        if self.votes.contains_key(&from) || !self.suite().tsig_verify_share(&tag, &share) {
            return false;
        }
        self.votes.insert(from, share.bytes);
        if self.votes.len() >= 2 * self.env.local.cfg.f + 1 {
            let shares: Vec<Share> = self
                .votes
                .iter()
                .map(|(s, b)| Share {
                    signer: *s,
                    bytes: b.clone(),
                })
                .collect();
            if let Ok(cert) = self.suite().tsig_combine(&tag, &shares) {
                self.advance(cert, out);
            }
        }
        true
    }

    /// Installs the next leader once a replacement certificate is known.
    fn advance(&mut self, cert: Vec<u8>, out: &mut Out) {
        let r = self.round;
        self.replaced.insert(r, cert);
        if let Some(b) = self.vote_body(r) {
            out.send(b);
        }
        self.round = r + 1;
        self.votes.clear();
        self.voted = false;
        self.leader_ok = false;
        self.waiting = 0;
        self.global = None;
        self.global_started = false;
        self.global_wait = 0;
        self.my_done = None;
    }

    fn lead(&mut self, now: Tick, out: &mut Out) {
        if !self.am_leader() || self.global.is_some() || self.output.is_some() {
            return;
        }
        let (Some(d), Some(sig)) = (self.digest, self.att_sig.clone()) else {
            return;
        };
        let mut env = self.env.global.clone();
        env.payload = Some([d.as_bytes(), &sig].concat());
        self.global = Some(self.env.protocol.machine(&env, self.epoch));
        self.leader_ok = true;
        let mut g = self.global_out();
        if let Some(b) = self.submission_body(self.c()) {
            g.send(b);
        }
        self.maybe_start_global(now, &mut g);
        out.items.append(&mut g.items);
    }

    fn maybe_start_global(&mut self, now: Tick, g: &mut Out) {
        let m = self.env.n_clusters();
        let enough = self.submissions.len() == m || self.global_wait >= GLOBAL_WAIT;
        if self.global_started || !enough {
            return;
        }
        if let Some(gm) = &mut self.global {
            self.global_started = true;
            gm.start(now, g);
        }
    }

    fn progress(&mut self, now: Tick, out: &mut Out) {
        if self.digest.is_none() {
            if let Some(o) = self.local.output() {
                let d = Hash::from_slice(&o.digest().as_bytes()[..self.hash_len()]);
                self.digest = Some(d);
                let share = self
                    .suite()
                    .tsig_share(self.me(), &attest_tag(self.epoch, self.c(), &d));
                let me = self.me();
                self.add_att_share(me, d, &share.bytes);
                for (s, (h, sig)) in std::mem::take(&mut self.att_early) {
                    self.add_att_share(s, h, &sig);
                }
                if let Some(b) = self.share_body() {
                    out.send(b);
                }
            }
        }
        self.lead(now, out);
        let mut g = self.global_out();
        self.maybe_start_global(now, &mut g);
        if self.my_done.is_none() {
            if let Some(o) = self.global.as_ref().and_then(|gm| gm.output()).cloned() {
                self.global_done(&o, &mut g);
            }
        }
        out.items.append(&mut g.items);
        self.finish();
    }

    /// Signs the certified form of the leaders' agreed output.
    fn global_done(&mut self, o: &EpochOutput, g: &mut Out) {
        let hl = self.hash_len();
        let mut included = NodeSet::default();
        let mut digests = Vec::new();
        for (slot, bytes) in &o.included {
            let c = slot.idx();
            if bytes.len() <= hl {
                continue;
            }
            let d = Hash::from_slice(&bytes[..hl]);
            if self.check_attestation(c, &d, &bytes[hl..]) {
                self.submissions
                    .entry(c)
                    .or_insert((d, bytes[hl..].to_vec()));
                included.insert(c);
                digests.push((NodeId(c as u8), d.as_bytes().to_vec()));
            }
        }
        let d = Hash::from_slice(
            &EpochOutput {
                epoch: self.epoch,
                included: digests,
            }
            .digest()
            .as_bytes()[..hl],
        );
        let slot = self.env.global.me;
        let share = self
            .gsuite()
            .tsig_share(slot, &done_tag(self.epoch, included, &d));
        self.add_done_share(slot, included, d, &share.bytes);
        let body = GlobalDoneBody {
            attempt: self.round,
            digest: d,
            included,
            sig: Some(share.bytes),
        };
        g.send(Body::GlobalDone(body.clone()));
        self.my_done = Some(body);
    }

    fn add_done_share(&mut self, from: NodeId, included: NodeSet, d: Hash, sig: &[u8]) -> bool {
        if self.cert.is_some() {
            return false;
        }
        let tag = done_tag(self.epoch, included, &d);
        if self.gsuite().tsig_verify(&tag, sig) {
            self.cert = Some((included, d, sig.to_vec()));
            return true;
        }
        let share = Share {
            signer: from,
            bytes: sig.to_vec(),
        };
        let set = self.done_shares.entry((included.0, d)).or_default();
        if set.contains_key(&from) || !self.env.global.crypto.tsig_verify_share(&tag, &share) {
            return false;
        }
        set.insert(from, share.bytes);
        if set.len() >= 2 * self.env.global.cfg.f + 1 {
            let shares: Vec<Share> = set
                .iter()
                .map(|(s, b)| Share {
                    signer: *s,
                    bytes: b.clone(),
                })
                .collect();
            if let Ok(cert) = self.gsuite().tsig_combine(&tag, &shares) {
                self.cert = Some((included, d, cert));
            }
        }
        true
    }

    fn finish(&mut self) {
        if self.output.is_some() {
            return;
        }
        let Some((set, d, _)) = &self.cert else {
            return;
        };
        let mut included = Vec::new();
        for c in set.iter() {
            let Some((h, _)) = self.submissions.get(&c) else {
                return;
            };
            included.push((NodeId(c as u8), h.as_bytes().to_vec()));
        }
        let o = EpochOutput {
            epoch: self.epoch,
            included,
        };
        if Hash::from_slice(&o.digest().as_bytes()[..self.hash_len()]) == *d {
            self.output = Some(o);
        }
    }

    fn on_global_attest(&mut self, h: &Header, b: &AttestBody, now: Tick, out: &mut Out) -> bool {
        let c = b.cluster as usize;
        if b.cluster & KIND_MASK != KIND_SHARE || c >= self.env.n_clusters() || h.sender.idx() != c
        {
            return false;
        }
        let valid = self.check_attestation(c, &b.digest, &b.sig);
        let own_round = h.routing.is_some_and(|r| r.seq == self.round);
        if c == self.c() && own_round && !self.am_leader() && self.output.is_none() {
            if valid {
                self.leader_ok = true;
            } else {
                self.vote(out);
            }
        }
        let mut changed = false;
        if valid && !self.submissions.contains_key(&c) {
            self.submissions.insert(c, (b.digest, b.sig.clone()));
            changed = true;
        }
        if h.retx
            && self.global.is_some()
            && !b.nack.contains(self.c())
            && self.limiter.allow(1 << 20, now, self.retx_gap())
        {
            let mut g = self.global_out();
            if let Some(body) = self.submission_body(self.c()) {
                g.send(body);
            }
            out.items.append(&mut g.items);
        }
        changed
    }

    fn retx_gap(&self) -> Tick {
        self.env.local.cfg.retx_interval / 2
    }

    fn on_global_done(&mut self, h: &Header, b: &GlobalDoneBody, now: Tick, out: &mut Out) -> bool {
        let Some(sig) = &b.sig else { return false };
        let changed = self.add_done_share(h.sender, b.included, b.digest, sig);
        let was_cert = self.cert.as_ref().is_some_and(|c| &c.2 == sig);
        if h.retx
            && !was_cert
            && self.global.is_some()
            && self.limiter.allow(2 << 20, now, self.retx_gap())
        {
            let mut g = self.global_out();
            if let Some(body) = self.cert_body() {
                g.send(body);
            } else if let Some(mine) = &self.my_done {
                g.send(Body::GlobalDone(mine.clone()));
            }
            out.items.append(&mut g.items);
        }
        changed
    }

    fn on_local_attest(&mut self, h: &Header, b: &AttestBody, now: Tick, out: &mut Out) -> bool {
        let low = (b.cluster & !KIND_MASK) as usize;
        match b.cluster & KIND_MASK {
            KIND_SHARE if low == self.c() => {
                let changed = self.add_att_share(h.sender, b.digest, &b.sig);
                let mine = self.att_shares.contains_key(&self.me());
                if h.retx
                    && mine
                    && !b.nack.contains(self.me().idx())
                    && self.limiter.allow(3 << 20, now, self.retx_gap())
                {
                    if let Some(body) = self.share_body() {
                        out.send(body);
                    }
                }
                changed
            }
            KIND_RELAY if low < self.env.n_clusters() => {
                if self.submissions.contains_key(&low)
                    || !self.check_attestation(low, &b.digest, &b.sig)
                {
                    return false;
                }
                self.submissions.insert(low, (b.digest, b.sig.clone()));
                true
            }
            KIND_REPLACE => {
                let r = low as u8;
                if r < self.round {
                    if h.retx && self.limiter.allow(4 << 20 | r as u64, now, self.retx_gap()) {
                        if let Some(body) = self.vote_body(r) {
                            out.send(body);
                        }
                    }
                    return false;
                }
                if r > self.round {
                    return false;
                }
                let changed = self.add_vote(h.sender, &b.sig, out);
                if h.retx
                    && self.voted
                    && !b.nack.contains(self.me().idx())
                    && self.limiter.allow(5 << 20, now, self.retx_gap())
                {
                    if let Some(body) = self.vote_body(self.round) {
                        out.send(body);
                    }
                }
                changed
            }
            _ => false,
        }
    }

    fn on_local_done(&mut self, h: &Header, b: &GlobalDoneBody, now: Tick, out: &mut Out) -> bool {
        if b.attempt == REQUEST {
            let Some((set, _, _)) = self.cert else {
                return false;
            };
            if self
                .limiter
                .allow(6 << 20 | h.sender.0 as u64, now, self.retx_gap())
            {
                if let Some(body) = self.cert_body() {
                    out.send(body);
                }
                for c in set.iter().filter(|c| !b.included.contains(*c)) {
                    if let Some((d, sig)) = self.submissions.get(&c) {
                        out.send(Body::Attest(AttestBody {
                            cluster: KIND_RELAY | c as u8,
                            digest: *d,
                            sig: sig.clone(),
                            nack: NodeSet::default(),
                        }));
                    }
                }
            }
            return false;
        }
        match &b.sig {
            Some(sig) => self.add_done_share(h.sender, b.included, b.digest, sig),
            None => false,
        }
    }
}

impl EpochMachine for MultiHopMachine {
    fn start(&mut self, now: Tick, out: &mut Out) {
        self.local.start(now, out);
        self.progress(now, out);
    }

    fn on_message(&mut self, h: &Header, body: &Body, now: Tick, out: &mut Out) -> bool {
        let changed = match (h.routing.is_some(), body) {
            (true, Body::Attest(b)) => self.on_global_attest(h, b, now, out),
            (true, Body::GlobalDone(b)) => self.on_global_done(h, b, now, out),
            (true, _) => {
                let mut g = self.global_out();
                let changed = match &mut self.global {
                    Some(gm) => gm.on_message(h, body, now, &mut g),
                    None => false,
                };
                out.items.append(&mut g.items);
                changed
            }
            (false, Body::Attest(b)) => self.on_local_attest(h, b, now, out),
            (false, Body::GlobalDone(b)) => self.on_local_done(h, b, now, out),
            (false, _) => self.local.on_message(h, body, now, out),
        };
        let had = self.output.is_some();
        self.progress(now, out);
        changed || had != self.output.is_some()
    }

    fn has_pending(&self) -> bool {
        self.local.has_pending() || self.global.as_ref().is_some_and(|g| g.has_pending())
    }

    fn poll(&mut self, force: bool, now: Tick, out: &mut Out) {
        self.local.poll(force, now, out);
        let mut g = self.global_out();
        if let Some(gm) = &mut self.global {
            if gm.has_pending() {
                gm.poll(force, now, &mut g);
            }
        }
        out.items.append(&mut g.items);
    }

    fn on_stall(&mut self, now: Tick, out: &mut Out) {
        if self.local.output().is_none() {
            self.local.on_stall(now, out);
        }
        if self.digest.is_some() && self.att_sig.is_none() {
            if let Some(b) = self.share_body() {
                out.resend(b);
            }
        }
        if self.output.is_none() && self.att_sig.is_some() && !self.am_leader() && !self.leader_ok {
            self.waiting += 1;
            if self.waiting >= SUBMIT_PATIENCE {
                self.vote(out);
            }
        }
        if self.voted && self.output.is_none() {
            if let Some(b) = self.vote_body(self.round) {
                out.resend(b);
            }
        }
        let mut g = self.global_out();
        if self.global.is_some() && self.cert.is_none() {
            self.global_wait += 1;
            self.maybe_start_global(now, &mut g);
            if self.submissions.len() < self.env.n_clusters() {
                if let Some(b) = self.submission_body(self.c()) {
                    g.resend(b);
                }
            }
            if let Some(gm) = &mut self.global {
                if self.global_started && gm.output().is_none() {
                    gm.on_stall(now, &mut g);
                }
            }
            if let Some(mine) = &self.my_done {
                g.resend(Body::GlobalDone(mine.clone()));
            }
        }
        out.items.append(&mut g.items);
        if self.output.is_none() && self.local.output().is_some() {
            out.resend(Body::GlobalDone(GlobalDoneBody {
                attempt: REQUEST,
                digest: Hash::zero(self.hash_len()),
                included: self.submitted_set(),
                sig: None,
            }));
        }
        self.progress(now, out);
    }

    fn output(&self) -> Option<&EpochOutput> {
        self.output.as_ref()
    }

    fn stats(&self) -> MachineStats {
        let mut s = self.local.stats();
        s.reattempts = self.round as u64;
        s
    }

    fn describe(&self) -> String {
        format!(
            "cluster {} round {} leader {} digest {} att {} subs {:?} global {} started {} cert {} output {}\nlocal: {}\nglobal: {}",
            self.c(),
            self.round,
            self.leader(),
            self.digest.is_some(),
            self.att_sig.is_some(),
            self.submissions.keys().collect::<Vec<_>>(),
            self.global.is_some(),
            self.global_started,
            self.cert.is_some(),
            self.output.is_some(),
            self.local.describe(),
            self.global.as_ref().map(|g| g.describe()).unwrap_or_default()
        )
    }
}

/// Configuration of one cluster of `n` nodes sharing `base`'s timing and sizes.
pub fn cluster_cfg(
    base: &SystemConfig,
    n: usize,
    d_align: usize,
) -> Result<SystemConfig, ConfigError> {
    let cfg = SystemConfig {
        n_nodes: n,
        f: fault_threshold(n)?,
        d_align,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `setup` over clusters of the given sizes. Node ids are global and
/// assigned cluster by cluster; `setup.cfg.n_nodes` is ignored.
pub fn run_multihop(setup: &RunSetup, sizes: &[usize]) -> Result<RunResult, ConfigError> {
    let m = sizes.len();
    let invalid = |reason: String| ConfigError::Invalid {
        name: "clusters",
        reason,
    };
    fault_threshold(m).map_err(|e| invalid(format!("{m} clusters: {e}")))?;
    let total: usize = sizes.iter().sum();
    fault_threshold(total)?;
    if sizes.iter().any(|&s| s < m) {
        return Err(invalid(
            "every cluster needs at least as many nodes as there are clusters".into(),
        ));
    }
    let mut d_align = 128;
    for &n in sizes.iter().chain([m].iter()) {
        let c = SystemConfig {
            n_nodes: n,
            f: fault_threshold(n)?,
            ..setup.cfg.clone()
        };
        d_align = d_align.max(c.min_d_align());
    }
    d_align = d_align.max(setup.cfg.d_align);
    let gcfg = cluster_cfg(&setup.cfg, m, d_align)?;
    let sizes_of = Sizes::of(&setup.cfg);
    let suite = |n: usize, f: usize, salt: u64| {
        CryptoSuite::new(
            n,
            f,
            sizes_of,
            setup.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )
        .map(Arc::new)
        .map_err(|e| ConfigError::Invalid {
            name: "crypto",
            reason: e.to_string(),
        })
    };
    let mut cfgs = Vec::new();
    let mut suites = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        let cfg = cluster_cfg(&setup.cfg, n, d_align)?;
        suites.push(suite(n, cfg.f, c as u64 + 1)?);
        cfgs.push(cfg);
    }
    let gsuite = suite(m, gcfg.f, 0)?;
    let mut starts = Vec::new();
    let mut acc = 0;
    for &n in sizes {
        starts.push(acc);
        acc += n;
    }
    for (id, _) in &setup.byzantine {
        if id.idx() >= total {
            return Err(ConfigError::Invalid {
                name: "byzantine",
                reason: format!("node {} out of range", id.0),
            });
        }
    }
    for (c, &n) in sizes.iter().enumerate() {
        let bad = setup
            .byzantine
            .iter()
            .filter(|(id, _)| (starts[c]..starts[c] + n).contains(&id.idx()))
            .count();
        if bad > cfgs[c].f {
            return Err(ConfigError::Invalid {
                name: "byzantine",
                reason: format!("{bad} faulty nodes in cluster {c} exceed f = {}", cfgs[c].f),
            });
        }
    }
    let topology = Topology::clustered(sizes);
    let global_channel = topology
        .global
        .expect("clustered topology has a global channel");
    let mut hosts = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for li in 0..n {
            let abs = NodeId((starts[c] + li) as u8);
            let me = NodeId(li as u8);
            let local = NodeEnv {
                me,
                cfg: cfgs[c].clone(),
                mode: setup.mode,
                crypto: suites[c].clone(),
                proposal_bytes: setup.proposal_bytes,
                seed: setup.seed ^ (c as u64 + 1) << 32,
                encrypt: setup.encrypt,
                payload: None,
            };
            let global = NodeEnv {
                me: NodeId(c as u8),
                cfg: gcfg.clone(),
                crypto: gsuite.clone(),
                seed: setup.seed,
                ..local.clone()
            };
            let env = ClusterEnv {
                protocol: setup.protocol.clone(),
                cluster: c,
                local,
                global,
                suites: suites.clone(),
                seed: setup.seed,
            };
            let factory: MachineFactory =
                Arc::new(move |e| Box::new(MultiHopMachine::new(env.clone(), e)));
            let wiring = Wiring {
                local: topology.clusters[c],
                local_layout: cfgs[c].layout(),
                global: Some(GlobalLink {
                    channel: global_channel,
                    layout: gcfg.layout(),
                    slot: NodeId(c as u8),
                    suite: gsuite.clone(),
                }),
            };
            let adversary = setup
                .byzantine
                .iter()
                .find(|(b, _)| *b == abs)
                .map(|(_, beh)| {
                    Adversary::new(*beh, me, setup.seed ^ abs.0 as u64, cfgs[c].retx_interval)
                });
            hosts.push(ProtocolHost::new(
                me,
                cfgs[c].clone(),
                suites[c].clone(),
                wiring,
                setup.epochs,
                factory,
                adversary,
            ));
        }
    }
    Ok(drive(
        topology,
        sim_params(&cfgs[0], setup.seed),
        setup.policy,
        hosts,
        setup.max_ticks,
    ))
}
