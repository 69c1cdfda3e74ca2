//! Bracha's binary agreement with a local coin. Every phase value is sent by
//! a binary reliable broadcast, and a delivered value is accepted only once
//! N-f accepted values of the previous step could have produced it.

use std::collections::BTreeMap;

use super::Aba;
use crate::components::{baseline, family, peer_bits, peer_set, Ctx, Limiter, Out};
use crate::packets::{AbaLcBody, Body, SmallBlock};
use crate::types::{hash_parts, NodeId, NodeSet, Tick, Vote};

const NONE: u8 = 0;

fn code(v: Vote) -> u8 {
    match v {
        Vote::Zero => 1,
        Vote::One => 2,
        Vote::Bottom => 3,
    }
}

fn vote(c: u8) -> Option<Vote> {
    match c {
        1 => Some(Vote::Zero),
        2 => Some(Vote::One),
        3 => Some(Vote::Bottom),
        _ => None,
    }
}

#[derive(Clone, Debug)]
struct Sess {
    init: Vec<u8>,
    /// `[broadcaster * n + sender]`
    echo: Vec<u8>,
    ready: Vec<u8>,
    my_echo: Vec<u8>,
    my_ready: Vec<u8>,
    delivered: Vec<u8>,
    accepted: Vec<u8>,
    order: Vec<usize>,
}

impl Sess {
    fn new(n: usize) -> Sess {
        Sess {
            init: vec![NONE; n],
            echo: vec![NONE; n * n],
            ready: vec![NONE; n * n],
            my_echo: vec![NONE; n],
            my_ready: vec![NONE; n],
            delivered: vec![NONE; n],
            accepted: vec![NONE; n],
            order: Vec::new(),
        }
    }

    fn count(v: &[u8], n: usize, b: usize, c: u8) -> usize {
        v[b * n..(b + 1) * n].iter().filter(|&&x| x == c).count()
    }

    /// Accepted value counts indexed by code.
    fn accepted_counts(&self) -> [usize; 4] {
        let mut m = [0; 4];
        for &c in &self.accepted {
            m[c as usize] += 1;
        }
        m
    }

    fn first(&self, m: usize) -> [usize; 4] {
        let mut cnt = [0; 4];
        for &b in self.order.iter().take(m) {
            cnt[self.accepted[b] as usize] += 1;
        }
        cnt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum St {
    Active,
    Done,
}

pub struct LcBatch {
    c: Ctx,
    base: u8,
    k: usize,
    round_cap: u8,
    started: bool,
    round: u8,
    est: Vec<Vote>,
    st: Vec<St>,
    complete: Vec<bool>,
    decided: Vec<Option<(bool, u8)>>,
    rounds: BTreeMap<u8, Vec<[Sess; 3]>>,
    /// Round -> bit `phase * 3 + kind` for unsent changes.
    pending: BTreeMap<u8, u16>,
    queue: Vec<Body>,
    limiter: Limiter,
}

impl LcBatch {
    pub fn new(c: Ctx, base: u8, k: usize, round_cap: u8) -> LcBatch {
        LcBatch {
            c,
            base,
            k,
            round_cap,
            started: false,
            round: 1,
            est: vec![Vote::Zero; k],
            st: vec![St::Active; k],
            complete: vec![false; k],
            decided: vec![None; k],
            rounds: BTreeMap::new(),
            pending: BTreeMap::new(),
            queue: Vec::new(),
            limiter: Limiter::default(),
        }
    }

    fn n(&self) -> usize {
        self.c.n
    }

    fn round_mut(&mut self, r: u8) -> &mut Vec<[Sess; 3]> {
        let n = self.c.n;
        let k = self.k;
        self.rounds.entry(r).or_insert_with(|| {
            (0..k)
                .map(|_| [Sess::new(n), Sess::new(n), Sess::new(n)])
                .collect()
        })
    }

    fn relevant(&self, r: u8, i: usize) -> bool {
        r >= 1 && r <= self.round_cap && self.decided[i].is_none_or(|(_, d)| r <= d + 1)
    }

    fn mark(&mut self, r: u8, i: usize, p: usize, kind: usize, b: usize, c: u8) {
        if self.c.batched() {
            *self.pending.entry(r).or_insert(0) |= 1 << (p * 3 + kind);
        } else {
            let inst = self.base.wrapping_add(i as u8);
            self.queue.push(baseline(
                family::ABA_LC,
                (p * 3 + kind) as u8,
                r,
                inst,
                b as u8,
                vec![c],
                0,
            ));
        }
    }

    fn set_own(&mut self, r: u8, i: usize, p: usize, v: Vote) {
        let me = self.c.me.idx();
        let s = &mut self.round_mut(r)[i][p];
        if s.init[me] != NONE {
            return;
        }
        s.init[me] = code(v);
        self.mark(r, i, p, 0, me, code(v));
    }

    fn justified(&self, r: u8, i: usize, p: usize, c: u8) -> bool {
        let n = self.n();
        let f = self.c.f;
        let m = n - f;
        let prev = match p {
            0 if r == 1 => return c == 1 || c == 2,
            0 => self.rounds.get(&(r - 1)).map(|x| x[i][2].accepted_counts()),
            _ => self.rounds.get(&r).map(|x| x[i][p - 1].accepted_counts()),
        };
        let Some(cnt) = prev else { return false };
        if p < 2 && c == 3 {
            return false;
        }
        for s0 in 0..=cnt[1].min(m) {
            for s1 in 0..=cnt[2].min(m - s0) {
                let sb = m - s0 - s1;
                if sb > cnt[3] {
                    continue;
                }
                let ok = match p {
                    0 => {
                        let forced0 = s0 > f;
                        let forced1 = s1 > f;
                        (!forced0 && !forced1) || (c == 1 && forced0) || (c == 2 && forced1)
                    }
                    1 => (if s1 > s0 { 2 } else { 1 }) == c,
                    _ => match c {
                        1 => 2 * s0 > n,
                        2 => 2 * s1 > n,
                        _ => 2 * s0 <= n && 2 * s1 <= n,
                    },
                };
                if ok {
                    return true;
                }
            }
        }
        false
    }

    /// Runs echo, ready, delivery and acceptance rules of one session.
    fn update(&mut self, r: u8, i: usize, p: usize) -> bool {
        let n = self.n();
        let me = self.c.me.idx();
        let q = self.c.quorum();
        let f = self.c.f;
        let relevant = self.relevant(r, i);
        let mut changed = false;
        let mut marks = Vec::new();
        let mut accept_candidates = Vec::new();
        {
            let s = &mut self.rounds.get_mut(&r).expect("round exists")[i][p];
            for b in 0..n {
                if relevant && s.my_echo[b] == NONE && s.init[b] != NONE {
                    let c = s.init[b];
                    s.my_echo[b] = c;
                    s.echo[b * n + me] = c;
                    if b != me || !self.c.batched() {
                        marks.push((1, b, c));
                    }
                    changed = true;
                }
                if relevant && s.my_ready[b] == NONE {
                    if let Some(c) = (1..=3u8).find(|&c| {
                        Sess::count(&s.echo, n, b, c) >= q || Sess::count(&s.ready, n, b, c) > f
                    }) {
                        s.my_ready[b] = c;
                        s.ready[b * n + me] = c;
                        marks.push((2, b, c));
                        changed = true;
                    }
                }
                if s.delivered[b] == NONE {
                    if let Some(c) = (1..=3u8).find(|&c| Sess::count(&s.ready, n, b, c) >= q) {
                        s.delivered[b] = c;
                        changed = true;
                    }
                }
                if s.accepted[b] == NONE && s.delivered[b] != NONE {
                    accept_candidates.push(b);
                }
            }
        }
        for (kind, b, c) in marks {
            self.mark(r, i, p, kind, b, c);
        }
        for b in accept_candidates {
            let c = self.rounds[&r][i][p].delivered[b];
            if self.justified(r, i, p, c) {
                let s = &mut self.rounds.get_mut(&r).expect("round exists")[i][p];
                s.accepted[b] = c;
                s.order.push(b);
                changed = true;
            }
        }
        changed
    }

    fn coin(&self, i: usize, r: u8) -> bool {
        let h = hash_parts(
            &[
                &self.c.prefix,
                b"LC",
                &[self.c.me.0, self.base.wrapping_add(i as u8), r],
            ],
            32,
        );
        h.as_bytes()[0] & 1 == 1
    }

    /// Own phase values of the current round.
    fn progress(&mut self) -> bool {
        let n = self.n();
        let f = self.c.f;
        let m = n - f;
        let me = self.c.me.idx();
        let r = self.round;
        let mut changed = false;
        for i in 0..self.k {
            if self.st[i] != St::Active || self.complete[i] {
                continue;
            }
            let Some(sessions) = self.rounds.get(&r) else {
                continue;
            };
            let s = &sessions[i];
            if s[1].init[me] == NONE {
                if s[0].order.len() >= m {
                    let cnt = s[0].first(m);
                    let v = if cnt[2] > cnt[1] {
                        Vote::One
                    } else {
                        Vote::Zero
                    };
                    self.set_own(r, i, 1, v);
                    changed = true;
                }
            } else if s[2].init[me] == NONE {
                if s[1].order.len() >= m {
                    let cnt = s[1].first(m);
                    let v = if 2 * cnt[1] > n {
                        Vote::Zero
                    } else if 2 * cnt[2] > n {
                        Vote::One
                    } else {
                        Vote::Bottom
                    };
                    self.set_own(r, i, 2, v);
                    changed = true;
                }
            } else if s[2].order.len() >= m {
                let cnt = s[2].first(m);
                let q = self.c.quorum();
                let w = if cnt[1] >= cnt[2] {
                    (false, cnt[1])
                } else {
                    (true, cnt[2])
                };
                if w.1 >= q {
                    self.decided[i] = Some((w.0, r));
                    self.est[i] = Vote::from_bool(w.0);
                } else if w.1 > f {
                    self.est[i] = Vote::from_bool(w.0);
                } else {
                    self.est[i] = Vote::from_bool(self.coin(i, r));
                }
                self.complete[i] = true;
                changed = true;
            }
        }
        if self.st.contains(&St::Active)
            && (0..self.k).all(|i| self.st[i] == St::Done || self.complete[i])
            && r < self.round_cap
        {
            let next = r + 1;
            for i in 0..self.k {
                if self.st[i] != St::Active {
                    continue;
                }
                match self.decided[i] {
                    Some((d, dr)) if dr == r => {
                        for p in 0..3 {
                            self.set_own(next, i, p, Vote::from_bool(d));
                        }
                        self.st[i] = St::Done;
                    }
                    _ => self.set_own(next, i, 0, self.est[i]),
                }
                self.complete[i] = false;
            }
            self.round = next;
            self.round_mut(next);
            changed = true;
        }
        changed
    }

    fn fixpoint(&mut self) {
        loop {
            let mut changed = false;
            let keys: Vec<u8> = self.rounds.keys().copied().collect();
            for r in keys {
                for i in 0..self.k {
                    for p in 0..3 {
                        changed |= self.update(r, i, p);
                    }
                }
            }
            if self.started {
                changed |= self.progress();
            }
            if !changed {
                break;
            }
        }
    }

    fn record(
        &mut self,
        r: u8,
        i: usize,
        p: usize,
        kind: usize,
        b: usize,
        s: usize,
        c: u8,
    ) -> bool {
        let n = self.n();
        if vote(c).is_none() || b >= n || !self.relevant(r, i) {
            return false;
        }
        let sess = &mut self.round_mut(r)[i][p];
        let slot = match kind {
            0 if b == s => &mut sess.init[b],
            1 => &mut sess.echo[b * n + s],
            2 => &mut sess.ready[b * n + s],
            _ => return false,
        };
        if *slot == NONE {
            *slot = c;
            true
        } else {
            false
        }
    }

    fn block(&self, r: u8, i: usize, p: usize) -> SmallBlock {
        let n = self.n();
        let mut blk = SmallBlock::empty(n);
        let Some(s) = self.rounds.get(&r).map(|x| &x[i][p]) else {
            return blk;
        };
        for b in 0..n {
            let e = s.my_echo[b];
            let rd = s.my_ready[b];
            if rd != NONE {
                blk.values[b] = vote(rd);
                blk.ready.insert(b);
                blk.echo_nack.insert(b);
                if e == rd {
                    blk.echo.insert(b);
                }
            } else if e != NONE {
                blk.values[b] = vote(e);
                blk.echo.insert(b);
            }
            if s.delivered[b] != NONE {
                blk.ready_nack.insert(b);
            }
        }
        blk
    }

    fn snapshot(&self, r: u8) -> Body {
        Body::AbaLc(AbaLcBody {
            round: r,
            base: self.base,
            blocks: (0..self.k)
                .map(|i| {
                    [
                        self.block(r, i, 0),
                        self.block(r, i, 1),
                        self.block(r, i, 2),
                    ]
                })
                .collect(),
        })
    }

    fn settled(&self, r: u8, mask: u16) -> bool {
        let me = self.c.me.idx();
        let Some(sessions) = self.rounds.get(&r) else {
            return true;
        };
        for (i, s) in sessions.iter().enumerate() {
            if s[0].init[me] == NONE || !self.relevant(r, i) {
                continue;
            }
            for p in 0..3 {
                for kind in 0..3 {
                    if mask & 1 << (p * 3 + kind) == 0 {
                        continue;
                    }
                    let ok = match kind {
                        0 => s[p].init[me] != NONE,
                        1 => s[p].my_echo.iter().all(|&x| x != NONE),
                        _ => s[p].my_ready.iter().all(|&x| x != NONE),
                    };
                    if !ok {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Broadcasters whose value this node delivered in one session, as packet `nack` bits.
    fn delivered_bits(&self, r: u8, i: usize, p: usize) -> u64 {
        let Some(s) = self.rounds.get(&r).map(|x| &x[i][p]) else {
            return 0;
        };
        let mut set = NodeSet::default();
        for b in (0..self.n()).filter(|&b| s.delivered[b] != NONE) {
            set.insert(b);
        }
        peer_bits(self.c.me, set)
    }

    /// Own messages of one session about broadcasters not in `skip`.
    fn own_messages(&self, r: u8, i: usize, p: usize, skip: NodeSet) -> Vec<Body> {
        let me = self.c.me.idx();
        let inst = self.base.wrapping_add(i as u8);
        let mut v = Vec::new();
        let Some(s) = self.rounds.get(&r).map(|x| &x[i][p]) else {
            return v;
        };
        let nack = self.delivered_bits(r, i, p);
        if s.init[me] != NONE && !skip.contains(me) {
            v.push(baseline(
                family::ABA_LC,
                (p * 3) as u8,
                r,
                inst,
                me as u8,
                vec![s.init[me]],
                nack,
            ));
        }
        for b in (0..self.n()).filter(|&b| !skip.contains(b)) {
            if s.my_echo[b] != NONE {
                v.push(baseline(
                    family::ABA_LC,
                    (p * 3 + 1) as u8,
                    r,
                    inst,
                    b as u8,
                    vec![s.my_echo[b]],
                    nack,
                ));
            }
            if s.my_ready[b] != NONE {
                v.push(baseline(
                    family::ABA_LC,
                    (p * 3 + 2) as u8,
                    r,
                    inst,
                    b as u8,
                    vec![s.my_ready[b]],
                    nack,
                ));
            }
        }
        v
    }

    fn helpful(&self, r: u8, i: usize, p: usize, peer_delivered: NodeSet) -> bool {
        let Some(s) = self.rounds.get(&r).map(|x| &x[i][p]) else {
            return false;
        };
        (0..self.n())
            .any(|b| !peer_delivered.contains(b) && (s.my_ready[b] != NONE || s.my_echo[b] != NONE))
    }
}

impl Aba for LcBatch {
    fn start(&mut self, inputs: &[bool], _now: Tick, out: &mut Out) {
        if self.started {
            return;
        }
        self.started = true;
        for i in 0..self.k {
            self.est[i] = Vote::from_bool(inputs.get(i).copied().unwrap_or(false));
            self.set_own(1, i, 0, self.est[i]);
        }
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
        let n = self.n();
        let s = sender.idx();
        if s >= n {
            return false;
        }
        let mut changed = false;
        match body {
            Body::AbaLc(b) if b.base == self.base && b.blocks.len() == self.k => {
                let r = b.round;
                if r == 0 || r > self.round_cap {
                    return false;
                }
                for (i, blocks) in b.blocks.iter().enumerate() {
                    for (p, blk) in blocks.iter().enumerate() {
                        if blk.values.len() != n {
                            continue;
                        }
                        for (bc, v) in blk.values.iter().enumerate() {
                            let Some(v) = v else { continue };
                            let c = code(*v);
                            if p < 2 && c == 3 {
                                continue;
                            }
                            changed |= self.record(r, i, p, 0, bc, s, c);
                            if blk.echo.contains(bc) {
                                changed |= self.record(r, i, p, 1, bc, s, c);
                            }
                            if blk.ready.contains(bc) {
                                changed |= self.record(r, i, p, 2, bc, s, c);
                            }
                        }
                    }
                }
                self.fixpoint();
                if retx && self.started {
                    let helpful = (0..self.k)
                        .any(|i| (0..3).any(|p| self.helpful(r, i, p, b.blocks[i][p].ready_nack)));
                    if helpful && self.limiter.allow(r as u64, now, self.c.retx_interval / 2) {
                        out.send(self.snapshot(r));
                    }
                }
            }
            Body::Baseline(b) if b.family == family::ABA_LC => {
                let i = b.instance.wrapping_sub(self.base) as usize;
                if i >= self.k || b.phase >= 9 || b.value.len() != 1 || b.round == 0 {
                    return false;
                }
                let p = (b.phase / 3) as usize;
                let kind = (b.phase % 3) as usize;
                let c = b.value[0];
                if p < 2 && c == 3 {
                    return false;
                }
                changed |= self.record(b.round, i, p, kind, b.sub as usize, s, c);
                self.fixpoint();
                let key = 1 << 32 | (b.round as u64) << 16 | (i as u64) << 2 | p as u64;
                if retx
                    && self.started
                    && self.helpful(b.round, i, p, peer_set(sender, b.nack, n))
                    && self.limiter.allow(key, now, self.c.retx_interval / 2)
                {
                    for m in self.own_messages(b.round, i, p, peer_set(sender, b.nack, n)) {
                        out.send(m);
                    }
                }
            }
            _ => {}
        }
        changed
    }

    fn has_pending(&self) -> bool {
        !self.pending.is_empty() || !self.queue.is_empty()
    }

    fn poll(&mut self, force: bool, out: &mut Out) {
        if !self.started {
            return;
        }
        if !self.c.batched() {
            for b in self.queue.drain(..) {
                out.send(b);
            }
            return;
        }
        let ready: Vec<u8> = self
            .pending
            .iter()
            .filter(|(&r, &mask)| force || self.settled(r, mask))
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
        let r = self.round;
        if self.c.batched() {
            if r > 1 {
                out.resend(self.snapshot(r - 1));
            }
            out.resend(self.snapshot(r));
            return;
        }
        // One probe per session this node still waits on; peers answer from its nack bits.
        for i in (0..self.k).filter(|&i| self.st[i] == St::Active && !self.complete[i]) {
            for p in 0..3 {
                let Some(s) = self.rounds.get(&r).map(|x| &x[i][p]) else {
                    continue;
                };
                if s.delivered.iter().all(|&d| d != NONE) {
                    continue;
                }
                if let Some(probe) = self
                    .own_messages(r, i, p, NodeSet::default())
                    .into_iter()
                    .next()
                {
                    out.resend(probe);
                }
            }
        }
    }

    fn decided(&self, i: usize) -> Option<bool> {
        self.decided.get(i)?.map(|d| d.0)
    }

    fn describe(&self) -> String {
        let mut s = format!(
            "round {} st {:?} complete {:?} decided {:?}\n",
            self.round, self.st, self.complete, self.decided
        );
        for (r, sessions) in &self.rounds {
            for (i, x) in sessions.iter().enumerate() {
                for (p, ss) in x.iter().enumerate() {
                    s += &format!(
                        "  r{r} i{i} p{p} init {:?} deliv {:?} acc {:?} echo {:?} ready {:?}\n",
                        ss.init, ss.delivered, ss.accepted, ss.echo, ss.ready
                    );
                }
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
        Vec::new()
    }
}
