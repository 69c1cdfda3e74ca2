//! Discrete-event simulator of shared broadcast channels.
//!
//! Every transmission occupies its channel exclusively for
//! `ceil(len / bitrate)` ticks. Nodes with queued frames contend by drawing a
//! random backoff; the lowest draw wins, the rest wait for the next idle
//! period. Contention serializes transmissions and never corrupts them. Each
//! receiver independently loses a frame with the configured probability, and
//! the adversary may add per-receiver delay, which reorders deliveries.

mod trace;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{NodeId, Tick};
pub use trace::{TraceKind, TraceRecord};

pub type ChannelId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("frame of {len} bytes exceeds the {max}-byte limit")]
    Framing { len: usize, max: usize },
    #[error("{node} is not on channel {channel}")]
    NotMember { node: NodeId, channel: ChannelId },
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no route from cluster {from} to cluster {to}")]
pub struct RoutingError {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("stopped at tick {tick} after {events} events without meeting the stop condition")]
pub struct TimeoutReport {
    pub tick: Tick,
    pub events: u64,
}

/// Channel membership. `clusters` maps each cluster to its local channel;
/// `global` is the channel joining clusters, if any.
#[derive(Clone, Debug)]
pub struct Topology {
    pub n_nodes: usize,
    pub channels: Vec<Vec<NodeId>>,
    pub clusters: Vec<ChannelId>,
    pub global: Option<ChannelId>,
}

impl Topology {
    pub fn single(n: usize) -> Topology {
        Topology {
            n_nodes: n,
            channels: vec![(0..n as u8).map(NodeId).collect()],
            clusters: vec![0],
            global: None,
        }
    }

    /// One local channel per cluster plus a global channel heard by all nodes.
    pub fn clustered(sizes: &[usize]) -> Topology {
        let mut channels = Vec::new();
        let mut next = 0u8;
        for &s in sizes {
            channels.push((next..next + s as u8).map(NodeId).collect());
            next += s as u8;
        }
        channels.push((0..next).map(NodeId).collect());
        Topology {
            n_nodes: next as usize,
            clusters: (0..sizes.len()).collect(),
            global: Some(sizes.len()),
            channels,
        }
    }

    pub fn route(&self, from: usize, to: usize) -> Result<ChannelId, RoutingError> {
        if from >= self.clusters.len() || to >= self.clusters.len() {
            return Err(RoutingError { from, to });
        }
        if from == to {
            Ok(self.clusters[from])
        } else {
            self.global.ok_or(RoutingError { from, to })
        }
    }
}

/// Loss and delay injected by the environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversaryPolicy {
    /// Independent per-receiver loss probability.
    pub loss_rate: f64,
    /// Probability that a delivery gets extra delay.
    pub delay_prob: f64,
    /// Extra delay is uniform in `1..=max_extra_delay`.
    pub max_extra_delay: Tick,
}

impl Default for AdversaryPolicy {
    fn default() -> Self {
        AdversaryPolicy {
            loss_rate: 0.0,
            delay_prob: 0.0,
            max_extra_delay: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SimParams {
    pub bitrate: usize,
    pub backoff_window: Tick,
    pub max_frame: usize,
    pub seed: u64,
    pub trace: bool,
}

impl SimParams {
    pub fn of(cfg: &crate::types::SystemConfig) -> SimParams {
        SimParams {
            bitrate: cfg.bitrate,
            backoff_window: cfg.backoff_window,
            max_frame: cfg.max_packet(),
            seed: cfg.rng_seed,
            trace: true,
        }
    }

    pub fn tx_time(&self, len: usize) -> Tick {
        len.div_ceil(self.bitrate).max(1) as Tick
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeMetrics {
    pub transmissions: u64,
    pub contention_attempts: u64,
    pub bytes_sent: u64,
    pub received: u64,
}

pub trait SimNode {
    fn on_start(&mut self, ctx: &mut NodeCtx<'_>);
    fn on_packet(&mut self, ctx: &mut NodeCtx<'_>, channel: ChannelId, bytes: &[u8]);
    fn on_timer(&mut self, ctx: &mut NodeCtx<'_>, token: u64);
}

impl<T: SimNode + ?Sized> SimNode for Box<T> {
    fn on_start(&mut self, ctx: &mut NodeCtx<'_>) {
        (**self).on_start(ctx)
    }
    fn on_packet(&mut self, ctx: &mut NodeCtx<'_>, channel: ChannelId, bytes: &[u8]) {
        (**self).on_packet(ctx, channel, bytes)
    }
    fn on_timer(&mut self, ctx: &mut NodeCtx<'_>, token: u64) {
        (**self).on_timer(ctx, token)
    }
}

#[derive(Default)]
struct ChannelState {
    queues: Vec<VecDeque<Arc<Vec<u8>>>>,
    member: Vec<bool>,
    /// Arbitration scheduled or transmission in progress.
    busy: bool,
    last_end: Tick,
}

/// What a node may see and do during one callback.
pub struct NodeCtx<'a> {
    pub now: Tick,
    pub me: NodeId,
    channels: &'a [ChannelState],
    max_frame: usize,
    out: Vec<(ChannelId, Vec<u8>)>,
    timers: Vec<(Tick, u64)>,
}

impl NodeCtx<'_> {
    pub fn broadcast(&mut self, channel: ChannelId, frame: Vec<u8>) -> Result<(), SimError> {
        let ch = self
            .channels
            .get(channel)
            .ok_or(SimError::UnknownChannel(channel))?;
        if !ch.member[self.me.idx()] {
            return Err(SimError::NotMember {
                node: self.me,
                channel,
            });
        }
        if frame.len() > self.max_frame {
            return Err(SimError::Framing {
                len: frame.len(),
                max: self.max_frame,
            });
        }
        self.out.push((channel, frame));
        Ok(())
    }

    pub fn set_timer(&mut self, at: Tick, token: u64) {
        self.timers.push((at.max(self.now), token));
    }

    /// Ticks since the channel was last heard busy; zero while busy.
    pub fn idle_for(&self, channel: ChannelId) -> Tick {
        match self.channels.get(channel) {
            Some(c) if !c.busy => self.now - c.last_end,
            _ => 0,
        }
    }

    /// Frames this node still has queued on `channel`, including ones
    /// broadcast during the current callback.
    pub fn queued(&self, channel: ChannelId) -> usize {
        let own = self.out.iter().filter(|(c, _)| *c == channel).count();
        self.channels
            .get(channel)
            .map_or(0, |c| c.queues[self.me.idx()].len())
            + own
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Start(u8),
    Arbitrate(ChannelId),
    TxStart(ChannelId, u8),
    TxEnd(ChannelId, u8),
    Deliver(u8, ChannelId, Arc<Vec<u8>>),
    Timer(u8, u64),
}

pub struct Simulator<N: SimNode> {
    pub topology: Topology,
    pub params: SimParams,
    pub policy: AdversaryPolicy,
    nodes: Vec<N>,
    channels: Vec<ChannelState>,
    events: BinaryHeap<Reverse<(Tick, u64, Event)>>,
    seq: u64,
    now: Tick,
    processed: u64,
    rng: ChaCha8Rng,
    pub metrics: Vec<NodeMetrics>,
    pub trace: Vec<TraceRecord>,
    in_flight: Vec<Option<Arc<Vec<u8>>>>,
}

impl<N: SimNode> Simulator<N> {
    pub fn new(
        topology: Topology,
        params: SimParams,
        policy: AdversaryPolicy,
        nodes: Vec<N>,
    ) -> Simulator<N> {
        assert_eq!(nodes.len(), topology.n_nodes, "one node per topology slot");
        let n = topology.n_nodes;
        let channels = topology
            .channels
            .iter()
            .map(|m| {
                let mut member = vec![false; n];
                for id in m {
                    member[id.idx()] = true;
                }
                ChannelState {
                    queues: vec![VecDeque::new(); n],
                    member,
                    busy: false,
                    last_end: 0,
                }
            })
            .collect::<Vec<_>>();
        let nch = channels.len();
        let mut sim = Simulator {
            topology,
            params,
            policy,
            nodes,
            channels,
            events: BinaryHeap::new(),
            seq: 0,
            now: 0,
            processed: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed ^ 0x51u64 << 56),
            metrics: vec![NodeMetrics::default(); n],
            trace: Vec::new(),
            in_flight: vec![None; nch],
        };
        for i in 0..n {
            sim.push(0, Event::Start(i as u8));
        }
        sim
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &N {
        &self.nodes[id.idx()]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut N {
        &mut self.nodes[id.idx()]
    }

    pub fn into_nodes(self) -> Vec<N> {
        self.nodes
    }

    fn push(&mut self, at: Tick, e: Event) {
        self.seq += 1;
        self.events.push(Reverse((at, self.seq, e)));
    }

    /// Queues a frame for `node` as if the node had broadcast it.
    pub fn submit_broadcast(
        &mut self,
        node: NodeId,
        channel: ChannelId,
        frame: Vec<u8>,
    ) -> Result<(), SimError> {
        let ch = self
            .channels
            .get(channel)
            .ok_or(SimError::UnknownChannel(channel))?;
        if !ch.member[node.idx()] {
            return Err(SimError::NotMember { node, channel });
        }
        if frame.len() > self.params.max_frame {
            return Err(SimError::Framing {
                len: frame.len(),
                max: self.params.max_frame,
            });
        }
        self.enqueue(node, channel, frame);
        Ok(())
    }

    fn enqueue(&mut self, node: NodeId, channel: ChannelId, frame: Vec<u8>) {
        let ch = &mut self.channels[channel];
        ch.queues[node.idx()].push_back(Arc::new(frame));
        if !ch.busy {
            ch.busy = true;
            let now = self.now;
            self.push(now, Event::Arbitrate(channel));
        }
    }

    fn record(
        &mut self,
        node: NodeId,
        kind: TraceKind,
        channel: ChannelId,
        frame: Option<&Arc<Vec<u8>>>,
    ) {
        if !self.params.trace {
            return;
        }
        let (ptype, len) = frame.map_or((0, 0), |f| (f.get(2).copied().unwrap_or(0), f.len()));
        let bytes = if kind == TraceKind::TransmitStart {
            frame.cloned()
        } else {
            None
        };
        self.trace.push(TraceRecord {
            tick: self.now,
            node,
            kind,
            channel,
            packet_type: ptype,
            len,
            bytes,
        });
    }

    fn with_ctx(&mut self, i: u8, f: impl FnOnce(&mut N, &mut NodeCtx<'_>)) {
        let mut ctx = NodeCtx {
            now: self.now,
            me: NodeId(i),
            channels: &self.channels,
            max_frame: self.params.max_frame,
            out: Vec::new(),
            timers: Vec::new(),
        };
        f(&mut self.nodes[i as usize], &mut ctx);
        let NodeCtx { out, timers, .. } = ctx;
        for (ch, frame) in out {
            self.enqueue(NodeId(i), ch, frame);
        }
        for (at, token) in timers {
            self.push(at, Event::Timer(i, token));
        }
    }

    /// Processes one event. Returns false when no events remain.
    pub fn step(&mut self) -> bool {
        let Some(Reverse((at, _, ev))) = self.events.pop() else {
            return false;
        };
        self.now = at;
        self.processed += 1;
        match ev {
            Event::Start(i) => self.with_ctx(i, |n, c| n.on_start(c)),
            Event::Timer(i, token) => {
                if self.params.trace {
                    self.trace.push(TraceRecord {
                        tick: self.now,
                        node: NodeId(i),
                        kind: TraceKind::Timer,
                        channel: 0,
                        packet_type: 0,
                        len: 0,
                        bytes: None,
                    });
                }
                self.with_ctx(i, |n, c| n.on_timer(c, token))
            }
            Event::Arbitrate(ch) => {
                let cw = self.params.backoff_window;
                let mut best: Option<(Tick, u8)> = None;
                for i in 0..self.topology.n_nodes {
                    if self.channels[ch].queues[i].is_empty() {
                        continue;
                    }
                    self.metrics[i].contention_attempts += 1;
                    let b = self.rng.gen_range(0..cw);
                    if best.map_or(true, |(bb, _)| b < bb) {
                        best = Some((b, i as u8));
                    }
                }
                match best {
                    Some((b, i)) => {
                        let t = self.now + b;
                        self.push(t, Event::TxStart(ch, i));
                    }
                    None => {
                        self.channels[ch].busy = false;
                    }
                }
            }
            Event::TxStart(ch, i) => {
                let frame = self.channels[ch].queues[i as usize]
                    .pop_front()
                    .expect("winner has a frame");
                let m = &mut self.metrics[i as usize];
                m.transmissions += 1;
                m.bytes_sent += frame.len() as u64;
                self.record(NodeId(i), TraceKind::TransmitStart, ch, Some(&frame));
                let end = self.now + self.params.tx_time(frame.len());
                self.in_flight[ch] = Some(frame);
                self.push(end, Event::TxEnd(ch, i));
            }
            Event::TxEnd(ch, i) => {
                let frame = self.in_flight[ch].take().expect("frame in flight");
                self.record(NodeId(i), TraceKind::TransmitEnd, ch, Some(&frame));
                for r in 0..self.topology.n_nodes {
                    if r == i as usize || !self.channels[ch].member[r] {
                        continue;
                    }
                    if self.policy.loss_rate > 0.0
                        && self.rng.gen_bool(self.policy.loss_rate.min(1.0))
                    {
                        self.record(NodeId(r as u8), TraceKind::Drop, ch, Some(&frame));
                        continue;
                    }
                    let mut delay = 1;
                    if self.policy.delay_prob > 0.0
                        && self.policy.max_extra_delay > 0
                        && self.rng.gen_bool(self.policy.delay_prob.min(1.0))
                    {
                        delay += self.rng.gen_range(1..=self.policy.max_extra_delay);
                    }
                    let at = self.now + delay;
                    self.push(at, Event::Deliver(r as u8, ch, frame.clone()));
                }
                let c = &mut self.channels[ch];
                c.last_end = self.now;
                if c.queues.iter().any(|q| !q.is_empty()) {
                    let now = self.now;
                    self.push(now, Event::Arbitrate(ch));
                } else {
                    c.busy = false;
                }
            }
            Event::Deliver(r, ch, frame) => {
                self.metrics[r as usize].received += 1;
                self.record(NodeId(r), TraceKind::Deliver, ch, Some(&frame));
                self.with_ctx(r, |n, c| n.on_packet(c, ch, &frame));
            }
        }
        true
    }

    /// Runs until `done` holds (checked after every event), the event queue
    /// drains, or `max_ticks` passes.
    pub fn run_until(
        &mut self,
        max_ticks: Tick,
        mut done: impl FnMut(&[N]) -> bool,
    ) -> Result<Tick, TimeoutReport> {
        loop {
            if done(&self.nodes) {
                return Ok(self.now);
            }
            match self.events.peek() {
                Some(Reverse((at, _, _))) if *at <= max_ticks => {
                    self.step();
                }
                _ => {
                    return Err(TimeoutReport {
                        tick: self.now,
                        events: self.processed,
                    })
                }
            }
        }
    }

    /// True while any frame is queued or on the air.
    pub fn busy(&self) -> bool {
        self.channels
            .iter()
            .any(|c| c.busy || c.queues.iter().any(|q| !q.is_empty()))
    }

    /// Keeps stepping until every queued frame has been sent, or `max_ticks`.
    pub fn flush(&mut self, max_ticks: Tick) {
        while self.busy() {
            match self.events.peek() {
                Some(Reverse((at, _, _))) if *at <= max_ticks => {
                    self.step();
                }
                _ => return,
            }
        }
    }

    pub fn trace_lines(&self) -> String {
        self.trace.iter().map(|r| r.line() + "\n").collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Broadcasts `count` frames at start and counts what it hears.
    struct Chatter {
        count: usize,
        len: usize,
        heard: Vec<Vec<u8>>,
    }

    impl SimNode for Chatter {
        fn on_start(&mut self, ctx: &mut NodeCtx<'_>) {
            for k in 0..self.count {
                let mut f = vec![ctx.me.0, k as u8, 0];
                f.resize(self.len, 0);
                ctx.broadcast(0, f).unwrap();
            }
        }
        fn on_packet(&mut self, _ctx: &mut NodeCtx<'_>, _ch: ChannelId, bytes: &[u8]) {
            self.heard.push(bytes.to_vec());
        }
        fn on_timer(&mut self, _ctx: &mut NodeCtx<'_>, _t: u64) {}
    }

    fn params() -> SimParams {
        SimParams {
            bitrate: 16,
            backoff_window: 16,
            max_frame: 512,
            seed: 3,
            trace: true,
        }
    }

    fn chatter(n: usize, count: usize) -> Vec<Chatter> {
        (0..n)
            .map(|_| Chatter {
                count,
                len: 64,
                heard: vec![],
            })
            .collect()
    }

    #[test]
    fn lossless_delivery_and_exclusive_medium() {
        let mut sim = Simulator::new(
            Topology::single(4),
            params(),
            AdversaryPolicy::default(),
            chatter(4, 3),
        );
        sim.run_until(100_000, |_| false).unwrap_err();
        for n in sim.nodes() {
            assert_eq!(n.heard.len(), 9);
        }
        let mut last_end = 0;
        let mut open = None;
        for r in &sim.trace {
            match r.kind {
                TraceKind::TransmitStart => {
                    assert!(open.is_none(), "overlapping transmissions");
                    assert!(r.tick >= last_end);
                    open = Some(r.tick);
                }
                TraceKind::TransmitEnd => {
                    assert_eq!(r.tick - open.take().unwrap(), 4);
                    last_end = r.tick;
                }
                _ => {}
            }
        }
        // Every node with a queued frame contends in each arbitration round.
        let mut left = [3u64; 4];
        let mut contended = [0u64; 4];
        for r in sim
            .trace
            .iter()
            .filter(|r| r.kind == TraceKind::TransmitStart)
        {
            for i in 0..4 {
                contended[i] += (left[i] > 0) as u64;
            }
            left[r.node.idx()] -= 1;
        }
        for (i, m) in sim.metrics.iter().enumerate() {
            assert_eq!((m.transmissions, m.contention_attempts), (3, contended[i]));
            assert!(m.contention_attempts >= 3);
        }
    }

    #[test]
    fn per_sender_fifo() {
        let mut sim = Simulator::new(
            Topology::single(4),
            params(),
            AdversaryPolicy::default(),
            chatter(4, 5),
        );
        let _ = sim.run_until(100_000, |_| false);
        for n in sim.nodes() {
            for s in 0..4u8 {
                let seqs: Vec<u8> = n.heard.iter().filter(|f| f[0] == s).map(|f| f[1]).collect();
                assert!(seqs.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn oversize_rejected() {
        let mut sim = Simulator::new(
            Topology::single(4),
            params(),
            AdversaryPolicy::default(),
            chatter(4, 0),
        );
        assert_eq!(
            sim.submit_broadcast(NodeId(0), 0, vec![0; 513]),
            Err(SimError::Framing { len: 513, max: 512 })
        );
    }

    #[test]
    fn loss_rate_observed() {
        let policy = AdversaryPolicy {
            loss_rate: 0.3,
            ..Default::default()
        };
        let mut sim = Simulator::new(Topology::single(4), params(), policy, chatter(4, 100));
        let _ = sim.run_until(1_000_000, |_| false);
        let drops = sim
            .trace
            .iter()
            .filter(|r| r.kind == TraceKind::Drop)
            .count() as f64;
        let rate = drops / 1200.0;
        assert!((rate - 0.3).abs() < 0.05, "{rate}");
    }

    #[test]
    fn routing() {
        let t = Topology::clustered(&[4, 4]);
        assert_eq!(t.route(0, 0), Ok(0));
        assert_eq!(t.route(0, 1), Ok(2));
        assert!(t.route(0, 5).is_err());
        assert_eq!(t.channels[2].len(), 8);
    }

    #[test]
    fn deterministic_trace() {
        let run = || {
            let policy = AdversaryPolicy {
                loss_rate: 0.1,
                delay_prob: 0.5,
                max_extra_delay: 30,
            };
            let mut sim = Simulator::new(Topology::single(4), params(), policy, chatter(4, 4));
            let _ = sim.run_until(100_000, |_| false);
            sim.trace_lines()
        };
        assert_eq!(run(), run());
    }
}
