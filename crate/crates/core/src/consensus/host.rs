//! Runs a node's epoch machines inside the simulator: decoding, signature
//! checks, epoch routing, batching timers and retransmission on stalls.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use super::byzantine::Adversary;
use super::{EpochMachine, EpochOutput, MachineStats};
use crate::components::{Emit, Out, Target};
use crate::crypto::CryptoSuite;
use crate::netsim::{ChannelId, NodeCtx, SimNode};
use crate::packets::{self, Header, LayoutParams, Packet};
use crate::types::{NodeId, SystemConfig, Tick};

const T_QUIET: u64 = 1;
const T_STALL: u64 = 2;
const T_RELEASE: u64 = 3;

pub type MachineFactory = Arc<dyn Fn(u16) -> Box<dyn EpochMachine> + Send + Sync>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HostStats {
    pub decode_errors: u64,
    pub bad_signatures: u64,
    pub encode_errors: u64,
    pub buffered: u64,
    pub buffer_drops: u64,
    pub stalls: u64,
}

/// Channels and packet layouts a node uses.
#[derive(Clone, Debug)]
pub struct Wiring {
    pub local: ChannelId,
    pub local_layout: LayoutParams,
    pub global: Option<GlobalLink>,
}

/// The inter-cluster channel. Packets on it are signed by a cluster slot
/// under the global key set rather than by the node itself.
#[derive(Clone, Debug)]
pub struct GlobalLink {
    pub channel: ChannelId,
    pub layout: LayoutParams,
    pub slot: NodeId,
    pub suite: Arc<CryptoSuite>,
}

pub struct ProtocolHost {
    me: NodeId,
    cfg: SystemConfig,
    sig: Arc<CryptoSuite>,
    wiring: Wiring,
    factory: MachineFactory,
    machines: BTreeMap<u16, Box<dyn EpochMachine>>,
    epoch: u16,
    epochs: u16,
    buffer: VecDeque<(ChannelId, Vec<u8>)>,
    outputs: Vec<(EpochOutput, Tick)>,
    adversary: Option<Adversary>,
    last_progress: Tick,
    quiet_at: Option<Tick>,
    stall_at: Option<Tick>,
    release_at: Option<Tick>,
    pub stats: HostStats,
}

impl ProtocolHost {
    pub fn new(
        me: NodeId,
        cfg: SystemConfig,
        sig: Arc<CryptoSuite>,
        wiring: Wiring,
        epochs: u16,
        factory: MachineFactory,
        adversary: Option<Adversary>,
    ) -> ProtocolHost {
        ProtocolHost {
            me,
            cfg,
            sig,
            wiring,
            factory,
            machines: BTreeMap::new(),
            epoch: 0,
            epochs,
            buffer: VecDeque::new(),
            outputs: Vec::new(),
            adversary,
            last_progress: 0,
            quiet_at: None,
            stall_at: None,
            release_at: None,
            stats: HostStats::default(),
        }
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn is_honest(&self) -> bool {
        self.adversary.is_none()
    }

    pub fn done(&self) -> bool {
        self.outputs.len() >= self.epochs as usize
    }

    /// Outputs with the tick each epoch completed.
    pub fn outputs(&self) -> &[(EpochOutput, Tick)] {
        &self.outputs
    }

    pub fn machine_stats(&self) -> BTreeMap<u16, MachineStats> {
        self.machines.iter().map(|(e, m)| (*e, m.stats())).collect()
    }

    /// State of every live epoch machine.
    pub fn describe(&self) -> String {
        self.machines
            .iter()
            .map(|(e, m)| format!("epoch {e}: {}\n", m.describe()))
            .collect()
    }

    fn layout_for(&self, ch: ChannelId) -> Option<&LayoutParams> {
        if ch == self.wiring.local {
            return Some(&self.wiring.local_layout);
        }
        match &self.wiring.global {
            Some(g) if g.channel == ch => Some(&g.layout),
            _ => None,
        }
    }

    fn emit(&mut self, ctx: &mut NodeCtx<'_>, epoch: u16, out: Out) {
        for e in out.items {
            let list = match &mut self.adversary {
                Some(a) => a.filter(epoch, e, ctx.now),
                None => vec![e],
            };
            for e in list {
                self.transmit(ctx, epoch, e);
            }
        }
        if let Some(t) = self.adversary.as_ref().and_then(|a| a.next_release()) {
            if self.release_at.is_none_or(|r| r > t) {
                self.release_at = Some(t);
                ctx.set_timer(t, T_RELEASE);
            }
        }
    }

    fn transmit(&mut self, ctx: &mut NodeCtx<'_>, epoch: u16, e: Emit) {
        let (ch, layout, routing, sender, suite) = match e.target {
            Target::Local => (
                self.wiring.local,
                self.wiring.local_layout,
                None,
                self.me,
                &self.sig,
            ),
            Target::Global(r) => match &self.wiring.global {
                Some(g) => (g.channel, g.layout, Some(r), g.slot, &g.suite),
                None => {
                    self.stats.encode_errors += 1;
                    return;
                }
            },
        };
        let mut pk = Packet {
            header: Header {
                retx: e.retx,
                sender,
                epoch,
                routing,
            },
            body: e.body,
            signature: Vec::new(),
        };
        let Ok(signed) = pk.signing_bytes(&layout) else {
            self.stats.encode_errors += 1;
            return;
        };
        pk.signature = suite.sign(sender, &signed);
        let frame = pk
            .encode(&layout)
            .map_err(|_| ())
            .and_then(|b| packets::frame_align(b, self.cfg.d_align).map_err(|_| ()));
        if frame
            .map(|f| ctx.broadcast(ch, f))
            .map_or(true, |r| r.is_err())
        {
            self.stats.encode_errors += 1;
        }
    }

    fn start_epoch(&mut self, ctx: &mut NodeCtx<'_>) {
        let e = self.epoch;
        let mut m = (self.factory)(e);
        let mut out = Out::default();
        m.start(ctx.now, &mut out);
        self.machines.insert(e, m);
        self.emit(ctx, e, out);
        self.last_progress = ctx.now;
        let pending: Vec<_> = self.buffer.drain(..).collect();
        for (ch, bytes) in pending {
            self.on_frame(ctx, ch, &bytes);
        }
    }

    fn on_frame(&mut self, ctx: &mut NodeCtx<'_>, ch: ChannelId, bytes: &[u8]) {
        let Some(layout) = self.layout_for(ch) else {
            return;
        };
        let (pk, signed) = match packets::decode_with_len(bytes, layout) {
            Ok(x) => x,
            Err(_) => {
                self.stats.decode_errors += 1;
                return;
            }
        };
        let s = pk.header.sender;
        let ok = match &self.wiring.global {
            Some(g) if g.channel == ch => g.suite.verify(s, &bytes[..signed], &pk.signature),
            _ => s != self.me && self.sig.verify(s, &bytes[..signed], &pk.signature),
        };
        if !ok {
            self.stats.bad_signatures += 1;
            return;
        }
        let e = pk.header.epoch;
        if e >= self.epochs {
            return;
        }
        if !self.machines.contains_key(&e) {
            if e > self.epoch {
                if self.buffer.len() >= self.cfg.buffer_cap {
                    self.stats.buffer_drops += 1;
                } else {
                    self.stats.buffered += 1;
                    self.buffer.push_back((ch, bytes.to_vec()));
                }
            }
            return;
        }
        let mut out = Out::default();
        let m = self.machines.get_mut(&e).expect("checked above");
        if m.on_message(&pk.header, &pk.body, ctx.now, &mut out) && e == self.epoch {
            self.last_progress = ctx.now;
        }
        self.emit(ctx, e, out);
    }

    fn after_activation(&mut self, ctx: &mut NodeCtx<'_>) {
        loop {
            let epochs: Vec<u16> = self.machines.keys().copied().collect();
            for e in epochs {
                let mut out = Out::default();
                let m = self.machines.get_mut(&e).expect("listed");
                if m.has_pending() {
                    m.poll(false, ctx.now, &mut out);
                }
                self.emit(ctx, e, out);
            }
            let finished = self
                .machines
                .get(&self.epoch)
                .and_then(|m| m.output().cloned());
            match finished {
                Some(o) if self.outputs.len() == self.epoch as usize => {
                    self.outputs.push((o, ctx.now));
                    self.last_progress = ctx.now;
                    if self.epoch + 1 < self.epochs {
                        self.epoch += 1;
                        self.start_epoch(ctx);
                        continue;
                    }
                }
                _ => {}
            }
            break;
        }
        if self.quiet_at.is_none() && self.machines.values().any(|m| m.has_pending()) {
            let t = ctx.now + self.cfg.batch_window;
            self.quiet_at = Some(t);
            ctx.set_timer(t, T_QUIET);
        }
        if self.stall_at.is_none() && !self.done() {
            let t = ctx.now + (self.cfg.retx_interval / 2).max(1);
            self.stall_at = Some(t);
            ctx.set_timer(t, T_STALL);
        }
    }

    fn channels_idle_for(&self, ctx: &NodeCtx<'_>) -> Tick {
        let mut idle = ctx.idle_for(self.wiring.local);
        if let Some(g) = &self.wiring.global {
            idle = idle.min(ctx.idle_for(g.channel));
        }
        idle
    }

    fn queued(&self, ctx: &NodeCtx<'_>) -> usize {
        ctx.queued(self.wiring.local)
            + self
                .wiring
                .global
                .as_ref()
                .map_or(0, |g| ctx.queued(g.channel))
    }
}

impl SimNode for ProtocolHost {
    fn on_start(&mut self, ctx: &mut NodeCtx<'_>) {
        if self.epochs > 0 {
            self.start_epoch(ctx);
        }
        self.after_activation(ctx);
    }

    fn on_packet(&mut self, ctx: &mut NodeCtx<'_>, channel: ChannelId, bytes: &[u8]) {
        self.on_frame(ctx, channel, bytes);
        self.after_activation(ctx);
    }

    fn on_timer(&mut self, ctx: &mut NodeCtx<'_>, token: u64) {
        match token {
            T_QUIET => {
                self.quiet_at = None;
                if self.channels_idle_for(ctx) >= self.cfg.batch_window && self.queued(ctx) == 0 {
                    let epochs: Vec<u16> = self.machines.keys().copied().collect();
                    for e in epochs {
                        let mut out = Out::default();
                        let m = self.machines.get_mut(&e).expect("listed");
                        if m.has_pending() {
                            m.poll(true, ctx.now, &mut out);
                        }
                        self.emit(ctx, e, out);
                    }
                }
            }
            T_STALL => {
                self.stall_at = None;
                let quiet = ctx.now - self.last_progress;
                let r = self.cfg.retx_interval;
                if !self.done()
                    && quiet >= r
                    && (self.channels_idle_for(ctx) >= r || quiet >= 4 * r)
                    && self.queued(ctx) == 0
                {
                    self.stats.stalls += 1;
                    self.last_progress = ctx.now;
                    let e = self.epoch;
                    let mut out = Out::default();
                    if let Some(m) = self.machines.get_mut(&e) {
                        m.on_stall(ctx.now, &mut out);
                    }
                    self.emit(ctx, e, out);
                }
            }
            T_RELEASE => {
                self.release_at = None;
                let due = self
                    .adversary
                    .as_mut()
                    .map(|a| a.release(ctx.now))
                    .unwrap_or_default();
                for (ep, e) in due {
                    self.transmit(ctx, ep, e);
                }
                if let Some(t) = self.adversary.as_ref().and_then(|a| a.next_release()) {
                    self.release_at = Some(t);
                    ctx.set_timer(t, T_RELEASE);
                }
            }
            _ => {}
        }
        self.after_activation(ctx);
    }
}
