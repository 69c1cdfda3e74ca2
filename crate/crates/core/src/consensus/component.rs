//! A single broadcast or agreement batch run as a whole epoch, used to
//! measure components in isolation.

use super::{scope, EpochMachine, EpochOutput, MachineStats, NodeEnv};
use crate::aba::{Aba, AbaKind};
use crate::components::{CbcBatch, CbcKind, Out, PrbcBatch, RbcBatch};
use crate::packets::{Body, Header};
use crate::types::{NodeId, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComponentKind {
    Rbc,
    Cbc,
    Prbc,
    Aba(AbaKind),
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 6] = [
        ComponentKind::Rbc,
        ComponentKind::Cbc,
        ComponentKind::Prbc,
        ComponentKind::Aba(AbaKind::LocalCoin),
        ComponentKind::Aba(AbaKind::SharedCoin),
        ComponentKind::Aba(AbaKind::CoinFlip),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Rbc => "rbc",
            ComponentKind::Cbc => "cbc",
            ComponentKind::Prbc => "prbc",
            ComponentKind::Aba(k) => k.name(),
        }
    }

    pub fn from_name(s: &str) -> Option<ComponentKind> {
        ComponentKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

enum Inner {
    Rbc(RbcBatch),
    Cbc(CbcBatch),
    Prbc(PrbcBatch),
    Aba(Box<dyn Aba>),
}

pub struct ComponentMachine {
    env: NodeEnv,
    epoch: u16,
    inner: Inner,
    inputs: Vec<bool>,
    stalls: u32,
    output: Option<EpochOutput>,
}

impl ComponentMachine {
    /// `inputs` are the agreement inputs, one per instance; unused by broadcasts.
    pub fn new(
        kind: ComponentKind,
        env: NodeEnv,
        epoch: u16,
        inputs: Vec<bool>,
    ) -> ComponentMachine {
        let c = env.ctx(&scope(kind.name(), epoch, &[]));
        let inner = match kind {
            ComponentKind::Rbc => Inner::Rbc(RbcBatch::new(c)),
            ComponentKind::Cbc => Inner::Cbc(CbcBatch::new(c, CbcKind::Standard, false)),
            ComponentKind::Prbc => Inner::Prbc(PrbcBatch::new(c)),
            ComponentKind::Aba(k) => {
                let n = env.cfg.n_nodes;
                Inner::Aba(k.engine(c, 0, n, env.cfg.round_cap))
            }
        };
        ComponentMachine {
            env,
            epoch,
            inner,
            inputs,
            stalls: 0,
            output: None,
        }
    }

    fn check_done(&mut self) {
        if self.output.is_some() {
            return;
        }
        let n = self.env.cfg.n_nodes;
        let f = self.env.cfg.f;
        let enough = |count: usize, stalls: u32| count == n || (count >= n - f && stalls >= 2);
        let included: Option<Vec<(NodeId, Vec<u8>)>> = match &self.inner {
            Inner::Rbc(r) if enough(r.delivered_count(), self.stalls) => Some(
                (0..n)
                    .filter_map(|i| r.delivered(i).map(|v| (NodeId(i as u8), v.to_vec())))
                    .collect(),
            ),
            Inner::Cbc(c) if enough(c.delivered_count(), self.stalls) => Some(
                (0..n)
                    .filter_map(|i| c.delivered(i).map(|v| (NodeId(i as u8), v.to_vec())))
                    .collect(),
            ),
            Inner::Prbc(p) if enough(p.proof_order().len(), self.stalls) => Some(
                (0..n)
                    .filter_map(|i| {
                        p.proof(i)
                            .and(p.delivered(i))
                            .map(|v| (NodeId(i as u8), v.to_vec()))
                    })
                    .collect(),
            ),
            Inner::Aba(a) if a.all_decided() => Some(
                (0..n)
                    .map(|i| (NodeId(i as u8), vec![a.decided(i).unwrap_or(false) as u8]))
                    .collect(),
            ),
            _ => None,
        };
        if let Some(included) = included {
            self.output = Some(EpochOutput {
                epoch: self.epoch,
                included,
            });
        }
    }
}

impl EpochMachine for ComponentMachine {
    fn start(&mut self, now: Tick, out: &mut Out) {
        let proposal = self.env.proposal(self.epoch);
        match &mut self.inner {
            Inner::Rbc(r) => r.start(Some(proposal), now, out),
            Inner::Cbc(c) => c.start(proposal, now, out),
            Inner::Prbc(p) => p.start(Some(proposal), now, out),
            Inner::Aba(a) => {
                let inputs = self.inputs.clone();
                a.start(&inputs, now, out)
            }
        }
        self.check_done();
    }

    fn on_message(&mut self, h: &Header, body: &Body, now: Tick, out: &mut Out) -> bool {
        let changed = match &mut self.inner {
            Inner::Rbc(r) => r.handle(h.sender, body, h.retx, now, out),
            Inner::Cbc(c) => c.handle(h.sender, body, h.retx, now, out),
            Inner::Prbc(p) => p.handle(h.sender, body, h.retx, now, out),
            Inner::Aba(a) => a.handle(h.sender, body, h.retx, now, out),
        };
        self.check_done();
        changed
    }

    fn has_pending(&self) -> bool {
        match &self.inner {
            Inner::Rbc(r) => r.has_pending(),
            Inner::Cbc(c) => c.has_pending(),
            Inner::Prbc(p) => p.has_pending(),
            Inner::Aba(a) => a.has_pending(),
        }
    }

    fn poll(&mut self, force: bool, _now: Tick, out: &mut Out) {
        match &mut self.inner {
            Inner::Rbc(r) => r.poll(force, out),
            Inner::Cbc(c) => c.poll(force, out),
            Inner::Prbc(p) => p.poll(force, out),
            Inner::Aba(a) => a.poll(force, out),
        }
    }

    fn on_stall(&mut self, _now: Tick, out: &mut Out) {
        self.stalls += 1;
        match &mut self.inner {
            Inner::Rbc(r) => r.stall(out),
            Inner::Cbc(c) => c.stall(out),
            Inner::Prbc(p) => p.stall(out),
            Inner::Aba(a) => a.stall(out),
        }
        self.check_done();
    }

    fn output(&self) -> Option<&EpochOutput> {
        self.output.as_ref()
    }

    fn stats(&self) -> MachineStats {
        let mut s = MachineStats::default();
        if let Inner::Aba(a) = &self.inner {
            s.decide_rounds = (0..a.k()).map(|i| a.decide_round(i).unwrap_or(0)).collect();
            s.coins = a.coins();
        }
        s
    }
}
