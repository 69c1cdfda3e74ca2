//! Builds a simulated network of protocol hosts and runs it to completion.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::components::BatchMode;
use crate::consensus::byzantine::{Adversary, Behavior};
use crate::consensus::host::{HostStats, MachineFactory, ProtocolHost, Wiring};
use crate::consensus::{EpochOutput, MachineStats, NodeEnv, Protocol};
use crate::crypto::{CryptoSuite, Sizes};
use crate::netsim::{AdversaryPolicy, NodeMetrics, SimParams, Simulator, Topology, TraceRecord};
use crate::types::{ConfigError, NodeId, SystemConfig, Tick};

#[derive(Clone)]
pub struct RunSetup {
    pub cfg: SystemConfig,
    pub protocol: Arc<dyn Protocol>,
    pub mode: BatchMode,
    pub epochs: u16,
    pub byzantine: Vec<(NodeId, Behavior)>,
    pub policy: AdversaryPolicy,
    pub proposal_bytes: usize,
    pub seed: u64,
    pub max_ticks: Tick,
    pub encrypt: Option<bool>,
}

impl RunSetup {
    pub fn new(cfg: SystemConfig, protocol: Arc<dyn Protocol>) -> RunSetup {
        RunSetup {
            cfg,
            protocol,
            mode: BatchMode::Batched,
            epochs: 1,
            byzantine: Vec::new(),
            policy: AdversaryPolicy::default(),
            proposal_bytes: 32,
            seed: 0,
            max_ticks: 1_000_000,
            encrypt: None,
        }
    }
}

pub struct RunResult {
    pub n: usize,
    pub honest: Vec<bool>,
    /// Per node: outputs with completion ticks.
    pub outputs: Vec<Vec<(EpochOutput, Tick)>>,
    pub metrics: Vec<NodeMetrics>,
    pub trace: Vec<TraceRecord>,
    pub host_stats: Vec<HostStats>,
    pub machine_stats: Vec<BTreeMap<u16, MachineStats>>,
    pub end_tick: Tick,
    pub timed_out: bool,
    /// Per-node machine state, filled only when the run timed out.
    pub stuck_state: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SafetyViolation {
    #[error("epoch {epoch}: {a} and {b} committed different outputs")]
    Divergence { epoch: u16, a: NodeId, b: NodeId },
    #[error("{node} committed epochs out of order")]
    Order { node: NodeId },
}

impl RunResult {
    pub fn honest_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&i| self.honest[i])
    }

    /// Honest nodes commit identical outputs per epoch in epoch order.
    pub fn check_agreement(&self) -> Result<(), SafetyViolation> {
        let mut first: BTreeMap<u16, (usize, &EpochOutput)> = BTreeMap::new();
        for i in self.honest_ids() {
            for (k, (o, _)) in self.outputs[i].iter().enumerate() {
                if o.epoch as usize != k {
                    return Err(SafetyViolation::Order {
                        node: NodeId(i as u8),
                    });
                }
                match first.get(&o.epoch) {
                    Some((j, p)) if *p != o => {
                        return Err(SafetyViolation::Divergence {
                            epoch: o.epoch,
                            a: NodeId(*j as u8),
                            b: NodeId(i as u8),
                        })
                    }
                    Some(_) => {}
                    None => {
                        first.insert(o.epoch, (i, o));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn all_honest_done(&self, epochs: u16) -> bool {
        self.honest_ids()
            .all(|i| self.outputs[i].len() >= epochs as usize)
    }

    /// Transmit-start records of `node`, in order.
    pub fn transmissions_of(&self, node: usize) -> impl Iterator<Item = &TraceRecord> {
        self.trace.iter().filter(move |r| {
            r.node.idx() == node && r.kind == crate::netsim::TraceKind::TransmitStart
        })
    }
}

pub fn validate(setup: &RunSetup) -> Result<(), ConfigError> {
    setup.cfg.validate()?;
    for (id, _) in &setup.byzantine {
        if id.idx() >= setup.cfg.n_nodes {
            return Err(ConfigError::Invalid {
                name: "byzantine",
                reason: format!("node {} out of range", id.0),
            });
        }
    }
    if setup.byzantine.len() > setup.cfg.f {
        return Err(ConfigError::Invalid {
            name: "byzantine",
            reason: format!(
                "{} faulty nodes exceed f = {}",
                setup.byzantine.len(),
                setup.cfg.f
            ),
        });
    }
    Ok(())
}

pub fn adversaries(setup: &RunSetup, id: NodeId) -> Option<Adversary> {
    setup
        .byzantine
        .iter()
        .find(|(b, _)| *b == id)
        .map(|(_, beh)| Adversary::new(*beh, id, setup.seed, setup.cfg.retx_interval))
}

pub fn sim_params(cfg: &SystemConfig, seed: u64) -> SimParams {
    SimParams {
        seed,
        ..SimParams::of(cfg)
    }
}

/// Runs a single-hop network of `cfg.n_nodes` nodes.
pub fn run(setup: &RunSetup) -> Result<RunResult, ConfigError> {
    validate(setup)?;
    let cfg = &setup.cfg;
    let n = cfg.n_nodes;
    let crypto = Arc::new(
        CryptoSuite::new(n, cfg.f, Sizes::of(cfg), setup.seed).map_err(|e| {
            ConfigError::Invalid {
                name: "crypto",
                reason: e.to_string(),
            }
        })?,
    );
    let wiring = Wiring {
        local: 0,
        local_layout: cfg.layout(),
        global: None,
    };
    let hosts: Vec<ProtocolHost> = (0..n)
        .map(|i| {
            let me = NodeId(i as u8);
            let env = NodeEnv {
                me,
                cfg: cfg.clone(),
                mode: setup.mode,
                crypto: crypto.clone(),
                proposal_bytes: setup.proposal_bytes,
                seed: setup.seed,
                encrypt: setup.encrypt,
                payload: None,
            };
            let proto = setup.protocol.clone();
            let factory: MachineFactory = Arc::new(move |e| proto.machine(&env, e));
            ProtocolHost::new(
                me,
                cfg.clone(),
                crypto.clone(),
                wiring.clone(),
                setup.epochs,
                factory,
                adversaries(setup, me),
            )
        })
        .collect();
    Ok(drive(
        Topology::single(n),
        sim_params(cfg, setup.seed),
        setup.policy,
        hosts,
        setup.max_ticks,
    ))
}

pub fn drive(
    topology: Topology,
    params: SimParams,
    policy: AdversaryPolicy,
    hosts: Vec<ProtocolHost>,
    max_ticks: Tick,
) -> RunResult {
    let n = hosts.len();
    let mut sim = Simulator::new(topology, params, policy, hosts);
    let res = sim.run_until(max_ticks, |nodes| {
        nodes.iter().filter(|h| h.is_honest()).all(|h| h.done())
    });
    let (end_tick, timed_out) = match res {
        Ok(t) => (t, false),
        Err(r) => (r.tick, true),
    };
    if !timed_out {
        // Let frames already queued go out so transmission counts are complete.
        sim.flush(max_ticks);
    }
    let metrics = sim.metrics.clone();
    let trace = std::mem::take(&mut sim.trace);
    let nodes = sim.into_nodes();
    RunResult {
        n,
        honest: nodes.iter().map(|h| h.is_honest()).collect(),
        outputs: nodes.iter().map(|h| h.outputs().to_vec()).collect(),
        metrics,
        trace,
        host_stats: nodes.iter().map(|h| h.stats.clone()).collect(),
        machine_stats: nodes.iter().map(|h| h.machine_stats()).collect(),
        stuck_state: if timed_out {
            nodes.iter().map(|h| h.describe()).collect()
        } else {
            Vec::new()
        },
        end_tick,
        timed_out,
    }
}
