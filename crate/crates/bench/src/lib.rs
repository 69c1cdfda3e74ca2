//! Scenario runner, report emission and message-count checks on top of
//! `wbft-core`.

pub mod report;
pub mod spec;
pub mod table1;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;
use wbft_core::consensus::multihop::run_multihop;
use wbft_core::consensus::Registry;
use wbft_core::packets;
use wbft_core::run::{run, RunResult};
use wbft_core::{ConfigError, SystemConfig};

pub use report::{EpochRow, NodeRow, RunReport, Safety};
pub use spec::{Batching, ByzantineSpec, ScenarioSpec, TopologySpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<ConfigError> for BenchError {
    fn from(e: ConfigError) -> Self {
        BenchError::Config(e.to_string())
    }
}

pub struct Outcome {
    pub spec: ScenarioSpec,
    pub report: RunReport,
    pub result: RunResult,
}

impl Outcome {
    /// One line per trace record.
    pub fn trace_text(&self) -> String {
        let mut s = String::new();
        for r in &self.result.trace {
            s.push_str(&r.line());
            s.push('\n');
        }
        s
    }
}

pub fn run_scenario(spec: &ScenarioSpec, registry: &Registry) -> Result<Outcome, BenchError> {
    let setup = spec.setup(registry)?;
    let result = match &spec.topology {
        TopologySpec::Single(_) => run(&setup)?,
        TopologySpec::Multi(sizes) => run_multihop(&setup, sizes)?,
    };
    let safety = match check_safety(spec, &setup.cfg, &result) {
        Ok(()) => Safety::Pass,
        Err(reason) => Safety::Fail(reason),
    };
    let report = build_report(spec, &result, safety);
    Ok(Outcome {
        spec: spec.clone(),
        report,
        result,
    })
}

fn build_report(spec: &ScenarioSpec, r: &RunResult, safety: Safety) -> RunReport {
    let nodes = (0..r.n)
        .map(|i| NodeRow {
            node: i as u16,
            honest: r.honest[i],
            transmissions: r.metrics[i].transmissions,
            contention_attempts: r.metrics[i].contention_attempts,
            bytes_sent: r.metrics[i].bytes_sent,
        })
        .collect();
    let mut epochs = Vec::new();
    let mut prev = 0;
    for e in 0..spec.epochs as usize {
        let done: Option<Vec<u64>> = r
            .honest_ids()
            .map(|i| r.outputs[i].get(e).map(|(_, t)| *t))
            .collect();
        let Some(done) = done else { break };
        let last = done.into_iter().max().unwrap_or(prev);
        let included = r
            .honest_ids()
            .next()
            .map_or(0, |i| r.outputs[i][e].0.included.len());
        epochs.push(EpochRow {
            epoch: e as u16,
            latency_ticks: last - prev,
            included,
            included_bytes: (included * spec.proposal_bytes) as u64,
        });
        prev = last;
    }
    let recover_timeouts = r
        .honest_ids()
        .flat_map(|i| r.machine_stats[i].values().map(|s| s.recover_timeouts))
        .sum();
    RunReport {
        scenario: spec.name.clone(),
        protocol: spec
            .protocol
            .clone()
            .or_else(|| spec.component.clone())
            .unwrap_or_default(),
        batching: spec.batching,
        topology: spec.topology.to_string(),
        seed: spec.seed,
        nodes,
        epochs,
        total_ticks: r.end_tick,
        completed: !r.timed_out && r.all_honest_done(spec.epochs),
        recover_timeouts,
        safety,
    }
}

/// Agreement and order for every run. Single-hop Dumbo vectors must hold
/// exactly 2f+1 entries and single-hop HoneyBadger epochs must follow the
/// agreement start rule. HoneyBadger include-sets smaller than 2f+1 show up
/// in the epoch rows and are not failures.
pub fn check_safety(spec: &ScenarioSpec, cfg: &SystemConfig, r: &RunResult) -> Result<(), String> {
    r.check_agreement().map_err(|e| e.to_string())?;
    let (Some(proto), TopologySpec::Single(_)) = (&spec.protocol, &spec.topology) else {
        return Ok(());
    };
    if !proto.starts_with("dumbo") {
        return check_simultaneity(cfg, r);
    }
    let q = 2 * cfg.f + 1;
    for i in r.honest_ids() {
        for (o, _) in &r.outputs[i] {
            let k = o.included.len();
            if k != q {
                return Err(format!(
                    "epoch {}: node {i} committed a vector of {k} entries, expected {q}",
                    o.epoch
                ));
            }
        }
    }
    Ok(())
}

/// No honest node sends agreement traffic for an epoch before its own
/// 2f+1-th broadcast delivery in that epoch.
pub fn check_simultaneity(cfg: &SystemConfig, r: &RunResult) -> Result<(), String> {
    let layout = cfg.layout();
    for i in r.honest_ids() {
        for t in r.transmissions_of(i) {
            let Some(bytes) = &t.bytes else { continue };
            let Ok(pk) = packets::decode(bytes, &layout) else {
                continue;
            };
            if !pk.body.is_agreement() {
                continue;
            }
            let e = pk.header.epoch;
            let quorum = r.machine_stats[i].get(&e).and_then(|s| s.quorum_tick);
            if quorum.is_none_or(|q| t.tick < q) {
                return Err(format!(
                    "node {i} sent agreement traffic for epoch {e} at tick {} before its broadcast quorum ({quorum:?})",
                    t.tick
                ));
            }
        }
    }
    Ok(())
}

/// Loads every `*.toml` in `dir`, sorted by file name.
pub fn load_suite(dir: &Path) -> Result<Vec<(PathBuf, ScenarioSpec)>, BenchError> {
    let rd =
        std::fs::read_dir(dir).map_err(|e| BenchError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(BenchError::Config(format!(
            "no scenario files in {}",
            dir.display()
        )));
    }
    paths
        .into_iter()
        .map(|p| ScenarioSpec::load(&p).map(|s| (p, s)))
        .collect()
}

/// Runs independent scenarios on worker threads; results keep input order.
pub fn run_all(specs: &[ScenarioSpec], registry: &Registry) -> Result<Vec<Outcome>, BenchError> {
    specs
        .par_iter()
        .map(|s| run_scenario(s, registry))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub first: RunReport,
    pub second: RunReport,
    /// Second over first, honest nodes summed.
    pub transmissions: f64,
    pub contention: f64,
    pub latency: f64,
    /// First over second.
    pub throughput: f64,
}

fn ratio(x: f64, y: f64) -> f64 {
    if x == y {
        1.0
    } else {
        x / y
    }
}

impl Comparison {
    pub fn of(first: RunReport, second: RunReport) -> Comparison {
        let sum =
            |r: &RunReport, f: fn(&NodeRow) -> u64| r.honest_nodes().map(f).sum::<u64>() as f64;
        Comparison {
            transmissions: ratio(
                sum(&second, |n| n.transmissions),
                sum(&first, |n| n.transmissions),
            ),
            contention: ratio(
                sum(&second, |n| n.contention_attempts),
                sum(&first, |n| n.contention_attempts),
            ),
            latency: ratio(second.total_latency() as f64, first.total_latency() as f64),
            throughput: ratio(first.throughput(), second.throughput()),
            first,
            second,
        }
    }

    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("transmissions", self.transmissions),
            ("contention_attempts", self.contention),
            ("latency", self.latency),
            ("throughput", self.throughput),
        ]
    }

    /// `metric,factor` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,factor\n");
        for (k, v) in self.rows() {
            s.push_str(&format!("{k},{v:.6}\n"));
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "compare {} vs {}\n",
            self.first.scenario, self.second.scenario
        );
        for (k, v) in self.rows() {
            s.push_str(&format!("{k:>20} {v:.6}\n"));
        }
        s
    }
}

/// Runs two scenarios that differ only in batching and reports how much
/// cheaper the first one is.
pub fn compare(
    a: &ScenarioSpec,
    b: &ScenarioSpec,
    registry: &Registry,
) -> Result<(Comparison, [Outcome; 2]), BenchError> {
    a.check_comparable(b)?;
    let (x, y) = rayon::join(|| run_scenario(a, registry), || run_scenario(b, registry));
    let (x, y) = (x?, y?);
    Ok((Comparison::of(x.report.clone(), y.report.clone()), [x, y]))
}
