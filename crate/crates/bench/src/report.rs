//! Run reports and their CSV and text forms.
//!
//! CSV schema, one header row followed by rows of three kinds:
//!
//! ```text
//! scenario,row,node,epoch,honest,transmissions,contention_attempts,bytes_sent,latency_ticks,included,included_bytes,key,value
//! ```
//!
//! * `row = node`: one per node; `node`, `honest`, `transmissions`,
//!   `contention_attempts` and `bytes_sent` are set.
//! * `row = epoch`: one per epoch completed by every honest node; `epoch`,
//!   `latency_ticks`, `included` and `included_bytes` are set. Latency is the
//!   tick the last honest node finished the epoch minus the same for the
//!   previous epoch. `included_bytes` is `included * proposal_bytes`; in
//!   multi-hop runs `included` counts cluster digests.
//! * `row = aggregate`: `key` and `value` are set, keys in this order:
//!   `protocol`, `batching`, `topology`, `seed`, `total_ticks`, `completed`,
//!   `recover_timeouts`, `throughput`, `safety`.
//!
//! Unused cells are empty. `throughput` is `sum(included_bytes) * 1000 /
//! total_ticks` with three decimals. `safety` is `pass` or `fail: <reason>`.

use std::fmt::Write as _;

use crate::spec::Batching;
use crate::BenchError;

pub const CSV_HEADER: &str =
    "scenario,row,node,epoch,honest,transmissions,contention_attempts,bytes_sent,\
latency_ticks,included,included_bytes,key,value";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRow {
    pub node: u16,
    pub honest: bool,
    pub transmissions: u64,
    pub contention_attempts: u64,
    pub bytes_sent: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochRow {
    pub epoch: u16,
    pub latency_ticks: u64,
    pub included: usize,
    pub included_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Safety {
    Pass,
    Fail(String),
}

impl Safety {
    pub fn is_pass(&self) -> bool {
        *self == Safety::Pass
    }

    fn cell(&self) -> String {
        match self {
            Safety::Pass => "pass".into(),
            Safety::Fail(r) => format!("fail: {r}"),
        }
    }

    fn parse(s: &str) -> Result<Safety, BenchError> {
        match s {
            "pass" => Ok(Safety::Pass),
            _ => s
                .strip_prefix("fail: ")
                .map(|r| Safety::Fail(r.to_string()))
                .ok_or_else(|| BenchError::Config(format!("bad safety cell {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub protocol: String,
    pub batching: Batching,
    pub topology: String,
    pub seed: u64,
    pub nodes: Vec<NodeRow>,
    pub epochs: Vec<EpochRow>,
    pub total_ticks: u64,
    pub completed: bool,
    /// Over honest nodes only.
    pub recover_timeouts: u64,
    pub safety: Safety,
}

impl RunReport {
    /// Included bytes per 1000 ticks.
    pub fn throughput(&self) -> f64 {
        let bytes: u64 = self.epochs.iter().map(|e| e.included_bytes).sum();
        if self.total_ticks == 0 {
            return 0.0;
        }
        bytes as f64 * 1000.0 / self.total_ticks as f64
    }

    pub fn honest_nodes(&self) -> impl Iterator<Item = &NodeRow> {
        self.nodes.iter().filter(|n| n.honest)
    }

    pub fn total_latency(&self) -> u64 {
        self.epochs.iter().map(|e| e.latency_ticks).sum()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {} protocol={} batching={} topology={} seed={}",
            self.scenario,
            self.protocol,
            self.batching.name(),
            self.topology,
            self.seed
        );
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>13} {:>10} {:>10}",
            "node", "honest", "transmissions", "contention", "bytes"
        );
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>13} {:>10} {:>10}",
                n.node, n.honest, n.transmissions, n.contention_attempts, n.bytes_sent
            );
        }
        let _ = writeln!(
            s,
            "{:>5} {:>10} {:>8} {:>14}",
            "epoch", "latency", "included", "included_bytes"
        );
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{:>5} {:>10} {:>8} {:>14}",
                e.epoch, e.latency_ticks, e.included, e.included_bytes
            );
        }
        let _ = writeln!(
            s,
            "total_ticks={} completed={} recover_timeouts={} throughput={:.3} safety={}",
            self.total_ticks,
            self.completed,
            self.recover_timeouts,
            self.throughput(),
            self.safety.cell()
        );
        s
    }

    fn records(&self) -> Vec<[String; 13]> {
        let mut out = Vec::new();
        let blank = || String::new();
        for n in &self.nodes {
            out.push([
                self.scenario.clone(),
                "node".into(),
                n.node.to_string(),
                blank(),
                n.honest.to_string(),
                n.transmissions.to_string(),
                n.contention_attempts.to_string(),
                n.bytes_sent.to_string(),
                blank(),
                blank(),
                blank(),
                blank(),
                blank(),
            ]);
        }
        for e in &self.epochs {
            out.push([
                self.scenario.clone(),
                "epoch".into(),
                blank(),
                e.epoch.to_string(),
                blank(),
                blank(),
                blank(),
                blank(),
                e.latency_ticks.to_string(),
                e.included.to_string(),
                e.included_bytes.to_string(),
                blank(),
                blank(),
            ]);
        }
        let agg = [
            ("protocol", self.protocol.clone()),
            ("batching", self.batching.name().to_string()),
            ("topology", self.topology.clone()),
            ("seed", self.seed.to_string()),
            ("total_ticks", self.total_ticks.to_string()),
            ("completed", self.completed.to_string()),
            ("recover_timeouts", self.recover_timeouts.to_string()),
            ("throughput", format!("{:.3}", self.throughput())),
            ("safety", self.safety.cell()),
        ];
        for (k, v) in agg {
            let mut r: [String; 13] = Default::default();
            r[0] = self.scenario.clone();
            r[1] = "aggregate".into();
            r[11] = k.into();
            r[12] = v;
            out.push(r);
        }
        out
    }
}

pub fn to_csv(reports: &[RunReport]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))
        .expect("in-memory write");
    for r in reports {
        for rec in r.records() {
            w.write_record(&rec).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

pub fn to_text(reports: &[RunReport]) -> String {
    reports
        .iter()
        .map(|r| r.text())
        .collect::<Vec<_>>()
        .join("\n")
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, BenchError> {
    s.parse()
        .map_err(|_| BenchError::Config(format!("bad {what} cell {s:?}")))
}

/// Parses the output of [`to_csv`]. Throughput is recomputed from the epoch
/// rows and must match the aggregate cell.
pub fn from_csv(text: &str) -> Result<Vec<RunReport>, BenchError> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rd
        .headers()
        .map_err(|e| BenchError::Config(e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(BenchError::Config(format!("unexpected header {header:?}")));
    }
    let mut reports: Vec<RunReport> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| BenchError::Config(e.to_string()))?;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let scenario = cell(0);
        if reports.last().is_none_or(|r| r.scenario != scenario) {
            reports.push(RunReport {
                scenario: scenario.to_string(),
                protocol: String::new(),
                batching: Batching::Batcher,
                topology: String::new(),
                seed: 0,
                nodes: Vec::new(),
                epochs: Vec::new(),
                total_ticks: 0,
                completed: false,
                recover_timeouts: 0,
                safety: Safety::Pass,
            });
        }
        let r = reports.last_mut().expect("pushed above");
        match cell(1) {
            "node" => r.nodes.push(NodeRow {
                node: num(cell(2), "node")?,
                honest: num(cell(4), "honest")?,
                transmissions: num(cell(5), "transmissions")?,
                contention_attempts: num(cell(6), "contention_attempts")?,
                bytes_sent: num(cell(7), "bytes_sent")?,
            }),
            "epoch" => r.epochs.push(EpochRow {
                epoch: num(cell(3), "epoch")?,
                latency_ticks: num(cell(8), "latency_ticks")?,
                included: num(cell(9), "included")?,
                included_bytes: num(cell(10), "included_bytes")?,
            }),
            "aggregate" => {
                let v = cell(12);
                match cell(11) {
                    "protocol" => r.protocol = v.to_string(),
                    "batching" => {
                        r.batching = Batching::from_name(v)
                            .ok_or_else(|| BenchError::Config(format!("bad batching {v:?}")))?
                    }
                    "topology" => r.topology = v.to_string(),
                    "seed" => r.seed = num(v, "seed")?,
                    "total_ticks" => r.total_ticks = num(v, "total_ticks")?,
                    "completed" => r.completed = num(v, "completed")?,
                    "recover_timeouts" => r.recover_timeouts = num(v, "recover_timeouts")?,
                    "throughput" => {
                        if format!("{:.3}", r.throughput()) != v {
                            return Err(BenchError::Config(format!(
                                "{}: throughput {v} does not match epoch rows",
                                r.scenario
                            )));
                        }
                    }
                    "safety" => r.safety = Safety::parse(v)?,
                    k => return Err(BenchError::Config(format!("unknown aggregate key {k:?}"))),
                }
            }
            k => return Err(BenchError::Config(format!("unknown row kind {k:?}"))),
        }
    }
    Ok(reports)
}
