//! Per-node message counts of the five components, batched and unbatched.

use std::fmt::Write as _;

use rayon::prelude::*;
use wbft_core::consensus::Registry;
use wbft_core::packets::{self, Body};

use crate::spec::{Batching, ScenarioSpec};
use crate::{run_scenario, BenchError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Row {
    Rbc,
    Cbc,
    Prbc,
    AbaLocalCoin,
    AbaSharedCoin,
}

impl Row {
    pub const ALL: [Row; 5] = [
        Row::Rbc,
        Row::Cbc,
        Row::Prbc,
        Row::AbaLocalCoin,
        Row::AbaSharedCoin,
    ];

    pub fn component(self) -> &'static str {
        match self {
            Row::Rbc => "rbc",
            Row::Cbc => "cbc",
            Row::Prbc => "prbc",
            Row::AbaLocalCoin => "aba-lc",
            Row::AbaSharedCoin => "aba-sc",
        }
    }

    fn is_agreement(self) -> bool {
        matches!(self, Row::AbaLocalCoin | Row::AbaSharedCoin)
    }

    /// Expected transmissions per node; agreement rows count one round.
    pub fn expected(self, n: u64, b: Batching) -> u64 {
        match (self, b) {
            (Row::Rbc, Batching::Batcher) => 1 + 2,
            (Row::Rbc, Batching::Baseline) => 1 + 2 * n,
            (Row::Cbc, Batching::Batcher) => 1 + 1 + 1,
            (Row::Cbc, Batching::Baseline) => 1 + (n - 1) + 1,
            (Row::Prbc, Batching::Batcher) => 1 + 3,
            (Row::Prbc, Batching::Baseline) => 1 + 3 * n,
            (Row::AbaLocalCoin, Batching::Batcher) => 3 * (1 + 2),
            (Row::AbaLocalCoin, Batching::Baseline) => 3 * n * (1 + 2 * n),
            (Row::AbaSharedCoin, Batching::Batcher) => 3,
            (Row::AbaSharedCoin, Batching::Baseline) => 3 * n,
        }
    }

    /// Point-to-point count for reference; not simulated.
    pub fn wired(self, n: u64) -> u64 {
        match self {
            Row::Rbc => (n - 1) * (1 + 2 * n),
            Row::Cbc => 3 * (n - 1),
            Row::Prbc => (n - 1) * (1 + 3 * n),
            Row::AbaLocalCoin => 3 * n * (n - 1) * (1 + 2 * n),
            Row::AbaSharedCoin => 3 * n * (n - 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub n: usize,
    pub row: Row,
    pub column: Batching,
    pub expected: u64,
    /// Per node.
    pub observed: Vec<u64>,
}

impl Cell {
    pub fn pass(&self) -> bool {
        self.observed.iter().all(|&o| o == self.expected)
    }
}

fn round_of(body: &Body) -> Option<u8> {
    match body {
        Body::AbaLc(b) => Some(b.round),
        Body::AbaSc(b) => Some(b.round),
        Body::Baseline(b) => Some(b.round),
        _ => None,
    }
}

fn measure(n: usize, row: Row, column: Batching, registry: &Registry) -> Result<Cell, BenchError> {
    let mut spec = ScenarioSpec::component(row.component(), n);
    spec.batching = column;
    spec.seed = 7;
    let o = run_scenario(&spec, registry)?;
    let layout = spec.system_config(n)?.layout();
    let observed = (0..n)
        .map(|i| {
            o.result
                .transmissions_of(i)
                .filter(|t| {
                    !row.is_agreement()
                        || t.bytes
                            .as_ref()
                            .and_then(|b| packets::decode(b, &layout).ok())
                            .is_some_and(|p| round_of(&p.body) == Some(1))
                })
                .count() as u64
        })
        .collect();
    Ok(Cell {
        n,
        row,
        column,
        expected: row.expected(n as u64, column),
        observed,
    })
}

/// Simulates every row and column at each `n`, fault-free and loss-free.
pub fn table1_check(ns: &[usize], registry: &Registry) -> Result<Vec<Cell>, BenchError> {
    let jobs: Vec<(usize, Row, Batching)> = ns
        .iter()
        .flat_map(|&n| {
            Row::ALL
                .into_iter()
                .flat_map(move |r| [Batching::Baseline, Batching::Batcher].map(|b| (n, r, b)))
        })
        .collect();
    jobs.par_iter()
        .map(|&(n, r, b)| measure(n, r, b, registry))
        .collect()
}

pub fn render(cells: &[Cell]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>3} {:>7} {:>9} {:>8} {:>8} {:>6} {}",
        "n", "row", "column", "wired", "expected", "status", "observed"
    );
    for c in cells {
        let _ = writeln!(
            s,
            "{:>3} {:>7} {:>9} {:>8} {:>8} {:>6} {:?}",
            c.n,
            c.row.component(),
            c.column.name(),
            c.row.wired(c.n as u64),
            c.expected,
            if c.pass() { "ok" } else { "FAIL" },
            c.observed
        );
    }
    s
}

pub fn render_csv(cells: &[Cell]) -> String {
    let mut s = String::from("n,row,column,wired,expected,observed_min,observed_max,status\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.n,
            c.row.component(),
            c.column.name(),
            c.row.wired(c.n as u64),
            c.expected,
            c.observed.iter().min().unwrap_or(&0),
            c.observed.iter().max().unwrap_or(&0),
            if c.pass() { "ok" } else { "fail" }
        );
    }
    s
}
