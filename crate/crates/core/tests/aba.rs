use std::collections::BTreeMap;
use std::sync::Arc;

use wbft_core::aba::AbaKind;
use wbft_core::components::BatchMode;
use wbft_core::consensus::component::ComponentKind;
use wbft_core::consensus::registry::{AbaInput, ComponentProtocol};
use wbft_core::consensus::Behavior;
use wbft_core::netsim::AdversaryPolicy;
use wbft_core::run::{run, RunResult, RunSetup};
use wbft_core::{NodeId, SystemConfig};

const KINDS: [AbaKind; 3] = [AbaKind::LocalCoin, AbaKind::SharedCoin, AbaKind::CoinFlip];

fn run_aba(kind: AbaKind, input: AbaInput, seed: u64, mode: BatchMode) -> RunResult {
    let cfg = SystemConfig::for_nodes(4).unwrap();
    let mut s = RunSetup::new(
        cfg,
        Arc::new(ComponentProtocol {
            kind: ComponentKind::Aba(kind),
            input,
        }),
    );
    s.mode = mode;
    s.seed = seed;
    if seed % 2 == 1 {
        let beh = [
            Behavior::VoteFlipper,
            Behavior::Equivocate,
            Behavior::Silent,
        ][(seed / 2 % 3) as usize];
        s.byzantine = vec![(NodeId((seed % 4) as u8), beh)];
    }
    s.policy = AdversaryPolicy {
        loss_rate: if seed % 3 == 0 { 0.1 } else { 0.0 },
        delay_prob: 0.2,
        max_extra_delay: 150,
    };
    run(&s).unwrap()
}

/// Decided bit per instance at each honest node.
fn decisions(r: &RunResult) -> Vec<Vec<u8>> {
    r.honest_ids()
        .map(|i| {
            r.outputs[i][0]
                .0
                .included
                .iter()
                .map(|(_, v)| v[0])
                .collect()
        })
        .collect()
}

fn max_round(r: &RunResult) -> u8 {
    r.honest_ids()
        .flat_map(|i| r.machine_stats[i][&0].decide_rounds.clone())
        .max()
        .unwrap_or(0)
}

/// Every honest node drew the same coin in every round it reached.
fn coins_unique(r: &RunResult) -> Result<(), String> {
    let mut seen: BTreeMap<u8, bool> = BTreeMap::new();
    for i in r.honest_ids() {
        for &(round, c) in &r.machine_stats[i][&0].coins {
            if *seen.entry(round).or_insert(c) != c {
                return Err(format!("node {i} drew a different coin in round {round}"));
            }
        }
    }
    Ok(())
}

#[test]
fn unanimous_input_is_decided() {
    for kind in KINDS {
        for seed in 0..60u64 {
            let (input, bit) = if seed % 4 < 2 {
                (AbaInput::Ones, 1)
            } else {
                (AbaInput::Zeros, 0)
            };
            let mode = if seed % 5 == 0 {
                BatchMode::Baseline
            } else {
                BatchMode::Batched
            };
            let r = run_aba(kind, input, seed, mode);
            assert!(
                r.all_honest_done(1),
                "{kind:?} seed {seed} did not terminate"
            );
            r.check_agreement().unwrap();
            for d in decisions(&r) {
                assert!(
                    d.iter().all(|&b| b == bit),
                    "{kind:?} seed {seed}: {d:?} for unanimous {bit}"
                );
            }
        }
    }
}

#[test]
fn mixed_inputs_agree_and_terminate() {
    for kind in KINDS {
        for seed in 0..60u64 {
            let r = run_aba(kind, AbaInput::Seeded, seed, BatchMode::Batched);
            assert!(
                r.all_honest_done(1),
                "{kind:?} seed {seed} did not terminate"
            );
            r.check_agreement().unwrap();
            assert!(
                max_round(&r) <= 20,
                "{kind:?} seed {seed} took {} rounds",
                max_round(&r)
            );
            coins_unique(&r).unwrap();
        }
    }
}

#[test]
fn batched_shared_coin_is_common_across_instances() {
    for kind in [AbaKind::SharedCoin, AbaKind::CoinFlip] {
        let mut drawn = 0;
        for seed in 0..30u64 {
            let r = run_aba(kind, AbaInput::Seeded, seed * 2, BatchMode::Batched);
            coins_unique(&r).unwrap();
            drawn += r
                .honest_ids()
                .map(|i| r.machine_stats[i][&0].coins.len())
                .sum::<usize>();
            for i in r.honest_ids() {
                let coins = &r.machine_stats[i][&0].coins;
                // One coin per round for all four instances.
                let rounds: Vec<u8> = coins.iter().map(|c| c.0).collect();
                let mut dedup = rounds.clone();
                dedup.dedup();
                assert_eq!(
                    rounds, dedup,
                    "{kind:?} seed {seed}: several coins in one round"
                );
            }
        }
        assert!(drawn > 30, "{kind:?}: only {drawn} coins drawn");
    }
}
