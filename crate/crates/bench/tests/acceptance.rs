//! One PASS/FAIL line per acceptance criterion. Tolerances are the
//! constants below.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::sample::subsequence;
use proptest::test_runner::{Config, TestRunner};
use rayon::prelude::*;
use wbft_bench::report::{from_csv, to_csv};
use wbft_bench::table1::table1_check;
use wbft_bench::{compare, run_scenario, ByzantineSpec, Outcome, ScenarioSpec, TopologySpec};
use wbft_bench::{Batching, Safety};
use wbft_core::aba::AbaKind;
use wbft_core::components::BatchMode;
use wbft_core::consensus::component::ComponentKind;
use wbft_core::consensus::multihop::leader_of;
use wbft_core::consensus::registry::{AbaInput, ComponentProtocol};
use wbft_core::consensus::{Behavior, Registry};
use wbft_core::crypto::{CoinScheme, CryptoSuite, Share, Sizes};
use wbft_core::netsim::AdversaryPolicy;
use wbft_core::packets;
use wbft_core::run::{run, RunResult, RunSetup};
use wbft_core::{NodeId, SystemConfig};

const PROTOCOLS: [&str; 5] = ["hbbft-lc", "hbbft-sc", "beat", "dumbo-lc", "dumbo-sc"];

const TABLE1_NS: [usize; 3] = [4, 7, 10];
const TABLE1_BUDGET: Duration = Duration::from_secs(60);
const RBC_RATIO: f64 = 3.0;
const MIN_CONTENTION_FACTOR: f64 = 2.0;
const CONTENTION_SEEDS: std::ops::Range<u64> = 1..11;
const SAFETY_RUNS: u64 = 500;
const SAFETY_BUDGET: Duration = Duration::from_secs(600);
const LOSS_RATES: [f64; 2] = [0.0, 0.2];
const TICK_CAP: u64 = 1_000_000;
const ABA_RUNS: u64 = 200;
const ABA_MAX_ROUNDS: u8 = 20;
const CODEC_CASES: u32 = 10_000;
const COIN_TAGS: u32 = 10_000;
const COIN_TOLERANCE: f64 = 0.02;
const SIG_LEN: usize = 40;
const TSIG_LEN: usize = 21;
const MULTIHOP_SEEDS: u64 = 6;
const MULTIHOP_BUDGET: Duration = Duration::from_secs(120);

type Verdict = Result<String, String>;

fn registry() -> Registry {
    Registry::builtin()
}

// ------------------------------------------------------------------ 1

fn table_one() -> Verdict {
    let t = Instant::now();
    let cells = table1_check(&TABLE1_NS, &registry()).map_err(|e| e.to_string())?;
    let took = t.elapsed();
    if let Some(c) = cells.iter().find(|c| !c.pass()) {
        return Err(format!(
            "n={} {} {}: expected {} observed {:?}",
            c.n,
            c.row.component(),
            c.column.name(),
            c.expected,
            c.observed
        ));
    }
    if took > TABLE1_BUDGET {
        return Err(format!("took {took:?}"));
    }
    Ok(format!(
        "{} cells exact for n in {TABLE1_NS:?} in {took:.1?}",
        cells.len()
    ))
}

// ------------------------------------------------------------------ 2

fn reduction() -> Verdict {
    let reg = registry();
    let batched = ScenarioSpec::component("rbc", 4);
    let baseline = ScenarioSpec {
        batching: Batching::Baseline,
        ..batched.clone()
    };
    let (cmp, _) = compare(&batched, &baseline, &reg).map_err(|e| e.to_string())?;
    if cmp.transmissions != RBC_RATIO {
        return Err(format!("rbc transmission ratio {}", cmp.transmissions));
    }
    let (mut batched, mut baseline, mut worst) = (0u64, 0u64, f64::INFINITY);
    for seed in CONTENTION_SEEDS {
        let a = ScenarioSpec {
            seed,
            ..ScenarioSpec::new("hbbft-sc", TopologySpec::Single(4))
        };
        let b = ScenarioSpec {
            batching: Batching::Baseline,
            ..a.clone()
        };
        let (cmp, [x, y]) = compare(&a, &b, &reg).map_err(|e| e.to_string())?;
        let contention = |o: &Outcome| {
            o.report
                .honest_nodes()
                .map(|n| n.contention_attempts)
                .sum::<u64>()
        };
        batched += contention(&x);
        baseline += contention(&y);
        worst = worst.min(cmp.contention);
    }
    let factor = baseline as f64 / batched as f64;
    if factor < MIN_CONTENTION_FACTOR {
        return Err(format!(
            "hbbft-sc contention factor {factor:.3} below {MIN_CONTENTION_FACTOR}"
        ));
    }
    Ok(format!(
        "rbc ratio {RBC_RATIO:.1}, hbbft-sc contention factor {factor:.3} over seeds {CONTENTION_SEEDS:?} (lowest single seed {worst:.3})"
    ))
}

// ------------------------------------------------------------------ 3, 4

fn sweep_spec(protocol: &str, seed: u64, loss: f64) -> ScenarioSpec {
    let mut s = ScenarioSpec::new(protocol, TopologySpec::Single(4));
    s.name = format!("{protocol}-{seed}-{loss}");
    s.seed = seed;
    s.batching = if seed % 2 == 0 {
        Batching::Batcher
    } else {
        Batching::Baseline
    };
    s.byzantine = vec![ByzantineSpec {
        node: (seed % 4) as u8,
        behavior: Behavior::ALL[(seed % 5) as usize].name().to_string(),
    }];
    s.loss_rate = loss;
    s.delay_prob = 0.3;
    s.max_extra_delay = 300;
    s.epochs = 2;
    s.max_ticks = TICK_CAP;
    s
}

struct Sweep {
    runs: usize,
    violations: Vec<String>,
    stuck: Vec<String>,
    timeouts: u64,
    max_latency: u64,
    /// HoneyBadger epochs that included fewer than 2f+1 proposals.
    short_epochs: usize,
    took: Duration,
}

fn sweep() -> Sweep {
    let t = Instant::now();
    let reg = registry();
    let specs: Vec<ScenarioSpec> = PROTOCOLS
        .iter()
        .flat_map(|p| (0..SAFETY_RUNS).flat_map(move |s| LOSS_RATES.map(|l| sweep_spec(p, s, l))))
        .collect();
    let rows: Vec<(String, Safety, bool, u64, u64, usize)> = specs
        .par_iter()
        .map(|s| {
            let o = run_scenario(s, &reg).expect("valid scenario");
            let lat = o
                .report
                .epochs
                .iter()
                .map(|e| e.latency_ticks)
                .max()
                .unwrap_or(0);
            let short = o.report.epochs.iter().filter(|e| e.included < 3).count();
            (
                s.name.clone(),
                o.report.safety,
                o.report.completed,
                o.report.recover_timeouts,
                lat,
                short,
            )
        })
        .collect();
    let mut out = Sweep {
        runs: rows.len(),
        violations: vec![],
        stuck: vec![],
        timeouts: 0,
        max_latency: 0,
        short_epochs: 0,
        took: Duration::ZERO,
    };
    for (name, safety, done, timeouts, lat, short) in rows {
        out.short_epochs += short;
        if let Safety::Fail(r) = safety {
            out.violations.push(format!("{name}: {r}"));
        }
        if !done {
            out.stuck.push(name);
        }
        out.timeouts += timeouts;
        out.max_latency = out.max_latency.max(lat);
    }
    out.took = t.elapsed();
    out
}

fn safety(s: &Sweep) -> Verdict {
    if let Some(v) = s.violations.first() {
        return Err(format!("{} violations, first {v}", s.violations.len()));
    }
    if s.took > SAFETY_BUDGET {
        return Err(format!("took {:?}", s.took));
    }
    Ok(format!(
        "{} runs ({SAFETY_RUNS} seeds x {} loss rates x 5 protocols), 0 violations in {:.1?}; {} epochs included fewer than 2f+1",
        s.runs,
        LOSS_RATES.len(),
        s.took,
        s.short_epochs
    ))
}

fn liveness(s: &Sweep) -> Verdict {
    if let Some(v) = s.stuck.first() {
        return Err(format!(
            "{} runs hit the {TICK_CAP} tick cap, first {v}",
            s.stuck.len()
        ));
    }
    if s.timeouts > 0 {
        return Err(format!("{} recover timeouts at honest nodes", s.timeouts));
    }
    Ok(format!(
        "all {} runs complete, slowest epoch {} ticks, 0 recover timeouts",
        s.runs, s.max_latency
    ))
}

// ------------------------------------------------------------------ 5

fn run_aba(kind: AbaKind, input: AbaInput, seed: u64) -> RunResult {
    let cfg = SystemConfig::for_nodes(4).unwrap();
    let mut s = RunSetup::new(
        cfg,
        Arc::new(ComponentProtocol {
            kind: ComponentKind::Aba(kind),
            input,
        }),
    );
    s.seed = seed;
    s.mode = if seed % 4 == 3 {
        BatchMode::Baseline
    } else {
        BatchMode::Batched
    };
    if seed % 2 == 1 {
        let beh = [
            Behavior::VoteFlipper,
            Behavior::Equivocate,
            Behavior::Silent,
            Behavior::DelayMaximizer,
        ][(seed / 2 % 4) as usize];
        s.byzantine = vec![(NodeId((seed % 4) as u8), beh)];
    }
    s.policy = AdversaryPolicy {
        loss_rate: if seed % 3 == 0 { 0.1 } else { 0.0 },
        delay_prob: 0.2,
        max_extra_delay: 150,
    };
    run(&s).unwrap()
}

fn aba() -> Verdict {
    let mut max_round = 0;
    let mut coin_rounds = 0;
    for kind in [AbaKind::LocalCoin, AbaKind::SharedCoin, AbaKind::CoinFlip] {
        for seed in 0..ABA_RUNS {
            let bit = (seed % 2 == 0) as u8;
            let input = if bit == 1 {
                AbaInput::Ones
            } else {
                AbaInput::Zeros
            };
            for (r, unanimous) in [
                (run_aba(kind, input, seed), Some(bit)),
                (run_aba(kind, AbaInput::Seeded, seed), None),
            ] {
                let what = format!("{} seed {seed} input {input:?}", kind.name());
                if !r.all_honest_done(1) {
                    return Err(format!("{what}: no termination"));
                }
                r.check_agreement().map_err(|e| format!("{what}: {e}"))?;
                if let Some(b) = unanimous {
                    let ok = r
                        .honest_ids()
                        .all(|i| r.outputs[i][0].0.included.iter().all(|(_, v)| v[0] == b));
                    if !ok {
                        return Err(format!("{what}: validity"));
                    }
                }
                // Baseline runs draw one coin per instance, so only batched
                // runs share a coin per round.
                let batched = seed % 4 != 3;
                let mut coins: BTreeMap<u8, bool> = BTreeMap::new();
                for i in r.honest_ids() {
                    let st = &r.machine_stats[i][&0];
                    if st.decide_rounds.len() != 4 {
                        return Err(format!("{what}: {} instances", st.decide_rounds.len()));
                    }
                    max_round = max_round.max(st.decide_rounds.iter().copied().max().unwrap_or(0));
                    for &(round, c) in st.coins.iter().filter(|_| batched) {
                        coin_rounds += 1;
                        if *coins.entry(round).or_insert(c) != c {
                            return Err(format!("{what}: node {i} coin differs in round {round}"));
                        }
                    }
                }
            }
        }
    }
    if max_round > ABA_MAX_ROUNDS {
        return Err(format!("took {max_round} rounds"));
    }
    Ok(format!(
        "{ABA_RUNS} unanimous + {ABA_RUNS} mixed runs per variant, max {max_round} rounds, {coin_rounds} coin draws all common"
    ))
}

// ------------------------------------------------------------------ 6

fn codec() -> Verdict {
    let config = Config {
        cases: CODEC_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let check = |n: usize, pk: &packets::Packet| -> Result<(), TestCaseError> {
        let c = support::cfg(n);
        let p = c.layout();
        let enc = packets::encode(pk, &p).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&packets::decode(&enc, &p).unwrap(), pk);
        let framed =
            packets::frame_align(enc, c.d_align).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(framed.len() >= c.d_align && framed.len() <= 2 * c.d_align);
        prop_assert_eq!(&packets::decode(&framed, &p).unwrap(), pk);
        Ok(())
    };
    let mut runner = TestRunner::new(config.clone());
    runner
        .run(&support::sized_init(), |(n, pk)| check(n, &pk))
        .map_err(|e| format!("INIT: {e}"))?;
    for (name, layout) in support::LAYOUTS {
        let mut runner = TestRunner::new(config.clone());
        runner
            .run(&support::sized(layout), |(n, pk)| check(n, &pk))
            .map_err(|e| format!("{name}: {e}"))?;
    }
    let mut runner = TestRunner::new(config);
    runner
        .run(
            &(
                prop_oneof![Just(4usize), Just(7), Just(10)],
                proptest::collection::vec(any::<u8>(), 0..700),
            ),
            |(n, raw)| {
                let p = support::cfg(n).layout();
                let _ = packets::decode(&raw, &p);
                let mut b = raw;
                if b.len() >= 3 {
                    b[0] = packets::VERSION << 4 | (b[0] & 0x03);
                    b[2] = 1 + b[2] % 15;
                }
                let _ = packets::decode(&b, &p);
                Ok(())
            },
        )
        .map_err(|e| format!("fuzz: {e}"))?;
    for n in [4, 7] {
        let want = std::fs::read_to_string(support::golden_path(n))
            .map_err(|e| format!("golden n={n}: {e}"))?;
        if support::dump(n) != want || support::dump(n) != want {
            return Err(format!("golden dump n={n} changed"));
        }
    }
    Ok(format!("8 layouts x {CODEC_CASES} cases round-trip, framed in [D, 2D], {CODEC_CASES} fuzzed decodes, golden n=4,7 stable"))
}

// ------------------------------------------------------------------ 7

fn crypto() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = prop_oneof![Just(4usize), Just(7), Just(10)].prop_flat_map(|n| {
        let all: Vec<usize> = (0..n).collect();
        let f = (n - 1) / 3;
        (
            Just(n),
            subsequence(all.clone(), 2 * f + 1..=n),
            subsequence(all.clone(), 2 * f + 1..=n),
            subsequence(all, 0..2 * f + 1),
            any::<u64>(),
        )
    });
    runner
        .run(&strategy, |(n, a, b, few, seed)| {
            let cfg = SystemConfig::for_nodes(n).unwrap();
            let s = CryptoSuite::new(n, cfg.f, Sizes::of(&cfg), seed).unwrap();
            let tag = seed.to_le_bytes();
            let shares = |ids: &[usize]| -> Vec<Share> {
                ids.iter()
                    .map(|&i| s.tsig_share(NodeId(i as u8), &tag))
                    .collect()
            };
            let x = s.tsig_combine(&tag, &shares(&a)).unwrap();
            prop_assert_eq!(&x, &s.tsig_combine(&tag, &shares(&b)).unwrap());
            prop_assert!(s.tsig_verify(&tag, &x));
            let coin = |ids: &[usize]| -> Vec<Share> {
                ids.iter()
                    .map(|&i| s.coin_share(CoinScheme::ThresholdSig, NodeId(i as u8), &tag))
                    .collect()
            };
            prop_assert_eq!(
                s.coin_combine(CoinScheme::ThresholdSig, &tag, &coin(&a))
                    .unwrap(),
                s.coin_combine(CoinScheme::ThresholdSig, &tag, &coin(&b))
                    .unwrap()
            );
            let mut dup = shares(&few);
            dup.extend(dup.clone());
            prop_assert!(s.tsig_combine(&tag, &dup).is_err());
            prop_assert!(s
                .coin_combine(
                    CoinScheme::ThresholdSig,
                    &tag,
                    &coin(&few[..few.len().min(cfg.f)])
                )
                .is_err());
            Ok(())
        })
        .map_err(|e| format!("threshold properties: {e}"))?;
    let cfg = SystemConfig::default();
    let s = CryptoSuite::new(4, 1, Sizes::of(&cfg), 3).unwrap();
    let mut worst: f64 = 0.0;
    for scheme in [CoinScheme::ThresholdSig, CoinScheme::Flip] {
        let ones = (0..COIN_TAGS)
            .filter(|k| {
                let tag = k.to_le_bytes();
                let sh = [
                    s.coin_share(scheme, NodeId(0), &tag),
                    s.coin_share(scheme, NodeId(2), &tag),
                ];
                s.coin(scheme, &tag, &sh).unwrap()
            })
            .count();
        let p = ones as f64 / COIN_TAGS as f64;
        worst = worst.max((p - 0.5).abs());
    }
    if worst > COIN_TOLERANCE {
        return Err(format!("coin bias {worst:.4}"));
    }
    let sig = s.sign(NodeId(0), b"m").len();
    let shares: Vec<Share> = (0..3).map(|i| s.tsig_share(NodeId(i), b"m")).collect();
    let tsig = s.tsig_combine(b"m", &shares).unwrap().len();
    if (sig, tsig) != (SIG_LEN, TSIG_LEN) {
        return Err(format!("sizes {sig}/{tsig}"));
    }
    Ok(format!("share sets independent, below-threshold rejected, coin |p-0.5| = {worst:.4}, sizes {sig}/{tsig}"))
}

// ------------------------------------------------------------------ 8

fn multihop() -> Verdict {
    let t = Instant::now();
    let reg = registry();
    let mut specs = Vec::new();
    for p in PROTOCOLS {
        for seed in 0..MULTIHOP_SEEDS {
            for beh in [
                None,
                Some(Behavior::BadLeader),
                Some(Behavior::Silent),
                Some(Behavior::Equivocate),
            ] {
                let mut s = ScenarioSpec::new(p, TopologySpec::Multi(vec![4, 4, 4, 4]));
                s.seed = seed;
                s.name = format!("{p}-{seed}-{beh:?}");
                s.batching = if seed % 3 == 2 {
                    Batching::Baseline
                } else {
                    Batching::Batcher
                };
                let cluster = (seed % 4) as usize;
                if let Some(b) = beh {
                    let leader = leader_of(seed, 0, cluster, 4, 0);
                    s.byzantine = vec![ByzantineSpec {
                        node: (cluster * 4 + leader) as u8,
                        behavior: b.name().into(),
                    }];
                }
                specs.push((s, beh, cluster));
            }
        }
    }
    let results: Vec<Result<(), String>> = specs
        .par_iter()
        .map(|(s, beh, cluster)| {
            let o = run_scenario(s, &reg).map_err(|e| e.to_string())?;
            if let Safety::Fail(r) = &o.report.safety {
                return Err(format!("{}: {r}", s.name));
            }
            if !o.report.completed || o.report.recover_timeouts > 0 {
                return Err(format!("{}: did not complete cleanly", s.name));
            }
            let r = &o.result;
            let digests: Vec<_> = r.honest_ids().map(|i| r.outputs[i][0].0.digest()).collect();
            if digests.windows(2).any(|w| w[0] != w[1]) {
                return Err(format!("{}: global outputs differ", s.name));
            }
            if matches!(beh, Some(Behavior::BadLeader) | Some(Behavior::Silent)) {
                let replaced = (cluster * 4..cluster * 4 + 4)
                    .filter(|&i| r.honest[i])
                    .all(|i| r.machine_stats[i][&0].reattempts >= 1);
                if !replaced {
                    return Err(format!("{}: leader not replaced", s.name));
                }
            }
            Ok(())
        })
        .collect();
    if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
        return Err(e.clone());
    }
    let took = t.elapsed();
    if took > MULTIHOP_BUDGET {
        return Err(format!("took {took:?}"));
    }
    Ok(format!("16 nodes in 4 clusters, {} runs with identical global output and leader replacement, {took:.1?}", results.len()))
}

// ------------------------------------------------------------------ 9

fn determinism() -> Verdict {
    let reg = registry();
    let mut checked = 0;
    for p in PROTOCOLS {
        for topo in [
            TopologySpec::Single(4),
            TopologySpec::Multi(vec![4, 4, 4, 4]),
        ] {
            let mut s = sweep_spec(p, 7, 0.2);
            s.topology = topo;
            if matches!(s.topology, TopologySpec::Multi(_)) {
                s.byzantine.clear();
            }
            let once = |s: &ScenarioSpec| -> Result<(String, String), String> {
                let o: Outcome = run_scenario(s, &reg).map_err(|e| e.to_string())?;
                Ok((o.trace_text(), to_csv(&[o.report])))
            };
            let (t1, c1) = once(&s)?;
            let (t2, c2) = once(&s)?;
            if t1 != t2 || c1 != c2 {
                return Err(format!("{p}: runs differ"));
            }
            let again = to_csv(&from_csv(&c1).map_err(|e| e.to_string())?);
            if again != c1 {
                return Err(format!("{p}: csv re-emit differs"));
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} scenarios re-run with byte-identical traces and reports"
    ))
}

fn main() -> ExitCode {
    let mut ok = true;
    let mut report = |k: usize, name: &str, v: Verdict| match v {
        Ok(d) => println!("PASS criterion {k} ({name}): {d}"),
        Err(e) => {
            ok = false;
            println!("FAIL criterion {k} ({name}): {e}");
        }
    };
    report(1, "component message counts", table_one());
    report(2, "batching reduction", reduction());
    let s = sweep();
    report(3, "safety", safety(&s));
    report(4, "liveness", liveness(&s));
    report(5, "ABA", aba());
    report(6, "codec", codec());
    report(7, "crypto", crypto());
    report(8, "multi-hop", multihop());
    report(9, "determinism", determinism());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
