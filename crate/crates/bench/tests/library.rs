use proptest::prelude::*;
use wbft_bench::report::{from_csv, to_csv, CSV_HEADER};
use wbft_bench::{
    check_safety, compare, run_scenario, Batching, BenchError, ByzantineSpec, EpochRow, NodeRow,
    RunReport, Safety, ScenarioSpec, TopologySpec,
};
use wbft_core::consensus::{EpochOutput, Registry};
use wbft_core::NodeId;

fn config_err<T>(r: Result<T, BenchError>) -> String {
    match r {
        Err(BenchError::Config(m)) => m,
        Err(e) => panic!("expected a config error, got {e}"),
        Ok(_) => panic!("expected a config error"),
    }
}

#[test]
fn scenario_toml_roundtrip() {
    let text = r#"
name = "x"
protocol = "dumbo-sc"
batching = "baseline"
topology = { multi = [4, 7] }
byzantine = [{ node = 5, behavior = "bad-leader" }]
loss_rate = 0.1
epochs = 3
seed = 9
system = { batch_window = 12 }
"#;
    let s = ScenarioSpec::from_toml_str(text).unwrap();
    assert_eq!(s.topology, TopologySpec::Multi(vec![4, 7]));
    assert_eq!(s.topology.to_string(), "multi:4x7");
    assert_eq!(s.batching, Batching::Baseline);
    assert_eq!(s.system_config(4).unwrap().batch_window, 12);
    assert_eq!(ScenarioSpec::from_toml_str(&s.to_toml()).unwrap(), s);
}

#[test]
fn invalid_scenarios_are_config_errors() {
    let base = "protocol = \"hbbft-lc\"\ntopology = { single = 4 }\n";
    let cases = [
        ("protocol = \"pbft\"\ntopology = { single = 4 }\n", "unknown protocol"),
        ("topology = { single = 4 }\n", "exactly one"),
        ("protocol = \"beat\"\ncomponent = \"rbc\"\ntopology = { single = 4 }\n", "exactly one"),
        ("component = \"rbc\"\ntopology = { multi = [4, 4] }\n", "single-hop"),
        (&format!("{base}loss_rate = 1.0\n"), "loss_rate"),
        (&format!("{base}delay_prob = 1.5\n"), "delay_prob"),
        (&format!("{base}epochs = 0\n"), "epochs"),
        (&format!("{base}byzantine = [{{ node = 4, behavior = \"silent\" }}]\n"), "out of range"),
        (&format!("{base}byzantine = [{{ node = 1, behavior = \"lazy\" }}]\n"), "unknown behavior"),
        (
            &format!("{base}byzantine = [{{ node = 1, behavior = \"silent\" }}, {{ node = 2, behavior = \"silent\" }}]\n"),
            "exceed f",
        ),
        (&format!("{base}system = {{ f = 0 }}\n"), "n_nodes or f"),
        (&format!("{base}colour = 3\n"), "unknown field"),
        ("protocol = \"beat\"\ntopology = { single = 3 }\n", ""),
    ];
    for (text, needle) in cases {
        let m = config_err(ScenarioSpec::from_toml_str(text));
        assert!(m.contains(needle), "{text:?}: {m}");
    }
}

#[test]
fn registry_resolves_every_target() {
    let reg = Registry::builtin();
    for p in wbft_bench::spec::PROTOCOLS {
        let s = ScenarioSpec::new(p, TopologySpec::Single(4));
        assert_eq!(s.setup(&reg).unwrap().protocol.name(), p);
    }
    for c in ["rbc", "cbc", "prbc", "aba-lc", "aba-sc", "aba-cp"] {
        assert_eq!(
            ScenarioSpec::component(c, 4)
                .setup(&reg)
                .unwrap()
                .protocol
                .name(),
            c
        );
    }
    let s = ScenarioSpec::new("beat", TopologySpec::Single(4));
    assert!(s.setup(&Registry::default()).is_err());
}

#[test]
fn compare_requires_matching_specs() {
    let reg = Registry::builtin();
    let a = ScenarioSpec::component("cbc", 4);
    let mut b = a.clone();
    b.seed += 1;
    assert!(config_err(compare(&a, &b, &reg)).contains("differ"));
    let (cmp, _) = compare(&a, &a, &reg).unwrap();
    assert_eq!(cmp.rows().map(|r| r.1), [1.0; 4]);
}

#[test]
fn tampered_outputs_fail_safety() {
    let reg = Registry::builtin();
    let mut spec = ScenarioSpec::new("dumbo-lc", TopologySpec::Single(4));
    spec.byzantine = vec![ByzantineSpec {
        node: 0,
        behavior: "silent".into(),
    }];
    let mut o = run_scenario(&spec, &reg).unwrap();
    assert_eq!(o.report.safety, Safety::Pass);
    let cfg = spec.system_config(4).unwrap();

    let mut r = o.result;
    r.outputs[2][0].0.included.pop();
    let reason = check_safety(&spec, &cfg, &r).unwrap_err();
    assert!(reason.contains("committed different outputs"), "{reason}");

    for i in r.honest_ids().collect::<Vec<_>>() {
        r.outputs[i][0].0 = EpochOutput {
            epoch: 0,
            included: vec![(NodeId(1), vec![1])],
        };
    }
    let reason = check_safety(&spec, &cfg, &r).unwrap_err();
    assert!(reason.contains("vector of 1 entries"), "{reason}");

    spec.protocol = Some("hbbft-lc".into());
    o = run_scenario(&spec, &reg).unwrap();
    let mut r = o.result;
    r.machine_stats[1].get_mut(&0).unwrap().quorum_tick = Some(u64::MAX);
    let reason = check_safety(&spec, &cfg, &r).unwrap_err();
    assert!(reason.contains("before its broadcast quorum"), "{reason}");
}

#[test]
fn csv_header_and_reemit() {
    let reg = Registry::builtin();
    let spec = ScenarioSpec::new("hbbft-sc", TopologySpec::Single(4));
    let o = run_scenario(&spec, &reg).unwrap();
    let csv = to_csv(&[o.report.clone()]);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    let back = from_csv(&csv).unwrap();
    assert_eq!(back, vec![o.report]);
    assert_eq!(to_csv(&back), csv);
    let broken = csv.replace(",throughput,", ",throughput,1");
    assert!(from_csv(&broken).is_err());
}

fn report() -> impl Strategy<Value = RunReport> {
    let node = (
        any::<u16>(),
        any::<bool>(),
        any::<u64>(),
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(
            |(node, honest, transmissions, contention_attempts, bytes_sent)| NodeRow {
                node,
                honest,
                transmissions,
                contention_attempts,
                bytes_sent,
            },
        );
    let epoch = (any::<u16>(), 0..1u64 << 40, 0..64usize, 0..1u64 << 20).prop_map(
        |(epoch, latency_ticks, included, b)| EpochRow {
            epoch,
            latency_ticks,
            included,
            included_bytes: b,
        },
    );
    let safety = prop_oneof![Just(Safety::Pass), "[ -~]{0,30}".prop_map(Safety::Fail)];
    (
        "[a-z0-9, \"-]{1,12}",
        "[a-z-]{1,10}",
        any::<bool>(),
        any::<u64>(),
        proptest::collection::vec(node, 0..5),
        proptest::collection::vec(epoch, 0..4),
        any::<u64>(),
        any::<bool>(),
        any::<u64>(),
        safety,
    )
        .prop_map(
            |(
                scenario,
                protocol,
                b,
                seed,
                nodes,
                epochs,
                total_ticks,
                completed,
                recover_timeouts,
                safety,
            )| {
                RunReport {
                    scenario,
                    protocol,
                    batching: if b {
                        Batching::Batcher
                    } else {
                        Batching::Baseline
                    },
                    topology: "single:4".into(),
                    seed,
                    nodes,
                    epochs,
                    total_ticks,
                    completed,
                    recover_timeouts,
                    safety,
                }
            },
        )
}

proptest! {
    #[test]
    fn csv_roundtrip(reports in proptest::collection::vec(report(), 1..4)) {
        // Adjacent reports are told apart by name.
        let mut reports = reports;
        for (k, r) in reports.iter_mut().enumerate() {
            r.scenario = format!("{}{k}", r.scenario);
        }
        let csv = to_csv(&reports);
        let back = from_csv(&csv).unwrap();
        prop_assert_eq!(&back, &reports);
        prop_assert_eq!(to_csv(&back), csv);
    }
}
