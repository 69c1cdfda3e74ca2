use std::sync::Arc;

use wbft_core::aba::AbaKind;
use wbft_core::components::BatchMode;
use wbft_core::consensus::component::ComponentKind;
use wbft_core::consensus::registry::{AbaInput, ComponentProtocol};
use wbft_core::packets::{self, Body};
use wbft_core::run::{run, RunResult, RunSetup};
use wbft_core::SystemConfig;

fn run_component(kind: ComponentKind, n: usize, mode: BatchMode) -> (RunResult, SystemConfig) {
    let cfg = SystemConfig::for_nodes(n).unwrap();
    let mut s = RunSetup::new(
        cfg.clone(),
        Arc::new(ComponentProtocol {
            kind,
            input: AbaInput::Ones,
        }),
    );
    s.mode = mode;
    s.seed = 7;
    let r = run(&s).unwrap();
    assert!(!r.timed_out, "{kind:?} n={n} {mode:?} timed out");
    r.check_agreement().unwrap();
    (r, cfg)
}

fn round_of(body: &Body) -> Option<u8> {
    match body {
        Body::AbaLc(b) => Some(b.round),
        Body::AbaSc(b) => Some(b.round),
        Body::Baseline(b) => Some(b.round),
        _ => None,
    }
}

/// Per-node transmissions; for agreement, only packets of round 1.
fn counts(kind: ComponentKind, n: usize, mode: BatchMode) -> Vec<usize> {
    let (r, cfg) = run_component(kind, n, mode);
    let layout = cfg.layout();
    (0..n)
        .map(|i| {
            r.transmissions_of(i)
                .filter(|t| match kind {
                    ComponentKind::Aba(_) => {
                        let pk = packets::decode(t.bytes.as_ref().unwrap(), &layout).unwrap();
                        round_of(&pk.body) == Some(1)
                    }
                    _ => true,
                })
                .count()
        })
        .collect()
}

#[test]
fn table_one_counts() {
    for n in [4usize, 7, 10] {
        let expect = [
            (ComponentKind::Rbc, 3, 1 + 2 * n),
            (ComponentKind::Cbc, 3, 1 + (n - 1) + 1),
            (ComponentKind::Prbc, 4, 1 + 3 * n),
            (
                ComponentKind::Aba(AbaKind::LocalCoin),
                9,
                3 * n * (1 + 2 * n),
            ),
            (ComponentKind::Aba(AbaKind::SharedCoin), 3, 3 * n),
        ];
        for (kind, batched, base) in expect {
            let b = counts(kind, n, BatchMode::Batched);
            let u = counts(kind, n, BatchMode::Baseline);
            println!("n={n} {:?} batched={b:?} baseline={u:?}", kind);
            assert!(
                b.iter().all(|&c| c == batched),
                "{kind:?} n={n} batched {b:?}"
            );
            assert!(
                u.iter().all(|&c| c == base),
                "{kind:?} n={n} baseline {u:?}"
            );
        }
    }
}
