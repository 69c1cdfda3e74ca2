//! Packet generators and golden dumps shared by the codec tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::path::PathBuf;

use proptest::collection::vec;
use proptest::option;
use proptest::prelude::*;
use wbft_core::packets::{self, *};
use wbft_core::{Hash, NodeId, NodeSet, SystemConfig, Vote};

pub fn cfg(n: usize) -> SystemConfig {
    SystemConfig::for_nodes(n).unwrap()
}

pub fn bytes(len: usize) -> impl Strategy<Value = Vec<u8>> {
    vec(any::<u8>(), len)
}

pub fn set(n: usize) -> impl Strategy<Value = NodeSet> {
    (0..(1u64 << n)).prop_map(NodeSet)
}

pub fn hash(len: usize) -> impl Strategy<Value = Hash> {
    bytes(len).prop_map(|b| Hash::from_slice(&b))
}

pub fn keyed(p: LayoutParams) -> impl Strategy<Value = Vec<Keyed>> {
    vec((0..p.n as u8, bytes(p.tsig_len)), 0..=p.n)
}

pub fn share() -> impl Strategy<Value = Option<Vec<u8>>> {
    option::of(vec(any::<u8>(), 1..=64))
}

pub fn vote() -> impl Strategy<Value = Option<Vote>> {
    prop_oneof![
        Just(None),
        Just(Some(Vote::Zero)),
        Just(Some(Vote::One)),
        Just(Some(Vote::Bottom))
    ]
}

pub fn block(n: usize) -> impl Strategy<Value = SmallBlock> {
    (vec(vote(), n), set(n), set(n), set(n), set(n)).prop_map(
        |(values, echo, ready, echo_nack, ready_nack)| SmallBlock {
            values,
            echo,
            ready,
            echo_nack,
            ready_nack,
        },
    )
}

/// Subsets of exactly `k` of `n` ids.
pub fn id_list(n: usize, k: usize) -> impl Strategy<Value = NodeSet> {
    proptest::sample::subsequence((0..n).collect::<Vec<_>>(), k).prop_map(|ids| {
        let mut s = NodeSet::default();
        for i in ids {
            s.insert(i);
        }
        s
    })
}

pub fn init(p: LayoutParams, cap: usize) -> impl Strategy<Value = InitBody> {
    (
        any::<u8>(),
        (1..=u16::MAX).prop_flat_map(|t| (0..t, Just(t))),
        vec(any::<u8>(), 0..=cap),
        set(p.n),
    )
        .prop_map(
            |(instance, (seq, total), fragment, initial_nack)| InitBody {
                instance,
                seq,
                total,
                fragment,
                initial_nack,
            },
        )
}

pub fn rbc_init(p: LayoutParams, cap: usize) -> BoxedStrategy<Body> {
    prop_oneof![
        init(p, cap).prop_map(Body::RbcInit),
        init(p, cap).prop_map(Body::CbcInit)
    ]
    .boxed()
}

pub fn rbc_er(p: LayoutParams) -> BoxedStrategy<Body> {
    (
        vec(hash(p.hash_len), p.n),
        set(p.n),
        set(p.n),
        set(p.n),
        set(p.n),
        set(p.n),
    )
        .prop_map(
            |(hashes, echo, ready, echo_nack, ready_nack, initial_nack)| {
                Body::RbcEr(RbcErBody {
                    hashes,
                    echo,
                    ready,
                    echo_nack,
                    ready_nack,
                    initial_nack,
                })
            },
        )
        .boxed()
}

pub fn cbc_ef(p: LayoutParams) -> BoxedStrategy<Body> {
    (
        vec(hash(p.hash_len), p.n),
        keyed(p),
        keyed(p),
        set(p.n),
        set(p.n),
        set(p.n),
    )
        .prop_map(
            |(hashes, echo_shares, finish, echo_nack, finish_nack, initial_nack)| {
                Body::CbcEf(CbcEfBody {
                    hashes,
                    echo_shares,
                    finish,
                    echo_nack,
                    finish_nack,
                    initial_nack,
                })
            },
        )
        .boxed()
}

pub fn prbc_done(p: LayoutParams) -> BoxedStrategy<Body> {
    (keyed(p), set(p.n))
        .prop_map(|(shares, done_nack)| Body::PrbcDone(PrbcDoneBody { shares, done_nack }))
        .boxed()
}

pub fn rbc_small(p: LayoutParams) -> BoxedStrategy<Body> {
    (any::<u8>(), block(p.n))
        .prop_map(|(session, block)| Body::RbcSmall(RbcSmallBody { session, block }))
        .boxed()
}

pub fn cbc_small(p: LayoutParams) -> BoxedStrategy<Body> {
    let value = if p.small_ids() {
        id_list(p.n, 2 * p.f + 1).prop_map(SmallValue::Ids).boxed()
    } else {
        hash(p.hash_len).prop_map(SmallValue::Digest).boxed()
    };
    (
        vec(option::of(value), p.n),
        keyed(p),
        keyed(p),
        set(p.n),
        set(p.n),
    )
        .prop_map(|(values, echo_shares, finish, echo_nack, finish_nack)| {
            Body::CbcSmall(CbcSmallBody {
                values,
                echo_shares,
                finish,
                echo_nack,
                finish_nack,
            })
        })
        .boxed()
}

pub fn aba_lc(p: LayoutParams) -> BoxedStrategy<Body> {
    let n = p.n;
    (
        any::<u8>(),
        any::<u8>(),
        vec(
            (block(n), block(n), block(n)).prop_map(|(a, b, c)| [a, b, c]),
            0..=n,
        ),
    )
        .prop_map(|(round, base, blocks)| {
            Body::AbaLc(AbaLcBody {
                round,
                base,
                blocks,
            })
        })
        .boxed()
}

pub fn aba_sc(p: LayoutParams) -> BoxedStrategy<Body> {
    let entry = (0..4u8, 0..4u8, 0..4u8, 0..4u8).prop_map(|(bval, aux, bin, aux_nack)| ScEntry {
        bval,
        aux,
        bin,
        aux_nack,
    });
    (
        any::<u8>(),
        any::<u8>(),
        vec(entry, 0..=p.n),
        share(),
        set(p.n),
    )
        .prop_map(|(round, base, entries, share, share_nack)| {
            Body::AbaSc(AbaScBody {
                round,
                base,
                entries,
                share,
                share_nack,
            })
        })
        .boxed()
}

/// Layouts outside the eight batched ones.
pub fn auxiliary(p: LayoutParams) -> BoxedStrategy<Body> {
    let n = p.n;
    prop_oneof![
        (any::<u8>(), vec((any::<u8>(), any::<u16>()), 0..=16))
            .prop_map(|(family, requests)| Body::Recover(RecoverBody { family, requests })),
        (keyed(p), set(n)).prop_map(|(shares, nack)| Body::DecShare(DecShareBody { shares, nack })),
        (any::<u8>(), any::<u8>(), share(), set(n)).prop_map(|(purpose, attempt, share, nack)| {
            Body::CoinShare(CoinShareBody {
                purpose,
                attempt,
                share,
                nack,
            })
        }),
        (any::<u8>(), hash(p.hash_len), bytes(p.tsig_len), set(n)).prop_map(
            |(cluster, digest, sig, nack)| Body::Attest(AttestBody {
                cluster,
                digest,
                sig,
                nack
            })
        ),
        (any::<u8>(), hash(p.hash_len), share(), set(n)).prop_map(
            |(attempt, digest, sig, included)| {
                Body::GlobalDone(GlobalDoneBody {
                    attempt,
                    digest,
                    included,
                    sig,
                })
            }
        ),
        (
            any::<[u8; 5]>(),
            vec(any::<u8>(), 0..=64),
            0..(1u64 << (n - 1))
        )
            .prop_map(|(h, value, nack)| {
                Body::Baseline(BaselineBody {
                    family: h[0],
                    phase: h[1],
                    round: h[2],
                    instance: h[3],
                    sub: h[4],
                    value,
                    nack,
                })
            }),
    ]
    .boxed()
}

pub fn packet(p: LayoutParams, body: BoxedStrategy<Body>) -> impl Strategy<Value = Packet> {
    (
        any::<bool>(),
        0..p.n as u8,
        any::<u16>(),
        option::of(any::<[u8; 3]>()),
        body,
        bytes(p.sig_len),
    )
        .prop_map(|(retx, s, epoch, routing, body, signature)| Packet {
            header: Header {
                retx,
                sender: NodeId(s),
                epoch,
                routing: routing.map(|r| Routing {
                    src_cluster: r[0],
                    dst_cluster: r[1],
                    seq: r[2],
                }),
            },
            body,
            signature,
        })
}

pub type Layout = fn(LayoutParams) -> BoxedStrategy<Body>;

/// A size, then a packet of that size built by `layout`.
pub fn sized(layout: Layout) -> impl Strategy<Value = (usize, Packet)> {
    prop_oneof![Just(4usize), Just(7), Just(10), Just(16)].prop_flat_map(move |n| {
        let p = cfg(n).layout();
        (Just(n), packet(p, layout(p)))
    })
}

pub fn sized_init() -> impl Strategy<Value = (usize, Packet)> {
    prop_oneof![Just(4usize), Just(7), Just(10), Just(16)].prop_flat_map(|n| {
        let c = cfg(n);
        let p = c.layout();
        (Just(n), packet(p, rbc_init(p, p.fragment_cap(c.d_align))))
    })
}

/// One fixed packet per type, filled from a byte counter.
pub fn golden_packets(n: usize) -> Vec<Packet> {
    let p = cfg(n).layout();
    let mut ctr = 0u8;
    let mut fill = |len: usize| -> Vec<u8> {
        (0..len)
            .map(|_| {
                ctr = ctr.wrapping_add(37);
                ctr
            })
            .collect()
    };
    let h = Hash::from_slice(&fill(p.hash_len));
    let even = NodeSet((0..n).filter(|i| i % 2 == 0).fold(0, |a, i| a | 1 << i));
    let low = NodeSet((1 << (2 * p.f + 1)) - 1);
    let mut blk = SmallBlock::empty(n);
    blk.values[0] = Some(Vote::One);
    blk.values[1] = Some(Vote::Zero);
    blk.values[n - 1] = Some(Vote::Bottom);
    blk.echo = even;
    blk.ready_nack = low;
    let keyed = vec![(0u8, fill(p.tsig_len)), ((n - 1) as u8, fill(p.tsig_len))];
    let bodies = vec![
        Body::RbcInit(InitBody {
            instance: 1,
            seq: 0,
            total: 2,
            fragment: fill(40),
            initial_nack: low,
        }),
        Body::CbcInit(InitBody {
            instance: 2,
            seq: 1,
            total: 2,
            fragment: fill(7),
            initial_nack: even,
        }),
        Body::RbcEr(RbcErBody {
            hashes: vec![h; n],
            echo: even,
            ready: low,
            echo_nack: even,
            ready_nack: NodeSet(0),
            initial_nack: NodeSet::full(n),
        }),
        Body::CbcEf(CbcEfBody {
            hashes: vec![h; n],
            echo_shares: keyed.clone(),
            finish: keyed[..1].to_vec(),
            echo_nack: low,
            finish_nack: even,
            initial_nack: NodeSet::full(n),
        }),
        Body::PrbcDone(PrbcDoneBody {
            shares: keyed.clone(),
            done_nack: low,
        }),
        Body::RbcSmall(RbcSmallBody {
            session: 3,
            block: blk.clone(),
        }),
        Body::CbcSmall(CbcSmallBody {
            values: (0..n)
                .map(|i| (i == 1).then_some(SmallValue::Ids(low)))
                .collect(),
            echo_shares: keyed.clone(),
            finish: Vec::new(),
            echo_nack: even,
            finish_nack: NodeSet(0),
        }),
        Body::AbaLc(AbaLcBody {
            round: 1,
            base: 0,
            blocks: vec![[blk.clone(), SmallBlock::empty(n), blk]],
        }),
        Body::AbaSc(AbaScBody {
            round: 2,
            base: 0,
            entries: (0..n)
                .map(|i| ScEntry {
                    bval: (i % 4) as u8,
                    aux: 1,
                    bin: 3,
                    aux_nack: (i % 2) as u8,
                })
                .collect(),
            share: Some(fill(p.tsig_len)),
            share_nack: even,
        }),
        Body::Recover(RecoverBody {
            family: 1,
            requests: vec![(0, 0xFFFF), (2, 1)],
        }),
        Body::DecShare(DecShareBody {
            shares: keyed,
            nack: low,
        }),
        Body::CoinShare(CoinShareBody {
            purpose: 1,
            attempt: 0,
            share: Some(fill(p.tsig_len)),
            nack: even,
        }),
        Body::Attest(AttestBody {
            cluster: 0x40,
            digest: h,
            sig: fill(p.tsig_len),
            nack: low,
        }),
        Body::GlobalDone(GlobalDoneBody {
            attempt: 0xFF,
            digest: h,
            included: low,
            sig: None,
        }),
        Body::Baseline(BaselineBody {
            family: 4,
            phase: 2,
            round: 1,
            instance: 3,
            sub: 0,
            value: fill(3),
            nack: 0b101,
        }),
    ];
    bodies
        .into_iter()
        .enumerate()
        .map(|(i, body)| Packet {
            header: Header {
                retx: i % 3 == 0,
                sender: NodeId((i % n) as u8),
                epoch: 0x0102,
                routing: (i % 4 == 1).then_some(Routing {
                    src_cluster: 1,
                    dst_cluster: 2,
                    seq: 3,
                }),
            },
            body,
            signature: fill(p.sig_len),
        })
        .collect()
}

pub fn dump(n: usize) -> String {
    let c = cfg(n);
    let p = c.layout();
    let mut s = format!("# n={n} d_align={}\n", c.d_align);
    for pk in golden_packets(n) {
        let enc = packets::encode(&pk, &p).unwrap();
        assert_eq!(packets::decode(&enc, &p).unwrap(), pk);
        let hex: String = enc.iter().map(|b| format!("{b:02x}")).collect();
        s.push_str(&format!("{} {}\n", pk.body.packet_type().name(), hex));
    }
    s
}

pub fn golden_path(n: usize) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/golden")
        .join(format!("packets_n{n}.txt"))
}

/// Batched layouts other than INIT, which needs a fragment cap.
pub const LAYOUTS: [(&str, Layout); 7] = [
    ("RBC_ER", rbc_er),
    ("CBC_EF", cbc_ef),
    ("PRBC_DONE", prbc_done),
    ("RBC_SMALL", rbc_small),
    ("CBC_SMALL", cbc_small),
    ("ABA_LC", aba_lc),
    ("ABA_SC", aba_sc),
];
