use proptest::prelude::*;
use proptest::sample::subsequence;
use wbft_core::crypto::{CoinScheme, CombineError, CryptoSuite, Share, Sizes};
use wbft_core::{NodeId, SystemConfig};

fn suite(n: usize, seed: u64) -> CryptoSuite {
    let cfg = SystemConfig::for_nodes(n).unwrap();
    CryptoSuite::new(n, cfg.f, Sizes::of(&cfg), seed).unwrap()
}

fn ids(v: &[usize]) -> Vec<NodeId> {
    v.iter().map(|&i| NodeId(i as u8)).collect()
}

/// `n`, then two independent subsets of `0..n` with at least `t(n)` members.
fn two_sets(t: fn(usize) -> usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>, u64)> {
    prop_oneof![Just(4usize), Just(7), Just(10)].prop_flat_map(move |n| {
        let all: Vec<usize> = (0..n).collect();
        (
            Just(n),
            subsequence(all.clone(), t(n)..=n),
            subsequence(all, t(n)..=n),
            any::<u64>(),
        )
    })
}

fn tsig_t(n: usize) -> usize {
    2 * ((n - 1) / 3) + 1
}

fn coin_t(n: usize) -> usize {
    (n - 1) / 3 + 1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tsig_independent_of_share_set((n, a, b, seed) in two_sets(tsig_t), tag in any::<[u8; 8]>()) {
        let s = suite(n, seed);
        let sa: Vec<Share> = ids(&a).into_iter().map(|i| s.tsig_share(i, &tag)).collect();
        let sb: Vec<Share> = ids(&b).into_iter().rev().map(|i| s.tsig_share(i, &tag)).collect();
        let x = s.tsig_combine(&tag, &sa).unwrap();
        prop_assert_eq!(&x, &s.tsig_combine(&tag, &sb).unwrap());
        prop_assert!(s.tsig_verify(&tag, &x));
        prop_assert!(!s.tsig_verify(b"other", &x));
    }

    #[test]
    fn coin_independent_of_share_set((n, a, b, seed) in two_sets(coin_t), tag in any::<[u8; 8]>()) {
        let s = suite(n, seed);
        for scheme in [CoinScheme::ThresholdSig, CoinScheme::Flip] {
            let sa: Vec<Share> = ids(&a).into_iter().map(|i| s.coin_share(scheme, i, &tag)).collect();
            let sb: Vec<Share> = ids(&b).into_iter().map(|i| s.coin_share(scheme, i, &tag)).collect();
            let x = s.coin_combine(scheme, &tag, &sa).unwrap();
            prop_assert_eq!(&x, &s.coin_combine(scheme, &tag, &sb).unwrap());
            prop_assert_eq!(&x, &s.coin_oracle(&tag));
        }
    }

    #[test]
    fn decryption_independent_of_share_set((n, a, b, seed) in two_sets(coin_t), msg in proptest::collection::vec(any::<u8>(), 0..100)) {
        let s = suite(n, seed);
        let ct = s.encrypt(b"tag", &msg);
        let sa: Vec<Share> = ids(&a).into_iter().map(|i| s.dec_share(i, &ct)).collect();
        let sb: Vec<Share> = ids(&b).into_iter().map(|i| s.dec_share(i, &ct)).collect();
        prop_assert_eq!(&s.decrypt(&ct, &sa).unwrap(), &msg);
        prop_assert_eq!(&s.decrypt(&ct, &sb).unwrap(), &msg);
    }

    #[test]
    fn below_threshold_rejected(
        (n, few, seed) in prop_oneof![Just(4usize), Just(7), Just(10)].prop_flat_map(|n| {
            (Just(n), subsequence((0..n).collect::<Vec<_>>(), 0..tsig_t(n)), any::<u64>())
        }),
        tag in any::<[u8; 8]>(),
    ) {
        let s = suite(n, seed);
        let mut shares: Vec<Share> = ids(&few).into_iter().map(|i| s.tsig_share(i, &tag)).collect();
        // Duplicates and forged shares add nothing.
        shares.extend(shares.clone());
        if let Some(i) = (0..n).find(|i| !few.contains(i)) {
            shares.push(Share { signer: NodeId(i as u8), bytes: vec![1; 21] });
            shares.push(s.tsig_share(NodeId(i as u8), b"different tag"));
        }
        let err = s.tsig_combine(&tag, &shares).unwrap_err();
        prop_assert_eq!(err, CombineError::NotEnoughShares { need: tsig_t(n), have: few.len() });
        let coin_few: Vec<Share> = ids(&few).into_iter().take(coin_t(n) - 1).map(|i| s.coin_share(CoinScheme::ThresholdSig, i, &tag)).collect();
        prop_assert!(s.coin_combine(CoinScheme::ThresholdSig, &tag, &coin_few).is_err());
        let ct = s.encrypt(&tag, b"secret");
        let dec_few: Vec<Share> = ids(&few).into_iter().take(coin_t(n) - 1).map(|i| s.dec_share(i, &ct)).collect();
        prop_assert!(s.decrypt(&ct, &dec_few).is_err());
    }
}

#[test]
fn coin_bias_over_many_tags() {
    let s = suite(4, 11);
    for scheme in [CoinScheme::ThresholdSig, CoinScheme::Flip] {
        let total = 10_000;
        let ones = (0..total as u32)
            .filter(|k| {
                let tag = k.to_le_bytes();
                let shares: Vec<Share> = [1u8, 3]
                    .iter()
                    .map(|&i| s.coin_share(scheme, NodeId(i), &tag))
                    .collect();
                s.coin(scheme, &tag, &shares).unwrap()
            })
            .count();
        let p = ones as f64 / total as f64;
        assert!((p - 0.5).abs() <= 0.02, "{scheme:?} bias {p}");
    }
}

#[test]
fn default_serialized_sizes() {
    let cfg = SystemConfig::default();
    assert_eq!((cfg.sig_len, cfg.tsig_len), (40, 21));
    let s = suite(4, 1);
    assert_eq!(s.sign(NodeId(0), b"m").len(), 40);
    let shares: Vec<Share> = (0..3).map(|i| s.tsig_share(NodeId(i), b"m")).collect();
    assert!(shares.iter().all(|x| x.bytes.len() == 21));
    assert_eq!(s.tsig_combine(b"m", &shares).unwrap().len(), 21);
    assert_eq!(
        s.coin_share(CoinScheme::ThresholdSig, NodeId(0), b"m")
            .bytes
            .len(),
        21
    );
    assert_eq!(
        s.coin_combine(
            CoinScheme::ThresholdSig,
            b"m",
            &[
                s.coin_share(CoinScheme::ThresholdSig, NodeId(2), b"m"),
                s.coin_share(CoinScheme::ThresholdSig, NodeId(0), b"m")
            ]
        )
        .unwrap()
        .len(),
        21
    );
}
