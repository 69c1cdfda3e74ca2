//! Signatures, threshold signatures, shared coins and threshold encryption.
//!
//! A trusted dealer shares a secret over a prime-order group with a degree
//! t-1 polynomial. Shares combine by Lagrange interpolation in the exponent,
//! so any t valid shares give the same unique value. Share and signature
//! verification is answered by the dealer, which the simulator holds; nodes
//! only ever see their own key material.

pub mod group;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::types::{expand, hash, NodeId, SystemConfig};
use group::{hash_to_group, hash_to_scalar, lagrange_at_zero, pow, G, Q};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SetupError {
    #[error("threshold {t} invalid for {n} parties")]
    Threshold { n: usize, t: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CombineError {
    #[error("need {need} valid distinct shares, have {have}")]
    NotEnoughShares { need: usize, have: usize },
    #[error("malformed ciphertext")]
    BadCiphertext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sizes {
    pub sig_len: usize,
    pub tsig_len: usize,
    pub proof_len: usize,
}

impl Sizes {
    pub fn of(cfg: &SystemConfig) -> Sizes {
        Sizes {
            sig_len: cfg.sig_len,
            tsig_len: cfg.tsig_len,
            proof_len: cfg.proof_len,
        }
    }
}

/// Polynomial secret sharing of one group secret.
#[derive(Clone, Debug)]
pub struct DealerSetup {
    pub n: usize,
    pub t: usize,
    secret: u64,
    shares: Vec<u64>,
    pub public_key: u64,
    /// `g^{x_i}` per party.
    pub verification: Vec<u64>,
}

impl DealerSetup {
    pub fn new(n: usize, t: usize, seed: u64) -> Result<DealerSetup, SetupError> {
        if t == 0 || t > n {
            return Err(SetupError::Threshold { n, t });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let coeffs: Vec<u64> = (0..t).map(|_| rng.gen_range(1..Q)).collect();
        let shares: Vec<u64> = (0..n)
            .map(|i| group::poly_eval(&coeffs, i as u64 + 1))
            .collect();
        let verification = shares.iter().map(|&s| pow(G, s)).collect();
        Ok(DealerSetup {
            n,
            t,
            secret: coeffs[0],
            shares,
            public_key: pow(G, coeffs[0]),
            verification,
        })
    }

    fn share_of(&self, i: NodeId) -> Option<u64> {
        self.shares.get(i.idx()).copied()
    }

    /// Interpolates `base^{x}` from `(index, base^{x_i})` pairs; exactly `t` are used.
    fn interpolate(&self, points: &[(NodeId, u64)]) -> u64 {
        let xs: Vec<u64> = points
            .iter()
            .take(self.t)
            .map(|(i, _)| i.0 as u64 + 1)
            .collect();
        let mut acc = 1u64;
        for (k, (_, y)) in points.iter().take(self.t).enumerate() {
            acc = group::mul(acc, pow(*y, lagrange_at_zero(xs[k], &xs)));
        }
        acc
    }
}

/// Share of a threshold signature, coin or decryption, tagged by signer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Share {
    pub signer: NodeId,
    pub bytes: Vec<u8>,
}

fn element_bytes(domain: &[u8], tag: &[u8], elem: u64, len: usize) -> Vec<u8> {
    let mut out = elem.to_le_bytes().to_vec();
    out.extend(expand(&[domain, tag, &elem.to_le_bytes()], len - 8));
    out
}

fn element_of(bytes: &[u8]) -> Option<u64> {
    let e = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?);
    group::is_element(e).then_some(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoinScheme {
    /// Unique threshold signature on the coin name.
    ThresholdSig,
    /// Threshold coin flipping: share plus a validity proof.
    Flip,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    pub tag: Vec<u8>,
    pub u: u64,
    pub body: Vec<u8>,
    pub check: [u8; 8],
}

impl Ciphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.tag.len() + self.body.len() + 20);
        out.extend((self.tag.len() as u16).to_le_bytes());
        out.extend(&self.tag);
        out.extend(self.u.to_le_bytes());
        out.extend((self.body.len() as u16).to_le_bytes());
        out.extend(&self.body);
        out.extend(self.check);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Ciphertext> {
        let tl = u16::from_le_bytes(b.get(..2)?.try_into().ok()?) as usize;
        let tag = b.get(2..2 + tl)?.to_vec();
        let mut at = 2 + tl;
        let u = u64::from_le_bytes(b.get(at..at + 8)?.try_into().ok()?);
        at += 8;
        let bl = u16::from_le_bytes(b.get(at..at + 2)?.try_into().ok()?) as usize;
        at += 2;
        let body = b.get(at..at + bl)?.to_vec();
        at += bl;
        let check: [u8; 8] = b.get(at..at + 8)?.try_into().ok()?;
        if at + 8 != b.len() {
            return None;
        }
        let ct = Ciphertext {
            tag,
            u,
            body,
            check,
        };
        (group::is_element(u) && ct.expected_check() == check).then_some(ct)
    }

    fn expected_check(&self) -> [u8; 8] {
        expand(
            &[b"tenc-check", &self.tag, &self.u.to_le_bytes(), &self.body],
            8,
        )
        .try_into()
        .unwrap()
    }
}

/// All key material for one group of parties: digital signature keys plus
/// three dealer setups (signatures at 2f+1, coins at f+1, decryption at f+1).
#[derive(Debug)]
pub struct CryptoSuite {
    pub n: usize,
    pub f: usize,
    pub sizes: Sizes,
    sig_keys: Vec<[u8; 32]>,
    pub tsig: DealerSetup,
    pub coin: DealerSetup,
    pub enc: DealerSetup,
}

impl CryptoSuite {
    pub fn new(n: usize, f: usize, sizes: Sizes, seed: u64) -> Result<CryptoSuite, SetupError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_0f_c0de);
        let sig_keys = (0..n).map(|_| rng.gen()).collect();
        Ok(CryptoSuite {
            n,
            f,
            sizes,
            sig_keys,
            tsig: DealerSetup::new(n, 2 * f + 1, rng.gen())?,
            coin: DealerSetup::new(n, f + 1, rng.gen())?,
            enc: DealerSetup::new(n, f + 1, rng.gen())?,
        })
    }

    // -- digital signatures

    pub fn sign(&self, signer: NodeId, msg: &[u8]) -> Vec<u8> {
        let key = &self.sig_keys[signer.idx()];
        expand(&[b"sig", key, msg], self.sizes.sig_len)
    }

    pub fn verify(&self, signer: NodeId, msg: &[u8], sig: &[u8]) -> bool {
        signer.idx() < self.n && sig.len() == self.sizes.sig_len && self.sign(signer, msg) == sig
    }

    // -- threshold signatures (2f+1)

    pub fn tsig_share(&self, signer: NodeId, tag: &[u8]) -> Share {
        self.share_on(&self.tsig, b"tsig-share", signer, tag)
    }

    pub fn tsig_verify_share(&self, tag: &[u8], share: &Share) -> bool {
        share.signer.idx() < self.n && self.tsig_share(share.signer, tag) == *share
    }

    pub fn tsig_combine(&self, tag: &[u8], shares: &[Share]) -> Result<Vec<u8>, CombineError> {
        let pts = self.valid_points(&self.tsig, shares, |sh| self.tsig_verify_share(tag, sh))?;
        Ok(element_bytes(
            b"tsig",
            tag,
            self.tsig.interpolate(&pts),
            self.sizes.tsig_len,
        ))
    }

    pub fn tsig_verify(&self, tag: &[u8], sig: &[u8]) -> bool {
        sig == self.tsig_oracle(tag).as_slice()
    }

    fn tsig_oracle(&self, tag: &[u8]) -> Vec<u8> {
        element_bytes(
            b"tsig",
            tag,
            pow(hash_to_group(tag), self.tsig.secret),
            self.sizes.tsig_len,
        )
    }

    // -- shared coin (f+1)

    pub fn coin_share_len(&self, scheme: CoinScheme) -> usize {
        match scheme {
            CoinScheme::ThresholdSig => self.sizes.tsig_len,
            CoinScheme::Flip => self.sizes.tsig_len + self.sizes.proof_len,
        }
    }

    pub fn coin_share(&self, scheme: CoinScheme, signer: NodeId, tag: &[u8]) -> Share {
        let mut s = self.share_on(&self.coin, b"coin-share", signer, tag);
        if scheme == CoinScheme::Flip {
            let xi = self.coin.share_of(signer).unwrap_or(0);
            s.bytes.extend(expand(
                &[b"coin-proof", &xi.to_le_bytes(), tag, &s.bytes[..8]],
                self.sizes.proof_len,
            ));
        }
        s
    }

    pub fn coin_verify_share(&self, scheme: CoinScheme, tag: &[u8], share: &Share) -> bool {
        share.signer.idx() < self.n && self.coin_share(scheme, share.signer, tag) == *share
    }

    /// Combined coin signature bytes; any f+1 valid shares give the same value.
    pub fn coin_combine(
        &self,
        scheme: CoinScheme,
        tag: &[u8],
        shares: &[Share],
    ) -> Result<Vec<u8>, CombineError> {
        let pts = self.valid_points(&self.coin, shares, |sh| {
            self.coin_verify_share(scheme, tag, sh)
        })?;
        Ok(element_bytes(
            b"coin",
            tag,
            self.coin.interpolate(&pts),
            self.sizes.tsig_len,
        ))
    }

    pub fn coin(
        &self,
        scheme: CoinScheme,
        tag: &[u8],
        shares: &[Share],
    ) -> Result<bool, CombineError> {
        self.coin_combine(scheme, tag, shares).map(|c| coin_bit(&c))
    }

    /// Coin value computed from the dealer secret; for audits only.
    pub fn coin_oracle(&self, tag: &[u8]) -> Vec<u8> {
        element_bytes(
            b"coin",
            tag,
            pow(hash_to_group(tag), self.coin.secret),
            self.sizes.tsig_len,
        )
    }

    // -- threshold encryption (f+1)

    pub fn encrypt(&self, tag: &[u8], plaintext: &[u8]) -> Ciphertext {
        let r = hash_to_scalar(
            b"tenc-r",
            &[tag, plaintext, &self.enc.public_key.to_le_bytes()],
        );
        let u = pow(G, r);
        let k = pow(self.enc.public_key, r);
        let ks = expand(&[b"tenc-ks", &k.to_le_bytes(), tag], plaintext.len());
        let body: Vec<u8> = plaintext.iter().zip(ks).map(|(a, b)| a ^ b).collect();
        let mut ct = Ciphertext {
            tag: tag.to_vec(),
            u,
            body,
            check: [0; 8],
        };
        ct.check = ct.expected_check();
        ct
    }

    pub fn dec_share(&self, signer: NodeId, ct: &Ciphertext) -> Share {
        let xi = self.enc.share_of(signer).unwrap_or(0);
        Share {
            signer,
            bytes: element_bytes(b"tdec-share", &ct.tag, pow(ct.u, xi), self.sizes.tsig_len),
        }
    }

    pub fn dec_verify_share(&self, ct: &Ciphertext, share: &Share) -> bool {
        share.signer.idx() < self.n && self.dec_share(share.signer, ct) == *share
    }

    pub fn decrypt(&self, ct: &Ciphertext, shares: &[Share]) -> Result<Vec<u8>, CombineError> {
        if !group::is_element(ct.u) || ct.expected_check() != ct.check {
            return Err(CombineError::BadCiphertext);
        }
        let pts = self.valid_points(&self.enc, shares, |sh| self.dec_verify_share(ct, sh))?;
        let k = self.enc.interpolate(&pts);
        let ks = expand(&[b"tenc-ks", &k.to_le_bytes(), &ct.tag], ct.body.len());
        Ok(ct.body.iter().zip(ks).map(|(a, b)| a ^ b).collect())
    }

    // -- helpers

    fn share_on(&self, setup: &DealerSetup, domain: &[u8], signer: NodeId, tag: &[u8]) -> Share {
        let xi = setup.share_of(signer).unwrap_or(0);
        Share {
            signer,
            bytes: element_bytes(
                domain,
                tag,
                pow(hash_to_group(tag), xi),
                self.sizes.tsig_len,
            ),
        }
    }

    /// Verified, deduplicated `(signer, element)` points, at least `t` of them.
    fn valid_points(
        &self,
        setup: &DealerSetup,
        shares: &[Share],
        ok: impl Fn(&Share) -> bool,
    ) -> Result<Vec<(NodeId, u64)>, CombineError> {
        let mut pts = BTreeMap::new();
        for s in shares {
            if pts.contains_key(&s.signer) || !ok(s) {
                continue;
            }
            if let Some(e) = element_of(&s.bytes) {
                pts.insert(s.signer, e);
            }
        }
        if pts.len() < setup.t {
            return Err(CombineError::NotEnoughShares {
                need: setup.t,
                have: pts.len(),
            });
        }
        Ok(pts.into_iter().collect())
    }
}

pub fn coin_bit(combined: &[u8]) -> bool {
    hash(combined).as_bytes()[0] & 1 == 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite(n: usize, f: usize) -> CryptoSuite {
        CryptoSuite::new(
            n,
            f,
            Sizes {
                sig_len: 40,
                tsig_len: 21,
                proof_len: 21,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn dealer_rejects_bad_threshold() {
        assert_eq!(
            DealerSetup::new(4, 5, 0).unwrap_err(),
            SetupError::Threshold { n: 4, t: 5 }
        );
        assert!(DealerSetup::new(4, 0, 0).is_err());
    }

    #[test]
    fn signature_roundtrip_and_forgery() {
        let s = suite(4, 1);
        let sig = s.sign(NodeId(2), b"m");
        assert_eq!(sig.len(), 40);
        assert!(s.verify(NodeId(2), b"m", &sig));
        assert!(!s.verify(NodeId(1), b"m", &sig));
        assert!(!s.verify(NodeId(2), b"m2", &sig));
    }

    #[test]
    fn tsig_any_subset_agrees() {
        let s = suite(7, 2);
        let tag = b"tag";
        let shares: Vec<Share> = (0..7).map(|i| s.tsig_share(NodeId(i), tag)).collect();
        let a = s.tsig_combine(tag, &shares[0..5]).unwrap();
        let b = s.tsig_combine(tag, &shares[2..7]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 21);
        assert!(s.tsig_verify(tag, &a));
        assert!(!s.tsig_verify(b"other", &a));
        assert!(matches!(
            s.tsig_combine(tag, &shares[0..4]),
            Err(CombineError::NotEnoughShares { need: 5, have: 4 })
        ));
    }

    #[test]
    fn duplicate_and_bad_shares_not_counted() {
        let s = suite(4, 1);
        let tag = b"t";
        let good = s.tsig_share(NodeId(0), tag);
        let mut bad = s.tsig_share(NodeId(1), tag);
        bad.bytes[3] ^= 1;
        let shares = vec![
            good.clone(),
            good.clone(),
            bad,
            s.tsig_share(NodeId(2), tag),
        ];
        assert!(matches!(
            s.tsig_combine(tag, &shares),
            Err(CombineError::NotEnoughShares { have: 2, .. })
        ));
    }

    #[test]
    fn coin_schemes() {
        let s = suite(4, 1);
        for scheme in [CoinScheme::ThresholdSig, CoinScheme::Flip] {
            let sh: Vec<Share> = (0..4)
                .map(|i| s.coin_share(scheme, NodeId(i), b"c"))
                .collect();
            assert_eq!(sh[0].bytes.len(), s.coin_share_len(scheme));
            assert!(s.coin_verify_share(scheme, b"c", &sh[1]));
            let a = s.coin(scheme, b"c", &sh[0..2]).unwrap();
            let b = s.coin(scheme, b"c", &sh[2..4]).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, coin_bit(&s.coin_oracle(b"c")));
        }
    }

    #[test]
    fn encryption_roundtrip() {
        let s = suite(4, 1);
        let ct = s.encrypt(b"e1", b"hello world");
        let ct2 = Ciphertext::from_bytes(&ct.to_bytes()).unwrap();
        assert_eq!(ct, ct2);
        let sh: Vec<Share> = [3u8, 1]
            .iter()
            .map(|&i| s.dec_share(NodeId(i), &ct))
            .collect();
        assert_eq!(s.decrypt(&ct, &sh).unwrap(), b"hello world");
        assert!(s.decrypt(&ct, &sh[..1]).is_err());
        let mut bytes = ct.to_bytes();
        let last = bytes.len() - 10;
        bytes[last] ^= 0x40;
        assert!(Ciphertext::from_bytes(&bytes).is_none());
    }
}
