//! Arithmetic in the order-q subgroup of quadratic residues modulo the safe
//! prime p = 2q + 1.

use sha2::{Digest, Sha256};

pub const P: u64 = 4_611_686_018_427_377_339;
pub const Q: u64 = 2_305_843_009_213_688_669;
pub const G: u64 = 4;

pub fn mul(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % P as u128) as u64
}

pub fn pow(mut base: u64, mut e: u64) -> u64 {
    let mut acc = 1u64;
    base %= P;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul(acc, base);
        }
        base = mul(base, base);
        e >>= 1;
    }
    acc
}

pub fn is_element(x: u64) -> bool {
    x != 0 && x < P && pow(x, Q) == 1
}

pub fn scalar_add(a: u64, b: u64) -> u64 {
    ((a as u128 + b as u128) % Q as u128) as u64
}

pub fn scalar_sub(a: u64, b: u64) -> u64 {
    ((a as u128 + Q as u128 - (b % Q) as u128) % Q as u128) as u64
}

pub fn scalar_mul(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % Q as u128) as u64
}

pub fn scalar_inv(a: u64) -> u64 {
    let mut acc = 1u64;
    let mut base = a % Q;
    let mut e = Q - 2;
    while e > 0 {
        if e & 1 == 1 {
            acc = scalar_mul(acc, base);
        }
        base = scalar_mul(base, base);
        e >>= 1;
    }
    acc
}

fn digest_u64(domain: &[u8], parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(domain);
    for p in parts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Maps a tag to a subgroup element by squaring a hashed residue.
pub fn hash_to_group(tag: &[u8]) -> u64 {
    let x = digest_u64(b"h2g", &[tag]) % P;
    let y = mul(x, x);
    if y <= 1 {
        G
    } else {
        y
    }
}

pub fn hash_to_scalar(domain: &[u8], parts: &[&[u8]]) -> u64 {
    let s = digest_u64(domain, parts) % Q;
    if s == 0 {
        1
    } else {
        s
    }
}

/// Lagrange coefficient at zero for evaluation point `xi` among `xs`.
pub fn lagrange_at_zero(xi: u64, xs: &[u64]) -> u64 {
    let mut num = 1u64;
    let mut den = 1u64;
    for &xj in xs {
        if xj == xi {
            continue;
        }
        num = scalar_mul(num, xj % Q);
        den = scalar_mul(den, scalar_sub(xj, xi));
    }
    scalar_mul(num, scalar_inv(den))
}

/// Evaluates a polynomial with coefficients in Z_q.
pub fn poly_eval(coeffs: &[u64], x: u64) -> u64 {
    let mut acc = 0u64;
    for &c in coeffs.iter().rev() {
        acc = scalar_add(scalar_mul(acc, x), c);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_has_order_q() {
        assert_eq!(pow(G, Q), 1);
        assert_ne!(pow(G, 2), 1);
        assert_eq!(2 * Q + 1, P);
    }

    #[test]
    fn inverse() {
        for a in [1u64, 2, 12345, Q - 1] {
            assert_eq!(scalar_mul(a, scalar_inv(a)), 1);
        }
    }

    #[test]
    fn interpolation_recovers_constant() {
        let coeffs = [777u64, 31, 5];
        let xs = [2u64, 5, 9];
        let mut acc = 0;
        for &x in &xs {
            acc = scalar_add(
                acc,
                scalar_mul(poly_eval(&coeffs, x), lagrange_at_zero(x, &xs)),
            );
        }
        assert_eq!(acc, 777);
    }

    #[test]
    fn hashed_points_are_elements() {
        for t in [&b"a"[..], b"coin", b""] {
            assert!(is_element(hash_to_group(t)));
        }
    }
}
