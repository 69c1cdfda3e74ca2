//! Combining per-message packets into batched ones.
//!
//! Vertical merging joins packets of one phase that cover different
//! instances. Horizontal merging joins packets of different phases over the
//! same instances.

use thiserror::Error;

use super::{AbaLcBody, Body, RbcErBody, SmallBlock};
use crate::types::{Hash, NodeSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BatchError {
    #[error("nothing to merge")]
    Empty,
    #[error("packets of different kinds")]
    KindMismatch,
    #[error("vertical merge needs one phase, horizontal needs distinct phases")]
    PhaseMismatch,
    #[error("instance sets differ")]
    InstanceMismatch,
    #[error("conflicting values for instance {0}")]
    Conflict(usize),
}

fn er_phases(b: &RbcErBody) -> u8 {
    (!b.echo.is_empty()) as u8 | ((!b.ready.is_empty()) as u8) << 1
}

fn er_instances(b: &RbcErBody) -> NodeSet {
    b.echo.union(b.ready)
}

fn union_er(parts: &[&RbcErBody]) -> Result<RbcErBody, BatchError> {
    let mut out = parts[0].clone();
    let mut filled = er_instances(parts[0]);
    for p in &parts[1..] {
        for i in er_instances(p).iter() {
            if filled.contains(i) && out.hashes[i] != p.hashes[i] {
                return Err(BatchError::Conflict(i));
            }
            out.hashes[i] = p.hashes[i];
            filled.insert(i);
        }
        out.echo = out.echo.union(p.echo);
        out.ready = out.ready.union(p.ready);
        out.echo_nack = out.echo_nack.union(p.echo_nack);
        out.ready_nack = out.ready_nack.union(p.ready_nack);
        out.initial_nack = out.initial_nack.union(p.initial_nack);
    }
    Ok(out)
}

fn union_block(a: &SmallBlock, b: &SmallBlock) -> Result<SmallBlock, BatchError> {
    let mut out = a.clone();
    for (i, v) in b.values.iter().enumerate() {
        match (out.values[i], v) {
            (Some(x), Some(y)) if x != *y => return Err(BatchError::Conflict(i)),
            (None, Some(y)) => out.values[i] = Some(*y),
            _ => {}
        }
    }
    out.echo = out.echo.union(b.echo);
    out.ready = out.ready.union(b.ready);
    out.echo_nack = out.echo_nack.union(b.echo_nack);
    out.ready_nack = out.ready_nack.union(b.ready_nack);
    Ok(out)
}

fn lc_phases(b: &AbaLcBody) -> u8 {
    let mut m = 0;
    for inst in &b.blocks {
        for (p, blk) in inst.iter().enumerate() {
            if !blk.is_empty() {
                m |= 1 << p;
            }
        }
    }
    m
}

fn lc_instances(b: &AbaLcBody) -> NodeSet {
    let mut s = NodeSet::default();
    for (i, inst) in b.blocks.iter().enumerate() {
        if inst.iter().any(|blk| !blk.is_empty()) {
            s.insert(i);
        }
    }
    s
}

fn union_lc(parts: &[&AbaLcBody]) -> Result<AbaLcBody, BatchError> {
    let first = parts[0];
    let mut out = first.clone();
    for p in &parts[1..] {
        if p.round != first.round || p.base != first.base || p.blocks.len() != first.blocks.len() {
            return Err(BatchError::InstanceMismatch);
        }
        for (i, inst) in p.blocks.iter().enumerate() {
            for ph in 0..3 {
                out.blocks[i][ph] = union_block(&out.blocks[i][ph], &inst[ph])
                    .map_err(|_| BatchError::Conflict(i))?;
            }
        }
    }
    Ok(out)
}

enum Parts<'a> {
    Er(Vec<&'a RbcErBody>),
    Lc(Vec<&'a AbaLcBody>),
}

fn split(parts: &[Body]) -> Result<Parts<'_>, BatchError> {
    match parts.first() {
        None => Err(BatchError::Empty),
        Some(Body::RbcEr(_)) => parts
            .iter()
            .map(|b| {
                if let Body::RbcEr(x) = b {
                    Ok(x)
                } else {
                    Err(BatchError::KindMismatch)
                }
            })
            .collect::<Result<_, _>>()
            .map(Parts::Er),
        Some(Body::AbaLc(_)) => parts
            .iter()
            .map(|b| {
                if let Body::AbaLc(x) = b {
                    Ok(x)
                } else {
                    Err(BatchError::KindMismatch)
                }
            })
            .collect::<Result<_, _>>()
            .map(Parts::Lc),
        Some(_) => Err(BatchError::KindMismatch),
    }
}

fn disjoint(sets: impl Iterator<Item = NodeSet>) -> bool {
    let mut seen = NodeSet::default();
    for s in sets {
        if seen.0 & s.0 != 0 {
            return false;
        }
        seen = seen.union(s);
    }
    true
}

/// Joins same-phase packets over disjoint instances.
pub fn merge_vertical(parts: &[Body]) -> Result<Body, BatchError> {
    match split(parts)? {
        Parts::Er(v) => {
            let ph = er_phases(v[0]);
            if v.iter().any(|b| er_phases(b) != ph) || ph.count_ones() != 1 {
                return Err(BatchError::PhaseMismatch);
            }
            if !disjoint(v.iter().map(|b| er_instances(b))) {
                return Err(BatchError::InstanceMismatch);
            }
            union_er(&v).map(Body::RbcEr)
        }
        Parts::Lc(v) => {
            let ph = lc_phases(v[0]);
            if v.iter().any(|b| lc_phases(b) != ph) {
                return Err(BatchError::PhaseMismatch);
            }
            if !disjoint(v.iter().map(|b| lc_instances(b))) {
                return Err(BatchError::InstanceMismatch);
            }
            union_lc(&v).map(Body::AbaLc)
        }
    }
}

/// Joins packets of distinct phases covering the same instances.
pub fn merge_horizontal(parts: &[Body]) -> Result<Body, BatchError> {
    match split(parts)? {
        Parts::Er(v) => {
            if !disjoint(v.iter().map(|b| NodeSet(er_phases(b) as u64))) {
                return Err(BatchError::PhaseMismatch);
            }
            let inst = er_instances(v[0]);
            if v.iter().any(|b| er_instances(b) != inst) {
                return Err(BatchError::InstanceMismatch);
            }
            union_er(&v).map(Body::RbcEr)
        }
        Parts::Lc(v) => {
            if !disjoint(v.iter().map(|b| NodeSet(lc_phases(b) as u64))) {
                return Err(BatchError::PhaseMismatch);
            }
            let inst = lc_instances(v[0]);
            if v.iter().any(|b| lc_instances(b) != inst) {
                return Err(BatchError::InstanceMismatch);
            }
            union_lc(&v).map(Body::AbaLc)
        }
    }
}

/// Single-instance ECHO or READY vote in batched form.
pub fn er_single(n: usize, hash_len: usize, instance: usize, h: Hash, ready: bool) -> Body {
    let mut b = RbcErBody {
        hashes: vec![Hash::zero(hash_len); n],
        echo: NodeSet::default(),
        ready: NodeSet::default(),
        echo_nack: NodeSet::default(),
        ready_nack: NodeSet::default(),
        initial_nack: NodeSet::default(),
    };
    b.hashes[instance] = h;
    if ready {
        b.ready.insert(instance);
    } else {
        b.echo.insert(instance);
    }
    Body::RbcEr(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::hash;

    #[test]
    fn vertical_then_horizontal() {
        let h: Vec<Hash> = (0..4u8).map(|i| hash(&[i])).collect();
        let echoes: Vec<Body> = (0..4).map(|i| er_single(4, 32, i, h[i], false)).collect();
        let readies: Vec<Body> = (0..4).map(|i| er_single(4, 32, i, h[i], true)).collect();
        let e = merge_vertical(&echoes).unwrap();
        let r = merge_vertical(&readies).unwrap();
        let Body::RbcEr(both) = merge_horizontal(&[e.clone(), r]).unwrap() else {
            panic!()
        };
        assert_eq!(both.echo, NodeSet(0b1111));
        assert_eq!(both.ready, NodeSet(0b1111));
        assert_eq!(both.hashes, h);
        assert_eq!(
            merge_vertical(&[e.clone(), e.clone()]),
            Err(BatchError::InstanceMismatch)
        );
        assert_eq!(
            merge_horizontal(&[e.clone(), e]),
            Err(BatchError::PhaseMismatch)
        );
    }

    #[test]
    fn conflict_detected() {
        let a = er_single(4, 32, 1, hash(b"a"), false);
        let b = er_single(4, 32, 1, hash(b"b"), true);
        assert_eq!(merge_horizontal(&[a, b]), Err(BatchError::Conflict(1)));
    }
}
