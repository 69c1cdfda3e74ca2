//! Binary packet layouts.
//!
//! Header: `ver|flags (1) sender (1) type (1) epoch (2, LE) [routing (3)]
//! payload_len (2, LE)`, then the body, then one digital signature over
//! header and body. The high nibble of the first byte is the version; bit 0
//! marks a retransmission and bit 1 announces the routing block. Bit
//! sections pack node-indexed flags LSB first and pad to a whole byte.

pub mod batch;
pub mod bits;

use thiserror::Error;

use crate::types::{Hash, NodeId, NodeSet, Vote};
use bits::{bytes_for, BitWriter, Cursor};

pub const VERSION: u8 = 1;
const FLAG_RETX: u8 = 0x01;
const FLAG_ROUTING: u8 = 0x02;
pub const HEADER_LEN: usize = 7;
pub const ROUTING_LEN: usize = 3;
/// Minimum fragment capacity the frame unit must leave for INIT packets.
pub const MIN_FRAGMENT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated packet")]
    Truncated,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown flags {0:#x}")]
    BadFlags(u8),
    #[error("unknown packet type {0}")]
    UnknownType(u8),
    #[error("payload length disagrees with body")]
    BadLength,
    #[error("undefined value code")]
    InvalidCode,
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("field shape does not match layout: {0}")]
    Shape(&'static str),
    #[error("payload of {0} bytes exceeds the 16-bit length field")]
    TooLong(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FramingError {
    #[error("packet of {len} bytes exceeds 2D = {max}")]
    TooLarge { len: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PacketType {
    RbcInit = 1,
    CbcInit = 2,
    RbcEr = 3,
    CbcEf = 4,
    PrbcDone = 5,
    RbcSmall = 6,
    CbcSmall = 7,
    AbaLc = 8,
    AbaSc = 9,
    Recover = 10,
    DecShare = 11,
    CoinShare = 12,
    Attest = 13,
    GlobalDone = 14,
    Baseline = 15,
}

impl PacketType {
    pub const ALL: [PacketType; 15] = [
        PacketType::RbcInit,
        PacketType::CbcInit,
        PacketType::RbcEr,
        PacketType::CbcEf,
        PacketType::PrbcDone,
        PacketType::RbcSmall,
        PacketType::CbcSmall,
        PacketType::AbaLc,
        PacketType::AbaSc,
        PacketType::Recover,
        PacketType::DecShare,
        PacketType::CoinShare,
        PacketType::Attest,
        PacketType::GlobalDone,
        PacketType::Baseline,
    ];

    pub fn from_u8(v: u8) -> Option<PacketType> {
        PacketType::ALL.iter().copied().find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketType::RbcInit => "RBC_INIT",
            PacketType::CbcInit => "CBC_INIT",
            PacketType::RbcEr => "RBC_ER",
            PacketType::CbcEf => "CBC_EF",
            PacketType::PrbcDone => "PRBC_DONE",
            PacketType::RbcSmall => "RBC_SMALL",
            PacketType::CbcSmall => "CBC_SMALL",
            PacketType::AbaLc => "ABA_LC",
            PacketType::AbaSc => "ABA_SC",
            PacketType::Recover => "RECOVER",
            PacketType::DecShare => "DEC_SHARE",
            PacketType::CoinShare => "COIN_SHARE",
            PacketType::Attest => "ATTEST",
            PacketType::GlobalDone => "GLOBAL_DONE",
            PacketType::Baseline => "BASELINE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutParams {
    pub n: usize,
    pub f: usize,
    pub hash_len: usize,
    pub sig_len: usize,
    pub tsig_len: usize,
    pub proof_len: usize,
}

impl LayoutParams {
    /// Small CBC values are id bitmaps while N fits in a hash, digests otherwise.
    pub fn small_ids(&self) -> bool {
        self.n <= self.hash_len * 8
    }

    pub fn small_value_bits(&self) -> usize {
        self.n.min(self.hash_len * 8)
    }

    /// Largest fragment an INIT packet can carry within a 2D frame.
    pub fn fragment_cap(&self, d_align: usize) -> usize {
        (2 * d_align)
            .saturating_sub(HEADER_LEN + ROUTING_LEN + 7 + bytes_for(self.n) + self.sig_len)
    }
}

/// Size in bytes of the largest non-INIT packet, routing included.
pub fn max_layout_len(p: &LayoutParams) -> usize {
    let n = p.n;
    let h = p.hash_len;
    let ts = p.tsig_len;
    let list = 1 + n * (1 + ts);
    let bodies = [
        n * h + bytes_for(5 * n),
        n * h + 2 * list + bytes_for(3 * n),
        list + bytes_for(n),
        1 + bytes_for(7 * n),
        bytes_for(n * p.small_value_bits() + n) + 2 * list + bytes_for(2 * n),
        3 + bytes_for(21 * n * n),
        3 + bytes_for(8 * n) + 1 + ts + p.proof_len + bytes_for(n),
        list + bytes_for(n),
        2 + 1 + ts + p.proof_len + bytes_for(n),
        1 + h + ts + bytes_for(n),
        2 + h + ts + bytes_for(n),
        7 + MIN_FRAGMENT + bytes_for(n),
    ];
    HEADER_LEN + ROUTING_LEN + bodies.iter().max().unwrap() + p.sig_len
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Routing {
    pub src_cluster: u8,
    pub dst_cluster: u8,
    /// Attempt counter of the routed exchange.
    pub seq: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub retx: bool,
    pub sender: NodeId,
    pub epoch: u16,
    pub routing: Option<Routing>,
}

/// `(instance, share or signature bytes)`.
pub type Keyed = (u8, Vec<u8>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitBody {
    pub instance: u8,
    pub seq: u16,
    pub total: u16,
    pub fragment: Vec<u8>,
    /// Instances whose proposal the sender holds.
    pub initial_nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RbcErBody {
    pub hashes: Vec<Hash>,
    pub echo: NodeSet,
    pub ready: NodeSet,
    /// Instances where the sender saw an ECHO quorum.
    pub echo_nack: NodeSet,
    /// Instances the sender delivered.
    pub ready_nack: NodeSet,
    pub initial_nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CbcEfBody {
    pub hashes: Vec<Hash>,
    pub echo_shares: Vec<Keyed>,
    pub finish: Vec<Keyed>,
    /// Instances the sender has echoed.
    pub echo_nack: NodeSet,
    /// Instances the sender holds a FINISH for.
    pub finish_nack: NodeSet,
    pub initial_nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrbcDoneBody {
    pub shares: Vec<Keyed>,
    /// Instances the sender holds a proof for.
    pub done_nack: NodeSet,
}

/// Binary reliable broadcast state of one sender over all N broadcasters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmallBlock {
    /// Value known for each broadcaster; `None` clears the initial flag.
    pub values: Vec<Option<Vote>>,
    pub echo: NodeSet,
    pub ready: NodeSet,
    pub echo_nack: NodeSet,
    pub ready_nack: NodeSet,
}

impl SmallBlock {
    pub fn empty(n: usize) -> SmallBlock {
        SmallBlock {
            values: vec![None; n],
            echo: NodeSet::default(),
            ready: NodeSet::default(),
            echo_nack: NodeSet::default(),
            ready_nack: NodeSet::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|v| v.is_none())
            && self.echo.is_empty()
            && self.ready.is_empty()
            && self.echo_nack.is_empty()
            && self.ready_nack.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RbcSmallBody {
    pub session: u8,
    pub block: SmallBlock,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SmallValue {
    Ids(NodeSet),
    Digest(Hash),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CbcSmallBody {
    pub values: Vec<Option<SmallValue>>,
    pub echo_shares: Vec<Keyed>,
    pub finish: Vec<Keyed>,
    pub echo_nack: NodeSet,
    pub finish_nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbaLcBody {
    pub round: u8,
    /// Index of the first instance in this batch.
    pub base: u8,
    /// Three phase blocks per instance.
    pub blocks: Vec<[SmallBlock; 3]>,
}

/// Two-bit value sets: bit 0 stands for 0, bit 1 for 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScEntry {
    pub bval: u8,
    pub aux: u8,
    /// bin_values of the sender (the BVAL acknowledgement).
    pub bin: u8,
    /// Bit 0: AUX quorum reached. Bit 1: decided, valid for this and later rounds.
    pub aux_nack: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AbaScBody {
    pub round: u8,
    pub base: u8,
    pub entries: Vec<ScEntry>,
    pub share: Option<Vec<u8>>,
    /// Senders whose coin share the sender holds.
    pub share_nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoverBody {
    pub family: u8,
    /// `(instance, fragment seq)`; seq `0xFFFF` asks for every fragment.
    pub requests: Vec<(u8, u16)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecShareBody {
    pub shares: Vec<Keyed>,
    pub nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoinShareBody {
    pub purpose: u8,
    pub attempt: u8,
    pub share: Option<Vec<u8>>,
    pub nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestBody {
    pub cluster: u8,
    pub digest: Hash,
    pub sig: Vec<u8>,
    pub nack: NodeSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalDoneBody {
    pub attempt: u8,
    pub digest: Hash,
    pub included: NodeSet,
    /// Threshold share or combined certificate over the output.
    pub sig: Option<Vec<u8>>,
}

/// One logical message of an unbatched protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaselineBody {
    pub family: u8,
    pub phase: u8,
    pub round: u8,
    pub instance: u8,
    pub sub: u8,
    pub value: Vec<u8>,
    /// N-1 bits, one per peer other than the sender, in id order.
    pub nack: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    RbcInit(InitBody),
    CbcInit(InitBody),
    RbcEr(RbcErBody),
    CbcEf(CbcEfBody),
    PrbcDone(PrbcDoneBody),
    RbcSmall(RbcSmallBody),
    CbcSmall(CbcSmallBody),
    AbaLc(AbaLcBody),
    AbaSc(AbaScBody),
    Recover(RecoverBody),
    DecShare(DecShareBody),
    CoinShare(CoinShareBody),
    Attest(AttestBody),
    GlobalDone(GlobalDoneBody),
    Baseline(BaselineBody),
}

impl Body {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Body::RbcInit(_) => PacketType::RbcInit,
            Body::CbcInit(_) => PacketType::CbcInit,
            Body::RbcEr(_) => PacketType::RbcEr,
            Body::CbcEf(_) => PacketType::CbcEf,
            Body::PrbcDone(_) => PacketType::PrbcDone,
            Body::RbcSmall(_) => PacketType::RbcSmall,
            Body::CbcSmall(_) => PacketType::CbcSmall,
            Body::AbaLc(_) => PacketType::AbaLc,
            Body::AbaSc(_) => PacketType::AbaSc,
            Body::Recover(_) => PacketType::Recover,
            Body::DecShare(_) => PacketType::DecShare,
            Body::CoinShare(_) => PacketType::CoinShare,
            Body::Attest(_) => PacketType::Attest,
            Body::GlobalDone(_) => PacketType::GlobalDone,
            Body::Baseline(_) => PacketType::Baseline,
        }
    }

    /// Binary agreement traffic, batched or not.
    pub fn is_agreement(&self) -> bool {
        use crate::components::family;
        match self {
            Body::AbaLc(_) | Body::AbaSc(_) => true,
            Body::Baseline(b) => b.family == family::ABA_LC || b.family == family::ABA_SC,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub header: Header,
    pub body: Body,
    pub signature: Vec<u8>,
}

impl Packet {
    /// Header and body as covered by the signature.
    pub fn signing_bytes(&self, p: &LayoutParams) -> Result<Vec<u8>, EncodeError> {
        let body = encode_body(&self.body, p)?;
        let payload = body.len() + p.sig_len;
        if payload > u16::MAX as usize {
            return Err(EncodeError::TooLong(payload));
        }
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + ROUTING_LEN + payload);
        let mut flags = 0;
        if h.retx {
            flags |= FLAG_RETX;
        }
        if h.routing.is_some() {
            flags |= FLAG_ROUTING;
        }
        out.push(VERSION << 4 | flags);
        out.push(h.sender.0);
        out.push(self.body.packet_type() as u8);
        out.extend(h.epoch.to_le_bytes());
        if let Some(r) = h.routing {
            out.extend([r.src_cluster, r.dst_cluster, r.seq]);
        }
        out.extend((payload as u16).to_le_bytes());
        out.extend(body);
        Ok(out)
    }

    pub fn encode(&self, p: &LayoutParams) -> Result<Vec<u8>, EncodeError> {
        if self.signature.len() != p.sig_len {
            return Err(EncodeError::Shape("signature length"));
        }
        let mut out = self.signing_bytes(p)?;
        out.extend(&self.signature);
        Ok(out)
    }
}

pub fn encode(packet: &Packet, p: &LayoutParams) -> Result<Vec<u8>, EncodeError> {
    packet.encode(p)
}

/// Parses a packet; trailing frame padding after the payload is ignored.
/// Returns the packet and the length of the signed prefix.
pub fn decode_with_len(bytes: &[u8], p: &LayoutParams) -> Result<(Packet, usize), DecodeError> {
    let mut c = Cursor::new(bytes);
    let vf = c.u8()?;
    if vf >> 4 != VERSION {
        return Err(DecodeError::BadVersion(vf >> 4));
    }
    let flags = vf & 0x0f;
    if flags & !(FLAG_RETX | FLAG_ROUTING) != 0 {
        return Err(DecodeError::BadFlags(flags));
    }
    let sender = NodeId(c.u8()?);
    let ty = c.u8()?;
    let ptype = PacketType::from_u8(ty).ok_or(DecodeError::UnknownType(ty))?;
    let epoch = c.u16()?;
    let routing = if flags & FLAG_ROUTING != 0 {
        let r = c.take(3)?;
        Some(Routing {
            src_cluster: r[0],
            dst_cluster: r[1],
            seq: r[2],
        })
    } else {
        None
    };
    let payload = c.u16()? as usize;
    if payload < p.sig_len {
        return Err(DecodeError::BadLength);
    }
    let body_bytes = c.take(payload - p.sig_len)?;
    let signed_len = c.pos;
    let signature = c.take(p.sig_len)?.to_vec();
    let body = decode_body(ptype, body_bytes, p)?;
    let header = Header {
        retx: flags & FLAG_RETX != 0,
        sender,
        epoch,
        routing,
    };
    Ok((
        Packet {
            header,
            body,
            signature,
        },
        signed_len,
    ))
}

pub fn decode(bytes: &[u8], p: &LayoutParams) -> Result<Packet, DecodeError> {
    decode_with_len(bytes, p).map(|(pk, _)| pk)
}

/// Pads to at least `d_align` bytes; rejects anything above `2 * d_align`.
pub fn frame_align(mut bytes: Vec<u8>, d_align: usize) -> Result<Vec<u8>, FramingError> {
    if bytes.len() > 2 * d_align {
        return Err(FramingError::TooLarge {
            len: bytes.len(),
            max: 2 * d_align,
        });
    }
    if bytes.len() < d_align {
        bytes.resize(d_align, 0);
    }
    Ok(bytes)
}

// ---------------------------------------------------------------- encoding

fn check(cond: bool, what: &'static str) -> Result<(), EncodeError> {
    if cond {
        Ok(())
    } else {
        Err(EncodeError::Shape(what))
    }
}

fn put_hashes(out: &mut Vec<u8>, hs: &[Hash], p: &LayoutParams) -> Result<(), EncodeError> {
    check(hs.len() == p.n, "hash count")?;
    for h in hs {
        check(h.len() == p.hash_len, "hash length")?;
        out.extend(h.as_bytes());
    }
    Ok(())
}

fn put_keyed(
    out: &mut Vec<u8>,
    list: &[Keyed],
    len: usize,
    p: &LayoutParams,
) -> Result<(), EncodeError> {
    check(list.len() <= p.n, "list too long")?;
    out.push(list.len() as u8);
    for (i, b) in list {
        check((*i as usize) < p.n, "instance out of range")?;
        check(b.len() == len, "share length")?;
        out.push(*i);
        out.extend(b);
    }
    Ok(())
}

fn put_sets(out: &mut Vec<u8>, sets: &[NodeSet], n: usize) -> Result<(), EncodeError> {
    let mut w = BitWriter::new();
    for s in sets {
        check(s.0 & !NodeSet::full(n).0 == 0, "bit beyond N")?;
        w.push_set(*s, n);
    }
    out.extend(w.finish());
    Ok(())
}

fn vote_code(v: Option<Vote>) -> u64 {
    match v {
        None | Some(Vote::Zero) => 0b00,
        Some(Vote::One) => 0b01,
        Some(Vote::Bottom) => 0b10,
    }
}

fn put_small_block(w: &mut BitWriter, b: &SmallBlock, n: usize) -> Result<(), EncodeError> {
    check(b.values.len() == n, "value count")?;
    let full = NodeSet::full(n).0;
    for s in [b.echo, b.ready, b.echo_nack, b.ready_nack] {
        check(s.0 & !full == 0, "bit beyond N")?;
    }
    let mut init = NodeSet::default();
    for (i, v) in b.values.iter().enumerate() {
        w.push(vote_code(*v), 2);
        if v.is_some() {
            init.insert(i);
        }
    }
    for s in [init, b.echo, b.ready, b.echo_nack, b.ready_nack] {
        w.push_set(s, n);
    }
    Ok(())
}

fn put_share(out: &mut Vec<u8>, share: &Option<Vec<u8>>) -> Result<(), EncodeError> {
    match share {
        None => out.push(0),
        Some(s) => {
            check(!s.is_empty() && s.len() <= 255, "share length")?;
            out.push(s.len() as u8);
            out.extend(s);
        }
    }
    Ok(())
}

fn encode_body(body: &Body, p: &LayoutParams) -> Result<Vec<u8>, EncodeError> {
    let n = p.n;
    let mut out = Vec::new();
    match body {
        Body::RbcInit(b) | Body::CbcInit(b) => {
            check(b.fragment.len() <= u16::MAX as usize, "fragment length")?;
            out.push(b.instance);
            out.extend(b.seq.to_le_bytes());
            out.extend(b.total.to_le_bytes());
            out.extend((b.fragment.len() as u16).to_le_bytes());
            out.extend(&b.fragment);
            put_sets(&mut out, &[b.initial_nack], n)?;
        }
        Body::RbcEr(b) => {
            put_hashes(&mut out, &b.hashes, p)?;
            put_sets(
                &mut out,
                &[b.echo, b.ready, b.echo_nack, b.ready_nack, b.initial_nack],
                n,
            )?;
        }
        Body::CbcEf(b) => {
            put_hashes(&mut out, &b.hashes, p)?;
            put_keyed(&mut out, &b.echo_shares, p.tsig_len, p)?;
            put_keyed(&mut out, &b.finish, p.tsig_len, p)?;
            put_sets(&mut out, &[b.echo_nack, b.finish_nack, b.initial_nack], n)?;
        }
        Body::PrbcDone(b) => {
            put_keyed(&mut out, &b.shares, p.tsig_len, p)?;
            put_sets(&mut out, &[b.done_nack], n)?;
        }
        Body::RbcSmall(b) => {
            out.push(b.session);
            let mut w = BitWriter::new();
            put_small_block(&mut w, &b.block, n)?;
            out.extend(w.finish());
        }
        Body::CbcSmall(b) => {
            check(b.values.len() == n, "value count")?;
            let width = p.small_value_bits();
            let mut w = BitWriter::new();
            let mut init = NodeSet::default();
            for (i, v) in b.values.iter().enumerate() {
                match v {
                    None => w.push(0, width),
                    Some(SmallValue::Ids(s)) => {
                        check(p.small_ids(), "id list needs digest mode")?;
                        check(
                            s.len() == 2 * p.f + 1 && s.0 & !NodeSet::full(n).0 == 0,
                            "id list size",
                        )?;
                        w.push_set(*s, n);
                        init.insert(i);
                    }
                    Some(SmallValue::Digest(h)) => {
                        check(!p.small_ids() && h.len() == p.hash_len, "digest value")?;
                        for byte in h.as_bytes() {
                            w.push(*byte as u64, 8);
                        }
                        init.insert(i);
                    }
                }
            }
            w.push_set(init, n);
            out.extend(w.finish());
            put_keyed(&mut out, &b.echo_shares, p.tsig_len, p)?;
            put_keyed(&mut out, &b.finish, p.tsig_len, p)?;
            put_sets(&mut out, &[b.echo_nack, b.finish_nack], n)?;
        }
        Body::AbaLc(b) => {
            check(b.blocks.len() <= n, "batch size")?;
            out.extend([b.round, b.base, b.blocks.len() as u8]);
            let mut w = BitWriter::new();
            for inst in &b.blocks {
                for blk in inst {
                    put_small_block(&mut w, blk, n)?;
                }
            }
            out.extend(w.finish());
        }
        Body::AbaSc(b) => {
            check(b.entries.len() <= n, "batch size")?;
            out.extend([b.round, b.base, b.entries.len() as u8]);
            let mut w = BitWriter::new();
            for field in 0..4 {
                for e in &b.entries {
                    let v = [e.bval, e.aux, e.bin, e.aux_nack][field];
                    check(v < 4, "two-bit field")?;
                    w.push(v as u64, 2);
                }
            }
            out.extend(w.finish());
            put_share(&mut out, &b.share)?;
            put_sets(&mut out, &[b.share_nack], n)?;
        }
        Body::Recover(b) => {
            check(b.requests.len() <= 255, "request count")?;
            out.push(b.family);
            out.push(b.requests.len() as u8);
            for (i, s) in &b.requests {
                out.push(*i);
                out.extend(s.to_le_bytes());
            }
        }
        Body::DecShare(b) => {
            put_keyed(&mut out, &b.shares, p.tsig_len, p)?;
            put_sets(&mut out, &[b.nack], n)?;
        }
        Body::CoinShare(b) => {
            out.extend([b.purpose, b.attempt]);
            put_share(&mut out, &b.share)?;
            put_sets(&mut out, &[b.nack], n)?;
        }
        Body::Attest(b) => {
            check(b.digest.len() == p.hash_len, "hash length")?;
            check(b.sig.len() == p.tsig_len, "signature length")?;
            out.push(b.cluster);
            out.extend(b.digest.as_bytes());
            out.extend(&b.sig);
            put_sets(&mut out, &[b.nack], n)?;
        }
        Body::GlobalDone(b) => {
            check(b.digest.len() == p.hash_len, "hash length")?;
            out.push(b.attempt);
            out.extend(b.digest.as_bytes());
            put_share(&mut out, &b.sig)?;
            put_sets(&mut out, &[b.included], n)?;
        }
        Body::Baseline(b) => {
            check(b.value.len() <= u16::MAX as usize, "value length")?;
            check(b.nack & !NodeSet::full(n - 1).0 == 0, "bit beyond N-1")?;
            out.extend([b.family, b.phase, b.round, b.instance, b.sub]);
            out.extend((b.value.len() as u16).to_le_bytes());
            out.extend(&b.value);
            let mut w = BitWriter::new();
            w.push(b.nack, n - 1);
            out.extend(w.finish());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- decoding

fn get_hashes(c: &mut Cursor<'_>, p: &LayoutParams) -> Result<Vec<Hash>, DecodeError> {
    (0..p.n)
        .map(|_| Ok(Hash::from_slice(c.take(p.hash_len)?)))
        .collect()
}

fn get_keyed(c: &mut Cursor<'_>, len: usize, p: &LayoutParams) -> Result<Vec<Keyed>, DecodeError> {
    let cnt = c.u8()? as usize;
    if cnt > p.n {
        return Err(DecodeError::Invalid("list longer than N"));
    }
    let mut out = Vec::with_capacity(cnt);
    for _ in 0..cnt {
        let i = c.u8()?;
        if i as usize >= p.n {
            return Err(DecodeError::Invalid("instance out of range"));
        }
        out.push((i, c.take(len)?.to_vec()));
    }
    Ok(out)
}

fn get_sets(c: &mut Cursor<'_>, k: usize, n: usize) -> Result<Vec<NodeSet>, DecodeError> {
    let mut r = c.bits(k * n)?;
    (0..k).map(|_| r.read_set(n)).collect()
}

fn get_small_block(r: &mut bits::BitReader<'_>, n: usize) -> Result<SmallBlock, DecodeError> {
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        codes.push(r.read(2)?);
    }
    let init = r.read_set(n)?;
    let mut values = Vec::with_capacity(n);
    for (i, code) in codes.into_iter().enumerate() {
        let v = match code {
            0b00 => Vote::Zero,
            0b01 => Vote::One,
            0b10 => Vote::Bottom,
            _ => return Err(DecodeError::InvalidCode),
        };
        if init.contains(i) {
            values.push(Some(v));
        } else if code == 0 {
            values.push(None);
        } else {
            return Err(DecodeError::Invalid("value without initial flag"));
        }
    }
    Ok(SmallBlock {
        values,
        echo: r.read_set(n)?,
        ready: r.read_set(n)?,
        echo_nack: r.read_set(n)?,
        ready_nack: r.read_set(n)?,
    })
}

fn get_share(c: &mut Cursor<'_>) -> Result<Option<Vec<u8>>, DecodeError> {
    let len = c.u8()? as usize;
    if len == 0 {
        Ok(None)
    } else {
        Ok(Some(c.take(len)?.to_vec()))
    }
}

fn get_init(c: &mut Cursor<'_>, n: usize) -> Result<InitBody, DecodeError> {
    let instance = c.u8()?;
    let seq = c.u16()?;
    let total = c.u16()?;
    if total == 0 || seq >= total {
        return Err(DecodeError::Invalid("fragment index"));
    }
    let len = c.u16()? as usize;
    let fragment = c.take(len)?.to_vec();
    let initial_nack = get_sets(c, 1, n)?[0];
    Ok(InitBody {
        instance,
        seq,
        total,
        fragment,
        initial_nack,
    })
}

fn decode_body(t: PacketType, bytes: &[u8], p: &LayoutParams) -> Result<Body, DecodeError> {
    let n = p.n;
    let mut c = Cursor::new(bytes);
    let body = match t {
        PacketType::RbcInit => Body::RbcInit(get_init(&mut c, n)?),
        PacketType::CbcInit => Body::CbcInit(get_init(&mut c, n)?),
        PacketType::RbcEr => {
            let hashes = get_hashes(&mut c, p)?;
            let s = get_sets(&mut c, 5, n)?;
            Body::RbcEr(RbcErBody {
                hashes,
                echo: s[0],
                ready: s[1],
                echo_nack: s[2],
                ready_nack: s[3],
                initial_nack: s[4],
            })
        }
        PacketType::CbcEf => {
            let hashes = get_hashes(&mut c, p)?;
            let echo_shares = get_keyed(&mut c, p.tsig_len, p)?;
            let finish = get_keyed(&mut c, p.tsig_len, p)?;
            let s = get_sets(&mut c, 3, n)?;
            Body::CbcEf(CbcEfBody {
                hashes,
                echo_shares,
                finish,
                echo_nack: s[0],
                finish_nack: s[1],
                initial_nack: s[2],
            })
        }
        PacketType::PrbcDone => {
            let shares = get_keyed(&mut c, p.tsig_len, p)?;
            Body::PrbcDone(PrbcDoneBody {
                shares,
                done_nack: get_sets(&mut c, 1, n)?[0],
            })
        }
        PacketType::RbcSmall => {
            let session = c.u8()?;
            let mut r = c.bits(7 * n)?;
            Body::RbcSmall(RbcSmallBody {
                session,
                block: get_small_block(&mut r, n)?,
            })
        }
        PacketType::CbcSmall => {
            let width = p.small_value_bits();
            let mut r = c.bits(n * width + n)?;
            let mut raw = Vec::with_capacity(n);
            for _ in 0..n {
                if p.small_ids() {
                    raw.push(SmallValue::Ids(r.read_set(n)?));
                } else {
                    let mut h = Vec::with_capacity(p.hash_len);
                    for _ in 0..p.hash_len {
                        h.push(r.read(8)? as u8);
                    }
                    raw.push(SmallValue::Digest(Hash::from_slice(&h)));
                }
            }
            let init = r.read_set(n)?;
            let mut values = Vec::with_capacity(n);
            for (i, v) in raw.into_iter().enumerate() {
                let zero = match &v {
                    SmallValue::Ids(s) => s.is_empty(),
                    SmallValue::Digest(h) => h.as_bytes().iter().all(|b| *b == 0),
                };
                if !init.contains(i) {
                    if !zero {
                        return Err(DecodeError::Invalid("value without initial flag"));
                    }
                    values.push(None);
                    continue;
                }
                if let SmallValue::Ids(s) = &v {
                    if s.len() != 2 * p.f + 1 {
                        return Err(DecodeError::Invalid("id list must name 2f+1 nodes"));
                    }
                }
                values.push(Some(v));
            }
            let echo_shares = get_keyed(&mut c, p.tsig_len, p)?;
            let finish = get_keyed(&mut c, p.tsig_len, p)?;
            let s = get_sets(&mut c, 2, n)?;
            Body::CbcSmall(CbcSmallBody {
                values,
                echo_shares,
                finish,
                echo_nack: s[0],
                finish_nack: s[1],
            })
        }
        PacketType::AbaLc => {
            let round = c.u8()?;
            let base = c.u8()?;
            let k = c.u8()? as usize;
            if k > n {
                return Err(DecodeError::Invalid("batch larger than N"));
            }
            let mut r = c.bits(k * 3 * 7 * n)?;
            let mut blocks = Vec::with_capacity(k);
            for _ in 0..k {
                blocks.push([
                    get_small_block(&mut r, n)?,
                    get_small_block(&mut r, n)?,
                    get_small_block(&mut r, n)?,
                ]);
            }
            Body::AbaLc(AbaLcBody {
                round,
                base,
                blocks,
            })
        }
        PacketType::AbaSc => {
            let round = c.u8()?;
            let base = c.u8()?;
            let k = c.u8()? as usize;
            if k > n {
                return Err(DecodeError::Invalid("batch larger than N"));
            }
            let mut r = c.bits(8 * k)?;
            let mut entries = vec![ScEntry::default(); k];
            for field in 0..4 {
                for e in entries.iter_mut() {
                    let v = r.read(2)? as u8;
                    match field {
                        0 => e.bval = v,
                        1 => e.aux = v,
                        2 => e.bin = v,
                        _ => e.aux_nack = v,
                    }
                }
            }
            let share = get_share(&mut c)?;
            Body::AbaSc(AbaScBody {
                round,
                base,
                entries,
                share,
                share_nack: get_sets(&mut c, 1, n)?[0],
            })
        }
        PacketType::Recover => {
            let family = c.u8()?;
            let cnt = c.u8()? as usize;
            let mut requests = Vec::with_capacity(cnt);
            for _ in 0..cnt {
                let i = c.u8()?;
                requests.push((i, c.u16()?));
            }
            Body::Recover(RecoverBody { family, requests })
        }
        PacketType::DecShare => {
            let shares = get_keyed(&mut c, p.tsig_len, p)?;
            Body::DecShare(DecShareBody {
                shares,
                nack: get_sets(&mut c, 1, n)?[0],
            })
        }
        PacketType::CoinShare => {
            let purpose = c.u8()?;
            let attempt = c.u8()?;
            let share = get_share(&mut c)?;
            Body::CoinShare(CoinShareBody {
                purpose,
                attempt,
                share,
                nack: get_sets(&mut c, 1, n)?[0],
            })
        }
        PacketType::Attest => {
            let cluster = c.u8()?;
            let digest = Hash::from_slice(c.take(p.hash_len)?);
            let sig = c.take(p.tsig_len)?.to_vec();
            Body::Attest(AttestBody {
                cluster,
                digest,
                sig,
                nack: get_sets(&mut c, 1, n)?[0],
            })
        }
        PacketType::GlobalDone => {
            let attempt = c.u8()?;
            let digest = Hash::from_slice(c.take(p.hash_len)?);
            let sig = get_share(&mut c)?;
            Body::GlobalDone(GlobalDoneBody {
                attempt,
                digest,
                included: get_sets(&mut c, 1, n)?[0],
                sig,
            })
        }
        PacketType::Baseline => {
            let h = c.take(5)?;
            let (family, phase, round, instance, sub) = (h[0], h[1], h[2], h[3], h[4]);
            let len = c.u16()? as usize;
            let value = c.take(len)?.to_vec();
            let nack = c.bits(n - 1)?.read(n - 1)?;
            Body::Baseline(BaselineBody {
                family,
                phase,
                round,
                instance,
                sub,
                value,
                nack,
            })
        }
    };
    if c.remaining() != 0 {
        return Err(DecodeError::BadLength);
    }
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::hash_with_len;

    fn params(n: usize) -> LayoutParams {
        LayoutParams {
            n,
            f: (n - 1) / 3,
            hash_len: 32,
            sig_len: 40,
            tsig_len: 21,
            proof_len: 21,
        }
    }

    fn pkt(body: Body) -> Packet {
        Packet {
            header: Header {
                retx: false,
                sender: NodeId(1),
                epoch: 3,
                routing: None,
            },
            body,
            signature: vec![7; 40],
        }
    }

    #[test]
    fn rbc_er_size() {
        let p = params(4);
        let h = hash_with_len(b"x", 32);
        let body = Body::RbcEr(RbcErBody {
            hashes: vec![h; 4],
            echo: NodeSet(0b1111),
            ready: NodeSet(0),
            echo_nack: NodeSet(0),
            ready_nack: NodeSet(0),
            initial_nack: NodeSet(0b1111),
        });
        let bytes = encode(&pkt(body.clone()), &p).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 32 + 3 + 40);
        assert_eq!(decode(&bytes, &p).unwrap().body, body);
    }

    #[test]
    fn undefined_small_code_rejected() {
        let p = params(4);
        let mut blk = SmallBlock::empty(4);
        blk.values[0] = Some(Vote::One);
        let mut bytes = encode(
            &pkt(Body::RbcSmall(RbcSmallBody {
                session: 0,
                block: blk,
            })),
            &p,
        )
        .unwrap();
        // value code of broadcaster 0 sits in the two low bits after the session byte
        bytes[HEADER_LEN + 1] |= 0b11;
        assert_eq!(decode(&bytes, &p), Err(DecodeError::InvalidCode));
    }

    #[test]
    fn framing_bounds() {
        assert_eq!(frame_align(vec![1; 10], 64).unwrap().len(), 64);
        assert_eq!(frame_align(vec![1; 100], 64).unwrap().len(), 100);
        assert_eq!(
            frame_align(vec![1; 129], 64),
            Err(FramingError::TooLarge { len: 129, max: 128 })
        );
    }

    #[test]
    fn padding_ignored() {
        let p = params(4);
        let body = Body::Recover(RecoverBody {
            family: 1,
            requests: vec![(2, 0xffff)],
        });
        let bytes = frame_align(encode(&pkt(body.clone()), &p).unwrap(), 256).unwrap();
        assert_eq!(decode(&bytes, &p).unwrap().body, body);
    }

    #[test]
    fn cbc_small_requires_quorum_list() {
        let p = params(4);
        let mut values = vec![None; 4];
        values[1] = Some(SmallValue::Ids(NodeSet(0b0011)));
        let body = Body::CbcSmall(CbcSmallBody {
            values,
            echo_shares: vec![],
            finish: vec![],
            echo_nack: NodeSet(0),
            finish_nack: NodeSet(0),
        });
        assert!(encode(&pkt(body), &p).is_err());
    }
}
