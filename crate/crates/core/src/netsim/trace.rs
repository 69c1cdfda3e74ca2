use std::sync::Arc;

use crate::netsim::ChannelId;
use crate::types::{NodeId, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    TransmitStart,
    TransmitEnd,
    Deliver,
    Drop,
    Timer,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::TransmitStart => "transmit-start",
            TraceKind::TransmitEnd => "transmit-end",
            TraceKind::Deliver => "deliver",
            TraceKind::Drop => "drop",
            TraceKind::Timer => "timer",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub tick: Tick,
    pub node: NodeId,
    pub kind: TraceKind,
    pub channel: ChannelId,
    pub packet_type: u8,
    pub len: usize,
    /// Frame contents, kept for transmit-start records only.
    pub bytes: Option<Arc<Vec<u8>>>,
}

impl TraceRecord {
    /// `tick node kind channel packet_type len`, space separated.
    pub fn line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.tick,
            self.node.0,
            self.kind.as_str(),
            self.channel,
            self.packet_type,
            self.len
        )
    }
}
