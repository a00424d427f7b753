//! Grouping parsed packets into packets, bursts, flows and sessions.
//!
//! A flow is every packet sharing one directed five-tuple. A session merges
//! the two directions of a conversation. A burst is a maximal run of packets
//! whose consecutive inter-arrival gaps are all at most the burst gap.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{tcp_flags, FiveTuple, ParsedPacket, Protocol};

pub const DEFAULT_BURST_GAP_SECS: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum GranularityError {
    #[error("burst gap must be positive, got {0}")]
    NonPositiveGap(f64),
    #[error("unknown granularity {0:?} (expected packet, burst, flow or session)")]
    UnknownGranularity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    Packet,
    Burst,
    Flow,
    Session,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [Granularity::Packet, Granularity::Burst, Granularity::Flow, Granularity::Session];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Packet => "packet",
            Granularity::Burst => "burst",
            Granularity::Flow => "flow",
            Granularity::Session => "session",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = GranularityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "packet" => Ok(Granularity::Packet),
            "burst" => Ok(Granularity::Burst),
            "flow" => Ok(Granularity::Flow),
            "session" => Ok(Granularity::Session),
            _ => Err(GranularityError::UnknownGranularity(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// Bidirectional conversation identity. `endpoint_a` is the initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub endpoint_a: Endpoint,
    pub endpoint_b: Endpoint,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Initiator to responder.
    Forward,
    Backward,
}

impl SessionKey {
    fn from_initiator(t: FiveTuple) -> Self {
        SessionKey {
            endpoint_a: Endpoint { ip: t.src_ip, port: t.src_port },
            endpoint_b: Endpoint { ip: t.dst_ip, port: t.dst_port },
            protocol: t.protocol,
        }
    }

    pub fn forward_tuple(&self) -> FiveTuple {
        FiveTuple {
            src_ip: self.endpoint_a.ip,
            src_port: self.endpoint_a.port,
            dst_ip: self.endpoint_b.ip,
            dst_port: self.endpoint_b.port,
            protocol: self.protocol,
        }
    }

    pub fn direction_of(&self, t: &FiveTuple) -> Option<Direction> {
        let fwd = self.forward_tuple();
        if *t == fwd {
            Some(Direction::Forward)
        } else if *t == fwd.reversed() {
            Some(Direction::Backward)
        } else {
            None
        }
    }

    /// True if either endpoint uses `port`.
    pub fn has_port(&self, port: u16) -> bool {
        self.endpoint_a.port == port || self.endpoint_b.port == port
    }
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}-{}", self.protocol, self.endpoint_a, self.endpoint_b)
    }
}

/// Direction-free grouping key for a tuple.
fn pair_of(t: &FiveTuple) -> (Protocol, Endpoint, Endpoint) {
    let a = Endpoint { ip: t.src_ip, port: t.src_port };
    let b = Endpoint { ip: t.dst_ip, port: t.dst_port };
    if a <= b {
        (t.protocol, a, b)
    } else {
        (t.protocol, b, a)
    }
}

/// Decide the initiator from the first observed packet of a conversation.
/// A SYN names its sender, a SYN-ACK its receiver, and UDP its sender. A
/// TCP capture that begins mid-connection is ambiguous; the smaller
/// endpoint is taken as initiator.
fn session_key_for(first: &ParsedPacket, tuple: FiveTuple) -> SessionKey {
    match (tuple.protocol, first.tcp) {
        (Protocol::Udp, _) => SessionKey::from_initiator(tuple),
        (Protocol::Tcp, Some(t)) if t.has(tcp_flags::SYN) && !t.has(tcp_flags::ACK) => SessionKey::from_initiator(tuple),
        (Protocol::Tcp, Some(t)) if t.has(tcp_flags::SYN | tcp_flags::ACK) => SessionKey::from_initiator(tuple.reversed()),
        _ => {
            let (_, a, b) = pair_of(&tuple);
            SessionKey { endpoint_a: a, endpoint_b: b, protocol: tuple.protocol }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitKey {
    Packet { index: u64 },
    Burst { ordinal: usize, session: Option<SessionKey> },
    Flow(FiveTuple),
    Session(SessionKey),
}

impl fmt::Display for UnitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitKey::Packet { index } => write!(f, "packet_{index}"),
            UnitKey::Burst { ordinal, session: Some(s) } => write!(f, "{s}_burst{ordinal}"),
            UnitKey::Burst { ordinal, session: None } => write!(f, "burst{ordinal}"),
            UnitKey::Flow(t) => write!(f, "{t}"),
            UnitKey::Session(s) => write!(f, "{s}"),
        }
    }
}

/// An ordered packet group at one granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficUnit {
    pub kind: Granularity,
    pub key: UnitKey,
    /// Ordered by timestamp, ties by file index.
    pub packets: Vec<ParsedPacket>,
}

impl TrafficUnit {
    pub fn session_key(&self) -> Option<SessionKey> {
        match &self.key {
            UnitKey::Session(s) => Some(*s),
            UnitKey::Burst { session, .. } => *session,
            _ => None,
        }
    }

    pub fn protocol(&self) -> Option<Protocol> {
        self.packets.iter().find_map(|p| p.tuple.map(|t| t.protocol))
    }
}

fn time_ordered(packets: &[ParsedPacket]) -> Vec<ParsedPacket> {
    let mut v: Vec<ParsedPacket> = packets.iter().filter(|p| p.tuple.is_some()).cloned().collect();
    v.sort_by_key(|p| (p.raw.ts, p.raw.index));
    v
}

/// Bidirectional grouping. Packets without a five-tuple are ignored.
pub fn split_sessions(packets: &[ParsedPacket]) -> BTreeMap<SessionKey, TrafficUnit> {
    let mut keys: HashMap<(Protocol, Endpoint, Endpoint), SessionKey> = HashMap::new();
    let mut out: BTreeMap<SessionKey, TrafficUnit> = BTreeMap::new();
    for p in time_ordered(packets) {
        let tuple = p.tuple.expect("filtered");
        let key = *keys.entry(pair_of(&tuple)).or_insert_with(|| session_key_for(&p, tuple));
        out.entry(key)
            .or_insert_with(|| TrafficUnit { kind: Granularity::Session, key: UnitKey::Session(key), packets: Vec::new() })
            .packets
            .push(p);
    }
    out
}

/// Unidirectional grouping by exact five-tuple.
pub fn split_flows(packets: &[ParsedPacket]) -> BTreeMap<FiveTuple, TrafficUnit> {
    let mut out: BTreeMap<FiveTuple, TrafficUnit> = BTreeMap::new();
    for p in time_ordered(packets) {
        let tuple = p.tuple.expect("filtered");
        out.entry(tuple)
            .or_insert_with(|| TrafficUnit { kind: Granularity::Flow, key: UnitKey::Flow(tuple), packets: Vec::new() })
            .packets
            .push(p);
    }
    out
}

pub(crate) fn gap_to_nanos(gap_secs: f64) -> Result<u128, GranularityError> {
    if gap_secs.is_nan() || gap_secs <= 0.0 {
        return Err(GranularityError::NonPositiveGap(gap_secs));
    }
    let nanos = gap_secs * 1e9;
    Ok(if nanos >= u128::MAX as f64 { u128::MAX } else { nanos.round() as u128 })
}

fn bursts_of(ordered: Vec<ParsedPacket>, gap: u128, session: Option<SessionKey>) -> Vec<TrafficUnit> {
    let mut out: Vec<TrafficUnit> = Vec::new();
    let mut prev: Option<u128> = None;
    for p in ordered {
        let t = p.raw.ts.as_nanos();
        let start_new = match prev {
            None => true,
            Some(pt) => t - pt > gap,
        };
        prev = Some(t);
        if start_new {
            let ordinal = out.len();
            out.push(TrafficUnit { kind: Granularity::Burst, key: UnitKey::Burst { ordinal, session }, packets: Vec::new() });
        }
        out.last_mut().expect("pushed").packets.push(p);
    }
    out
}

/// Global bursts over a packet stream: a new burst starts wherever the
/// inter-arrival time exceeds `gap_secs` (a gap exactly equal to it stays
/// in the same burst).
pub fn split_bursts(packets: &[ParsedPacket], gap_secs: f64) -> Result<Vec<TrafficUnit>, GranularityError> {
    let gap = gap_to_nanos(gap_secs)?;
    Ok(bursts_of(time_ordered(packets), gap, None))
}

/// Bursts computed within one session's packet stream.
pub fn session_bursts(session: &TrafficUnit, gap_secs: f64) -> Result<Vec<TrafficUnit>, GranularityError> {
    let gap = gap_to_nanos(gap_secs)?;
    Ok(bursts_of(time_ordered(&session.packets), gap, session.session_key()))
}

pub fn split_packets(packets: &[ParsedPacket]) -> Vec<TrafficUnit> {
    time_ordered(packets)
        .into_iter()
        .map(|p| TrafficUnit { kind: Granularity::Packet, key: UnitKey::Packet { index: p.raw.index }, packets: vec![p] })
        .collect()
}

/// Re-express one session at a finer (or equal) granularity. Bursts are
/// computed inside the session.
pub fn units_of_session(session: &TrafficUnit, granularity: Granularity, gap_secs: f64) -> Result<Vec<TrafficUnit>, GranularityError> {
    Ok(match granularity {
        Granularity::Session => vec![session.clone()],
        Granularity::Flow => split_flows(&session.packets).into_values().collect(),
        Granularity::Burst => session_bursts(session, gap_secs)?,
        Granularity::Packet => split_packets(&session.packets),
    })
}
