//! Ethernet / IPv4 / TCP / UDP dissection into byte-range field maps.
//!
//! Every field that an occlusion strategy may touch is recorded as an
//! `(offset, len)` range relative to the start of the frame. Nothing is
//! copied out of the frame except the handful of header values needed for
//! grouping and stream reassembly.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::pcap::RawPacket;
use crate::tls;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;

const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ByteRange {
    pub offset: usize,
    pub len: usize,
}

impl ByteRange {
    pub const fn new(offset: usize, len: usize) -> Self {
        ByteRange { offset, len }
    }

    pub fn end(self) -> usize {
        self.offset + self.len
    }

    pub fn as_range(self) -> std::ops::Range<usize> {
        self.offset..self.end()
    }

    pub fn contains(self, other: ByteRange) -> bool {
        other.offset >= self.offset && other.end() <= self.end()
    }

    pub fn overlaps(self, other: ByteRange) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }

    pub fn shifted(self, by: usize) -> ByteRange {
        ByteRange::new(self.offset + by, self.len)
    }

    /// Intersection, or `None` when empty.
    pub fn intersect(self, other: ByteRange) -> Option<ByteRange> {
        let start = self.offset.max(other.offset);
        let end = self.end().min(other.end());
        (start < end).then(|| ByteRange::new(start, end - start))
    }
}

impl fmt::Display for ByteRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.offset, self.len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl Protocol {
    pub fn number(self) -> u8 {
        match self {
            Protocol::Tcp => IPPROTO_TCP,
            Protocol::Udp => IPPROTO_UDP,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl FiveTuple {
    pub fn reversed(self) -> FiveTuple {
        FiveTuple { src_ip: self.dst_ip, dst_ip: self.src_ip, src_port: self.dst_port, dst_port: self.src_port, protocol: self.protocol }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}:{}-{}:{}", self.protocol, self.src_ip, self.src_port, self.dst_ip, self.dst_port)
    }
}

/// Every occludable field the dissector knows how to locate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldKind {
    MacDst,
    MacSrc,
    IpId,
    IpChecksum,
    IpSrc,
    IpDst,
    TcpSrcPort,
    TcpDstPort,
    TcpSeq,
    TcpAck,
    TcpWindow,
    TcpTsVal,
    TcpTsEcr,
    TcpOptions,
    UdpSrcPort,
    UdpDstPort,
    Payload,
    Sni,
}

impl FieldKind {
    pub const ALL: [FieldKind; 18] = [
        FieldKind::MacDst,
        FieldKind::MacSrc,
        FieldKind::IpId,
        FieldKind::IpChecksum,
        FieldKind::IpSrc,
        FieldKind::IpDst,
        FieldKind::TcpSrcPort,
        FieldKind::TcpDstPort,
        FieldKind::TcpSeq,
        FieldKind::TcpAck,
        FieldKind::TcpWindow,
        FieldKind::TcpTsVal,
        FieldKind::TcpTsEcr,
        FieldKind::TcpOptions,
        FieldKind::UdpSrcPort,
        FieldKind::UdpDstPort,
        FieldKind::Payload,
        FieldKind::Sni,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::MacDst => "mac_dst",
            FieldKind::MacSrc => "mac_src",
            FieldKind::IpId => "ip_id",
            FieldKind::IpChecksum => "ip_checksum",
            FieldKind::IpSrc => "ip_src",
            FieldKind::IpDst => "ip_dst",
            FieldKind::TcpSrcPort => "tcp_src_port",
            FieldKind::TcpDstPort => "tcp_dst_port",
            FieldKind::TcpSeq => "tcp_seq",
            FieldKind::TcpAck => "tcp_ack",
            FieldKind::TcpWindow => "tcp_window",
            FieldKind::TcpTsVal => "tcp_ts_val",
            FieldKind::TcpTsEcr => "tcp_ts_ecr",
            FieldKind::TcpOptions => "tcp_options_full",
            FieldKind::UdpSrcPort => "udp_src_port",
            FieldKind::UdpDstPort => "udp_dst_port",
            FieldKind::Payload => "payload",
            FieldKind::Sni => "sni",
        }
    }

    /// Field that this one is nested inside, if any.
    pub fn container(self) -> Option<FieldKind> {
        match self {
            FieldKind::TcpTsVal | FieldKind::TcpTsEcr => Some(FieldKind::TcpOptions),
            FieldKind::Sni => Some(FieldKind::Payload),
            _ => None,
        }
    }
}

/// Byte ranges of each located field, relative to the start of a frame (or of
/// an extracted sample, once re-based).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    ranges: [Option<ByteRange>; 18],
}

impl FieldMap {
    pub fn get(&self, kind: FieldKind) -> Option<ByteRange> {
        self.ranges[kind as usize]
    }

    pub fn set(&mut self, kind: FieldKind, range: Option<ByteRange>) {
        self.ranges[kind as usize] = range;
    }

    pub fn iter(&self) -> impl Iterator<Item = (FieldKind, ByteRange)> + '_ {
        FieldKind::ALL.iter().filter_map(move |&k| self.get(k).map(|r| (k, r)))
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.iter().all(Option::is_none)
    }
}

pub mod tcp_flags {
    pub const FIN: u16 = 0x001;
    pub const SYN: u16 = 0x002;
    pub const RST: u16 = 0x004;
    pub const PSH: u16 = 0x008;
    pub const ACK: u16 = 0x010;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpMeta {
    pub seq: u32,
    pub ack: u32,
    pub flags: u16,
}

impl TcpMeta {
    pub fn has(&self, flag: u16) -> bool {
        self.flags & flag == flag
    }
}

/// Why a frame carries no five-tuple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseNote {
    /// Not IPv4 (ARP, LLDP, ...).
    NonIp(u16),
    Ipv6,
    /// IPv4 fragment with nonzero offset: no transport header present.
    NonFirstFragment,
    /// IPv4 carrying something other than TCP or UDP.
    OtherTransport(u8),
    /// A header claims more bytes than were captured.
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPacket {
    pub raw: RawPacket,
    pub tuple: Option<FiveTuple>,
    pub fields: FieldMap,
    pub tcp: Option<TcpMeta>,
    pub note: Option<ParseNote>,
}

impl ParsedPacket {
    pub fn payload(&self) -> &[u8] {
        match self.fields.get(FieldKind::Payload) {
            Some(r) => &self.raw.data[r.as_range()],
            None => &[],
        }
    }

    pub fn payload_offset(&self) -> Option<usize> {
        self.fields.get(FieldKind::Payload).map(|r| r.offset)
    }

    pub fn is_malformed(&self) -> bool {
        matches!(self.note, Some(ParseNote::Malformed(_)))
    }
}

fn be16(d: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([d[at], d[at + 1]])
}

fn be32(d: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([d[at], d[at + 1], d[at + 2], d[at + 3]])
}

/// Dissect one Ethernet frame. Never fails: frames that cannot be fully
/// parsed come back with `tuple == None` and a [`ParseNote`] explaining why,
/// keeping whatever ranges were located before the problem.
pub fn parse_packet(raw: RawPacket) -> ParsedPacket {
    let mut fields = FieldMap::default();
    let (tuple, tcp, note) = dissect(&raw.data, &mut fields);
    ParsedPacket { raw, tuple, fields, tcp, note }
}

fn malformed(msg: &str) -> (Option<FiveTuple>, Option<TcpMeta>, Option<ParseNote>) {
    (None, None, Some(ParseNote::Malformed(msg.to_string())))
}

fn dissect(d: &[u8], fields: &mut FieldMap) -> (Option<FiveTuple>, Option<TcpMeta>, Option<ParseNote>) {
    if d.len() < 14 {
        return malformed("frame shorter than an Ethernet header");
    }
    fields.set(FieldKind::MacDst, Some(ByteRange::new(0, 6)));
    fields.set(FieldKind::MacSrc, Some(ByteRange::new(6, 6)));
    let mut ethertype = be16(d, 12);
    let mut l3 = 14;
    if ethertype == ETHERTYPE_VLAN {
        if d.len() < 18 {
            return malformed("truncated VLAN tag");
        }
        ethertype = be16(d, 16);
        l3 = 18;
    }
    match ethertype {
        ETHERTYPE_IPV4 => {}
        ETHERTYPE_IPV6 => return (None, None, Some(ParseNote::Ipv6)),
        other => return (None, None, Some(ParseNote::NonIp(other))),
    }

    if d.len() < l3 + 20 {
        return malformed("truncated IPv4 header");
    }
    let version = d[l3] >> 4;
    let ihl = usize::from(d[l3] & 0x0F) * 4;
    if version != 4 || ihl < 20 {
        return malformed("bad IPv4 version or header length");
    }
    if d.len() < l3 + ihl {
        return malformed("IPv4 header length exceeds captured bytes");
    }
    let total_len = usize::from(be16(d, l3 + 2));
    if total_len < ihl {
        return malformed("IPv4 total length smaller than header");
    }
    fields.set(FieldKind::IpId, Some(ByteRange::new(l3 + 4, 2)));
    fields.set(FieldKind::IpChecksum, Some(ByteRange::new(l3 + 10, 2)));
    fields.set(FieldKind::IpSrc, Some(ByteRange::new(l3 + 12, 4)));
    fields.set(FieldKind::IpDst, Some(ByteRange::new(l3 + 16, 4)));

    let frag_offset = be16(d, l3 + 6) & 0x1FFF;
    if frag_offset != 0 {
        return (None, None, Some(ParseNote::NonFirstFragment));
    }
    let src_ip = Ipv4Addr::new(d[l3 + 12], d[l3 + 13], d[l3 + 14], d[l3 + 15]);
    let dst_ip = Ipv4Addr::new(d[l3 + 16], d[l3 + 17], d[l3 + 18], d[l3 + 19]);
    let l4 = l3 + ihl;
    // Ethernet trailers (padding to 60 bytes) are not payload.
    let ip_end = (l3 + total_len).min(d.len());

    match d[l3 + 9] {
        IPPROTO_TCP => {
            if ip_end < l4 + 20 {
                return malformed("truncated TCP header");
            }
            let doff = usize::from(d[l4 + 12] >> 4) * 4;
            if doff < 20 || ip_end < l4 + doff {
                return malformed("TCP data offset exceeds captured bytes");
            }
            fields.set(FieldKind::TcpSrcPort, Some(ByteRange::new(l4, 2)));
            fields.set(FieldKind::TcpDstPort, Some(ByteRange::new(l4 + 2, 2)));
            fields.set(FieldKind::TcpSeq, Some(ByteRange::new(l4 + 4, 4)));
            fields.set(FieldKind::TcpAck, Some(ByteRange::new(l4 + 8, 4)));
            fields.set(FieldKind::TcpWindow, Some(ByteRange::new(l4 + 14, 2)));
            if doff > 20 {
                let opts = ByteRange::new(l4 + 20, doff - 20);
                fields.set(FieldKind::TcpOptions, Some(opts));
                if let Some(ts) = find_timestamp_option(&d[opts.as_range()]) {
                    fields.set(FieldKind::TcpTsVal, Some(ByteRange::new(opts.offset + ts + 2, 4)));
                    fields.set(FieldKind::TcpTsEcr, Some(ByteRange::new(opts.offset + ts + 6, 4)));
                }
            }
            let payload = ByteRange::new(l4 + doff, ip_end - (l4 + doff));
            if payload.len > 0 {
                fields.set(FieldKind::Payload, Some(payload));
                if let Some(sni) = tls::locate_sni(&d[payload.as_range()]) {
                    fields.set(FieldKind::Sni, Some(sni.range.shifted(payload.offset)));
                }
            }
            let tcp = TcpMeta { seq: be32(d, l4 + 4), ack: be32(d, l4 + 8), flags: be16(d, l4 + 12) & 0x01FF };
            let tuple = FiveTuple { src_ip, dst_ip, src_port: be16(d, l4), dst_port: be16(d, l4 + 2), protocol: Protocol::Tcp };
            (Some(tuple), Some(tcp), None)
        }
        IPPROTO_UDP => {
            if ip_end < l4 + 8 {
                return malformed("truncated UDP header");
            }
            fields.set(FieldKind::UdpSrcPort, Some(ByteRange::new(l4, 2)));
            fields.set(FieldKind::UdpDstPort, Some(ByteRange::new(l4 + 2, 2)));
            let udp_len = usize::from(be16(d, l4 + 4));
            let end = if udp_len >= 8 { (l4 + udp_len).min(ip_end) } else { ip_end };
            let payload = ByteRange::new(l4 + 8, end - (l4 + 8));
            if payload.len > 0 {
                fields.set(FieldKind::Payload, Some(payload));
                if let Some(sni) = crate::udp::locate_dtls_sni(&d[payload.as_range()]) {
                    fields.set(FieldKind::Sni, Some(sni.shifted(payload.offset)));
                }
            }
            let tuple = FiveTuple { src_ip, dst_ip, src_port: be16(d, l4), dst_port: be16(d, l4 + 2), protocol: Protocol::Udp };
            (Some(tuple), None, None)
        }
        other => (None, None, Some(ParseNote::OtherTransport(other))),
    }
}

/// Offset of the timestamp option (kind 8, length 10) within an options block.
fn find_timestamp_option(opts: &[u8]) -> Option<usize> {
    let mut i = 0;
    while i < opts.len() {
        match opts[i] {
            0 => return None,
            1 => i += 1,
            kind => {
                let len = usize::from(*opts.get(i + 1)?);
                if len < 2 || i + len > opts.len() {
                    return None;
                }
                if kind == 8 && len == 10 {
                    return Some(i);
                }
                i += len;
            }
        }
    }
    None
}
