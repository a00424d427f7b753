//! Loading captures and the session-level analysis shared by the audit and
//! labeling steps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::granularity::{Direction, TrafficUnit};
use crate::packet::{parse_packet, ByteRange, FieldKind, FiveTuple, ParsedPacket, Protocol};
use crate::pcap::{open_capture, CaptureMeta, PcapError, RawPacket};
use crate::reassembly::{reassemble, StreamSegment};
use crate::tls::{parse_tls_records, HandshakeRole, TlsHandshakeInfo};
use crate::udp::dtls_handshakes;

#[derive(Debug)]
pub struct LoadedCapture {
    pub path: PathBuf,
    pub meta: CaptureMeta,
    pub packets: Vec<ParsedPacket>,
    /// Set when the file ended in a damaged record; `packets` holds what
    /// was read before it.
    pub error: Option<PcapError>,
}

impl LoadedCapture {
    /// File name used to derive per-file seeds and report rows.
    pub fn name(&self) -> String {
        file_label(&self.path)
    }
}

pub fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Read and dissect a capture. Header problems are errors; a damaged
/// trailing record keeps the packets before it.
pub fn load_capture(path: &Path) -> Result<LoadedCapture, PcapError> {
    let cap = open_capture(path)?;
    Ok(LoadedCapture { path: path.to_path_buf(), meta: cap.meta, packets: parse_all(cap.packets), error: cap.error })
}

/// Dissect frames and mark SNI hostnames that only become visible after
/// reassembling the TCP stream.
pub fn parse_all(raw: Vec<RawPacket>) -> Vec<ParsedPacket> {
    let mut packets: Vec<ParsedPacket> = raw.into_iter().map(parse_packet).collect();
    annotate_stream_sni(&mut packets);
    packets
}

fn directed_tcp_streams(packets: &[ParsedPacket]) -> HashMap<FiveTuple, Vec<usize>> {
    let mut flows: HashMap<FiveTuple, Vec<usize>> = HashMap::new();
    for (i, p) in packets.iter().enumerate() {
        if let Some(t) = p.tuple.filter(|t| t.protocol == Protocol::Tcp) {
            flows.entry(t).or_default().push(i);
        }
    }
    for idx in flows.values_mut() {
        idx.sort_by_key(|&i| (packets[i].raw.ts, packets[i].raw.index));
    }
    flows
}

/// Frame-relative location of a piece of the reassembled stream.
fn to_frame_range(seg: &StreamSegment, p: &ParsedPacket, r: ByteRange) -> ByteRange {
    r.shifted(p.payload_offset().unwrap_or(0) + seg.payload_offset)
}

fn annotate_stream_sni(packets: &mut [ParsedPacket]) {
    let mut marks: Vec<(usize, ByteRange)> = Vec::new();
    for idx in directed_tcp_streams(packets).into_values() {
        let refs: Vec<&ParsedPacket> = idx.iter().map(|&i| &packets[i]).collect();
        let segs = reassemble(&refs);
        let bytes: Vec<&[u8]> = segs.iter().map(|s| s.bytes(&refs)).collect();
        for info in parse_tls_records(&bytes) {
            for span in &info.sni_spans {
                let seg = &segs[span.segment];
                let frame = idx[seg.packet];
                marks.push((frame, to_frame_range(seg, &packets[frame], span.range)));
            }
        }
    }
    for (frame, range) in marks {
        let fields = &mut packets[frame].fields;
        if fields.get(FieldKind::Sni).is_none() {
            fields.set(FieldKind::Sni, Some(range));
        }
    }
}

/// Packets of one direction of a session, in session order.
pub fn direction_packets(session: &TrafficUnit, dir: Direction) -> Vec<&ParsedPacket> {
    let Some(key) = session.session_key() else {
        return session.packets.iter().collect();
    };
    session.packets.iter().filter(|p| p.tuple.is_some_and(|t| key.direction_of(&t) == Some(dir))).collect()
}

/// TLS or DTLS observations for a session, initiator direction first.
pub fn session_handshakes(session: &TrafficUnit) -> Vec<TlsHandshakeInfo> {
    let mut out = Vec::new();
    for dir in [Direction::Forward, Direction::Backward] {
        let pkts = direction_packets(session, dir);
        match session.protocol() {
            Some(Protocol::Tcp) => {
                let segs = reassemble(&pkts);
                let bytes: Vec<&[u8]> = segs.iter().map(|s| s.bytes(&pkts)).collect();
                out.extend(parse_tls_records(&bytes));
            }
            Some(Protocol::Udp) => {
                let payloads: Vec<&[u8]> = pkts.iter().map(|p| p.payload()).collect();
                out.extend(dtls_handshakes(&payloads));
            }
            None => {}
        }
    }
    out
}

/// Hostname from the session's first ClientHello carrying one.
pub fn session_sni(handshakes: &[TlsHandshakeInfo]) -> Option<String> {
    handshakes.iter().filter(|h| h.role == HandshakeRole::ClientHello).find_map(|h| h.sni_host.clone())
}
