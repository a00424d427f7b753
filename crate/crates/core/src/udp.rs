//! DTLS and QUIC recognition for UDP sessions.

use serde::{Deserialize, Serialize};

use crate::packet::ByteRange;
use crate::tls::{self, HandshakeRole, Reader, SegmentRange, TlsHandshakeInfo};

const DTLS_RECORD_HEADER_LEN: usize = 13;
const DTLS_HANDSHAKE_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UdpEncryption {
    Dtls,
    Quic,
    None,
}

/// DTLS 1.0 (0xFEFF) or 1.2 (0xFEFD) record header.
pub fn is_dtls_record(b: &[u8]) -> bool {
    if b.len() < DTLS_RECORD_HEADER_LEN {
        return false;
    }
    let len = usize::from(u16::from_be_bytes([b[11], b[12]]));
    (tls::CONTENT_CHANGE_CIPHER_SPEC..=tls::CONTENT_APPLICATION_DATA).contains(&b[0])
        && b[1] == 0xFE
        && (b[2] == 0xFF || b[2] == 0xFD)
        && len > 0
        && DTLS_RECORD_HEADER_LEN + len <= b.len()
}

fn is_known_quic_version(v: u32) -> bool {
    matches!(v, 0x0000_0001 | 0x6B33_43CF) || (v & 0xFFFF_FF00) == 0xFF00_0000
}

/// QUIC long header with a recognized version and sane connection-id lengths.
pub fn is_quic_long_header(b: &[u8]) -> bool {
    if b.len() < 7 || b[0] & 0xC0 != 0xC0 {
        return false;
    }
    let version = u32::from_be_bytes([b[1], b[2], b[3], b[4]]);
    if !is_known_quic_version(version) {
        return false;
    }
    let dcid = usize::from(b[5]);
    if dcid > 20 || b.len() < 7 + dcid {
        return false;
    }
    usize::from(b[6 + dcid]) <= 20
}

/// Classify a UDP session from its datagram payloads in session order.
/// Short-header QUIC packets carry no version, so a session is QUIC only
/// once a long header has been seen in it.
pub fn detect_udp_encryption(payloads: &[&[u8]]) -> UdpEncryption {
    let non_empty: Vec<&[u8]> = payloads.iter().copied().filter(|p| !p.is_empty()).collect();
    if non_empty.iter().any(|p| is_dtls_record(p)) {
        return UdpEncryption::Dtls;
    }
    if non_empty.iter().any(|p| is_quic_long_header(p)) {
        return UdpEncryption::Quic;
    }
    UdpEncryption::None
}

/// Iterate DTLS records in one datagram: (content type, version, body range).
fn dtls_records(d: &[u8]) -> Vec<(u8, u16, ByteRange)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while is_dtls_record(&d[pos..]) {
        let len = usize::from(u16::from_be_bytes([d[pos + 11], d[pos + 12]]));
        out.push((d[pos], u16::from_be_bytes([d[pos + 1], d[pos + 2]]), ByteRange::new(pos + DTLS_RECORD_HEADER_LEN, len)));
        pos += DTLS_RECORD_HEADER_LEN + len;
    }
    out
}

/// Hello messages carried in unfragmented DTLS handshake records. Fragmented
/// handshake messages are reported as `Other`.
pub fn dtls_handshakes(payloads: &[&[u8]]) -> Vec<TlsHandshakeInfo> {
    let mut out = Vec::new();
    for (seg, d) in payloads.iter().enumerate() {
        for (ctype, version, body) in dtls_records(d) {
            let other = TlsHandshakeInfo {
                role: HandshakeRole::Other,
                legacy_version: version,
                cipher_suite: None,
                sni_host: None,
                sni_spans: Vec::new(),
            };
            if ctype != tls::CONTENT_HANDSHAKE {
                out.push(other);
                continue;
            }
            let rec = &d[body.as_range()];
            let mut r = Reader::new(rec);
            let parsed = (|| {
                let msg_type = r.u8()?;
                let len = r.u24()?;
                r.skip(2)?; // message_seq
                let frag_off = r.u24()?;
                let frag_len = r.u24()?;
                if frag_off != 0 || frag_len != len || rec.len() < DTLS_HANDSHAKE_HEADER_LEN + len {
                    return None;
                }
                let msg = &rec[DTLS_HANDSHAKE_HEADER_LEN..DTLS_HANDSHAKE_HEADER_LEN + len];
                tls::parse_hello(msg_type, msg, true, version)
            })();
            match parsed {
                Some(h) => {
                    let spans = h
                        .sni
                        .map(|s| vec![SegmentRange { segment: seg, range: s.shifted(body.offset + DTLS_HANDSHAKE_HEADER_LEN) }])
                        .unwrap_or_default();
                    out.push(TlsHandshakeInfo { sni_spans: spans, ..h.info });
                }
                None => out.push(other),
            }
        }
    }
    out
}

pub fn locate_dtls_sni(payload: &[u8]) -> Option<ByteRange> {
    if !is_dtls_record(payload) {
        return None;
    }
    dtls_handshakes(&[payload]).into_iter().find_map(|i| i.sni_range()).map(|s| s.range)
}
