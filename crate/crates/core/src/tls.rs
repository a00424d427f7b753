//! TLS record framing and handshake inspection.
//!
//! Detection is purely structural: a record header is a content type in
//! 20..=23, major version 3 and a plausible length. Ports are never
//! consulted. Handshake messages are reassembled across records so that a
//! ClientHello split over several records or segments still yields its SNI.

use serde::{Deserialize, Serialize};

use crate::packet::ByteRange;

pub const CONTENT_CHANGE_CIPHER_SPEC: u8 = 20;
pub const CONTENT_ALERT: u8 = 21;
pub const CONTENT_HANDSHAKE: u8 = 22;
pub const CONTENT_APPLICATION_DATA: u8 = 23;

pub const HANDSHAKE_CLIENT_HELLO: u8 = 1;
pub const HANDSHAKE_SERVER_HELLO: u8 = 2;

const RECORD_HEADER_LEN: usize = 5;
/// 2^14 plaintext plus the maximum expansion allowed for ciphertext.
const MAX_RECORD_LEN: usize = (1 << 14) + 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandshakeRole {
    ClientHello,
    ServerHello,
    Other,
}

/// Location of bytes inside one of the payload segments that were scanned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRange {
    pub segment: usize,
    pub range: ByteRange,
}

/// One observation from a TLS byte stream: a ClientHello, a ServerHello, or
/// any other record or handshake message (`Other`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsHandshakeInfo {
    pub role: HandshakeRole,
    pub legacy_version: u16,
    /// Selected suite; present iff `role == ServerHello`.
    pub cipher_suite: Option<u16>,
    pub sni_host: Option<String>,
    /// Where the hostname bytes sit. Usually one piece; more than one when
    /// the name straddles a record or segment boundary.
    pub sni_spans: Vec<SegmentRange>,
}

impl TlsHandshakeInfo {
    fn other(version: u16) -> Self {
        TlsHandshakeInfo { role: HandshakeRole::Other, legacy_version: version, cipher_suite: None, sni_host: None, sni_spans: Vec::new() }
    }

    /// The SNI range when the hostname lies in a single segment.
    pub fn sni_range(&self) -> Option<SegmentRange> {
        match self.sni_spans.as_slice() {
            [one] => Some(*one),
            _ => None,
        }
    }
}

pub fn is_record_header(b: &[u8]) -> bool {
    if b.len() < RECORD_HEADER_LEN {
        return false;
    }
    let len = usize::from(u16::from_be_bytes([b[3], b[4]]));
    (CONTENT_CHANGE_CIPHER_SPEC..=CONTENT_APPLICATION_DATA).contains(&b[0]) && b[1] == 3 && b[2] <= 4 && len > 0 && len <= MAX_RECORD_LEN
}

/// Contiguous stream built from ordered segments, remembering where each
/// segment begins.
struct Stream {
    bytes: Vec<u8>,
    starts: Vec<usize>,
}

impl Stream {
    fn new(segments: &[&[u8]]) -> Self {
        let mut bytes = Vec::with_capacity(segments.iter().map(|s| s.len()).sum());
        let mut starts = Vec::with_capacity(segments.len());
        for s in segments {
            starts.push(bytes.len());
            bytes.extend_from_slice(s);
        }
        Stream { bytes, starts }
    }

    fn next_segment_start(&self, after: usize) -> Option<usize> {
        self.starts.iter().copied().find(|&s| s > after && s < self.bytes.len())
    }

    /// Split a stream range into per-segment pieces.
    fn to_segments(&self, range: ByteRange) -> Vec<SegmentRange> {
        let mut out = Vec::new();
        for (i, &start) in self.starts.iter().enumerate() {
            let end = self.starts.get(i + 1).copied().unwrap_or(self.bytes.len());
            if let Some(hit) = range.intersect(ByteRange::new(start, end - start)) {
                out.push(SegmentRange { segment: i, range: ByteRange::new(hit.offset - start, hit.len) });
            }
        }
        out
    }
}

/// Handshake-layer bytes gathered from consecutive handshake records, with a
/// map back to stream offsets.
#[derive(Default)]
struct HandshakeBuffer {
    bytes: Vec<u8>,
    /// (offset in `bytes`, offset in stream, len)
    pieces: Vec<(usize, usize, usize)>,
    consumed: usize,
}

impl HandshakeBuffer {
    fn push(&mut self, stream_offset: usize, data: &[u8]) {
        self.pieces.push((self.bytes.len(), stream_offset, data.len()));
        self.bytes.extend_from_slice(data);
    }

    fn to_stream(&self, r: ByteRange) -> Vec<ByteRange> {
        let mut out = Vec::new();
        for &(hs, st, len) in &self.pieces {
            if let Some(hit) = r.intersect(ByteRange::new(hs, len)) {
                out.push(ByteRange::new(st + (hit.offset - hs), hit.len));
            }
        }
        out
    }

    /// Parse every complete message; with `flush`, also inspect a trailing
    /// partial message (the stream ended inside it).
    fn drain(&mut self, flush: bool, record_version: u16, stream: &Stream, out: &mut Vec<TlsHandshakeInfo>) {
        loop {
            let rest = &self.bytes[self.consumed..];
            if rest.len() < 4 {
                return;
            }
            let body_len = (usize::from(rest[1]) << 16) | (usize::from(rest[2]) << 8) | usize::from(rest[3]);
            let complete = rest.len() >= 4 + body_len;
            if !complete && !flush {
                return;
            }
            let body_start = self.consumed + 4;
            let body_end = (body_start + body_len).min(self.bytes.len());
            let info = parse_hello(rest[0], &self.bytes[body_start..body_end], false, record_version).map(|h| {
                let spans = h
                    .sni
                    .map(|r| self.to_stream(r.shifted(body_start)).into_iter().flat_map(|sr| stream.to_segments(sr)).collect())
                    .unwrap_or_default();
                TlsHandshakeInfo { sni_spans: spans, ..h.info }
            });
            out.push(info.unwrap_or_else(|| TlsHandshakeInfo::other(record_version)));
            if !complete {
                self.consumed = self.bytes.len();
                return;
            }
            self.consumed = body_start + body_len;
        }
    }
}

/// Scan one direction of a TCP byte stream, given as in-order payload
/// segments. Returns one entry per handshake message or non-handshake
/// record found; an empty result means no TLS framing was seen.
///
/// Parsing resynchronises at segment boundaries, which covers captures that
/// start mid-record as well as STARTTLS-style upgrades.
pub fn parse_tls_records(segments: &[&[u8]]) -> Vec<TlsHandshakeInfo> {
    let stream = Stream::new(segments);
    let bytes = &stream.bytes;
    let mut out = Vec::new();
    let mut hs = HandshakeBuffer::default();
    let mut last_version = 0u16;
    let mut encrypted_handshake = false;
    let mut pos = 0usize;

    while pos < bytes.len() {
        if !is_record_header(&bytes[pos..]) {
            match stream.next_segment_start(pos) {
                Some(next) => {
                    pos = next;
                    continue;
                }
                None => break,
            }
        }
        let content_type = bytes[pos];
        let version = u16::from_be_bytes([bytes[pos + 1], bytes[pos + 2]]);
        let len = usize::from(u16::from_be_bytes([bytes[pos + 3], bytes[pos + 4]]));
        let body_start = pos + RECORD_HEADER_LEN;
        let body_end = (body_start + len).min(bytes.len());
        last_version = version;

        if content_type == CONTENT_HANDSHAKE && !encrypted_handshake {
            hs.push(body_start, &bytes[body_start..body_end]);
            hs.drain(false, version, &stream, &mut out);
        } else {
            if content_type == CONTENT_CHANGE_CIPHER_SPEC {
                encrypted_handshake = true;
            }
            out.push(TlsHandshakeInfo::other(version));
        }
        pos = body_start + len;
    }
    hs.drain(true, last_version, &stream, &mut out);
    out
}

/// Hostname and its range within `payload`, when the payload holds a
/// ClientHello with a server_name extension entirely inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SniLocation {
    pub host: String,
    pub range: ByteRange,
}

pub fn locate_sni(payload: &[u8]) -> Option<SniLocation> {
    if !is_record_header(payload) || payload[0] != CONTENT_HANDSHAKE {
        return None;
    }
    parse_tls_records(&[payload]).into_iter().find_map(|info| {
        let span = info.sni_range()?;
        Some(SniLocation { host: info.sni_host?, range: span.range })
    })
}

pub(crate) struct ParsedHello {
    pub info: TlsHandshakeInfo,
    /// Hostname range relative to the start of the message body.
    pub sni: Option<ByteRange>,
}

/// Parse a ClientHello or ServerHello body. `dtls` selects the DTLS
/// ClientHello layout (cookie after the session id). Tolerates truncated
/// bodies: whatever is fully present is extracted.
pub(crate) fn parse_hello(msg_type: u8, body: &[u8], dtls: bool, record_version: u16) -> Option<ParsedHello> {
    let mut r = Reader::new(body);
    match msg_type {
        HANDSHAKE_CLIENT_HELLO => {
            let version = r.u16().unwrap_or(record_version);
            let mut info = TlsHandshakeInfo {
                role: HandshakeRole::ClientHello,
                legacy_version: version,
                cipher_suite: None,
                sni_host: None,
                sni_spans: Vec::new(),
            };
            let sni = client_hello_sni(&mut r, dtls);
            if let Some(range) = sni {
                info.sni_host = Some(String::from_utf8_lossy(&body[range.as_range()]).into_owned());
            }
            Some(ParsedHello { info, sni })
        }
        HANDSHAKE_SERVER_HELLO => {
            let version = r.u16()?;
            r.skip(32)?;
            let sid = usize::from(r.u8()?);
            r.skip(sid)?;
            let suite = r.u16()?;
            Some(ParsedHello {
                info: TlsHandshakeInfo {
                    role: HandshakeRole::ServerHello,
                    legacy_version: version,
                    cipher_suite: Some(suite),
                    sni_host: None,
                    sni_spans: Vec::new(),
                },
                sni: None,
            })
        }
        _ => None,
    }
}

/// Walks a ClientHello after its version field up to the server_name
/// extension's first host_name entry.
fn client_hello_sni(r: &mut Reader<'_>, dtls: bool) -> Option<ByteRange> {
    r.skip(32)?;
    let sid = usize::from(r.u8()?);
    r.skip(sid)?;
    if dtls {
        let cookie = usize::from(r.u8()?);
        r.skip(cookie)?;
    }
    let suites = usize::from(r.u16()?);
    r.skip(suites)?;
    let comp = usize::from(r.u8()?);
    r.skip(comp)?;
    let ext_total = usize::from(r.u16()?);
    let ext_end = r.pos + ext_total;
    while r.pos + 4 <= ext_end {
        let ext_type = r.u16()?;
        let ext_len = usize::from(r.u16()?);
        let ext_start = r.pos;
        if ext_type == 0 {
            let list_len = usize::from(r.u16()?);
            let list_end = (r.pos + list_len).min(ext_start + ext_len);
            while r.pos + 3 <= list_end {
                let name_type = r.u8()?;
                let name_len = usize::from(r.u16()?);
                let start = r.pos;
                r.skip(name_len)?;
                if name_type == 0 && name_len > 0 {
                    return Some(ByteRange::new(start, name_len));
                }
            }
            return None;
        }
        r.pos = ext_start;
        r.skip(ext_len)?;
    }
    None
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn u8(&mut self) -> Option<u8> {
        let v = *self.buf.get(self.pos)?;
        self.pos += 1;
        Some(v)
    }

    pub fn u16(&mut self) -> Option<u16> {
        let b = self.buf.get(self.pos..self.pos + 2)?;
        self.pos += 2;
        Some(u16::from_be_bytes([b[0], b[1]]))
    }

    pub fn u24(&mut self) -> Option<usize> {
        let b = self.buf.get(self.pos..self.pos + 3)?;
        self.pos += 3;
        Some((usize::from(b[0]) << 16) | (usize::from(b[1]) << 8) | usize::from(b[2]))
    }

    pub fn skip(&mut self, n: usize) -> Option<()> {
        if self.pos + n > self.buf.len() {
            return None;
        }
        self.pos += n;
        Some(())
    }
}
