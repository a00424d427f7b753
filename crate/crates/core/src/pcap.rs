//! Classic libpcap capture files.
//!
//! Only the original format is handled: a 24-byte global header followed by
//! 16-byte record headers. Both byte orders and the nanosecond-resolution
//! magic are accepted. pcapng is not.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
/// Records larger than this are treated as corruption rather than allocated.
const MAX_RECORD_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("unrecognized magic number {0:#010x}: not a classic pcap file")]
    UnrecognizedMagic(u32),
    #[error("file ends inside the global header ({0} of 24 bytes)")]
    TruncatedHeader(usize),
    #[error("file ends inside record {index} after {packets_read} complete packets")]
    TruncatedRecord { index: u64, packets_read: u64 },
    #[error("record {index} claims {len} captured bytes")]
    OversizedRecord { index: u64, len: u32 },
    #[error("unsupported link type {0} (only Ethernet is parsed)")]
    UnsupportedLinkType(u32),
    #[error("packet {index} violates record invariants: {reason}")]
    InvalidPacket { index: u64, reason: &'static str },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkType {
    Ethernet,
}

impl LinkType {
    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self, PcapError> {
        match code {
            1 => Ok(LinkType::Ethernet),
            other => Err(PcapError::UnsupportedLinkType(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TsResolution {
    Micro,
    Nano,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub link_type: LinkType,
    pub snaplen: u32,
    pub endianness: Endianness,
    pub ts_resolution: TsResolution,
}

impl Default for CaptureMeta {
    fn default() -> Self {
        CaptureMeta { link_type: LinkType::Ethernet, snaplen: 65535, endianness: Endianness::Little, ts_resolution: TsResolution::Micro }
    }
}

/// Capture timestamp. Sub-second precision is kept in nanoseconds so that
/// both file resolutions round-trip exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp {
    pub secs: u64,
    pub nanos: u32,
}

impl Timestamp {
    pub fn new(secs: u64, nanos: u32) -> Self {
        debug_assert!(nanos < 1_000_000_000);
        Timestamp { secs, nanos }
    }

    pub fn from_micros(secs: u64, micros: u32) -> Self {
        Timestamp::new(secs, micros * 1000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.secs as f64 + f64::from(self.nanos) * 1e-9
    }

    pub fn as_nanos(self) -> u128 {
        u128::from(self.secs) * 1_000_000_000 + u128::from(self.nanos)
    }

    pub fn from_nanos(total: u128) -> Self {
        Timestamp { secs: (total / 1_000_000_000) as u64, nanos: (total % 1_000_000_000) as u32 }
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{:09}", self.secs, self.nanos)
    }
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPacket {
    /// Ordinal within the source file.
    pub index: u64,
    pub ts: Timestamp,
    /// Length on the wire; `data.len()` is the captured length.
    pub original_len: u32,
    pub data: Vec<u8>,
}

impl RawPacket {
    pub fn new(index: u64, ts: Timestamp, data: Vec<u8>) -> Self {
        let original_len = data.len() as u32;
        RawPacket { index, ts, original_len, data }
    }

    pub fn captured_len(&self) -> usize {
        self.data.len()
    }

    fn validate(&self) -> Result<(), PcapError> {
        if self.data.len() > u32::MAX as usize {
            return Err(PcapError::InvalidPacket { index: self.index, reason: "captured data too long" });
        }
        if self.data.len() as u64 > u64::from(self.original_len) {
            return Err(PcapError::InvalidPacket { index: self.index, reason: "captured_len exceeds original_len" });
        }
        Ok(())
    }
}

/// Streaming reader. Yields packets in file order; after the first error the
/// iterator is exhausted.
pub struct PcapReader<R> {
    inner: R,
    meta: CaptureMeta,
    next_index: u64,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got = read_up_to(&mut inner, &mut header)?;
        if got < 4 {
            return Err(PcapError::TruncatedHeader(got));
        }
        let le = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let be = u32::from_be_bytes([header[0], header[1], header[2], header[3]]);
        let (endianness, ts_resolution) = match (le, be) {
            (MAGIC_MICROS, _) => (Endianness::Little, TsResolution::Micro),
            (MAGIC_NANOS, _) => (Endianness::Little, TsResolution::Nano),
            (_, MAGIC_MICROS) => (Endianness::Big, TsResolution::Micro),
            (_, MAGIC_NANOS) => (Endianness::Big, TsResolution::Nano),
            _ => return Err(PcapError::UnrecognizedMagic(be)),
        };
        if got < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader(got));
        }
        let word = |at: usize| read_u32(&header[at..at + 4], endianness);
        let snaplen = word(16);
        let link_type = LinkType::from_code(word(20))?;
        Ok(PcapReader { inner, meta: CaptureMeta { link_type, snaplen, endianness, ts_resolution }, next_index: 0, done: false })
    }

    pub fn meta(&self) -> &CaptureMeta {
        &self.meta
    }

    fn read_record(&mut self) -> Result<Option<RawPacket>, PcapError> {
        let index = self.next_index;
        let mut header = [0u8; RECORD_HEADER_LEN];
        let got = read_up_to(&mut self.inner, &mut header)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedRecord { index, packets_read: index });
        }
        let e = self.meta.endianness;
        let ts_sec = read_u32(&header[0..4], e);
        let ts_frac = read_u32(&header[4..8], e);
        let incl_len = read_u32(&header[8..12], e);
        let orig_len = read_u32(&header[12..16], e);
        if incl_len > MAX_RECORD_LEN {
            return Err(PcapError::OversizedRecord { index, len: incl_len });
        }
        let mut data = vec![0u8; incl_len as usize];
        if read_up_to(&mut self.inner, &mut data)? < data.len() {
            return Err(PcapError::TruncatedRecord { index, packets_read: index });
        }
        let nanos = match self.meta.ts_resolution {
            TsResolution::Micro => ts_frac.saturating_mul(1000),
            TsResolution::Nano => ts_frac,
        };
        // Out-of-range fractions carry into the seconds field.
        let ts = Timestamp::from_nanos(u128::from(ts_sec) * 1_000_000_000 + u128::from(nanos));
        self.next_index += 1;
        Ok(Some(RawPacket {
            index,
            ts,
            // Some writers record orig_len < incl_len; keep the invariant.
            original_len: orig_len.max(incl_len),
            data,
        }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<RawPacket, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_record() {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// A fully read capture. `error` holds the terminal error, if the file ended
/// mid-record; `packets` holds everything read before it.
#[derive(Debug)]
pub struct Capture {
    pub meta: CaptureMeta,
    pub packets: Vec<RawPacket>,
    pub error: Option<PcapError>,
}

pub fn open_capture(path: impl AsRef<Path>) -> Result<Capture, PcapError> {
    let file = File::open(path)?;
    read_capture(BufReader::new(file))
}

pub fn read_capture<R: Read>(reader: R) -> Result<Capture, PcapError> {
    let mut reader = PcapReader::new(reader)?;
    let meta = reader.meta().clone();
    let mut packets = Vec::new();
    let mut error = None;
    for item in &mut reader {
        match item {
            Ok(p) => packets.push(p),
            Err(e) => error = Some(e),
        }
    }
    Ok(Capture { meta, packets, error })
}

pub fn write_capture(meta: &CaptureMeta, packets: &[RawPacket], path: impl AsRef<Path>) -> Result<(), PcapError> {
    for p in packets {
        p.validate()?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    write_capture_to(meta, packets, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Serializes a capture. Every packet is validated before the first byte is
/// written.
pub fn write_capture_to<W: Write>(meta: &CaptureMeta, packets: &[RawPacket], out: &mut W) -> Result<(), PcapError> {
    for p in packets {
        p.validate()?;
    }
    let e = meta.endianness;
    let magic = match meta.ts_resolution {
        TsResolution::Micro => MAGIC_MICROS,
        TsResolution::Nano => MAGIC_NANOS,
    };
    let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
    header.extend_from_slice(&write_u32(magic, e));
    header.extend_from_slice(&write_u16(2, e));
    header.extend_from_slice(&write_u16(4, e));
    header.extend_from_slice(&write_u32(0, e)); // thiszone
    header.extend_from_slice(&write_u32(0, e)); // sigfigs
    header.extend_from_slice(&write_u32(meta.snaplen, e));
    header.extend_from_slice(&write_u32(meta.link_type.code(), e));
    out.write_all(&header)?;

    for p in packets {
        let frac = match meta.ts_resolution {
            TsResolution::Micro => p.ts.nanos / 1000,
            TsResolution::Nano => p.ts.nanos,
        };
        let secs = u32::try_from(p.ts.secs)
            .map_err(|_| PcapError::InvalidPacket { index: p.index, reason: "timestamp exceeds 32-bit seconds" })?;
        out.write_all(&write_u32(secs, e))?;
        out.write_all(&write_u32(frac, e))?;
        out.write_all(&write_u32(p.data.len() as u32, e))?;
        out.write_all(&write_u32(p.original_len, e))?;
        out.write_all(&p.data)?;
    }
    Ok(())
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn read_u32(b: &[u8], e: Endianness) -> u32 {
    let arr = [b[0], b[1], b[2], b[3]];
    match e {
        Endianness::Little => u32::from_le_bytes(arr),
        Endianness::Big => u32::from_be_bytes(arr),
    }
}

fn write_u32(v: u32, e: Endianness) -> [u8; 4] {
    match e {
        Endianness::Little => v.to_le_bytes(),
        Endianness::Big => v.to_be_bytes(),
    }
}

fn write_u16(v: u16, e: Endianness) -> [u8; 2] {
    match e {
        Endianness::Little => v.to_le_bytes(),
        Endianness::Big => v.to_be_bytes(),
    }
}
