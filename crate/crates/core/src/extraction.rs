//! Fixed-size byte extraction from traffic units.
//!
//! * T1: the first `m` bytes of the whole unit, frames concatenated.
//! * T2: the first `m` bytes of a window of `n` packets, concatenated.
//! * T3: the first `m` bytes of each packet in a window of `n` packets.
//!
//! Windows are either the first `n` packets or every run of `n` consecutive
//! packets advancing by `stride`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::granularity::{Granularity, TrafficUnit, UnitKey};
use crate::packet::{ByteRange, FieldKind, FieldMap, ParsedPacket};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("{strategy} cannot be applied to {granularity} units")]
    IncompatibleSpec { strategy: Strategy, granularity: Granularity },
    #[error("invalid extraction spec: {0}")]
    InvalidSpec(String),
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    T1,
    T2,
    T3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selection {
    FirstN,
    AnyConsecutiveN,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Strategy {
    type Err = ExtractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(Strategy::T1),
            "T2" => Ok(Strategy::T2),
            "T3" => Ok(Strategy::T3),
            _ => Err(ExtractionError::Unknown { what: "extraction strategy", value: s.to_string() }),
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::FirstN => "first-n",
            Selection::AnyConsecutiveN => "any-consecutive-n",
        })
    }
}

impl FromStr for Selection {
    type Err = ExtractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "first-n" | "first" | "firstn" => Ok(Selection::FirstN),
            "any-consecutive-n" | "any" | "consecutive" | "anyconsecutiven" => Ok(Selection::AnyConsecutiveN),
            _ => Err(ExtractionError::Unknown { what: "packet selection", value: s.to_string() }),
        }
    }
}

/// Sizes used by the two reference models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    EtBert,
    Yatc,
}

impl FromStr for Preset {
    type Err = ExtractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "etbert" => Ok(Preset::EtBert),
            "yatc" => Ok(Preset::Yatc),
            _ => Err(ExtractionError::Unknown { what: "preset", value: s.to_string() }),
        }
    }
}

pub const PRESET_PACKETS: usize = 5;

impl Preset {
    pub fn packet_bytes(self) -> usize {
        match self {
            Preset::EtBert => 128,
            Preset::Yatc => 1600,
        }
    }

    /// `m` for T1 and T2.
    pub fn concat_bytes(self) -> usize {
        match self {
            Preset::EtBert => 640,
            Preset::Yatc => 1600,
        }
    }

    /// `m` per packet for T3.
    pub fn per_packet_bytes(self) -> usize {
        match self {
            Preset::EtBert => 128,
            Preset::Yatc => 320,
        }
    }

    pub fn spec(self, strategy: Strategy, selection: Selection) -> ExtractionSpec {
        match strategy {
            Strategy::T1 => ExtractionSpec::t1(self.concat_bytes()),
            Strategy::T2 => ExtractionSpec::t2(self.concat_bytes(), PRESET_PACKETS, selection),
            Strategy::T3 => ExtractionSpec::t3(self.per_packet_bytes(), PRESET_PACKETS, selection),
        }
    }

    /// The reference configuration for a granularity: T1 on single packets,
    /// T3 on bursts, and the requested strategy otherwise.
    pub fn for_granularity(self, granularity: Granularity, strategy: Strategy, selection: Selection) -> ExtractionSpec {
        match granularity {
            Granularity::Packet => ExtractionSpec::t1(self.packet_bytes()),
            _ => self.spec(strategy, selection),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub strategy: Strategy,
    /// Bytes per sample (T1, T2) or per packet row (T3).
    pub m: usize,
    /// Packets per window. Unused by T1.
    pub n: usize,
    pub selection: Selection,
    /// Packets between window starts under `AnyConsecutiveN`.
    pub stride: usize,
    pub pad_byte: u8,
    /// Under `FirstN`, discard units shorter than `n` instead of padding.
    pub drop_short: bool,
    /// Take transport payloads instead of whole frames.
    pub payload_only: bool,
}

impl ExtractionSpec {
    pub fn t1(m: usize) -> Self {
        ExtractionSpec {
            strategy: Strategy::T1,
            m,
            n: 1,
            selection: Selection::FirstN,
            stride: 1,
            pad_byte: 0,
            drop_short: false,
            payload_only: false,
        }
    }

    pub fn t2(m: usize, n: usize, selection: Selection) -> Self {
        ExtractionSpec { strategy: Strategy::T2, n, selection, stride: n, ..Self::t1(m) }
    }

    pub fn t3(m: usize, n: usize, selection: Selection) -> Self {
        ExtractionSpec { strategy: Strategy::T3, n, selection, stride: n, ..Self::t1(m) }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.m == 0 {
            return Err(ExtractionError::InvalidSpec("m must be positive".into()));
        }
        if self.strategy != Strategy::T1 && self.n == 0 {
            return Err(ExtractionError::InvalidSpec("n must be positive".into()));
        }
        if self.stride == 0 {
            return Err(ExtractionError::InvalidSpec("stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        match self.strategy {
            Strategy::T3 => self.n,
            _ => 1,
        }
    }

    pub fn sample_len(&self) -> usize {
        self.m * self.rows()
    }

    /// T2 and T3 need several packets, so they are meaningless on a single
    /// packet.
    pub fn compatible_with(&self, granularity: Granularity) -> bool {
        granularity != Granularity::Packet || self.strategy == Strategy::T1
    }
}

/// Where one packet's bytes landed in a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketSpan {
    /// Index into the unit's packet list.
    pub packet: usize,
    /// Start of the copied bytes within the frame.
    pub frame_offset: usize,
    pub sample_offset: usize,
    pub len: usize,
}

impl PacketSpan {
    pub fn frame_range(&self) -> ByteRange {
        ByteRange::new(self.frame_offset, self.len)
    }

    pub fn sample_range(&self) -> ByteRange {
        ByteRange::new(self.sample_offset, self.len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Flat bytes; T3 rows are laid out back to back.
    pub bytes: Vec<u8>,
    pub row_len: usize,
    pub unit_key: UnitKey,
    pub window_index: usize,
    /// Disjoint and ordered by `sample_offset`.
    pub packet_spans: Vec<PacketSpan>,
    pub pad_byte: u8,
}

impl Sample {
    pub fn rows(&self) -> std::slice::Chunks<'_, u8> {
        self.bytes.chunks(self.row_len.max(1))
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

fn source_range(p: &ParsedPacket, payload_only: bool) -> ByteRange {
    if payload_only {
        p.fields.get(FieldKind::Payload).unwrap_or(ByteRange::new(0, 0))
    } else {
        ByteRange::new(0, p.raw.data.len())
    }
}

/// Concatenate the given packets into `m` bytes starting at `base`.
fn fill(
    out: &mut Vec<u8>,
    spans: &mut Vec<PacketSpan>,
    packets: &[ParsedPacket],
    indices: std::ops::Range<usize>,
    m: usize,
    payload_only: bool,
) {
    let base = out.len();
    let limit = base + m;
    for i in indices {
        if out.len() >= limit {
            break;
        }
        let src = source_range(&packets[i], payload_only);
        let take = src.len.min(limit - out.len());
        if take == 0 {
            continue;
        }
        spans.push(PacketSpan { packet: i, frame_offset: src.offset, sample_offset: out.len(), len: take });
        out.extend_from_slice(&packets[i].raw.data[src.offset..src.offset + take]);
    }
}

#[allow(clippy::single_range_in_vec_init)]
fn windows(p: usize, spec: &ExtractionSpec) -> Vec<std::ops::Range<usize>> {
    if p == 0 {
        return Vec::new();
    }
    match spec.selection {
        Selection::FirstN if p >= spec.n => vec![0..spec.n],
        Selection::FirstN if spec.drop_short => Vec::new(),
        Selection::FirstN => vec![0..p],
        Selection::AnyConsecutiveN => (0..).map(|w| w * spec.stride).take_while(|s| s + spec.n <= p).map(|s| s..s + spec.n).collect(),
    }
}

/// Extract every sample a unit yields under `spec`. Empty units yield none.
#[allow(clippy::single_range_in_vec_init)]
pub fn extract(unit: &TrafficUnit, spec: &ExtractionSpec) -> Result<Vec<Sample>, ExtractionError> {
    spec.validate()?;
    if !spec.compatible_with(unit.kind) {
        return Err(ExtractionError::IncompatibleSpec { strategy: spec.strategy, granularity: unit.kind });
    }
    let packets = &unit.packets;
    let ranges = match spec.strategy {
        Strategy::T1 if packets.is_empty() => Vec::new(),
        Strategy::T1 => vec![0..packets.len()],
        _ => windows(packets.len(), spec),
    };
    let sample_len = spec.sample_len();
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(window_index, range)| {
            let mut bytes = Vec::with_capacity(sample_len);
            let mut spans = Vec::new();
            match spec.strategy {
                Strategy::T1 | Strategy::T2 => fill(&mut bytes, &mut spans, packets, range, spec.m, spec.payload_only),
                Strategy::T3 => {
                    for i in range {
                        let row_end = bytes.len() + spec.m;
                        fill(&mut bytes, &mut spans, packets, i..i + 1, spec.m, spec.payload_only);
                        bytes.resize(row_end, spec.pad_byte);
                    }
                }
            }
            bytes.resize(sample_len, spec.pad_byte);
            Sample { bytes, row_len: spec.m, unit_key: unit.key.clone(), window_index, packet_spans: spans, pad_byte: spec.pad_byte }
        })
        .collect())
}

/// One contributing packet's fields in sample coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketFields {
    pub span: PacketSpan,
    pub fields: FieldMap,
    /// Fields the frame had that fell entirely outside the copied bytes.
    pub truncated: Vec<FieldKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFieldMap {
    pub packets: Vec<PacketFields>,
}

impl SampleFieldMap {
    /// Every surviving range of `kind`, in sample order.
    pub fn ranges(&self, kind: FieldKind) -> impl Iterator<Item = ByteRange> + '_ {
        self.packets.iter().filter_map(move |p| p.fields.get(kind))
    }

    pub fn was_truncated(&self, kind: FieldKind) -> bool {
        self.packets.iter().any(|p| p.truncated.contains(&kind))
    }
}

/// Re-base each contributing frame's field ranges into sample coordinates.
/// Ranges cut by truncation are clipped to what survived.
pub fn spans_to_fields(sample: &Sample, packets: &[ParsedPacket]) -> SampleFieldMap {
    let per = sample
        .packet_spans
        .iter()
        .map(|span| {
            let frame = span.frame_range();
            let mut fields = FieldMap::default();
            let mut truncated = Vec::new();
            for (kind, r) in packets[span.packet].fields.iter() {
                match r.intersect(frame) {
                    Some(hit) => fields.set(kind, Some(ByteRange::new(hit.offset - span.frame_offset + span.sample_offset, hit.len))),
                    None if r.len > 0 => truncated.push(kind),
                    None => {}
                }
            }
            PacketFields { span: *span, fields, truncated }
        })
        .collect();
    SampleFieldMap { packets: per }
}
