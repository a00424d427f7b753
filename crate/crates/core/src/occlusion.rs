//! Feature occlusion: deterministic byte transformations that destroy the
//! information carried by selected header fields or by the payload.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extraction::{extract, spans_to_fields, ExtractionSpec, Sample, SampleFieldMap, Selection, Strategy};
use crate::granularity::{Granularity, TrafficUnit, UnitKey};
use crate::packet::{ByteRange, FieldKind, ParsedPacket};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OcclusionError {
    #[error("range {range} outside {len}-byte buffer")]
    RangeOutOfBounds { range: ByteRange, len: usize },
    #[error("unknown occlusion strategy {0:?}")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Write 0x00.
    Eradicate,
    /// Write seeded random bytes.
    Randomize,
    /// Write 0xFF.
    MaskFF,
    /// Write seeded random bytes over encrypted content.
    Obfuscate,
}

impl Action {
    pub fn is_deterministic(self) -> bool {
        matches!(self, Action::Eradicate | Action::MaskFF)
    }

    pub fn code(self) -> &'static str {
        match self {
            Action::Eradicate => "E",
            Action::Randomize => "R",
            Action::MaskFF => "MSK",
            Action::Obfuscate => "OBF",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldClass {
    MacSrc,
    MacDst,
    IpSrc,
    IpDst,
    IpId,
    IpChecksum,
    Ports,
    SeqAck,
    WindowSize,
    TcpOptions,
    Payload,
    Sni,
}

impl FieldClass {
    pub const HEADERS: [FieldClass; 10] = [
        FieldClass::MacSrc,
        FieldClass::MacDst,
        FieldClass::IpSrc,
        FieldClass::IpDst,
        FieldClass::IpId,
        FieldClass::IpChecksum,
        FieldClass::Ports,
        FieldClass::SeqAck,
        FieldClass::WindowSize,
        FieldClass::TcpOptions,
    ];

    /// Frame fields this class covers. TCP-only classes simply find nothing
    /// in UDP frames.
    pub fn kinds(self) -> &'static [FieldKind] {
        use FieldKind as K;
        match self {
            FieldClass::MacSrc => &[K::MacSrc],
            FieldClass::MacDst => &[K::MacDst],
            FieldClass::IpSrc => &[K::IpSrc],
            FieldClass::IpDst => &[K::IpDst],
            FieldClass::IpId => &[K::IpId],
            FieldClass::IpChecksum => &[K::IpChecksum],
            FieldClass::Ports => &[K::TcpSrcPort, K::TcpDstPort, K::UdpSrcPort, K::UdpDstPort],
            FieldClass::SeqAck => &[K::TcpSeq, K::TcpAck],
            FieldClass::WindowSize => &[K::TcpWindow],
            FieldClass::TcpOptions => &[K::TcpOptions],
            FieldClass::Payload => &[K::Payload],
            FieldClass::Sni => &[K::Sni],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadPolicy {
    Keep,
    Eradicate,
    /// Left as captured; the payload is assumed to be ciphertext.
    Encrypted,
    MaskFF,
    Obfuscate,
}

impl PayloadPolicy {
    fn action(self) -> Option<Action> {
        match self {
            PayloadPolicy::Keep | PayloadPolicy::Encrypted => None,
            PayloadPolicy::Eradicate => Some(Action::Eradicate),
            PayloadPolicy::MaskFF => Some(Action::MaskFF),
            PayloadPolicy::Obfuscate => Some(Action::Obfuscate),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            PayloadPolicy::Keep => "-",
            PayloadPolicy::Eradicate => "E",
            PayloadPolicy::Encrypted => "ENC",
            PayloadPolicy::MaskFF => "MSK",
            PayloadPolicy::Obfuscate => "OBF",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyId {
    A1,
    D1,
    D2,
    C,
    T,
    CTD,
    H1,
    P1,
    E1,
    E2,
    E3,
    E2T25,
    E2T50,
}

impl StrategyId {
    pub const ALL: [StrategyId; 13] = [
        StrategyId::A1,
        StrategyId::D1,
        StrategyId::D2,
        StrategyId::C,
        StrategyId::T,
        StrategyId::CTD,
        StrategyId::H1,
        StrategyId::P1,
        StrategyId::E1,
        StrategyId::E2,
        StrategyId::E3,
        StrategyId::E2T25,
        StrategyId::E2T50,
    ];
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for StrategyId {
    type Err = OcclusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| OcclusionError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionStrategy {
    pub id: StrategyId,
    /// Applied in order, after the payload policy.
    pub rules: Vec<(FieldClass, Action)>,
    pub payload_policy: PayloadPolicy,
    /// Fraction of each sample row kept; the rest becomes padding.
    pub truncation_factor: f64,
    /// Delete TCP options from the representation.
    pub strip_tcp_options: bool,
}

impl OcclusionStrategy {
    pub fn get(id: StrategyId) -> OcclusionStrategy {
        use Action::{Eradicate as E, Randomize as R};
        use FieldClass as F;
        let identity = [F::MacSrc, F::MacDst, F::IpSrc, F::IpDst, F::Ports].map(|c| (c, R));
        let headers_e = FieldClass::HEADERS.map(|c| (c, E));
        let with = |base: &[(FieldClass, Action)], extra: &[(FieldClass, Action)]| [base, extra].concat();
        let mut s = OcclusionStrategy {
            id,
            rules: Vec::new(),
            payload_policy: PayloadPolicy::Keep,
            truncation_factor: 1.0,
            strip_tcp_options: false,
        };
        match id {
            StrategyId::A1 => {}
            StrategyId::D1 => s.rules = identity.to_vec(),
            StrategyId::D2 => s.rules = with(&identity, &[(F::Sni, R)]),
            StrategyId::C => s.rules = with(&identity, &[(F::IpId, R), (F::IpChecksum, R), (F::SeqAck, R)]),
            StrategyId::T => s.rules = with(&identity, &[(F::WindowSize, R), (F::TcpOptions, R)]),
            StrategyId::CTD => {
                s.rules = with(
                    &identity,
                    &[(F::IpId, R), (F::IpChecksum, R), (F::SeqAck, R), (F::WindowSize, R), (F::TcpOptions, R), (F::Sni, R)],
                )
            }
            StrategyId::H1 => {
                s.rules = with(&identity, &[(F::Sni, R)]);
                s.payload_policy = PayloadPolicy::Eradicate;
            }
            StrategyId::P1 => {
                s.rules = headers_e.to_vec();
                s.strip_tcp_options = true;
            }
            StrategyId::E1 | StrategyId::E2 | StrategyId::E3 | StrategyId::E2T25 | StrategyId::E2T50 => {
                s.rules = with(&headers_e, &[(F::Sni, E)]);
                s.payload_policy = match id {
                    StrategyId::E1 => PayloadPolicy::Encrypted,
                    StrategyId::E3 => PayloadPolicy::Obfuscate,
                    _ => PayloadPolicy::MaskFF,
                };
                s.truncation_factor = match id {
                    StrategyId::E2T25 => 0.75,
                    StrategyId::E2T50 => 0.5,
                    _ => 1.0,
                };
            }
        }
        s
    }

    pub fn targets(&self, class: FieldClass) -> Option<Action> {
        if class == FieldClass::Payload {
            if let Some(a) = self.payload_policy.action() {
                return Some(a);
            }
        }
        self.rules.iter().rev().find(|(c, _)| *c == class).map(|(_, a)| *a)
    }

    /// True when every transformation is a fixed overwrite.
    pub fn is_deterministic(&self) -> bool {
        self.rules.iter().all(|(_, a)| a.is_deterministic())
            && self.payload_policy.action().is_none_or(Action::is_deterministic)
            && !self.strip_tcp_options
    }
}

/// All thirteen strategies, in catalog order.
pub fn strategy_catalog() -> Vec<OcclusionStrategy> {
    StrategyId::ALL.into_iter().map(OcclusionStrategy::get).collect()
}

/// Columns of the catalog's truth table.
pub const TRUTH_TABLE_COLUMNS: [(&str, &[FieldClass]); 10] = [
    ("MAC", &[FieldClass::MacSrc, FieldClass::MacDst]),
    ("IP", &[FieldClass::IpSrc, FieldClass::IpDst]),
    ("IPID", &[FieldClass::IpId]),
    ("CKSUM", &[FieldClass::IpChecksum]),
    ("PORTS", &[FieldClass::Ports]),
    ("SEQACK", &[FieldClass::SeqAck]),
    ("WINDOW", &[FieldClass::WindowSize]),
    ("OPTIONS", &[FieldClass::TcpOptions]),
    ("PAYLOAD", &[FieldClass::Payload]),
    ("SNI", &[FieldClass::Sni]),
];

/// Render the catalog as a whitespace-aligned table: one row per strategy,
/// one column per field group, then truncation and option stripping.
pub fn render_truth_table(catalog: &[OcclusionStrategy]) -> String {
    let mut rows = vec![{
        let mut h = vec!["ID".to_string()];
        h.extend(TRUTH_TABLE_COLUMNS.iter().map(|(n, _)| n.to_string()));
        h.extend(["KEEP".to_string(), "STRIP".to_string()]);
        h
    }];
    for s in catalog {
        let mut row = vec![s.id.to_string()];
        for (_, classes) in TRUTH_TABLE_COLUMNS {
            let cells: Vec<&str> = classes
                .iter()
                .map(|&c| match c {
                    FieldClass::Payload => s.payload_policy.code(),
                    _ => s.targets(c).map_or("-", Action::code),
                })
                .collect();
            row.push(if cells.iter().all(|c| *c == cells[0]) { cells[0].to_string() } else { cells.join("/") });
        }
        row.push(format!("{:.2}", s.truncation_factor));
        row.push(if s.strip_tcp_options { "Y" } else { "-" }.to_string());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(line.join(" ").trim_end());
        out.push('\n');
    }
    out
}

/// Whether a strategy is meaningful for a granularity and extraction
/// choice. Identity-field and header-only strategies apply everywhere. SNI
/// randomization needs the handshake, so it only applies where samples
/// start at the beginning of a flow or session. Session-artifact, time
/// varying and payload strategies only apply where samples are not pinned
/// to the handshake.
pub fn applicability(id: StrategyId, granularity: Granularity, spec: &ExtractionSpec) -> bool {
    let starts_at_handshake = matches!(granularity, Granularity::Flow | Granularity::Session)
        && (spec.strategy == Strategy::T1 || spec.selection == Selection::FirstN);
    match id {
        StrategyId::A1 | StrategyId::D1 | StrategyId::H1 | StrategyId::P1 => true,
        StrategyId::D2 => starts_at_handshake,
        StrategyId::C
        | StrategyId::T
        | StrategyId::CTD
        | StrategyId::E1
        | StrategyId::E2
        | StrategyId::E3
        | StrategyId::E2T25
        | StrategyId::E2T50 => !starts_at_handshake,
    }
}

/// Per-sample seed material for the random actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionSeed {
    pub global_seed: u64,
    pub file: String,
    pub unit: String,
    pub window_index: usize,
}

impl OcclusionSeed {
    pub fn new(global_seed: u64, file: &str, unit: &UnitKey, window_index: usize) -> Self {
        OcclusionSeed { global_seed, file: file.to_string(), unit: unit.to_string(), window_index }
    }

    pub fn for_sample(global_seed: u64, file: &str, sample: &Sample) -> Self {
        Self::new(global_seed, file, &sample.unit_key, sample.window_index)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"ntckit/occlusion/v1");
        h.update(self.global_seed.to_le_bytes());
        for part in [self.file.as_bytes(), self.unit.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update((self.window_index as u64).to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

pub fn apply_action(bytes: &mut [u8], range: ByteRange, action: Action, rng: &mut impl RngCore) -> Result<(), OcclusionError> {
    let len = bytes.len();
    let target = bytes.get_mut(range.as_range()).ok_or(OcclusionError::RangeOutOfBounds { range, len })?;
    match action {
        Action::Eradicate => target.fill(0x00),
        Action::MaskFF => target.fill(0xFF),
        Action::Randomize | Action::Obfuscate => rng.fill_bytes(target),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occluded {
    pub sample: Sample,
    /// The strategy targets the SNI but the hostname was cut off by
    /// extraction, so nothing was randomized.
    pub sni_outside_sample: bool,
}

/// Row-relative tail positions removed by truncation.
pub fn truncation_tail(sample_len: usize, row_len: usize, factor: f64) -> Vec<ByteRange> {
    if factor >= 1.0 || row_len == 0 {
        return Vec::new();
    }
    let keep = ((row_len as f64) * factor).floor() as usize;
    (0..sample_len / row_len).map(|r| ByteRange::new(r * row_len + keep, row_len - keep)).filter(|r| r.len > 0).collect()
}

/// Apply a strategy to an extracted sample. Steps run in a fixed order:
/// payload policy, truncation, field rules, then option stripping. Field
/// classes missing from the sample are skipped.
pub fn apply_strategy(sample: &Sample, fields: &SampleFieldMap, strategy: &OcclusionStrategy, seed: &OcclusionSeed) -> Occluded {
    let mut out = sample.clone();
    let mut rng = seed.rng();
    let bytes = &mut out.bytes;

    if let Some(action) = strategy.payload_policy.action() {
        for r in fields.ranges(FieldKind::Payload) {
            apply_action(bytes, r, action, &mut rng).expect("field map belongs to sample");
        }
    }
    for tail in truncation_tail(bytes.len(), sample.row_len, strategy.truncation_factor) {
        bytes[tail.as_range()].fill(sample.pad_byte);
    }
    for &(class, action) in &strategy.rules {
        for &kind in class.kinds() {
            for r in fields.ranges(kind) {
                apply_action(bytes, r, action, &mut rng).expect("field map belongs to sample");
            }
        }
    }
    if strategy.strip_tcp_options {
        strip_ranges(bytes, fields.ranges(FieldKind::TcpOptions).collect(), sample.row_len, sample.pad_byte);
    }

    let sni_targeted = strategy.rules.iter().any(|(c, _)| *c == FieldClass::Sni);
    let sni_outside_sample = sni_targeted && fields.ranges(FieldKind::Sni).next().is_none() && fields.was_truncated(FieldKind::Sni);
    Occluded { sample: out, sni_outside_sample }
}

/// Delete ranges and shift the rest of their row left, padding the row end.
fn strip_ranges(bytes: &mut Vec<u8>, mut ranges: Vec<ByteRange>, row_len: usize, pad: u8) {
    let row_len = if row_len == 0 { bytes.len() } else { row_len };
    ranges.sort_by_key(|r| std::cmp::Reverse(r.offset));
    for r in ranges {
        let row_end = (r.offset / row_len + 1) * row_len;
        bytes.drain(r.as_range());
        bytes.splice(row_end - r.len..row_end - r.len, std::iter::repeat_n(pad, r.len));
    }
}

/// Occlude one whole frame, for writing occluded captures. The frame is
/// treated as a single-row sample of its own length.
pub fn occlude_frame(packet: &ParsedPacket, strategy: &OcclusionStrategy, global_seed: u64, file: &str) -> Vec<u8> {
    if packet.raw.data.is_empty() {
        return Vec::new();
    }
    let unit = TrafficUnit { kind: Granularity::Packet, key: UnitKey::Packet { index: packet.raw.index }, packets: vec![packet.clone()] };
    let sample = extract(&unit, &ExtractionSpec::t1(packet.raw.data.len())).expect("T1 fits every unit").remove(0);
    let fields = spans_to_fields(&sample, &unit.packets);
    let seed = OcclusionSeed::for_sample(global_seed, file, &sample);
    apply_strategy(&sample, &fields, strategy, &seed).sample.bytes
}
