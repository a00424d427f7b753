//! Per-dataset encryption usage and cipher-suite distribution.
//!
//! Every session in every file is classified as encrypted or not. Encrypted
//! sessions are then bucketed by the bulk cipher of the suite the server
//! selected, or counted as unknown when no ServerHello was seen.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::granularity::{split_sessions, TrafficUnit};
use crate::packet::{ParseNote, ParsedPacket, Protocol};
use crate::pipeline::{file_label, load_capture, session_handshakes};
use crate::tls::HandshakeRole;
use crate::udp::{detect_udp_encryption, UdpEncryption};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncryptionKind {
    Tls,
    Dtls,
    Quic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionClass {
    Unencrypted,
    Encrypted(EncryptionKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    Aes128Gcm,
    Aes256Gcm,
    Chacha20Poly1305,
    Aes128Cbc,
    Aes256Cbc,
    TripleDes,
    Rc4,
    Other,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Aes128Gcm,
        Algorithm::Aes256Gcm,
        Algorithm::Chacha20Poly1305,
        Algorithm::Aes128Cbc,
        Algorithm::Aes256Cbc,
        Algorithm::TripleDes,
        Algorithm::Rc4,
        Algorithm::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Aes128Gcm => "AES-128-GCM",
            Algorithm::Aes256Gcm => "AES-256-GCM",
            Algorithm::Chacha20Poly1305 => "CHACHA20-POLY1305",
            Algorithm::Aes128Cbc => "AES-128-CBC",
            Algorithm::Aes256Cbc => "AES-256-CBC",
            Algorithm::TripleDes => "3DES",
            Algorithm::Rc4 => "RC4",
            Algorithm::Other => "OTHER",
        }
    }

    fn slot(self) -> usize {
        Algorithm::ALL.iter().position(|&a| a == self).expect("listed")
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// IANA cipher suites grouped by bulk cipher. Anything not listed buckets
/// as [`Algorithm::Other`].
const SUITES: &[(u16, &str, Algorithm)] = {
    use Algorithm::*;
    &[
        (0x1301, "TLS_AES_128_GCM_SHA256", Aes128Gcm),
        (0x1302, "TLS_AES_256_GCM_SHA384", Aes256Gcm),
        (0x1303, "TLS_CHACHA20_POLY1305_SHA256", Chacha20Poly1305),
        (0x1304, "TLS_AES_128_CCM_SHA256", Other),
        (0x1305, "TLS_AES_128_CCM_8_SHA256", Other),
        (0x009C, "TLS_RSA_WITH_AES_128_GCM_SHA256", Aes128Gcm),
        (0x009E, "TLS_DHE_RSA_WITH_AES_128_GCM_SHA256", Aes128Gcm),
        (0x00A2, "TLS_DHE_DSS_WITH_AES_128_GCM_SHA256", Aes128Gcm),
        (0xC02B, "TLS_ECDHE_ECDSA_WITH_AES_128_GCM_SHA256", Aes128Gcm),
        (0xC02F, "TLS_ECDHE_RSA_WITH_AES_128_GCM_SHA256", Aes128Gcm),
        (0x009D, "TLS_RSA_WITH_AES_256_GCM_SHA384", Aes256Gcm),
        (0x009F, "TLS_DHE_RSA_WITH_AES_256_GCM_SHA384", Aes256Gcm),
        (0x00A3, "TLS_DHE_DSS_WITH_AES_256_GCM_SHA384", Aes256Gcm),
        (0xC02C, "TLS_ECDHE_ECDSA_WITH_AES_256_GCM_SHA384", Aes256Gcm),
        (0xC030, "TLS_ECDHE_RSA_WITH_AES_256_GCM_SHA384", Aes256Gcm),
        (0xCCA8, "TLS_ECDHE_RSA_WITH_CHACHA20_POLY1305_SHA256", Chacha20Poly1305),
        (0xCCA9, "TLS_ECDHE_ECDSA_WITH_CHACHA20_POLY1305_SHA256", Chacha20Poly1305),
        (0xCCAA, "TLS_DHE_RSA_WITH_CHACHA20_POLY1305_SHA256", Chacha20Poly1305),
        (0x002F, "TLS_RSA_WITH_AES_128_CBC_SHA", Aes128Cbc),
        (0x0033, "TLS_DHE_RSA_WITH_AES_128_CBC_SHA", Aes128Cbc),
        (0x003C, "TLS_RSA_WITH_AES_128_CBC_SHA256", Aes128Cbc),
        (0x0067, "TLS_DHE_RSA_WITH_AES_128_CBC_SHA256", Aes128Cbc),
        (0xC009, "TLS_ECDHE_ECDSA_WITH_AES_128_CBC_SHA", Aes128Cbc),
        (0xC013, "TLS_ECDHE_RSA_WITH_AES_128_CBC_SHA", Aes128Cbc),
        (0xC023, "TLS_ECDHE_ECDSA_WITH_AES_128_CBC_SHA256", Aes128Cbc),
        (0xC027, "TLS_ECDHE_RSA_WITH_AES_128_CBC_SHA256", Aes128Cbc),
        (0x0035, "TLS_RSA_WITH_AES_256_CBC_SHA", Aes256Cbc),
        (0x0039, "TLS_DHE_RSA_WITH_AES_256_CBC_SHA", Aes256Cbc),
        (0x003D, "TLS_RSA_WITH_AES_256_CBC_SHA256", Aes256Cbc),
        (0x006B, "TLS_DHE_RSA_WITH_AES_256_CBC_SHA256", Aes256Cbc),
        (0xC00A, "TLS_ECDHE_ECDSA_WITH_AES_256_CBC_SHA", Aes256Cbc),
        (0xC014, "TLS_ECDHE_RSA_WITH_AES_256_CBC_SHA", Aes256Cbc),
        (0xC024, "TLS_ECDHE_ECDSA_WITH_AES_256_CBC_SHA384", Aes256Cbc),
        (0xC028, "TLS_ECDHE_RSA_WITH_AES_256_CBC_SHA384", Aes256Cbc),
        (0x000A, "TLS_RSA_WITH_3DES_EDE_CBC_SHA", TripleDes),
        (0x0016, "TLS_DHE_RSA_WITH_3DES_EDE_CBC_SHA", TripleDes),
        (0xC008, "TLS_ECDHE_ECDSA_WITH_3DES_EDE_CBC_SHA", TripleDes),
        (0xC012, "TLS_ECDHE_RSA_WITH_3DES_EDE_CBC_SHA", TripleDes),
        (0x0004, "TLS_RSA_WITH_RC4_128_MD5", Rc4),
        (0x0005, "TLS_RSA_WITH_RC4_128_SHA", Rc4),
        (0xC007, "TLS_ECDHE_ECDSA_WITH_RC4_128_SHA", Rc4),
        (0xC011, "TLS_ECDHE_RSA_WITH_RC4_128_SHA", Rc4),
    ]
};

pub fn suite_name(code: u16) -> Option<&'static str> {
    SUITES.iter().find(|s| s.0 == code).map(|s| s.1)
}

pub fn algorithm_of(code: u16) -> Algorithm {
    SUITES.iter().find(|s| s.0 == code).map_or(Algorithm::Other, |s| s.2)
}

fn udp_payloads(session: &TrafficUnit) -> Vec<&[u8]> {
    session.packets.iter().map(|p| p.payload()).collect()
}

/// Presence-based: any TLS record framing (TCP) or any DTLS record or QUIC
/// long header (UDP) makes the session encrypted.
pub fn classify_session(session: &TrafficUnit) -> SessionClass {
    match session.protocol() {
        Some(Protocol::Tcp) if !session_handshakes(session).is_empty() => SessionClass::Encrypted(EncryptionKind::Tls),
        Some(Protocol::Udp) => match detect_udp_encryption(&udp_payloads(session)) {
            UdpEncryption::Dtls => SessionClass::Encrypted(EncryptionKind::Dtls),
            UdpEncryption::Quic => SessionClass::Encrypted(EncryptionKind::Quic),
            UdpEncryption::None => SessionClass::Unencrypted,
        },
        _ => SessionClass::Unencrypted,
    }
}

/// The suite selected in the first parseable ServerHello. QUIC hides its
/// handshake, so QUIC sessions always come back `None`.
pub fn cipher_suite_of(session: &TrafficUnit) -> Option<u16> {
    if classify_session(session) == SessionClass::Encrypted(EncryptionKind::Quic) {
        return None;
    }
    session_handshakes(session).into_iter().filter(|h| h.role == HandshakeRole::ServerHello).find_map(|h| h.cipher_suite)
}

/// Session counts. Merging with `+` is associative and commutative with
/// [`AuditCounts::default`] as identity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    pub total_sessions: u64,
    pub unencrypted: u64,
    pub encrypted: u64,
    pub unknown: u64,
    #[serde(with = "algorithm_map")]
    pub per_algorithm: [u64; 8],
}

mod algorithm_map {
    use super::Algorithm;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(v: &[u64; 8], s: S) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<&str, u64> = Algorithm::ALL.iter().map(|a| (a.name(), v[a.slot()])).collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u64; 8], D::Error> {
        let m: BTreeMap<String, u64> = BTreeMap::deserialize(d)?;
        let mut out = [0; 8];
        for a in Algorithm::ALL {
            out[a.slot()] = m.get(a.name()).copied().unwrap_or(0);
        }
        Ok(out)
    }
}

impl AuditCounts {
    pub fn algorithm(&self, a: Algorithm) -> u64 {
        self.per_algorithm[a.slot()]
    }

    pub fn record(&mut self, class: SessionClass, suite: Option<u16>) {
        self.total_sessions += 1;
        match class {
            SessionClass::Unencrypted => self.unencrypted += 1,
            SessionClass::Encrypted(_) => {
                self.encrypted += 1;
                match suite {
                    None => self.unknown += 1,
                    Some(code) => self.per_algorithm[algorithm_of(code).slot()] += 1,
                }
            }
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.encrypted + self.unencrypted == self.total_sessions && self.unknown + self.per_algorithm.iter().sum::<u64>() == self.encrypted
    }

    fn pct(&self, n: u64) -> f64 {
        if self.total_sessions == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.total_sessions as f64
        }
    }
}

impl Add for AuditCounts {
    type Output = AuditCounts;

    fn add(mut self, rhs: AuditCounts) -> AuditCounts {
        self += rhs;
        self
    }
}

impl AddAssign for AuditCounts {
    fn add_assign(&mut self, rhs: AuditCounts) {
        self.total_sessions += rhs.total_sessions;
        self.unencrypted += rhs.unencrypted;
        self.encrypted += rhs.encrypted;
        self.unknown += rhs.unknown;
        for (a, b) in self.per_algorithm.iter_mut().zip(rhs.per_algorithm) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAudit {
    pub file: String,
    pub counts: AuditCounts,
    /// Frames that are not IPv4 TCP/UDP (ARP, IPv6, ...) and were skipped.
    pub skipped_frames: u64,
    pub non_first_fragments: u64,
    pub malformed_frames: u64,
    /// Read failure; counts cover the packets read before it, if any.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditStats {
    pub aggregate: AuditCounts,
    pub files: Vec<FileAudit>,
}

/// Audit the sessions of one already-dissected file.
pub fn audit_packets(file: &str, packets: &[ParsedPacket]) -> FileAudit {
    let mut counts = AuditCounts::default();
    for session in split_sessions(packets).values() {
        let class = classify_session(session);
        let suite = match class {
            SessionClass::Encrypted(_) => cipher_suite_of(session),
            SessionClass::Unencrypted => None,
        };
        counts.record(class, suite);
    }
    let note = |f: fn(&ParseNote) -> bool| packets.iter().filter(|p| p.note.as_ref().is_some_and(f)).count() as u64;
    FileAudit {
        file: file.to_string(),
        counts,
        skipped_frames: packets.iter().filter(|p| p.tuple.is_none()).count() as u64,
        non_first_fragments: note(|n| matches!(n, ParseNote::NonFirstFragment)),
        malformed_frames: note(|n| matches!(n, ParseNote::Malformed(_))),
        error: None,
    }
}

pub fn audit_file(path: &Path) -> FileAudit {
    let name = file_label(path);
    match load_capture(path) {
        Ok(cap) => {
            let mut audit = audit_packets(&name, &cap.packets);
            audit.error = cap.error.map(|e| e.to_string());
            audit
        }
        Err(e) => FileAudit {
            file: name,
            counts: AuditCounts::default(),
            skipped_frames: 0,
            non_first_fragments: 0,
            malformed_frames: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Audit files in parallel. Sessions never span files. A file that cannot
/// be read is reported and contributes nothing.
pub fn audit_dataset(paths: &[PathBuf]) -> AuditStats {
    let files: Vec<FileAudit> = paths.par_iter().map(|p| audit_file(p)).collect();
    let aggregate = files.iter().fold(AuditCounts::default(), |acc, f| acc + f.counts);
    AuditStats { aggregate, files }
}

pub const CSV_HEADER: [&str; 13] = [
    "file",
    "total",
    "unencrypted",
    "encrypted",
    "unknown",
    "AES-128-GCM",
    "AES-256-GCM",
    "CHACHA20-POLY1305",
    "AES-128-CBC",
    "AES-256-CBC",
    "3DES",
    "RC4",
    "OTHER",
];

pub const AGGREGATE_ROW: &str = "ALL";

fn csv_row(label: &str, c: &AuditCounts) -> Vec<String> {
    let mut row =
        vec![label.to_string(), c.total_sessions.to_string(), c.unencrypted.to_string(), c.encrypted.to_string(), c.unknown.to_string()];
    row.extend(c.per_algorithm.iter().map(u64::to_string));
    row
}

/// One row per file, then the aggregate row.
pub fn write_csv<W: Write>(stats: &AuditStats, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for f in &stats.files {
        w.write_record(csv_row(&f.file, &f.counts))?;
    }
    w.write_record(csv_row(AGGREGATE_ROW, &stats.aggregate))?;
    w.flush()?;
    Ok(())
}

pub fn to_json(stats: &AuditStats) -> String {
    serde_json::to_string_pretty(stats).expect("plain data serializes")
}

/// Percentage breakdown of the aggregate: the encryption split, then the
/// share of sessions per cipher bucket.
pub fn render_percentages(c: &AuditCounts) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sessions {}", c.total_sessions);
    let _ = writeln!(s, "unencrypted {:.2}%", c.pct(c.unencrypted));
    let _ = writeln!(s, "encrypted {:.2}%", c.pct(c.encrypted));
    let _ = writeln!(s, "  unknown {:.2}%", c.pct(c.unknown));
    for a in Algorithm::ALL {
        let _ = writeln!(s, "  {} {:.2}%", a.name(), c.pct(c.algorithm(a)));
    }
    s
}

/// Split counts into algorithm order, convenient for tables.
pub fn algorithm_counts(c: &AuditCounts) -> BTreeMap<Algorithm, u64> {
    Algorithm::ALL.iter().map(|&a| (a, c.algorithm(a))).collect()
}
