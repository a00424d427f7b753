//! SNI labeling, noise filtering, session-disjoint splitting and sample
//! bundle export.
//!
//! A bundle holds one record file per split plus `manifest.json`. Each
//! record is little-endian: the magic `NTCS`, a u16 format version, a u16
//! label index, a u32 sample length, then the sample bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::{classify_session, SessionClass};
use crate::extraction::{extract, spans_to_fields, ExtractionError, ExtractionSpec};
use crate::granularity::{split_sessions, units_of_session, Granularity, GranularityError, TrafficUnit};
use crate::occlusion::{applicability, apply_strategy, OcclusionSeed, OcclusionStrategy, StrategyId};
use crate::pipeline::{session_handshakes, LoadedCapture};
use crate::tls::HandshakeRole;

pub const RECORD_MAGIC: &[u8; 4] = b"NTCS";
pub const RECORD_VERSION: u16 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("strategy {strategy} does not apply to {granularity} units with this extraction")]
    NotApplicable { strategy: StrategyId, granularity: Granularity },
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Granularity(#[from] GranularityError),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("{0} classes exceed the u16 label space")]
    TooManyClasses(usize),
    #[error("malformed record file: {0}")]
    BadRecord(String),
    #[error("I/O failure on {path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// A session together with the capture it came from.
#[derive(Debug, Clone)]
pub struct SourcedSession {
    pub file: String,
    pub unit: TrafficUnit,
}

impl SourcedSession {
    /// Unique across a dataset: sessions never span files.
    pub fn id(&self) -> String {
        format!("{}#{}", self.file, self.unit.key)
    }
}

pub fn sessions_of_capture(cap: &LoadedCapture) -> Vec<SourcedSession> {
    let file = cap.name();
    split_sessions(&cap.packets).into_values().map(|unit| SourcedSession { file: file.clone(), unit }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    Sni,
    FileName,
    Manual,
}

#[derive(Debug, Clone)]
pub struct LabeledSession {
    pub session: SourcedSession,
    pub label: String,
    pub label_source: LabelSource,
    /// The session carried ClientHellos naming different hosts; the first
    /// one was used.
    pub sni_conflict: bool,
}

/// Two-label public suffixes that need a third label to name a site.
const SECOND_LEVEL_SUFFIXES: &[&str] = &[
    "co.uk", "org.uk", "ac.uk", "gov.uk", "com.au", "net.au", "org.au", "co.jp", "ne.jp", "com.cn", "com.br", "co.in", "co.kr", "com.tw",
    "com.hk", "co.nz",
];

/// Reduce a hostname to its registrable-looking suffix: the last two
/// labels, or three under a known two-label public suffix. IP literals are
/// returned unchanged.
pub fn collapse_subdomain(host: &str) -> String {
    let host = host.trim_end_matches('.').to_ascii_lowercase();
    if host.parse::<std::net::IpAddr>().is_ok() {
        return host;
    }
    let labels: Vec<&str> = host.split('.').collect();
    let tail2 = labels.len().checked_sub(2).map(|i| labels[i..].join("."));
    let keep = match tail2 {
        Some(t) if SECOND_LEVEL_SUFFIXES.contains(&t.as_str()) => 3,
        _ => 2,
    };
    labels[labels.len().saturating_sub(keep)..].join(".")
}

/// Label sessions by the hostname in their ClientHello.
pub fn label_by_sni(sessions: Vec<SourcedSession>, collapse_subdomains: bool) -> (Vec<LabeledSession>, Vec<SourcedSession>) {
    let results: Vec<Option<(String, bool)>> = sessions
        .par_iter()
        .map(|s| {
            let hosts: Vec<String> = session_handshakes(&s.unit)
                .into_iter()
                .filter(|h| h.role == HandshakeRole::ClientHello)
                .filter_map(|h| h.sni_host)
                .filter(|h| !h.is_empty())
                .map(|h| if collapse_subdomains { collapse_subdomain(&h) } else { h })
                .collect();
            let first = hosts.first()?.clone();
            let conflict = hosts.iter().any(|h| *h != first);
            Some((first, conflict))
        })
        .collect();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (session, r) in sessions.into_iter().zip(results) {
        match r {
            Some((label, sni_conflict)) => labeled.push(LabeledSession { session, label, label_source: LabelSource::Sni, sni_conflict }),
            None => unlabeled.push(session),
        }
    }
    (labeled, unlabeled)
}

/// DNS, mDNS, NTP, DHCP, NetBIOS, SSDP and LLMNR.
pub const NOISE_PORTS: &[u16] = &[53, 5353, 123, 67, 68, 137, 138, 1900, 5355];

pub fn is_noise_port(port: u16) -> bool {
    NOISE_PORTS.contains(&port)
}

/// Drop unencrypted sessions and infrastructure chatter.
pub fn filter_noise(sessions: Vec<SourcedSession>) -> Vec<SourcedSession> {
    let keep: Vec<bool> = sessions
        .par_iter()
        .map(|s| {
            let infra = s.unit.session_key().is_some_and(|k| NOISE_PORTS.iter().any(|&p| k.has_port(p)));
            !infra && classify_session(&s.unit) != SessionClass::Unencrypted
        })
        .collect();
    sessions.into_iter().zip(keep).filter_map(|(s, k)| k.then_some(s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub names: Vec<String>,
    pub ratios: Vec<f64>,
}

impl SplitRatios {
    /// Two ratios name the splits train/test; three name them
    /// train/valid/test; more are numbered.
    pub fn new(ratios: Vec<f64>) -> Result<Self, DatasetError> {
        let sum: f64 = ratios.iter().sum();
        if ratios.is_empty() || ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadRatios(ratios));
        }
        let names = match ratios.len() {
            1 => vec!["all".to_string()],
            2 => vec!["train".into(), "test".into()],
            3 => vec!["train".into(), "valid".into(), "test".into()],
            n => (0..n).map(|i| format!("split{i}")).collect(),
        };
        Ok(SplitRatios { names, ratios })
    }

    pub fn parse(s: &str) -> Result<Self, DatasetError> {
        let ratios: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
        Self::new(ratios.map_err(|_| DatasetError::BadRatios(Vec::new()))?)
    }

    /// Largest-remainder allocation of `count` items; ties go to the
    /// earlier split. When there are enough items, every split with a
    /// positive ratio gets at least one, taken from the largest split.
    pub fn allocate(&self, count: usize) -> Vec<usize> {
        let quotas: Vec<f64> = self.ratios.iter().map(|r| r * count as f64).collect();
        let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = count - out.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
        for i in order.into_iter().cycle() {
            if left == 0 {
                break;
            }
            out[i] += 1;
            left -= 1;
        }
        let positive = self.ratios.iter().filter(|r| **r > 0.0).count();
        if count >= positive {
            for i in 0..out.len() {
                if self.ratios[i] > 0.0 && out[i] == 0 {
                    let donor = (0..out.len()).max_by_key(|&j| (out[j], std::cmp::Reverse(j))).expect("non-empty");
                    out[donor] -= 1;
                    out[i] += 1;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// Session id to split index.
    pub assignment: BTreeMap<String, usize>,
    /// Classes with fewer sessions than splits that were left out, with
    /// their session counts.
    pub dropped_classes: BTreeMap<String, usize>,
}

fn derived_rng(tag: &[u8], seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Stratified, seeded, session-level split: every session lands in exactly
/// one split and each class is divided by the ratios.
pub fn split_train_test(labeled: &[LabeledSession], ratios: &SplitRatios, seed: u64, allow_small: bool) -> SplitAssignment {
    let mut by_class: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for l in labeled {
        by_class.entry(&l.label).or_default().push(l.session.id());
    }
    let mut out = SplitAssignment::default();
    for (label, mut ids) in by_class {
        ids.sort();
        ids.dedup();
        if ids.len() < ratios.ratios.len() && !allow_small {
            out.dropped_classes.insert(label.to_string(), ids.len());
            continue;
        }
        ids.shuffle(&mut derived_rng(b"ntckit/split/v1", seed, &[label.as_bytes()]));
        let mut it = ids.into_iter();
        for (split, n) in ratios.allocate(it.len()).into_iter().enumerate() {
            for id in it.by_ref().take(n) {
                out.assignment.insert(id, split);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    pub granularity: Granularity,
    pub extraction: ExtractionSpec,
    pub strategy: StrategyId,
    pub seed: u64,
    pub burst_gap_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub file: String,
    pub sessions: usize,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub record_version: u16,
    pub granularity: Granularity,
    pub extraction: ExtractionSpec,
    pub strategy: StrategyId,
    pub seed: u64,
    pub burst_gap_secs: f64,
    pub classes: BTreeMap<String, u16>,
    pub split_names: Vec<String>,
    pub split_ratios: Vec<f64>,
    pub splits: Vec<SplitSummary>,
    /// Samples whose SNI was targeted but cut off by extraction.
    pub sni_outside_sample: usize,
    pub dropped_classes: BTreeMap<String, usize>,
}

struct Record {
    session: String,
    unit: usize,
    window: usize,
    label: u16,
    bytes: Vec<u8>,
    sni_outside: bool,
}

pub fn encode_record(label: u16, bytes: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Decode a record file into (label index, sample bytes) pairs.
pub fn decode_records(mut data: &[u8]) -> Result<Vec<(u16, Vec<u8>)>, DatasetError> {
    let mut out = Vec::new();
    while !data.is_empty() {
        if data.len() < 12 || &data[..4] != RECORD_MAGIC {
            return Err(DatasetError::BadRecord(format!("bad header at record {}", out.len())));
        }
        let version = u16::from_le_bytes([data[4], data[5]]);
        if version != RECORD_VERSION {
            return Err(DatasetError::BadRecord(format!("unsupported version {version}")));
        }
        let label = u16::from_le_bytes([data[6], data[7]]);
        let len = u32::from_le_bytes([data[8], data[9], data[10], data[11]]) as usize;
        let body = data.get(12..12 + len).ok_or_else(|| DatasetError::BadRecord(format!("record {} truncated", out.len())))?;
        out.push((label, body.to_vec()));
        data = &data[12 + len..];
    }
    Ok(out)
}

fn session_records(l: &LabeledSession, label: u16, cfg: &ExportConfig, strategy: &OcclusionStrategy) -> Result<Vec<Record>, DatasetError> {
    let id = l.session.id();
    let mut out = Vec::new();
    for (u, unit) in units_of_session(&l.session.unit, cfg.granularity, cfg.burst_gap_secs)?.iter().enumerate() {
        for sample in extract(unit, &cfg.extraction)? {
            let fields = spans_to_fields(&sample, &unit.packets);
            let seed = OcclusionSeed::for_sample(cfg.seed, &l.session.file, &sample);
            let occ = apply_strategy(&sample, &fields, strategy, &seed);
            out.push(Record {
                session: id.clone(),
                unit: u,
                window: sample.window_index,
                label,
                bytes: occ.sample.bytes,
                sni_outside: occ.sni_outside_sample,
            });
        }
    }
    Ok(out)
}

/// Extract, occlude and write every assigned session. Output is a pure
/// function of the inputs: records are sorted by (session, unit, window)
/// before writing.
pub fn export_bundle(
    labeled: &[LabeledSession],
    split: &SplitAssignment,
    ratios: &SplitRatios,
    cfg: &ExportConfig,
    out_dir: &Path,
) -> Result<Manifest, DatasetError> {
    if !applicability(cfg.strategy, cfg.granularity, &cfg.extraction) {
        return Err(DatasetError::NotApplicable { strategy: cfg.strategy, granularity: cfg.granularity });
    }
    cfg.extraction.validate()?;
    if !cfg.extraction.compatible_with(cfg.granularity) {
        return Err(ExtractionError::IncompatibleSpec { strategy: cfg.extraction.strategy, granularity: cfg.granularity }.into());
    }
    let assigned: Vec<(&LabeledSession, usize)> =
        labeled.iter().filter_map(|l| split.assignment.get(&l.session.id()).map(|&s| (l, s))).collect();
    let labels: BTreeSet<&str> = assigned.iter().map(|(l, _)| l.label.as_str()).collect();
    if labels.len() > usize::from(u16::MAX) + 1 {
        return Err(DatasetError::TooManyClasses(labels.len()));
    }
    let classes: BTreeMap<String, u16> = labels.iter().enumerate().map(|(i, l)| (l.to_string(), i as u16)).collect();
    let strategy = OcclusionStrategy::get(cfg.strategy);

    let per_session: Vec<(usize, Vec<Record>)> = assigned
        .par_iter()
        .map(|(l, s)| session_records(l, classes[&l.label], cfg, &strategy).map(|r| (*s, r)))
        .collect::<Result<_, _>>()?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut buckets: Vec<Vec<Record>> = (0..ratios.ratios.len()).map(|_| Vec::new()).collect();
    let mut sessions: Vec<BTreeMap<String, (String, usize)>> = vec![BTreeMap::new(); ratios.ratios.len()];
    for ((l, s), (_, recs)) in assigned.iter().zip(&per_session) {
        sessions[*s].insert(l.session.id(), (l.label.clone(), recs.len()));
    }
    for (s, recs) in per_session {
        buckets[s].extend(recs);
    }

    let mut summaries = Vec::new();
    let mut sni_outside = 0;
    for (i, mut recs) in buckets.into_iter().enumerate() {
        recs.sort_by(|a, b| (&a.session, a.unit, a.window).cmp(&(&b.session, b.unit, b.window)));
        sni_outside += recs.iter().filter(|r| r.sni_outside).count();
        let mut data = Vec::new();
        for r in &recs {
            encode_record(r.label, &r.bytes, &mut data);
        }
        let name = &ratios.names[i];
        let file = format!("{name}.ntcs");
        let path = out_dir.join(&file);
        fs::write(&path, &data).map_err(io_err(&path))?;
        write_session_index(&out_dir.join(format!("{name}.sessions.csv")), &sessions[i])?;
        summaries.push(SplitSummary {
            name: name.clone(),
            file,
            sessions: sessions[i].len(),
            records: recs.len(),
            sha256: hex::encode(Sha256::digest(&data)),
        });
    }

    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        record_version: RECORD_VERSION,
        granularity: cfg.granularity,
        extraction: cfg.extraction.clone(),
        strategy: cfg.strategy,
        seed: cfg.seed,
        burst_gap_secs: cfg.burst_gap_secs,
        classes,
        split_names: ratios.names.clone(),
        split_ratios: ratios.ratios.clone(),
        splits: summaries,
        sni_outside_sample: sni_outside,
        dropped_classes: split.dropped_classes.clone(),
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("plain data serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

fn write_session_index(path: &Path, sessions: &BTreeMap<String, (String, usize)>) -> Result<(), DatasetError> {
    let to_io = |e: csv::Error| DatasetError::Io { path: path.display().to_string(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(["session", "label", "records"]).map_err(to_io)?;
    for (id, (label, n)) in sessions {
        w.write_record([id.as_str(), label.as_str(), &n.to_string()]).map_err(to_io)?;
    }
    w.flush().map_err(io_err(path))
}

/// `file,session,label,sni_conflict` rows for labeled sessions.
pub fn write_label_csv<W: Write>(labeled: &[LabeledSession], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["file", "session", "label", "sni_conflict"])?;
    let mut rows: Vec<&LabeledSession> = labeled.iter().collect();
    rows.sort_by_key(|l| l.session.id());
    for l in rows {
        w.write_record([l.session.file.as_str(), &l.session.unit.key.to_string(), &l.label, if l.sni_conflict { "1" } else { "0" }])?;
    }
    w.flush()?;
    Ok(())
}
