//! Acceptance run. Prints one line per criterion and exits non-zero when any
//! of them fails. Oracles here are written against the wire formats, not
//! against the library's own dissectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ntckit::audit::{algorithm_counts, audit_dataset, AuditCounts};
use ntckit::dataset::{decode_records, export_bundle, label_by_sni, sessions_of_capture, split_train_test, ExportConfig, SplitRatios};
use ntckit::extraction::{extract, spans_to_fields, ExtractionSpec, Preset, Sample, Selection, Strategy, PRESET_PACKETS};
use ntckit::granularity::{session_bursts, split_bursts, split_flows, split_packets, split_sessions, Granularity, TrafficUnit};
use ntckit::occlusion::{
    applicability, apply_strategy, occlude_frame, render_truth_table, strategy_catalog, Action, FieldClass, OcclusionSeed,
    OcclusionStrategy, PayloadPolicy, StrategyId,
};
use ntckit::pipeline::{load_capture, parse_all};
use ntckit::synth::tls::{client_hello, ClientHelloSpec};
use ntckit::synth::{merge_sessions, scenarios, FrameBuilder, Host, ScriptedSession, SessionTruth, TcpConversation};
use ntckit::tls::locate_sni;
use ntckit::{write_capture, CaptureMeta, ParsedPacket, RawPacket, Timestamp};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

impl From<Check> for Outcome {
    fn from(c: Check) -> Self {
        match c {
            Ok(s) => Outcome::Pass(s),
            Err(s) => Outcome::Fail(s),
        }
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("audit oracle equivalence", || audit_oracle().into()),
        ("public dataset percentages", public_datasets),
        ("granularity partition laws", || partition_laws().into()),
        ("extraction length laws", || extraction_lengths().into()),
        ("occlusion field isolation", || field_isolation().into()),
        ("sni handling", || sni_handling().into()),
        ("dataset leakage guard", || leakage_guard().into()),
        ("occlusion catalog fidelity", || catalog_fidelity().into()),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Outcome::Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (verdict, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Skipped(d) => ("SKIPPED", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {name}: {verdict} ({detail}; {secs:.2}s)", i + 1);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn be16(b: &[u8], at: usize) -> usize {
    usize::from(u16::from_be_bytes([b[at], b[at + 1]]))
}

fn hostname(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut labels: Vec<String> = Vec::new();
    for i in 0..rng.gen_range(1..=3) {
        let len = if i == 0 { rng.gen_range(5..=14) } else { rng.gen_range(1..=9) };
        labels.push((0..len).map(|_| char::from(*ALPHABET.choose(rng).unwrap())).collect());
    }
    labels.push(["com", "net", "org", "io", "co.uk"].choose(rng).unwrap().to_string());
    labels.join(".")
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Kind {
    Http,
    Dns,
    Tls12(u16),
    Tls13(u16),
    TlsResumed,
    Quic,
    Dtls(u16),
}

const KINDS: [Kind; 14] = [
    Kind::Http,
    Kind::Dns,
    Kind::Tls12(0x002F),
    Kind::Tls12(0x0035),
    Kind::Tls12(0xC014),
    Kind::Tls12(0x000A),
    Kind::Tls12(0x0005),
    Kind::Tls12(0xC02F),
    Kind::Tls13(0x1301),
    Kind::Tls13(0x1302),
    Kind::Tls13(0x1303),
    Kind::TlsResumed,
    Kind::Quic,
    Kind::Dtls(0xC02B),
];

fn script(kind: Kind, file_no: usize, slot: usize, host: &str, rng: &mut ChaCha8Rng) -> ScriptedSession {
    let client = Host::new([10, file_no as u8, slot as u8, rng.gen_range(2..250)], rng.gen_range(32768..60000));
    let server_ip = [93, 184, slot as u8, 10];
    let start = Timestamp::from_micros(1_700_000_000 + slot as u64, rng.gen_range(0..1_000_000));
    let seed = rng.gen_range(1..1_000_000u64);
    let exchanges = rng.gen_range(0..4);
    match kind {
        Kind::Http => scenarios::http(client, Host::new(server_ip, 80), start, host, seed),
        Kind::Dns => scenarios::dns(client, Host::new(server_ip, 53), start, host, seed as u16),
        Kind::Tls12(suite) => scenarios::tls12(client, Host::new(server_ip, 443), start, suite, host, seed, exchanges),
        Kind::Tls13(suite) => scenarios::tls13(client, Host::new(server_ip, 443), start, suite, host, seed, exchanges),
        Kind::TlsResumed => scenarios::tls_no_handshake(client, Host::new(server_ip, 443), start, seed, exchanges + 1),
        Kind::Quic => scenarios::quic(client, Host::new(server_ip, 443), start, seed),
        Kind::Dtls(suite) => scenarios::dtls(client, Host::new(server_ip, 4433), start, suite, host),
    }
}

/// `files` captures of 3 to 6 sessions each, cycling through every kind.
fn corpus(files: usize, seed: u64) -> Vec<(String, Vec<ScriptedSession>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0;
    (0..files)
        .map(|f| {
            let sessions = (0..3 + f % 4)
                .map(|slot| {
                    let kind = KINDS[next % KINDS.len()];
                    next += 1;
                    let host = hostname(&mut rng);
                    script(kind, f, slot, &host, &mut rng)
                })
                .collect();
            (format!("capture_{f:02}.pcap"), sessions)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Audit oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, PartialEq, Eq)]
struct Tally {
    sessions: u64,
    plain: u64,
    encrypted: u64,
    no_suite: u64,
    algorithms: BTreeMap<&'static str, u64>,
}

impl Tally {
    fn add(&mut self, encrypted: bool, suite: Option<u16>) {
        self.sessions += 1;
        if !encrypted {
            self.plain += 1;
            return;
        }
        self.encrypted += 1;
        match suite {
            None => self.no_suite += 1,
            Some(s) => *self.algorithms.entry(algorithm_name(s)).or_default() += 1,
        }
    }

    fn of_counts(c: &AuditCounts) -> Tally {
        Tally {
            sessions: c.total_sessions,
            plain: c.unencrypted,
            encrypted: c.encrypted,
            no_suite: c.unknown,
            algorithms: algorithm_counts(c).into_iter().filter(|&(_, n)| n > 0).map(|(a, n)| (a.name(), n)).collect(),
        }
    }
}

/// Bulk cipher of the suites the corpus uses, from the IANA registry.
fn algorithm_name(suite: u16) -> &'static str {
    match suite {
        0x1301 | 0xC02B | 0xC02F => "AES-128-GCM",
        0x1302 | 0xC030 => "AES-256-GCM",
        0x1303 => "CHACHA20-POLY1305",
        0x002F => "AES-128-CBC",
        0x0035 | 0xC014 => "AES-256-CBC",
        0x000A => "3DES",
        0x0005 => "RC4",
        _ => "OTHER",
    }
}

fn truth_tally(sessions: &[ScriptedSession]) -> Tally {
    let mut t = Tally::default();
    for s in sessions {
        match s.truth {
            SessionTruth::Plain => t.add(false, None),
            SessionTruth::Tls { suite } | SessionTruth::Dtls { suite } => t.add(true, suite),
            SessionTruth::Quic => t.add(true, None),
        }
    }
    t
}

type EndpointBytes = [u8; 6];

/// Walk TLS records from the start of a stream; returns whether any record
/// header was seen and the first ServerHello suite.
fn walk_tls_stream(stream: &[u8]) -> (bool, Option<u16>) {
    let (mut pos, mut any, mut suite) = (0, false, None);
    while pos + 5 <= stream.len() {
        let (ty, major, minor) = (stream[pos], stream[pos + 1], stream[pos + 2]);
        if !(20..=24).contains(&ty) || major != 3 || minor > 4 {
            break;
        }
        any = true;
        let len = be16(stream, pos + 3);
        let body = &stream[pos + 5..(pos + 5 + len).min(stream.len())];
        if ty == 22 && suite.is_none() && body.len() > 38 && body[0] == 2 {
            let sid = usize::from(body[38]);
            if body.len() >= 41 + sid {
                suite = Some(be16(body, 39 + sid) as u16);
            }
        }
        pos += 5 + len;
    }
    (any, suite)
}

fn udp_verdict(payloads: &[&Vec<u8>]) -> (bool, Option<u16>) {
    let dtls = |p: &[u8]| p.len() >= 13 && (20..=24).contains(&p[0]) && p[1] == 0xFE && (p[2] == 0xFD || p[2] == 0xFF);
    if payloads.iter().any(|p| dtls(p)) {
        let suite = payloads.iter().find_map(|p| {
            if !(dtls(p) && p[0] == 22 && p[13] == 2 && p.len() > 60) {
                return None;
            }
            let sid = usize::from(p[59]);
            (p.len() >= 62 + sid).then(|| be16(p, 60 + sid) as u16)
        });
        return (true, suite);
    }
    let quic = payloads.iter().any(|p| {
        p.len() >= 5 && p[0] & 0xC0 == 0xC0 && {
            let v = u32::from_be_bytes([p[1], p[2], p[3], p[4]]);
            v == 1 || v == 0x6b33_43cf || v >> 8 == 0x00ff_0000
        }
    });
    (quic, None)
}

/// Brute-force scan of a little-endian microsecond pcap of Ethernet/IPv4
/// frames.
fn oracle_tally(path: &Path) -> Tally {
    let data = fs::read(path).expect("corpus file");
    assert_eq!(data[..4], [0xD4, 0xC3, 0xB2, 0xA1], "corpus is written little-endian");
    type Streams = [Vec<Vec<u8>>; 2];
    let mut sessions: BTreeMap<(u8, EndpointBytes, EndpointBytes), Streams> = BTreeMap::new();
    let mut pos = 24;
    while pos + 16 <= data.len() {
        let incl = u32::from_le_bytes(data[pos + 8..pos + 12].try_into().unwrap()) as usize;
        let frame = &data[pos + 16..pos + 16 + incl];
        pos += 16 + incl;
        if frame.len() < 34 || frame[12..14] != [8, 0] {
            continue;
        }
        let ihl = usize::from(frame[14] & 0x0F) * 4;
        let end = (14 + be16(frame, 16)).min(frame.len());
        let proto = frame[23];
        let l4 = 14 + ihl;
        let ep = |ip: usize, port: usize| -> EndpointBytes {
            let mut e = [0; 6];
            e[..4].copy_from_slice(&frame[ip..ip + 4]);
            e[4..].copy_from_slice(&frame[port..port + 2]);
            e
        };
        let (src, dst) = (ep(26, l4), ep(30, l4 + 2));
        let payload_at = match proto {
            6 => l4 + usize::from(frame[l4 + 12] >> 4) * 4,
            17 => l4 + 8,
            _ => continue,
        };
        let (lo, hi, dir) = if src <= dst { (src, dst, 0) } else { (dst, src, 1) };
        let streams = sessions.entry((proto, lo, hi)).or_default();
        if payload_at < end {
            streams[dir].push(frame[payload_at..end].to_vec());
        }
    }
    let mut t = Tally::default();
    for ((proto, _, _), streams) in sessions {
        if proto == 6 {
            let (a, sa) = walk_tls_stream(&streams[0].concat());
            let (b, sb) = walk_tls_stream(&streams[1].concat());
            t.add(a || b, sa.or(sb));
        } else {
            let all: Vec<&Vec<u8>> = streams.iter().flatten().collect();
            let (enc, suite) = udp_verdict(&all);
            t.add(enc, suite);
        }
    }
    t
}

fn audit_oracle() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = corpus(24, 0x000A_0D17);
    let mut paths = Vec::new();
    let mut truth: BTreeMap<String, Tally> = BTreeMap::new();
    for (name, sessions) in &files {
        let path = dir.path().join(name);
        write_capture(&CaptureMeta::default(), &merge_sessions(sessions), &path).map_err(|e| e.to_string())?;
        truth.insert(name.clone(), truth_tally(sessions));
        paths.push(path);
    }
    let start = Instant::now();
    let stats = audit_dataset(&paths);
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(5), "audit took {took:?}");

    let mut total = Tally::default();
    for fa in &stats.files {
        ensure!(fa.error.is_none(), "{}: {:?}", fa.file, fa.error);
        let got = Tally::of_counts(&fa.counts);
        let want = &truth[&fa.file];
        let oracle = oracle_tally(&dir.path().join(&fa.file));
        ensure!(&oracle == want, "{}: byte-scan oracle {oracle:?} disagrees with generator {want:?}", fa.file);
        ensure!(&got == want, "{}: audit {got:?} != expected {want:?}", fa.file);
        total.sessions += got.sessions;
        total.no_suite += got.no_suite;
    }
    ensure!(stats.files.len() == files.len(), "{} of {} files audited", stats.files.len(), files.len());
    let agg = Tally::of_counts(&stats.aggregate);
    ensure!(agg.sessions == total.sessions, "aggregate {} sessions, files sum to {}", agg.sessions, total.sessions);
    ensure!(agg.algorithms.len() >= 7, "only {} algorithms exercised", agg.algorithms.len());
    Ok(format!(
        "{} files, {} sessions, {} algorithms, audit {:.0} ms",
        files.len(),
        agg.sessions,
        agg.algorithms.len(),
        took.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------------------
// 2. Public datasets (optional)
// ---------------------------------------------------------------------------

const PUBLISHED_UNENCRYPTED: [(&str, f64); 4] =
    [("ISCXVPN2016", 98.9), ("USTC-TFC2016", 94.7), ("ISCXTor2016", 89.3), ("Cross-Platform", 69.7)];

fn capture_files(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    let mut entries: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            capture_files(&p, out);
        } else if p.extension().is_some_and(|e| e == "pcap" || e == "cap") {
            out.push(p);
        }
    }
}

fn public_datasets() -> Outcome {
    let Some(root) = std::env::var_os("NTC_PUBLIC_DATASETS") else {
        return Outcome::Skipped("NTC_PUBLIC_DATASETS not set".into());
    };
    let root = PathBuf::from(root);
    let mut seen = Vec::new();
    for (name, expected) in PUBLISHED_UNENCRYPTED {
        let mut files = Vec::new();
        capture_files(&root.join(name), &mut files);
        if files.is_empty() {
            continue;
        }
        let c = audit_dataset(&files).aggregate;
        let pct = 100.0 * c.unencrypted as f64 / c.total_sessions.max(1) as f64;
        if (pct - expected).abs() > 2.0 {
            return Outcome::Fail(format!("{name}: {pct:.1}% unencrypted, expected {expected}% +/- 2"));
        }
        seen.push(format!("{name} {pct:.1}%"));
    }
    if seen.is_empty() {
        return Outcome::Fail(format!("no dataset directories under {}", root.display()));
    }
    Outcome::Pass(seen.join(", "))
}

// ---------------------------------------------------------------------------
// 3. Partition laws
// ---------------------------------------------------------------------------

struct Stream {
    packets: Vec<ParsedPacket>,
    sessions: usize,
    gap_secs: f64,
    gap_nanos: u128,
}

fn random_stream(rng: &mut ChaCha8Rng) -> Stream {
    let gap_secs = *[1.0, 0.5, 0.25, 0.001, 0.0375].choose(rng).unwrap();
    let dt = (gap_secs * 1e9_f64).round() as u128;
    let sessions = rng.gen_range(1..=8usize);
    let tcp: Vec<bool> = (0..sessions).map(|_| rng.gen_bool(0.6)).collect();
    let count = rng.gen_range(sessions..=60);
    let mut owners: Vec<usize> = (0..sessions).collect();
    owners.extend((sessions..count).map(|_| rng.gen_range(0..sessions)));
    owners.shuffle(rng);
    let mut t: u128 = 1_650_000_000 * 1_000_000_000 + rng.gen_range(0..1_000_000_000);
    let mut raw = Vec::new();
    for (i, &s) in owners.iter().enumerate() {
        if i > 0 {
            t += match rng.gen_range(0..6) {
                0 => 0,
                1 => 1,
                2 => dt - 1,
                3 => dt,
                4 => dt + 1,
                _ => rng.gen_range(0..3 * dt),
            };
        }
        let a = ([10, 0, s as u8, 1], 1000 + s as u16);
        let b = ([172, 16, s as u8, 1], if tcp[s] { 443 } else { 53 });
        let ((src, sp), (dst, dp)) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        let fb = if tcp[s] { FrameBuilder::tcp(src, sp, dst, dp) } else { FrameBuilder::udp(src, sp, dst, dp) };
        let frame = fb.payload(vec![0xAB; rng.gen_range(0..40)]).build();
        raw.push(RawPacket::new(i as u64, Timestamp::from_nanos(t), frame));
    }
    Stream { packets: parse_all(raw), sessions, gap_secs, gap_nanos: dt }
}

fn indices(units: &[&TrafficUnit]) -> Vec<Vec<u64>> {
    units.iter().map(|u| u.packets.iter().map(|p| p.raw.index).collect()).collect()
}

fn is_partition(groups: &[Vec<u64>], total: usize) -> bool {
    let flat: Vec<u64> = groups.iter().flatten().copied().collect();
    let set: BTreeSet<u64> = flat.iter().copied().collect();
    flat.len() == total && set.len() == total && groups.iter().all(|g| !g.is_empty())
}

/// Reference bursts: time order, cut where the gap strictly exceeds dt.
fn oracle_bursts(packets: &[&ParsedPacket], dt: u128) -> Vec<Vec<u64>> {
    let mut sorted: Vec<&ParsedPacket> = packets.to_vec();
    sorted.sort_by_key(|p| (p.raw.ts.as_nanos(), p.raw.index));
    let mut out: Vec<Vec<u64>> = Vec::new();
    let mut prev: Option<u128> = None;
    for p in sorted {
        let t = p.raw.ts.as_nanos();
        if prev.is_none_or(|pt| t - pt > dt) {
            out.push(Vec::new());
        }
        out.last_mut().unwrap().push(p.raw.index);
        prev = Some(t);
    }
    out
}

fn partition_laws() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9A27);
    let (mut equal_gaps, mut packets_seen) = (0usize, 0usize);
    for case in 0..1000 {
        let s = random_stream(&mut rng);
        let n = s.packets.len();
        packets_seen += n;
        let all: Vec<&ParsedPacket> = s.packets.iter().collect();
        equal_gaps += all.windows(2).filter(|w| w[1].raw.ts.as_nanos() - w[0].raw.ts.as_nanos() == s.gap_nanos).count();

        let sessions = split_sessions(&s.packets);
        let sess_units: Vec<&TrafficUnit> = sessions.values().collect();
        ensure!(is_partition(&indices(&sess_units), n), "case {case}: sessions do not partition the stream");
        ensure!(sessions.len() == s.sessions, "case {case}: {} sessions, generated {}", sessions.len(), s.sessions);

        let flows = split_flows(&s.packets);
        let flow_units: Vec<&TrafficUnit> = flows.values().collect();
        ensure!(is_partition(&indices(&flow_units), n), "case {case}: flows do not partition the stream");
        let tuples: BTreeSet<_> = s.packets.iter().map(|p| p.tuple.expect("synthetic frames carry a tuple")).collect();
        ensure!(flows.len() == tuples.len(), "case {case}: {} flows, {} distinct tuples", flows.len(), tuples.len());
        ensure!((s.sessions..=2 * s.sessions).contains(&flows.len()), "case {case}: {} flows for {} sessions", flows.len(), s.sessions);
        for (t, u) in &flows {
            ensure!(u.packets.iter().all(|p| p.tuple == Some(*t)), "case {case}: flow {t:?} holds a foreign packet");
        }

        let bursts = split_bursts(&s.packets, s.gap_secs).map_err(|e| e.to_string())?;
        let got = indices(&bursts.iter().collect::<Vec<_>>());
        ensure!(got == oracle_bursts(&all, s.gap_nanos), "case {case}: bursts differ from the reference at gap {}", s.gap_secs);
        for sess in sessions.values() {
            let sb = session_bursts(sess, s.gap_secs).map_err(|e| e.to_string())?;
            let members: Vec<&ParsedPacket> = sess.packets.iter().collect();
            ensure!(
                indices(&sb.iter().collect::<Vec<_>>()) == oracle_bursts(&members, s.gap_nanos),
                "case {case}: per-session bursts differ from the reference"
            );
        }
        ensure!(split_packets(&s.packets).len() == n, "case {case}: packet units != packets");
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(30), "took {took:?}");
    ensure!(equal_gaps > 0, "no gap exactly equal to the threshold was generated");
    Ok(format!("1000 streams, {packets_seen} packets, {equal_gaps} gaps exactly at the threshold"))
}

// ---------------------------------------------------------------------------
// 4. Extraction lengths
// ---------------------------------------------------------------------------

fn parsed_corpus(files: usize, seed: u64) -> Vec<(String, Vec<ParsedPacket>)> {
    corpus(files, seed).into_iter().map(|(name, s)| (name, parse_all(merge_sessions(&s)))).collect()
}

fn units_at(packets: &[ParsedPacket], g: Granularity) -> Vec<TrafficUnit> {
    match g {
        Granularity::Packet => split_packets(packets),
        Granularity::Burst => split_sessions(packets).values().flat_map(|s| session_bursts(s, 1.0).unwrap()).collect(),
        Granularity::Flow => split_flows(packets).into_values().collect(),
        Granularity::Session => split_sessions(packets).into_values().collect(),
    }
}

fn extraction_lengths() -> Check {
    // (preset, packet, T1, T2, T3 row bytes), transcribed from the model table.
    let table = [(Preset::EtBert, 128, 640, 640, 128), (Preset::Yatc, 1600, 1600, 1600, 320)];
    let data = parsed_corpus(8, 41);
    let mut checked = 0usize;
    for (preset, packet, t1, t2, row) in table {
        let mut combos: Vec<(Granularity, ExtractionSpec, usize, usize)> =
            vec![(Granularity::Packet, preset.for_granularity(Granularity::Packet, Strategy::T1, Selection::FirstN), packet, packet)];
        for g in [Granularity::Burst, Granularity::Flow, Granularity::Session] {
            for sel in [Selection::FirstN, Selection::AnyConsecutiveN] {
                combos.push((g, preset.for_granularity(g, Strategy::T1, sel), t1, t1));
                combos.push((g, preset.for_granularity(g, Strategy::T2, sel), t2, t2));
                combos.push((g, preset.for_granularity(g, Strategy::T3, sel), row * 5, row));
            }
        }
        for (g, spec, want_len, want_row) in combos {
            let mut n = 0;
            for (_, packets) in &data {
                for unit in units_at(packets, g) {
                    for s in extract(&unit, &spec).map_err(|e| e.to_string())? {
                        ensure!(s.len() == want_len, "{preset:?} {g} {spec:?}: sample of {} bytes, want {want_len}", s.len());
                        ensure!(s.row_len == want_row, "{preset:?} {g} {spec:?}: row of {} bytes, want {want_row}", s.row_len);
                        n += 1;
                    }
                }
            }
            ensure!(n > 0, "{preset:?} {g} {spec:?}: no samples emitted");
            checked += n;
        }
    }

    let mut windows = 0usize;
    for (_, packets) in &data {
        for g in [Granularity::Burst, Granularity::Flow, Granularity::Session] {
            for unit in units_at(packets, g) {
                let p = unit.packets.len();
                for spec in [
                    ExtractionSpec::t2(640, PRESET_PACKETS, Selection::AnyConsecutiveN),
                    ExtractionSpec::t3(128, 3, Selection::AnyConsecutiveN),
                ] {
                    let spec = spec.with_stride(1);
                    let got = extract(&unit, &spec).map_err(|e| e.to_string())?.len();
                    let want = if p >= spec.n { p - spec.n + 1 } else { 0 };
                    ensure!(got == want, "{g} unit of {p} packets: {got} windows of {}, want {want}", spec.n);
                    windows += got;
                }
            }
        }
    }
    Ok(format!("{checked} samples at mandated sizes, {windows} stride-1 windows"))
}

// ---------------------------------------------------------------------------
// 5. Field isolation
// ---------------------------------------------------------------------------

/// Byte ranges of each occludable field in an Ethernet/IPv4 frame, located
/// from fixed header offsets and a brute-force server_name scan.
fn frame_fields(frame: &[u8]) -> Vec<(FieldClass, Range<usize>)> {
    let mut out = vec![(FieldClass::MacDst, 0..6), (FieldClass::MacSrc, 6..12)];
    if frame.len() < 34 || frame[12..14] != [8, 0] {
        return out;
    }
    let ihl = usize::from(frame[14] & 0x0F) * 4;
    let end = (14 + be16(frame, 16)).min(frame.len());
    let l4 = 14 + ihl;
    out.extend([(FieldClass::IpId, 18..20), (FieldClass::IpChecksum, 24..26), (FieldClass::IpSrc, 26..30), (FieldClass::IpDst, 30..34)]);
    let payload_at = match frame[23] {
        6 => {
            let doff = usize::from(frame[l4 + 12] >> 4) * 4;
            out.extend([
                (FieldClass::Ports, l4..l4 + 4),
                (FieldClass::SeqAck, l4 + 4..l4 + 12),
                (FieldClass::WindowSize, l4 + 14..l4 + 16),
            ]);
            if doff > 20 {
                out.push((FieldClass::TcpOptions, l4 + 20..l4 + doff));
            }
            l4 + doff
        }
        17 => {
            out.push((FieldClass::Ports, l4..l4 + 4));
            l4 + 8
        }
        _ => return out,
    };
    if payload_at < end {
        out.push((FieldClass::Payload, payload_at..end));
        let p = &frame[payload_at..end];
        let hello = p.len() > 14 && p[0] == 22 && (p[5] == 1 || (p[1] == 0xFE && p[13] == 1));
        if hello {
            if let Some(r) = scan_server_name(p) {
                out.push((FieldClass::Sni, payload_at + r.start..payload_at + r.end));
            }
        }
    }
    out
}

/// Find a server_name extension by its nested length pattern.
fn scan_server_name(p: &[u8]) -> Option<Range<usize>> {
    (0..p.len().saturating_sub(9)).find_map(|i| {
        let ext_len = be16(p, i + 2);
        let ok = p[i] == 0
            && p[i + 1] == 0
            && ext_len > 5
            && be16(p, i + 4) == ext_len - 2
            && p[i + 6] == 0
            && be16(p, i + 7) == ext_len - 5
            && i + 4 + ext_len <= p.len()
            && p[i + 9..i + 4 + ext_len].iter().all(|b| b.is_ascii_alphanumeric() || *b == b'.' || *b == b'-');
        ok.then(|| i + 9..i + 4 + ext_len)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Want {
    Keep,
    Fixed(u8),
    Random,
}

struct Fixture {
    file: String,
    sample: Sample,
    packets: Vec<ParsedPacket>,
}

impl Fixture {
    /// Sample positions of each field class.
    fn class_ranges(&self) -> Vec<(FieldClass, Range<usize>)> {
        let mut out = Vec::new();
        for span in &self.sample.packet_spans {
            let frame = &self.packets[span.packet].raw.data;
            let window = span.frame_offset..span.frame_offset + span.len;
            for (class, r) in frame_fields(frame) {
                let (a, b) = (r.start.max(window.start), r.end.min(window.end));
                if a < b {
                    let shift = |x: usize| span.sample_offset + x - span.frame_offset;
                    out.push((class, shift(a)..shift(b)));
                }
            }
        }
        out
    }

    fn expected(&self, strategy: &OcclusionStrategy) -> Vec<Want> {
        let ranges = self.class_ranges();
        let of = |class: FieldClass| ranges.iter().filter(move |(c, _)| *c == class).map(|(_, r)| r.clone());
        let mut want = vec![Want::Keep; self.sample.len()];
        let effect = |a: Action| match a {
            Action::Eradicate => Want::Fixed(0),
            Action::MaskFF => Want::Fixed(0xFF),
            Action::Randomize | Action::Obfuscate => Want::Random,
        };
        let payload = match strategy.payload_policy {
            PayloadPolicy::Keep | PayloadPolicy::Encrypted => None,
            PayloadPolicy::Eradicate => Some(Want::Fixed(0)),
            PayloadPolicy::MaskFF => Some(Want::Fixed(0xFF)),
            PayloadPolicy::Obfuscate => Some(Want::Random),
        };
        if let Some(w) = payload {
            for r in of(FieldClass::Payload) {
                want[r].fill(w);
            }
        }
        let row = self.sample.row_len;
        if strategy.truncation_factor < 1.0 {
            let keep = (row as f64 * strategy.truncation_factor).floor() as usize;
            for start in (0..want.len()).step_by(row) {
                want[start + keep..start + row].fill(Want::Fixed(self.sample.pad_byte));
            }
        }
        for &(class, action) in &strategy.rules {
            for r in of(class) {
                want[r].fill(effect(action));
            }
        }
        want
    }

    /// Exact result of an option-stripping strategy, which is deterministic.
    fn expected_stripped(&self, strategy: &OcclusionStrategy) -> Vec<u8> {
        let mut bytes = self.sample.bytes.clone();
        for (i, w) in self.expected(strategy).into_iter().enumerate() {
            if let Want::Fixed(v) = w {
                bytes[i] = v;
            }
        }
        let options: Vec<Range<usize>> =
            self.class_ranges().into_iter().filter(|(c, _)| *c == FieldClass::TcpOptions).map(|(_, r)| r).collect();
        let row = self.sample.row_len;
        let mut out = Vec::with_capacity(bytes.len());
        for (ri, chunk) in bytes.chunks(row).enumerate() {
            let kept: Vec<u8> =
                chunk.iter().enumerate().filter(|(j, _)| !options.iter().any(|r| r.contains(&(ri * row + j)))).map(|(_, b)| *b).collect();
            let pad = row - kept.len();
            out.extend(kept);
            out.extend(std::iter::repeat_n(self.sample.pad_byte, pad));
        }
        out
    }

    fn occlude(&self, strategy: &OcclusionStrategy, seed: u64) -> Vec<u8> {
        let fields = spans_to_fields(&self.sample, &self.packets);
        apply_strategy(&self.sample, &fields, strategy, &OcclusionSeed::for_sample(seed, &self.file, &self.sample)).sample.bytes
    }
}

fn fixtures(count: usize) -> Vec<Fixture> {
    let data = parsed_corpus(16, 77);
    let specs = [
        (Granularity::Session, ExtractionSpec::t1(1600)),
        (Granularity::Session, ExtractionSpec::t2(640, 5, Selection::FirstN)),
        (Granularity::Flow, ExtractionSpec::t3(320, 5, Selection::FirstN)),
        (Granularity::Session, ExtractionSpec::t3(128, 5, Selection::AnyConsecutiveN).with_stride(1)),
        (Granularity::Burst, ExtractionSpec::t3(320, 5, Selection::AnyConsecutiveN)),
        (Granularity::Flow, ExtractionSpec::t2(1600, 5, Selection::AnyConsecutiveN).with_stride(2)),
        (Granularity::Packet, ExtractionSpec::t1(128)),
        (Granularity::Packet, ExtractionSpec::t1(1600)),
    ];
    let mut pools: Vec<Vec<Fixture>> = specs
        .iter()
        .map(|(g, spec)| {
            let mut pool = Vec::new();
            for (file, packets) in &data {
                for unit in units_at(packets, *g) {
                    for sample in extract(&unit, spec).unwrap() {
                        pool.push(Fixture { file: file.clone(), sample, packets: unit.packets.clone() });
                    }
                }
            }
            pool.reverse();
            pool
        })
        .collect();
    let mut out = Vec::new();
    while out.len() < count && pools.iter().any(|p| !p.is_empty()) {
        for pool in pools.iter_mut() {
            if let Some(f) = pool.pop() {
                if out.len() < count {
                    out.push(f);
                }
            }
        }
    }
    out
}

fn digest_all(fx: &[Fixture], catalog: &[OcclusionStrategy], seed: u64) -> Vec<u8> {
    let outputs: Vec<Vec<u8>> = fx.par_iter().flat_map_iter(|f| catalog.iter().map(move |s| f.occlude(s, seed))).collect();
    let mut h = Sha256::new();
    for o in outputs {
        h.update((o.len() as u64).to_le_bytes());
        h.update(&o);
    }
    h.finalize().to_vec()
}

fn field_isolation() -> Check {
    let fx = fixtures(500);
    ensure!(fx.len() == 500, "only {} fixture samples", fx.len());
    let catalog = strategy_catalog();
    ensure!(catalog.len() == 13, "{} strategies in the catalog", catalog.len());
    let sni_samples = fx.iter().filter(|f| f.class_ranges().iter().any(|(c, _)| *c == FieldClass::Sni)).count();
    ensure!(sni_samples > 0, "no fixture sample carries a hostname");
    let seeds = [1u64, 2, 3, 4];
    let mut idempotent = BTreeSet::new();
    for s in &catalog {
        let deterministic = !s.strip_tcp_options
            && !matches!(s.payload_policy, PayloadPolicy::Obfuscate)
            && s.rules.iter().all(|(_, a)| a.is_deterministic());
        for (k, f) in fx.iter().enumerate() {
            let outs: Vec<Vec<u8>> = seeds.iter().map(|&seed| f.occlude(s, seed)).collect();
            let input = &f.sample.bytes;
            if s.id == StrategyId::A1 {
                ensure!(outs.iter().all(|o| o == input), "A1 changed sample {k}");
            }
            if s.strip_tcp_options {
                let want = f.expected_stripped(s);
                ensure!(outs.iter().all(|o| *o == want), "{} sample {k}: stripped output differs from the reference", s.id);
                continue;
            }
            for (i, w) in f.expected(s).into_iter().enumerate() {
                let ok = match w {
                    Want::Keep => outs.iter().all(|o| o[i] == input[i]),
                    Want::Fixed(v) => outs.iter().all(|o| o[i] == v),
                    Want::Random => outs.iter().any(|o| o[i] != input[i]),
                };
                ensure!(
                    ok,
                    "{} sample {k} byte {i}: expected {w:?}, input {:#04x}, outputs {:?}",
                    s.id,
                    input[i],
                    outs.iter().map(|o| o[i]).collect::<Vec<_>>()
                );
            }
            ensure!(outs.iter().all(|o| o.len() == input.len()), "{} changed the sample length", s.id);
            if deterministic {
                let once = Fixture {
                    file: f.file.clone(),
                    sample: Sample { bytes: outs[0].clone(), ..f.sample.clone() },
                    packets: f.packets.clone(),
                };
                ensure!(once.occlude(s, 9) == outs[0], "{} is not idempotent on sample {k}", s.id);
                idempotent.insert(s.id);
            }
        }
    }
    let want_idem: BTreeSet<StrategyId> = [StrategyId::A1, StrategyId::E1, StrategyId::E2, StrategyId::E2T25, StrategyId::E2T50].into();
    ensure!(idempotent == want_idem, "idempotence checked for {idempotent:?}");

    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool").install(|| digest_all(&fx, &catalog, 7))
    };
    ensure!(run(1) == run(4), "1 and 4 workers disagree");
    Ok(format!("500 samples x 13 strategies x {} seeds, {sni_samples} with SNI, 1 vs 4 workers identical", seeds.len()))
}

// ---------------------------------------------------------------------------
// 6. SNI handling
// ---------------------------------------------------------------------------

/// Offset and length of the hostname, walking the ClientHello layout.
fn walk_client_hello(h: &[u8]) -> Option<(usize, usize)> {
    let mut p = 5 + 4 + 2 + 32;
    p += 1 + usize::from(*h.get(p)?);
    p += 2 + be16(h, p);
    p += 1 + usize::from(*h.get(p)?);
    let end = p + 2 + be16(h, p);
    p += 2;
    while p + 4 <= end {
        let (ty, len) = (be16(h, p), be16(h, p + 2));
        if ty == 0 {
            return Some((p + 4 + 5, be16(h, p + 4 + 3)));
        }
        p += 4 + len;
    }
    None
}

fn sni_handling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5A1);
    let d2 = OcclusionStrategy::get(StrategyId::D2);
    let spec = ExtractionSpec::t1(1600);
    ensure!(applicability(StrategyId::D2, Granularity::Session, &spec), "D2 not applicable to session T1");
    let pool = [0x1301u16, 0x1302, 0x1303, 0xC02B, 0xC02F, 0xC030, 0xCCA9, 0x009C, 0x002F, 0x0035, 0x000A];
    for case in 0..100 {
        let host = hostname(&mut rng);
        let mut suites = pool.to_vec();
        suites.shuffle(&mut rng);
        suites.truncate(rng.gen_range(1..=pool.len()));
        let hs = ClientHelloSpec {
            host: Some(host.clone()),
            record_version: *[0x0301u16, 0x0303].choose(&mut rng).unwrap(),
            suites,
            tls13: rng.gen_bool(0.5),
            seed: rng.gen_range(1..1_000_000),
        };
        let hello = client_hello(&hs);
        ensure!(be16(&hello, 3) == hello.len() - 5, "case {case}: record length");
        let (off, len) = walk_client_hello(&hello).ok_or(format!("case {case}: no server_name"))?;
        ensure!(&hello[off..off + len] == host.as_bytes(), "case {case}: reference walk misread the hostname");

        let loc = locate_sni(&hello).ok_or(format!("case {case}: locate_sni found nothing for {host}"))?;
        ensure!(loc.host == host, "case {case}: decoded {:?}, want {host:?}", loc.host);
        ensure!(loc.range.offset == off && loc.range.len == len, "case {case}: range {} != {off}+{len}", loc.range);

        let mut c = TcpConversation::new(
            Host::new([10, 1, 1, 1], 40000 + case),
            Host::new([10, 2, 2, 2], 443),
            Timestamp::new(5, 0),
            u64::from(case),
        );
        c.handshake().client(&hello);
        let packets = parse_all(c.finish());
        let session = split_sessions(&packets).into_values().next().ok_or("no session")?;
        let sample = extract(&session, &spec).map_err(|e| e.to_string())?.remove(0);
        let fields = spans_to_fields(&sample, &session.packets);
        let out = apply_strategy(&sample, &fields, &d2, &OcclusionSeed::for_sample(3, "sni.pcap", &sample)).sample.bytes;

        let at = sample.bytes.windows(hello.len()).position(|w| w == hello).ok_or(format!("case {case}: hello not inside the sample"))?;
        let occluded = &out[at..at + hello.len()];
        ensure!(&occluded[off..off + len] != host.as_bytes(), "case {case}: hostname survived D2");
        ensure!(
            occluded[..off] == hello[..off] && occluded[off + len..] == hello[off + len..],
            "case {case}: D2 touched bytes outside the hostname"
        );
        ensure!(walk_client_hello(occluded) == Some((off, len)), "case {case}: declared lengths changed");

        let frame = packets.iter().find(|p| p.payload().first() == Some(&22)).ok_or("no hello frame")?;
        let whole = occlude_frame(frame, &d2, 3, "sni.pcap");
        let pstart = frame.payload_offset().ok_or("no payload")?;
        let fh = &whole[pstart..pstart + hello.len()];
        ensure!(&fh[off..off + len] != host.as_bytes(), "case {case}: frame-level D2 kept the hostname");
        ensure!(fh[..off] == hello[..off] && fh[off + len..] == hello[off + len..], "case {case}: frame-level D2 touched lengths");
    }
    Ok("100 ClientHellos located exactly and randomized with lengths intact".into())
}

// ---------------------------------------------------------------------------
// 7. Dataset leakage
// ---------------------------------------------------------------------------

fn labeled_corpus(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1EA);
    let sites = ["video.streamsite.com", "mail.webmail.net", "api.chatapp.io", "cdn.news.co.uk"];
    let mut paths = Vec::new();
    for f in 0..3usize {
        let mut sessions = Vec::new();
        for (i, site) in sites.iter().enumerate() {
            for k in 0..3 {
                let slot = i * 3 + k;
                let kind = if (f + k) % 2 == 0 { Kind::Tls13(0x1301) } else { Kind::Tls12(0xC02F) };
                let host = format!("n{k}.{site}");
                sessions.push(script(kind, f, slot, &host, &mut rng));
            }
        }
        sessions.push(script(Kind::Http, f, 20, "plain.example.com", &mut rng));
        sessions.push(script(Kind::Dns, f, 21, "plain.example.com", &mut rng));
        let path = dir.join(format!("site_{f}.pcap"));
        write_capture(&CaptureMeta::default(), &merge_sessions(&sessions), &path).map_err(|e| e.to_string())?;
        paths.push(path);
    }
    Ok(paths)
}

fn sha_hex(path: &Path) -> Result<String, String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(|e| e.to_string())?)))
}

fn leakage_guard() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut sessions = Vec::new();
    for p in labeled_corpus(dir.path())? {
        sessions.extend(sessions_of_capture(&load_capture(&p).map_err(|e| e.to_string())?));
    }
    let (labeled, _) = label_by_sni(sessions, true);
    ensure!(labeled.len() == 36, "{} labeled sessions, want 36", labeled.len());

    let matrix: [(Granularity, ExtractionSpec, &[StrategyId]); 5] = [
        (
            Granularity::Session,
            Preset::Yatc.spec(Strategy::T1, Selection::FirstN),
            &[StrategyId::A1, StrategyId::D2, StrategyId::H1, StrategyId::P1],
        ),
        (Granularity::Flow, Preset::EtBert.spec(Strategy::T2, Selection::FirstN), &[StrategyId::D1, StrategyId::D2]),
        (
            Granularity::Session,
            Preset::Yatc.spec(Strategy::T3, Selection::AnyConsecutiveN),
            &[StrategyId::C, StrategyId::E2, StrategyId::E2T50],
        ),
        (Granularity::Burst, Preset::EtBert.spec(Strategy::T3, Selection::AnyConsecutiveN), &[StrategyId::T, StrategyId::E3]),
        (
            Granularity::Packet,
            Preset::EtBert.for_granularity(Granularity::Packet, Strategy::T1, Selection::FirstN),
            &[StrategyId::E1, StrategyId::CTD],
        ),
    ];
    let mut bundles = 0;
    for (granularity, extraction, strategies) in &matrix {
        for &strategy in *strategies {
            for ratios in ["0.8,0.2", "0.7,0.15,0.15"] {
                for seed in [3u64, 11] {
                    let ratios = SplitRatios::parse(ratios).map_err(|e| e.to_string())?;
                    let cfg =
                        ExportConfig { granularity: *granularity, extraction: extraction.clone(), strategy, seed, burst_gap_secs: 1.0 };
                    let tag = format!("{granularity}/{strategy}/{}/{seed}", ratios.names.join("-"));
                    let mut digests = Vec::new();
                    for run in ["a", "b"] {
                        let out = dir.path().join(format!("bundle_{bundles}_{run}"));
                        let split = split_train_test(&labeled, &ratios, seed, false);
                        let m = export_bundle(&labeled, &split, &ratios, &cfg, &out).map_err(|e| format!("{tag}: {e}"))?;
                        let mut owner: HashMap<String, String> = HashMap::new();
                        for s in &m.splits {
                            let mut rdr =
                                csv::Reader::from_path(out.join(format!("{}.sessions.csv", s.name))).map_err(|e| e.to_string())?;
                            for row in rdr.records() {
                                let id = row.map_err(|e| e.to_string())?[0].to_string();
                                if let Some(prev) = owner.insert(id.clone(), s.name.clone()) {
                                    return Err(format!("{tag}: session {id} in both {prev} and {}", s.name));
                                }
                            }
                            let file = out.join(&s.file);
                            ensure!(sha_hex(&file)? == s.sha256, "{tag}: manifest digest of {} is stale", s.file);
                            let n = decode_records(&fs::read(&file).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.len();
                            ensure!(n == s.records, "{tag}: {} decodes to {n} records, manifest says {}", s.file, s.records);
                        }
                        ensure!(owner.len() == labeled.len(), "{tag}: {} of {} sessions exported", owner.len(), labeled.len());
                        let mut d: Vec<String> = m.splits.iter().map(|s| s.sha256.clone()).collect();
                        d.push(sha_hex(&out.join("manifest.json"))?);
                        digests.push(d);
                    }
                    ensure!(digests[0] == digests[1], "{tag}: re-export changed digests");
                    bundles += 1;
                }
            }
        }
    }
    Ok(format!("{bundles} bundles, {} sessions each, no split overlap, digests stable", labeled.len()))
}

// ---------------------------------------------------------------------------
// 8. Catalog fidelity
// ---------------------------------------------------------------------------

fn catalog_fidelity() -> Check {
    let golden = include_str!("golden/occlusion_catalog.txt");
    let rendered = render_truth_table(&strategy_catalog());
    let (g, r): (Vec<&str>, Vec<&str>) = (golden.trim_end().lines().collect(), rendered.trim_end().lines().collect());
    for (i, (a, b)) in g.iter().zip(&r).enumerate() {
        ensure!(a.trim_end() == b.trim_end(), "line {}: golden {a:?}, rendered {b:?}", i + 1);
    }
    ensure!(g.len() == r.len(), "golden has {} lines, rendered {}", g.len(), r.len());
    Ok(format!("{} rows match the golden table", g.len() - 1))
}
