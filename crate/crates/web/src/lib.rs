//! WebAssembly bindings for the demo page. Each export takes plain numbers
//! and strings and returns a JSON document the page draws on a canvas.

use std::str::FromStr;

use ntckit::extraction::{extract, spans_to_fields, ExtractionSpec, Selection};
use ntckit::granularity::{split_bursts, split_sessions, Granularity};
use ntckit::occlusion::{applicability, apply_strategy, OcclusionSeed, OcclusionStrategy, StrategyId};
use ntckit::pipeline::parse_all;
use ntckit::synth::{scenarios, FrameBuilder, Host};
use ntckit::{FieldKind, RawPacket, Timestamp};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Width of the demo sample; matches the larger reference model.
pub const SAMPLE_BYTES: usize = 1600;

#[derive(Debug, Serialize)]
pub struct ByteMap {
    pub strategy: String,
    pub applicable: bool,
    pub before: Vec<u8>,
    pub after: Vec<u8>,
    /// Index into `field_names` per byte; -2 for other header bytes, -1
    /// for padding.
    pub field: Vec<i16>,
    pub field_names: Vec<&'static str>,
    pub changed: usize,
}

/// Occlude the first bytes of a synthetic TLS 1.3 session and report which
/// bytes changed and what field each byte belongs to.
pub fn occlusion_map(strategy: &str, host: &str, seed: u64) -> Result<ByteMap, String> {
    let id = StrategyId::from_str(strategy).map_err(|e| e.to_string())?;
    let host = if host.trim().is_empty() { "www.example.com" } else { host.trim() };
    let s = scenarios::tls13(
        Host::new([192, 168, 1, 20], 51515),
        Host::new([93, 184, 216, 34], 443),
        Timestamp::new(1_700_000_000, 0),
        0x1301,
        host,
        7,
        1,
    );
    let packets = parse_all(s.frames);
    let session = split_sessions(&packets).into_values().next().ok_or("no session")?;
    let spec = ExtractionSpec::t1(SAMPLE_BYTES);
    let sample = extract(&session, &spec).map_err(|e| e.to_string())?.remove(0);
    let fields = spans_to_fields(&sample, &session.packets);
    let out = apply_strategy(&sample, &fields, &OcclusionStrategy::get(id), &OcclusionSeed::for_sample(seed, "demo.pcap", &sample));

    let field_names: Vec<&'static str> = FieldKind::ALL.iter().map(|k| k.name()).collect();
    let mut field = vec![-1i16; sample.len()];
    for p in &fields.packets {
        field[p.span.sample_range().as_range()].fill(-2);
        // Containers first so nested fields (the hostname inside the
        // payload) win.
        let mut located: Vec<(FieldKind, _)> = p.fields.iter().collect();
        located.sort_by_key(|(k, _)| k.container().is_some());
        for (kind, r) in located {
            let idx = FieldKind::ALL.iter().position(|k| *k == kind).expect("listed") as i16;
            field[r.as_range()].fill(idx);
        }
    }
    let changed = sample.bytes.iter().zip(&out.sample.bytes).filter(|(a, b)| a != b).count();
    Ok(ByteMap {
        strategy: id.to_string(),
        applicable: applicability(id, Granularity::Session, &spec),
        before: sample.bytes,
        after: out.sample.bytes,
        field,
        field_names,
        changed,
    })
}

#[derive(Debug, Serialize)]
pub struct BurstView {
    /// Arrival time of each packet in milliseconds.
    pub arrivals_ms: Vec<f64>,
    /// Burst ordinal of each packet.
    pub burst_of: Vec<usize>,
    pub bursts: usize,
}

/// Split packets with the given inter-arrival gaps (milliseconds) into
/// bursts at `threshold_ms`.
pub fn burst_view(gaps_ms: &[f64], threshold_ms: f64) -> Result<BurstView, String> {
    let mut t: u128 = 0;
    let mut raw = Vec::with_capacity(gaps_ms.len() + 1);
    for i in 0..=gaps_ms.len() {
        if i > 0 {
            let g = gaps_ms[i - 1];
            if !g.is_finite() || g < 0.0 {
                return Err(format!("gap {g} is not a non-negative number"));
            }
            t += (g * 1e6).round() as u128;
        }
        let frame = FrameBuilder::tcp([10, 0, 0, 1], 40000, [10, 0, 0, 2], 443).payload(vec![0; 64]).build();
        raw.push(RawPacket::new(i as u64, Timestamp::from_nanos(t), frame));
    }
    let packets = parse_all(raw);
    let bursts = split_bursts(&packets, threshold_ms / 1e3).map_err(|e| e.to_string())?;
    let mut burst_of = vec![0; packets.len()];
    for (b, unit) in bursts.iter().enumerate() {
        for p in &unit.packets {
            burst_of[p.raw.index as usize] = b;
        }
    }
    Ok(BurstView { arrivals_ms: packets.iter().map(|p| p.raw.ts.as_nanos() as f64 / 1e6).collect(), burst_of, bursts: bursts.len() })
}

#[derive(Debug, Serialize)]
pub struct Window {
    pub index: usize,
    /// Unit packet indices that contributed bytes.
    pub packets: Vec<usize>,
    /// Rows that are pure padding because the unit ran out of packets.
    pub padded_rows: usize,
}

/// Windows a flow of `packets` packets yields under T3 with `n` packets per
/// window.
pub fn extraction_windows(packets: usize, n: usize, stride: usize, selection: &str) -> Result<Vec<Window>, String> {
    if packets > 4096 {
        return Err("at most 4096 packets".into());
    }
    let selection = Selection::from_str(selection).map_err(|e| e.to_string())?;
    let mut spec = ExtractionSpec::t3(64, n, selection);
    if stride > 0 {
        spec = spec.with_stride(stride);
    }
    spec.validate().map_err(|e| e.to_string())?;
    let raw = (0..packets)
        .map(|i| {
            let frame = FrameBuilder::tcp([10, 0, 0, 1], 40000, [10, 0, 0, 2], 443).seq(i as u32 * 100).payload(vec![i as u8; 100]).build();
            RawPacket::new(i as u64, Timestamp::new(i as u64, 0), frame)
        })
        .collect();
    let parsed = parse_all(raw);
    let Some(unit) = split_sessions(&parsed).into_values().next() else {
        return Ok(Vec::new());
    };
    let samples = extract(&unit, &spec).map_err(|e| e.to_string())?;
    Ok(samples
        .into_iter()
        .map(|s| {
            let used: Vec<usize> = s.packet_spans.iter().map(|p| p.packet).collect();
            Window { index: s.window_index, padded_rows: n - used.len(), packets: used }
        })
        .collect())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = occlusionMap)]
pub fn occlusion_map_js(strategy: &str, host: &str, seed: u32) -> Result<String, JsValue> {
    to_js(occlusion_map(strategy, host, u64::from(seed)))
}

#[wasm_bindgen(js_name = burstView)]
pub fn burst_view_js(gaps_ms: &[f64], threshold_ms: f64) -> Result<String, JsValue> {
    to_js(burst_view(gaps_ms, threshold_ms))
}

#[wasm_bindgen(js_name = extractionWindows)]
pub fn extraction_windows_js(packets: u32, n: u32, stride: u32, selection: &str) -> Result<String, JsValue> {
    to_js(extraction_windows(packets as usize, n as usize, stride as usize, selection))
}
