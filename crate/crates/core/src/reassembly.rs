//! Minimal in-order TCP payload reassembly for one direction.
//!
//! Segments are ordered by sequence number relative to the SYN (or to the
//! first data segment when the SYN was not captured). Retransmissions are
//! dropped, partial overlaps trimmed, and the stream ends at the first gap.

use crate::packet::{tcp_flags, ParsedPacket};

/// A slice of one packet's payload that belongs to the reassembled stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSegment {
    /// Index into the packet slice passed to [`reassemble`].
    pub packet: usize,
    /// Offset within that packet's transport payload.
    pub payload_offset: usize,
    pub len: usize,
}

impl StreamSegment {
    pub fn bytes<'a>(&self, packets: &[&'a ParsedPacket]) -> &'a [u8] {
        &packets[self.packet].payload()[self.payload_offset..self.payload_offset + self.len]
    }
}

/// Reassemble the payload stream of packets that all travel in one
/// direction of a TCP connection.
pub fn reassemble(packets: &[&ParsedPacket]) -> Vec<StreamSegment> {
    let syn = packets.iter().filter_map(|p| p.tcp).find(|t| t.has(tcp_flags::SYN));
    let mut data: Vec<(u32, usize, usize)> = packets
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let len = p.payload().len();
            (len > 0).then(|| p.tcp.map(|t| (t.seq, i, len))).flatten()
        })
        .collect();
    if data.is_empty() {
        return Vec::new();
    }
    let base = match syn {
        Some(t) => t.seq.wrapping_add(1),
        None => data[0].0,
    };
    let rel = |seq: u32| i64::from(seq.wrapping_sub(base) as i32);
    data.sort_by_key(|&(seq, i, _)| (rel(seq), i));

    let mut next = if syn.is_some() { 0 } else { rel(data[0].0) };
    let mut out = Vec::new();
    for (seq, i, len) in data {
        let start = rel(seq);
        let end = start + len as i64;
        if start > next {
            break;
        }
        if end <= next {
            continue;
        }
        let trim = (next - start) as usize;
        out.push(StreamSegment { packet: i, payload_offset: trim, len: len - trim });
        next = end;
    }
    out
}
