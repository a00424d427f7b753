//! Preprocessing toolkit for encrypted network traffic classification.
//!
//! The pipeline runs capture files through dissection ([`packet`], [`tls`],
//! [`udp`]), grouping into traffic units ([`granularity`]), fixed-size byte
//! extraction ([`extraction`]) and feature occlusion ([`occlusion`]), and
//! finally labels and exports session-disjoint datasets ([`dataset`]).
//! [`audit`] reports how much of a capture corpus is actually encrypted and
//! with which algorithms.

pub mod audit;
pub mod dataset;
pub mod extraction;
pub mod granularity;
pub mod occlusion;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod reassembly;
pub mod synth;
pub mod tls;
pub mod udp;

pub use packet::{parse_packet, ByteRange, FieldKind, FieldMap, FiveTuple, ParsedPacket, Protocol};
pub use pcap::{open_capture, write_capture, CaptureMeta, RawPacket, Timestamp};
