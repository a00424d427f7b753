//! Synthetic traffic: frame builders, protocol message builders and whole
//! scripted conversations with known ground truth.
//!
//! Used for fixtures, demos and tests. Checksums are computed so that the
//! frames dissect cleanly in other tools as well.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::packet::tcp_flags;
use crate::pcap::{RawPacket, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpOptionsSpec {
    None,
    MssOnly(u16),
    /// NOP, NOP, timestamps: 12 bytes.
    Timestamps {
        tsval: u32,
        tsecr: u32,
    },
    /// MSS, SACK-permitted, timestamps, NOP, window scale: 20 bytes (a
    /// typical Linux SYN).
    Linux {
        tsval: u32,
        tsecr: u32,
    },
}

impl TcpOptionsSpec {
    fn encode(self) -> Vec<u8> {
        let ts = |tsval: u32, tsecr: u32| {
            let mut v = vec![8, 10];
            v.extend_from_slice(&tsval.to_be_bytes());
            v.extend_from_slice(&tsecr.to_be_bytes());
            v
        };
        match self {
            TcpOptionsSpec::None => Vec::new(),
            TcpOptionsSpec::MssOnly(mss) => {
                let m = mss.to_be_bytes();
                vec![2, 4, m[0], m[1]]
            }
            TcpOptionsSpec::Timestamps { tsval, tsecr } => {
                let mut v = vec![1, 1];
                v.extend(ts(tsval, tsecr));
                v
            }
            TcpOptionsSpec::Linux { tsval, tsecr } => {
                let mut v = vec![2, 4, 0x05, 0xB4, 4, 2];
                v.extend(ts(tsval, tsecr));
                v.extend_from_slice(&[1, 3, 3, 7]);
                v
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum L4 {
    Tcp,
    Udp,
}

/// Builds one Ethernet/IPv4/{TCP,UDP} frame.
#[derive(Debug, Clone)]
pub struct FrameBuilder {
    l4: L4,
    mac_src: [u8; 6],
    mac_dst: [u8; 6],
    src: [u8; 4],
    dst: [u8; 4],
    sport: u16,
    dport: u16,
    ip_id: u16,
    ttl: u8,
    seq: u32,
    ack: u32,
    flags: u16,
    window: u16,
    options: TcpOptionsSpec,
    payload: Vec<u8>,
    pad_to: usize,
}

impl FrameBuilder {
    fn base(l4: L4, src: [u8; 4], sport: u16, dst: [u8; 4], dport: u16) -> Self {
        FrameBuilder {
            l4,
            mac_src: [0x02, 0, src[0], src[1], src[2], src[3]],
            mac_dst: [0x02, 0, dst[0], dst[1], dst[2], dst[3]],
            src,
            dst,
            sport,
            dport,
            ip_id: 0x1000,
            ttl: 64,
            seq: 0,
            ack: 0,
            flags: tcp_flags::ACK,
            window: 64240,
            options: TcpOptionsSpec::None,
            payload: Vec::new(),
            pad_to: 0,
        }
    }

    pub fn tcp(src: [u8; 4], sport: u16, dst: [u8; 4], dport: u16) -> Self {
        Self::base(L4::Tcp, src, sport, dst, dport)
    }

    pub fn udp(src: [u8; 4], sport: u16, dst: [u8; 4], dport: u16) -> Self {
        Self::base(L4::Udp, src, sport, dst, dport)
    }

    pub fn macs(mut self, src: [u8; 6], dst: [u8; 6]) -> Self {
        self.mac_src = src;
        self.mac_dst = dst;
        self
    }

    pub fn ip_id(mut self, id: u16) -> Self {
        self.ip_id = id;
        self
    }

    pub fn ttl(mut self, ttl: u8) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn seq(mut self, seq: u32) -> Self {
        self.seq = seq;
        self
    }

    pub fn ack(mut self, ack: u32) -> Self {
        self.ack = ack;
        self
    }

    pub fn flags(mut self, flags: u16) -> Self {
        self.flags = flags;
        self
    }

    pub fn window(mut self, window: u16) -> Self {
        self.window = window;
        self
    }

    pub fn options(mut self, options: TcpOptionsSpec) -> Self {
        self.options = options;
        self
    }

    pub fn payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    /// Ethernet trailer padding up to `len` bytes (not counted by IP).
    pub fn pad_to(mut self, len: usize) -> Self {
        self.pad_to = len;
        self
    }

    pub fn build(&self) -> Vec<u8> {
        let l4_header = match self.l4 {
            L4::Tcp => {
                let opts = self.options.encode();
                debug_assert_eq!(opts.len() % 4, 0);
                let doff = (20 + opts.len()) / 4;
                let mut h = Vec::with_capacity(20 + opts.len());
                h.extend_from_slice(&self.sport.to_be_bytes());
                h.extend_from_slice(&self.dport.to_be_bytes());
                h.extend_from_slice(&self.seq.to_be_bytes());
                h.extend_from_slice(&self.ack.to_be_bytes());
                h.extend_from_slice(&(((doff as u16) << 12) | (self.flags & 0x01FF)).to_be_bytes());
                h.extend_from_slice(&self.window.to_be_bytes());
                h.extend_from_slice(&[0, 0, 0, 0]); // checksum, urgent pointer
                h.extend_from_slice(&opts);
                h
            }
            L4::Udp => {
                let mut h = Vec::with_capacity(8);
                h.extend_from_slice(&self.sport.to_be_bytes());
                h.extend_from_slice(&self.dport.to_be_bytes());
                h.extend_from_slice(&((8 + self.payload.len()) as u16).to_be_bytes());
                h.extend_from_slice(&[0, 0]);
                h
            }
        };
        let mut segment = l4_header;
        segment.extend_from_slice(&self.payload);
        let proto = match self.l4 {
            L4::Tcp => 6u8,
            L4::Udp => 17u8,
        };
        let csum = transport_checksum(self.src, self.dst, proto, &segment);
        match self.l4 {
            L4::Tcp => segment[16..18].copy_from_slice(&csum.to_be_bytes()),
            L4::Udp => segment[6..8].copy_from_slice(&(if csum == 0 { 0xFFFF } else { csum }).to_be_bytes()),
        }

        let total = 20 + segment.len();
        let mut ip = Vec::with_capacity(total);
        ip.extend_from_slice(&[0x45, 0]);
        ip.extend_from_slice(&(total as u16).to_be_bytes());
        ip.extend_from_slice(&self.ip_id.to_be_bytes());
        ip.extend_from_slice(&[0x40, 0]); // DF
        ip.extend_from_slice(&[self.ttl, proto, 0, 0]);
        ip.extend_from_slice(&self.src);
        ip.extend_from_slice(&self.dst);
        let c = internet_checksum(&ip, 0);
        ip[10..12].copy_from_slice(&c.to_be_bytes());

        let mut frame = Vec::with_capacity(14 + total);
        frame.extend_from_slice(&self.mac_dst);
        frame.extend_from_slice(&self.mac_src);
        frame.extend_from_slice(&[0x08, 0x00]);
        frame.extend_from_slice(&ip);
        frame.extend_from_slice(&segment);
        if frame.len() < self.pad_to {
            frame.resize(self.pad_to, 0);
        }
        frame
    }
}

fn internet_checksum(data: &[u8], initial: u32) -> u16 {
    let mut sum = initial;
    for chunk in data.chunks(2) {
        let word = if chunk.len() == 2 { u16::from_be_bytes([chunk[0], chunk[1]]) } else { u16::from(chunk[0]) << 8 };
        sum += u32::from(word);
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

fn transport_checksum(src: [u8; 4], dst: [u8; 4], proto: u8, segment: &[u8]) -> u16 {
    let mut pseudo = Vec::with_capacity(12);
    pseudo.extend_from_slice(&src);
    pseudo.extend_from_slice(&dst);
    pseudo.extend_from_slice(&[0, proto]);
    pseudo.extend_from_slice(&(segment.len() as u16).to_be_bytes());
    let mut sum = 0u32;
    for c in pseudo.chunks(2) {
        sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    internet_checksum(segment, sum)
}

pub(crate) fn random_bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

/// TLS message builders.
pub mod tls {
    use super::random_bytes;

    #[derive(Debug, Clone)]
    pub struct ClientHelloSpec {
        pub host: Option<String>,
        pub record_version: u16,
        pub suites: Vec<u16>,
        /// Offer TLS 1.3 via supported_versions and key_share.
        pub tls13: bool,
        pub seed: u64,
    }

    impl ClientHelloSpec {
        pub fn new(host: &str) -> Self {
            ClientHelloSpec {
                host: Some(host.to_string()),
                record_version: 0x0301,
                suites: vec![0x1301, 0x1302, 0x1303, 0xC02B, 0xC02F, 0xCCA9, 0xCCA8, 0xC02C, 0xC030, 0x009C, 0x002F, 0x0035],
                tls13: true,
                seed: 1,
            }
        }
    }

    fn ext(out: &mut Vec<u8>, ty: u16, data: &[u8]) {
        out.extend_from_slice(&ty.to_be_bytes());
        out.extend_from_slice(&(data.len() as u16).to_be_bytes());
        out.extend_from_slice(data);
    }

    pub(crate) fn server_name_ext(host: &str) -> Vec<u8> {
        let name = host.as_bytes();
        let mut list = Vec::new();
        list.push(0);
        list.extend_from_slice(&(name.len() as u16).to_be_bytes());
        list.extend_from_slice(name);
        let mut data = (list.len() as u16).to_be_bytes().to_vec();
        data.extend(list);
        data
    }

    /// ClientHello body after the legacy version (random onward), with an
    /// optional DTLS cookie.
    pub(crate) fn client_hello_body(spec: &ClientHelloSpec, dtls_cookie: Option<&[u8]>) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(random_bytes(spec.seed, 32));
        if dtls_cookie.is_some() {
            b.push(0);
        } else {
            b.push(32);
            b.extend(random_bytes(spec.seed ^ 0x5555, 32));
        }
        if let Some(cookie) = dtls_cookie {
            b.push(cookie.len() as u8);
            b.extend_from_slice(cookie);
        }
        b.extend_from_slice(&((spec.suites.len() * 2) as u16).to_be_bytes());
        for s in &spec.suites {
            b.extend_from_slice(&s.to_be_bytes());
        }
        b.extend_from_slice(&[1, 0]);
        let mut exts = Vec::new();
        if let Some(h) = &spec.host {
            ext(&mut exts, 0x0000, &server_name_ext(h));
        }
        ext(&mut exts, 0x0017, &[]);
        ext(&mut exts, 0xFF01, &[0]);
        ext(&mut exts, 0x000A, &[0, 6, 0, 0x1D, 0, 0x17, 0, 0x18]);
        ext(&mut exts, 0x000B, &[1, 0]);
        ext(&mut exts, 0x0010, &[0, 12, 2, b'h', b'2', 8, b'h', b't', b't', b'p', b'/', b'1', b'.', b'1']);
        ext(&mut exts, 0x000D, &[0, 8, 4, 3, 8, 4, 4, 1, 5, 1]);
        if spec.tls13 {
            let mut ks = vec![0, 36, 0, 0x1D, 0, 32];
            ks.extend(random_bytes(spec.seed ^ 0xAAAA, 32));
            ext(&mut exts, 0x0033, &ks);
            ext(&mut exts, 0x002B, &[4, 3, 4, 3, 3]);
            ext(&mut exts, 0x002D, &[1, 1]);
        }
        b.extend_from_slice(&(exts.len() as u16).to_be_bytes());
        b.extend(exts);
        b
    }

    pub(crate) fn handshake(msg_type: u8, body: &[u8]) -> Vec<u8> {
        let mut m = vec![msg_type];
        m.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        m.extend_from_slice(body);
        m
    }

    pub fn record(content_type: u8, version: u16, body: &[u8]) -> Vec<u8> {
        let mut r = vec![content_type];
        r.extend_from_slice(&version.to_be_bytes());
        r.extend_from_slice(&(body.len() as u16).to_be_bytes());
        r.extend_from_slice(body);
        r
    }

    /// A complete ClientHello record.
    pub fn client_hello(spec: &ClientHelloSpec) -> Vec<u8> {
        let mut body = 0x0303u16.to_be_bytes().to_vec();
        body.extend(client_hello_body(spec, None));
        record(22, spec.record_version, &handshake(1, &body))
    }

    pub(crate) fn server_hello_body(suite: u16, tls13: bool, version: u16, seed: u64) -> Vec<u8> {
        let mut b = version.to_be_bytes().to_vec();
        b.extend(random_bytes(seed, 32));
        b.push(32);
        b.extend(random_bytes(seed ^ 0x77, 32));
        b.extend_from_slice(&suite.to_be_bytes());
        b.push(0);
        let mut exts = Vec::new();
        if tls13 {
            ext(&mut exts, 0x002B, &[3, 4]);
            let mut ks = vec![0, 0x1D, 0, 32];
            ks.extend(random_bytes(seed ^ 0x99, 32));
            ext(&mut exts, 0x0033, &ks);
        } else {
            ext(&mut exts, 0xFF01, &[0]);
            ext(&mut exts, 0x0017, &[]);
        }
        b.extend_from_slice(&(exts.len() as u16).to_be_bytes());
        b.extend(exts);
        b
    }

    /// A ServerHello record selecting `suite`.
    pub fn server_hello(suite: u16, tls13: bool) -> Vec<u8> {
        record(22, 0x0303, &handshake(2, &server_hello_body(suite, tls13, 0x0303, 2)))
    }

    /// Opaque application-data record with a `len`-byte body.
    pub fn application_data(len: usize, seed: u64) -> Vec<u8> {
        record(23, 0x0303, &random_bytes(seed, len))
    }

    pub fn change_cipher_spec() -> Vec<u8> {
        record(20, 0x0303, &[1])
    }

    /// Certificate + ServerHelloDone flight with an opaque certificate blob.
    pub fn tls12_server_flight_tail(seed: u64) -> Vec<u8> {
        let cert = random_bytes(seed, 700);
        let mut certs = Vec::new();
        certs.extend_from_slice(&(cert.len() as u32 + 3).to_be_bytes()[1..]);
        certs.extend_from_slice(&(cert.len() as u32).to_be_bytes()[1..]);
        certs.extend(cert);
        let mut hs = handshake(11, &certs);
        hs.extend(handshake(14, &[]));
        record(22, 0x0303, &hs)
    }

    /// ClientKeyExchange record.
    pub fn client_key_exchange(seed: u64) -> Vec<u8> {
        let mut body = vec![32];
        body.extend(random_bytes(seed, 32));
        record(22, 0x0303, &handshake(16, &body))
    }

    /// Encrypted Finished, carried as a handshake record after CCS.
    pub fn encrypted_finished(seed: u64) -> Vec<u8> {
        record(22, 0x0303, &random_bytes(seed, 40))
    }
}

pub fn dns_query(id: u16, name: &str) -> Vec<u8> {
    let mut q = id.to_be_bytes().to_vec();
    q.extend_from_slice(&[0x01, 0x00, 0, 1, 0, 0, 0, 0, 0, 0]);
    for label in name.split('.') {
        q.push(label.len() as u8);
        q.extend_from_slice(label.as_bytes());
    }
    q.extend_from_slice(&[0, 0, 1, 0, 1]);
    q
}

pub fn dns_response(id: u16, name: &str, addr: [u8; 4]) -> Vec<u8> {
    let mut r = dns_query(id, name);
    r[2] = 0x81;
    r[3] = 0x80;
    r[7] = 1;
    r.extend_from_slice(&[0xC0, 0x0C, 0, 1, 0, 1, 0, 0, 0x0E, 0x10, 0, 4]);
    r.extend_from_slice(&addr);
    r
}

/// QUIC Initial long-header packet (header unprotected, payload opaque).
pub fn quic_initial(version: u32, len: usize) -> Vec<u8> {
    let mut p = vec![0xC3];
    p.extend_from_slice(&version.to_be_bytes());
    p.push(8);
    p.extend(random_bytes(u64::from(version) ^ 11, 8));
    p.push(8);
    p.extend(random_bytes(u64::from(version) ^ 12, 8));
    p.push(0); // token length
    let rest = len.saturating_sub(p.len() + 2).max(4);
    p.extend_from_slice(&(0x4000u16 | rest as u16).to_be_bytes());
    p.extend(random_bytes(len as u64, rest));
    p
}

pub fn quic_short(len: usize, seed: u64) -> Vec<u8> {
    let mut p = vec![0x43];
    p.extend(random_bytes(seed, len.saturating_sub(1)));
    p
}

fn dtls_record(content_type: u8, seq: u64, body: &[u8]) -> Vec<u8> {
    let mut r = vec![content_type, 0xFE, 0xFD, 0, 0];
    r.extend_from_slice(&seq.to_be_bytes()[2..]);
    r.extend_from_slice(&(body.len() as u16).to_be_bytes());
    r.extend_from_slice(body);
    r
}

fn dtls_handshake(msg_type: u8, msg_seq: u16, body: &[u8]) -> Vec<u8> {
    let len = (body.len() as u32).to_be_bytes();
    let mut m = vec![msg_type, len[1], len[2], len[3]];
    m.extend_from_slice(&msg_seq.to_be_bytes());
    m.extend_from_slice(&[0, 0, 0, len[1], len[2], len[3]]);
    m.extend_from_slice(body);
    m
}

pub fn dtls_client_hello(host: &str) -> Vec<u8> {
    let spec = tls::ClientHelloSpec { tls13: false, suites: vec![0xC02B, 0xC02F, 0xCCA9], ..tls::ClientHelloSpec::new(host) };
    let mut body = 0xFEFDu16.to_be_bytes().to_vec();
    body.extend(tls::client_hello_body(&spec, Some(&[])));
    dtls_record(22, 0, &dtls_handshake(1, 0, &body))
}

pub fn dtls_server_hello(suite: u16) -> Vec<u8> {
    let body = tls::server_hello_body(suite, false, 0xFEFD, 5);
    dtls_record(22, 0, &dtls_handshake(2, 0, &body))
}

pub fn dtls_application_data(len: usize, seq: u64) -> Vec<u8> {
    let mut r = dtls_record(23, seq, &random_bytes(seq, len));
    r[3] = 0;
    r[4] = 1; // epoch 1
    r
}

pub fn http_request(host: &str, path: &str) -> Vec<u8> {
    format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: synth/1.0\r\nAccept: */*\r\n\r\n").into_bytes()
}

pub fn http_response(body_len: usize) -> Vec<u8> {
    let mut r = format!("HTTP/1.1 200 OK\r\nContent-Type: text/html\r\nContent-Length: {body_len}\r\n\r\n").into_bytes();
    r.extend(std::iter::repeat_n(b'x', body_len));
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Host {
    pub ip: [u8; 4],
    pub port: u16,
}

impl Host {
    pub fn new(ip: [u8; 4], port: u16) -> Self {
        Host { ip, port }
    }
}

const MSS: usize = 1460;

/// Scripted TCP conversation producing frames with consistent sequence and
/// acknowledgment numbers, IP IDs and (optionally) timestamp options.
#[derive(Debug, Clone)]
pub struct TcpConversation {
    client: Host,
    server: Host,
    client_seq: u32,
    server_seq: u32,
    client_ip_id: u16,
    server_ip_id: u16,
    ts_nanos: u128,
    step_nanos: u128,
    timestamps: bool,
    tsval_base: u32,
    frames: Vec<RawPacket>,
}

impl TcpConversation {
    pub fn new(client: Host, server: Host, start: Timestamp, seed: u64) -> Self {
        let r = random_bytes(seed, 16);
        let word = |i: usize| u32::from_be_bytes([r[i], r[i + 1], r[i + 2], r[i + 3]]);
        TcpConversation {
            client,
            server,
            client_seq: word(0),
            server_seq: word(4),
            client_ip_id: word(8) as u16,
            server_ip_id: (word(8) >> 16) as u16,
            ts_nanos: start.as_nanos(),
            step_nanos: 2_000_000,
            timestamps: true,
            tsval_base: word(12) >> 4,
            frames: Vec::new(),
        }
    }

    pub fn without_timestamps(mut self) -> Self {
        self.timestamps = false;
        self
    }

    /// Inter-packet spacing.
    pub fn step(mut self, nanos: u128) -> Self {
        self.step_nanos = nanos;
        self
    }

    pub fn pause(&mut self, nanos: u128) -> &mut Self {
        self.ts_nanos += nanos;
        self
    }

    fn emit(&mut self, from_client: bool, flags: u16, payload: Vec<u8>, syn: bool) {
        let (src, dst) = if from_client { (self.client, self.server) } else { (self.server, self.client) };
        let (seq, ack) = if from_client { (self.client_seq, self.server_seq) } else { (self.server_seq, self.client_seq) };
        let ip_id = if from_client { &mut self.client_ip_id } else { &mut self.server_ip_id };
        *ip_id = ip_id.wrapping_add(1);
        let tick = (self.ts_nanos / 1_000_000) as u32;
        let tsval = self.tsval_base.wrapping_add(tick).wrapping_add(if from_client { 0 } else { 0x1000_0000 });
        let tsecr = self.tsval_base.wrapping_add(tick.wrapping_sub(1)).wrapping_add(if from_client { 0x1000_0000 } else { 0 });
        let options = match (self.timestamps, syn) {
            (true, true) => TcpOptionsSpec::Linux { tsval, tsecr: if from_client { 0 } else { tsecr } },
            (true, false) => TcpOptionsSpec::Timestamps { tsval, tsecr },
            (false, true) => TcpOptionsSpec::MssOnly(1460),
            (false, false) => TcpOptionsSpec::None,
        };
        let len = payload.len() as u32;
        let frame = FrameBuilder::tcp(src.ip, src.port, dst.ip, dst.port)
            .seq(seq)
            .ack(if flags & tcp_flags::ACK != 0 { ack } else { 0 })
            .flags(flags)
            .ip_id(*ip_id)
            .window(if from_client { 64240 } else { 65160 })
            .options(options)
            .payload(payload)
            .build();
        let advance = len + u32::from(flags & (tcp_flags::SYN | tcp_flags::FIN) != 0);
        if from_client {
            self.client_seq = self.client_seq.wrapping_add(advance);
        } else {
            self.server_seq = self.server_seq.wrapping_add(advance);
        }
        let index = self.frames.len() as u64;
        self.frames.push(RawPacket::new(index, Timestamp::from_nanos(self.ts_nanos), frame));
        self.ts_nanos += self.step_nanos;
    }

    pub fn handshake(&mut self) -> &mut Self {
        self.emit(true, tcp_flags::SYN, Vec::new(), true);
        self.emit(false, tcp_flags::SYN | tcp_flags::ACK, Vec::new(), true);
        self.emit(true, tcp_flags::ACK, Vec::new(), false);
        self
    }

    /// Send `data`, segmented at the MSS, followed by a pure ACK from the peer.
    pub fn send(&mut self, from_client: bool, data: &[u8]) -> &mut Self {
        for chunk in data.chunks(MSS) {
            self.emit(from_client, tcp_flags::ACK | tcp_flags::PSH, chunk.to_vec(), false);
        }
        self.emit(!from_client, tcp_flags::ACK, Vec::new(), false);
        self
    }

    pub fn client(&mut self, data: &[u8]) -> &mut Self {
        self.send(true, data)
    }

    pub fn server(&mut self, data: &[u8]) -> &mut Self {
        self.send(false, data)
    }

    pub fn close(&mut self) -> &mut Self {
        self.emit(true, tcp_flags::FIN | tcp_flags::ACK, Vec::new(), false);
        self.emit(false, tcp_flags::FIN | tcp_flags::ACK, Vec::new(), false);
        self.emit(true, tcp_flags::ACK, Vec::new(), false);
        self
    }

    pub fn finish(&mut self) -> Vec<RawPacket> {
        std::mem::take(&mut self.frames)
    }
}

/// Scripted UDP exchange.
#[derive(Debug, Clone)]
pub struct UdpConversation {
    client: Host,
    server: Host,
    ip_id: u16,
    ts_nanos: u128,
    step_nanos: u128,
    frames: Vec<RawPacket>,
}

impl UdpConversation {
    pub fn new(client: Host, server: Host, start: Timestamp) -> Self {
        UdpConversation { client, server, ip_id: 0x4000, ts_nanos: start.as_nanos(), step_nanos: 1_000_000, frames: Vec::new() }
    }

    pub fn send(&mut self, from_client: bool, payload: Vec<u8>) -> &mut Self {
        let (src, dst) = if from_client { (self.client, self.server) } else { (self.server, self.client) };
        self.ip_id = self.ip_id.wrapping_add(1);
        let frame = FrameBuilder::udp(src.ip, src.port, dst.ip, dst.port).ip_id(self.ip_id).payload(payload).build();
        let index = self.frames.len() as u64;
        self.frames.push(RawPacket::new(index, Timestamp::from_nanos(self.ts_nanos), frame));
        self.ts_nanos += self.step_nanos;
        self
    }

    pub fn finish(&mut self) -> Vec<RawPacket> {
        std::mem::take(&mut self.frames)
    }
}

/// What a scripted session really is, independent of any parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionTruth {
    Plain,
    /// TLS with the suite its ServerHello announced, if a ServerHello is present.
    Tls {
        suite: Option<u16>,
    },
    Dtls {
        suite: Option<u16>,
    },
    Quic,
}

#[derive(Debug, Clone)]
pub struct ScriptedSession {
    pub truth: SessionTruth,
    pub sni: Option<String>,
    pub client: Host,
    pub server: Host,
    pub frames: Vec<RawPacket>,
}

/// Ready-made conversations.
pub mod scenarios {
    use super::tls::*;
    use super::*;

    pub fn tls13(client: Host, server: Host, start: Timestamp, suite: u16, host: &str, seed: u64, exchanges: usize) -> ScriptedSession {
        let mut c = TcpConversation::new(client, server, start, seed);
        c.handshake();
        c.client(&client_hello(&ClientHelloSpec { seed, ..ClientHelloSpec::new(host) }));
        let mut flight = record(22, 0x0303, &handshake(2, &server_hello_body(suite, true, 0x0303, seed)));
        flight.extend(change_cipher_spec());
        flight.extend(application_data(2400 + (seed % 700) as usize, seed ^ 1));
        c.server(&flight);
        let mut fin = change_cipher_spec();
        fin.extend(application_data(53, seed ^ 2));
        c.client(&fin);
        for i in 0..exchanges as u64 {
            c.client(&application_data(300 + ((seed + i) % 200) as usize, seed ^ (10 + i)));
            c.server(&application_data(1800 + ((seed * 7 + i) % 3000) as usize, seed ^ (100 + i)));
        }
        c.close();
        ScriptedSession { truth: SessionTruth::Tls { suite: Some(suite) }, sni: Some(host.to_string()), client, server, frames: c.finish() }
    }

    pub fn tls12(client: Host, server: Host, start: Timestamp, suite: u16, host: &str, seed: u64, exchanges: usize) -> ScriptedSession {
        let mut c = TcpConversation::new(client, server, start, seed);
        c.handshake();
        let spec = ClientHelloSpec { seed, tls13: false, suites: vec![suite, 0x002F, 0x0035, 0x000A], ..ClientHelloSpec::new(host) };
        c.client(&client_hello(&spec));
        let mut flight = record(22, 0x0303, &handshake(2, &server_hello_body(suite, false, 0x0303, seed)));
        flight.extend(tls12_server_flight_tail(seed));
        c.server(&flight);
        let mut cke = client_key_exchange(seed);
        cke.extend(change_cipher_spec());
        cke.extend(encrypted_finished(seed ^ 3));
        c.client(&cke);
        let mut sfin = change_cipher_spec();
        sfin.extend(encrypted_finished(seed ^ 4));
        c.server(&sfin);
        for i in 0..exchanges as u64 {
            c.client(&application_data(400 + ((seed + i) % 100) as usize, seed ^ (20 + i)));
            c.server(&application_data(2500 + ((seed + i) % 1500) as usize, seed ^ (200 + i)));
        }
        c.close();
        ScriptedSession { truth: SessionTruth::Tls { suite: Some(suite) }, sni: Some(host.to_string()), client, server, frames: c.finish() }
    }

    /// Resumed or mid-capture TLS: application data only, no handshake.
    pub fn tls_no_handshake(client: Host, server: Host, start: Timestamp, seed: u64, exchanges: usize) -> ScriptedSession {
        let mut c = TcpConversation::new(client, server, start, seed);
        for i in 0..exchanges.max(1) as u64 {
            c.client(&application_data(200 + (i * 13 % 90) as usize, seed ^ (30 + i)));
            c.server(&application_data(1500 + (i * 37 % 900) as usize, seed ^ (300 + i)));
        }
        ScriptedSession { truth: SessionTruth::Tls { suite: None }, sni: None, client, server, frames: c.finish() }
    }

    pub fn http(client: Host, server: Host, start: Timestamp, host: &str, seed: u64) -> ScriptedSession {
        let mut c = TcpConversation::new(client, server, start, seed);
        c.handshake();
        c.client(&http_request(host, "/index.html"));
        c.server(&http_response(1200 + (seed % 2000) as usize));
        c.close();
        ScriptedSession { truth: SessionTruth::Plain, sni: None, client, server, frames: c.finish() }
    }

    pub fn dns(client: Host, server: Host, start: Timestamp, name: &str, id: u16) -> ScriptedSession {
        let mut u = UdpConversation::new(client, server, start);
        u.send(true, dns_query(id, name));
        u.send(false, dns_response(id, name, [93, 184, 216, 34]));
        ScriptedSession { truth: SessionTruth::Plain, sni: None, client, server, frames: u.finish() }
    }

    pub fn quic(client: Host, server: Host, start: Timestamp, seed: u64) -> ScriptedSession {
        let mut u = UdpConversation::new(client, server, start);
        u.send(true, quic_initial(1, 1200));
        u.send(false, quic_initial(1, 1200));
        for i in 0..4 {
            u.send(i % 2 == 0, quic_short(300 + (seed as usize + i) % 900, seed ^ i as u64));
        }
        ScriptedSession { truth: SessionTruth::Quic, sni: None, client, server, frames: u.finish() }
    }

    pub fn dtls(client: Host, server: Host, start: Timestamp, suite: u16, host: &str) -> ScriptedSession {
        let mut u = UdpConversation::new(client, server, start);
        u.send(true, dtls_client_hello(host));
        u.send(false, dtls_server_hello(suite));
        for i in 1..4u64 {
            u.send(true, dtls_application_data(200, i));
            u.send(false, dtls_application_data(900, 100 + i));
        }
        ScriptedSession {
            truth: SessionTruth::Dtls { suite: Some(suite) },
            sni: Some(host.to_string()),
            client,
            server,
            frames: u.finish(),
        }
    }
}

/// Interleave sessions by timestamp and renumber frame indices.
pub fn merge_sessions<'a>(sessions: impl IntoIterator<Item = &'a ScriptedSession>) -> Vec<RawPacket> {
    let mut all: Vec<RawPacket> = sessions.into_iter().flat_map(|s| s.frames.iter().cloned()).collect();
    all.sort_by_key(|p| p.ts);
    for (i, p) in all.iter_mut().enumerate() {
        p.index = i as u64;
    }
    all
}
