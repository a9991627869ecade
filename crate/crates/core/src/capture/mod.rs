//! Capture ingest: pcap files in, normalized packet records and DNS
//! address-to-domain tables out.
//!
//! Each capture file holds one device's traffic. Parsing yields
//! [`PacketRecord`]s with direction assigned against the device's local
//! address, plus the raw payloads of DNS responses so that
//! [`extract_dns_table`] can recover (domain, IP) pairs from type-A answers.
//! [`DnsTable::resolve`] then maps a remote IP seen at some instant back to
//! the most recently resolved domain name, falling back to the bare IP.

mod dns;
mod pcap;

pub use dns::{build_dns_query, build_dns_response, extract_dns_table, DnsAnswer, DnsExtract};
pub use pcap::{
    ethernet_frame, parse_capture, parse_capture_bytes, FrameSpec, PcapWriter, TransportSpec,
};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::net::IpAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("failed to read capture {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a pcap file (bad magic 0x{magic:08x}) in {path}")]
    BadMagic { magic: u32, path: String },
    #[error("truncated pcap global header in {path}")]
    TruncatedHeader { path: String },
    #[error("unsupported link type {0} (expected Ethernet)")]
    UnsupportedLinkType(u32),
    #[error("invalid device address {0}")]
    BadDeviceAddress(String),
    #[error("malformed CSV line {line}: {reason}")]
    BadCsvLine { line: usize, reason: String },
}

/// Transport protocol carried by an IP packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

/// Packet direction relative to the monitored device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Uplink,
    Downlink,
}

/// One observed packet, normalized from the link layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Seconds since the epoch, microsecond precision.
    pub timestamp: f64,
    pub src_ip: String,
    pub dst_ip: String,
    /// Absent for non-TCP/UDP transports.
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub transport: Transport,
    /// TCP payload starts with a TLS record header (first byte in 20..=23,
    /// second byte 3). Always false for non-TCP.
    pub is_tls: bool,
    /// Bytes on the wire (frame length).
    pub size: u32,
    /// Transport payload bytes.
    pub payload_len: u32,
    pub direction: Direction,
}

impl PacketRecord {
    /// The non-device endpoint of this packet.
    pub fn remote_ip(&self) -> &str {
        match self.direction {
            Direction::Uplink => &self.dst_ip,
            Direction::Downlink => &self.src_ip,
        }
    }

    /// Device-side transport port, when the transport has ports.
    pub fn local_port(&self) -> Option<u16> {
        match self.direction {
            Direction::Uplink => self.src_port,
            Direction::Downlink => self.dst_port,
        }
    }

    /// Remote-side transport port, when the transport has ports.
    pub fn remote_port(&self) -> Option<u16> {
        match self.direction {
            Direction::Uplink => self.dst_port,
            Direction::Downlink => self.src_port,
        }
    }
}

/// Writes records as one JSON object per line; the stream read back with
/// [`read_record_stream`] compares equal to the input.
pub fn write_record_stream<W: Write>(
    mut w: W,
    records: &[PacketRecord],
) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_record_stream<R: BufRead>(r: R) -> std::io::Result<Vec<PacketRecord>> {
    let mut records = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Whether a destination key came from a DNS mapping or is a bare address.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum DestinationKind {
    Domain,
    Ip,
}

/// A remote destination: a domain name when a DNS mapping covered the
/// address at the time of the packet, otherwise the literal IP string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DestinationKey {
    pub value: String,
    pub kind: DestinationKind,
}

impl DestinationKey {
    pub fn domain(value: impl Into<String>) -> Self {
        Self {
            value: value.into(),
            kind: DestinationKind::Domain,
        }
    }

    pub fn ip(value: impl Into<String>) -> Self {
        Self {
            value: value.into(),
            kind: DestinationKind::Ip,
        }
    }

    /// Classifies a bare string: parseable IP addresses become IP keys,
    /// anything else a domain key. Used when reading CSV back.
    pub fn parse(value: &str) -> Self {
        if value.parse::<IpAddr>().is_ok() {
            Self::ip(value)
        } else {
            Self::domain(value)
        }
    }

    pub fn is_domain(&self) -> bool {
        self.kind == DestinationKind::Domain
    }
}

impl fmt::Display for DestinationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.value)
    }
}

/// One (time, IP, domain) mapping recovered from a DNS type-A answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsEntry {
    pub query_time: f64,
    pub ip: String,
    pub domain: String,
}

/// Time-ordered IP-to-domain mappings for one device.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DnsTable {
    device_id: String,
    /// Sorted by (query_time, ip, domain).
    entries: Vec<DnsEntry>,
    #[serde(skip)]
    by_ip: BTreeMap<String, Vec<(f64, String)>>,
}

impl DnsTable {
    pub fn new(device_id: impl Into<String>) -> Self {
        Self {
            device_id: device_id.into(),
            entries: Vec::new(),
            by_ip: BTreeMap::new(),
        }
    }

    pub fn from_entries(device_id: impl Into<String>, entries: Vec<DnsEntry>) -> Self {
        let mut table = Self::new(device_id);
        table.extend(entries);
        table
    }

    /// Merges additional entries, keeping the table sorted. Exact duplicates
    /// collapse to one entry.
    pub fn extend(&mut self, entries: impl IntoIterator<Item = DnsEntry>) {
        self.entries.extend(entries);
        self.entries.sort_by(|a, b| {
            a.query_time
                .total_cmp(&b.query_time)
                .then_with(|| a.ip.cmp(&b.ip))
                .then_with(|| a.domain.cmp(&b.domain))
        });
        self.entries
            .dedup_by(|a, b| a.query_time == b.query_time && a.ip == b.ip && a.domain == b.domain);
        self.rebuild_index();
    }

    fn rebuild_index(&mut self) {
        self.by_ip.clear();
        for entry in &self.entries {
            self.by_ip
                .entry(entry.ip.clone())
                .or_default()
                .push((entry.query_time, entry.domain.clone()));
        }
        // Entries are globally sorted, so each per-IP list is already
        // ordered by (time, domain).
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn entries(&self) -> &[DnsEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Resolves a remote IP observed at time `at` to a destination key.
    ///
    /// Picks the mapping with the largest query_time <= `at`; among ties the
    /// lexicographically smallest domain wins. With no applicable mapping
    /// (unknown IP, or only future entries) the key is the bare IP.
    pub fn resolve(&self, remote_ip: &str, at: f64) -> DestinationKey {
        let Some(mappings) = self.by_ip.get(remote_ip) else {
            return DestinationKey::ip(remote_ip);
        };
        let end = mappings.partition_point(|(t, _)| *t <= at);
        if end == 0 {
            return DestinationKey::ip(remote_ip);
        }
        let latest = mappings[end - 1].0;
        let start = mappings.partition_point(|(t, _)| *t < latest);
        DestinationKey::domain(mappings[start].1.clone())
    }

    /// Every address a domain has resolved to, for blocklist expansion.
    pub fn ips_for_domain(&self, domain: &str) -> Vec<String> {
        let mut ips: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.domain == domain)
            .map(|e| e.ip.clone())
            .collect();
        ips.sort();
        ips.dedup();
        ips
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "query_time,ip,domain")?;
        for entry in &self.entries {
            writeln!(w, "{},{},{}", entry.query_time, entry.ip, entry.domain)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(device_id: &str, r: R) -> Result<Self, CaptureError> {
        let mut entries = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line.map_err(|e| CaptureError::Io {
                path: "<csv>".into(),
                source: e,
            })?;
            if idx == 0 || line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (t, ip, domain) = (parts.next(), parts.next(), parts.next());
            match (t, ip, domain) {
                (Some(t), Some(ip), Some(domain)) => {
                    let query_time = t.parse::<f64>().map_err(|_| CaptureError::BadCsvLine {
                        line: idx + 1,
                        reason: format!("bad query_time {t:?}"),
                    })?;
                    entries.push(DnsEntry {
                        query_time,
                        ip: ip.to_string(),
                        domain: domain.to_string(),
                    });
                }
                _ => {
                    return Err(CaptureError::BadCsvLine {
                        line: idx + 1,
                        reason: "expected query_time,ip,domain".into(),
                    })
                }
            }
        }
        Ok(Self::from_entries(device_id, entries))
    }
}

/// Result of parsing one capture file.
#[derive(Debug, Clone)]
pub struct ParsedCapture {
    pub device_id: String,
    pub records: Vec<PacketRecord>,
    /// Raw payloads of packets sourced from UDP port 53, with timestamps.
    pub dns_payloads: Vec<DnsPayload>,
    /// Link-layer frames seen in the file.
    pub frames: u64,
    /// Frames that did not produce a record (non-IP ethertype or
    /// undecodable headers). `records.len() + malformed_frames == frames`.
    pub malformed_frames: u64,
}

/// Raw DNS response payload captured alongside the packet records.
#[derive(Debug, Clone)]
pub struct DnsPayload {
    pub timestamp: f64,
    pub data: Vec<u8>,
}

/// Loads a device roster file: CSV lines `device_id,local_ip`.
pub fn read_roster(path: &Path) -> Result<BTreeMap<String, IpAddr>, CaptureError> {
    let text = std::fs::read_to_string(path).map_err(|e| CaptureError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut roster = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (idx == 0 && line == "device_id,local_ip")
        {
            continue;
        }
        let (id, addr) = line.split_once(',').ok_or_else(|| CaptureError::BadCsvLine {
            line: idx + 1,
            reason: "expected device_id,local_ip".into(),
        })?;
        let ip = addr
            .trim()
            .parse::<IpAddr>()
            .map_err(|_| CaptureError::BadDeviceAddress(addr.trim().to_string()))?;
        roster.insert(id.trim().to_string(), ip);
    }
    Ok(roster)
}
