//! Per-destination windowed feature extraction.
//!
//! Packets are grouped by (device, destination, window) and each non-empty
//! window yields a 204-value vector: 12 blocks of 16 statistics, one block
//! per protocol {TCP, TLS, UDP, ANY} x direction {UP, DOWN, ANY}, followed
//! by 12 window-level scalars. The layout is fixed; [`layout_hash`] pins it
//! so serialized models refuse to run against a different ordering.
//!
//! Block statistics: packet count; packet-size sum/mean/median/std/min/max/
//! q1/q3; interarrival-time mean/median/std/min/max/q1/q3 over the block's
//! packets sorted by time. Scalars: TCP/UDP packet and byte ratios, TLS/TCP
//! packet and byte ratios, uplink/downlink packet and byte ratios, unique
//! UDP local/remote and TCP local/remote port counts, unique TCP and UDP
//! flow counts (a flow is <device, local port, remote IP, remote port,
//! protocol>).
//!
//! Degenerate cases: an empty block is all zeros; a block with fewer than
//! two packets has all-zero IAT statistics; a ratio with a zero denominator
//! is 0. Quartiles interpolate linearly at index p*(n-1) and the standard
//! deviation is the population form.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capture::{DestinationKey, Direction, DnsTable, PacketRecord, Transport};
use crate::labeling::Label;

pub const FEATURE_COUNT: usize = 204;
pub const BLOCK_COUNT: usize = 12;
pub const BLOCK_STATS: usize = 16;
pub const SCALAR_COUNT: usize = 12;

/// Valid aggregation window lengths in seconds.
pub const WINDOW_LENGTHS: [u32; 4] = [10, 60, 600, 3600];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid window length {0}s (expected one of 10, 60, 600, 3600)")]
    InvalidWindowLength(u32),
    #[error("no training data for device {0}")]
    NoTrainingData(String),
    #[error("feature vector has {got} values, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed feature CSV line {line}: {reason}")]
    BadCsvLine { line: usize, reason: String },
}

const PROTO_NAMES: [&str; 4] = ["tcp", "tls", "udp", "any"];
const DIR_NAMES: [&str; 3] = ["up", "down", "any"];
const STAT_NAMES: [&str; BLOCK_STATS] = [
    "count",
    "size_sum",
    "size_mean",
    "size_median",
    "size_std",
    "size_min",
    "size_max",
    "size_q1",
    "size_q3",
    "iat_mean",
    "iat_median",
    "iat_std",
    "iat_min",
    "iat_max",
    "iat_q1",
    "iat_q3",
];
const SCALAR_NAMES: [&str; SCALAR_COUNT] = [
    "tcp_udp_packet_ratio",
    "tcp_udp_byte_ratio",
    "tls_tcp_packet_ratio",
    "tls_tcp_byte_ratio",
    "up_down_packet_ratio",
    "up_down_byte_ratio",
    "udp_local_ports",
    "udp_remote_ports",
    "tcp_local_ports",
    "tcp_remote_ports",
    "tcp_flows",
    "udp_flows",
];

/// The 204 feature names in canonical order.
pub fn feature_names() -> &'static [String] {
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    NAMES.get_or_init(|| {
        let mut names = Vec::with_capacity(FEATURE_COUNT);
        for proto in PROTO_NAMES {
            for dir in DIR_NAMES {
                for stat in STAT_NAMES {
                    names.push(format!("{proto}_{dir}_{stat}"));
                }
            }
        }
        names.extend(SCALAR_NAMES.iter().map(|s| s.to_string()));
        assert_eq!(names.len(), FEATURE_COUNT);
        names
    })
}

/// SHA-256 over the canonical feature-name list; models carry this hash and
/// refuse to load if it differs.
pub fn layout_hash() -> &'static str {
    static HASH: OnceLock<String> = OnceLock::new();
    HASH.get_or_init(|| {
        let joined = feature_names().join(",");
        let digest = Sha256::digest(joined.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    })
}

/// Identifies one (device, destination, window) aggregation cell.
/// Window starts are epoch-aligned: `window_start % window_len == 0`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowKey {
    pub device_id: String,
    pub destination: DestinationKey,
    pub window_start: u64,
    pub window_len: u32,
}

/// Ordered vector of the 204 window statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, FeatureError> {
        if values.len() != FEATURE_COUNT {
            return Err(FeatureError::LengthMismatch {
                expected: FEATURE_COUNT,
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a block statistic by (protocol, direction, stat) index.
    pub fn block_stat(&self, proto: usize, dir: usize, stat: usize) -> f64 {
        self.values[(proto * DIR_NAMES.len() + dir) * BLOCK_STATS + stat]
    }

    pub fn scalar(&self, idx: usize) -> f64 {
        self.values[BLOCK_COUNT * BLOCK_STATS + idx]
    }
}

/// An extracted feature row with provenance and an optional ground-truth
/// label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub key: WindowKey,
    pub features: FeatureVector,
    pub label: Option<Label>,
}

/// Groups time-sorted records into non-overlapping windows per destination.
///
/// The destination is resolved through the DNS table at the packet's own
/// timestamp, so two addresses behind one domain pool their packets. Empty
/// windows are never materialized.
pub fn window_packets(
    device_id: &str,
    records: &[PacketRecord],
    dns: &DnsTable,
    window_len: u32,
) -> Result<BTreeMap<WindowKey, Vec<PacketRecord>>, FeatureError> {
    if !WINDOW_LENGTHS.contains(&window_len) {
        return Err(FeatureError::InvalidWindowLength(window_len));
    }
    let mut windows: BTreeMap<WindowKey, Vec<PacketRecord>> = BTreeMap::new();
    for record in records {
        let destination = dns.resolve(record.remote_ip(), record.timestamp);
        let window_start =
            (record.timestamp / window_len as f64).floor() as u64 * window_len as u64;
        let key = WindowKey {
            device_id: device_id.to_string(),
            destination,
            window_start,
            window_len,
        };
        windows.entry(key).or_default().push(record.clone());
    }
    Ok(windows)
}

/// Windows the records and computes one feature row per non-empty window,
/// in (device, destination, window_start) order.
pub fn windowed_feature_rows(
    device_id: &str,
    records: &[PacketRecord],
    dns: &DnsTable,
    window_len: u32,
) -> Result<Vec<FeatureRow>, FeatureError> {
    let windows = window_packets(device_id, records, dns, window_len)?;
    Ok(windows
        .into_iter()
        .map(|(key, packets)| FeatureRow {
            key,
            features: compute_features(&packets),
            label: None,
        })
        .collect())
}

/// Computes the 204-value vector for the packets of one window.
pub fn compute_features(packets: &[PacketRecord]) -> FeatureVector {
    let mut values = Vec::with_capacity(FEATURE_COUNT);

    let proto_matches = |record: &PacketRecord, proto: usize| match proto {
        0 => record.transport == Transport::Tcp,
        1 => record.is_tls,
        2 => record.transport == Transport::Udp,
        _ => true,
    };
    let dir_matches = |record: &PacketRecord, dir: usize| match dir {
        0 => record.direction == Direction::Uplink,
        1 => record.direction == Direction::Downlink,
        _ => true,
    };

    // Block counts/byte sums are reused by the ratio scalars below.
    let mut counts = [[0f64; 3]; 4];
    let mut bytes = [[0f64; 3]; 4];

    for proto in 0..4 {
        for dir in 0..3 {
            let mut members: Vec<&PacketRecord> = packets
                .iter()
                .filter(|r| proto_matches(r, proto) && dir_matches(r, dir))
                .collect();
            members.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

            counts[proto][dir] = members.len() as f64;
            bytes[proto][dir] = members.iter().map(|r| r.size as f64).sum();

            values.push(members.len() as f64);
            let mut sizes: Vec<f64> = members.iter().map(|r| r.size as f64).collect();
            sizes.sort_by(|a, b| a.total_cmp(b));
            values.extend_from_slice(&size_stats(&sizes));
            let iats: Vec<f64> = members
                .windows(2)
                .map(|pair| pair[1].timestamp - pair[0].timestamp)
                .collect();
            values.extend_from_slice(&iat_stats(&iats));
        }
    }

    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    // [proto][2] is the ANY direction; [3][dir] the ANY protocol.
    values.push(ratio(counts[0][2], counts[2][2]));
    values.push(ratio(bytes[0][2], bytes[2][2]));
    values.push(ratio(counts[1][2], counts[0][2]));
    values.push(ratio(bytes[1][2], bytes[0][2]));
    values.push(ratio(counts[3][0], counts[3][1]));
    values.push(ratio(bytes[3][0], bytes[3][1]));

    let mut udp_local = BTreeSet::new();
    let mut udp_remote = BTreeSet::new();
    let mut tcp_local = BTreeSet::new();
    let mut tcp_remote = BTreeSet::new();
    let mut tcp_flows = BTreeSet::new();
    let mut udp_flows = BTreeSet::new();
    for record in packets {
        let (Some(local), Some(remote)) = (record.local_port(), record.remote_port()) else {
            continue;
        };
        let flow = (local, record.remote_ip().to_string(), remote);
        match record.transport {
            Transport::Udp => {
                udp_local.insert(local);
                udp_remote.insert(remote);
                udp_flows.insert(flow);
            }
            Transport::Tcp => {
                tcp_local.insert(local);
                tcp_remote.insert(remote);
                tcp_flows.insert(flow);
            }
            Transport::Other => {}
        }
    }
    values.push(udp_local.len() as f64);
    values.push(udp_remote.len() as f64);
    values.push(tcp_local.len() as f64);
    values.push(tcp_remote.len() as f64);
    values.push(tcp_flows.len() as f64);
    values.push(udp_flows.len() as f64);

    debug_assert_eq!(values.len(), FEATURE_COUNT);
    FeatureVector { values }
}

/// sum, mean, median, population std, min, max, q1, q3 over sorted sizes.
fn size_stats(sorted: &[f64]) -> [f64; 8] {
    if sorted.is_empty() {
        return [0.0; 8];
    }
    let n = sorted.len() as f64;
    let sum: f64 = sorted.iter().sum();
    let mean = sum / n;
    let variance = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    [
        sum,
        mean,
        quantile(sorted, 0.5),
        variance.sqrt(),
        sorted[0],
        sorted[sorted.len() - 1],
        quantile(sorted, 0.25),
        quantile(sorted, 0.75),
    ]
}

/// mean, median, population std, min, max, q1, q3 over interarrival times;
/// all zero with fewer than two packets.
fn iat_stats(iats: &[f64]) -> [f64; 7] {
    if iats.is_empty() {
        return [0.0; 7];
    }
    let mut sorted = iats.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let variance = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    [
        mean,
        quantile(&sorted, 0.5),
        variance.sqrt(),
        sorted[0],
        sorted[sorted.len() - 1],
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.75),
    ]
}

/// Linear interpolation between order statistics at index p*(n-1).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let idx = p * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (idx - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Per-device feature bounds fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationProfile {
    pub device_id: String,
    /// 204 (min, max) pairs.
    pub bounds: Vec<(f64, f64)>,
}

/// Fits per-feature min/max over one device's training vectors.
pub fn fit_normalization(
    train: &[FeatureVector],
    device_id: &str,
) -> Result<NormalizationProfile, FeatureError> {
    if train.is_empty() {
        return Err(FeatureError::NoTrainingData(device_id.to_string()));
    }
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); FEATURE_COUNT];
    for vector in train {
        for (bound, &x) in bounds.iter_mut().zip(vector.values()) {
            bound.0 = bound.0.min(x);
            bound.1 = bound.1.max(x);
        }
    }
    Ok(NormalizationProfile {
        device_id: device_id.to_string(),
        bounds,
    })
}

/// Rescales each feature to [0, 1] by the profile's bounds, clamping values
/// outside them; a constant feature (max == min) maps to 0.
pub fn normalize(vector: &FeatureVector, profile: &NormalizationProfile) -> FeatureVector {
    let values = vector
        .values()
        .iter()
        .zip(&profile.bounds)
        .map(|(&x, &(min, max))| {
            if max > min {
                ((x - min) / (max - min)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    FeatureVector { values }
}

/// Normalization profiles for a fleet, keyed by device id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub profiles: BTreeMap<String, NormalizationProfile>,
}

impl ProfileSet {
    pub fn insert(&mut self, profile: NormalizationProfile) {
        self.profiles.insert(profile.device_id.clone(), profile);
    }

    pub fn get(&self, device_id: &str) -> Option<&NormalizationProfile> {
        self.profiles.get(device_id)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let io_err = |source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        serde_json::to_writer(&mut file, self).map_err(|e| io_err(e.into()))?;
        file.write_all(b"\n").map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| FeatureError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })
    }
}

/// Writes rows as CSV: `device,destination,window_start,window_len,f000..
/// f203[,label]`. The label column appears iff any row carries a label.
pub fn write_feature_csv<W: Write>(mut w: W, rows: &[FeatureRow]) -> std::io::Result<()> {
    let labeled = rows.iter().any(|r| r.label.is_some());
    write!(w, "device,destination,window_start,window_len")?;
    for i in 0..FEATURE_COUNT {
        write!(w, ",f{i:03}")?;
    }
    if labeled {
        write!(w, ",label")?;
    }
    writeln!(w)?;
    for row in rows {
        write!(
            w,
            "{},{},{},{}",
            row.key.device_id, row.key.destination, row.key.window_start, row.key.window_len
        )?;
        for value in row.features.values() {
            write!(w, ",{value}")?;
        }
        if labeled {
            match row.label {
                Some(label) => write!(w, ",{label}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_feature_csv<R: BufRead>(r: R) -> Result<Vec<FeatureRow>, FeatureError> {
    let mut rows = Vec::new();
    let mut labeled = false;
    for (idx, line) in r.lines().enumerate() {
        let line = line.map_err(|source| FeatureError::Io {
            path: "<csv>".into(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| FeatureError::BadCsvLine {
            line: idx + 1,
            reason,
        };
        if idx == 0 {
            labeled = line.ends_with(",label");
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = 4 + FEATURE_COUNT + usize::from(labeled);
        if fields.len() != expected {
            return Err(bad(format!(
                "expected {expected} fields, got {}",
                fields.len()
            )));
        }
        let window_start = fields[2]
            .parse::<u64>()
            .map_err(|_| bad(format!("bad window_start {:?}", fields[2])))?;
        let window_len = fields[3]
            .parse::<u32>()
            .map_err(|_| bad(format!("bad window_len {:?}", fields[3])))?;
        let mut values = Vec::with_capacity(FEATURE_COUNT);
        for field in &fields[4..4 + FEATURE_COUNT] {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad feature value {field:?}")))?,
            );
        }
        let label = if labeled {
            let raw = fields[4 + FEATURE_COUNT];
            if raw.is_empty() {
                None
            } else {
                Some(raw.parse::<Label>().map_err(|e| bad(e))?)
            }
        } else {
            None
        };
        rows.push(FeatureRow {
            key: WindowKey {
                device_id: fields[0].to_string(),
                destination: DestinationKey::parse(fields[1]),
                window_start,
                window_len,
            },
            features: FeatureVector { values },
            label,
        });
    }
    Ok(rows)
}
