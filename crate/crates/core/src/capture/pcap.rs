//! Legacy pcap reading and writing plus Ethernet/IP/TCP/UDP frame decoding.
//!
//! Supports the microsecond (0xa1b2c3d4) and nanosecond (0xa1b23c4d) magics
//! in either byte order. Written files use the microsecond magic,
//! little-endian, Ethernet link type.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use super::{
    CaptureError, Direction, DnsPayload, PacketRecord, ParsedCapture, Transport,
};

const MAGIC_US: u32 = 0xa1b2_c3d4;
const MAGIC_NS: u32 = 0xa1b2_3c4d;
const MAGIC_US_SWAPPED: u32 = 0xd4c3_b2a1;
const MAGIC_NS_SWAPPED: u32 = 0x4d3c_b2a1;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;

const DNS_PORT: u16 = 53;

/// Parses a pcap capture file for one device.
///
/// Every link-layer frame either yields a record or increments
/// `malformed_frames`; frames that are not IPv4/IPv6 count as malformed.
pub fn parse_capture(
    path: &Path,
    device_id: &str,
    device_addr: IpAddr,
) -> Result<ParsedCapture, CaptureError> {
    let bytes = std::fs::read(path).map_err(|e| CaptureError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_capture_bytes(&bytes, device_id, device_addr, &path.display().to_string())
}

/// Same as [`parse_capture`] but over an in-memory buffer.
pub fn parse_capture_bytes(
    bytes: &[u8],
    device_id: &str,
    device_addr: IpAddr,
    path: &str,
) -> Result<ParsedCapture, CaptureError> {
    if bytes.len() < 24 {
        return Err(CaptureError::TruncatedHeader { path: path.into() });
    }
    let raw_magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let (big_endian, _nanos) = match raw_magic {
        MAGIC_US => (false, false),
        MAGIC_NS => (false, true),
        MAGIC_US_SWAPPED => (true, false),
        MAGIC_NS_SWAPPED => (true, true),
        other => {
            return Err(CaptureError::BadMagic {
                magic: other,
                path: path.into(),
            })
        }
    };
    let read_u32 = |buf: &[u8]| -> u32 {
        let arr: [u8; 4] = buf.try_into().unwrap();
        if big_endian {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    };
    let nanos = matches!(
        if big_endian { raw_magic.swap_bytes() } else { raw_magic },
        MAGIC_NS
    );
    let link_type = read_u32(&bytes[20..24]);
    if link_type != 1 {
        return Err(CaptureError::UnsupportedLinkType(link_type));
    }

    let device_ip = device_addr.to_string();
    let mut capture = ParsedCapture {
        device_id: device_id.to_string(),
        records: Vec::new(),
        dns_payloads: Vec::new(),
        frames: 0,
        malformed_frames: 0,
    };

    let mut offset = 24usize;
    while offset + 16 <= bytes.len() {
        let ts_sec = read_u32(&bytes[offset..offset + 4]) as u64;
        let ts_frac = read_u32(&bytes[offset + 4..offset + 8]) as u64;
        let incl_len = read_u32(&bytes[offset + 8..offset + 12]) as usize;
        let orig_len = read_u32(&bytes[offset + 12..offset + 16]);
        offset += 16;
        capture.frames += 1;

        let data_end = offset.saturating_add(incl_len).min(bytes.len());
        let frame = &bytes[offset..data_end];
        let truncated = data_end - offset < incl_len;
        offset = data_end;

        let timestamp = if nanos {
            ts_sec as f64 + ts_frac as f64 * 1e-9
        } else {
            ts_sec as f64 + ts_frac as f64 * 1e-6
        };

        if truncated {
            capture.malformed_frames += 1;
            continue;
        }
        match decode_frame(frame, orig_len, timestamp, &device_ip) {
            Some((record, dns_payload)) => {
                if let Some(data) = dns_payload {
                    capture.dns_payloads.push(DnsPayload { timestamp, data });
                }
                capture.records.push(record);
            }
            None => capture.malformed_frames += 1,
        }
    }
    Ok(capture)
}

/// Decodes one Ethernet frame into a record. Returns the DNS payload as well
/// when the packet comes from UDP port 53.
fn decode_frame(
    frame: &[u8],
    orig_len: u32,
    timestamp: f64,
    device_ip: &str,
) -> Option<(PacketRecord, Option<Vec<u8>>)> {
    if frame.len() < 14 {
        return None;
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut ip_start = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return None;
        }
        ethertype = u16::from_be_bytes([frame[16], frame[17]]);
        ip_start = 18;
    }

    let ip = &frame[ip_start..];
    let (src_ip, dst_ip, proto, transport_bytes, ip_payload_len) = match ethertype {
        ETHERTYPE_IPV4 => {
            if ip.len() < 20 || ip[0] >> 4 != 4 {
                return None;
            }
            let ihl = ((ip[0] & 0x0f) as usize) * 4;
            if ihl < 20 || ip.len() < ihl {
                return None;
            }
            let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
            if total_len < ihl {
                return None;
            }
            let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]).to_string();
            let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]).to_string();
            (src, dst, ip[9], &ip[ihl..], total_len - ihl)
        }
        ETHERTYPE_IPV6 => {
            if ip.len() < 40 || ip[0] >> 4 != 6 {
                return None;
            }
            let payload_len = u16::from_be_bytes([ip[4], ip[5]]) as usize;
            let src_bytes: [u8; 16] = ip[8..24].try_into().unwrap();
            let dst_bytes: [u8; 16] = ip[24..40].try_into().unwrap();
            let src = Ipv6Addr::from(src_bytes).to_string();
            let dst = Ipv6Addr::from(dst_bytes).to_string();
            (src, dst, ip[6], &ip[40..], payload_len)
        }
        _ => return None,
    };

    let direction = if src_ip == device_ip {
        Direction::Uplink
    } else {
        Direction::Downlink
    };

    let (transport, src_port, dst_port, payload_len, payload) = match proto {
        6 => {
            if transport_bytes.len() < 20 {
                return None;
            }
            let sport = u16::from_be_bytes([transport_bytes[0], transport_bytes[1]]);
            let dport = u16::from_be_bytes([transport_bytes[2], transport_bytes[3]]);
            let data_offset = ((transport_bytes[12] >> 4) as usize) * 4;
            if data_offset < 20 || ip_payload_len < data_offset {
                return None;
            }
            let payload_len = ip_payload_len - data_offset;
            let payload = transport_bytes.get(data_offset..).unwrap_or(&[]);
            (Transport::Tcp, Some(sport), Some(dport), payload_len, payload)
        }
        17 => {
            if transport_bytes.len() < 8 {
                return None;
            }
            let sport = u16::from_be_bytes([transport_bytes[0], transport_bytes[1]]);
            let dport = u16::from_be_bytes([transport_bytes[2], transport_bytes[3]]);
            let udp_len = u16::from_be_bytes([transport_bytes[4], transport_bytes[5]]) as usize;
            if udp_len < 8 {
                return None;
            }
            let payload = transport_bytes.get(8..).unwrap_or(&[]);
            (Transport::Udp, Some(sport), Some(dport), udp_len - 8, payload)
        }
        _ => (Transport::Other, None, None, ip_payload_len, &[][..]),
    };

    let is_tls = transport == Transport::Tcp
        && payload_len >= 2
        && payload.len() >= 2
        && (20..=23).contains(&payload[0])
        && payload[1] == 3;

    let dns_payload = if transport == Transport::Udp && src_port == Some(DNS_PORT) {
        Some(payload.to_vec())
    } else {
        None
    };

    let record = PacketRecord {
        timestamp,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        transport,
        is_tls,
        size: orig_len,
        payload_len: payload_len as u32,
        direction,
    };
    Some((record, dns_payload))
}

/// Writes legacy pcap files (microsecond magic, little-endian, Ethernet).
pub struct PcapWriter {
    w: BufWriter<File>,
}

impl PcapWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC_US.to_le_bytes())?;
        w.write_all(&2u16.to_le_bytes())?; // version major
        w.write_all(&4u16.to_le_bytes())?; // version minor
        w.write_all(&0i32.to_le_bytes())?; // thiszone
        w.write_all(&0u32.to_le_bytes())?; // sigfigs
        w.write_all(&65535u32.to_le_bytes())?; // snaplen
        w.write_all(&1u32.to_le_bytes())?; // LINKTYPE_ETHERNET
        Ok(Self { w })
    }

    pub fn write_frame(&mut self, timestamp: f64, frame: &[u8]) -> std::io::Result<()> {
        let total_us = (timestamp * 1e6).round() as u64;
        let ts_sec = (total_us / 1_000_000) as u32;
        let ts_usec = (total_us % 1_000_000) as u32;
        self.w.write_all(&ts_sec.to_le_bytes())?;
        self.w.write_all(&ts_usec.to_le_bytes())?;
        self.w.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.w.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.w.write_all(frame)
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.w.flush()
    }
}

/// Transport-level description of a frame to synthesize.
#[derive(Debug, Clone)]
pub enum TransportSpec {
    Tcp {
        src_port: u16,
        dst_port: u16,
        payload: Vec<u8>,
    },
    Udp {
        src_port: u16,
        dst_port: u16,
        payload: Vec<u8>,
    },
}

/// IPv4 frame description for fixture and synthetic-traffic generation.
#[derive(Debug, Clone)]
pub struct FrameSpec {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub transport: TransportSpec,
}

/// Builds the raw Ethernet/IPv4 frame bytes for a [`FrameSpec`].
/// Checksums are left zero; the parser does not verify them.
pub fn ethernet_frame(spec: &FrameSpec) -> Vec<u8> {
    let (proto, transport_header, payload): (u8, Vec<u8>, &[u8]) = match &spec.transport {
        TransportSpec::Tcp {
            src_port,
            dst_port,
            payload,
        } => {
            let mut h = Vec::with_capacity(20);
            h.extend_from_slice(&src_port.to_be_bytes());
            h.extend_from_slice(&dst_port.to_be_bytes());
            h.extend_from_slice(&[0u8; 8]); // seq + ack
            h.push(5 << 4); // data offset = 5 words
            h.push(0x18); // PSH|ACK
            h.extend_from_slice(&[0u8; 6]); // window, checksum, urgent
            (6, h, payload)
        }
        TransportSpec::Udp {
            src_port,
            dst_port,
            payload,
        } => {
            let mut h = Vec::with_capacity(8);
            h.extend_from_slice(&src_port.to_be_bytes());
            h.extend_from_slice(&dst_port.to_be_bytes());
            h.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
            h.extend_from_slice(&[0u8; 2]); // checksum
            (17, h, payload)
        }
    };

    let total_len = 20 + transport_header.len() + payload.len();
    let mut frame = Vec::with_capacity(14 + total_len);
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]); // dst mac
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]); // src mac
    frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    frame.push(0x45); // version 4, ihl 5
    frame.push(0);
    frame.extend_from_slice(&(total_len as u16).to_be_bytes());
    frame.extend_from_slice(&[0u8; 4]); // id, flags, fragment offset
    frame.push(64); // ttl
    frame.push(proto);
    frame.extend_from_slice(&[0u8; 2]); // checksum
    frame.extend_from_slice(&spec.src.octets());
    frame.extend_from_slice(&spec.dst.octets());
    frame.extend_from_slice(&transport_header);
    frame.extend_from_slice(payload);
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn udp_to(dst: &str, payload_len: usize) -> FrameSpec {
        FrameSpec {
            src: "192.168.1.10".parse().unwrap(),
            dst: dst.parse().unwrap(),
            transport: TransportSpec::Udp {
                src_port: 50000,
                dst_port: 9999,
                payload: vec![0xab; payload_len],
            },
        }
    }

    fn write_capture(frames: &[(f64, Vec<u8>)]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempdir().unwrap();
        let path = dir.path().join("fixture.pcap");
        let mut w = PcapWriter::create(&path).unwrap();
        for (ts, frame) in frames {
            w.write_frame(*ts, frame).unwrap();
        }
        w.finish().unwrap();
        (dir, path)
    }

    #[test]
    fn three_udp_packets_uplink() {
        let frames: Vec<(f64, Vec<u8>)> = (0..3)
            .map(|i| (1.0 + i as f64, ethernet_frame(&udp_to("8.8.8.8", 32))))
            .collect();
        let (_dir, path) = write_capture(&frames);
        let parsed = parse_capture(&path, "dev", "192.168.1.10".parse().unwrap()).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert_eq!(parsed.malformed_frames, 0);
        for record in &parsed.records {
            assert_eq!(record.direction, Direction::Uplink);
            assert_eq!(record.transport, Transport::Udp);
            assert_eq!(record.payload_len, 32);
            assert_eq!(record.size, 14 + 20 + 8 + 32);
        }
    }

    #[test]
    fn empty_capture() {
        let (_dir, path) = write_capture(&[]);
        let parsed = parse_capture(&path, "dev", "192.168.1.10".parse().unwrap()).unwrap();
        assert!(parsed.records.is_empty());
        assert_eq!(parsed.frames, 0);
        assert_eq!(parsed.malformed_frames, 0);
    }

    #[test]
    fn tls_heuristic_first_payload_bytes() {
        // TLS handshake record header: content type 0x16, version major 0x03.
        let tls = FrameSpec {
            src: "192.168.1.10".parse().unwrap(),
            dst: "3.3.3.3".parse().unwrap(),
            transport: TransportSpec::Tcp {
                src_port: 40000,
                dst_port: 443,
                payload: vec![0x16, 0x03, 0x01, 0x00, 0x10],
            },
        };
        let plain = FrameSpec {
            transport: TransportSpec::Tcp {
                src_port: 40001,
                dst_port: 80,
                payload: b"GET / HTTP/1.1\r\n".to_vec(),
            },
            ..tls.clone()
        };
        let (_dir, path) = write_capture(&[
            (1.0, ethernet_frame(&tls)),
            (2.0, ethernet_frame(&plain)),
        ]);
        let parsed = parse_capture(&path, "dev", "192.168.1.10".parse().unwrap()).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert!(parsed.records[0].is_tls);
        assert!(!parsed.records[1].is_tls);
    }

    #[test]
    fn non_ip_frames_count_as_malformed() {
        let mut arp = vec![0u8; 42];
        arp[12] = 0x08;
        arp[13] = 0x06; // ARP ethertype
        let good = ethernet_frame(&udp_to("8.8.8.8", 8));
        let (_dir, path) = write_capture(&[(1.0, arp), (2.0, good), (3.0, vec![1, 2, 3])]);
        let parsed = parse_capture(&path, "dev", "192.168.1.10".parse().unwrap()).unwrap();
        assert_eq!(parsed.frames, 3);
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.malformed_frames, 2);
        assert_eq!(
            parsed.records.len() as u64 + parsed.malformed_frames,
            parsed.frames
        );
    }

    #[test]
    fn downlink_direction_and_ports() {
        let frame = FrameSpec {
            src: "8.8.4.4".parse().unwrap(),
            dst: "192.168.1.10".parse().unwrap(),
            transport: TransportSpec::Udp {
                src_port: 53,
                dst_port: 5353,
                payload: vec![0; 12],
            },
        };
        let (_dir, path) = write_capture(&[(1.0, ethernet_frame(&frame))]);
        let parsed = parse_capture(&path, "dev", "192.168.1.10".parse().unwrap()).unwrap();
        let record = &parsed.records[0];
        assert_eq!(record.direction, Direction::Downlink);
        assert_eq!(record.remote_ip(), "8.8.4.4");
        assert_eq!(record.local_port(), Some(5353));
        assert_eq!(record.remote_port(), Some(53));
        // Source port 53 means the payload was kept for DNS extraction.
        assert_eq!(parsed.dns_payloads.len(), 1);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bogus.pcap");
        std::fs::write(&path, vec![0u8; 64]).unwrap();
        let err = parse_capture(&path, "dev", "192.168.1.10".parse().unwrap()).unwrap_err();
        assert!(matches!(err, CaptureError::BadMagic { .. }));
    }

    #[test]
    fn microsecond_timestamps_survive() {
        let (_dir, path) = write_capture(&[(
            1700000000.123456,
            ethernet_frame(&udp_to("8.8.8.8", 4)),
        )]);
        let parsed = parse_capture(&path, "dev", "192.168.1.10".parse().unwrap()).unwrap();
        assert!((parsed.records[0].timestamp - 1700000000.123456).abs() < 1e-6);
    }
}
