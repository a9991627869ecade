//! Minimal DNS wire-format parsing: enough to pull type-A answers out of
//! responses and map each address back to the originally queried name, so
//! CNAME chains collapse to the name the device actually asked for.

use std::net::Ipv4Addr;

use super::{DnsEntry, DnsPayload, DnsTable};

const TYPE_A: u16 = 1;
const TYPE_CNAME: u16 = 5;
const CLASS_IN: u16 = 1;
const MAX_POINTER_JUMPS: usize = 16;

/// DNS table extraction result with a parse-error tally for truncated or
/// undecodable responses.
#[derive(Debug)]
pub struct DnsExtract {
    pub table: DnsTable,
    pub parse_errors: u64,
}

/// Builds a [`DnsTable`] from captured DNS payloads: one entry per type-A
/// record in each response, timestamped with the response packet's time.
pub fn extract_dns_table(payloads: &[DnsPayload], device_id: &str) -> DnsExtract {
    let mut entries = Vec::new();
    let mut parse_errors = 0u64;
    for payload in payloads {
        match parse_response(&payload.data) {
            Ok(addresses) => {
                for ip in addresses {
                    entries.push(DnsEntry {
                        query_time: payload.timestamp,
                        ip: ip.1.to_string(),
                        domain: ip.0,
                    });
                }
            }
            Err(_) => parse_errors += 1,
        }
    }
    DnsExtract {
        table: DnsTable::from_entries(device_id, entries),
        parse_errors,
    }
}

struct Truncated;

/// Returns (queried name, address) for every A record in a response.
/// Messages with the QR bit clear (queries) yield nothing.
fn parse_response(data: &[u8]) -> Result<Vec<(String, Ipv4Addr)>, Truncated> {
    if data.len() < 12 {
        return Err(Truncated);
    }
    let flags = u16::from_be_bytes([data[2], data[3]]);
    if flags & 0x8000 == 0 {
        return Ok(Vec::new());
    }
    let qdcount = u16::from_be_bytes([data[4], data[5]]) as usize;
    let ancount = u16::from_be_bytes([data[6], data[7]]) as usize;
    if qdcount == 0 {
        return Ok(Vec::new());
    }

    let mut pos = 12;
    let (query_name, next) = read_name(data, pos)?;
    pos = next + 4; // qtype + qclass
    for _ in 1..qdcount {
        let (_, next) = read_name(data, pos)?;
        pos = next + 4;
    }

    let mut out = Vec::new();
    for _ in 0..ancount {
        let (_owner, next) = read_name(data, pos)?;
        pos = next;
        if pos + 10 > data.len() {
            return Err(Truncated);
        }
        let rtype = u16::from_be_bytes([data[pos], data[pos + 1]]);
        let rclass = u16::from_be_bytes([data[pos + 2], data[pos + 3]]);
        let rdlength = u16::from_be_bytes([data[pos + 8], data[pos + 9]]) as usize;
        pos += 10;
        if pos + rdlength > data.len() {
            return Err(Truncated);
        }
        if rtype == TYPE_A && rclass == CLASS_IN && rdlength == 4 {
            let addr = Ipv4Addr::new(data[pos], data[pos + 1], data[pos + 2], data[pos + 3]);
            out.push((query_name.clone(), addr));
        }
        pos += rdlength;
    }
    Ok(out)
}

/// Reads a possibly compressed name starting at `pos`; returns the
/// lowercased dotted name and the offset just past the name's inline bytes.
fn read_name(data: &[u8], mut pos: usize) -> Result<(String, usize), Truncated> {
    let mut labels: Vec<String> = Vec::new();
    let mut jumps = 0;
    let mut end = None;
    loop {
        let len = *data.get(pos).ok_or(Truncated)? as usize;
        if len == 0 {
            pos += 1;
            break;
        }
        if len & 0xc0 == 0xc0 {
            let lo = *data.get(pos + 1).ok_or(Truncated)? as usize;
            if end.is_none() {
                end = Some(pos + 2);
            }
            pos = ((len & 0x3f) << 8) | lo;
            jumps += 1;
            if jumps > MAX_POINTER_JUMPS {
                return Err(Truncated);
            }
            continue;
        }
        let label = data.get(pos + 1..pos + 1 + len).ok_or(Truncated)?;
        labels.push(String::from_utf8_lossy(label).to_ascii_lowercase());
        pos += 1 + len;
    }
    Ok((labels.join("."), end.unwrap_or(pos)))
}

/// Encodes a DNS type-A query message for fixtures and synthetic captures.
pub fn build_dns_query(id: u16, query_name: &str) -> Vec<u8> {
    let mut msg = Vec::new();
    msg.extend_from_slice(&id.to_be_bytes());
    msg.extend_from_slice(&0x0100u16.to_be_bytes()); // RD
    msg.extend_from_slice(&1u16.to_be_bytes()); // qdcount
    msg.extend_from_slice(&[0u8; 6]); // an/ns/ar counts
    write_name(&mut msg, query_name);
    msg.extend_from_slice(&TYPE_A.to_be_bytes());
    msg.extend_from_slice(&CLASS_IN.to_be_bytes());
    msg
}

/// One answer record for [`build_dns_response`].
#[derive(Debug, Clone)]
pub enum DnsAnswer {
    A { name: String, addr: Ipv4Addr },
    Cname { name: String, target: String },
}

/// Encodes a DNS response message (uncompressed names) for fixtures and
/// synthetic captures.
pub fn build_dns_response(id: u16, query_name: &str, answers: &[DnsAnswer]) -> Vec<u8> {
    let mut msg = Vec::new();
    msg.extend_from_slice(&id.to_be_bytes());
    msg.extend_from_slice(&0x8180u16.to_be_bytes()); // QR, RD, RA
    msg.extend_from_slice(&1u16.to_be_bytes()); // qdcount
    msg.extend_from_slice(&(answers.len() as u16).to_be_bytes());
    msg.extend_from_slice(&0u16.to_be_bytes()); // nscount
    msg.extend_from_slice(&0u16.to_be_bytes()); // arcount
    write_name(&mut msg, query_name);
    msg.extend_from_slice(&TYPE_A.to_be_bytes());
    msg.extend_from_slice(&CLASS_IN.to_be_bytes());
    for answer in answers {
        match answer {
            DnsAnswer::A { name, addr } => {
                write_name(&mut msg, name);
                msg.extend_from_slice(&TYPE_A.to_be_bytes());
                msg.extend_from_slice(&CLASS_IN.to_be_bytes());
                msg.extend_from_slice(&300u32.to_be_bytes()); // ttl
                msg.extend_from_slice(&4u16.to_be_bytes());
                msg.extend_from_slice(&addr.octets());
            }
            DnsAnswer::Cname { name, target } => {
                write_name(&mut msg, name);
                msg.extend_from_slice(&TYPE_CNAME.to_be_bytes());
                msg.extend_from_slice(&CLASS_IN.to_be_bytes());
                msg.extend_from_slice(&300u32.to_be_bytes());
                let mut rdata = Vec::new();
                write_name(&mut rdata, target);
                msg.extend_from_slice(&(rdata.len() as u16).to_be_bytes());
                msg.extend_from_slice(&rdata);
            }
        }
    }
    msg
}

fn write_name(buf: &mut Vec<u8>, name: &str) {
    for label in name.split('.').filter(|l| !l.is_empty()) {
        buf.push(label.len() as u8);
        buf.extend_from_slice(label.as_bytes());
    }
    buf.push(0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::DestinationKey;

    fn payload(t: f64, data: Vec<u8>) -> DnsPayload {
        DnsPayload { timestamp: t, data }
    }

    #[test]
    fn single_a_record() {
        let msg = build_dns_response(
            1,
            "example.iot.cloud",
            &[DnsAnswer::A {
                name: "example.iot.cloud".into(),
                addr: "1.2.3.4".parse().unwrap(),
            }],
        );
        let extract = extract_dns_table(&[payload(10.0, msg)], "dev");
        assert_eq!(extract.parse_errors, 0);
        let entries = extract.table.entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].query_time, 10.0);
        assert_eq!(entries[0].ip, "1.2.3.4");
        assert_eq!(entries[0].domain, "example.iot.cloud");
    }

    #[test]
    fn two_a_records_same_name() {
        let msg = build_dns_response(
            2,
            "multi.example",
            &[
                DnsAnswer::A {
                    name: "multi.example".into(),
                    addr: "1.1.1.1".parse().unwrap(),
                },
                DnsAnswer::A {
                    name: "multi.example".into(),
                    addr: "2.2.2.2".parse().unwrap(),
                },
            ],
        );
        let extract = extract_dns_table(&[payload(5.0, msg)], "dev");
        let entries = extract.table.entries();
        assert_eq!(entries.len(), 2);
        assert!(entries.iter().all(|e| e.domain == "multi.example"));
        assert!(entries.iter().all(|e| e.query_time == 5.0));
    }

    #[test]
    fn no_dns_packets() {
        let extract = extract_dns_table(&[], "dev");
        assert!(extract.table.is_empty());
        assert_eq!(extract.parse_errors, 0);
    }

    #[test]
    fn truncated_payload_counted() {
        let good = build_dns_response(
            3,
            "ok.example",
            &[DnsAnswer::A {
                name: "ok.example".into(),
                addr: "9.9.9.9".parse().unwrap(),
            }],
        );
        let mut bad = good.clone();
        bad.truncate(20);
        let extract = extract_dns_table(&[payload(1.0, bad), payload(2.0, good)], "dev");
        assert_eq!(extract.parse_errors, 1);
        assert_eq!(extract.table.entries().len(), 1);
    }

    #[test]
    fn cname_chain_collapses_to_query_name() {
        let msg = build_dns_response(
            4,
            "shop.example",
            &[
                DnsAnswer::Cname {
                    name: "shop.example".into(),
                    target: "edge.cdn.example".into(),
                },
                DnsAnswer::A {
                    name: "edge.cdn.example".into(),
                    addr: "7.7.7.7".parse().unwrap(),
                },
            ],
        );
        let extract = extract_dns_table(&[payload(3.0, msg)], "dev");
        let entries = extract.table.entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].domain, "shop.example");
        assert_eq!(
            extract.table.resolve("7.7.7.7", 4.0),
            DestinationKey::domain("shop.example")
        );
    }

    #[test]
    fn queries_are_ignored() {
        // Same layout as a response but with the QR bit clear.
        let mut msg = build_dns_response(5, "q.example", &[]);
        msg[2] = 0;
        msg[3] = 0;
        let extract = extract_dns_table(&[payload(1.0, msg)], "dev");
        assert!(extract.table.is_empty());
        assert_eq!(extract.parse_errors, 0);
    }

    #[test]
    fn compressed_names_parse() {
        // Hand-built response using a pointer for the answer owner name.
        let mut msg = Vec::new();
        msg.extend_from_slice(&7u16.to_be_bytes());
        msg.extend_from_slice(&0x8180u16.to_be_bytes());
        msg.extend_from_slice(&1u16.to_be_bytes());
        msg.extend_from_slice(&1u16.to_be_bytes());
        msg.extend_from_slice(&[0, 0, 0, 0]);
        let name_offset = msg.len() as u16;
        write_name(&mut msg, "ptr.example");
        msg.extend_from_slice(&TYPE_A.to_be_bytes());
        msg.extend_from_slice(&CLASS_IN.to_be_bytes());
        msg.extend_from_slice(&(0xc000u16 | name_offset).to_be_bytes());
        msg.extend_from_slice(&TYPE_A.to_be_bytes());
        msg.extend_from_slice(&CLASS_IN.to_be_bytes());
        msg.extend_from_slice(&60u32.to_be_bytes());
        msg.extend_from_slice(&4u16.to_be_bytes());
        msg.extend_from_slice(&[10, 0, 0, 1]);

        let extract = extract_dns_table(&[payload(8.0, msg)], "dev");
        let entries = extract.table.entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].domain, "ptr.example");
        assert_eq!(entries[0].ip, "10.0.0.1");
    }
}
