//! Synthetic device traffic for experiments, fixtures, and benchmarks.
//!
//! Each simulated device carries a set of destinations, each with a traffic
//! regime (packet sizes, interarrival times, protocol mix, direction bias)
//! and a ground-truth label. Essential destinations get small, chatty,
//! mostly-TLS control traffic; non-essential ones get bulkier telemetry and
//! ad-style uploads. One event stream backs both in-memory packet records
//! and on-disk pcap files, so the two paths stay byte-consistent.
//!
//! Devices "boot" once per simulated day: they re-resolve every active
//! domain in a burst and then run activity episodes at random times of day.
//! Destinations can be configured to first appear after a given day, which
//! feeds the unseen-destination experiment.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::capture::{
    build_dns_query, build_dns_response, ethernet_frame, Direction, DnsAnswer, DnsEntry,
    DnsTable, FrameSpec, PacketRecord, PcapWriter, Transport, TransportSpec,
};
use crate::features::{windowed_feature_rows, FeatureError};
use crate::labeling::{
    assign_labels, DefaultPolicy, DestinationLabel, Label, LabelSet, LabeledSample, Phase,
};

/// Base timestamp for synthetic captures; a multiple of 86400 so simulated
/// day boundaries line up with epoch midnights.
pub const SYNTH_EPOCH: u64 = 1_699_920_000;

const ETH_IP_UDP_OVERHEAD: u32 = 14 + 20 + 8;
const ETH_IP_TCP_OVERHEAD: u32 = 14 + 20 + 20;

/// Shape of one destination's traffic.
#[derive(Debug, Clone)]
pub struct TrafficRegime {
    pub mean_size: f64,
    pub size_std: f64,
    pub min_size: u32,
    pub max_size: u32,
    /// Packets per episode, inclusive bounds.
    pub burst_packets: (u32, u32),
    /// Mean interarrival time within an episode, seconds.
    pub mean_iat: f64,
    /// Episodes per simulated day, inclusive bounds.
    pub episodes_per_day: (u32, u32),
    pub uplink_fraction: f64,
    /// Fraction of packets carried over UDP instead of TCP.
    pub udp_fraction: f64,
    /// Fraction of TCP packets with a TLS record header.
    pub tls_fraction: f64,
    pub remote_port: u16,
}

/// Small, frequent, mostly-TLS command-and-control exchange.
pub fn control_regime() -> TrafficRegime {
    TrafficRegime {
        mean_size: 140.0,
        size_std: 35.0,
        min_size: 70,
        max_size: 400,
        burst_packets: (15, 40),
        mean_iat: 0.15,
        episodes_per_day: (3, 6),
        uplink_fraction: 0.55,
        udp_fraction: 0.05,
        tls_fraction: 0.9,
        remote_port: 443,
    }
}

/// Slow TLS keepalive channel.
pub fn keepalive_regime() -> TrafficRegime {
    TrafficRegime {
        mean_size: 110.0,
        size_std: 20.0,
        min_size: 66,
        max_size: 240,
        burst_packets: (8, 18),
        mean_iat: 0.35,
        episodes_per_day: (4, 8),
        uplink_fraction: 0.5,
        udp_fraction: 0.0,
        tls_fraction: 1.0,
        remote_port: 8883,
    }
}

/// Bulky UDP telemetry upload.
pub fn telemetry_regime() -> TrafficRegime {
    TrafficRegime {
        mean_size: 900.0,
        size_std: 150.0,
        min_size: 500,
        max_size: 1450,
        burst_packets: (6, 20),
        mean_iat: 1.2,
        episodes_per_day: (2, 5),
        uplink_fraction: 0.85,
        udp_fraction: 0.85,
        tls_fraction: 0.0,
        remote_port: 1900,
    }
}

/// Plain-TCP ad/analytics exchange.
pub fn ads_regime() -> TrafficRegime {
    TrafficRegime {
        mean_size: 700.0,
        size_std: 120.0,
        min_size: 400,
        max_size: 1300,
        burst_packets: (5, 14),
        mean_iat: 0.8,
        episodes_per_day: (2, 6),
        uplink_fraction: 0.75,
        udp_fraction: 0.25,
        tls_fraction: 0.0,
        remote_port: 8080,
    }
}

/// One remote endpoint of a synthetic device.
#[derive(Debug, Clone)]
pub struct SynthDestination {
    /// Domain name; `None` makes a bare-IP destination with no DNS.
    pub domain: Option<String>,
    pub ips: Vec<Ipv4Addr>,
    pub label: Label,
    pub regime: TrafficRegime,
    /// First simulated day (0-based) this destination is contacted.
    pub active_from_day: u32,
}

impl SynthDestination {
    pub fn key(&self) -> crate::capture::DestinationKey {
        match &self.domain {
            Some(domain) => crate::capture::DestinationKey::domain(domain.clone()),
            None => crate::capture::DestinationKey::ip(self.ips[0].to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDevice {
    pub device_id: String,
    pub local_ip: Ipv4Addr,
    pub gateway_ip: Ipv4Addr,
    /// Per-device multiplier on packet sizes; normalization absorbs it.
    pub size_scale: f64,
    pub destinations: Vec<SynthDestination>,
}

/// Everything generated for one device: normalized records, the ground
/// truth DNS table, and the raw events for pcap export.
#[derive(Debug, Clone)]
pub struct DeviceTraffic {
    pub device_id: String,
    pub local_ip: Ipv4Addr,
    pub records: Vec<PacketRecord>,
    pub dns: DnsTable,
    events: Vec<WireEvent>,
    gateway_ip: Ipv4Addr,
}

#[derive(Debug, Clone)]
struct WireEvent {
    t: f64,
    kind: WireKind,
}

#[derive(Debug, Clone)]
enum WireKind {
    Data {
        udp: bool,
        tls: bool,
        uplink: bool,
        size: u32,
        remote: Ipv4Addr,
        local_port: u16,
        remote_port: u16,
    },
    DnsQuery {
        id: u16,
        domain: String,
        local_port: u16,
    },
    DnsResponse {
        id: u16,
        domain: String,
        ips: Vec<Ipv4Addr>,
        local_port: u16,
    },
}

impl DeviceTraffic {
    /// Writes the event stream as a legacy pcap capture; parsing it back
    /// reproduces `records` (timestamps to microsecond precision).
    pub fn write_pcap(&self, path: &Path) -> std::io::Result<()> {
        let mut writer = PcapWriter::create(path)?;
        for event in &self.events {
            let frame = self.frame_for(event);
            writer.write_frame(event.t, &frame)?;
        }
        writer.finish()
    }

    fn frame_for(&self, event: &WireEvent) -> Vec<u8> {
        match &event.kind {
            WireKind::Data {
                udp,
                tls,
                uplink,
                size,
                remote,
                local_port,
                remote_port,
            } => {
                let overhead = if *udp { ETH_IP_UDP_OVERHEAD } else { ETH_IP_TCP_OVERHEAD };
                let payload_len = size.saturating_sub(overhead) as usize;
                let mut payload = vec![0x41u8; payload_len];
                if *tls && payload_len >= 2 {
                    payload[0] = 0x17; // TLS application-data record
                    payload[1] = 0x03;
                }
                let (src, dst, sport, dport) = if *uplink {
                    (self.local_ip, *remote, *local_port, *remote_port)
                } else {
                    (*remote, self.local_ip, *remote_port, *local_port)
                };
                let transport = if *udp {
                    TransportSpec::Udp {
                        src_port: sport,
                        dst_port: dport,
                        payload,
                    }
                } else {
                    TransportSpec::Tcp {
                        src_port: sport,
                        dst_port: dport,
                        payload,
                    }
                };
                ethernet_frame(&FrameSpec {
                    src,
                    dst,
                    transport,
                })
            }
            WireKind::DnsQuery {
                id,
                domain,
                local_port,
            } => ethernet_frame(&FrameSpec {
                src: self.local_ip,
                dst: self.gateway_ip,
                transport: TransportSpec::Udp {
                    src_port: *local_port,
                    dst_port: 53,
                    payload: build_dns_query(*id, domain),
                },
            }),
            WireKind::DnsResponse {
                id,
                domain,
                ips,
                local_port,
            } => {
                let answers: Vec<DnsAnswer> = ips
                    .iter()
                    .map(|ip| DnsAnswer::A {
                        name: domain.clone(),
                        addr: *ip,
                    })
                    .collect();
                ethernet_frame(&FrameSpec {
                    src: self.gateway_ip,
                    dst: self.local_ip,
                    transport: TransportSpec::Udp {
                        src_port: 53,
                        dst_port: *local_port,
                        payload: build_dns_response(*id, domain, &answers),
                    },
                })
            }
        }
    }
}

fn record_for(event: &WireEvent, device: &SynthDevice) -> PacketRecord {
    match &event.kind {
        WireKind::Data {
            udp,
            tls,
            uplink,
            size,
            remote,
            local_port,
            remote_port,
        } => {
            let overhead = if *udp { ETH_IP_UDP_OVERHEAD } else { ETH_IP_TCP_OVERHEAD };
            let payload_len = size.saturating_sub(overhead);
            let (src_ip, dst_ip, src_port, dst_port) = if *uplink {
                (
                    device.local_ip.to_string(),
                    remote.to_string(),
                    *local_port,
                    *remote_port,
                )
            } else {
                (
                    remote.to_string(),
                    device.local_ip.to_string(),
                    *remote_port,
                    *local_port,
                )
            };
            PacketRecord {
                timestamp: event.t,
                src_ip,
                dst_ip,
                src_port: Some(src_port),
                dst_port: Some(dst_port),
                transport: if *udp { Transport::Udp } else { Transport::Tcp },
                is_tls: !*udp && *tls && payload_len >= 2,
                size: *size,
                payload_len,
                direction: if *uplink {
                    Direction::Uplink
                } else {
                    Direction::Downlink
                },
            }
        }
        WireKind::DnsQuery {
            id,
            domain,
            local_port,
        } => {
            let len = build_dns_query(*id, domain).len() as u32;
            PacketRecord {
                timestamp: event.t,
                src_ip: device.local_ip.to_string(),
                dst_ip: device.gateway_ip.to_string(),
                src_port: Some(*local_port),
                dst_port: Some(53),
                transport: Transport::Udp,
                is_tls: false,
                size: ETH_IP_UDP_OVERHEAD + len,
                payload_len: len,
                direction: Direction::Uplink,
            }
        }
        WireKind::DnsResponse {
            id,
            domain,
            ips,
            local_port,
        } => {
            let answers: Vec<DnsAnswer> = ips
                .iter()
                .map(|ip| DnsAnswer::A {
                    name: domain.clone(),
                    addr: *ip,
                })
                .collect();
            let len = build_dns_response(*id, domain, &answers).len() as u32;
            PacketRecord {
                timestamp: event.t,
                src_ip: device.gateway_ip.to_string(),
                dst_ip: device.local_ip.to_string(),
                src_port: Some(53),
                dst_port: Some(*local_port),
                transport: Transport::Udp,
                is_tls: false,
                size: ETH_IP_UDP_OVERHEAD + len,
                payload_len: len,
                direction: Direction::Downlink,
            }
        }
    }
}

fn round_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

/// Generates one device's traffic over `days` simulated days starting at
/// [`SYNTH_EPOCH`]. Deterministic for a given (device, days, seed).
pub fn generate_device_traffic(device: &SynthDevice, days: u32, seed: u64) -> DeviceTraffic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events: Vec<WireEvent> = Vec::new();
    let mut dns_entries: Vec<DnsEntry> = Vec::new();

    for day in 0..days {
        let day_start = (SYNTH_EPOCH + day as u64 * 86_400) as f64;
        let day_end = day_start + 86_400.0;

        // Boot-time DNS burst for every destination active today.
        let mut t = day_start + 20.0 + rng.random::<f64>() * 30.0;
        for destination in &device.destinations {
            if destination.active_from_day > day {
                continue;
            }
            let Some(domain) = &destination.domain else {
                continue;
            };
            let id: u16 = rng.random();
            let local_port: u16 = rng.random_range(49152..65535);
            let t_query = round_us(t);
            let t_resp = round_us(t + 0.015 + rng.random::<f64>() * 0.02);
            events.push(WireEvent {
                t: t_query,
                kind: WireKind::DnsQuery {
                    id,
                    domain: domain.clone(),
                    local_port,
                },
            });
            events.push(WireEvent {
                t: t_resp,
                kind: WireKind::DnsResponse {
                    id,
                    domain: domain.clone(),
                    ips: destination.ips.clone(),
                    local_port,
                },
            });
            for ip in &destination.ips {
                dns_entries.push(DnsEntry {
                    query_time: t_resp,
                    ip: ip.to_string(),
                    domain: domain.clone(),
                });
            }
            t += 0.4 + rng.random::<f64>() * 0.4;
        }

        // Activity episodes.
        for destination in &device.destinations {
            if destination.active_from_day > day {
                continue;
            }
            let regime = &destination.regime;
            let episodes =
                rng.random_range(regime.episodes_per_day.0..=regime.episodes_per_day.1);
            let size_dist = Normal::new(
                regime.mean_size * device.size_scale,
                regime.size_std * device.size_scale,
            )
            .expect("valid size distribution");
            let iat_dist = Exp::new(1.0 / regime.mean_iat).expect("valid iat distribution");
            for _ in 0..episodes {
                let mut t = day_start + 120.0 + rng.random::<f64>() * (86_400.0 - 400.0);
                let packets = rng.random_range(regime.burst_packets.0..=regime.burst_packets.1);
                let local_port: u16 = rng.random_range(49152..65535);
                for _ in 0..packets {
                    if t >= day_end - 1.0 {
                        break;
                    }
                    let udp = rng.random::<f64>() < regime.udp_fraction;
                    let tls = !udp && rng.random::<f64>() < regime.tls_fraction;
                    let uplink = rng.random::<f64>() < regime.uplink_fraction;
                    let overhead = if udp { ETH_IP_UDP_OVERHEAD } else { ETH_IP_TCP_OVERHEAD };
                    let size = (size_dist.sample(&mut rng) as i64)
                        .clamp(regime.min_size.max(overhead + 4) as i64, regime.max_size as i64)
                        as u32;
                    let remote =
                        destination.ips[rng.random_range(0..destination.ips.len())];
                    events.push(WireEvent {
                        t: round_us(t),
                        kind: WireKind::Data {
                            udp,
                            tls,
                            uplink,
                            size,
                            remote,
                            local_port,
                            remote_port: regime.remote_port,
                        },
                    });
                    t += iat_dist.sample(&mut rng);
                }
            }
        }
    }

    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let records = events.iter().map(|e| record_for(e, device)).collect();
    DeviceTraffic {
        device_id: device.device_id.clone(),
        local_ip: device.local_ip,
        records,
        dns: DnsTable::from_entries(&device.device_id, dns_entries),
        events,
        gateway_ip: device.gateway_ip,
    }
}

/// Fleet config for the bundled eight-device generator.
#[derive(Debug, Clone)]
pub struct FleetConfig {
    pub days: u32,
    pub seed: u64,
    /// Extra non-essential destinations that first appear at
    /// `late_from_day`, spread round-robin over the fleet.
    pub late_non_essential: u32,
    pub late_from_day: u32,
}

impl FleetConfig {
    pub fn new(days: u32, seed: u64) -> Self {
        Self {
            days,
            seed,
            late_non_essential: 0,
            late_from_day: 0,
        }
    }

    pub fn with_late_destinations(mut self, count: u32, from_day: u32) -> Self {
        self.late_non_essential = count;
        self.late_from_day = from_day;
        self
    }
}

/// Generated fleet traffic plus the ground-truth label set.
#[derive(Debug, Clone)]
pub struct FleetTraffic {
    pub devices: Vec<DeviceTraffic>,
    pub labels: LabelSet,
    pub specs: Vec<SynthDevice>,
}

struct IpAllocator(u32);

impl IpAllocator {
    fn next_block(&mut self, count: usize) -> Vec<Ipv4Addr> {
        (0..count)
            .map(|_| {
                self.0 += 1;
                Ipv4Addr::new(
                    34,
                    (self.0 >> 16) as u8,
                    (self.0 >> 8) as u8,
                    (self.0 & 0xff) as u8,
                )
            })
            .collect()
    }
}

fn jitter(regime: &TrafficRegime, rng: &mut ChaCha8Rng) -> TrafficRegime {
    let mut r = regime.clone();
    r.mean_size *= 0.9 + rng.random::<f64>() * 0.2;
    r.mean_iat *= 0.85 + rng.random::<f64>() * 0.3;
    r
}

/// The bundled eight-device fleet: two identically-behaving speaker twins,
/// a camera, two bulbs, a plug, a hub, and a TV stick, each with essential
/// control destinations and a larger set of non-essential ones.
pub fn default_fleet(config: &FleetConfig) -> Vec<SynthDevice> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5f1e_e7);
    let mut ips = IpAllocator(0);
    // (id, size_scale, non-essential destinations)
    let plan: [(&str, f64, usize); 8] = [
        ("speaker-a", 1.0, 6),
        ("speaker-b", 1.05, 6),
        ("camera-a", 1.3, 7),
        ("bulb-a", 0.8, 4),
        ("bulb-b", 0.85, 4),
        ("plug-a", 0.9, 4),
        ("hub-a", 1.0, 5),
        ("tv-stick-a", 1.15, 9),
    ];

    let mut devices = Vec::new();
    for (idx, (id, scale, n_non_essential)) in plan.into_iter().enumerate() {
        let mut destinations = Vec::new();
        destinations.push(SynthDestination {
            domain: Some(format!("ctrl.{id}.synth")),
            ips: ips.next_block(2),
            label: Label::Essential,
            regime: jitter(&control_regime(), &mut rng),
            active_from_day: 0,
        });
        destinations.push(SynthDestination {
            domain: Some(format!("keepalive.{id}.synth")),
            ips: ips.next_block(1),
            label: Label::Essential,
            regime: jitter(&keepalive_regime(), &mut rng),
            active_from_day: 0,
        });
        for i in 0..n_non_essential {
            let (domain, regime) = if i % 2 == 0 {
                (Some(format!("telemetry{i}.{id}.synth")), telemetry_regime())
            } else {
                (Some(format!("ads{i}.{id}.synth")), ads_regime())
            };
            // One bare-IP endpoint per device keeps IP-keyed paths exercised.
            let domain = if i == 1 { None } else { domain };
            destinations.push(SynthDestination {
                domain,
                ips: ips.next_block(if i % 3 == 0 { 2 } else { 1 }),
                label: Label::NonEssential,
                regime: jitter(&regime, &mut rng),
                active_from_day: 0,
            });
        }
        devices.push(SynthDevice {
            device_id: id.to_string(),
            local_ip: Ipv4Addr::new(192, 168, 1, 10 + idx as u8),
            gateway_ip: Ipv4Addr::new(192, 168, 1, 1),
            size_scale: scale,
            destinations,
        });
    }

    // Twin devices share behavior distributions but not endpoints.
    let twin_regimes: Vec<TrafficRegime> = devices[0]
        .destinations
        .iter()
        .map(|d| d.regime.clone())
        .collect();
    for (destination, regime) in devices[1].destinations.iter_mut().zip(twin_regimes) {
        destination.regime = regime;
    }

    for late in 0..config.late_non_essential {
        let device = &mut devices[late as usize % 8];
        let id = device.device_id.clone();
        device.destinations.push(SynthDestination {
            domain: Some(format!("late{late}.{id}.synth")),
            ips: ips.next_block(1),
            label: Label::NonEssential,
            regime: jitter(&telemetry_regime(), &mut rng),
            active_from_day: config.late_from_day,
        });
    }

    devices
}

/// Ground-truth labels for a fleet: every configured destination plus the
/// gateway resolver address (essential for every device).
pub fn fleet_labels(devices: &[SynthDevice]) -> LabelSet {
    let mut labels = Vec::new();
    for device in devices {
        labels.push(DestinationLabel {
            device_id: device.device_id.clone(),
            destination: crate::capture::DestinationKey::ip(device.gateway_ip.to_string()),
            label: Label::Essential,
            phase: Phase::PowerOn,
        });
        for destination in &device.destinations {
            labels.push(DestinationLabel {
                device_id: device.device_id.clone(),
                destination: destination.key(),
                label: destination.label,
                phase: if destination.active_from_day == 0 {
                    Phase::PowerOn
                } else {
                    Phase::Activity
                },
            });
        }
    }
    LabelSet::from_labels(labels).expect("fleet destinations are unique")
}

/// Generates traffic for the whole fleet.
pub fn generate_fleet(config: &FleetConfig) -> FleetTraffic {
    let specs = default_fleet(config);
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let devices = specs
        .iter()
        .map(|device| generate_device_traffic(device, config.days, master.random()))
        .collect();
    FleetTraffic {
        labels: fleet_labels(&specs),
        devices,
        specs,
    }
}

/// Runs the real pipeline (window, featurize, label-join) over generated
/// traffic and returns the labeled dataset.
pub fn labeled_windows(
    fleet: &FleetTraffic,
    window_len: u32,
) -> Result<Vec<LabeledSample>, FeatureError> {
    let mut samples = Vec::new();
    for device in &fleet.devices {
        let rows = windowed_feature_rows(&device.device_id, &device.records, &device.dns, window_len)?;
        let outcome = assign_labels(rows, &fleet.labels, DefaultPolicy::Drop);
        debug_assert_eq!(outcome.dropped, 0, "every synthetic destination is labeled");
        samples.extend(outcome.rows);
    }
    Ok(samples)
}

/// Camera-grade streaming workload: a continuous TLS video push with ack
/// backflow and a low-rate telemetry side channel, roughly 210 packets per
/// second. Used by the scalability benchmark.
pub fn camera_stream_device(device_id: &str, index: u8) -> SynthDevice {
    let mut ips = IpAllocator(0xc0_0000 + index as u32 * 16);
    SynthDevice {
        device_id: device_id.to_string(),
        local_ip: Ipv4Addr::new(192, 168, 2, 10 + index),
        gateway_ip: Ipv4Addr::new(192, 168, 2, 1),
        size_scale: 1.0,
        destinations: vec![
            SynthDestination {
                domain: Some(format!("stream.{device_id}.synth")),
                ips: ips.next_block(2),
                label: Label::Essential,
                regime: TrafficRegime {
                    mean_size: 1100.0,
                    size_std: 130.0,
                    min_size: 400,
                    max_size: 1450,
                    burst_packets: (0, 0), // unused by the stream generator
                    mean_iat: 1.0 / 175.0,
                    episodes_per_day: (0, 0),
                    uplink_fraction: 0.8,
                    udp_fraction: 0.0,
                    tls_fraction: 1.0,
                    remote_port: 443,
                },
                active_from_day: 0,
            },
            SynthDestination {
                domain: Some(format!("telemetry.{device_id}.synth")),
                ips: ips.next_block(1),
                label: Label::NonEssential,
                regime: TrafficRegime {
                    mean_iat: 0.5,
                    ..telemetry_regime()
                },
                active_from_day: 0,
            },
        ],
    }
}

/// Generates a continuous capture of `duration_secs` for a streaming
/// device; packet volume scales linearly with the duration.
pub fn generate_stream_capture(device: &SynthDevice, duration_secs: u32, seed: u64) -> DeviceTraffic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    let mut dns_entries = Vec::new();
    let start = SYNTH_EPOCH as f64;
    let end = start + duration_secs as f64;

    let mut t = start + 0.2;
    for destination in &device.destinations {
        let Some(domain) = &destination.domain else { continue };
        let id: u16 = rng.random();
        let local_port: u16 = rng.random_range(49152..65535);
        let t_resp = round_us(t + 0.02);
        events.push(WireEvent {
            t: round_us(t),
            kind: WireKind::DnsQuery {
                id,
                domain: domain.clone(),
                local_port,
            },
        });
        events.push(WireEvent {
            t: t_resp,
            kind: WireKind::DnsResponse {
                id,
                domain: domain.clone(),
                ips: destination.ips.clone(),
                local_port,
            },
        });
        for ip in &destination.ips {
            dns_entries.push(DnsEntry {
                query_time: t_resp,
                ip: ip.to_string(),
                domain: domain.clone(),
            });
        }
        t += 0.3;
    }

    for destination in &device.destinations {
        let regime = &destination.regime;
        let size_dist = Normal::new(regime.mean_size, regime.size_std).expect("valid size dist");
        let iat_dist = Exp::new(1.0 / regime.mean_iat).expect("valid iat dist");
        let local_port: u16 = rng.random_range(49152..65535);
        let mut t = start + 1.0;
        while t < end {
            let udp = rng.random::<f64>() < regime.udp_fraction;
            let tls = !udp && rng.random::<f64>() < regime.tls_fraction;
            let uplink = rng.random::<f64>() < regime.uplink_fraction;
            let overhead = if udp { ETH_IP_UDP_OVERHEAD } else { ETH_IP_TCP_OVERHEAD };
            let size = if uplink {
                (size_dist.sample(&mut rng) as i64)
                    .clamp(regime.min_size.max(overhead + 4) as i64, regime.max_size as i64)
                    as u32
            } else {
                66 // ack-sized backflow
            };
            events.push(WireEvent {
                t: round_us(t),
                kind: WireKind::Data {
                    udp,
                    tls,
                    uplink,
                    size,
                    remote: destination.ips[rng.random_range(0..destination.ips.len())],
                    local_port,
                    remote_port: regime.remote_port,
                },
            });
            t += iat_dist.sample(&mut rng);
        }
    }

    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let records = events.iter().map(|e| record_for(e, device)).collect();
    DeviceTraffic {
        device_id: device.device_id.clone(),
        local_ip: device.local_ip,
        records,
        dns: DnsTable::from_entries(&device.device_id, dns_entries),
        events,
        gateway_ip: device.gateway_ip,
    }
}

/// Device roster (id -> local address) for a set of synthetic devices.
pub fn roster_of(devices: &[SynthDevice]) -> BTreeMap<String, std::net::IpAddr> {
    devices
        .iter()
        .map(|d| (d.device_id.clone(), std::net::IpAddr::V4(d.local_ip)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{extract_dns_table, parse_capture};
    use tempfile::tempdir;

    fn small_fleet_config() -> FleetConfig {
        FleetConfig::new(2, 11)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_fleet(&small_fleet_config());
        let b = generate_fleet(&small_fleet_config());
        for (da, db) in a.devices.iter().zip(&b.devices) {
            assert_eq!(da.records, db.records);
            assert_eq!(da.dns.entries(), db.dns.entries());
        }
    }

    #[test]
    fn pcap_round_trip_matches_records() {
        let fleet = generate_fleet(&FleetConfig::new(1, 3));
        let device = &fleet.devices[0];
        let dir = tempdir().unwrap();
        let path = dir.path().join("dev.pcap");
        device.write_pcap(&path).unwrap();

        let parsed = parse_capture(&path, &device.device_id, device.local_ip.into()).unwrap();
        assert_eq!(parsed.malformed_frames, 0);
        assert_eq!(parsed.records.len(), device.records.len());
        for (a, b) in parsed.records.iter().zip(&device.records) {
            assert!((a.timestamp - b.timestamp).abs() < 2e-6);
            assert_eq!(a.src_ip, b.src_ip);
            assert_eq!(a.dst_ip, b.dst_ip);
            assert_eq!(a.src_port, b.src_port);
            assert_eq!(a.dst_port, b.dst_port);
            assert_eq!(a.transport, b.transport);
            assert_eq!(a.is_tls, b.is_tls);
            assert_eq!(a.size, b.size);
            assert_eq!(a.payload_len, b.payload_len);
            assert_eq!(a.direction, b.direction);
        }

        // The DNS table recovered from the capture matches ground truth.
        let extract = extract_dns_table(&parsed.dns_payloads, &device.device_id);
        assert_eq!(extract.parse_errors, 0);
        assert_eq!(extract.table.entries().len(), device.dns.entries().len());
        for (a, b) in extract.table.entries().iter().zip(device.dns.entries()) {
            assert!((a.query_time - b.query_time).abs() < 2e-6);
            assert_eq!(a.ip, b.ip);
            assert_eq!(a.domain, b.domain);
        }
    }

    #[test]
    fn labeled_windows_cover_both_classes() {
        let fleet = generate_fleet(&small_fleet_config());
        let samples = labeled_windows(&fleet, 60).unwrap();
        assert!(!samples.is_empty());
        let essential = samples.iter().filter(|s| s.label == Label::Essential).count();
        let non_essential = samples.len() - essential;
        assert!(essential > 0);
        assert!(non_essential > 0);
        for sample in &samples {
            assert_eq!(sample.features.len(), crate::features::FEATURE_COUNT);
        }
    }

    #[test]
    fn late_destinations_appear_after_cutoff() {
        let config = FleetConfig::new(4, 5).with_late_destinations(8, 2);
        let fleet = generate_fleet(&config);
        let specs = &fleet.specs;
        let late: Vec<_> = specs
            .iter()
            .flat_map(|d| d.destinations.iter())
            .filter(|d| d.active_from_day > 0)
            .collect();
        assert_eq!(late.len(), 8);

        let samples = labeled_windows(&fleet, 60).unwrap();
        let cutoff = SYNTH_EPOCH + 2 * 86_400;
        for destination in late {
            let key = destination.key();
            let earliest = samples
                .iter()
                .filter(|s| s.key.destination == key)
                .map(|s| s.key.window_start)
                .min()
                .expect("late destination produced traffic");
            assert!(earliest >= cutoff);
        }
    }

    #[test]
    fn twins_share_regimes_but_not_endpoints() {
        let specs = default_fleet(&small_fleet_config());
        let a = &specs[0];
        let b = &specs[1];
        assert_eq!(a.destinations.len(), b.destinations.len());
        for (da, db) in a.destinations.iter().zip(&b.destinations) {
            assert_eq!(da.regime.mean_size, db.regime.mean_size);
            assert_eq!(da.regime.mean_iat, db.regime.mean_iat);
            assert_ne!(da.ips, db.ips);
        }
    }

    #[test]
    fn stream_capture_scales_with_duration() {
        let device = camera_stream_device("cam-bench", 0);
        let short = generate_stream_capture(&device, 10, 1);
        let long = generate_stream_capture(&device, 40, 1);
        assert!(long.records.len() > short.records.len() * 3);
        // Roughly 210 packets per second from both destinations.
        let rate = short.records.len() as f64 / 10.0;
        assert!(rate > 100.0 && rate < 400.0, "rate {rate}");
    }
}
