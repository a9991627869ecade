//! Deployable rotation loop: every cycle, parse each device's rotated
//! capture, update its DNS table, featurize and classify every
//! (destination, window), majority-vote per destination, and turn
//! non-essential verdicts into persistent IP-block and DNS-override rules.
//!
//! Devices are processed by a pool of `workers` threads, one device per
//! worker, in sequential batches; blocklist and DNS-table updates happen in
//! a single-threaded reduction after each batch, so decisions come out in
//! deterministic (device, destination) order. A destination that is already
//! blocked is not re-evaluated; its rules persist (the blocklist only grows
//! within a run).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{
    extract_dns_table, parse_capture, CaptureError, DestinationKey, DestinationKind, DnsTable,
};
use crate::features::{
    compute_features, fit_normalization, normalize, window_packets, FeatureError,
    NormalizationProfile, ProfileSet, WINDOW_LENGTHS,
};
use crate::labeling::Label;
use crate::models::{Model, ModelError};
use crate::synth::{camera_stream_device, generate_stream_capture};

/// Rotation periods the runtime accepts, seconds.
pub const ROTATION_PERIODS: [u32; 5] = [60, 120, 180, 300, 600];

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid runtime config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("blocklist file {path} line {line}: malformed rule")]
    BadRule { path: String, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RuntimeError + '_ {
    move |source| RuntimeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Runtime configuration for the rotation loop.
#[derive(Debug, Clone)]
pub struct RotationConfig {
    pub rotation_secs: u32,
    pub window_secs: u32,
    pub capture_dir: PathBuf,
    /// device id -> local address.
    pub roster: BTreeMap<String, IpAddr>,
    pub workers: usize,
}

impl RotationConfig {
    /// Validates the config; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, RuntimeError> {
        if !ROTATION_PERIODS.contains(&self.rotation_secs) {
            return Err(RuntimeError::BadConfig(format!(
                "rotation period {}s not in {ROTATION_PERIODS:?}",
                self.rotation_secs
            )));
        }
        if !WINDOW_LENGTHS.contains(&self.window_secs) {
            return Err(RuntimeError::BadConfig(format!(
                "window {}s not in {WINDOW_LENGTHS:?}",
                self.window_secs
            )));
        }
        if self.window_secs > self.rotation_secs {
            return Err(RuntimeError::BadConfig(format!(
                "window {}s exceeds rotation period {}s",
                self.window_secs, self.rotation_secs
            )));
        }
        if self.workers == 0 {
            return Err(RuntimeError::BadConfig("workers must be >= 1".into()));
        }
        if self.roster.is_empty() {
            return Err(RuntimeError::BadConfig("empty device roster".into()));
        }
        let mut warnings = Vec::new();
        if self.rotation_secs % self.window_secs != 0 {
            warnings.push(format!(
                "rotation period {}s is not a multiple of window {}s; the last window of each file is truncated",
                self.rotation_secs, self.window_secs
            ));
        }
        Ok(warnings)
    }
}

/// Per-device block rules. Monotone within a run: rules are only added.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocklist {
    /// (device_id, ip)
    ip_rules: BTreeSet<(String, String)>,
    /// (device_id, domain)
    dns_overrides: BTreeSet<(String, String)>,
}

impl Blocklist {
    pub fn block_ip(&mut self, device_id: &str, ip: &str) {
        self.ip_rules.insert((device_id.to_string(), ip.to_string()));
    }

    pub fn block_domain(&mut self, device_id: &str, domain: &str) {
        self.dns_overrides
            .insert((device_id.to_string(), domain.to_string()));
    }

    pub fn is_blocked(&self, device_id: &str, destination: &DestinationKey) -> bool {
        let key = (device_id.to_string(), destination.value.clone());
        match destination.kind {
            DestinationKind::Domain => self.dns_overrides.contains(&key),
            DestinationKind::Ip => self.ip_rules.contains(&key),
        }
    }

    pub fn ip_rules(&self) -> impl Iterator<Item = &(String, String)> {
        self.ip_rules.iter()
    }

    pub fn dns_overrides(&self) -> impl Iterator<Item = &(String, String)> {
        self.dns_overrides.iter()
    }

    pub fn len(&self) -> usize {
        self.ip_rules.len() + self.dns_overrides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ip_rules.is_empty() && self.dns_overrides.is_empty()
    }

    pub fn is_superset(&self, other: &Blocklist) -> bool {
        self.ip_rules.is_superset(&other.ip_rules)
            && self.dns_overrides.is_superset(&other.dns_overrides)
    }

    pub fn clear(&mut self) {
        self.ip_rules.clear();
        self.dns_overrides.clear();
    }

    /// Writes `ipblock.rules` (`block <device_id> <ip>` lines) and
    /// `dns_override.conf` (`<device_id> <domain> 0.0.0.0` lines), sorted,
    /// atomically replacing previous files.
    pub fn emit(&self, out_dir: &Path) -> Result<(), RuntimeError> {
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let mut ip_text = String::new();
        for (device, ip) in &self.ip_rules {
            ip_text.push_str(&format!("block {device} {ip}\n"));
        }
        let mut dns_text = String::new();
        for (device, domain) in &self.dns_overrides {
            dns_text.push_str(&format!("{device} {domain} 0.0.0.0\n"));
        }
        atomic_write(&out_dir.join("ipblock.rules"), ip_text.as_bytes())?;
        atomic_write(&out_dir.join("dns_override.conf"), dns_text.as_bytes())?;
        Ok(())
    }

    /// Parses rule files back; missing files read as empty rule sets.
    pub fn load(out_dir: &Path) -> Result<Blocklist, RuntimeError> {
        let mut blocklist = Blocklist::default();
        let ip_path = out_dir.join("ipblock.rules");
        if ip_path.exists() {
            let text = std::fs::read_to_string(&ip_path).map_err(io_err(&ip_path))?;
            for (idx, line) in text.lines().enumerate() {
                let fields: Vec<&str> = line.split(' ').collect();
                if fields.len() != 3 || fields[0] != "block" {
                    return Err(RuntimeError::BadRule {
                        path: ip_path.display().to_string(),
                        line: idx + 1,
                    });
                }
                blocklist.block_ip(fields[1], fields[2]);
            }
        }
        let dns_path = out_dir.join("dns_override.conf");
        if dns_path.exists() {
            let text = std::fs::read_to_string(&dns_path).map_err(io_err(&dns_path))?;
            for (idx, line) in text.lines().enumerate() {
                let fields: Vec<&str> = line.split(' ').collect();
                if fields.len() != 3 || fields[2] != "0.0.0.0" {
                    return Err(RuntimeError::BadRule {
                        path: dns_path.display().to_string(),
                        line: idx + 1,
                    });
                }
                blocklist.block_domain(fields[0], fields[1]);
            }
        }
        Ok(blocklist)
    }
}

fn atomic_write(path: &Path, contents: &[u8]) -> Result<(), RuntimeError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// One per-destination verdict from a cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDecision {
    pub device_id: String,
    pub destination: DestinationKey,
    pub verdict: Label,
    pub essential_votes: u32,
    pub non_essential_votes: u32,
    pub cycle_index: u64,
    pub enforced: bool,
}

/// Majority vote over a destination's window predictions: blocked only on a
/// strict non-essential majority; ties stay essential (do not block).
pub fn majority_verdict(essential_votes: u32, non_essential_votes: u32) -> Label {
    if non_essential_votes > essential_votes {
        Label::NonEssential
    } else {
        Label::Essential
    }
}

/// Mutable state carried across cycles.
#[derive(Debug, Clone, Default)]
pub struct RuntimeState {
    pub blocklist: Blocklist,
    pub dns: BTreeMap<String, DnsTable>,
    pub cycle: u64,
    pub deadline_misses: u64,
}

impl RuntimeState {
    /// Records whether a finished cycle met the rotation deadline.
    pub fn note_cycle_duration(&mut self, duration: Duration, rotation_secs: u32) -> bool {
        let missed = duration.as_secs_f64() > rotation_secs as f64;
        if missed {
            self.deadline_misses += 1;
        }
        missed
    }
}

/// Everything a cycle produced.
#[derive(Debug)]
pub struct CycleOutcome {
    pub decisions: Vec<BlockDecision>,
    /// (device, reason) pairs for devices skipped this cycle.
    pub skipped_devices: Vec<(String, String)>,
    pub windows_evaluated: u64,
    pub duration: Duration,
}

struct DeviceWork {
    device_id: String,
    new_dns: Vec<crate::capture::DnsEntry>,
    /// destination -> (essential votes, non-essential votes)
    tallies: BTreeMap<DestinationKey, (u32, u32)>,
    windows: u64,
    skipped: Option<String>,
}

/// Processes one rotation cycle: capture files named
/// `<device_id>-<cycle>.pcap` in the capture directory, one per roster
/// device. Missing or unparseable files skip that device for the cycle.
pub fn run_cycle(
    config: &RotationConfig,
    model: &Model,
    profiles: &ProfileSet,
    state: &mut RuntimeState,
) -> Result<CycleOutcome, RuntimeError> {
    let started = Instant::now();
    let cycle = state.cycle;
    let devices: Vec<(String, IpAddr)> = config
        .roster
        .iter()
        .map(|(id, addr)| (id.clone(), *addr))
        .collect();

    let mut decisions = Vec::new();
    let mut skipped_devices = Vec::new();
    let mut windows_evaluated = 0;
    for batch in devices.chunks(config.workers.max(1)) {
        let mut batch_results: Vec<Option<Result<DeviceWork, RuntimeError>>> =
            (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (device_id, addr) in batch {
                let base_dns = state
                    .dns
                    .get(device_id)
                    .cloned()
                    .unwrap_or_else(|| DnsTable::new(device_id.clone()));
                let blocklist = &state.blocklist;
                handles.push(scope.spawn(move || {
                    process_device(config, model, profiles, blocklist, device_id, *addr, base_dns, cycle)
                }));
            }
            for (slot, handle) in batch_results.iter_mut().zip(handles) {
                *slot = Some(handle.join().expect("device worker panicked"));
            }
        });

        // Single-writer reduction after each batch, in roster order.
        for result in batch_results.into_iter().flatten() {
            let work = result?;
            if let Some(reason) = work.skipped {
                warn!("cycle {cycle}: skipping device {}: {reason}", work.device_id);
                skipped_devices.push((work.device_id, reason));
                continue;
            }
            windows_evaluated += work.windows;
            let table = state
                .dns
                .entry(work.device_id.clone())
                .or_insert_with(|| DnsTable::new(work.device_id.clone()));
            table.extend(work.new_dns);

            for (destination, (essential, non_essential)) in work.tallies {
                let verdict = majority_verdict(essential, non_essential);
                let enforced = verdict == Label::NonEssential;
                if enforced {
                    match destination.kind {
                        DestinationKind::Domain => {
                            state.blocklist.block_domain(&work.device_id, &destination.value);
                            for ip in table.ips_for_domain(&destination.value) {
                                state.blocklist.block_ip(&work.device_id, &ip);
                            }
                        }
                        DestinationKind::Ip => {
                            state.blocklist.block_ip(&work.device_id, &destination.value);
                        }
                    }
                }
                decisions.push(BlockDecision {
                    device_id: work.device_id.clone(),
                    destination,
                    verdict,
                    essential_votes: essential,
                    non_essential_votes: non_essential,
                    cycle_index: cycle,
                    enforced,
                });
            }
        }
    }

    state.cycle += 1;
    Ok(CycleOutcome {
        decisions,
        skipped_devices,
        windows_evaluated,
        duration: started.elapsed(),
    })
}

#[allow(clippy::too_many_arguments)]
fn process_device(
    config: &RotationConfig,
    model: &Model,
    profiles: &ProfileSet,
    blocklist: &Blocklist,
    device_id: &str,
    addr: IpAddr,
    base_dns: DnsTable,
    cycle: u64,
) -> Result<DeviceWork, RuntimeError> {
    let path = config.capture_dir.join(format!("{device_id}-{cycle}.pcap"));
    let mut work = DeviceWork {
        device_id: device_id.to_string(),
        new_dns: Vec::new(),
        tallies: BTreeMap::new(),
        windows: 0,
        skipped: None,
    };

    let capture = match parse_capture(&path, device_id, addr) {
        Ok(capture) => capture,
        Err(err) => {
            work.skipped = Some(err.to_string());
            return Ok(work);
        }
    };
    if capture.malformed_frames > 0 {
        debug!(
            "cycle {cycle}: device {device_id}: {} malformed frames",
            capture.malformed_frames
        );
    }

    let extract = extract_dns_table(&capture.dns_payloads, device_id);
    work.new_dns = extract.table.entries().to_vec();
    let mut table = base_dns;
    table.extend(work.new_dns.iter().cloned());

    let windows = window_packets(device_id, &capture.records, &table, config.window_secs)?;
    if windows.is_empty() {
        return Ok(work);
    }

    // Without a stored profile, fall back to bounds fitted on this cycle's
    // own vectors.
    let fallback: Option<NormalizationProfile> = if profiles.get(device_id).is_none() {
        let vectors: Vec<_> = windows.values().map(|p| compute_features(p)).collect();
        Some(fit_normalization(&vectors, device_id)?)
    } else {
        None
    };
    let profile = profiles
        .get(device_id)
        .or(fallback.as_ref())
        .expect("profile or fallback");

    for (key, packets) in &windows {
        if blocklist.is_blocked(device_id, &key.destination) {
            continue; // already enforced; traffic disappears once rules apply
        }
        let vector = normalize(&compute_features(packets), profile);
        let prediction = model.predict(&vector)?;
        work.windows += 1;
        let tally = work.tallies.entry(key.destination.clone()).or_insert((0, 0));
        match prediction.label {
            Label::Essential => tally.0 += 1,
            Label::NonEssential => tally.1 += 1,
        }
    }
    Ok(work)
}

/// Appends decisions as CSV
/// `cycle,device,destination,essential_votes,non_essential_votes,verdict,enforced`.
pub fn write_decisions_csv<W: Write>(
    mut w: W,
    decisions: &[BlockDecision],
    include_header: bool,
) -> std::io::Result<()> {
    if include_header {
        writeln!(
            w,
            "cycle,device,destination,essential_votes,non_essential_votes,verdict,enforced"
        )?;
    }
    for d in decisions {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            d.cycle_index,
            d.device_id,
            d.destination,
            d.essential_votes,
            d.non_essential_votes,
            d.verdict,
            d.enforced
        )?;
    }
    Ok(())
}

/// Scalability benchmark grid.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub rotations: Vec<u32>,
    pub workers: Vec<usize>,
    pub window_secs: u32,
    pub reps: u32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rotations: ROTATION_PERIODS.to_vec(),
            workers: vec![1, 2, 4, 8],
            window_secs: 60,
            reps: 3,
            seed: 0,
        }
    }
}

/// One benchmark measurement. `supported_devices` is exactly
/// `workers * repetitions` where `repetitions = floor(r / batch_secs)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub rotation_secs: u32,
    pub workers: usize,
    /// Mean per-device feature-extraction time (pcap -> vectors), seconds.
    pub t_f: f64,
    /// Mean per-device inference time over the file's windows, seconds.
    pub t_i: f64,
    /// Measured wall time of one `workers`-device concurrent batch.
    pub batch_secs: f64,
    pub repetitions: u64,
    pub supported_devices: u64,
}

/// Measures feature-extraction and inference times per rotation period on a
/// camera-grade synthetic capture, then batch times for each worker count.
pub fn benchmark_scalability(
    config: &BenchConfig,
    model: &Model,
    profiles: &ProfileSet,
    work_dir: &Path,
) -> Result<Vec<BenchRow>, RuntimeError> {
    std::fs::create_dir_all(work_dir).map_err(io_err(work_dir))?;
    let reps = config.reps.max(1);
    let mut rows = Vec::new();

    for &rotation in &config.rotations {
        let device = camera_stream_device("cam-bench", 0);
        let traffic = generate_stream_capture(&device, rotation, config.seed);
        let path = work_dir.join(format!("bench-r{rotation}.pcap"));
        traffic.write_pcap(&path).map_err(io_err(&path))?;

        let mut t_f_total = 0.0;
        let mut t_i_total = 0.0;
        for _ in 0..reps {
            let started = Instant::now();
            let capture = parse_capture(&path, &device.device_id, device.local_ip.into())?;
            let extract = extract_dns_table(&capture.dns_payloads, &device.device_id);
            let windows = window_packets(
                &device.device_id,
                &capture.records,
                &extract.table,
                config.window_secs,
            )?;
            let vectors: Vec<_> = windows.values().map(|p| compute_features(p)).collect();
            t_f_total += started.elapsed().as_secs_f64();

            let profile = match profiles.get(&device.device_id) {
                Some(profile) => profile.clone(),
                None => fit_normalization(&vectors, &device.device_id)?,
            };
            let started = Instant::now();
            for vector in &vectors {
                model.predict(&normalize(vector, &profile))?;
            }
            t_i_total += started.elapsed().as_secs_f64();
        }
        let t_f = t_f_total / reps as f64;
        let t_i = t_i_total / reps as f64;

        for &workers in &config.workers {
            let mut batch_total = 0.0;
            for _ in 0..reps {
                let started = Instant::now();
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..workers)
                        .map(|_| {
                            let path = path.clone();
                            let device = device.clone();
                            scope.spawn(move || -> Result<(), RuntimeError> {
                                let capture =
                                    parse_capture(&path, &device.device_id, device.local_ip.into())?;
                                let extract =
                                    extract_dns_table(&capture.dns_payloads, &device.device_id);
                                let windows = window_packets(
                                    &device.device_id,
                                    &capture.records,
                                    &extract.table,
                                    config.window_secs,
                                )?;
                                let vectors: Vec<_> =
                                    windows.values().map(|p| compute_features(p)).collect();
                                let profile = fit_normalization(&vectors, &device.device_id)?;
                                for vector in &vectors {
                                    model.predict(&normalize(vector, &profile))?;
                                }
                                Ok(())
                            })
                        })
                        .collect();
                    for handle in handles {
                        handle.join().expect("bench worker panicked")?;
                    }
                    Ok::<(), RuntimeError>(())
                })?;
                batch_total += started.elapsed().as_secs_f64();
            }
            let batch_secs = batch_total / reps as f64;
            let repetitions = (rotation as f64 / batch_secs).floor() as u64;
            rows.push(BenchRow {
                rotation_secs: rotation,
                workers,
                t_f,
                t_i,
                batch_secs,
                repetitions,
                supported_devices: workers as u64 * repetitions,
            });
        }
    }
    Ok(rows)
}

/// Benchmark CSV: `r,n,t_f,t_i,T,k,N`.
pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "r,n,t_f,t_i,T,k,N")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            row.rotation_secs,
            row.workers,
            row.t_f,
            row.t_i,
            row.batch_secs,
            row.repetitions,
            row.supported_devices
        )?;
    }
    Ok(())
}
