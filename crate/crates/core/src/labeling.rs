//! Ground-truth labels for destinations and the block-and-probe consensus
//! procedure that produces them against simulated devices.
//!
//! Each consensus iteration visits a device's destinations in sorted order
//! with a blocked set that persists within the iteration: the candidate is
//! blocked, every device function is probed, and if all probes pass the
//! destination gets a non-essential vote and stays blocked; any failing
//! probe votes essential and unblocks it. Iterations repeat (at least 30,
//! capped) until every destination's majority side reaches 80% of the
//! iterations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::DestinationKey;
use crate::features::{FeatureRow, FeatureVector, WindowKey};

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("device {device_id} has no destinations to test")]
    NoDestinations { device_id: String },
    #[error("probe flakiness {0} out of range [0, 0.2)")]
    FlakinessOutOfRange(f64),
    #[error("function {function} requires destinations outside the device's set")]
    UnknownRequiredDestination { function: String },
    #[error(
        "no consensus for device {device_id} after {iterations} iterations; unresolved: {unresolved:?}"
    )]
    ConsensusUnreachable {
        device_id: String,
        iterations: u32,
        unresolved: Vec<String>,
    },
    #[error("conflicting label for {device_id}/{destination}")]
    ConflictingLabel {
        device_id: String,
        destination: String,
    },
    #[error("malformed label CSV line {line}: {reason}")]
    BadCsvLine { line: usize, reason: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Ground-truth class of a destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Essential,
    NonEssential,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Essential => f.write_str("essential"),
            Label::NonEssential => f.write_str("non-essential"),
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "essential" => Ok(Label::Essential),
            "non-essential" | "non_essential" => Ok(Label::NonEssential),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Discovery step that produced a destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    PowerOn,
    Activity,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::PowerOn => f.write_str("power-on"),
            Phase::Activity => f.write_str("activity"),
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "power-on" | "power_on" => Ok(Phase::PowerOn),
            "activity" => Ok(Phase::Activity),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

/// One labeled destination for one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DestinationLabel {
    pub device_id: String,
    pub destination: DestinationKey,
    pub label: Label,
    pub phase: Phase,
}

/// A feature row with its ground-truth label attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub key: WindowKey,
    pub features: FeatureVector,
    pub label: Label,
}

impl LabeledSample {
    pub fn device_id(&self) -> &str {
        &self.key.device_id
    }

    pub fn with_features(&self, features: FeatureVector) -> Self {
        Self {
            key: self.key.clone(),
            features,
            label: self.label,
        }
    }
}

/// Destination labels indexed by (device, destination); at most one label
/// per pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: BTreeMap<(String, DestinationKey), DestinationLabel>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: DestinationLabel) -> Result<(), LabelingError> {
        let key = (label.device_id.clone(), label.destination.clone());
        if let Some(existing) = self.labels.get(&key) {
            if existing.label != label.label {
                return Err(LabelingError::ConflictingLabel {
                    device_id: label.device_id,
                    destination: label.destination.value,
                });
            }
            return Ok(());
        }
        self.labels.insert(key, label);
        Ok(())
    }

    pub fn from_labels(
        labels: impl IntoIterator<Item = DestinationLabel>,
    ) -> Result<Self, LabelingError> {
        let mut set = Self::new();
        for label in labels {
            set.insert(label)?;
        }
        Ok(set)
    }

    pub fn get(&self, device_id: &str, destination: &DestinationKey) -> Option<Label> {
        self.labels
            .get(&(device_id.to_string(), destination.clone()))
            .map(|l| l.label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DestinationLabel> {
        self.labels.values()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (essential, non-essential) destination counts for one device.
    pub fn counts_for(&self, device_id: &str) -> (usize, usize) {
        let mut essential = 0;
        let mut non_essential = 0;
        for label in self.labels.values().filter(|l| l.device_id == device_id) {
            match label.label {
                Label::Essential => essential += 1,
                Label::NonEssential => non_essential += 1,
            }
        }
        (essential, non_essential)
    }

    /// CSV lines `device,destination,label,phase`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "device,destination,label,phase")?;
        for label in self.labels.values() {
            writeln!(
                w,
                "{},{},{},{}",
                label.device_id, label.destination, label.label, label.phase
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, LabelingError> {
        let mut set = Self::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line.map_err(|source| LabelingError::Io {
                path: "<csv>".into(),
                source,
            })?;
            if idx == 0 || line.is_empty() {
                continue;
            }
            let bad = |reason: String| LabelingError::BadCsvLine {
                line: idx + 1,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", fields.len())));
            }
            set.insert(DestinationLabel {
                device_id: fields[0].to_string(),
                destination: DestinationKey::parse(fields[1]),
                label: fields[2].parse().map_err(bad)?,
                phase: fields[3].parse().map_err(bad)?,
            })?;
        }
        Ok(set)
    }
}

/// A device model for consensus labeling: which destinations each function
/// needs, and how often a probe misreports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatedDevice {
    pub device_id: String,
    pub functions: BTreeSet<String>,
    /// Function id -> destinations whose blockage breaks it.
    pub requires: BTreeMap<String, BTreeSet<DestinationKey>>,
    pub all_destinations: BTreeSet<DestinationKey>,
    /// Probability in [0, 0.2) that a probe reports the wrong outcome.
    pub probe_flakiness: f64,
}

impl SimulatedDevice {
    pub fn validate(&self) -> Result<(), LabelingError> {
        if self.all_destinations.is_empty() {
            return Err(LabelingError::NoDestinations {
                device_id: self.device_id.clone(),
            });
        }
        if !(0.0..0.2).contains(&self.probe_flakiness) {
            return Err(LabelingError::FlakinessOutOfRange(self.probe_flakiness));
        }
        for (function, destinations) in &self.requires {
            if !destinations.is_subset(&self.all_destinations) {
                return Err(LabelingError::UnknownRequiredDestination {
                    function: function.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Consensus loop bounds. The threshold is the fraction of iterations a
/// destination's majority side must reach.
#[derive(Debug, Clone)]
pub struct ConsensusConfig {
    pub min_iterations: u32,
    pub max_iterations: u32,
    pub consensus_threshold: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            min_iterations: 30,
            max_iterations: 200,
            consensus_threshold: 0.8,
        }
    }
}

/// Result of a consensus run: final labels plus the per-destination vote
/// tallies behind them.
#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub device_id: String,
    pub labels: Vec<DestinationLabel>,
    /// destination -> (essential votes, non-essential votes).
    pub tallies: BTreeMap<DestinationKey, (u32, u32)>,
    pub iterations: u32,
}

impl ConsensusOutcome {
    pub fn label_set(&self) -> Result<LabelSet, LabelingError> {
        LabelSet::from_labels(self.labels.iter().cloned())
    }

    /// CSV lines `device,destination,essential_votes,non_essential_votes,iterations`.
    pub fn write_report_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "device,destination,essential_votes,non_essential_votes,iterations"
        )?;
        for (destination, (essential, non_essential)) in &self.tallies {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.device_id, destination, essential, non_essential, self.iterations
            )?;
        }
        Ok(())
    }
}

/// Runs the block-and-probe consensus loop against one simulated device.
///
/// Deterministic for a given (device, seed); with zero flakiness the labels
/// do not depend on the seed at all.
pub fn run_consensus_labeling(
    device: &SimulatedDevice,
    seed: u64,
    config: &ConsensusConfig,
) -> Result<ConsensusOutcome, LabelingError> {
    device.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let destinations: Vec<&DestinationKey> = device.all_destinations.iter().collect();
    let mut tallies: BTreeMap<DestinationKey, (u32, u32)> = destinations
        .iter()
        .map(|d| ((*d).clone(), (0, 0)))
        .collect();

    let mut iterations = 0u32;
    loop {
        let votes = run_iteration(device, &destinations, &mut rng);
        iterations += 1;
        for (destination, vote) in votes {
            let tally = tallies.get_mut(&destination).expect("tallied destination");
            match vote {
                Label::Essential => tally.0 += 1,
                Label::NonEssential => tally.1 += 1,
            }
        }

        if iterations >= config.min_iterations {
            let needed = config.consensus_threshold * iterations as f64 - 1e-9;
            let unresolved: Vec<String> = tallies
                .iter()
                .filter(|(_, (e, ne))| ((*e).max(*ne) as f64) < needed)
                .map(|(d, _)| d.value.clone())
                .collect();
            if unresolved.is_empty() {
                break;
            }
            if iterations >= config.max_iterations {
                return Err(LabelingError::ConsensusUnreachable {
                    device_id: device.device_id.clone(),
                    iterations,
                    unresolved,
                });
            }
        }
    }

    let labels = tallies
        .iter()
        .map(|(destination, (essential, non_essential))| DestinationLabel {
            device_id: device.device_id.clone(),
            destination: destination.clone(),
            label: if essential > non_essential {
                Label::Essential
            } else {
                Label::NonEssential
            },
            phase: Phase::Activity,
        })
        .collect();

    Ok(ConsensusOutcome {
        device_id: device.device_id.clone(),
        labels,
        tallies,
        iterations,
    })
}

/// One iteration over all destinations in sorted order with a persistent
/// blocked set. Returns each destination's vote; at the end of the
/// iteration the blocked set is exactly the non-essential-voted ones.
fn run_iteration(
    device: &SimulatedDevice,
    destinations: &[&DestinationKey],
    rng: &mut ChaCha8Rng,
) -> Vec<(DestinationKey, Label)> {
    let mut blocked: BTreeSet<&DestinationKey> = BTreeSet::new();
    let mut votes = Vec::with_capacity(destinations.len());
    for &candidate in destinations {
        blocked.insert(candidate);
        let mut all_ok = true;
        for function in &device.functions {
            let broken = device
                .requires
                .get(function)
                .is_some_and(|needs| needs.iter().any(|d| blocked.contains(d)));
            let mut probe_ok = !broken;
            if rng.random::<f64>() < device.probe_flakiness {
                probe_ok = !probe_ok;
            }
            if !probe_ok {
                all_ok = false;
            }
        }
        if all_ok {
            votes.push((candidate.clone(), Label::NonEssential));
        } else {
            blocked.remove(candidate);
            votes.push((candidate.clone(), Label::Essential));
        }
    }
    votes
}

/// Policy for feature rows whose destination carries no label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefaultPolicy {
    /// Exclude the row (training).
    Drop,
    /// Keep it labeled non-essential, counted as unknown (runtime reporting).
    NonEssential,
}

/// Result of joining feature rows against a label set.
#[derive(Debug, Clone)]
pub struct AssignOutcome {
    pub rows: Vec<LabeledSample>,
    /// Rows excluded under [`DefaultPolicy::Drop`].
    pub dropped: u64,
    /// Rows defaulted under [`DefaultPolicy::NonEssential`].
    pub defaulted: u64,
}

/// Joins rows on (device, destination); unlabeled destinations follow the
/// default policy. `rows out + dropped == rows in`.
pub fn assign_labels(
    rows: Vec<FeatureRow>,
    labels: &LabelSet,
    default: DefaultPolicy,
) -> AssignOutcome {
    let mut out = Vec::with_capacity(rows.len());
    let mut dropped = 0u64;
    let mut defaulted = 0u64;
    for row in rows {
        let label = labels.get(&row.key.device_id, &row.key.destination);
        match (label, default) {
            (Some(label), _) => out.push(LabeledSample {
                key: row.key,
                features: row.features,
                label,
            }),
            (None, DefaultPolicy::Drop) => dropped += 1,
            (None, DefaultPolicy::NonEssential) => {
                defaulted += 1;
                out.push(LabeledSample {
                    key: row.key,
                    features: row.features,
                    label: Label::NonEssential,
                });
            }
        }
    }
    AssignOutcome {
        rows: out,
        dropped,
        defaulted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_features, FEATURE_COUNT};

    fn dest(value: &str) -> DestinationKey {
        DestinationKey::domain(value)
    }

    fn device(
        id: &str,
        destinations: &[&str],
        requires: &[(&str, &[&str])],
        flakiness: f64,
    ) -> SimulatedDevice {
        SimulatedDevice {
            device_id: id.into(),
            functions: requires.iter().map(|(f, _)| f.to_string()).collect(),
            requires: requires
                .iter()
                .map(|(f, needs)| (f.to_string(), needs.iter().map(|d| dest(d)).collect()))
                .collect(),
            all_destinations: destinations.iter().map(|d| dest(d)).collect(),
            probe_flakiness: flakiness,
        }
    }

    #[test]
    fn consensus_separates_required_destination() {
        let dev = device("cam", &["a", "b"], &[("f1", &["a"])], 0.0);
        let outcome = run_consensus_labeling(&dev, 1, &ConsensusConfig::default()).unwrap();
        assert_eq!(outcome.iterations, 30);
        let labels = outcome.label_set().unwrap();
        assert_eq!(labels.get("cam", &dest("a")), Some(Label::Essential));
        assert_eq!(labels.get("cam", &dest("b")), Some(Label::NonEssential));
        assert_eq!(outcome.tallies[&dest("a")], (30, 0));
        assert_eq!(outcome.tallies[&dest("b")], (0, 30));
    }

    #[test]
    fn consensus_all_non_essential_without_requirements() {
        let dev = device("plug", &["x", "y", "z"], &[("f1", &[]), ("f2", &[])], 0.0);
        let outcome = run_consensus_labeling(&dev, 1, &ConsensusConfig::default()).unwrap();
        for label in &outcome.labels {
            assert_eq!(label.label, Label::NonEssential);
        }
    }

    #[test]
    fn consensus_zero_flakiness_seed_independent() {
        let dev = device("hub", &["a", "b", "c"], &[("f", &["b"])], 0.0);
        let a = run_consensus_labeling(&dev, 1, &ConsensusConfig::default()).unwrap();
        let b = run_consensus_labeling(&dev, 999, &ConsensusConfig::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.tallies, b.tallies);
    }

    #[test]
    fn consensus_absorbs_flaky_probes() {
        let clean = device("tv", &["a", "b", "c", "d"], &[("f", &["a"])], 0.0);
        let flaky = device("tv", &["a", "b", "c", "d"], &[("f", &["a"])], 0.1);
        let clean_labels = run_consensus_labeling(&clean, 7, &ConsensusConfig::default())
            .unwrap()
            .label_set()
            .unwrap();
        let flaky_labels = run_consensus_labeling(&flaky, 7, &ConsensusConfig::default())
            .unwrap()
            .label_set()
            .unwrap();
        assert_eq!(clean_labels, flaky_labels);
    }

    #[test]
    fn consensus_blocked_set_matches_votes() {
        let dev = device("cam", &["a", "b", "c"], &[("f1", &["a", "c"])], 0.0);
        let destinations: Vec<&DestinationKey> = dev.all_destinations.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let votes = run_iteration(&dev, &destinations, &mut rng);
        // a and c each break f1 when blocked; b alone survives.
        let non_essential: BTreeSet<_> = votes
            .iter()
            .filter(|(_, v)| *v == Label::NonEssential)
            .map(|(d, _)| d.value.clone())
            .collect();
        assert_eq!(non_essential, BTreeSet::from(["b".to_string()]));
    }

    #[test]
    fn consensus_requires_destinations() {
        let dev = device("empty", &[], &[], 0.0);
        assert!(matches!(
            run_consensus_labeling(&dev, 0, &ConsensusConfig::default()),
            Err(LabelingError::NoDestinations { .. })
        ));
    }

    #[test]
    fn consensus_unreachable_reports_unresolved() {
        // Flakiness close to the cap with many functions makes a
        // non-essential destination's vote too noisy for an 80% majority.
        let dev = device(
            "noisy",
            &["a", "b"],
            &[
                ("f1", &[]),
                ("f2", &[]),
                ("f3", &[]),
                ("f4", &[]),
                ("f5", &[]),
                ("f6", &[]),
                ("f7", &[]),
                ("f8", &[]),
            ],
            0.19,
        );
        let config = ConsensusConfig {
            max_iterations: 60,
            ..ConsensusConfig::default()
        };
        let err = run_consensus_labeling(&dev, 3, &config).unwrap_err();
        match err {
            LabelingError::ConsensusUnreachable { iterations, unresolved, .. } => {
                assert_eq!(iterations, 60);
                assert!(!unresolved.is_empty());
            }
            other => panic!("expected ConsensusUnreachable, got {other}"),
        }
    }

    fn feature_row(device_id: &str, destination: &str) -> FeatureRow {
        let packet = crate::capture::PacketRecord {
            timestamp: 1.0,
            src_ip: "192.168.1.2".into(),
            dst_ip: "9.9.9.9".into(),
            src_port: Some(1000),
            dst_port: Some(2000),
            transport: crate::capture::Transport::Udp,
            is_tls: false,
            size: 100,
            payload_len: 58,
            direction: crate::capture::Direction::Uplink,
        };
        FeatureRow {
            key: WindowKey {
                device_id: device_id.into(),
                destination: dest(destination),
                window_start: 0,
                window_len: 60,
            },
            features: compute_features(&[packet]),
            label: None,
        }
    }

    #[test]
    fn assign_joins_on_device_and_destination() {
        let labels = LabelSet::from_labels([DestinationLabel {
            device_id: "echo3".into(),
            destination: dest("a.example"),
            label: Label::Essential,
            phase: Phase::Activity,
        }])
        .unwrap();
        let outcome = assign_labels(
            vec![feature_row("echo3", "a.example")],
            &labels,
            DefaultPolicy::Drop,
        );
        assert_eq!(outcome.rows.len(), 1);
        assert_eq!(outcome.rows[0].label, Label::Essential);
        assert_eq!(outcome.dropped, 0);
    }

    #[test]
    fn assign_drop_policy_counts_excluded_rows() {
        let labels = LabelSet::new();
        let rows = vec![feature_row("echo3", "x.example"), feature_row("echo3", "y.example")];
        let total = rows.len() as u64;
        let outcome = assign_labels(rows, &labels, DefaultPolicy::Drop);
        assert!(outcome.rows.is_empty());
        assert_eq!(outcome.dropped, 2);
        assert_eq!(outcome.rows.len() as u64 + outcome.dropped, total);
    }

    #[test]
    fn assign_default_non_essential_flags_unknown() {
        let labels = LabelSet::new();
        let outcome = assign_labels(
            vec![feature_row("echo3", "x.example")],
            &labels,
            DefaultPolicy::NonEssential,
        );
        assert_eq!(outcome.rows.len(), 1);
        assert_eq!(outcome.rows[0].label, Label::NonEssential);
        assert_eq!(outcome.defaulted, 1);
    }

    #[test]
    fn label_counts_summary() {
        // Speaker-class fixture: 2 essential, 48 non-essential destinations.
        let mut labels = Vec::new();
        for i in 0..2 {
            labels.push(DestinationLabel {
                device_id: "echo-dot-3".into(),
                destination: dest(&format!("required-{i}.example")),
                label: Label::Essential,
                phase: Phase::PowerOn,
            });
        }
        for i in 0..48 {
            labels.push(DestinationLabel {
                device_id: "echo-dot-3".into(),
                destination: dest(&format!("extra-{i}.example")),
                label: Label::NonEssential,
                phase: Phase::Activity,
            });
        }
        let set = LabelSet::from_labels(labels).unwrap();
        assert_eq!(set.counts_for("echo-dot-3"), (2, 48));
    }

    #[test]
    fn label_csv_round_trip() {
        let set = LabelSet::from_labels([
            DestinationLabel {
                device_id: "cam".into(),
                destination: dest("a.example"),
                label: Label::Essential,
                phase: Phase::PowerOn,
            },
            DestinationLabel {
                device_id: "cam".into(),
                destination: DestinationKey::ip("10.1.2.3"),
                label: Label::NonEssential,
                phase: Phase::Activity,
            },
        ])
        .unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = LabelSet::read_csv(&buf[..]).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn feature_vector_dimension_matches_layout() {
        assert_eq!(feature_row("d", "x").features.len(), FEATURE_COUNT);
    }
}
