//! Experiment harness: chronological splits, F1 scoring, and the four
//! evaluation protocols (global model, temporal consistency, unseen
//! destinations, all-vs-one generalization).
//!
//! The reported positive class is NON_ESSENTIAL, the detection target;
//! reports also carry the essential-class metrics so either reading is
//! available. Day boundaries are per device, anchored at the midnight
//! before the device's first sample.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::DestinationKey;
use crate::features::{fit_normalization, normalize, FeatureError, ProfileSet};
use crate::labeling::{Label, LabeledSample};
use crate::models::{
    train_forest, train_mlp_with_validation, ForestConfig, MlpConfig, Model, ModelError, ModelKind,
};

pub const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset mixes window lengths: expected {expected}s, found {found}s")]
    WindowMismatch { expected: u32, found: u32 },
    #[error("split ratios must be non-negative and sum to 1")]
    BadRatios,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("dataset does not extend past the {train_days}-day training period")]
    DatasetTooShort { train_days: u32 },
    #[error("experiment vacuous: every evaluation destination was seen in training")]
    VacuousExperiment,
    #[error("unknown device id {0}")]
    UnknownDevice(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("failed to write report: {0}")]
    Io(#[from] std::io::Error),
}

/// How a dataset is divided before training.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Chronological per-device split by ratio; boundary samples fall into
    /// the earlier split.
    RatioTime { train: f64, val: f64, test: f64 },
    /// First `train_days` per device train; the remainder evaluates.
    FirstDaysTrain { train_days: u32 },
    /// Train on every other device, evaluate on the held-out one.
    AllVsOne { held_out_device: String },
}

impl SplitSpec {
    pub fn standard_ratio() -> Self {
        SplitSpec::RatioTime {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Dataset split output. `warnings` records devices too small to divide.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub warnings: Vec<String>,
}

/// Splits chronologically per device. Samples never cross splits out of
/// time order: within each device, train precedes val precedes test.
pub fn split_time_oriented(samples: &[LabeledSample], spec: &SplitSpec) -> Result<Split, EvalError> {
    let mut split = Split::default();
    let by_device = group_by_device(samples);
    match spec {
        SplitSpec::RatioTime { train, val, test } => {
            if *train < 0.0 || *val < 0.0 || *test < 0.0 || (train + val + test - 1.0).abs() > 1e-9
            {
                return Err(EvalError::BadRatios);
            }
            for (device, mut rows) in by_device {
                rows.sort_by_key(|s| s.key.window_start);
                let n = rows.len();
                if n < 3 {
                    split
                        .warnings
                        .push(format!("device {device}: {n} samples, all assigned to train"));
                    split.train.extend(rows);
                    continue;
                }
                let t = (train * n as f64).floor() as usize;
                let v = ((train + val) * n as f64).floor() as usize;
                for (idx, row) in rows.into_iter().enumerate() {
                    if idx < t {
                        split.train.push(row);
                    } else if idx < v {
                        split.val.push(row);
                    } else {
                        split.test.push(row);
                    }
                }
            }
        }
        SplitSpec::FirstDaysTrain { train_days } => {
            let cutoff = *train_days as u64 * SECONDS_PER_DAY;
            for (_, mut rows) in by_device {
                rows.sort_by_key(|s| s.key.window_start);
                let origin = day_origin(&rows);
                for row in rows {
                    if row.key.window_start - origin < cutoff {
                        split.train.push(row);
                    } else {
                        split.test.push(row);
                    }
                }
            }
        }
        SplitSpec::AllVsOne { held_out_device } => {
            if !by_device.contains_key(held_out_device.as_str()) {
                return Err(EvalError::UnknownDevice(held_out_device.clone()));
            }
            for (device, rows) in by_device {
                if device == *held_out_device {
                    split.test.extend(rows);
                } else {
                    split.train.extend(rows);
                }
            }
        }
    }
    Ok(split)
}

fn group_by_device(samples: &[LabeledSample]) -> BTreeMap<String, Vec<LabeledSample>> {
    let mut by_device: BTreeMap<String, Vec<LabeledSample>> = BTreeMap::new();
    for sample in samples {
        by_device
            .entry(sample.key.device_id.clone())
            .or_default()
            .push(sample.clone());
    }
    by_device
}

/// Midnight before the device's earliest sample (rows must be non-empty).
fn day_origin(rows: &[LabeledSample]) -> u64 {
    let first = rows
        .iter()
        .map(|s| s.key.window_start)
        .min()
        .expect("non-empty device rows");
    first / SECONDS_PER_DAY * SECONDS_PER_DAY
}

/// Binary confusion counts with NON_ESSENTIAL as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl Confusion {
    pub fn observe(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::NonEssential, Label::NonEssential) => self.true_pos += 1,
            (Label::Essential, Label::NonEssential) => self.false_pos += 1,
            (Label::NonEssential, Label::Essential) => self.false_neg += 1,
            (Label::Essential, Label::Essential) => self.true_neg += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    /// The same counts with the essential class treated as positive.
    pub fn flipped(&self) -> Confusion {
        Confusion {
            true_pos: self.true_neg,
            false_pos: self.false_neg,
            false_neg: self.false_pos,
            true_neg: self.true_pos,
        }
    }
}

/// Standard F1 over the confusion's positive class; 0 when undefined.
pub fn f1_score(confusion: &Confusion) -> f64 {
    let metrics = ClassMetrics::from_confusion(confusion);
    metrics.f1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn from_confusion(c: &Confusion) -> Self {
        let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
        let recall = ratio(c.true_pos, c.true_pos + c.false_neg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics for one evaluation scope.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    pub confusion: Confusion,
    pub non_essential: ClassMetrics,
    pub essential: ClassMetrics,
}

impl ScopeReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        Self {
            non_essential: ClassMetrics::from_confusion(&confusion),
            essential: ClassMetrics::from_confusion(&confusion.flipped()),
            confusion,
        }
    }

    pub fn f1(&self) -> f64 {
        self.non_essential.f1
    }
}

/// Full experiment report: global scope plus per-device breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: ModelKind,
    pub window_len: u32,
    pub global: ScopeReport,
    pub per_device: BTreeMap<String, ScopeReport>,
    /// Micro F1 is the global confusion's F1; macro averages device F1s.
    pub macro_f1: f64,
    pub notes: Vec<String>,
}

impl EvalReport {
    fn build(
        model_kind: ModelKind,
        window_len: u32,
        confusions: BTreeMap<String, Confusion>,
        notes: Vec<String>,
    ) -> Self {
        let mut global = Confusion::default();
        for confusion in confusions.values() {
            global.merge(confusion);
        }
        let per_device: BTreeMap<String, ScopeReport> = confusions
            .into_iter()
            .map(|(device, c)| (device, ScopeReport::from_confusion(c)))
            .collect();
        let macro_f1 = if per_device.is_empty() {
            0.0
        } else {
            per_device.values().map(|r| r.f1()).sum::<f64>() / per_device.len() as f64
        };
        Self {
            model_kind,
            window_len,
            global: ScopeReport::from_confusion(global),
            per_device,
            macro_f1,
            notes,
        }
    }

    pub fn micro_f1(&self) -> f64 {
        self.global.f1()
    }

    /// CSV rows, one per scope:
    /// `scope,device,model,window_len,tp,fp,fn,tn,precision_ne,recall_ne,f1_ne,precision_e,recall_e,f1_e`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "scope,device,model,window_len,tp,fp,fn,tn,precision_ne,recall_ne,f1_ne,precision_e,recall_e,f1_e"
        )?;
        let row = |w: &mut W, scope: &str, device: &str, r: &ScopeReport| {
            writeln!(
                w,
                "{scope},{device},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.model_kind,
                self.window_len,
                r.confusion.true_pos,
                r.confusion.false_pos,
                r.confusion.false_neg,
                r.confusion.true_neg,
                r.non_essential.precision,
                r.non_essential.recall,
                r.non_essential.f1,
                r.essential.precision,
                r.essential.recall,
                r.essential.f1,
            )
        };
        row(&mut w, "global", "", &self.global)?;
        for (device, report) in &self.per_device {
            row(&mut w, "device", device, report)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "model={} w={}s  F1(non-essential)={:.4} micro / {:.4} macro  \
             F1(essential)={:.4}  samples={}\n",
            self.model_kind,
            self.window_len,
            self.micro_f1(),
            self.macro_f1,
            self.global.essential.f1,
            self.global.confusion.total(),
        );
        for (device, report) in &self.per_device {
            out.push_str(&format!(
                "  {device}: F1={:.4} over {} samples\n",
                report.f1(),
                report.confusion.total()
            ));
        }
        for note in &self.notes {
            out.push_str(&format!("  note: {note}\n"));
        }
        out
    }
}

/// Fits per-device normalization on the training rows only.
fn fit_profiles(train: &[LabeledSample]) -> Result<ProfileSet, EvalError> {
    let mut profiles = ProfileSet::default();
    for (device, rows) in group_by_device(train) {
        let vectors: Vec<_> = rows.iter().map(|s| s.features.clone()).collect();
        profiles.insert(fit_normalization(&vectors, &device)?);
    }
    Ok(profiles)
}

/// Applies per-device normalization; every sample's device must be covered.
fn normalize_with(samples: &[LabeledSample], profiles: &ProfileSet) -> Vec<LabeledSample> {
    samples
        .iter()
        .map(|s| {
            let profile = profiles
                .get(s.device_id())
                .expect("profile for every device in the split");
            s.with_features(normalize(&s.features, profile))
        })
        .collect()
}

fn train_model(
    kind: ModelKind,
    train: &[LabeledSample],
    val: Option<&[LabeledSample]>,
    seed: u64,
) -> Result<Model, EvalError> {
    match kind {
        ModelKind::Forest => {
            let config = ForestConfig {
                seed,
                ..ForestConfig::default()
            };
            Ok(Model::Forest(train_forest(train, &config)?))
        }
        ModelKind::Mlp => {
            let config = MlpConfig {
                seed,
                ..MlpConfig::default()
            };
            Ok(Model::Mlp(train_mlp_with_validation(train, val, &config)?))
        }
    }
}

fn confusion_by_device(
    model: &Model,
    test: &[LabeledSample],
) -> Result<BTreeMap<String, Confusion>, EvalError> {
    let mut confusions: BTreeMap<String, Confusion> = BTreeMap::new();
    for sample in test {
        let prediction = model.predict(&sample.features)?;
        confusions
            .entry(sample.key.device_id.clone())
            .or_default()
            .observe(sample.label, prediction.label);
    }
    Ok(confusions)
}

fn check_window(dataset: &[LabeledSample], expected: u32) -> Result<(), EvalError> {
    for sample in dataset {
        if sample.key.window_len != expected {
            return Err(EvalError::WindowMismatch {
                expected,
                found: sample.key.window_len,
            });
        }
    }
    Ok(())
}

/// Trains one global model on the 0.7/0.15/0.15 chronological split and
/// reports test metrics globally and per device.
pub fn run_global_experiment(
    dataset: &[LabeledSample],
    window_len: u32,
    kind: ModelKind,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    check_window(dataset, window_len)?;
    let split = split_time_oriented(dataset, &SplitSpec::standard_ratio())?;
    if split.train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    if split.test.is_empty() {
        return Err(EvalError::EmptySplit("test"));
    }
    let profiles = fit_profiles(&split.train)?;
    let train = normalize_with(&split.train, &profiles);
    let val = normalize_with(&split.val, &profiles);
    let test = normalize_with(&split.test, &profiles);
    let model = train_model(kind, &train, Some(&val), seed)?;
    let confusions = confusion_by_device(&model, &test)?;
    Ok(EvalReport::build(kind, window_len, confusions, split.warnings))
}

/// One evaluation chunk of the temporal-consistency experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkReport {
    pub device_id: String,
    pub chunk_index: u32,
    pub report: ScopeReport,
}

/// Trains on each device's first `train_days` days and evaluates the rest
/// in consecutive `chunk_days`-day chunks per device.
pub fn run_temporal_experiment(
    dataset: &[LabeledSample],
    window_len: u32,
    kind: ModelKind,
    seed: u64,
    train_days: u32,
    chunk_days: u32,
) -> Result<Vec<ChunkReport>, EvalError> {
    check_window(dataset, window_len)?;
    let split = split_time_oriented(dataset, &SplitSpec::FirstDaysTrain { train_days })?;
    if split.test.is_empty() {
        return Err(EvalError::DatasetTooShort { train_days });
    }
    if split.train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    let profiles = fit_profiles(&split.train)?;
    let train = normalize_with(&split.train, &profiles);
    let model = train_model(kind, &train, None, seed)?;

    let origins: BTreeMap<String, u64> = group_by_device(dataset)
        .into_iter()
        .map(|(device, rows)| {
            let origin = day_origin(&rows);
            (device, origin)
        })
        .collect();

    let chunk_secs = chunk_days as u64 * SECONDS_PER_DAY;
    let train_secs = train_days as u64 * SECONDS_PER_DAY;
    let mut confusions: BTreeMap<(String, u32), Confusion> = BTreeMap::new();
    for sample in &split.test {
        let device = sample.key.device_id.clone();
        let profile = profiles
            .get(&device)
            .ok_or_else(|| EvalError::UnknownDevice(device.clone()))?;
        let normalized = normalize(&sample.features, profile);
        let prediction = model.predict(&normalized)?;
        let rel = sample.key.window_start - origins[&device] - train_secs;
        let chunk = (rel / chunk_secs) as u32;
        confusions
            .entry((device, chunk))
            .or_default()
            .observe(sample.label, prediction.label);
    }

    Ok(confusions
        .into_iter()
        .map(|((device_id, chunk_index), confusion)| ChunkReport {
            device_id,
            chunk_index,
            report: ScopeReport::from_confusion(confusion),
        })
        .collect())
}

/// Chunk F1 series as CSV `device,chunk_index,f1`.
pub fn write_chunk_series_csv<W: Write>(
    mut w: W,
    chunks: &[ChunkReport],
) -> std::io::Result<()> {
    writeln!(w, "device,chunk_index,f1")?;
    for chunk in chunks {
        writeln!(w, "{},{},{}", chunk.device_id, chunk.chunk_index, chunk.report.f1())?;
    }
    Ok(())
}

/// Outcome of the unseen-destination experiment. The evaluation rows share
/// no (device, destination) key with training, by construction; both key
/// sets are exposed so that property can be re-checked.
#[derive(Debug, Clone)]
pub struct UnseenReport {
    pub report: ScopeReport,
    pub accuracy: f64,
    pub evaluated_rows: u64,
    pub train_keys: BTreeSet<(String, DestinationKey)>,
    pub eval_keys: BTreeSet<(String, DestinationKey)>,
}

/// Trains on the first `train_days` days and evaluates only on
/// (device, destination) pairs never seen during training.
pub fn run_unseen_destination_experiment(
    dataset: &[LabeledSample],
    window_len: u32,
    kind: ModelKind,
    seed: u64,
    train_days: u32,
) -> Result<UnseenReport, EvalError> {
    check_window(dataset, window_len)?;
    let split = split_time_oriented(dataset, &SplitSpec::FirstDaysTrain { train_days })?;
    if split.train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }
    if split.test.is_empty() {
        return Err(EvalError::DatasetTooShort { train_days });
    }

    let train_keys: BTreeSet<(String, DestinationKey)> = split
        .train
        .iter()
        .map(|s| (s.key.device_id.clone(), s.key.destination.clone()))
        .collect();
    let unseen: Vec<LabeledSample> = split
        .test
        .iter()
        .filter(|s| !train_keys.contains(&(s.key.device_id.clone(), s.key.destination.clone())))
        .cloned()
        .collect();
    if unseen.is_empty() {
        return Err(EvalError::VacuousExperiment);
    }
    let eval_keys: BTreeSet<(String, DestinationKey)> = unseen
        .iter()
        .map(|s| (s.key.device_id.clone(), s.key.destination.clone()))
        .collect();

    let profiles = fit_profiles(&split.train)?;
    let train = normalize_with(&split.train, &profiles);
    let model = train_model(kind, &train, None, seed)?;

    let mut confusion = Confusion::default();
    for sample in &unseen {
        let profile = profiles
            .get(sample.device_id())
            .ok_or_else(|| EvalError::UnknownDevice(sample.device_id().to_string()))?;
        let normalized = normalize(&sample.features, profile);
        let prediction = model.predict(&normalized)?;
        confusion.observe(sample.label, prediction.label);
    }

    Ok(UnseenReport {
        accuracy: confusion.accuracy(),
        evaluated_rows: confusion.total(),
        report: ScopeReport::from_confusion(confusion),
        train_keys,
        eval_keys,
    })
}

/// Trains on all devices except `held_out_device` and evaluates on it. The
/// held-out device's normalization profile is fitted on its own evaluation
/// data, since no training data for it exists; the report says so.
pub fn run_all_vs_one(
    dataset: &[LabeledSample],
    window_len: u32,
    held_out_device: &str,
    kind: ModelKind,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    check_window(dataset, window_len)?;
    let split = split_time_oriented(
        dataset,
        &SplitSpec::AllVsOne {
            held_out_device: held_out_device.to_string(),
        },
    )?;
    if split.train.is_empty() {
        return Err(EvalError::EmptySplit("train"));
    }

    let mut profiles = fit_profiles(&split.train)?;
    let held_out_vectors: Vec<_> = split.test.iter().map(|s| s.features.clone()).collect();
    profiles.insert(fit_normalization(&held_out_vectors, held_out_device)?);

    let train = normalize_with(&split.train, &profiles);
    let test = normalize_with(&split.test, &profiles);
    let model = train_model(kind, &train, None, seed)?;
    let confusions = confusion_by_device(&model, &test)?;
    let notes = vec![format!(
        "normalization profile for held-out device {held_out_device} fitted on its own evaluation data"
    )];
    Ok(EvalReport::build(kind, window_len, confusions, notes))
}
