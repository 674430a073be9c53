//! Exclusions, hourly discretization, task extraction and patient-level
//! splits.
//!
//! A discretized stay is a `T × 76` row-major matrix: the 59 value columns
//! (one-hot blocks for categorical channels) followed by 17 mask columns.
//! Per-step tasks keep one sample per stay: the input covers hours
//! `1..=⌊LOS⌋` and the labels start at the row for hour 5 (row index 4).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ChannelKind, ChannelSchema, EpisodeRecord, UNKNOWN_REGION};
use crate::par::Executor;
use crate::seed;

/// First hour with a per-step label.
pub const FIRST_STEP_HOUR: usize = 5;
pub const IHM_HOURS: usize = 48;
pub const MIN_AGE: f64 = 18.0;
pub const MIN_RECORDS: usize = 15;
pub const DECOMP_WINDOW_HOURS: f64 = 24.0;
pub const LOS_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("stay {stay} lasts {los_hours} h, task needs {required_hours} h")]
    TooShort { stay: String, los_hours: f64, required_hours: f64 },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("cache io on {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, TaskError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Ihm,
    Decompensation,
    Los,
    Phenotyping,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Ihm, TaskKind::Decompensation, TaskKind::Los, TaskKind::Phenotyping];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Ihm => "ihm",
            TaskKind::Decompensation => "decompensation",
            TaskKind::Los => "los",
            TaskKind::Phenotyping => "phenotyping",
        }
    }

    pub fn output_width(self) -> usize {
        match self {
            TaskKind::Ihm | TaskKind::Decompensation => 1,
            TaskKind::Los => LOS_CLASSES,
            TaskKind::Phenotyping => crate::data::NUM_PHENOTYPES,
        }
    }

    pub fn is_per_step(self) -> bool {
        matches!(self, TaskKind::Decompensation | TaskKind::Los)
    }

    /// Minimum stay length for the task, in hours.
    pub fn min_hours(self) -> f64 {
        match self {
            TaskKind::Ihm => IHM_HOURS as f64,
            TaskKind::Decompensation | TaskKind::Los => FIRST_STEP_HOUR as f64,
            TaskKind::Phenotyping => 0.0,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ihm" | "mortality" | "in-hospital-mortality" => Ok(TaskKind::Ihm),
            "decompensation" | "decomp" => Ok(TaskKind::Decompensation),
            "los" | "length-of-stay" => Ok(TaskKind::Los),
            "phenotyping" | "pheno" => Ok(TaskKind::Phenotyping),
            _ => Err(TaskError::UnknownTask(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Binary(bool),
    MultiLabel(Vec<bool>),
    /// Labels for rows `FIRST_STEP_HOUR - 1 ..`.
    PerStepBinary(Vec<bool>),
    PerStepClass(Vec<u8>),
}

impl Target {
    /// Labelled predictions carried by this target.
    pub fn label_count(&self) -> usize {
        match self {
            Target::Binary(_) | Target::MultiLabel(_) => 1,
            Target::PerStepBinary(v) => v.len(),
            Target::PerStepClass(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    /// `steps × width` row-major.
    pub input: Arc<Vec<f64>>,
    pub steps: usize,
    pub task: TaskKind,
    pub target: Target,
    pub stay: String,
    pub patient_id: u64,
    pub source: usize,
}

impl TaskSample {
    pub fn width(&self) -> usize {
        self.input.len().checked_div(self.steps).unwrap_or(0)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.input[t * w..(t + 1) * w]
    }
}

/// Stays usable for `task`: adult, at least 15 records, consistent labels,
/// a known region and long enough for the task. Events outside the stay
/// window are dropped.
pub fn apply_exclusions(cohort: &[EpisodeRecord], task: TaskKind) -> Vec<EpisodeRecord> {
    cohort
        .iter()
        .filter_map(|ep| {
            let mut ep = ep.clone();
            ep.events.retain(|e| e.time >= 0.0 && e.time < ep.los_hours);
            let keep = ep.age >= MIN_AGE
                && ep.los_hours > 0.0
                && ep.record_count() >= MIN_RECORDS
                && ep.labels.consistent()
                && ep.region != UNKNOWN_REGION
                && ep.los_hours >= task.min_hours();
            keep.then_some(ep)
        })
        .collect()
}

/// Hourly `horizon × width` matrix of `episode`, unnormalized.
///
/// Per bin `[h, h+1)` and channel: the last recorded value, else the last
/// earlier value, else the schema's normal value. The mask is 1 iff a
/// recording fell in the bin. Categorical values map to the nearest code.
pub fn discretize_episode(episode: &EpisodeRecord, schema: &ChannelSchema, horizon: usize) -> Result<Vec<f64>> {
    let width = schema.width();
    let channels = schema.channels.len();
    if let Some(ev) = episode.events.iter().find(|e| e.channel >= channels) {
        return Err(TaskError::SchemaMismatch(format!(
            "stay {} has channel index {} but schema has {channels}",
            episode.stay_name(),
            ev.channel
        )));
    }
    let offsets = schema.value_offsets();
    let mut out = vec![0.0; horizon * width];
    let mut current: Vec<f64> = schema.channels.iter().map(|c| c.normal).collect();
    let mut observed = vec![false; channels];
    let mut events = episode.events.iter().peekable();
    for h in 0..horizon {
        observed.iter_mut().for_each(|m| *m = false);
        let end = (h + 1) as f64;
        while let Some(ev) = events.next_if(|e| e.time < end) {
            current[ev.channel] = ev.value;
            observed[ev.channel] = true;
        }
        let row = &mut out[h * width..(h + 1) * width];
        for (c, spec) in schema.channels.iter().enumerate() {
            match &spec.kind {
                ChannelKind::Continuous => row[offsets[c]] = current[c],
                ChannelKind::Categorical(cats) => {
                    let idx = nearest_category(cats.iter().map(|k| k.code), current[c]);
                    row[offsets[c] + idx] = 1.0;
                }
            }
            if observed[c] {
                row[schema.mask_column(c)] = 1.0;
            }
        }
    }
    Ok(out)
}

fn nearest_category(codes: impl Iterator<Item = f64>, value: f64) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, code) in codes.enumerate() {
        let d = (code - value).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Class of a remaining stay: 0 below one day, 1..=7 for each day of the
/// first week, 8 for the second week, 9 beyond two weeks.
pub fn los_class(remaining_hours: f64) -> u8 {
    if remaining_hours < 24.0 {
        0
    } else if remaining_hours < 192.0 {
        (remaining_hours / 24.0).floor() as u8
    } else if remaining_hours < 336.0 {
        8
    } else {
        9
    }
}

fn too_short(episode: &EpisodeRecord, required: f64) -> TaskError {
    TaskError::TooShort {
        stay: episode.stay_name(),
        los_hours: episode.los_hours,
        required_hours: required,
    }
}

fn sample(episode: &EpisodeRecord, task: TaskKind, input: Vec<f64>, steps: usize, target: Target) -> TaskSample {
    TaskSample {
        input: Arc::new(input),
        steps,
        task,
        target,
        stay: episode.stay_name(),
        patient_id: episode.patient_id,
        source: 0,
    }
}

/// First 48 hours of the stay; target is in-hospital mortality.
pub fn extract_ihm(episode: &EpisodeRecord, schema: &ChannelSchema) -> Result<TaskSample> {
    if episode.los_hours < IHM_HOURS as f64 {
        return Err(too_short(episode, IHM_HOURS as f64));
    }
    let input = discretize_episode(episode, schema, IHM_HOURS)?;
    Ok(sample(episode, TaskKind::Ihm, input, IHM_HOURS, Target::Binary(episode.labels.mortality)))
}

fn per_step_hours(episode: &EpisodeRecord, max_hours: Option<usize>) -> Result<usize> {
    if episode.los_hours < FIRST_STEP_HOUR as f64 {
        return Err(too_short(episode, FIRST_STEP_HOUR as f64));
    }
    let hours = episode.los_hours.floor() as usize;
    Ok(max_hours.map_or(hours, |m| hours.min(m.max(FIRST_STEP_HOUR))))
}

/// Per hour `t ≥ 5`: does the patient die within `(t, t + 24]`?
pub fn extract_decompensation(
    episode: &EpisodeRecord,
    schema: &ChannelSchema,
    max_hours: Option<usize>,
) -> Result<TaskSample> {
    let hours = per_step_hours(episode, max_hours)?;
    let labels = (FIRST_STEP_HOUR..=hours)
        .map(|t| {
            let t = t as f64;
            episode
                .labels
                .death_time
                .is_some_and(|d| d > t && d <= t + DECOMP_WINDOW_HOURS)
        })
        .collect();
    let input = discretize_episode(episode, schema, hours)?;
    Ok(sample(episode, TaskKind::Decompensation, input, hours, Target::PerStepBinary(labels)))
}

/// Per hour `t ≥ 5`: class of the remaining stay `LOS − t`.
pub fn extract_los(episode: &EpisodeRecord, schema: &ChannelSchema, max_hours: Option<usize>) -> Result<TaskSample> {
    let hours = per_step_hours(episode, max_hours)?;
    let classes = (FIRST_STEP_HOUR..=hours)
        .map(|t| los_class(episode.los_hours - t as f64))
        .collect();
    let input = discretize_episode(episode, schema, hours)?;
    Ok(sample(episode, TaskKind::Los, input, hours, Target::PerStepClass(classes)))
}

/// Whole stay, 25 condition flags.
pub fn extract_phenotyping(
    episode: &EpisodeRecord,
    schema: &ChannelSchema,
    max_hours: Option<usize>,
) -> Result<TaskSample> {
    let mut hours = (episode.los_hours.ceil() as usize).max(1);
    if let Some(m) = max_hours {
        hours = hours.min(m.max(1));
    }
    let input = discretize_episode(episode, schema, hours)?;
    let target = Target::MultiLabel(episode.labels.phenotypes.clone());
    Ok(sample(episode, TaskKind::Phenotyping, input, hours, target))
}

pub fn extract(
    episode: &EpisodeRecord,
    task: TaskKind,
    schema: &ChannelSchema,
    max_hours: Option<usize>,
) -> Result<TaskSample> {
    match task {
        TaskKind::Ihm => extract_ihm(episode, schema),
        TaskKind::Decompensation => extract_decompensation(episode, schema, max_hours),
        TaskKind::Los => extract_los(episode, schema, max_hours),
        TaskKind::Phenotyping => extract_phenotyping(episode, schema, max_hours),
    }
}

/// Per-column mean and standard deviation of continuous value columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// `(column, mean, std)`; std is 1 for constant columns.
    pub columns: Vec<(usize, f64, f64)>,
}

impl Normalizer {
    /// Statistics over every row of `samples`.
    pub fn fit(samples: &[TaskSample], schema: &ChannelSchema) -> Self {
        let offsets = schema.value_offsets();
        let cols: Vec<usize> = schema
            .channels
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.is_categorical())
            .map(|(i, _)| offsets[i])
            .collect();
        let mut sum = vec![0.0; cols.len()];
        let mut sq = vec![0.0; cols.len()];
        let mut n = 0usize;
        for s in samples {
            for t in 0..s.steps {
                let row = s.row(t);
                for (k, &c) in cols.iter().enumerate() {
                    sum[k] += row[c];
                    sq[k] += row[c] * row[c];
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let columns = cols
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let mean = sum[k] / n;
                let var = (sq[k] / n - mean * mean).max(0.0);
                let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                (c, mean, std)
            })
            .collect();
        Normalizer { columns }
    }

    pub fn apply(&self, sample: &mut TaskSample) {
        let width = sample.width();
        let data = Arc::make_mut(&mut sample.input);
        for row in data.chunks_mut(width) {
            for &(c, mean, std) in &self.columns {
                row[c] = (row[c] - mean) / std;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub patients: BTreeMap<u64, Split>,
}

impl SplitAssignment {
    pub fn get(&self, patient_id: u64) -> Option<Split> {
        self.patients.get(&patient_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.patients.values().filter(|&&s| s == split).count()
    }
}

/// Random 70/15/15 assignment of patients.
pub fn make_splits(cohort: &[EpisodeRecord], seed_value: u64) -> SplitAssignment {
    let mut ids: Vec<u64> = cohort.iter().map(|e| e.patient_id).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut seed::rng(seed_value, &[seed::stream::SPLIT]));
    let n = ids.len();
    let train = (0.70 * n as f64).round() as usize;
    let validation = (0.15 * n as f64).round() as usize;
    let patients = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < train {
                Split::Train
            } else if i < train + validation {
                Split::Validation
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    SplitAssignment { patients }
}

/// Keeps a seeded random subset of stays holding exactly `cap` labelled
/// predictions (or all of them if fewer). For per-step tasks the last kept
/// stay is truncated after its `k`-th label.
pub fn apply_sample_cap(samples: Vec<TaskSample>, cap: usize, seed_value: u64) -> Vec<TaskSample> {
    let total: usize = samples.iter().map(|s| s.target.label_count()).sum();
    if total <= cap {
        return samples;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(seed_value, &[seed::stream::CAP]));
    let mut slots: Vec<Option<TaskSample>> = samples.into_iter().map(Some).collect();
    let mut kept = Vec::new();
    let mut used = 0;
    for i in order {
        if used >= cap {
            break;
        }
        let mut s = slots[i].take().expect("each index visited once");
        let n = s.target.label_count();
        if used + n > cap {
            truncate_labels(&mut s, cap - used);
        }
        used += s.target.label_count();
        kept.push(s);
    }
    kept
}

fn truncate_labels(s: &mut TaskSample, keep: usize) {
    let width = s.width();
    match &mut s.target {
        Target::PerStepBinary(v) => v.truncate(keep),
        Target::PerStepClass(v) => v.truncate(keep),
        _ => return,
    }
    s.steps = FIRST_STEP_HOUR - 1 + keep;
    Arc::make_mut(&mut s.input).truncate(s.steps * width);
}

/// Train/validation/test samples of one source.
#[derive(Clone, Debug, Default)]
pub struct SourceData {
    pub train: Vec<TaskSample>,
    pub validation: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

impl SourceData {
    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut TaskSample> {
        self.train.iter_mut().chain(self.validation.iter_mut()).chain(self.test.iter_mut())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractOptions {
    pub max_hours: Option<usize>,
    /// Cap on labelled predictions in the training split.
    pub train_cap: Option<usize>,
}

/// Exclusions, splits, extraction and the training cap for one source.
/// Inputs are left unnormalized.
pub fn build_source(
    cohort: &[EpisodeRecord],
    task: TaskKind,
    schema: &ChannelSchema,
    source: usize,
    seed_value: u64,
    options: &ExtractOptions,
    exec: Executor,
) -> Result<SourceData> {
    let kept = apply_exclusions(cohort, task);
    let splits = make_splits(&kept, seed_value);
    let extracted = exec.map(&kept, |ep| extract(ep, task, schema, options.max_hours));
    let mut data = SourceData::default();
    for (ep, s) in kept.iter().zip(extracted) {
        let mut s = s?;
        s.source = source;
        match splits.get(ep.patient_id).expect("every patient assigned") {
            Split::Train => data.train.push(s),
            Split::Validation => data.validation.push(s),
            Split::Test => data.test.push(s),
        }
    }
    if let Some(cap) = options.train_cap {
        data.train = apply_sample_cap(data.train, cap, seed_value);
    }
    Ok(data)
}

/// Writes a sample's matrix as little-endian f64 plus a JSON sidecar.
pub fn write_matrix_cache(sample: &TaskSample, path: &Path) -> Result<()> {
    let io = |source| TaskError::Cache {
        path: path.display().to_string(),
        source,
    };
    let bytes: Vec<u8> = sample.input.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io)?;
    let sidecar = serde_json::json!({
        "rows": sample.steps,
        "cols": sample.width(),
        "task": sample.task.name(),
        "stay": sample.stay,
        "target": sample.target,
    });
    std::fs::write(path.with_extension("json"), sidecar.to_string()).map_err(io)
}

pub fn read_matrix_cache(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|source| TaskError::Cache {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::{CAPILLARY_REFILL, GCS_TOTAL, HEART_RATE};
    use crate::data::{Event, Labels, NUM_PHENOTYPES};

    fn episode(los: f64, events: Vec<Event>) -> EpisodeRecord {
        EpisodeRecord {
            patient_id: 7,
            episode: 1,
            region: "South".into(),
            age: 40.0,
            los_hours: los,
            events,
            labels: Labels {
                mortality: false,
                phenotypes: vec![false; NUM_PHENOTYPES],
                death_time: None,
            },
        }
    }

    fn filler(n: usize) -> Vec<Event> {
        (0..n).map(|i| Event { time: 1.0 + i as f64 * 0.01, channel: HEART_RATE, value: 80.0 }).collect()
    }

    #[test]
    fn exclusion_boundaries() {
        let schema_ok = episode(47.9, filler(20));
        assert!(apply_exclusions(&[schema_ok], TaskKind::Ihm).is_empty());
        assert_eq!(apply_exclusions(&[episode(48.0, filler(20))], TaskKind::Ihm).len(), 1);
        for task in TaskKind::ALL {
            assert!(apply_exclusions(&[episode(60.0, filler(14))], task).is_empty());
        }
        let mut adult = episode(60.0, filler(20));
        adult.age = 18.0;
        assert_eq!(apply_exclusions(&[adult.clone()], TaskKind::Ihm).len(), 1);
        adult.age = 17.99;
        assert!(apply_exclusions(&[adult], TaskKind::Ihm).is_empty());
    }

    #[test]
    fn binning_fill_and_fallback() {
        let schema = ChannelSchema::standard();
        let ep = episode(
            3.0,
            vec![
                Event { time: 0.2, channel: HEART_RATE, value: 5.0 },
                Event { time: 0.8, channel: HEART_RATE, value: 7.0 },
            ],
        );
        let m = discretize_episode(&ep, &schema, 3).unwrap();
        let w = schema.width();
        let hr = schema.value_offsets()[HEART_RATE];
        let mask = schema.mask_column(HEART_RATE);
        assert_eq!((m[hr], m[mask]), (7.0, 1.0));
        assert_eq!((m[w + hr], m[w + mask]), (7.0, 0.0));
        let cap = schema.value_offsets()[CAPILLARY_REFILL];
        for t in 0..3 {
            assert_eq!(m[t * w + cap], 1.0, "normal capillary refill one-hot");
            assert_eq!(m[t * w + schema.mask_column(CAPILLARY_REFILL)], 0.0);
        }
        let gcs = schema.value_offsets()[GCS_TOTAL];
        let ones: f64 = m[gcs..gcs + schema.channels[GCS_TOTAL].width()].iter().sum();
        assert_eq!(ones, 1.0);
    }

    #[test]
    fn decompensation_window() {
        let schema = ChannelSchema::standard();
        let mut ep = episode(30.0, filler(20));
        ep.labels.mortality = true;
        ep.labels.death_time = Some(30.0);
        let s = extract_decompensation(&ep, &schema, None).unwrap();
        let Target::PerStepBinary(labels) = &s.target else { panic!() };
        assert_eq!(labels.len(), 26);
        assert!(!labels[0], "t=5");
        assert!(labels[1..25].iter().all(|&l| l), "t=6..29");
        assert!(!labels[25], "t=30");
        assert_eq!(s.steps, 30);
    }

    #[test]
    fn los_classes() {
        assert_eq!(los_class(30.0), 1);
        assert_eq!(los_class(400.0), 9);
        assert_eq!(los_class(23.99), 0);
        assert_eq!(los_class(191.99), 7);
        assert_eq!(los_class(192.0), 8);
        assert_eq!(los_class(336.0), 9);
    }

    #[test]
    fn ihm_boundary_and_shape() {
        let schema = ChannelSchema::standard();
        let mut ep = episode(60.0, filler(20));
        ep.labels.mortality = true;
        let s = extract_ihm(&ep, &schema).unwrap();
        assert_eq!((s.steps, s.target.clone()), (48, Target::Binary(true)));
        assert!(extract_ihm(&episode(48.0, filler(20)), &schema).is_ok());
        assert!(matches!(extract_ihm(&episode(47.0, filler(20)), &schema), Err(TaskError::TooShort { .. })));
    }

    #[test]
    fn splits_are_patient_level() {
        let cohort: Vec<EpisodeRecord> = (0..1000u64)
            .flat_map(|p| {
                let mut a = episode(10.0, vec![]);
                a.patient_id = p;
                let mut b = a.clone();
                b.episode = 2;
                [a, b]
            })
            .collect();
        let s = make_splits(&cohort, 3);
        assert_eq!((s.count(Split::Train), s.count(Split::Validation), s.count(Split::Test)), (700, 150, 150));
        assert_eq!(s, make_splits(&cohort, 3));
    }

    #[test]
    fn cap_is_exact_for_per_step_labels() {
        let schema = ChannelSchema::standard();
        let samples: Vec<TaskSample> = (0..20)
            .map(|i| {
                let mut ep = episode(30.0 + i as f64, filler(20));
                ep.patient_id = i;
                extract_los(&ep, &schema, None).unwrap()
            })
            .collect();
        let capped = apply_sample_cap(samples, 100, 1);
        assert_eq!(capped.iter().map(|s| s.target.label_count()).sum::<usize>(), 100);
        for s in &capped {
            assert_eq!(s.steps, FIRST_STEP_HOUR - 1 + s.target.label_count());
            assert_eq!(s.input.len(), s.steps * schema.width());
        }
    }
}
