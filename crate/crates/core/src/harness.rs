//! Experiment protocol: configuration, the sequential-source transfer runs,
//! grid search and report emission.
//!
//! A run trains on each configured source in turn. After every source it
//! scores the test split of *all* sources (so the first row also holds the
//! pre-transfer forecast on later sources) and records the per-source
//! average over the sources seen so far.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::analysis::{distribution_summary, ChannelSummary};
use crate::data::episode_io::ingest;
use crate::data::generate::generate_range;
use crate::data::profile::{region_index, RegionProfile};
use crate::data::schema::ChannelSchema;
use crate::data::EpisodeRecord;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::metrics::{format_mean_std, mean_std, psa, MetricRow, MetricsReport, PSA_SOURCE};
use crate::model::{save_checkpoint, SequenceModel, SequenceModelConfig};
use crate::par::Executor;
use crate::seed;
use crate::strategy::{FisherMode, Method, StrategyConfig, StrategyState};
use crate::tasks::{build_source, ExtractOptions, Normalizer, SourceData, TaskKind, TaskSample};
use crate::train::{
    append_validation_log, evaluate, metric_names, train_on_source, AdamState, EvalSet, Evaluation, LossForm,
    TrainConfig, ValidationEntry, DEFAULT_BATCH_SIZE, DEFAULT_LR,
};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "ICUDIL_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "results";
pub const DEFAULT_SEEDS: usize = 5;
pub const DEFAULT_SOURCES: [&str; 2] = ["MIMIC-III", "South"];
pub const DEFAULT_EPOCH_GRID: [usize; 5] = [2, 4, 6, 8, 10];
pub const DEFAULT_IMPORTANCE_GRID: [f64; 4] = [2.0, 4.0, 6.0, 8.0];
pub const HISTOGRAM_BINS: usize = 20;
pub const RESULTS_FILE: &str = "results.json";

/// Memory buffer capacity per task.
pub fn default_buffer(task: TaskKind) -> usize {
    match task {
        TaskKind::Ihm | TaskKind::Phenotyping => 500,
        TaskKind::Decompensation | TaskKind::Los => 3500,
    }
}

/// EWC importance per task.
pub fn default_importance(task: TaskKind) -> f64 {
    match task {
        TaskKind::Phenotyping => 4.0,
        _ => 6.0,
    }
}

/// Labelled-prediction cap on a source's training split. Only the per-hour
/// tasks are capped.
pub fn default_train_cap(task: TaskKind, region: &str) -> Option<usize> {
    if !task.is_per_step() {
        return None;
    }
    match region_index(region)? {
        0..=2 => Some(100_000),
        3 => Some(50_000),
        _ => Some(25_000),
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Every setting of one experiment. Rendered with [`ExperimentConfig::to_kv`]
/// and read back with [`ExperimentConfig::from_kv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub method: Method,
    pub sources: Vec<String>,
    pub seeds: usize,
    /// Run `k` uses seed `base_seed + k`.
    pub base_seed: u64,
    /// Seed of cohorts and splits, shared by every run.
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_form: LossForm,
    pub model: SequenceModelConfig,
    pub buffer_capacity: usize,
    pub importance: f64,
    pub fisher_mode: FisherMode,
    pub cohort_size: Option<usize>,
    /// Overrides the shift coefficient of every source after the first.
    pub shift: Option<f64>,
    pub profiles: BTreeMap<String, PathBuf>,
    pub train_caps: BTreeMap<String, usize>,
    pub max_hours: Option<usize>,
    pub ingest_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoints: bool,
    pub parallel: bool,
}

fn parse_bool(f: &KvFile, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(f.invalid(key, v).into()),
    }
}

fn parse_loss_form(s: &str) -> Option<LossForm> {
    match s {
        "per_class_binary" => Some(LossForm::PerClassBinary),
        "categorical" => Some(LossForm::Categorical),
        _ => None,
    }
}

fn loss_form_name(f: LossForm) -> &'static str {
    match f {
        LossForm::PerClassBinary => "per_class_binary",
        LossForm::Categorical => "categorical",
    }
}

fn parse_fisher(s: &str) -> Option<FisherMode> {
    match s {
        "per_sample" => Some(FisherMode::PerSample),
        "aggregate" => Some(FisherMode::Aggregate),
        _ => None,
    }
}

fn fisher_name(m: FisherMode) -> &'static str {
    match m {
        FisherMode::PerSample => "per_sample",
        FisherMode::Aggregate => "aggregate",
    }
}

impl ExperimentConfig {
    /// Shipped defaults for `task`.
    pub fn for_task(task: TaskKind) -> Self {
        ExperimentConfig {
            task,
            method: Method::Baseline,
            sources: DEFAULT_SOURCES.iter().map(|s| s.to_string()).collect(),
            seeds: DEFAULT_SEEDS,
            base_seed: 0,
            data_seed: 0,
            epochs: TrainConfig::default_epochs(task),
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LR,
            loss_form: LossForm::default(),
            model: SequenceModelConfig::for_task(task),
            buffer_capacity: default_buffer(task),
            importance: default_importance(task),
            fisher_mode: FisherMode::default(),
            cohort_size: None,
            shift: None,
            profiles: BTreeMap::new(),
            train_caps: BTreeMap::new(),
            max_hours: None,
            ingest_dir: None,
            output_dir: default_output_dir(),
            checkpoints: false,
            parallel: true,
        }
    }

    /// Reads a config; `task` selects the defaults, every other key
    /// overrides one of them. Unknown keys are rejected.
    pub fn from_kv(f: &KvFile) -> Result<Self> {
        let task = match f.get("task") {
            Some(t) => t.parse::<TaskKind>()?,
            None => TaskKind::Ihm,
        };
        let mut c = Self::for_task(task);
        for (key, value) in f.entries() {
            let (key, value) = (key.as_str(), value.as_str());
            let num = |k: &str| -> Result<usize> { value.parse().map_err(|_| f.invalid(k, value).into()) };
            let real = |k: &str| -> Result<f64> {
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| f.invalid(k, value).into())
            };
            match key {
                "task" => {}
                "method" => c.method = value.parse().map_err(|e: crate::strategy::StrategyError| Error::Config(e.to_string()))?,
                "sources" => {
                    c.sources = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
                }
                "seeds" => c.seeds = num(key)?,
                "seed" => c.base_seed = value.parse().map_err(|_| f.invalid(key, value))?,
                "data_seed" => c.data_seed = value.parse().map_err(|_| f.invalid(key, value))?,
                "epochs" => c.epochs = num(key)?,
                "batch_size" => c.batch_size = num(key)?,
                "learning_rate" => c.learning_rate = real(key)?,
                "loss_form" => c.loss_form = parse_loss_form(value).ok_or_else(|| f.invalid(key, value))?,
                "hidden_width" => c.model.hidden_width = num(key)?,
                "num_layers" => c.model.num_layers = num(key)?,
                "bidirectional" => c.model.bidirectional = parse_bool(f, key, value)?,
                "dropout" => c.model.dropout_rate = real(key)?,
                "buffer_capacity" => c.buffer_capacity = num(key)?,
                "importance" => c.importance = real(key)?,
                "fisher_mode" => c.fisher_mode = parse_fisher(value).ok_or_else(|| f.invalid(key, value))?,
                "cohort_size" => c.cohort_size = Some(num(key)?),
                "shift" => c.shift = Some(real(key)?),
                "max_hours" => c.max_hours = Some(num(key)?),
                "ingest_dir" => c.ingest_dir = Some(PathBuf::from(value)),
                "output_dir" => c.output_dir = PathBuf::from(value),
                "checkpoints" => c.checkpoints = parse_bool(f, key, value)?,
                "parallel" => c.parallel = parse_bool(f, key, value)?,
                _ => {
                    if let Some(region) = key.strip_prefix("profile.") {
                        c.profiles.insert(region.to_string(), PathBuf::from(value));
                    } else if let Some(region) = key.strip_prefix("cap.") {
                        c.train_caps.insert(region.to_string(), num(key)?);
                    } else {
                        return Err(Error::Config(format!("{}: unknown key `{key}`", f.name())));
                    }
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Config file (optional) followed by `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut f = match path {
            Some(p) => KvFile::read(p)?,
            None => KvFile::new("<defaults>"),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            f.set(k.trim(), v.trim());
        }
        Self::from_kv(&f)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seeds == 0 {
            return fail("seeds must be at least 1".into());
        }
        if self.sources.is_empty() {
            return fail("at least one source is required".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || self.importance < 0.0 {
            return fail("learning_rate must be positive and importance non-negative".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout_rate) || self.model.hidden_width == 0 || self.model.num_layers == 0
        {
            return fail("model needs hidden_width, num_layers ≥ 1 and dropout in [0, 1)".into());
        }
        if let Some(dir) = &self.ingest_dir {
            if !dir.is_dir() {
                return fail(format!("ingest directory {} does not exist", dir.display()));
            }
        } else {
            for s in &self.sources {
                if !self.profiles.contains_key(s) && region_index(s).is_none() {
                    return fail(format!("source {s:?} is neither a shipped region nor has a profile file"));
                }
            }
        }
        for (name, p) in &self.profiles {
            if !p.is_file() {
                return fail(format!("profile file for {name} not found: {}", p.display()));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new("experiment");
        let m = &self.model;
        f.set("task", self.task.name());
        f.set("method", self.method.name());
        f.set("sources", self.sources.join(","));
        f.set("seeds", self.seeds.to_string());
        f.set("seed", self.base_seed.to_string());
        f.set("data_seed", self.data_seed.to_string());
        f.set("epochs", self.epochs.to_string());
        f.set("batch_size", self.batch_size.to_string());
        f.set("learning_rate", self.learning_rate.to_string());
        f.set("loss_form", loss_form_name(self.loss_form));
        f.set("hidden_width", m.hidden_width.to_string());
        f.set("num_layers", m.num_layers.to_string());
        f.set("bidirectional", m.bidirectional.to_string());
        f.set("dropout", m.dropout_rate.to_string());
        f.set("buffer_capacity", self.buffer_capacity.to_string());
        f.set("importance", self.importance.to_string());
        f.set("fisher_mode", fisher_name(self.fisher_mode));
        if let Some(n) = self.cohort_size {
            f.set("cohort_size", n.to_string());
        }
        if let Some(s) = self.shift {
            f.set("shift", s.to_string());
        }
        if let Some(h) = self.max_hours {
            f.set("max_hours", h.to_string());
        }
        if let Some(d) = &self.ingest_dir {
            f.set("ingest_dir", d.display().to_string());
        }
        f.set("output_dir", self.output_dir.display().to_string());
        f.set("checkpoints", self.checkpoints.to_string());
        f.set("parallel", self.parallel.to_string());
        for (k, p) in &self.profiles {
            f.set(format!("profile.{k}"), p.display().to_string());
        }
        for (k, n) in &self.train_caps {
            f.set(format!("cap.{k}"), n.to_string());
        }
        f
    }

    /// SHA-256 of the rendered config.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().render().as_bytes()))
    }

    pub fn executor(&self) -> Executor {
        if self.parallel {
            Executor::available()
        } else {
            Executor::Sequential
        }
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.base_seed + k).collect()
    }

    fn train_config(&self, seed_value: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: seed_value,
            task: self.task,
            loss_form: self.loss_form,
        }
    }

    fn strategy(&self, method: Method) -> StrategyState {
        StrategyState::new(StrategyConfig {
            method,
            buffer_capacity: self.buffer_capacity,
            importance: self.importance,
            fisher_mode: self.fisher_mode,
        })
    }

    fn train_cap(&self, source: &str) -> Option<usize> {
        self.train_caps.get(source).copied().or_else(|| default_train_cap(self.task, source))
    }

    /// The last source, used as the region label of a run.
    pub fn region(&self) -> &str {
        self.sources.last().map(String::as_str).unwrap_or("")
    }

    pub fn run_dir(&self, method: Method) -> PathBuf {
        let region = self.region().to_ascii_lowercase();
        self.output_dir.join(format!("{}-{}-{}", self.task.name(), method.name(), region))
    }
}

/// Profile of source `name` with the config's overrides applied.
pub fn source_profile(config: &ExperimentConfig, index: usize) -> Result<RegionProfile> {
    let name = &config.sources[index];
    let mut p = match config.profiles.get(name) {
        Some(path) => RegionProfile::read(path)?,
        None => RegionProfile::named(name)?,
    };
    if let Some(n) = config.cohort_size {
        p.cohort_size = n;
    }
    if let (Some(s), true) = (config.shift, index > 0) {
        p.shift = s;
    }
    p.validate()?;
    Ok(p)
}

/// Cohort seed of a source: keyed by the shipped region index when the
/// name is known, else by list position.
pub fn cohort_seed(data_seed: u64, name: &str, position: usize) -> u64 {
    let key = region_index(name).unwrap_or(position) as u64;
    seed::derive(data_seed, &[seed::stream::REGION, key])
}

/// Raw cohorts of every source, generated or ingested.
pub fn load_cohorts(config: &ExperimentConfig, schema: &ChannelSchema, exec: Executor) -> Result<Vec<Vec<EpisodeRecord>>> {
    if let Some(dir) = &config.ingest_dir {
        let (kept, _) = ingest(dir, schema)?;
        return config
            .sources
            .iter()
            .map(|name| {
                let idx = region_index(name);
                let cohort: Vec<EpisodeRecord> = kept
                    .iter()
                    .filter(|e| &e.region == name || (idx.is_some() && region_index(&e.region) == idx))
                    .cloned()
                    .collect();
                if cohort.is_empty() {
                    return Err(Error::Config(format!("no episodes of region {name} under {}", dir.display())));
                }
                Ok(cohort)
            })
            .collect();
    }
    (0..config.sources.len())
        .map(|i| {
            let p = source_profile(config, i)?;
            let s = cohort_seed(config.data_seed, &config.sources[i], i);
            Ok(generate_range(&p, s, 0..p.cohort_size, exec)?)
        })
        .collect()
}

/// One source after extraction and normalization.
#[derive(Clone, Debug)]
pub struct PreparedSource {
    pub name: String,
    pub data: SourceData,
    pub distributions: Vec<ChannelSummary>,
}

/// Task data of every source. Test splits are only reachable through
/// [`PreparedData::test_set`], which counts reads.
#[derive(Debug)]
pub struct PreparedData {
    sources: Vec<PreparedSource>,
    pub normalizer: Normalizer,
    test_reads: AtomicUsize,
}

impl PreparedData {
    pub fn new(sources: Vec<PreparedSource>, normalizer: Normalizer) -> Self {
        PreparedData {
            sources,
            normalizer,
            test_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.sources[i].name
    }

    pub fn train(&self, i: usize) -> &[TaskSample] {
        &self.sources[i].data.train
    }

    pub fn validation(&self, i: usize) -> &[TaskSample] {
        &self.sources[i].data.validation
    }

    pub fn test_set(&self, i: usize) -> &[TaskSample] {
        self.test_reads.fetch_add(1, Ordering::SeqCst);
        &self.sources[i].data.test
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::SeqCst)
    }

    pub fn distributions(&self) -> Vec<(String, Vec<ChannelSummary>)> {
        self.sources.iter().map(|s| (s.name.clone(), s.distributions.clone())).collect()
    }
}

/// Cohorts → task samples, with a normalizer fit on the first source's
/// training split and applied everywhere.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let exec = config.executor();
    let schema = ChannelSchema::standard();
    let cohorts = load_cohorts(config, &schema, exec)?;
    let mut sources = Vec::with_capacity(cohorts.len());
    for (i, cohort) in cohorts.iter().enumerate() {
        let name = config.sources[i].clone();
        let options = ExtractOptions {
            max_hours: config.max_hours,
            train_cap: config.train_cap(&name),
        };
        let split_seed = seed::derive(config.data_seed, &[seed::stream::SPLIT, i as u64]);
        let data = build_source(cohort, config.task, &schema, i, split_seed, &options, exec)?;
        if data.train.is_empty() || data.validation.is_empty() || data.test.is_empty() {
            return Err(Error::Config(format!(
                "source {name} leaves an empty split after exclusions ({} episodes)",
                cohort.len()
            )));
        }
        let distributions = distribution_summary(cohort, HISTOGRAM_BINS)?;
        sources.push(PreparedSource {
            name,
            data,
            distributions,
        });
    }
    let normalizer = Normalizer::fit(&sources[0].data.train, &schema);
    for s in &mut sources {
        for sample in s.data.all_mut() {
            normalizer.apply(sample);
        }
    }
    Ok(PreparedData::new(sources, normalizer))
}

/// Which split a run is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSplit {
    Test,
    Validation,
}

fn score_all(
    data: &PreparedData,
    model: &SequenceModel,
    task: TaskKind,
    split: ScoreSplit,
    exec: Executor,
) -> Result<Vec<Evaluation>> {
    (0..data.len())
        .map(|i| {
            let samples = match split {
                ScoreSplit::Test => data.test_set(i),
                ScoreSplit::Validation => data.validation(i),
            };
            Ok(evaluate(model, samples, task, exec)?)
        })
        .collect()
}

/// Per-source rows and PSA rows after training on `trained_on` sources.
fn score_rows(
    config: &ExperimentConfig,
    data: &PreparedData,
    method: Method,
    seed_value: u64,
    trained_on: usize,
    evals: &[Evaluation],
) -> Result<Vec<MetricRow>> {
    let row = |source: &str, metric: &str, value: f64| MetricRow {
        task: config.task.name().to_string(),
        region: config.region().to_string(),
        method: method.name().to_string(),
        seed: seed_value,
        trained_on,
        source: source.to_string(),
        metric: metric.to_string(),
        value,
    };
    let mut rows = Vec::new();
    for (i, e) in evals.iter().enumerate() {
        for (metric, value) in &e.metrics {
            rows.push(row(data.name(i), metric, *value));
        }
    }
    for metric in metric_names(config.task) {
        let seen: Vec<f64> = evals[..trained_on]
            .iter()
            .map(|e| e.get(metric).unwrap_or(f64::NAN))
            .collect();
        rows.push(row(PSA_SOURCE, metric, psa(&seen, trained_on)?));
    }
    Ok(rows)
}

/// Model, optimizer and strategy of one run in progress.
#[derive(Clone, Debug)]
struct RunState {
    model: SequenceModel,
    adam: AdamState,
    strategy: StrategyState,
}

fn train_phase(
    config: &ExperimentConfig,
    data: &PreparedData,
    state: &mut RunState,
    source: usize,
    seed_value: u64,
    log: &mut Vec<ValidationEntry>,
) -> Result<()> {
    let exec = config.executor();
    let validation: Vec<EvalSet<'_>> = (0..=source)
        .map(|i| EvalSet {
            name: data.name(i),
            samples: data.validation(i),
        })
        .collect();
    let report = train_on_source(
        &mut state.model,
        &mut state.adam,
        data.train(source),
        source,
        &config.train_config(seed_value),
        &mut state.strategy,
        &validation,
        exec,
    )?;
    log.extend(report.validation);
    Ok(())
}

fn finish_phase(config: &ExperimentConfig, data: &PreparedData, state: &mut RunState, source: usize, seed_value: u64) -> Result<()> {
    state.strategy.finish_source(
        &state.model,
        data.train(source),
        source,
        seed_value,
        config.loss_form,
        config.executor(),
    )?;
    Ok(())
}

/// Outcome of one seed of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub method: Method,
    pub rows: Vec<MetricRow>,
    pub validation: Vec<ValidationEntry>,
    pub checksum: u64,
}

/// One seed of every method in `methods`. Training on the first source is
/// shared, since no strategy acts before a second source.
fn run_seed(
    config: &ExperimentConfig,
    data: &PreparedData,
    methods: &[Method],
    seed_value: u64,
    split: ScoreSplit,
) -> Result<Vec<SeedOutcome>> {
    let exec = config.executor();
    let model = SequenceModel::init(config.model.clone(), seed_value);
    let adam = AdamState::new(model.param_count(), config.learning_rate);
    let mut first = RunState {
        model,
        adam,
        strategy: config.strategy(Method::Baseline),
    };
    let mut first_log = Vec::new();
    train_phase(config, data, &mut first, 0, seed_value, &mut first_log)?;
    let first_evals = score_all(data, &first.model, config.task, split, exec)?;

    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut rows = score_rows(config, data, method, seed_value, 1, &first_evals)?;
        let mut log = first_log.clone();
        let mut state = RunState {
            model: first.model.clone(),
            adam: first.adam.clone(),
            strategy: config.strategy(method),
        };
        for source in 1..data.len() {
            finish_phase(config, data, &mut state, source - 1, seed_value)?;
            train_phase(config, data, &mut state, source, seed_value, &mut log)?;
            let evals = score_all(data, &state.model, config.task, split, exec)?;
            rows.extend(score_rows(config, data, method, seed_value, source + 1, &evals)?);
        }
        if config.checkpoints && split == ScoreSplit::Test {
            write_checkpoint(config, data, method, seed_value, &state)?;
        }
        out.push(SeedOutcome {
            seed: seed_value,
            method,
            rows,
            validation: log,
            checksum: state.model.checksum(),
        });
    }
    Ok(out)
}

fn write_checkpoint(
    config: &ExperimentConfig,
    data: &PreparedData,
    method: Method,
    seed_value: u64,
    state: &RunState,
) -> Result<()> {
    let dir = config.run_dir(method);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let names: Vec<String> = (0..data.len()).map(|i| data.name(i).to_string()).collect();
    save_checkpoint(&state.model, seed_value, &names, &dir.join(format!("model_seed{seed_value}")))?;
    let path = dir.join(format!("strategy_seed{seed_value}.json"));
    let json = serde_json::to_string(&state.strategy).map_err(|e| Error::io(&path)(e.into()))?;
    std::fs::write(&path, json).map_err(Error::io(&path))
}

/// Mean and std over seeds of one `(trained_on, source, metric)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub trained_on: usize,
    pub source: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Everything recorded by one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub digest: String,
    pub task: TaskKind,
    pub method: Method,
    pub sources: Vec<String>,
    pub seeds: Vec<u64>,
    pub report: MetricsReport,
    pub summary: Vec<SummaryRow>,
    pub checksums: Vec<u64>,
    pub distributions: Vec<(String, Vec<ChannelSummary>)>,
    pub test_reads: usize,
}

impl ResultsRecord {
    /// Mean and std of a value over seeds.
    pub fn get(&self, trained_on: usize, source: &str, metric: &str) -> Option<(f64, f64)> {
        self.summary
            .iter()
            .find(|r| r.trained_on == trained_on && r.source == source && r.metric == metric)
            .map(|r| (r.mean, r.std))
    }

    /// Per-seed values in seed order.
    pub fn per_seed(&self, trained_on: usize, source: &str, metric: &str) -> Vec<f64> {
        self.report.values(trained_on, source, metric)
    }

    pub fn final_psa(&self, metric: &str) -> Option<(f64, f64)> {
        self.get(self.sources.len(), PSA_SOURCE, metric)
    }
}

fn summarize(report: &MetricsReport) -> Vec<SummaryRow> {
    report
        .summary()
        .into_iter()
        .map(|((trained_on, source, metric), (mean, std))| SummaryRow {
            trained_on,
            source,
            metric,
            mean,
            std,
        })
        .collect()
}

/// Runs every method in `methods` on shared data, one record per method.
/// Partial per-seed results are written as each seed finishes.
pub fn run_comparison(config: &ExperimentConfig, methods: &[Method]) -> Result<Vec<ResultsRecord>> {
    config.validate()?;
    let data = prepare_data(config)?;
    let records = run_on(config, &data, methods, ScoreSplit::Test, true)?;
    for r in &records {
        write_record(config, r)?;
    }
    Ok(records)
}

/// [`run_comparison`] for the configured method.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsRecord> {
    let mut records = run_comparison(config, &[config.method])?;
    Ok(records.remove(0))
}

/// Seeds run as independent jobs; results are merged in seed order.
pub fn run_on(
    config: &ExperimentConfig,
    data: &PreparedData,
    methods: &[Method],
    split: ScoreSplit,
    flush: bool,
) -> Result<Vec<ResultsRecord>> {
    let seeds = config.run_seeds();
    let outcomes = config.executor().map(&seeds, |&s| -> Result<Vec<SeedOutcome>> {
        let out = run_seed(config, data, methods, s, split)?;
        if flush {
            for o in &out {
                write_partial(config, o)?;
            }
        }
        Ok(out)
    });
    let mut per_method: Vec<Vec<SeedOutcome>> = vec![Vec::new(); methods.len()];
    for seed_out in outcomes {
        for (k, o) in seed_out?.into_iter().enumerate() {
            per_method[k].push(o);
        }
    }
    let reads = data.test_reads();
    Ok(methods
        .iter()
        .zip(per_method)
        .map(|(&method, outs)| {
            let mut method_config = config.clone();
            method_config.method = method;
            let report = MetricsReport {
                rows: outs.iter().flat_map(|o| o.rows.iter().cloned()).collect(),
            };
            ResultsRecord {
                digest: method_config.digest(),
                task: config.task,
                method,
                sources: config.sources.clone(),
                seeds: seeds.clone(),
                summary: summarize(&report),
                report,
                checksums: outs.iter().map(|o| o.checksum).collect(),
                distributions: data.distributions(),
                test_reads: reads,
            }
        })
        .collect())
}

fn write_partial(config: &ExperimentConfig, outcome: &SeedOutcome) -> Result<()> {
    let dir = config.run_dir(outcome.method);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let path = dir.join(format!("seed_{}.json", outcome.seed));
    let json = serde_json::to_string_pretty(outcome).map_err(|e| Error::io(&path)(e.into()))?;
    std::fs::write(&path, json).map_err(Error::io(&path))?;
    let log = dir.join(format!("validation_seed{}.jsonl", outcome.seed));
    if log.exists() {
        std::fs::remove_file(&log).map_err(Error::io(&log))?;
    }
    append_validation_log(&log, &outcome.validation)?;
    Ok(())
}

/// Writes `results.json`, `metrics.csv` and `config.kv` for a record.
pub fn write_record(config: &ExperimentConfig, record: &ResultsRecord) -> Result<PathBuf> {
    let dir = config.run_dir(record.method);
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let path = dir.join(RESULTS_FILE);
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::io(&path)(e.into()))?;
    std::fs::write(&path, json).map_err(Error::io(&path))?;
    let csv = dir.join("metrics.csv");
    record.report.write_csv(&csv).map_err(Error::io(&csv))?;
    let mut method_config = config.clone();
    method_config.method = record.method;
    let kv = dir.join("config.kv");
    std::fs::write(&kv, method_config.to_kv().render()).map_err(Error::io(&kv))?;
    Ok(dir)
}

/// One grid cell and its mean validation PSA on the primary metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub epochs: usize,
    pub importance: f64,
    pub validation_psa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: GridCell,
    /// Test-split reads during the search; always 0.
    pub test_reads: usize,
}

/// Epoch grid for `task`: the per-hour tasks keep their configured epochs.
pub fn epoch_grid_for(task: TaskKind, grid: &[usize], configured: usize) -> Vec<usize> {
    if task.is_per_step() {
        vec![configured]
    } else {
        grid.to_vec()
    }
}

/// Exhaustive search scored on validation splits only. Ties go to the
/// smaller importance, then fewer epochs.
pub fn grid_search(config: &ExperimentConfig, epochs_grid: &[usize], importance_grid: &[f64]) -> Result<GridResult> {
    config.validate()?;
    let epochs_grid = epoch_grid_for(config.task, epochs_grid, config.epochs);
    if epochs_grid.is_empty() || importance_grid.is_empty() {
        return Err(Error::Config("grids must be non-empty".into()));
    }
    let data = prepare_data(config)?;
    let primary = metric_names(config.task)[0];
    let mut specs = Vec::new();
    for &e in &epochs_grid {
        for &l in importance_grid {
            specs.push((e, l));
        }
    }
    let scored = config.executor().map(&specs, |&(epochs, importance)| -> Result<GridCell> {
        let mut c = config.clone();
        c.epochs = epochs;
        c.importance = importance;
        c.parallel = false;
        let record = run_on(&c, &data, &[config.method], ScoreSplit::Validation, false)?.remove(0);
        let (mean, _) = record
            .final_psa(primary)
            .ok_or_else(|| Error::Config(format!("no {primary} PSA recorded")))?;
        Ok(GridCell {
            epochs,
            importance,
            validation_psa: mean,
        })
    });
    let cells: Vec<GridCell> = scored.into_iter().collect::<Result<_>>()?;
    let best = select_best(&cells).clone();
    Ok(GridResult {
        cells,
        best,
        test_reads: data.test_reads(),
    })
}

/// Highest validation PSA; ties broken by smaller importance, then fewer
/// epochs.
pub fn select_best(cells: &[GridCell]) -> &GridCell {
    let better = |a: &GridCell, b: &GridCell| {
        a.validation_psa > b.validation_psa
            || (a.validation_psa == b.validation_psa
                && (a.importance < b.importance || (a.importance == b.importance && a.epochs < b.epochs)))
    };
    let mut best = &cells[0];
    for c in &cells[1..] {
        if better(c, best) {
            best = c;
        }
    }
    best
}

fn find_records(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(Error::io(dir))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_records(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RESULTS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Every `results.json` under `dir`, in path order.
pub fn read_records(dir: &Path) -> Result<Vec<ResultsRecord>> {
    let mut paths = Vec::new();
    if dir.is_dir() {
        find_records(dir, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(Error::NoResults(dir.to_path_buf()));
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(Error::io(p))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Files written by [`report_emit`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmittedReport {
    pub table: PathBuf,
    pub first_source: PathBuf,
    pub histograms: Vec<PathBuf>,
    pub rows: usize,
}

type TableKey = (Method, String);

fn write_table(path: &Path, columns: &[String], rows: &BTreeMap<TableKey, BTreeMap<String, String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path)(e.into()))?;
    let mut header = vec!["method".to_string(), "region".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(|e| Error::io(path)(e.into()))?;
    for ((method, region), cells) in rows {
        let mut rec = vec![method.name().to_string(), region.clone()];
        rec.extend(columns.iter().map(|c| cells.get(c).cloned().unwrap_or_default()));
        w.write_record(&rec).map_err(|e| Error::io(path)(e.into()))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Reads every record under `dir` and writes `table.csv` (final PSA per
/// method × region), `first_source.csv` (first-source score before and
/// after transfer) and `hist_<source>.csv` per source.
pub fn report_emit(dir: &Path) -> Result<EmittedReport> {
    let records = read_records(dir)?;
    let mut columns: Vec<String> = Vec::new();
    let mut first_columns: Vec<String> = Vec::new();
    let mut table: BTreeMap<TableKey, BTreeMap<String, String>> = BTreeMap::new();
    let mut first: BTreeMap<TableKey, BTreeMap<String, String>> = BTreeMap::new();
    let mut histograms: BTreeMap<String, Vec<ChannelSummary>> = BTreeMap::new();
    for r in &records {
        let region = r.sources.last().cloned().unwrap_or_default();
        let key = (r.method, region);
        let s = r.sources.len();
        for metric in metric_names(r.task) {
            let col = format!("{} {metric}", r.task.name());
            if let Some((m, sd)) = r.final_psa(metric) {
                table.entry(key.clone()).or_default().insert(col.clone(), format_mean_std(m, sd));
                if !columns.contains(&col) {
                    columns.push(col.clone());
                }
            }
            for (label, trained_on) in [("before", 1), ("after", s)] {
                let col = format!("{col} {label}");
                if let Some((m, sd)) = r.get(trained_on, &r.sources[0], metric) {
                    first.entry(key.clone()).or_default().insert(col.clone(), format_mean_std(m, sd));
                    if !first_columns.contains(&col) {
                        first_columns.push(col);
                    }
                }
            }
        }
        for (source, summary) in &r.distributions {
            histograms.entry(source.clone()).or_insert_with(|| summary.clone());
        }
    }
    let order = |cols: &mut Vec<String>| {
        cols.sort_by_key(|c| {
            let task = TaskKind::ALL.iter().position(|t| c.starts_with(t.name())).unwrap_or(usize::MAX);
            (task, c.clone())
        })
    };
    order(&mut columns);
    order(&mut first_columns);
    let mut emitted = EmittedReport {
        table: dir.join("table.csv"),
        first_source: dir.join("first_source.csv"),
        histograms: Vec::new(),
        rows: table.len(),
    };
    write_table(&emitted.table, &columns, &table)?;
    write_table(&emitted.first_source, &first_columns, &first)?;
    for (source, summary) in &histograms {
        let slug: String = source
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        let path = dir.join(format!("hist_{slug}.csv"));
        let mut text = String::from("channel,bin,lower,upper,count\n");
        for ch in summary {
            for (b, count) in ch.counts.iter().enumerate() {
                let _ = writeln!(text, "{},{b},{},{},{count}", ch.channel, ch.edges[b], ch.edges[b + 1]);
            }
        }
        std::fs::write(&path, text).map_err(Error::io(&path))?;
        emitted.histograms.push(path);
    }
    Ok(emitted)
}

/// Mean and population std of final-source PSA values over seeds.
pub fn psa_over_seeds(record: &ResultsRecord, metric: &str) -> (f64, f64) {
    mean_std(&record.per_seed(record.sources.len(), PSA_SOURCE, metric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_defaults() {
        let buffers: Vec<usize> = [TaskKind::Ihm, TaskKind::Phenotyping, TaskKind::Decompensation, TaskKind::Los]
            .iter()
            .map(|&t| ExperimentConfig::for_task(t).buffer_capacity)
            .collect();
        assert_eq!(buffers, vec![500, 500, 3500, 3500]);
        let imp: Vec<f64> = [TaskKind::Ihm, TaskKind::Phenotyping, TaskKind::Decompensation, TaskKind::Los]
            .iter()
            .map(|&t| ExperimentConfig::for_task(t).importance)
            .collect();
        assert_eq!(imp, vec![6.0, 4.0, 6.0, 6.0]);
        assert_eq!(default_train_cap(TaskKind::Decompensation, "West"), Some(50_000));
        assert_eq!(default_train_cap(TaskKind::Los, "Northeast"), Some(25_000));
        assert_eq!(default_train_cap(TaskKind::Ihm, "South"), None);
    }

    #[test]
    fn config_round_trip_and_digest() {
        let mut c = ExperimentConfig::for_task(TaskKind::Phenotyping);
        c.method = Method::Combined;
        c.cohort_size = Some(120);
        c.train_caps.insert("South".into(), 77);
        let back = ExperimentConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let mut d = c.clone();
        d.importance = 4.5;
        assert_ne!(d.digest(), c.digest());
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(ExperimentConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["seeds=0".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["sources=MIMIC-III,Atlantis".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["epochs".into()]).is_err());
        let c = ExperimentConfig::load(None, &["task=los".into(), "method=adjusted_replay".into()]).unwrap();
        assert_eq!(c.buffer_capacity, 3500);
        assert_eq!(c.method, Method::AdjustedReplay);
    }

    #[test]
    fn grid_selection_ties() {
        let cell = |epochs, importance, validation_psa| GridCell {
            epochs,
            importance,
            validation_psa,
        };
        let cells = vec![cell(4, 6.0, 0.8), cell(2, 6.0, 0.8), cell(8, 2.0, 0.8), cell(6, 2.0, 0.8), cell(2, 8.0, 0.7)];
        assert_eq!(select_best(&cells), &cell(6, 2.0, 0.8));
        assert_eq!(select_best(&cells[..1]), &cells[0]);
        assert_eq!(epoch_grid_for(TaskKind::Los, &DEFAULT_EPOCH_GRID, 1), vec![1]);
        assert_eq!(epoch_grid_for(TaskKind::Ihm, &DEFAULT_EPOCH_GRID, 4), DEFAULT_EPOCH_GRID.to_vec());
    }
}
