//! Continual-learning strategies and the memory buffer.
//!
//! With `s` sources seen (the current one included) and `L_curr` the task
//! loss of the current minibatch:
//!
//! - baseline: `L_curr`
//! - EWC: `L_curr + λ Σ ½ F_i (θ_i − θ*_i)²`
//! - replay: `(1/s) L_curr + (1 − 1/s) L_rep` on every step, `L_rep` from
//!   one uniformly drawn buffer sample
//! - adjusted replay: `(1 − 1/s) L_curr + (1/s) L_rep,j` on steps with
//!   `i mod p = 0` and `j = i / p` inside the buffer, `L_curr` otherwise,
//!   where `p = ⌊N / buffer⌋` and `N` counts the optimizer steps of the
//!   current source
//! - combined: adjusted replay with `L_curr` replaced by the EWC loss in
//!   both branches
//!
//! When `s = 1` every strategy reduces to `L_curr`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, ModelError, ParamVars, SequenceModel};
use crate::par::Executor;
use crate::seed;
use crate::tasks::TaskSample;
use crate::tensor::{Graph, Mode, TensorError, Var};
use crate::train::{task_loss, LossForm};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("sources seen is {0} but the memory buffer is empty")]
    NoBuffer(usize),
    #[error("replay period is zero: buffer of {buffer} exceeds {steps} steps")]
    InvalidPeriod { steps: usize, buffer: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, StrategyError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Baseline,
    Ewc,
    Replay,
    AdjustedReplay,
    Combined,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Baseline, Method::Ewc, Method::Replay, Method::AdjustedReplay, Method::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ewc => "ewc",
            Method::Replay => "replay",
            Method::AdjustedReplay => "adjusted_replay",
            Method::Combined => "combined",
        }
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, Method::Ewc | Method::Combined)
    }

    pub fn uses_schedule(self) -> bool {
        matches!(self, Method::AdjustedReplay | Method::Combined)
    }

    pub fn keeps_buffer(self) -> bool {
        self != Method::Baseline
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(Method::Baseline),
            "ewc" => Ok(Method::Ewc),
            "replay" => Ok(Method::Replay),
            "adjusted_replay" | "adjusted" => Ok(Method::AdjustedReplay),
            "combined" => Ok(Method::Combined),
            _ => Err(StrategyError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FisherMode {
    /// Mean over buffer samples of the squared per-sample gradient.
    #[default]
    PerSample,
    /// Square of the gradient of the mean buffer loss.
    Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: TaskSample,
    pub source: usize,
}

/// Bounded store of earlier-source samples, grouped by source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub capacity: usize,
    pub entries: Vec<BufferEntry>,
}

/// Equal shares of `capacity` over sources holding `available` samples.
/// A source with fewer samples than its share keeps all of them and the
/// rest is shared among the others; leftover units go to earlier sources.
pub fn equal_shares(available: &[usize], capacity: usize) -> Vec<usize> {
    let mut shares = vec![0; available.len()];
    let mut open: Vec<usize> = (0..available.len()).collect();
    let mut left = capacity;
    while !open.is_empty() && left > 0 {
        let base = left / open.len();
        let extra = left % open.len();
        let short: Vec<usize> = open
            .iter()
            .enumerate()
            .filter(|(k, &i)| available[i] < base + usize::from(*k < extra))
            .map(|(_, &i)| i)
            .collect();
        if short.is_empty() {
            for (k, &i) in open.iter().enumerate() {
                shares[i] = base + usize::from(k < extra);
            }
            break;
        }
        for &i in &short {
            shares[i] = available[i];
            left -= available[i];
        }
        open.retain(|i| !short.contains(i));
    }
    shares
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(source, count)` in buffer order.
    pub fn counts_by_source(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((s, n)) if *s == e.source => *n += 1,
                _ => out.push((e.source, 1)),
            }
        }
        out
    }

    /// Adds a uniform random subset of `finished` and evicts uniformly from
    /// earlier sources so every source holds an equal share.
    pub fn update(&mut self, finished: &[TaskSample], source_id: usize, rng: &mut ChaCha8Rng) {
        let mut groups: Vec<(usize, Vec<BufferEntry>)> = Vec::new();
        for e in self.entries.drain(..) {
            match groups.last_mut() {
                Some((s, v)) if *s == e.source => v.push(e),
                _ => groups.push((e.source, vec![e])),
            }
        }
        let mut available: Vec<usize> = groups.iter().map(|(_, v)| v.len()).collect();
        available.push(finished.len());
        let shares = equal_shares(&available, self.capacity);
        for ((_, group), &share) in groups.iter_mut().zip(&shares) {
            if share < group.len() {
                let mut keep = index::sample(rng, group.len(), share).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(group);
                let mut old: Vec<Option<BufferEntry>> = old.into_iter().map(Some).collect();
                *group = keep.into_iter().map(|i| old[i].take().expect("distinct index")).collect();
            }
        }
        for (_, group) in groups {
            self.entries.extend(group);
        }
        let share = shares[shares.len() - 1];
        for i in index::sample(rng, finished.len(), share) {
            self.entries.push(BufferEntry {
                sample: finished[i].clone(),
                source: source_id,
            });
        }
    }
}

/// Weights `(current, replay)` of traditional replay.
pub fn traditional_weights(s: usize) -> (f64, f64) {
    let w = 1.0 / s as f64;
    (w, 1.0 - w)
}

/// Weights `(current, replay)` of adjusted replay.
pub fn adjusted_weights(s: usize) -> (f64, f64) {
    let w = 1.0 / s as f64;
    (1.0 - w, w)
}

pub fn traditional_replay_loss(loss_curr: f64, loss_rep: f64, s: usize) -> f64 {
    let (a, b) = traditional_weights(s);
    a * loss_curr + b * loss_rep
}

pub fn adjusted_replay_loss(loss_curr: f64, loss_rep_j: f64, s: usize) -> f64 {
    let (a, b) = adjusted_weights(s);
    a * loss_curr + b * loss_rep_j
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Adjust(usize),
    NoAdjust,
}

/// `p = ⌊N / buffer⌋`; only `p = 0` is rejected.
pub fn replay_period(steps: usize, buffer: usize) -> Result<usize> {
    let p = steps.checked_div(buffer).unwrap_or(0);
    if p == 0 {
        return Err(StrategyError::InvalidPeriod { steps, buffer });
    }
    Ok(p)
}

/// Adjustment at step `i` of a source with `N` steps: buffer index
/// `j = i / p` when `i mod p = 0` and `j` is inside the buffer.
pub fn adjusted_schedule(i: usize, steps: usize, buffer: usize) -> Result<Schedule> {
    let p = replay_period(steps, buffer)?;
    Ok(schedule_at(i, p, buffer))
}

fn schedule_at(i: usize, p: usize, buffer: usize) -> Schedule {
    let j = i / p;
    if i.is_multiple_of(p) && j < buffer {
        Schedule::Adjust(j)
    } else {
        Schedule::NoAdjust
    }
}

/// `λ Σ ½ F_i (θ_i − θ*_i)²`.
pub fn ewc_penalty(theta: &[f64], theta_star: &[f64], fisher: &[f64], lambda: f64) -> Result<f64> {
    if theta.len() != theta_star.len() {
        return Err(StrategyError::LengthMismatch(theta.len(), theta_star.len()));
    }
    if theta.len() != fisher.len() {
        return Err(StrategyError::LengthMismatch(theta.len(), fisher.len()));
    }
    let sum: f64 = theta
        .iter()
        .zip(theta_star)
        .zip(fisher)
        .map(|((t, a), f)| 0.5 * f * (t - a) * (t - a))
        .sum();
    Ok(lambda * sum)
}

/// Samples per Fisher work unit. Chunk sums are added in order, so the
/// result does not depend on the executor.
const FISHER_CHUNK: usize = 16;

fn sample_gradient(model: &SequenceModel, sample: &TaskSample, form: LossForm) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let batch = Batch::from_samples(&[sample])?;
    let mut rng = seed::rng(0, &[]);
    let out = model.forward(&mut g, &vars, &batch, Mode::Eval, &mut rng)?;
    let loss = task_loss(&mut g, &out, &[sample], form)?;
    g.backward(loss)?;
    Ok(vars.gradient(&g, &model.layout))
}

/// Diagonal Fisher estimate on `samples` in eval mode.
pub fn fisher_diagonal(
    model: &SequenceModel,
    samples: &[&TaskSample],
    form: LossForm,
    mode: FisherMode,
    exec: Executor,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(StrategyError::NoBuffer(0));
    }
    let chunks: Vec<&[&TaskSample]> = samples.chunks(FISHER_CHUNK).collect();
    let partials = exec.map(&chunks, |chunk| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; model.param_count()];
        for s in chunk.iter() {
            let grad = sample_gradient(model, s, form)?;
            for (a, g) in acc.iter_mut().zip(grad) {
                *a += match mode {
                    FisherMode::PerSample => g * g,
                    FisherMode::Aggregate => g,
                };
            }
        }
        Ok(acc)
    });
    let mut total = vec![0.0; model.param_count()];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p?) {
            *t += v;
        }
    }
    let n = samples.len() as f64;
    Ok(match mode {
        FisherMode::PerSample => total.into_iter().map(|v| v / n).collect(),
        FisherMode::Aggregate => total.into_iter().map(|v| (v / n) * (v / n)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub method: Method,
    pub buffer_capacity: usize,
    pub importance: f64,
    pub fisher_mode: FisherMode,
}

/// Mutable state of one strategy across sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyState {
    pub config: StrategyConfig,
    pub buffer: MemoryBuffer,
    pub theta_star: Option<Arc<Vec<f64>>>,
    pub fisher: Option<Arc<Vec<f64>>>,
    /// Sources seen so far, the current one included.
    pub sources_seen: usize,
    pub step_index: usize,
    pub period: Option<usize>,
    /// Adjustment steps taken in the current source.
    pub adjustments: usize,
}

impl StrategyState {
    pub fn new(config: StrategyConfig) -> Self {
        let buffer = MemoryBuffer::new(config.buffer_capacity);
        StrategyState {
            config,
            buffer,
            theta_star: None,
            fisher: None,
            sources_seen: 1,
            step_index: 0,
            period: None,
            adjustments: 0,
        }
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    fn active(&self) -> bool {
        self.sources_seen >= 2 && self.config.method != Method::Baseline
    }

    /// Resets the step counter and fixes `p` for a source of `total_steps`
    /// optimizer steps.
    pub fn begin_source(&mut self, total_steps: usize) -> Result<()> {
        self.step_index = 0;
        self.adjustments = 0;
        self.period = None;
        if self.active() && self.config.method.keeps_buffer() && self.buffer.is_empty() {
            return Err(StrategyError::NoBuffer(self.sources_seen));
        }
        if self.active() && self.config.method.uses_schedule() {
            self.period = Some(replay_period(total_steps, self.buffer.len())?);
        }
        Ok(())
    }

    /// `λ Σ ½ F (θ − θ*)²` on the graph.
    fn penalty(&self, g: &mut Graph, vars: &ParamVars, model: &SequenceModel) -> Result<Var> {
        let (Some(anchor), Some(fisher)) = (&self.theta_star, &self.fisher) else {
            return Err(StrategyError::NoBuffer(self.sources_seen));
        };
        if anchor.len() != model.param_count() {
            return Err(StrategyError::LengthMismatch(model.param_count(), anchor.len()));
        }
        let mut total: Option<Var> = None;
        for (v, e) in vars.0.iter().zip(&model.layout.entries) {
            let q = g.quad_penalty(*v, Arc::clone(anchor), Arc::clone(fisher), e.offset)?;
            total = Some(match total {
                Some(acc) => g.add(acc, q)?,
                None => q,
            });
        }
        let total = total.expect("model has parameters");
        Ok(g.scale(total, self.config.importance))
    }

    fn replay_loss(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        model: &SequenceModel,
        index: usize,
        form: LossForm,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let sample = &self.buffer.entries[index].sample;
        let batch = Batch::from_samples(&[sample])?;
        let out = model.forward(g, vars, &batch, Mode::Train, rng)?;
        Ok(task_loss(g, &out, &[sample], form)?)
    }

    fn weighted(g: &mut Graph, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        let x = g.scale(a, wa);
        let y = g.scale(b, wb);
        Ok(g.add(x, y)?)
    }

    /// Loss of the current optimizer step; advances the step index.
    pub fn step_loss(
        &mut self,
        g: &mut Graph,
        vars: &ParamVars,
        model: &SequenceModel,
        l_curr: Var,
        form: LossForm,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let i = self.step_index;
        self.step_index += 1;
        if !self.active() {
            return Ok(l_curr);
        }
        let s = self.sources_seen;
        let method = self.config.method;
        let curr = if method.uses_ewc() {
            let p = self.penalty(g, vars, model)?;
            g.add(l_curr, p)?
        } else {
            l_curr
        };
        match method {
            Method::Baseline | Method::Ewc => Ok(curr),
            Method::Replay => {
                if self.buffer.is_empty() {
                    return Err(StrategyError::NoBuffer(s));
                }
                let k = rng.random_range(0..self.buffer.len());
                let rep = self.replay_loss(g, vars, model, k, form, rng)?;
                let (wc, wr) = traditional_weights(s);
                Self::weighted(g, curr, wc, rep, wr)
            }
            Method::AdjustedReplay | Method::Combined => {
                let p = self.period.ok_or(StrategyError::NoBuffer(s))?;
                match schedule_at(i, p, self.buffer.len()) {
                    Schedule::NoAdjust => Ok(curr),
                    Schedule::Adjust(j) => {
                        self.adjustments += 1;
                        let rep = self.replay_loss(g, vars, model, j, form, rng)?;
                        let (wc, wr) = adjusted_weights(s);
                        Self::weighted(g, curr, wc, rep, wr)
                    }
                }
            }
        }
    }

    /// Buffer update, snapshot and Fisher after training on `source_id`.
    /// The buffer draw uses `(seed, BUFFER, source_id)`.
    pub fn finish_source(
        &mut self,
        model: &SequenceModel,
        train: &[TaskSample],
        source_id: usize,
        seed_value: u64,
        form: LossForm,
        exec: Executor,
    ) -> Result<()> {
        let method = self.config.method;
        if method.keeps_buffer() {
            let mut rng = seed::rng(seed_value, &[seed::stream::BUFFER, source_id as u64]);
            self.buffer.update(train, source_id, &mut rng);
        }
        if method.uses_ewc() {
            let samples: Vec<&TaskSample> = self.buffer.entries.iter().map(|e| &e.sample).collect();
            let fisher = fisher_diagonal(model, &samples, form, self.config.fisher_mode, exec)?;
            self.theta_star = Some(Arc::new(model.params.clone()));
            self.fisher = Some(Arc::new(fisher));
        }
        self.sources_seen += 1;
        self.step_index = 0;
        self.period = None;
        Ok(())
    }

    /// Stay names and source ids of the buffer, in order.
    pub fn buffer_listing(&self) -> Vec<(String, usize)> {
        self.buffer.entries.iter().map(|e| (e.sample.stay.clone(), e.source)).collect()
    }
}
