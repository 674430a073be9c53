//! Losses, Adam and the per-source training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, KappaWeighting, MetricError};
use crate::model::{Batch, ModelError, Output, SequenceModel};
use crate::par::Executor;
use crate::seed;
use crate::strategy::{StrategyError, StrategyState};
use crate::tasks::{Target, TaskKind, TaskSample, FIRST_STEP_HOUR, LOS_CLASSES};
use crate::tensor::{Graph, Mode, TensorError, Var, PROB_FLOOR};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("source has no training samples")]
    EmptySource,
    #[error("gradient has {got} entries, parameters {expected}")]
    MissingGradient { expected: usize, got: usize },
    #[error("score row {row} sums to {sum}")]
    NotNormalized { row: usize, sum: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("validation log {path}: {source}")]
    Log {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, TrainError>;

/// Loss for the length-of-stay head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossForm {
    /// `−Σ_c [y_c log ŷ_c + (1 − y_c) log(1 − ŷ_c)]` per sample.
    #[default]
    PerClassBinary,
    /// `−log ŷ_y` per sample.
    Categorical,
}

/// Mean binary cross-entropy over every entry, probabilities floored at
/// [`PROB_FLOOR`].
pub fn bce_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(TrainError::ShapeMismatch(format!("{} scores, {} targets", scores.len(), targets.len())));
    }
    let total: f64 = scores
        .iter()
        .zip(targets)
        .map(|(&p, &y)| -(y * p.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(PROB_FLOOR).ln()))
        .sum();
    Ok(total / scores.len() as f64)
}

/// Length-of-stay loss over `n × classes` probability rows, averaged over
/// samples.
pub fn ce_loss(scores: &[f64], targets: &[usize], classes: usize, form: LossForm) -> Result<f64> {
    if classes == 0 || scores.len() != targets.len() * classes || targets.is_empty() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} scores for {} targets × {classes} classes",
            scores.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (r, (row, &y)) in scores.chunks(classes).zip(targets).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TrainError::NotNormalized { row: r, sum });
        }
        if y >= classes {
            return Err(TrainError::ShapeMismatch(format!("class {y} outside 0..{classes}")));
        }
        total += match form {
            LossForm::PerClassBinary => row
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    if c == y {
                        -p.max(PROB_FLOOR).ln()
                    } else {
                        -(1.0 - p).max(PROB_FLOOR).ln()
                    }
                })
                .sum::<f64>(),
            LossForm::Categorical => -row[y].max(PROB_FLOOR).ln(),
        };
    }
    Ok(total / targets.len() as f64)
}

fn per_step_label_row(sample: &TaskSample, t: usize) -> Option<usize> {
    let first = FIRST_STEP_HOUR - 1;
    (t >= first && t - first < sample.target.label_count()).then(|| t - first)
}

/// Task loss of a forward pass over `samples`, as a graph node.
///
/// Sequence-level tasks average over samples (and labels for
/// phenotyping); per-step tasks average over the labelled steps.
pub fn task_loss(
    g: &mut Graph,
    output: &Output,
    samples: &[&TaskSample],
    form: LossForm,
) -> std::result::Result<Var, ModelError> {
    let b = samples.len();
    match output {
        Output::LastStep(probs) => {
            let mut targets = Vec::new();
            for s in samples {
                match &s.target {
                    Target::Binary(y) => targets.push(f64::from(u8::from(*y))),
                    Target::MultiLabel(ys) => targets.extend(ys.iter().map(|&y| f64::from(u8::from(y)))),
                    _ => return Err(shape_err("last-step head with per-step target")),
                }
            }
            let width = g.value(*probs).last_dim();
            Ok(g.binary_cross_entropy(*probs, &targets, &vec![1.0; b], (b * width) as f64)?)
        }
        Output::PerStep(steps) => {
            let labels: usize = samples.iter().map(|s| s.target.label_count()).sum();
            if labels == 0 {
                return Err(shape_err("batch without labels"));
            }
            let norm = labels as f64;
            let mut total: Option<Var> = None;
            for (t, &probs) in steps.iter().enumerate() {
                let width = g.value(probs).last_dim();
                let mut targets = vec![0.0; b * width];
                let mut weights = vec![0.0; b];
                for (r, s) in samples.iter().enumerate() {
                    let Some(k) = per_step_label_row(s, t) else { continue };
                    weights[r] = 1.0;
                    match &s.target {
                        Target::PerStepBinary(v) => targets[r * width] = f64::from(u8::from(v[k])),
                        Target::PerStepClass(v) => targets[r * width + v[k] as usize] = 1.0,
                        _ => return Err(shape_err("per-step head with sequence target")),
                    }
                }
                if weights.iter().all(|&w| w == 0.0) {
                    continue;
                }
                let is_class = matches!(samples[0].target, Target::PerStepClass(_));
                let l = if is_class && form == LossForm::Categorical {
                    g.categorical_nll(probs, &targets, &weights, norm)?
                } else {
                    g.binary_cross_entropy(probs, &targets, &weights, norm)?
                };
                total = Some(match total {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
            total.ok_or_else(|| shape_err("batch without labels"))
        }
    }
}

fn shape_err(msg: &str) -> ModelError {
    ModelError::TargetMismatch(msg.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 8;

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::MissingGradient {
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub task: TaskKind,
    pub loss_form: LossForm,
}

impl TrainConfig {
    /// Epochs per task: 4 (mortality), 6 (phenotyping), 1 (per-hour tasks).
    pub fn default_epochs(task: TaskKind) -> usize {
        match task {
            TaskKind::Ihm => 4,
            TaskKind::Phenotyping => 6,
            TaskKind::Decompensation | TaskKind::Los => 1,
        }
    }

    pub fn for_task(task: TaskKind, seed_value: u64) -> Self {
        TrainConfig {
            epochs: Self::default_epochs(task),
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LR,
            seed: seed_value,
            task,
            loss_form: LossForm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn steps_per_source(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

/// Metric values of one evaluation, primary metric first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn primary(&self) -> f64 {
        self.metrics[0].1
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Primary and secondary metric names per task.
pub fn metric_names(task: TaskKind) -> [&'static str; 2] {
    match task {
        TaskKind::Ihm | TaskKind::Decompensation => ["auc_roc", "auc_pr"],
        TaskKind::Los => ["kappa", "mad"],
        TaskKind::Phenotyping => ["macro_auc", "micro_auc"],
    }
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode metrics of `model` on `samples`. Parameters are read only.
pub fn evaluate(model: &SequenceModel, samples: &[TaskSample], task: TaskKind, exec: Executor) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(TrainError::Metric(MetricError::EmptyInput));
    }
    let chunks: Vec<&[TaskSample]> = samples.chunks(EVAL_CHUNK).collect();
    let preds = exec.map(&chunks, |chunk| {
        let refs: Vec<&TaskSample> = chunk.iter().collect();
        model.predict(&refs)
    });
    let mut scores: Vec<f64> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    let mut pred_classes: Vec<usize> = Vec::new();
    let mut true_classes: Vec<usize> = Vec::new();
    let width = model.config.output_width;
    for (chunk, p) in chunks.iter().zip(preds) {
        for (s, out) in chunk.iter().zip(p?) {
            match &s.target {
                Target::Binary(y) => {
                    scores.push(out[0]);
                    labels.push(*y);
                }
                Target::MultiLabel(ys) => {
                    scores.extend_from_slice(&out);
                    labels.extend_from_slice(ys);
                }
                Target::PerStepBinary(ys) => {
                    for (k, &y) in ys.iter().enumerate() {
                        scores.push(out[(FIRST_STEP_HOUR - 1 + k) * width]);
                        labels.push(y);
                    }
                }
                Target::PerStepClass(ys) => {
                    for (k, &y) in ys.iter().enumerate() {
                        let row = &out[(FIRST_STEP_HOUR - 1 + k) * width..(FIRST_STEP_HOUR + k) * width];
                        pred_classes.push(argmax(row));
                        true_classes.push(y as usize);
                    }
                }
            }
        }
    }
    let [first, second] = metric_names(task);
    let metrics = match task {
        TaskKind::Ihm | TaskKind::Decompensation => vec![
            (first.to_string(), metrics::auc_roc(&scores, &labels)?),
            (second.to_string(), metrics::auc_pr(&scores, &labels)?),
        ],
        TaskKind::Los => vec![
            (
                first.to_string(),
                metrics::cohen_kappa(&pred_classes, &true_classes, LOS_CLASSES, KappaWeighting::Linear)?,
            ),
            (second.to_string(), metrics::mad(&pred_classes, &true_classes)?),
        ],
        TaskKind::Phenotyping => {
            let mm = metrics::macro_micro_auc(&scores, &labels, crate::data::NUM_PHENOTYPES)?;
            vec![(first.to_string(), mm.macro_auc), (second.to_string(), mm.micro_auc)]
        }
    };
    Ok(Evaluation { metrics })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One line of the validation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub source: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

pub fn append_validation_log(path: &Path, entries: &[ValidationEntry]) -> Result<()> {
    let err = |source| TrainError::Log {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
    for e in entries {
        let line = serde_json::to_string(e).expect("plain struct serializes");
        writeln!(f, "{line}").map_err(err)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub validation: Vec<ValidationEntry>,
    pub steps: usize,
}

/// A named evaluation set.
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub samples: &'a [TaskSample],
}

/// Trains `model` on one source.
///
/// Every epoch shuffles with `(seed, source, epoch)`, takes one Adam step
/// per minibatch on the strategy's step loss, then evaluates each
/// validation set in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn train_on_source(
    model: &mut SequenceModel,
    adam: &mut AdamState,
    train: &[TaskSample],
    source_index: usize,
    config: &TrainConfig,
    strategy: &mut StrategyState,
    validation: &[EvalSet<'_>],
    exec: Executor,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySource);
    }
    let src = source_index as u64;
    let batches = train.len().div_ceil(config.batch_size);
    strategy.begin_source(config.epochs * batches)?;
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(config.seed, &[seed::stream::SHUFFLE, src, epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let step = (epoch * batches + b) as u64;
            let samples: Vec<&TaskSample> = idx.iter().map(|&i| &train[i]).collect();
            let mut rng = seed::rng(config.seed, &[seed::stream::DROPOUT, src, step]);
            let mut g = Graph::new();
            let vars = model.register(&mut g);
            let batch = Batch::from_samples(&samples)?;
            let out = model.forward(&mut g, &vars, &batch, Mode::Train, &mut rng)?;
            let l_curr = task_loss(&mut g, &out, &samples, config.loss_form)?;
            let loss = strategy.step_loss(&mut g, &vars, model, l_curr, config.loss_form, &mut rng)?;
            loss_sum += g.value(loss).item();
            g.backward(loss)?;
            let grads = vars.gradient(&g, &model.layout);
            adam_step(&mut model.params, &grads, adam)?;
            report.steps += 1;
        }
        report.epoch_losses.push(loss_sum / batches as f64);
        for set in validation {
            let eval = evaluate(model, set.samples, config.task, exec)?;
            for (metric, value) in eval.metrics {
                report.validation.push(ValidationEntry {
                    source: set.name.to_string(),
                    epoch: epoch + 1,
                    metric,
                    value,
                });
            }
        }
    }
    Ok(report)
}

/// Mean task loss of `model` on `samples` in eval mode.
pub fn mean_loss(model: &SequenceModel, samples: &[TaskSample], form: LossForm) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&TaskSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let vars = model.register(&mut g);
        let batch = Batch::from_samples(&refs)?;
        let mut rng = seed::rng(0, &[]);
        let out = model.forward(&mut g, &vars, &batch, Mode::Eval, &mut rng)?;
        let l = task_loss(&mut g, &out, &refs, form)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_reference_values() {
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1e-11);
        let expected = -0.5 * (0.9f64.ln() + 0.9f64.ln());
        assert!((bce_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.105361).abs() < 1e-6);
    }

    #[test]
    fn ce_reference_values() {
        let uniform = vec![0.1; 10];
        let v = ce_loss(&uniform, &[3], 10, LossForm::PerClassBinary).unwrap();
        assert!((v - (-(0.1f64.ln()) - 9.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((v - 3.250830).abs() < 1e-6);
        let mut onehot = vec![0.0; 10];
        onehot[4] = 1.0;
        assert!(ce_loss(&onehot, &[4], 10, LossForm::PerClassBinary).unwrap() <= 1e-10);
        let two = ce_loss(&[0.3, 0.7], &[1], 2, LossForm::PerClassBinary).unwrap();
        assert!((two - 2.0 * bce_loss(&[0.7], &[1.0]).unwrap()).abs() < 1e-15);
        assert!(matches!(
            ce_loss(&[0.3, 0.3], &[1], 2, LossForm::PerClassBinary),
            Err(TrainError::NotNormalized { .. })
        ));
    }

    #[test]
    fn adam_reference_behaviour() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2, 1e-3);
        adam_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut p = vec![0.0];
        let mut st = AdamState::new(1, 1e-3);
        adam_step(&mut p, &[5.0], &mut st).unwrap();
        assert!((p[0].abs() - 1e-3).abs() < 1e-9);
        let mut theta = vec![1.0];
        let mut st = AdamState::new(1, 0.1);
        let mut last = 1.0f64;
        for _ in 0..10 {
            let g = 2.0 * theta[0];
            adam_step(&mut theta, &[g], &mut st).unwrap();
            assert!(theta[0].abs() < last);
            last = theta[0].abs();
        }
        assert!(matches!(adam_step(&mut theta, &[], &mut st), Err(TrainError::MissingGradient { .. })));
    }
}
