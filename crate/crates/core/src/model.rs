//! LSTM and BiLSTM sequence classifiers.
//!
//! Parameters live in one flat vector. The order is, for each layer and
//! then each direction (forward before backward):
//!
//! 1. `w_input`  (`in × 4H`)
//! 2. `w_hidden` (`H × 4H`)
//! 3. `bias`     (`1 × 4H`)
//!
//! followed by the head `weight` (`features × out`) and `bias` (`1 × out`).
//! Gate columns are ordered input, forget, cell, output. Layer inputs are
//! `in = input_width` for the first layer and `H · directions` afterwards.
//!
//! Variable-length batches are right-padded; a padded step leaves the
//! recurrent state untouched, so the forward final state is the state at the
//! last real step and the backward direction starts at each sequence's own
//! end. A bidirectional last-step representation joins the forward final
//! state with the backward state at step 0.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tasks::{TaskKind, TaskSample};
use crate::tensor::{Graph, Mode, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty sequence")]
    EmptySequence,
    #[error("target does not fit the model head: {0}")]
    TargetMismatch(String),
    #[error("input width {got} does not match model width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    LastStep,
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceModelConfig {
    pub input_width: usize,
    pub hidden_width: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
    pub dropout_rate: f64,
    pub output_width: usize,
    pub head_mode: HeadMode,
    pub output: OutputActivation,
}

pub const DEFAULT_DROPOUT: f64 = 0.3;

impl SequenceModelConfig {
    /// Shipped architecture per task: a 2-layer BiLSTM (16) for mortality,
    /// a 1-layer BiLSTM (256) for phenotyping and a causal 1-layer LSTM (64)
    /// for the per-hour tasks.
    pub fn for_task(task: TaskKind) -> Self {
        let (hidden_width, num_layers, bidirectional) = match task {
            TaskKind::Ihm => (16, 2, true),
            TaskKind::Phenotyping => (256, 1, true),
            TaskKind::Decompensation | TaskKind::Los => (64, 1, false),
        };
        SequenceModelConfig {
            input_width: crate::data::schema::INPUT_WIDTH,
            hidden_width,
            num_layers,
            bidirectional,
            dropout_rate: DEFAULT_DROPOUT,
            output_width: task.output_width(),
            head_mode: if task.is_per_step() { HeadMode::PerStep } else { HeadMode::LastStep },
            output: if task == TaskKind::Los { OutputActivation::Softmax } else { OutputActivation::Sigmoid },
        }
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn feature_width(&self) -> usize {
        self.hidden_width * self.directions()
    }

    pub fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width
        } else {
            self.feature_width()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named slices of the flat parameter vector, in storage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn for_config(config: &SequenceModelConfig) -> Self {
        let h = config.hidden_width;
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: [usize; 2]| {
            entries.push(ParamEntry { name, shape, offset });
            offset += shape[0] * shape[1];
        };
        for layer in 0..config.num_layers {
            for dir in 0..config.directions() {
                let d = if dir == 0 { "fwd" } else { "bwd" };
                push(format!("layer{layer}.{d}.w_input"), [config.layer_input_width(layer), 4 * h]);
                push(format!("layer{layer}.{d}.w_hidden"), [h, 4 * h]);
                push(format!("layer{layer}.{d}.bias"), [1, 4 * h]);
            }
        }
        push("head.weight".into(), [config.feature_width(), config.output_width]);
        push("head.bias".into(), [1, config.output_width]);
        ParamLayout { entries, total: offset }
    }

    /// Index of the first entry of `(layer, direction)`.
    fn cell_entry(&self, config: &SequenceModelConfig, layer: usize, dir: usize) -> usize {
        3 * (layer * config.directions() + dir)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    pub config: SequenceModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

/// Parameter leaves of one graph, in layout order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    /// Flat gradient in layout order; parameters backward did not reach get
    /// zeros.
    pub fn gradient(&self, g: &Graph, layout: &ParamLayout) -> Vec<f64> {
        let mut out = vec![0.0; layout.total];
        for (v, e) in self.0.iter().zip(&layout.entries) {
            if let Some(grad) = g.grad(*v) {
                out[e.range()].copy_from_slice(grad);
            }
        }
        out
    }
}

/// One padded minibatch: `steps` tensors of shape `B × width`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&TaskSample]) -> Result<Self> {
        let steps = samples.iter().map(|s| s.steps).max().unwrap_or(0);
        if steps == 0 {
            return Err(ModelError::EmptySequence);
        }
        let width = samples.iter().find(|s| s.steps > 0).map_or(0, |s| s.width());
        let b = samples.len();
        let inputs = (0..steps)
            .map(|t| {
                let mut data = vec![0.0; b * width];
                for (r, s) in samples.iter().enumerate() {
                    if t < s.steps {
                        data[r * width..(r + 1) * width].copy_from_slice(s.row(t));
                    }
                }
                Tensor::new(vec![b, width], data).expect("consistent batch shape")
            })
            .collect();
        Ok(Batch {
            inputs,
            lengths: samples.iter().map(|s| s.steps).collect(),
        })
    }

    /// Equal-length batch from a `B × T × width` row-major buffer.
    pub fn from_dense(data: &[f64], batch: usize, steps: usize, width: usize) -> Result<Self> {
        if steps == 0 {
            return Err(ModelError::EmptySequence);
        }
        if data.len() != batch * steps * width {
            return Err(TensorError::BadLength {
                shape: vec![batch, steps, width],
                len: data.len(),
            }
            .into());
        }
        let inputs = (0..steps)
            .map(|t| {
                let mut step = Vec::with_capacity(batch * width);
                for b in 0..batch {
                    let at = (b * steps + t) * width;
                    step.extend_from_slice(&data[at..at + width]);
                }
                Tensor::new(vec![batch, width], step).expect("consistent batch shape")
            })
            .collect();
        Ok(Batch {
            inputs,
            lengths: vec![steps; batch],
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    fn padded(&self) -> bool {
        self.lengths.iter().any(|&l| l != self.steps())
    }
}

/// Output probabilities: one `B × out` var, or one per step.
#[derive(Clone, Debug)]
pub enum Output {
    LastStep(Var),
    PerStep(Vec<Var>),
}

/// One LSTM step on the graph. `bias_rows` is the bias already expanded to
/// `B × 4H`.
pub fn lstm_cell_step(
    g: &mut Graph,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w_input: Var,
    w_hidden: Var,
    bias_rows: Var,
) -> std::result::Result<(Var, Var), TensorError> {
    let hw = g.value(w_hidden).shape()[0];
    let xi = g.matmul(x, w_input)?;
    let hh = g.matmul(h_prev, w_hidden)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add(pre, bias_rows)?;
    let i = g.slice_last(pre, 0, hw)?;
    let f = g.slice_last(pre, hw, 2 * hw)?;
    let c_hat = g.slice_last(pre, 2 * hw, 3 * hw)?;
    let o = g.slice_last(pre, 3 * hw, 4 * hw)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let c_hat = g.tanh(c_hat);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

impl SequenceModel {
    /// Uniform initialization in `±1/sqrt(H)` from `(seed, INIT)`.
    pub fn init(config: SequenceModelConfig, seed_value: u64) -> Self {
        let layout = ParamLayout::for_config(&config);
        let bound = 1.0 / (config.hidden_width as f64).sqrt();
        let mut rng = seed::rng(seed_value, &[seed::stream::INIT]);
        let params = (0..layout.total).map(|_| rng.random_range(-bound..bound)).collect();
        SequenceModel { config, layout, params }
    }

    pub fn zeros(config: SequenceModelConfig) -> Self {
        let layout = ParamLayout::for_config(&config);
        let params = vec![0.0; layout.total];
        SequenceModel { config, layout, params }
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.layout.entries.iter().find(|e| e.name == name)
    }

    /// Adds every parameter block to `g` as a gradient-tracked leaf.
    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars(
            self.layout
                .entries
                .iter()
                .map(|e| {
                    let t = Tensor::new(e.shape.to_vec(), self.params[e.range()].to_vec()).expect("layout shape");
                    g.param(t)
                })
                .collect(),
        )
    }

    /// Forward pass. `rng` drives dropout in train mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        batch: &Batch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Output> {
        let cfg = &self.config;
        let steps = batch.steps();
        if steps == 0 {
            return Err(ModelError::EmptySequence);
        }
        let width = batch.inputs[0].shape()[1];
        if width != cfg.input_width {
            return Err(ModelError::InputWidth {
                expected: cfg.input_width,
                got: width,
            });
        }
        let b = batch.size();
        let h = cfg.hidden_width;
        let masks: Option<Vec<Var>> = batch.padded().then(|| {
            (0..steps)
                .map(|t| {
                    let data = batch
                        .lengths
                        .iter()
                        .flat_map(|&len| std::iter::repeat_n(if t < len { 1.0 } else { 0.0 }, h))
                        .collect();
                    g.constant(Tensor::new(vec![b, h], data).expect("mask shape"))
                })
                .collect()
        });
        let ones = g.constant(Tensor::ones(&[b, 1]));
        let zero_state = g.constant(Tensor::zeros(&[b, h]));

        let mut seq: Vec<Var> = batch.inputs.iter().map(|x| g.constant(x.clone())).collect();
        let mut finals: Vec<Var> = Vec::new();
        for layer in 0..cfg.num_layers {
            let mut dir_outputs = Vec::with_capacity(cfg.directions());
            finals.clear();
            for dir in 0..cfg.directions() {
                let e = self.layout.cell_entry(cfg, layer, dir);
                let (wi, wh, bias) = (vars.0[e], vars.0[e + 1], vars.0[e + 2]);
                let bias_rows = g.matmul(ones, bias)?;
                let (mut hs, mut cs) = (zero_state, zero_state);
                let mut outs = vec![zero_state; steps];
                let order: Box<dyn Iterator<Item = usize>> =
                    if dir == 0 { Box::new(0..steps) } else { Box::new((0..steps).rev()) };
                for t in order {
                    let (hn, cn) = lstm_cell_step(g, seq[t], hs, cs, wi, wh, bias_rows)?;
                    if let Some(m) = &masks {
                        hs = carry(g, hs, hn, m[t])?;
                        cs = carry(g, cs, cn, m[t])?;
                    } else {
                        hs = hn;
                        cs = cn;
                    }
                    outs[t] = hs;
                }
                finals.push(hs);
                dir_outputs.push(outs);
            }
            seq = if cfg.directions() == 1 {
                dir_outputs.pop().expect("one direction")
            } else {
                (0..steps)
                    .map(|t| g.concat_last(&[dir_outputs[0][t], dir_outputs[1][t]]))
                    .collect::<std::result::Result<_, _>>()?
            };
            if cfg.num_layers > 1 {
                let is_last = layer + 1 == cfg.num_layers;
                if !is_last || cfg.head_mode == HeadMode::PerStep {
                    for x in seq.iter_mut() {
                        *x = g.dropout(*x, cfg.dropout_rate, mode, rng)?;
                    }
                }
            }
        }

        let n = vars.0.len();
        let (head_w, head_b) = (vars.0[n - 2], vars.0[n - 1]);
        let head_bias = g.matmul(ones, head_b)?;
        let head = |g: &mut Graph, feat: Var| -> Result<Var> {
            let z = g.matmul(feat, head_w)?;
            let z = g.add(z, head_bias)?;
            Ok(match cfg.output {
                OutputActivation::Sigmoid => g.sigmoid(z),
                OutputActivation::Softmax => g.softmax_last(z),
            })
        };
        match cfg.head_mode {
            HeadMode::LastStep => {
                let mut feat = if finals.len() == 1 { finals[0] } else { g.concat_last(&finals)? };
                if cfg.num_layers > 1 {
                    feat = g.dropout(feat, cfg.dropout_rate, mode, rng)?;
                }
                Ok(Output::LastStep(head(g, feat)?))
            }
            HeadMode::PerStep => Ok(Output::PerStep(
                seq.into_iter().map(|x| head(g, x)).collect::<Result<_>>()?,
            )),
        }
    }

    /// Eval-mode probabilities: per sample, `out` values (last step) or
    /// `steps × out` values (per step, padded rows dropped).
    pub fn predict(&self, samples: &[&TaskSample]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.register_constants(&mut g);
        let batch = Batch::from_samples(samples)?;
        let mut rng = seed::rng(0, &[]);
        let out = self.forward(&mut g, &vars, &batch, Mode::Eval, &mut rng)?;
        let width = self.config.output_width;
        Ok(match out {
            Output::LastStep(v) => g.value(v).data().chunks(width).map(<[f64]>::to_vec).collect(),
            Output::PerStep(vs) => (0..samples.len())
                .map(|r| {
                    (0..batch.lengths[r])
                        .flat_map(|t| g.value(vs[t]).data()[r * width..(r + 1) * width].to_vec())
                        .collect()
                })
                .collect(),
        })
    }

    /// Parameters as constants, for inference without a gradient tape.
    fn register_constants(&self, g: &mut Graph) -> ParamVars {
        ParamVars(
            self.layout
                .entries
                .iter()
                .map(|e| g.constant(Tensor::new(e.shape.to_vec(), self.params[e.range()].to_vec()).expect("layout")))
                .collect(),
        )
    }

    /// FNV-1a over the little-endian parameter bytes.
    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
    }
}

/// `prev + m ⊙ (new − prev)`.
fn carry(g: &mut Graph, prev: Var, new: Var, mask: Var) -> std::result::Result<Var, TensorError> {
    let d = g.sub(new, prev)?;
    let d = g.mul(mask, d)?;
    g.add(prev, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: SequenceModelConfig,
    pub layout: ParamLayout,
    pub seed: u64,
    /// Sources the parameters were trained on, in order.
    pub sources: Vec<String>,
    pub blob: String,
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian f64 in layout order).
pub fn save_checkpoint(model: &SequenceModel, seed_value: u64, sources: &[String], stem: &Path) -> Result<()> {
    let err = |msg: String| ModelError::Checkpoint {
        path: stem.display().to_string(),
        msg,
    };
    let blob = stem.with_extension("bin");
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        layout: model.layout.clone(),
        seed: seed_value,
        sources: sources.to_vec(),
        blob: blob.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| err(e.to_string()))?;
    fs::write(stem.with_extension("json"), json).map_err(|e| err(e.to_string()))?;
    let bytes: Vec<u8> = model.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(&blob, bytes).map_err(|e| err(e.to_string()))
}

pub fn load_checkpoint(stem: &Path) -> Result<(SequenceModel, CheckpointManifest)> {
    let err = |msg: String| ModelError::Checkpoint {
        path: stem.display().to_string(),
        msg,
    };
    let text = fs::read_to_string(stem.with_extension("json")).map_err(|e| err(e.to_string()))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    let blob_path = stem.with_file_name(&manifest.blob);
    let bytes = fs::read(blob_path).map_err(|e| err(e.to_string()))?;
    if bytes.len() != manifest.layout.total * 8 {
        return Err(err(format!("blob has {} bytes, expected {}", bytes.len(), manifest.layout.total * 8)));
    }
    if manifest.layout != ParamLayout::for_config(&manifest.config) {
        return Err(err("layout does not match config".into()));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = SequenceModel {
        config: manifest.config.clone(),
        layout: manifest.layout.clone(),
        params,
    };
    Ok((model, manifest))
}
