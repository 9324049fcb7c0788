//! Decoder-only pre-norm transformer with ReLU MLPs.
//!
//! Every forward pass exposes one [`ActivationTap`] per layer: the MLP hidden
//! activations captured after the ReLU (and after any unit mask), before the
//! second dense layer.

mod checkpoint;
mod optimizer;
mod schedule;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optimizer::{AdamW, AdamWConfig};
pub use schedule::ScheduleConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the non-MLP kernels are initialised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// LeCun normal for every kernel and embedding table.
    #[default]
    LecunAll,
    /// LeCun normal for the MLP kernels only; other kernels N(0, 0.02²).
    LecunMlpOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// MLP hidden width of each layer.
    pub d_hidden: Vec<usize>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            d_hidden: vec![512; 6],
            vocab_size: 256,
            seq_len: 128,
            seed: 0,
            init: InitScheme::LecunAll,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_hidden.len() != self.n_layers {
            return fail(format!(
                "d_hidden has {} entries but n_layers is {}",
                self.d_hidden.len(),
                self.n_layers
            ));
        }
        if self.d_hidden.contains(&0) {
            return fail("every d_hidden entry must be at least 1".into());
        }
        if self.vocab_size == 0 || self.seq_len == 0 {
            return fail("vocab_size and seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embed = self.vocab_size * d + self.seq_len * d;
        let blocks: usize = self
            .d_hidden
            .iter()
            .map(|&h| 4 * d + 4 * d * d + 2 * d * h + h + d)
            .sum();
        embed + blocks + 2 * d + d * self.vocab_size + self.vocab_size
    }
}

/// Post-ReLU MLP hidden activations of one layer, shaped `[batch, seq, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTap<T: Scalar = f32> {
    pub layer: usize,
    pub values: Tensor<T>,
}

impl<T: Scalar> ActivationTap<T> {
    pub fn new(layer: usize, values: Tensor<T>) -> std::result::Result<Self, TensorError> {
        if values.shape().len() != 3 {
            return Err(TensorError::Shape {
                op: "activation_tap",
                expected: "[batch, seq, hidden]".into(),
                found: format!("{:?}", values.shape()),
            });
        }
        Ok(Self { layer, values })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn seq(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.values.shape()[2]
    }

    /// The `[seq, hidden]` block of one sequence.
    pub fn sequence(&self, b: usize) -> &[T] {
        let block = self.seq() * self.hidden();
        &self.values.data()[b * block..(b + 1) * block]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Scalar = f32> {
    pub attn_norm_gain: Tensor<T>,
    pub attn_norm_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm_gain: Tensor<T>,
    pub mlp_norm_bias: Tensor<T>,
    /// `[d_model, d_hidden]`
    pub mlp_in: Tensor<T>,
    pub mlp_in_bias: Tensor<T>,
    /// `[d_hidden, d_model]`
    pub mlp_out: Tensor<T>,
    pub mlp_out_bias: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    const NAMES: [&'static str; 12] = [
        "attn_norm_gain",
        "attn_norm_bias",
        "wq",
        "wk",
        "wv",
        "wo",
        "mlp_norm_gain",
        "mlp_norm_bias",
        "mlp_in",
        "mlp_in_bias",
        "mlp_out",
        "mlp_out_bias",
    ];

    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm_gain,
            &self.mlp_norm_bias,
            &self.mlp_in,
            &self.mlp_in_bias,
            &self.mlp_out,
            &self.mlp_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm_gain,
            &mut self.mlp_norm_bias,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }
}

/// Full parameter set. Iteration order (see [`Params::named`]) is stable and
/// defines the layout of optimizer state and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Scalar = f32> {
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm_gain: Tensor<T>,
    pub final_norm_bias: Tensor<T>,
    pub unembed: Tensor<T>,
    pub unembed_bias: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, t) in BlockParams::<T>::NAMES.iter().zip(block.tensors()) {
                out.push((format!("blocks.{}.{}", l, name), t));
            }
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("final_norm_bias".into(), &self.final_norm_bias));
        out.push(("unembed".into(), &self.unembed));
        out.push(("unembed_bias".into(), &self.unembed_bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out.push(&mut self.unembed);
        out.push(&mut self.unembed_bias);
        out
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            blocks: Vec::new(),
            final_norm_gain: self.final_norm_gain.cast(),
            final_norm_bias: self.final_norm_bias.cast(),
            unembed: self.unembed.cast(),
            unembed_bias: self.unembed_bias.cast(),
        };
        for b in &self.blocks {
            let t = b.tensors();
            out.blocks.push(BlockParams {
                attn_norm_gain: t[0].cast(),
                attn_norm_bias: t[1].cast(),
                wq: t[2].cast(),
                wk: t[3].cast(),
                wv: t[4].cast(),
                wo: t[5].cast(),
                mlp_norm_gain: t[6].cast(),
                mlp_norm_bias: t[7].cast(),
                mlp_in: t[8].cast(),
                mlp_in_bias: t[9].cast(),
                mlp_out: t[10].cast(),
                mlp_out_bias: t[11].cast(),
            });
        }
        out
    }

    /// Rebuilds a parameter set from tensors in [`Params::named`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let template = Params::<T>::zeros(config);
        let shapes: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if shapes.len() != tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (s, t)) in shapes.iter().zip(&tensors).enumerate() {
            if s.as_slice() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    i,
                    t.shape(),
                    s
                )));
            }
        }
        let mut out = template;
        for (slot, t) in out.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(out)
    }

    fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Params {
            token_embedding: Tensor::zeros(&[config.vocab_size, d]),
            position_embedding: Tensor::zeros(&[config.seq_len, d]),
            blocks: config
                .d_hidden
                .iter()
                .map(|&h| BlockParams {
                    attn_norm_gain: Tensor::zeros(&[d]),
                    attn_norm_bias: Tensor::zeros(&[d]),
                    wq: Tensor::zeros(&[d, d]),
                    wk: Tensor::zeros(&[d, d]),
                    wv: Tensor::zeros(&[d, d]),
                    wo: Tensor::zeros(&[d, d]),
                    mlp_norm_gain: Tensor::zeros(&[d]),
                    mlp_norm_bias: Tensor::zeros(&[d]),
                    mlp_in: Tensor::zeros(&[d, h]),
                    mlp_in_bias: Tensor::zeros(&[h]),
                    mlp_out: Tensor::zeros(&[h, d]),
                    mlp_out_bias: Tensor::zeros(&[d]),
                })
                .collect(),
            final_norm_gain: Tensor::zeros(&[d]),
            final_norm_bias: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[d, config.vocab_size]),
            unembed_bias: Tensor::zeros(&[config.vocab_size]),
        }
    }
}

fn normal_fill(rng: &mut ChaCha8Rng, t: &mut Tensor<f32>, std: f64) {
    let dist = Normal::new(0.0, std).expect("positive std");
    for v in t.data_mut() {
        *v = dist.sample(rng) as f32;
    }
}

fn lecun_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Draws a fresh parameter set. Kernels are `N(0, 1/fan_in)`; layer-norm
/// gains are one; every bias is exactly zero. Embedding tables use
/// `fan_in = d_model`.
pub fn init_params(config: &ModelConfig) -> Result<Params<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = Params::<f32>::zeros(config);
    let d = config.d_model;
    let other_std = |fan_in: usize| match config.init {
        InitScheme::LecunAll => lecun_std(fan_in),
        InitScheme::LecunMlpOnly => 0.02,
    };
    normal_fill(&mut rng, &mut p.token_embedding, other_std(d));
    normal_fill(&mut rng, &mut p.position_embedding, other_std(d));
    for (block, &h) in p.blocks.iter_mut().zip(&config.d_hidden) {
        block.attn_norm_gain = Tensor::full(&[d], 1.0);
        block.mlp_norm_gain = Tensor::full(&[d], 1.0);
        for w in [&mut block.wq, &mut block.wk, &mut block.wv, &mut block.wo] {
            normal_fill(&mut rng, w, other_std(d));
        }
        normal_fill(&mut rng, &mut block.mlp_in, lecun_std(d));
        normal_fill(&mut rng, &mut block.mlp_out, lecun_std(h));
    }
    p.final_norm_gain = Tensor::full(&[d], 1.0);
    normal_fill(&mut rng, &mut p.unembed, other_std(d));
    Ok(p)
}

/// Parameter handles of one recorded forward pass.
pub struct Recorded {
    pub params: Vec<Var>,
    pub logits: Var,
    pub taps: Vec<Var>,
}

/// Records a forward pass on `graph`.
///
/// `tokens` holds `batch * seq` ids in row-major order; `mask`, when given,
/// holds one keep-vector per layer applied to the post-ReLU activations.
pub fn record_forward<T: Scalar>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    batch: usize,
    mask: Option<&[Vec<bool>]>,
) -> Result<Recorded> {
    if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
        return Err(ModelError::Argument(format!(
            "{} tokens cannot be split into {} sequences",
            tokens.len(),
            batch
        )));
    }
    let seq = tokens.len() / batch;
    if seq > config.seq_len {
        return Err(ModelError::Argument(format!(
            "sequence length {} exceeds the configured {}",
            seq, config.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(TensorError::Index {
            op: "forward",
            index: bad,
            bound: config.vocab_size,
        }
        .into());
    }
    if let Some(m) = mask {
        if m.len() != config.n_layers {
            return Err(ModelError::Argument(format!(
                "mask has {} layers, model has {}",
                m.len(),
                config.n_layers
            )));
        }
        for (l, (keep, &h)) in m.iter().zip(&config.d_hidden).enumerate() {
            if keep.len() != h {
                return Err(ModelError::Argument(format!(
                    "mask for layer {} has {} units, layer has {}",
                    l,
                    keep.len(),
                    h
                )));
            }
        }
    }

    let vars: Vec<Var> = params.tensors().into_iter().map(|t| graph.param(t.clone())).collect();
    let per_block = BlockParams::<T>::NAMES.len();
    let block_var = |l: usize, i: usize| vars[2 + l * per_block + i];
    let tail = 2 + config.n_layers * per_block;

    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = graph.embedding(vars[0], tokens)?;
    let pos = graph.embedding(vars[1], &positions)?;
    let mut x = graph.add(tok, pos)?;
    let mut taps = Vec::with_capacity(config.n_layers);

    for l in 0..config.n_layers {
        let h = graph.layer_norm(x, block_var(l, 0), block_var(l, 1))?;
        let q = graph.matmul(h, block_var(l, 2))?;
        let k = graph.matmul(h, block_var(l, 3))?;
        let v = graph.matmul(h, block_var(l, 4))?;
        let a = graph.causal_attention(q, k, v, batch, seq, config.n_heads)?;
        let a = graph.matmul(a, block_var(l, 5))?;
        x = graph.add(x, a)?;

        let h = graph.layer_norm(x, block_var(l, 6), block_var(l, 7))?;
        let u = graph.matmul(h, block_var(l, 8))?;
        let u = graph.add_bias(u, block_var(l, 9))?;
        let mut u = graph.relu(u)?;
        if let Some(m) = mask {
            u = graph.mask_units(u, &m[l])?;
        }
        taps.push(u);
        let o = graph.matmul(u, block_var(l, 10))?;
        let o = graph.add_bias(o, block_var(l, 11))?;
        x = graph.add(x, o)?;
    }

    let h = graph.layer_norm(x, vars[tail], vars[tail + 1])?;
    let logits = graph.matmul(h, vars[tail + 2])?;
    let logits = graph.add_bias(logits, vars[tail + 3])?;
    Ok(Recorded {
        params: vars,
        logits,
        taps,
    })
}

/// Extracts the recorded taps as `[batch, seq, hidden]` tensors.
pub fn collect_taps<T: Scalar>(
    graph: &Graph<T>,
    recorded: &Recorded,
    batch: usize,
) -> Result<Vec<ActivationTap<T>>> {
    recorded
        .taps
        .iter()
        .enumerate()
        .map(|(layer, &var)| {
            let v = graph.value(var)?;
            let (rows, hidden) = (v.shape()[0], v.shape()[1]);
            let values = v.clone().reshape(&[batch, rows / batch, hidden])?;
            Ok(ActivationTap { layer, values })
        })
        .collect()
}

/// Inference-only forward pass returning `[batch * seq, vocab]` logits and
/// per-layer taps.
pub fn forward<T: Scalar>(
    config: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    batch: usize,
    mask: Option<&[Vec<bool>]>,
) -> Result<(Tensor<T>, Vec<ActivationTap<T>>)> {
    let mut graph = Graph::new();
    let rec = record_forward(&mut graph, config, params, tokens, batch, mask)?;
    let taps = collect_taps(&graph, &rec, batch)?;
    Ok((graph.value(rec.logits)?.clone(), taps))
}

/// Next-token batch: `inputs[i]` is followed by `targets[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
}

impl Batch {
    pub fn seq(&self) -> usize {
        self.inputs.len() / self.batch
    }
}

/// Mean loss and top-1 accuracy of a batch, without recording gradients.
pub fn evaluate(
    config: &ModelConfig,
    params: &Params<f32>,
    batch: &Batch,
    mask: Option<&[Vec<bool>]>,
) -> Result<(f64, f64)> {
    let mut graph = Graph::new();
    let rec = record_forward(&mut graph, config, params, &batch.inputs, batch.batch, mask)?;
    let loss = graph.softmax_cross_entropy(rec.logits, &batch.targets)?;
    let logits = graph.value(rec.logits)?;
    let vocab = logits.last_dim();
    let correct = logits
        .data()
        .chunks(vocab)
        .zip(&batch.targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best == t
        })
        .count();
    Ok((
        graph.value(loss)?.data()[0] as f64,
        correct as f64 / batch.targets.len() as f64,
    ))
}

/// Result of one optimisation step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub lr: f64,
    pub taps: Vec<ActivationTap>,
}

/// Model parameters together with optimizer state and schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: ModelConfig,
    pub schedule: ScheduleConfig,
    pub params: Params<f32>,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn new(config: ModelConfig, schedule: ScheduleConfig, optimizer: AdamWConfig) -> Result<Self> {
        schedule.validate()?;
        let params = init_params(&config)?;
        let optimizer = AdamW::new(optimizer, &params);
        Ok(Self {
            config,
            schedule,
            params,
            optimizer,
        })
    }

    /// Number of completed updates.
    pub fn step(&self) -> u64 {
        self.optimizer.step()
    }

    /// Forward, backward and one AdamW update at `lr_at(step + 1)`.
    ///
    /// Returned taps reflect the pre-update parameters with the mask applied.
    pub fn train_step(&mut self, batch: &Batch, mask: Option<&[Vec<bool>]>) -> Result<StepOutput> {
        let step = self.step();
        let lr = self.schedule.lr_at(step + 1)?;
        let pass = loss_and_gradients(&self.config, &self.params, batch, mask).map_err(|e| match e {
            ModelError::Tensor(TensorError::NonFinite { .. }) => ModelError::Divergence { step },
            other => other,
        })?;
        self.optimizer.update(&mut self.params, &pass.gradients, lr);
        if !self.params.tensors().iter().all(|t| t.all_finite()) {
            return Err(ModelError::Divergence { step });
        }
        Ok(StepOutput {
            loss: pass.loss,
            lr,
            taps: pass.taps,
        })
    }
}

/// Loss, taps and parameter gradients (in [`Params::tensors`] order) for one batch.
pub struct GradientPass<T: Scalar> {
    pub loss: f64,
    pub taps: Vec<ActivationTap<T>>,
    pub gradients: Vec<Tensor<T>>,
}

pub fn loss_and_gradients<T: Scalar>(
    config: &ModelConfig,
    params: &Params<T>,
    batch: &Batch,
    mask: Option<&[Vec<bool>]>,
) -> Result<GradientPass<T>> {
    let mut graph = Graph::new();
    let rec = record_forward(&mut graph, config, params, &batch.inputs, batch.batch, mask)?;
    let loss = graph.softmax_cross_entropy(rec.logits, &batch.targets)?;
    let loss_value = graph.value(loss)?.data()[0].to_f64().unwrap_or(f64::NAN);
    let taps = collect_taps(&graph, &rec, batch.batch)?;
    let mut grads = graph.backward(loss)?;
    let gradients = rec
        .params
        .iter()
        .map(|&v| grads.take(v))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(GradientPass {
        loss: loss_value,
        taps,
        gradients,
    })
}
