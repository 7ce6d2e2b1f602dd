//! Toy pre-norm transformer block and block-wise codebook calibration.
//!
//! The block follows the seven-projection layout: causal multi-head
//! attention (q, k, v, o) and a gated MLP (up, gate, down), each wrapped
//! in an RMS-norm residual branch. The compressed variant swaps every
//! projection for a codebook + fixed codes and reconstructs the weight on
//! the fly, so gradients flow into centroids only.
//!
//! Calibration minimizes the mean squared difference between the dense
//! block's outputs on `x` and the compressed block's outputs on `x_prime`
//! by codebook-only optimizer steps, tracking the best held-out loss.

use crate::codec::{compress_layer, CompressedLayer};
use crate::error::{invalid, Error, Result};
use crate::kmeans::KMeansConfig;
use crate::matrix::Matrix;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::det_rng;
use crate::tape::{NodeId, Real, Tape, Tensor};
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;
use thiserror::Error as ThisError;

pub const RMS_EPS: f32 = 1e-5;

/// The seven projection names, in staging order.
pub const LAYER_NAMES: [&str; 7] = [
    "q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "gate_proj", "down_proj",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub model_dim: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
}

impl BlockShape {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.mlp_dim == 0 {
            return Err(invalid("block dimensions must be nonzero"));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(invalid(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Dense block weights, all input-major (`x @ W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub shape: BlockShape,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub up: Matrix,
    pub gate: Matrix,
    pub down: Matrix,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

impl BlockParams {
    /// Weight scale used by seeded init; small enough that table-default
    /// learning rates move codebooks a meaningful fraction of it.
    pub const INIT_STD: f32 = 0.02;

    /// Seeded init: normal weights at [`Self::INIT_STD`], unit norm gains.
    pub fn random(shape: BlockShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = det_rng(seed);
        let mut normal = |rows: usize, cols: usize| -> Matrix {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32 * Self::INIT_STD
            })
        };
        let d = shape.model_dim;
        let m = shape.mlp_dim;
        Ok(Self {
            shape,
            q: normal(d, d),
            k: normal(d, d),
            v: normal(d, d),
            o: normal(d, d),
            up: normal(d, m),
            gate: normal(d, m),
            down: normal(m, d),
            attn_norm: vec![1.0; d],
            mlp_norm: vec![1.0; d],
        })
    }

    pub fn weights(&self) -> [&Matrix; 7] {
        [
            &self.q, &self.k, &self.v, &self.o, &self.up, &self.gate, &self.down,
        ]
    }

    pub fn dense_param_count(&self) -> usize {
        self.weights()
            .iter()
            .map(|w| w.rows() * w.cols())
            .sum::<usize>()
    }
}

/// Compressed block: each projection a codebook + fixed codes, norms
/// carried over dense and frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBlock {
    pub shape: BlockShape,
    pub q: CompressedLayer,
    pub k: CompressedLayer,
    pub v: CompressedLayer,
    pub o: CompressedLayer,
    pub up: CompressedLayer,
    pub gate: CompressedLayer,
    pub down: CompressedLayer,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

impl CompressedBlock {
    pub fn layers(&self) -> [&CompressedLayer; 7] {
        [
            &self.q, &self.k, &self.v, &self.o, &self.up, &self.gate, &self.down,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut CompressedLayer; 7] {
        let Self {
            q, k, v, o, up, gate, down, ..
        } = self;
        [q, k, v, o, up, gate, down]
    }

    pub fn codebooks(&self) -> Vec<Matrix> {
        self.layers().iter().map(|l| l.codebook.clone()).collect()
    }

    pub fn set_codebooks(&mut self, books: &[Matrix]) {
        for (layer, book) in self.layers_mut().into_iter().zip(books) {
            layer.codebook = book.clone();
        }
    }

    /// Trainable parameter count (codebook entries across layers).
    pub fn codebook_param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.codebook.rows() * l.codebook.cols())
            .sum()
    }

    /// Byte image of all codes, for freeze checks.
    pub fn codes_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in self.layers() {
            for c in &l.codes {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }
}

/// Cluster every projection of a dense block at group dimension `g`.
/// Layer seeds derive from `cfg.seed` and the layer position.
pub fn compress_block(
    params: &BlockParams,
    g: usize,
    cfg: &KMeansConfig,
) -> Result<CompressedBlock> {
    let mut layers = Vec::with_capacity(7);
    for (i, (name, w)) in LAYER_NAMES.iter().zip(params.weights()).enumerate() {
        let mut layer_cfg = cfg.clone();
        layer_cfg.seed = crate::rng::child_seed(cfg.seed, i as u64);
        layers.push(compress_layer(name, w, g, &layer_cfg)?);
    }
    let mut it = layers.into_iter();
    Ok(CompressedBlock {
        shape: params.shape,
        q: it.next().unwrap(),
        k: it.next().unwrap(),
        v: it.next().unwrap(),
        o: it.next().unwrap(),
        up: it.next().unwrap(),
        gate: it.next().unwrap(),
        down: it.next().unwrap(),
        attn_norm: params.attn_norm.clone(),
        mlp_norm: params.mlp_norm.clone(),
    })
}

/// Either side of the calibration objective.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockWeights {
    Dense(BlockParams),
    Compressed(CompressedBlock),
}

impl BlockWeights {
    pub fn shape(&self) -> BlockShape {
        match self {
            BlockWeights::Dense(p) => p.shape,
            BlockWeights::Compressed(c) => c.shape,
        }
    }
}

/// Activations `[batch, seq, model_dim]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Activations {
    pub fn zeros(batch: usize, seq: usize, dim: usize) -> Self {
        Self {
            batch,
            seq,
            dim,
            data: vec![0.0; batch * seq * dim],
        }
    }

    pub fn random(batch: usize, seq: usize, dim: usize, seed: u64) -> Self {
        let mut rng = det_rng(seed);
        let data = (0..batch * seq * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            })
            .collect();
        Self {
            batch,
            seq,
            dim,
            data,
        }
    }

    pub fn batch_range(&self, start: usize, count: usize) -> Activations {
        let stride = self.seq * self.dim;
        Activations {
            batch: count,
            seq: self.seq,
            dim: self.dim,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        }
    }

    fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_f32_slice(self.batch * self.seq, self.dim, &self.data)
    }

    fn from_tensor<F: Real>(t: &Tensor<F>, batch: usize, seq: usize) -> Self {
        Activations {
            batch,
            seq,
            dim: t.cols,
            data: t.to_f32_vec(),
        }
    }
}

/// Weight nodes staged on a tape, plus codebook leaves when compressed.
pub(crate) struct StagedBlock {
    weights: [NodeId; 7],
    attn_norm: NodeId,
    mlp_norm: NodeId,
    pub(crate) codebooks: Option<[NodeId; 7]>,
}

pub(crate) fn stage_block<F: Real>(tape: &mut Tape<F>, block: &BlockWeights) -> StagedBlock {
    match block {
        BlockWeights::Dense(p) => {
            let mut ws = Vec::with_capacity(7);
            for w in p.weights() {
                let t = Tensor::from_f32_slice(w.rows(), w.cols(), w.data());
                ws.push(tape.leaf(t));
            }
            StagedBlock {
                weights: ws.try_into().ok().unwrap(),
                attn_norm: tape.leaf(Tensor::from_f32_slice(1, p.attn_norm.len(), &p.attn_norm)),
                mlp_norm: tape.leaf(Tensor::from_f32_slice(1, p.mlp_norm.len(), &p.mlp_norm)),
                codebooks: None,
            }
        }
        BlockWeights::Compressed(c) => {
            let mut ws = Vec::with_capacity(7);
            let mut books = Vec::with_capacity(7);
            for layer in c.layers() {
                let cb = Tensor::from_f32_slice(
                    layer.codebook.rows(),
                    layer.codebook.cols(),
                    layer.codebook.data(),
                );
                let cb_id = tape.leaf(cb);
                books.push(cb_id);
                ws.push(tape.gather_weight(
                    cb_id,
                    Arc::new(layer.codes.clone()),
                    layer.d_in,
                    layer.d_out,
                    layer.deficiency,
                ));
            }
            StagedBlock {
                weights: ws.try_into().ok().unwrap(),
                attn_norm: tape.leaf(Tensor::from_f32_slice(1, c.attn_norm.len(), &c.attn_norm)),
                mlp_norm: tape.leaf(Tensor::from_f32_slice(1, c.mlp_norm.len(), &c.mlp_norm)),
                codebooks: Some(books.try_into().ok().unwrap()),
            }
        }
    }
}

/// Pre-norm residual forward: x + Attn(RMSNorm(x)), then + MLP(RMSNorm(.)).
pub(crate) fn forward_staged<F: Real>(
    tape: &mut Tape<F>,
    staged: &StagedBlock,
    x: NodeId,
    batch: usize,
    seq: usize,
    shape: BlockShape,
) -> NodeId {
    let [wq, wk, wv, wo, wup, wgate, wdown] = staged.weights;
    let h = tape.rms_norm(x, staged.attn_norm, RMS_EPS);
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let scores = tape.attn_scores(q, k, batch, shape.n_heads);
    let probs = tape.causal_softmax(scores, seq);
    let ctx = tape.attn_context(probs, v, batch, shape.n_heads);
    let attn = tape.matmul(ctx, wo);
    let x1 = tape.add(x, attn);

    let h2 = tape.rms_norm(x1, staged.mlp_norm, RMS_EPS);
    let up = tape.matmul(h2, wup);
    let gate = tape.matmul(h2, wgate);
    let act = tape.silu(gate);
    let prod = tape.mul(act, up);
    let down = tape.matmul(prod, wdown);
    tape.add(x1, down)
}

fn validate_input(block: &BlockWeights, x: &Activations) -> Result<()> {
    let shape = block.shape();
    shape.validate()?;
    if x.dim != shape.model_dim {
        return Err(invalid(format!(
            "activation dim {} != model_dim {}",
            x.dim, shape.model_dim
        )));
    }
    if x.batch == 0 || x.seq == 0 {
        return Err(invalid("empty activations"));
    }
    Ok(())
}

/// Run one block over a batch of sequences.
pub fn block_forward(block: &BlockWeights, x: &Activations) -> Result<Activations> {
    validate_input(block, x)?;
    let mut tape: Tape<f32> = Tape::new();
    let staged = stage_block(&mut tape, block);
    let x_id = tape.leaf(x.to_tensor());
    let out = forward_staged(&mut tape, &staged, x_id, x.batch, x.seq, block.shape());
    Ok(Activations::from_tensor(tape.value(out), x.batch, x.seq))
}

/// Gradient of mean-squared block-output error w.r.t. each codebook,
/// ordered like [`LAYER_NAMES`]. Generic so checks can run in f64.
pub fn codebook_gradients<F: Real>(
    block: &CompressedBlock,
    x: &Activations,
    target: &Activations,
) -> Result<Vec<Vec<F>>> {
    let wrapped = BlockWeights::Compressed(block.clone());
    validate_input(&wrapped, x)?;
    if (target.batch, target.seq, target.dim) != (x.batch, x.seq, x.dim) {
        return Err(invalid("target shape differs from input shape"));
    }
    let mut tape: Tape<F> = Tape::new();
    let staged = stage_block(&mut tape, &wrapped);
    let x_id = tape.leaf(x.to_tensor());
    let out = forward_staged(&mut tape, &staged, x_id, x.batch, x.seq, block.shape);
    let loss = tape.mse(out, target.to_tensor());
    tape.backward(loss);
    let books = staged.codebooks.expect("compressed block has codebooks");
    Ok(books.iter().map(|&id| tape.grad(id).data).collect())
}

/// Table-default calibration hyperparameters: constant-schedule adaptive
/// moments on codebooks only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch: usize,
    /// Fraction of calibration sequences reserved for best-epoch tracking.
    pub holdout_fraction: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.0,
            epochs: 20,
            batch: 8,
            holdout_fraction: 0.125,
        }
    }
}

#[derive(Debug, ThisError)]
pub enum CalibError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("training diverged at step {step} (loss {loss}); last finite state attached")]
    Diverged {
        step: usize,
        loss: f64,
        last_finite: Box<CompressedBlock>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibHistory {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    /// One entry per optimizer step.
    pub train_losses: Vec<StepLoss>,
    /// Held-out loss before training and after each epoch.
    pub holdout_losses: Vec<f64>,
}

pub struct CalibOutcome {
    pub block: CompressedBlock,
    pub history: CalibHistory,
}

fn eval_mse(block: &CompressedBlock, x: &Activations, target: &Activations) -> f64 {
    let mut tape: Tape<f32> = Tape::new();
    let staged = stage_block(&mut tape, &BlockWeights::Compressed(block.clone()));
    let x_id = tape.leaf(x.to_tensor());
    let out = forward_staged(&mut tape, &staged, x_id, x.batch, x.seq, block.shape);
    let loss = tape.mse(out, target.to_tensor());
    tape.value(loss).data[0] as f64
}

/// Train the compressed block's codebooks to match the dense block's
/// outputs; codes and norms never move. Returns the parameters achieving
/// the lowest held-out loss across epochs.
pub fn calibrate_block(
    dense: &BlockParams,
    compressed: &CompressedBlock,
    x: &Activations,
    x_prime: &Activations,
    cfg: &CalibConfig,
) -> Result<CalibOutcome, CalibError> {
    if (x.batch, x.seq, x.dim) != (x_prime.batch, x_prime.seq, x_prime.dim) {
        return Err(Error::InvalidArgument("x and x_prime shapes differ".into()).into());
    }
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("bad calibration config".into()).into());
    }
    validate_input(&BlockWeights::Dense(dense.clone()), x).map_err(CalibError::Invalid)?;

    // Dense-path targets are fixed for the whole run.
    let targets = block_forward(&BlockWeights::Dense(dense.clone()), x)?;

    let total = x.batch;
    let holdout = if total >= 2 {
        ((total as f64 * cfg.holdout_fraction).round() as usize).clamp(1, total - 1)
    } else {
        0
    };
    let train_count = total - holdout;
    let ho_x = x_prime.batch_range(train_count, holdout);
    let ho_t = targets.batch_range(train_count, holdout);

    let mut block = compressed.clone();
    let eval_block = |b: &CompressedBlock| -> f64 {
        if holdout > 0 {
            eval_mse(b, &ho_x, &ho_t)
        } else {
            eval_mse(b, x_prime, &targets)
        }
    };

    let initial_loss = eval_block(&block);
    let mut best_loss = initial_loss;
    let mut best_epoch = 0usize;
    let mut best_books = block.codebooks();
    let mut last_finite = block.codebooks();

    let batches_per_epoch = train_count.div_ceil(cfg.batch).max(1);
    let total_steps = cfg.epochs * batches_per_epoch;
    let group_sizes: Vec<usize> = block
        .layers()
        .iter()
        .map(|l| l.codebook.data().len())
        .collect();
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.lr, cfg.weight_decay, LrSchedule::Constant, total_steps),
        &group_sizes,
    );

    let mut train_losses = Vec::with_capacity(total_steps);
    let mut holdout_losses = vec![initial_loss];
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for bi in 0..batches_per_epoch {
            let start = bi * cfg.batch;
            let count = cfg.batch.min(train_count - start);
            if count == 0 {
                break;
            }
            let bx = x_prime.batch_range(start, count);
            let bt = targets.batch_range(start, count);

            let mut tape: Tape<f32> = Tape::new();
            let staged = stage_block(&mut tape, &BlockWeights::Compressed(block.clone()));
            let x_id = tape.leaf(bx.to_tensor());
            let out = forward_staged(&mut tape, &staged, x_id, bx.batch, bx.seq, block.shape);
            let loss_id = tape.mse(out, bt.to_tensor());
            let loss = tape.value(loss_id).data[0] as f64;
            if !loss.is_finite() {
                let mut b = block.clone();
                b.set_codebooks(&last_finite);
                return Err(CalibError::Diverged {
                    step,
                    loss,
                    last_finite: Box::new(b),
                });
            }
            last_finite = block.codebooks();
            tape.backward(loss_id);
            let books = staged.codebooks.expect("compressed");
            let grads: Vec<Vec<f32>> = books.iter().map(|&id| tape.grad(id).data).collect();

            let mut layers = block.layers_mut();
            let mut params: Vec<&mut [f32]> = layers
                .iter_mut()
                .map(|l| l.codebook.data_mut())
                .collect();
            opt.step(&mut params, &grads);

            train_losses.push(StepLoss {
                epoch,
                batch: bi,
                loss,
            });
            step += 1;
        }
        let ho = eval_block(&block);
        if !ho.is_finite() {
            let mut b = block.clone();
            b.set_codebooks(&last_finite);
            return Err(CalibError::Diverged {
                step,
                loss: ho,
                last_finite: Box::new(b),
            });
        }
        holdout_losses.push(ho);
        if ho < best_loss {
            best_loss = ho;
            best_epoch = epoch + 1;
            best_books = block.codebooks();
        }
    }

    block.set_codebooks(&best_books);
    Ok(CalibOutcome {
        block,
        history: CalibHistory {
            initial_loss,
            best_loss,
            best_epoch,
            train_losses,
            holdout_losses,
        },
    })
}

/// Sequential model calibration: block `i` sees the dense chain's
/// activations as targets and the calibrated compressed chain's as inputs;
/// the first block shares its input with the dense path.
pub fn calibrate_model(
    dense: &[BlockParams],
    compressed: Vec<CompressedBlock>,
    x0: &Activations,
    cfg: &CalibConfig,
) -> Result<(Vec<CompressedBlock>, Vec<CalibHistory>), CalibError> {
    if dense.is_empty() || dense.len() != compressed.len() {
        return Err(Error::InvalidArgument("need equal nonzero block counts".into()).into());
    }
    let mut x_dense = x0.clone();
    let mut x_comp = x0.clone();
    let mut out_blocks = Vec::with_capacity(dense.len());
    let mut histories = Vec::with_capacity(dense.len());
    for (d, c) in dense.iter().zip(compressed) {
        let outcome = calibrate_block(d, &c, &x_dense, &x_comp, cfg)?;
        x_dense = block_forward(&BlockWeights::Dense(d.clone()), &x_dense)?;
        x_comp = block_forward(&BlockWeights::Compressed(outcome.block.clone()), &x_comp)?;
        out_blocks.push(outcome.block);
        histories.push(outcome.history);
    }
    Ok((out_blocks, histories))
}
