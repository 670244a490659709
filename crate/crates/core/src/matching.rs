//! Dual-encoder training with the symmetric in-batch loss, and the
//! retrieval scorer over a fixed response matrix.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, Mode, Side};
use crate::error::{contract, Error, Result};
use crate::optim::{Adadelta, AdadeltaConfig};
use crate::rng::Rng;
use crate::tape::{symmetric_nll_forward, Tape};
use crate::tensor::Tensor;

pub const MIN_BATCH: usize = 8;

/// Token ids of one training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub message: Vec<u32>,
    pub reply: Vec<u32>,
}

/// `Θ = X · Yᵀ`.
pub fn similarity(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.matmul_t(y)
}

/// Mean over the batch of `−ln p(Θ_ii)`.
pub fn symmetric_loss(theta: &Tensor) -> Result<f32> {
    symmetric_nll_forward(theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the steps of an epoch; 0 means one full pass.
    pub steps_per_epoch: usize,
    pub adadelta: AdadeltaConfig,
    pub seed: u64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 4,
            steps_per_epoch: 0,
            adadelta: AdadeltaConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MatchingRun {
    pub encoder: EncoderParams,
    /// Entry 0 is the loss before any update.
    pub val_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
    /// 0 when no epoch improved on the initial weights.
    pub best_epoch: usize,
}

fn batch_loss(
    enc: &EncoderParams,
    batch: &[&EncodedPair],
    mode: &mut Mode,
    tape: &mut Tape,
) -> Result<(crate::tape::Var, Vec<crate::tape::Var>)> {
    let vars = enc.params.bind(tape);
    let msgs: Vec<&[u32]> = batch.iter().map(|p| p.message.as_slice()).collect();
    let reps: Vec<&[u32]> = batch.iter().map(|p| p.reply.as_slice()).collect();
    let x = enc.forward(tape, &vars, Side::Message, &msgs, mode)?;
    let y = enc.forward(tape, &vars, Side::Reply, &reps, mode)?;
    let yt = tape.transpose(y)?;
    let theta = tape.matmul(x, yt)?;
    Ok((tape.symmetric_nll(theta)?, vars))
}

/// Mean symmetric loss over consecutive batches (no dropout). A set smaller
/// than one batch is scored as a single batch.
pub fn validation_loss(enc: &EncoderParams, pairs: &[EncodedPair], batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(contract("validation set is empty"));
    }
    let bs = batch_size.min(pairs.len());
    let mut total = 0.0;
    let mut n = 0;
    for chunk in pairs.chunks(bs) {
        if chunk.len() < bs {
            break;
        }
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let mut tape = Tape::inference();
        let (loss, _) = batch_loss(enc, &refs, &mut Mode::Infer, &mut tape)?;
        total += tape.value(loss).data()[0] as f64;
        n += 1;
    }
    Ok(total / n as f64)
}

/// Adadelta over shuffled minibatches; keeps the weights of the epoch with
/// the lowest validation loss.
pub fn train_matching(
    train: &[EncodedPair],
    val: &[EncodedPair],
    encoder: EncoderConfig,
    config: &MatchingConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<MatchingRun> {
    if config.batch_size < MIN_BATCH {
        return Err(contract(format!(
            "batch size {} below the minimum of {MIN_BATCH}: in-batch negatives need company",
            config.batch_size
        )));
    }
    if train.len() < config.batch_size {
        return Err(contract(format!(
            "{} training pairs cannot fill a batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    let root = Rng::new(config.seed);
    let mut enc = EncoderParams::new(encoder, &mut root.derive(0))?;
    let mut order_rng = root.derive(1);
    let mut dropout_rng = root.derive(2);
    let mut opt = Adadelta::new(config.adadelta, &enc.params);

    let initial = validation_loss(&enc, val, config.batch_size)?;
    let mut val_losses = alloc::vec![initial];
    let mut train_losses = Vec::new();
    let mut best = (initial, 0usize, enc.params.clone());
    let batches = train.len() / config.batch_size;
    let steps = if config.steps_per_epoch == 0 {
        batches
    } else {
        config.steps_per_epoch.min(batches)
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut order);
        let mut sum = 0.0;
        for step in 0..steps {
            let idx = &order[step * config.batch_size..(step + 1) * config.batch_size];
            let batch: Vec<&EncodedPair> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let (loss, vars) = batch_loss(&enc, &batch, &mut Mode::Train(&mut dropout_rng), &mut tape)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: lv });
            }
            sum += lv;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
            opt.step(&mut enc.params, &g)?;
        }
        let val_loss = validation_loss(&enc, val, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, step: steps, loss: val_loss });
        }
        let stats = EpochStats {
            epoch,
            train_loss: sum / steps.max(1) as f64,
            val_loss,
        };
        on_epoch(&stats);
        train_losses.push(stats.train_loss);
        val_losses.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, epoch, enc.params.clone());
        }
    }
    enc.params = best.2;
    Ok(MatchingRun {
        encoder: enc,
        val_losses,
        train_losses,
        best_epoch: best.1,
    })
}

/// Top-k retrieval result, sorted by raw score descending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchScores {
    pub ids: Vec<usize>,
    pub raw: Vec<f32>,
    /// Softmax over the retained raw scores.
    pub probs: Vec<f32>,
}

/// Raw score of every response: `Φ_X(x)·Φ_Y(y) + α·lm(y)`.
pub fn raw_scores(phi_x: &[f32], responses: &Tensor, lm: &[f32], alpha: f32) -> Result<Vec<f32>> {
    let (r, d) = responses.dims2()?;
    if phi_x.len() != d || lm.len() != r {
        return Err(Error::Shape {
            op: "match_score",
            left: alloc::vec![phi_x.len(), lm.len()],
            right: responses.shape().to_vec(),
        });
    }
    let dots = Tensor::row(phi_x).matmul_t(responses)?;
    Ok(dots.data().iter().zip(lm).map(|(&s, &l)| s + alpha * l).collect())
}

/// Indices of the `k` largest values, ties to the smaller index.
pub fn top_k(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn softmax(values: &[f32]) -> Vec<f32> {
    let m = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = values.iter().map(|&v| libm::exp((v - m) as f64)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&x| (x / s) as f32).collect()
}

pub fn match_score(phi_x: &[f32], responses: &Tensor, lm: &[f32], alpha: f32, k: usize) -> Result<MatchScores> {
    let r = responses.rows();
    if k == 0 || k > r {
        return Err(contract(format!("k = {k} must be in 1..={r}")));
    }
    if alpha < 0.0 {
        return Err(contract("alpha must be non-negative"));
    }
    let raw_all = raw_scores(phi_x, responses, lm, alpha)?;
    let ids = top_k(&raw_all, k);
    let raw: Vec<f32> = ids.iter().map(|&i| raw_all[i]).collect();
    let probs = softmax(&raw);
    Ok(MatchScores { ids, raw, probs })
}
