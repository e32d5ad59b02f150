//! Teacher-forced training loop.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{pad_batch, TransformerModel};
use crate::corpus::{TrainingWindow, PAD};
use crate::error::{Error, Result};
use crate::tensor::{AdamWConfig, Graph, OptimizerState, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `total_steps` is filled in from the corpus size and epoch count.
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of the very first batch, before any update.
    pub first_batch_loss: f64,
    /// Mean per-position training loss for each epoch.
    pub epoch_losses: Vec<f64>,
    /// Teacher-forced next-block accuracy on the validation windows after
    /// each epoch (empty when no validation windows were given).
    pub val_accuracy: Vec<f64>,
    pub steps: u64,
}

/// A padded teacher-forcing batch: inputs are `tokens[..m-1]`, targets
/// `tokens[1..]`, and only supervised, non-padding targets are scored.
struct Batch {
    ids: Vec<u32>,
    targets: Vec<usize>,
    mask: Vec<bool>,
    size: usize,
    seq: usize,
}

fn make_batch(windows: &[&TrainingWindow]) -> Result<Batch> {
    let inputs: Vec<&[u32]> = windows.iter().map(|w| &w.tokens[..w.tokens.len() - 1]).collect();
    let (ids, seq) = pad_batch(&inputs)?;
    let mut targets = vec![PAD as usize; ids.len()];
    let mut mask = vec![false; ids.len()];
    for (b, w) in windows.iter().enumerate() {
        for t in 0..w.tokens.len() - 1 {
            targets[b * seq + t] = w.tokens[t + 1] as usize;
            mask[b * seq + t] = w.loss_mask[t + 1];
        }
    }
    Ok(Batch {
        ids,
        targets,
        mask,
        size: windows.len(),
        seq,
    })
}

fn check_windows(model: &TransformerModel, windows: &[TrainingWindow]) -> Result<()> {
    let c = model.config().context_len;
    for w in windows {
        if w.tokens.len() < 2 || w.tokens.len() - 1 > c {
            return Err(Error::Config(format!(
                "window of {} tokens does not fit context length {c}",
                w.tokens.len()
            )));
        }
        if w.loss_mask.len() != w.tokens.len() {
            return Err(Error::shape("train", "loss mask length differs from window length"));
        }
    }
    Ok(())
}

/// Trains in place. On a non-finite loss or gradient the parameters are
/// restored to the end of the last completed epoch and the error returned.
pub fn train(
    model: &mut TransformerModel,
    train_windows: &[TrainingWindow],
    val_windows: &[TrainingWindow],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_windows.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    check_windows(model, train_windows)?;
    check_windows(model, val_windows)?;

    let batches_per_epoch = train_windows.len().div_ceil(cfg.batch_size);
    let mut opt_cfg = cfg.optimizer.clone();
    opt_cfg.total_steps = (batches_per_epoch * cfg.epochs) as u64;
    let layout: Vec<(String, usize, bool)> = (0..model.params().len())
        .map(|i| (model.names()[i].clone(), model.params()[i].numel(), model.decays(i)))
        .collect();
    let mut opt = OptimizerState::<f32>::new(opt_cfg, &layout);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut report = TrainReport::default();
    let mut last_good = model.params().to_vec();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let ws: Vec<&TrainingWindow> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let batch = make_batch(&ws)?;
            let step = step(model, &batch, &mut drop_rng);
            let (loss, n, grads) = match step {
                Ok(v) => v,
                Err(e) => return Err(restore(model, last_good, e)),
            };
            if !loss.is_finite() {
                let e = Error::NonFinite(format!("loss {loss} at epoch {epoch}, step {}", opt.step()));
                return Err(restore(model, last_good, e));
            }
            if report.steps == 0 {
                report.first_batch_loss = loss;
            }
            let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
            if let Err(e) = opt.update(&mut params, &grad_refs) {
                return Err(restore(model, last_good, e));
            }
            report.steps += 1;
            loss_sum += loss * n as f64;
            count += n;
            debug!("epoch {epoch} step {} loss {loss:.4} lr {:.2e}", opt.step(), opt.current_lr());
        }
        let epoch_loss = loss_sum / count.max(1) as f64;
        report.epoch_losses.push(epoch_loss);
        if !val_windows.is_empty() {
            let acc = teacher_forced_accuracy(model, val_windows)?;
            report.val_accuracy.push(acc);
            info!("epoch {} loss {epoch_loss:.4} val next-block acc {acc:.4}", epoch + 1);
        } else {
            info!("epoch {} loss {epoch_loss:.4}", epoch + 1);
        }
        last_good = model.params().to_vec();
    }
    Ok(report)
}

type StepOut = (f64, usize, Vec<Option<Vec<f32>>>);

fn step(model: &TransformerModel, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<StepOut> {
    let mut g = Graph::new();
    let dropout = (model.config().dropout > 0.0).then_some(rng);
    let fv = model.build(&mut g, &batch.ids, batch.size, batch.seq, true, dropout)?;
    let loss = g.cross_entropy(fv.logits, &batch.targets, &batch.mask)?;
    let value = g.value(loss)[0] as f64;
    let n = batch.mask.iter().filter(|&&m| m).count();
    if !value.is_finite() {
        return Ok((value, n, Vec::new()));
    }
    let mut grads = g.backward(loss)?;
    let out = (0..model.params().len()).map(|i| grads.take(i)).collect();
    Ok((value, n, out))
}

fn restore(model: &mut TransformerModel, params: Vec<Tensor>, e: Error) -> Error {
    for (dst, src) in model.params_mut().iter_mut().zip(params) {
        *dst = src;
    }
    e
}

/// Fraction of supervised positions whose argmax prediction equals the
/// ground-truth next token, with ground truth fed as input throughout.
pub fn teacher_forced_accuracy(model: &TransformerModel, windows: &[TrainingWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Empty("evaluation windows"));
    }
    check_windows(model, windows)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in windows.chunks(256) {
        let ws: Vec<&TrainingWindow> = chunk.iter().collect();
        let batch = make_batch(&ws)?;
        let mut g = Graph::new();
        let fv = model.build(&mut g, &batch.ids, batch.size, batch.seq, false, None)?;
        let logits = g.value(fv.logits);
        let v = model.config().vocab_size;
        for (row, (&t, &m)) in batch.targets.iter().zip(&batch.mask).enumerate() {
            if !m {
                continue;
            }
            let r = &logits[row * v..(row + 1) * v];
            let arg = r
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                .0;
            hit += usize::from(arg == t);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("supervised positions"));
    }
    Ok(hit as f64 / total as f64)
}
