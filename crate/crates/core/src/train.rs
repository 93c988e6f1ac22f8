//! Loss, optimizer, schedule, and the epoch loop: label-smoothed softmax
//! cross-entropy, Adam with bias correction, cosine decay after a linear
//! warmup, and data-parallel gradient averaging over logical workers. One
//! Adam step consumes the arithmetic mean of the raw worker gradients.

use crate::data::{make_batches, Batch, Dataset};
use crate::error::{HgError, Result};
use crate::model::{
    backward, forward, splitmix64, ModelConfig, ModelParams, ModelState,
};
use crate::numerics::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mean cross-entropy against the smoothed target `(1-α)·onehot + α/C`,
/// with the analytic logit gradient. Log-softmax is computed with
/// max-subtraction, so huge logits stay finite.
pub fn smoothed_ce_loss<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
    alpha: f64,
) -> Result<(F, Tensor<F>)> {
    let (b, c) = match *logits.shape() {
        [b, c] => (b, c),
        ref s => return Err(HgError::Shape(format!("logits must be (B,C), got {s:?}"))),
    };
    if labels.len() != b {
        return Err(HgError::Shape(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(HgError::Config(format!("smoothing {alpha} not in [0,1)")));
    }
    let uniform = F::from_f64(alpha / c as f64);
    let on_true = F::from_f64(1.0 - alpha);
    let bn = F::from_f64(b as f64);
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = F::ZERO;
    for bi in 0..b {
        let label = labels[bi];
        if label >= c {
            return Err(HgError::Data(format!(
                "label {label} at item {bi} outside 0..{c}"
            )));
        }
        let row = logits.row(bi);
        let mut maxv = row[0];
        for &v in row {
            maxv = maxv.maximum(v);
        }
        let mut logsum = F::ZERO;
        for &v in row {
            logsum += (v - maxv).exp();
        }
        logsum = logsum.ln() + maxv;
        let grow = grad.row_mut(bi);
        for j in 0..c {
            let logp = row[j] - logsum;
            let mut q = uniform;
            if j == label {
                q += on_true;
            }
            loss -= q * logp;
            grow[j] = (logp.exp() - q) / bn;
        }
    }
    Ok((loss / bn, grad))
}

/// Entropy of the smoothed target distribution — the exact floor of
/// [`smoothed_ce_loss`], reached only when the prediction equals the target.
pub fn smoothed_target_entropy(c: usize, alpha: f64) -> f64 {
    let uniform = alpha / c as f64;
    let on_true = 1.0 - alpha + uniform;
    let mut h = -on_true * on_true.ln();
    if uniform > 0.0 {
        h -= (c - 1) as f64 * uniform * uniform.ln();
    }
    h
}

/// Adam moments, aligned with `ModelParams::named_tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Scalar> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new_like(params: &ModelParams<F>) -> Self {
        let shapes: Vec<usize> = params.named_tensors().iter().map(|(_, s)| s.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![F::ZERO; n]).collect(),
            v: shapes.iter().map(|&n| vec![F::ZERO; n]).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update; `weight_decay` is decoupled (applied to
/// the parameter directly, not through the moments) and usually zero.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamState<F>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let gs = grads.named_tensors();
    let ps = params.named_tensors_mut();
    if gs.len() != ps.len() || gs.len() != state.m.len() {
        return Err(HgError::Shape(
            "optimizer state does not match the parameter set".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let one_m_b1 = F::ONE - b1;
    let one_m_b2 = F::ONE - b2;
    let corr1 = F::from_f64(1.0 - state.beta1.powi(t));
    let corr2 = F::from_f64(1.0 - state.beta2.powi(t));
    let eps = F::from_f64(state.eps);
    let lr_f = F::from_f64(lr);
    let wd = F::from_f64(lr * weight_decay);
    for (((pname, p), (gname, g)), (m, v)) in ps
        .into_iter()
        .zip(gs)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if pname != gname || p.len() != g.len() || p.len() != m.len() {
            return Err(HgError::Shape(format!(
                "adam step mismatch at {pname}/{gname}"
            )));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + one_m_b1 * g[i];
            v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] -= lr_f * m_hat / (v_hat.sqrt() + eps);
            if weight_decay != 0.0 {
                p[i] -= wd * p[i];
            }
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm<F: Scalar>(grads: &mut ModelParams<F>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, s) in grads.named_tensors() {
        for &v in s {
            let vf = v.to_f64();
            sq += vf * vf;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for (_, s) in grads.named_tensors_mut() {
            for v in s {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(HgError::Config(format!(
                "warmup {} must be below total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.floor_lr > self.peak_lr {
            return Err(HgError::Config(format!(
                "floor lr {} above peak {}",
                self.floor_lr, self.peak_lr
            )));
        }
        Ok(())
    }
}

/// Linear ramp 0 → peak over the warmup, then cosine decay to the floor;
/// steps past `total_steps` clamp to the floor.
pub fn cosine_warmup_lr(step: u64, sched: &ScheduleConfig) -> f64 {
    if step < sched.warmup_steps {
        return sched.peak_lr * step as f64 / sched.warmup_steps as f64;
    }
    if step >= sched.total_steps {
        return sched.floor_lr;
    }
    let progress =
        (step - sched.warmup_steps) as f64 / (sched.total_steps - sched.warmup_steps) as f64;
    sched.floor_lr
        + (sched.peak_lr - sched.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Knobs of the epoch loop that are not model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// logical data-parallel workers; gradients are averaged across them
    pub workers: usize,
    /// decoupled weight decay, off by default
    pub weight_decay: f64,
    /// optional global-norm gradient clip, off by default
    pub clip_norm: Option<f64>,
    /// sequence length batches are padded/truncated to
    pub seq_len: usize,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.workers == 0 || self.seq_len == 0 {
            return Err(HgError::Config(
                "batch_size, workers, and seq_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything `train_epoch` mutates or reads, bundled to keep call sites
/// readable.
pub struct Trainer<'a, F: Scalar> {
    pub params: &'a mut ModelParams<F>,
    pub model_state: &'a mut ModelState<F>,
    pub adam: &'a mut AdamState<F>,
    pub config: &'a ModelConfig,
    pub sched: &'a ScheduleConfig,
    pub opts: &'a TrainOptions,
    /// base seed of the run: batch order and dropout derive from it
    pub seed: u64,
    /// optimizer steps taken so far, across epochs
    pub global_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// learning rate at the last optimizer step of the epoch
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub seconds: f64,
}

fn shard_ranges(n: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let w = workers.min(n);
    let base = n / w;
    let extra = n % w;
    let mut out = Vec::with_capacity(w);
    let mut start = 0;
    for i in 0..w {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn slice_batch(batch: &Batch, range: std::ops::Range<usize>) -> Batch {
    let t = batch.seq_len;
    Batch {
        tokens: batch.tokens[range.start * t..range.end * t].to_vec(),
        mask: batch.mask[range.start * t..range.end * t].to_vec(),
        labels: batch.labels[range.clone()].to_vec(),
        indices: batch.indices[range].to_vec(),
        seq_len: t,
    }
}

fn argmax_row<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// One pass over the dataset: per batch, shard across the logical workers,
/// average the raw worker gradients, take one Adam step at the scheduled
/// rate. The metric trace is a pure function of (seed, config, data).
pub fn train_epoch<F: Scalar>(
    trainer: &mut Trainer<F>,
    dataset: &Dataset,
    epoch: usize,
) -> Result<EpochMetrics> {
    trainer.opts.validate()?;
    trainer.sched.validate()?;
    let started = Instant::now();
    let epoch_seed = splitmix64(trainer.seed ^ splitmix64(epoch as u64));
    let batches = make_batches(
        dataset,
        trainer.opts.seq_len,
        trainer.opts.batch_size,
        epoch_seed,
    )?;
    let mut seen = 0usize;
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut lr = cosine_warmup_lr(trainer.global_step, trainer.sched);
    for batch in batches {
        let batch = batch?;
        lr = cosine_warmup_lr(trainer.global_step, trainer.sched);
        let dropout_base = splitmix64(trainer.seed ^ splitmix64(trainer.global_step));
        let shards = shard_ranges(batch.batch_size(), trainer.opts.workers);
        let used = shards.len();
        let mut grad_acc: Option<ModelParams<F>> = None;
        let per_worker = F::from_f64(1.0 / used as f64);
        for range in shards {
            let shard = slice_batch(&batch, range);
            let (logits, caches) = forward(
                &shard,
                trainer.params,
                trainer.config,
                true,
                dropout_base,
                Some(trainer.model_state),
            )?;
            let (loss, g_logits) =
                smoothed_ce_loss(&logits, &shard.labels, trainer.config.label_smoothing)?;
            let grads = backward(&g_logits, &caches, trainer.params, trainer.config)?;
            loss_sum += loss.to_f64() * shard.batch_size() as f64;
            for (bi, &label) in shard.labels.iter().enumerate() {
                if argmax_row(logits.row(bi)) == label {
                    correct += 1;
                }
            }
            seen += shard.batch_size();
            match grad_acc.as_mut() {
                None => {
                    let mut g = grads;
                    for (_, s) in g.named_tensors_mut() {
                        for v in s {
                            *v *= per_worker;
                        }
                    }
                    grad_acc = Some(g);
                }
                Some(acc) => acc.axpy(per_worker, &grads)?,
            }
        }
        let mut grad = grad_acc.expect("batches are never empty");
        if let Some(max_norm) = trainer.opts.clip_norm {
            clip_grad_norm(&mut grad, max_norm);
        }
        adam_step(
            trainer.params,
            &grad,
            trainer.adam,
            lr,
            trainer.opts.weight_decay,
        )?;
        trainer.global_step += 1;
    }
    Ok(EpochMetrics {
        epoch,
        lr,
        train_loss: loss_sum / seen as f64,
        train_acc: correct as f64 / seen as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// rows indexed by true class, columns by prediction
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

impl EvalReport {
    /// Accuracy recomputed from the confusion matrix.
    pub fn trace_accuracy(&self) -> f64 {
        let diag: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        diag as f64 / self.samples as f64
    }
}

/// Deterministic eval-mode pass: accuracy, mean smoothed loss, confusion
/// matrix. Batch-norm models read their running statistics and never
/// update them here.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    model_state: &mut ModelState<F>,
    config: &ModelConfig,
    dataset: &Dataset,
    seq_len: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    let c = config.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut loss_sum = 0.0f64;
    let mut seen = 0usize;
    // fixed order: evaluation ignores shuffling entirely
    for batch in make_batches(dataset, seq_len, batch_size, 0)? {
        let batch = batch?;
        let (logits, _) = forward(&batch, params, config, false, 0, Some(model_state))?;
        let (loss, _) = smoothed_ce_loss(&logits, &batch.labels, config.label_smoothing)?;
        loss_sum += loss.to_f64() * batch.batch_size() as f64;
        for (bi, &label) in batch.labels.iter().enumerate() {
            confusion[label][argmax_row(logits.row(bi))] += 1;
        }
        seen += batch.batch_size();
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / seen as f64,
        mean_loss: loss_sum / seen as f64,
        confusion,
        samples: seen,
    })
}

pub const METRICS_CSV_HEADER: &str = "epoch,lr,train_loss,train_acc,eval_loss,eval_acc,seconds";

/// One CSV line matching [`METRICS_CSV_HEADER`]. Everything except the
/// seconds column is a pure function of (seed, config, data).
pub fn metrics_csv_row(
    m: &EpochMetrics,
    eval_loss: f64,
    eval_acc: f64,
) -> String {
    format!(
        "{},{},{},{},{},{},{:.3}",
        m.epoch, m.lr, m.train_loss, m.train_acc, eval_loss, eval_acc, m.seconds
    )
}
