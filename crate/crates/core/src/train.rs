//! Training loop: Adam with the inverse-square-root warmup schedule,
//! label-smoothed cross-entropy, token-count batching over synthetic tasks,
//! periodic checkpoints, and checkpoint averaging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{teacher_input, Model, Parameters, TokenBatch, PAYLOAD_START};
use crate::probes::{self, DynamicsLog};
use crate::rng::Rng;
use crate::tape::{Mode, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        }
    }
}

/// Deterministic toy data: payload ids drawn uniformly from
/// [PAYLOAD_START, vocab); the target (with EOS appended) is the source
/// copied, reversed, or sorted ascending.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= PAYLOAD_START {
            return Err(Error::InvalidParameter(format!(
                "task vocab must exceed {PAYLOAD_START}, got {}",
                self.vocab
            )));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::InvalidParameter(format!(
                "bad task length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// One (source, target) pair; target carries a trailing EOS.
    pub fn sample(&self, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        let span = self.max_len - self.min_len + 1;
        let len = self.min_len + rng.below(span);
        let src: Vec<usize> = (0..len)
            .map(|_| PAYLOAD_START + rng.below(self.vocab - PAYLOAD_START))
            .collect();
        let mut tgt = src.clone();
        match self.kind {
            TaskKind::Copy => {}
            TaskKind::Reverse => tgt.reverse(),
            TaskKind::Sort => tgt.sort_unstable(),
        }
        tgt.push(crate::model::EOS);
        (src, tgt)
    }

    /// Longest possible target including EOS.
    pub fn max_target_len(&self) -> usize {
        self.max_len + 1
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Batch budget in target tokens.
    pub batch_tokens: usize,
    pub smoothing: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub task: SyntheticTask,
    pub checkpoint_interval: usize,
    /// Stop as soon as a step's teacher-forced token accuracy reaches this.
    pub stop_at_acc: Option<f64>,
    /// Window length for the gradient-dynamics log.
    pub log_window: usize,
    /// Echoed verbatim into checkpoint files.
    pub config_echo: String,
}

impl TrainConfig {
    pub fn desk_default(task: SyntheticTask) -> TrainConfig {
        TrainConfig {
            steps: 2000,
            warmup: 4000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            batch_tokens: 512,
            smoothing: 0.1,
            clip_norm: None,
            seed: 1,
            task,
            checkpoint_interval: 500,
            stop_at_acc: None,
            log_window: 50,
            config_echo: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        if self.warmup == 0 {
            return Err(Error::InvalidParameter("warmup must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidParameter("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::InvalidParameter(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        if self.batch_tokens < self.task.max_target_len() {
            return Err(Error::InvalidParameter(format!(
                "batch_tokens {} below the longest target {}",
                self.batch_tokens,
                self.task.max_target_len()
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        if self.checkpoint_interval == 0 || self.log_window == 0 {
            return Err(Error::InvalidParameter(
                "checkpoint_interval and log_window must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// d^-0.5 * min(step^-0.5, step * warmup^-1.5); peaks at step == warmup.
pub fn lr_schedule(step: usize, dim: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidParameter("schedule starts at step 1".into()));
    }
    if dim == 0 || warmup == 0 {
        return Err(Error::InvalidParameter(
            "dim and warmup must be >= 1".into(),
        ));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// First/second Adam moments per parameter plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn for_params(params: &Parameters) -> OptimizerState {
        let zeros = |t: &Tensor| vec![0.0; t.numel()];
        OptimizerState {
            t: 0,
            m: params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), zeros(t)))
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), zeros(t)))
                .collect(),
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient so the global norm does not exceed `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, clip: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for v in &mut g.data {
                *v *= scale;
            }
        }
    }
    norm
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut Parameters,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?;
        if g.data.len() != p.data.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Endless deterministic batch source: samples pairs and greedily packs them
/// until the next pair would push the target-token count past the budget.
/// An overflowing pair carries over to the next batch.
pub struct BatchStream {
    task: SyntheticTask,
    batch_tokens: usize,
    rng: Rng,
    carry: Option<(Vec<usize>, Vec<usize>)>,
}

impl BatchStream {
    pub fn new(task: SyntheticTask, batch_tokens: usize, rng: Rng) -> Result<BatchStream> {
        task.validate()?;
        if batch_tokens < task.max_target_len() {
            return Err(Error::InvalidParameter(format!(
                "batch_tokens {batch_tokens} below the longest target {}",
                task.max_target_len()
            )));
        }
        Ok(BatchStream {
            task,
            batch_tokens,
            rng,
            carry: None,
        })
    }

    pub fn next_batch(&mut self) -> Result<(TokenBatch, TokenBatch)> {
        let mut srcs = Vec::new();
        let mut tgts = Vec::new();
        let mut total = 0usize;
        loop {
            let (src, tgt) = match self.carry.take() {
                Some(p) => p,
                None => self.task.sample(&mut self.rng),
            };
            if total + tgt.len() > self.batch_tokens && !tgts.is_empty() {
                self.carry = Some((src, tgt));
                break;
            }
            total += tgt.len();
            srcs.push(src);
            tgts.push(tgt);
            if total == self.batch_tokens {
                break;
            }
        }
        Ok((TokenBatch::new(&srcs)?, TokenBatch::new(&tgts)?))
    }
}

/// Greedy in-order packing of a finite pair list by target-token budget.
pub fn batches_from_pairs(
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_tokens: usize,
) -> Result<Vec<(TokenBatch, TokenBatch)>> {
    let mut out = Vec::new();
    let mut srcs: Vec<Vec<usize>> = Vec::new();
    let mut tgts: Vec<Vec<usize>> = Vec::new();
    let mut total = 0usize;
    for (src, tgt) in pairs {
        if tgt.len() > batch_tokens {
            return Err(Error::InvalidParameter(format!(
                "target of {} tokens exceeds batch budget {batch_tokens}",
                tgt.len()
            )));
        }
        if total + tgt.len() > batch_tokens && !tgts.is_empty() {
            out.push((TokenBatch::new(&srcs)?, TokenBatch::new(&tgts)?));
            srcs.clear();
            tgts.clear();
            total = 0;
        }
        total += tgt.len();
        srcs.push(src.clone());
        tgts.push(tgt.clone());
    }
    if !tgts.is_empty() {
        out.push((TokenBatch::new(&srcs)?, TokenBatch::new(&tgts)?));
    }
    Ok(out)
}

/// Fraction of non-pad positions whose argmax logit hits the gold id.
pub fn token_accuracy(logits: &Tensor, gold: &[usize], pad: &[bool]) -> f64 {
    let v = *logits.shape.last().unwrap();
    let mut hit = 0usize;
    let mut total = 0usize;
    for (t, (&g, &p)) in gold.iter().zip(pad).enumerate() {
        if p {
            continue;
        }
        let row = &logits.data[t * v..(t + 1) * v];
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        total += 1;
        if best == g {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step,loss,token_acc,lr,grad_norm\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.loss, r.token_acc, r.lr, r.grad_norm
        );
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    /// (window, stack, layer, mean norm) rows from the dynamics log.
    pub dynamics: Vec<(usize, crate::model::Stack, usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub final_step: usize,
    pub best_acc: f64,
}

/// One teacher-forced forward pass; returns (loss node, logits node).
pub fn forward_loss(
    model: &Model,
    tape: &mut Tape,
    src: &TokenBatch,
    gold: &TokenBatch,
    smoothing: f64,
) -> Result<(NodeId, NodeId)> {
    let bound = model.bind(tape);
    forward_loss_bound(model, tape, &bound, src, gold, smoothing)
}

fn forward_loss_bound(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::model::Bound,
    src: &TokenBatch,
    gold: &TokenBatch,
    smoothing: f64,
) -> Result<(NodeId, NodeId)> {
    let (enc_out, _) = model.encode(tape, bound, src)?;
    let dec_in = teacher_input(gold);
    let (logits, _) = model.decode_train(tape, bound, &dec_in, enc_out, &src.lengths)?;
    let loss = tape.smoothed_cross_entropy(logits, &gold.ids, &gold.pad_mask(), smoothing)?;
    Ok((loss, logits))
}

/// Runs the full loop, mutating the model in place. Checkpoints go to
/// `out_dir` when given (every `checkpoint_interval` steps and at the end).
pub fn train(model: &mut Model, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    let root = Rng::new(cfg.seed);
    let mut stream = BatchStream::new(cfg.task, cfg.batch_tokens, root.derive_named("data"))?;
    let dropout_root = root.derive_named("dropout");
    let mut state = OptimizerState::for_params(&model.params);
    let mut dynamics = DynamicsLog::new(cfg.log_window)?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut best_acc: f64 = 0.0;
    let mut final_step = 0;

    for step in 1..=cfg.steps {
        let (src, gold) = stream.next_batch()?;
        let lr = lr_schedule(step, model.config.dim, cfg.warmup)?;
        let mut tape = Tape::new(Mode::Train, dropout_root.derive(step as u64));
        let bound = model.bind(&mut tape);
        let (loss, logits) =
            forward_loss_bound(model, &mut tape, &bound, &src, &gold, cfg.smoothing)?;
        let loss_val = tape.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss {loss_val} at step {step}"
            )));
        }
        let acc = token_accuracy(&tape.to_tensor(logits), &gold.ids, &gold.pad_mask());
        tape.backward(loss)?;
        let mut grads = model.grads(&tape, &bound);
        drop(tape);
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_grad_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradient norm at step {step}"
            )));
        }
        dynamics.push(&probes::layer_norms_from_grads(&grads, model.config.layers));
        adam_step(&mut model.params, &grads, &mut state, lr, cfg)?;
        metrics.push(MetricsRow {
            step,
            loss: loss_val,
            token_acc: acc,
            lr,
            grad_norm,
        });
        best_acc = best_acc.max(acc);
        final_step = step;

        let stop = cfg.stop_at_acc.map(|a| acc >= a).unwrap_or(false);
        if let Some(dir) = out_dir {
            if step % cfg.checkpoint_interval == 0 || step == cfg.steps || stop {
                let path = dir.join(format!("ckpt_{step:06}.dsc"));
                let ck = Checkpoint {
                    step: step as u64,
                    config_echo: cfg.config_echo.clone(),
                    tensors: model.params.tensors.clone(),
                    optimizer: Some(state.clone()),
                };
                checkpoint::save(&path, &ck)?;
                checkpoints.push(path);
            }
        }
        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        metrics,
        dynamics: dynamics.finish(),
        checkpoints,
        final_step,
        best_acc,
    })
}

/// Element-wise mean of checkpoints in ascending-step order via a running
/// (Welford) mean, which is exact for identical inputs and makes the result
/// independent of the order the caller passes checkpoints in.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Parameters> {
    if checkpoints.is_empty() {
        return Err(Error::Contract("no checkpoints to average".into()));
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by_key(|&i| checkpoints[i].step);
    let first = &checkpoints[order[0]];
    let mut mean: BTreeMap<String, Tensor> = first.tensors.clone();
    for (rank, &i) in order.iter().enumerate().skip(1) {
        let ck = &checkpoints[i];
        if ck.tensors.len() != mean.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint at step {} has {} tensors, expected {}",
                ck.step,
                ck.tensors.len(),
                mean.len()
            )));
        }
        let k = (rank + 1) as f64;
        for (name, acc) in mean.iter_mut() {
            let t = ck.tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint at step {} missing {name}", ck.step))
            })?;
            if t.shape != acc.shape {
                return Err(Error::ShapeMismatch {
                    op: "average_checkpoints",
                    lhs: acc.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            for (a, x) in acc.data.iter_mut().zip(&t.data) {
                *a += (x - *a) / k;
            }
        }
    }
    Ok(Parameters {
        tensors: mean,
        records: BTreeMap::new(),
    })
}
