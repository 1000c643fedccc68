//! Losses, optimisation loops for backbone pretraining and the two tuning
//! stages, and checkpoints.

mod checkpoint;
mod optim;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_digest, decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, StageTag, TrainerState, MAGIC, VERSION,
};
pub use optim::{Adam, AdamConfig, AdamSlot, Schedule};

use crate::error::{Error, Result};
use crate::model::{Head, OmniModel, TrainMode};
use crate::rng::SeededRng;
use crate::taskforge::{collate, Batch, GraphFeaturizer, InstructionSample, RenderOptions, Subtask, Tokenizer};
use crate::tensor::{Binder, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Stage-2 peak learning rate.
    pub lr: f64,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    /// Micro-batches summed per optimiser step.
    pub grad_accum: usize,
    pub lambda_aux: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Token budget per rendered sample.
    pub max_len: usize,
    pub pretrain_steps: usize,
    /// Size of the pretraining stream as a multiple of the tuning corpus.
    pub pretrain_scale: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup_ratio: f64,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 8e-5,
            epochs: 15,
            warmup_ratio: 0.0075,
            batch_size: 16,
            grad_accum: 1,
            lambda_aux: 0.01,
            seed: 0,
            early_stop_patience: 2,
            max_len: 80,
            pretrain_steps: 2000,
            pretrain_scale: 10,
            pretrain_lr: 3e-3,
            pretrain_warmup_ratio: 0.05,
            stage1_epochs: 5,
            stage1_lr: 1e-3,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0 && self.stage1_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) || !(0.0..1.0).contains(&self.pretrain_warmup_ratio) {
            return bad("warmup ratios must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if self.lambda_aux < 0.0 {
            return bad("lambda_aux must be non-negative");
        }
        if self.pretrain_scale == 0 {
            return bad("pretrain_scale must be positive");
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2");
        }
        Ok(())
    }
}

/// Mean next-token negative log-likelihood over positions whose successor is
/// a label, for full logits `[batch·seq × V]`.
pub fn lm_loss(tape: &mut Tape, logits: Var, input_ids: &[usize], label_mask: &[u8], batch: usize, seq: usize) -> Result<Var> {
    let v = *tape.shape(logits).last().unwrap_or(&0);
    if input_ids.len() != batch * seq || label_mask.len() != batch * seq || tape.value(logits).len() != batch * seq * v {
        return Err(Error::dim(format!("lm_loss over {batch}×{seq} with logits {:?}", tape.shape(logits))));
    }
    let mut targets = vec![0usize; batch * seq];
    let mut weights = vec![0.0; batch * seq];
    for b in 0..batch {
        for t in 0..seq.saturating_sub(1) {
            let nxt = b * seq + t + 1;
            if label_mask[nxt] != 0 {
                targets[b * seq + t] = input_ids[nxt];
                weights[b * seq + t] = 1.0;
            }
        }
    }
    tape.cross_entropy(logits, &targets, &weights)
}

/// `lm + λ · mean(aux)`; just `lm` when there are no mixture layers.
pub fn total_loss(tape: &mut Tape, lm: Var, aux: &[Var], lambda: f64) -> Result<Var> {
    if aux.is_empty() || lambda == 0.0 {
        return Ok(lm);
    }
    let mut acc = aux[0];
    for &a in &aux[1..] {
        acc = tape.add(acc, a)?;
    }
    let scaled = tape.scale(acc, lambda / aux.len() as f64);
    tape.add(lm, scaled)
}

/// Values from one forward pass over a batch.
#[derive(Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub lm: f64,
    pub aux: f64,
    pub label_tokens: usize,
}

/// Forward pass with the head evaluated at label positions only.
pub fn batch_loss(model: &OmniModel, tape: &mut Tape, binder: &mut Binder, batch: &Batch, lambda: f64) -> Result<BatchLoss> {
    let inp = model.assemble_inputs(tape, binder, batch)?;
    let (pos, targets) = inp.next_token_targets();
    if pos.is_empty() {
        return Err(Error::usage("batch has no label tokens"));
    }
    let out = model.forward(tape, binder, &inp, Head::Rows(pos.clone()))?;
    let logits = out.logits.expect("head requested");
    let lm = tape.cross_entropy(logits, &targets, &vec![1.0; targets.len()])?;
    let aux: Vec<Var> = out.routings.iter().map(|r| r.aux).collect();
    let aux_mean = if aux.is_empty() { 0.0 } else { aux.iter().map(|&a| tape.scalar(a)).sum::<f64>() / aux.len() as f64 };
    let lm_value = tape.scalar(lm);
    let total = total_loss(tape, lm, &aux, lambda)?;
    Ok(BatchLoss { total, lm: lm_value, aux: aux_mean, label_tokens: pos.len() })
}

/// Gradients of every trainable parameter, keyed by name.
pub fn gradients(model: &OmniModel, batch: &Batch, lambda: f64) -> Result<(HashMap<String, Vec<f64>>, BatchLoss)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let loss = batch_loss(model, &mut tape, &mut binder, batch, lambda)?;
    tape.backward(loss.total)?;
    let mut grads = HashMap::new();
    model.visit_params(&mut |name, _, t| {
        if !t.requires_grad() {
            return;
        }
        let g = binder
            .get(t)
            .and_then(|v| tape.grad(v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        grads.insert(name.to_string(), g);
    });
    Ok((grads, loss))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: StageTag,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub lm_loss: f64,
    pub aux_loss: f64,
    pub lambda_aux: f64,
    /// Per-layer `[min, max]` adapter scale; empty before expansion.
    pub gamma: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: StageTag,
    pub epoch: usize,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub stopped: bool,
}

pub enum Event<'a> {
    Step(&'a StepLog),
    /// Fired after every epoch with everything needed to checkpoint.
    Epoch {
        log: &'a EpochLog,
        model: &'a OmniModel,
        optimizer: &'a Adam,
        state: &'a TrainerState,
    },
}

/// Everything that distinguishes one optimisation stage from another.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub tag: StageTag,
    pub mode: TrainMode,
    pub render: RenderOptions,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Overrides `epochs` with a fixed number of optimiser steps.
    pub max_steps: Option<usize>,
    pub lambda_aux: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub patience: Option<usize>,
    pub clip_adapters: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl StageSpec {
    pub fn pretrain(cfg: &TrainConfig) -> Self {
        Self {
            tag: StageTag::Pretrain,
            mode: TrainMode::Pretrain,
            render: RenderOptions::FULL,
            lr: cfg.pretrain_lr,
            warmup_ratio: cfg.pretrain_warmup_ratio,
            epochs: usize::MAX,
            max_steps: Some(cfg.pretrain_steps),
            lambda_aux: 0.0,
            batch_size: cfg.batch_size,
            grad_accum: 1,
            patience: None,
            clip_adapters: false,
            max_len: cfg.max_len,
            seed: cfg.seed,
        }
    }

    pub fn stage1(cfg: &TrainConfig) -> Self {
        Self {
            tag: StageTag::Stage1,
            mode: TrainMode::Stage1,
            render: RenderOptions::GRAPH_ONLY,
            lr: cfg.stage1_lr,
            warmup_ratio: cfg.warmup_ratio,
            epochs: cfg.stage1_epochs,
            max_steps: None,
            lambda_aux: 0.0,
            batch_size: cfg.batch_size,
            grad_accum: 1,
            patience: None,
            clip_adapters: false,
            max_len: cfg.max_len,
            seed: cfg.seed,
        }
    }

    pub fn stage2(cfg: &TrainConfig) -> Self {
        Self {
            tag: StageTag::Stage2,
            mode: TrainMode::Stage2,
            render: RenderOptions::FULL,
            lr: cfg.lr,
            warmup_ratio: cfg.warmup_ratio,
            epochs: cfg.epochs,
            max_steps: None,
            lambda_aux: cfg.lambda_aux,
            batch_size: cfg.batch_size,
            grad_accum: cfg.grad_accum,
            patience: Some(cfg.early_stop_patience),
            clip_adapters: true,
            max_len: cfg.max_len,
            seed: cfg.seed,
        }
    }

    fn label(&self) -> &'static str {
        match self.tag {
            StageTag::Init => "init",
            StageTag::Pretrain => "pretrain",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
        }
    }
}

/// Where a stage picks up; fresh when all fields are default.
#[derive(Clone, Debug, PartialEq)]
pub struct Resume {
    pub optimizer: Adam,
    pub state: TrainerState,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub steps: u64,
    pub epochs: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub val_losses: Vec<f64>,
    pub early_stopped: bool,
    pub optimizer: Adam,
    pub state: TrainerState,
}

fn featurizer(model: &OmniModel, render: RenderOptions) -> Option<&dyn GraphFeaturizer> {
    render.graph.then_some(&model.encoder as &dyn GraphFeaturizer)
}

/// Label-token-weighted mean LM loss over `samples`.
pub fn evaluate_loss(model: &OmniModel, samples: &[InstructionSample], render: RenderOptions, batch_size: usize, max_len: usize) -> Result<f64> {
    let tok = Tokenizer::standard();
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = collate(chunk, &tok, max_len, render, featurizer(model, render))?;
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let l = batch_loss(model, &mut tape, &mut binder, &batch, 0.0)?;
        sum += l.lm * l.label_tokens as f64;
        count += l.label_tokens;
    }
    if count == 0 {
        return Err(Error::usage("no label tokens to evaluate"));
    }
    Ok(sum / count as f64)
}

/// Runs one stage. Only parameters trainable under `spec.mode` move.
pub fn run_stage(
    model: &mut OmniModel,
    train: &[InstructionSample],
    val: &[InstructionSample],
    spec: &StageSpec,
    adam: AdamConfig,
    resume: Option<Resume>,
    on_event: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<StageReport> {
    if train.is_empty() {
        return Err(Error::usage(format!("{} stage has no training samples", spec.label())));
    }
    let tok = Tokenizer::standard();
    model.set_mode(spec.mode);
    let micro_per_epoch = train.len().div_ceil(spec.batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(spec.grad_accum);
    let total = match spec.max_steps {
        Some(s) => s,
        None => steps_per_epoch * spec.epochs,
    };
    let schedule = Schedule::new(spec.lr, spec.warmup_ratio, total);
    let (mut opt, mut state, mut step) = match resume {
        Some(r) => (r.optimizer, r.state, r.step),
        None => (Adam::new(adam), TrainerState::default(), 0),
    };
    let root = SeededRng::new(spec.seed).split(spec.label());
    let mut report = StageReport {
        steps: 0,
        epochs: state.epochs_done,
        first_loss: None,
        last_loss: None,
        val_losses: Vec::new(),
        early_stopped: state.stopped,
        optimizer: opt.clone(),
        state: state.clone(),
    };
    let mut epoch = state.epochs_done;
    while !state.stopped && (step as usize) < total {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split_index("epoch", epoch as u64).shuffle(&mut order);
        let micro: Vec<&[usize]> = order.chunks(spec.batch_size).collect();
        for group in micro.chunks(spec.grad_accum) {
            if step as usize >= total {
                break;
            }
            let mut acc: HashMap<String, Vec<f64>> = HashMap::new();
            let (mut lm_sum, mut aux_sum) = (0.0, 0.0);
            for idx in group {
                let samples: Vec<InstructionSample> = idx.iter().map(|&i| train[i].clone()).collect();
                let batch = collate(&samples, &tok, spec.max_len, spec.render, featurizer(model, spec.render))?;
                let (grads, loss) = gradients(model, &batch, spec.lambda_aux)?;
                lm_sum += loss.lm;
                aux_sum += loss.aux;
                for (k, g) in grads {
                    match acc.get_mut(&k) {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                        None => {
                            acc.insert(k, g);
                        }
                    }
                }
            }
            let scale = 1.0 / group.len() as f64;
            step += 1;
            let lr = schedule.lr(step as usize);
            opt.begin_step();
            model.visit_params_mut(&mut |name, _, t| {
                if let Some(g) = acc.get(name) {
                    let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
                    opt.apply(name, t.data_mut(), &g, lr);
                }
            });
            if spec.clip_adapters {
                model.clip_adapters();
            }
            let log = StepLog {
                stage: spec.tag,
                step,
                epoch,
                lr,
                lm_loss: lm_sum * scale,
                aux_loss: aux_sum * scale,
                lambda_aux: spec.lambda_aux,
                gamma: model.gamma_extremes().into_iter().filter(|g| g.0.is_finite()).collect(),
            };
            report.first_loss.get_or_insert(log.lm_loss);
            report.last_loss = Some(log.lm_loss);
            report.steps += 1;
            on_event(Event::Step(&log))?;
        }
        epoch += 1;
        state.epochs_done = epoch;
        let mut val_loss = None;
        if let Some(patience) = spec.patience {
            if !val.is_empty() {
                let v = evaluate_loss(model, val, spec.render, spec.batch_size, spec.max_len)?;
                val_loss = Some(v);
                report.val_losses.push(v);
                if state.best_val.is_none_or(|b| v < b) {
                    state.best_val = Some(v);
                    state.bad_evals = 0;
                } else {
                    state.bad_evals += 1;
                    if state.bad_evals >= patience {
                        state.stopped = true;
                    }
                }
            }
        }
        let log = EpochLog { stage: spec.tag, epoch, step, val_loss, stopped: state.stopped };
        on_event(Event::Epoch { log: &log, model, optimizer: &opt, state: &state })?;
        if spec.max_steps.is_none() && epoch >= spec.epochs {
            break;
        }
    }
    model.set_mode(TrainMode::Frozen);
    report.epochs = epoch;
    report.early_stopped = state.stopped;
    report.optimizer = opt;
    report.state = state;
    Ok(report)
}

/// Samples used for graph-text alignment: caption samples with a graph.
pub fn alignment_samples(samples: &[InstructionSample]) -> Vec<InstructionSample> {
    samples
        .iter()
        .filter(|s| s.subtask == Subtask::Caption && s.graph.is_some())
        .cloned()
        .collect()
}

/// Full-parameter warm-up of a fresh dense backbone.
pub fn pretrain(model: &mut OmniModel, train: &[InstructionSample], cfg: &TrainConfig, on_event: &mut dyn FnMut(Event<'_>) -> Result<()>) -> Result<StageReport> {
    if model.expanded {
        return Err(Error::usage("pretraining expects a dense backbone"));
    }
    run_stage(model, train, &[], &StageSpec::pretrain(cfg), cfg.adam, None, on_event)
}

/// Projector-only alignment on caption samples.
pub fn train_stage1(
    model: &mut OmniModel,
    align: &[InstructionSample],
    cfg: &TrainConfig,
    resume: Option<Resume>,
    on_event: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<StageReport> {
    run_stage(model, &alignment_samples(align), &[], &StageSpec::stage1(cfg), cfg.adam, resume, on_event)
}

/// Adapters, routers and projector on the full mixture; expands the model
/// first when needed.
pub fn train_stage2(
    model: &mut OmniModel,
    train: &[InstructionSample],
    val: &[InstructionSample],
    cfg: &TrainConfig,
    resume: Option<Resume>,
    on_event: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<StageReport> {
    if !model.expanded {
        model.expand(cfg.seed)?;
    }
    run_stage(model, train, val, &StageSpec::stage2(cfg), cfg.adam, resume, on_event)
}

/// A no-op event sink.
pub fn ignore_events(_: Event<'_>) -> Result<()> {
    Ok(())
}
