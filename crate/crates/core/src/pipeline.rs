//! End-to-end orchestration shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{summarize, EvalRecord, TaskSummary};
use crate::model::{Head, OmniModel};
use crate::moge::RouterHistogram;
use crate::taskforge::{
    by_split, collate, encode_prompt, generate_corpus, leakage_scan, pretraining_corpus, CorpusSpec, GraphFeaturizer, InstructionSample,
    LeakageReport, RenderOptions, Split, Subtask, Tokenizer,
};
use crate::tensor::{Binder, Tape};
use crate::training::{pretrain, train_stage1, train_stage2, Event, StageReport, TrainConfig};
use crate::model::ModelConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub batch_size: usize,
    /// Subtasks to score; empty means all.
    pub subtasks: Vec<Subtask>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new_tokens: 32, batch_size: 64, subtasks: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// One subtask list per model to train.
    pub ladder: Vec<Vec<Subtask>>,
    pub k: usize,
    pub probe_size: usize,
    /// Stage-2 epochs per rung.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            ladder: vec![
                vec![Subtask::Edit],
                vec![Subtask::Edit, Subtask::Atoms],
                vec![Subtask::Edit, Subtask::Atoms, Subtask::Caption, Subtask::Grow],
            ],
            k: 10,
            probe_size: 32,
            epochs: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub align: AlignConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.corpus.validate()?;
        if self.eval.batch_size == 0 || self.eval.max_new_tokens == 0 {
            return Err(Error::Config("eval batch_size and max_new_tokens must be positive".into()));
        }
        if self.align.k == 0 || self.align.probe_size < 2 {
            return Err(Error::Config("align k >= 1 and probe_size >= 2 required".into()));
        }
        if self.train.max_len + self.model.graph_tokens > self.model.max_seq {
            return Err(Error::Config(format!(
                "train.max_len {} plus {} graph rows exceeds model.max_seq {}",
                self.train.max_len, self.model.graph_tokens, self.model.max_seq
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub all: Vec<InstructionSample>,
    pub train: Vec<InstructionSample>,
    pub val: Vec<InstructionSample>,
    pub test: Vec<InstructionSample>,
    pub leakage: LeakageReport,
    /// Backbone pretraining stream, disjoint from val and test by leakage key.
    pub pretraining: Vec<InstructionSample>,
    pub pretraining_leakage: LeakageReport,
}

impl Corpus {
    /// Splits `all` and scrubs train and the pretraining stream against val and test.
    pub fn build(all: Vec<InstructionSample>, spec: &CorpusSpec, seed: u64, pretrain_scale: usize) -> Result<Self> {
        let val = by_split(&all, Split::Val);
        let test = by_split(&all, Split::Test);
        let (train, leakage) = leakage_scan(&by_split(&all, Split::Train), &[&val, &test]);
        let (pretraining, pretraining_leakage) = pretraining_corpus(spec, seed, pretrain_scale, &[&val, &test])?;
        Ok(Self { all, train, val, test, leakage, pretraining, pretraining_leakage })
    }
}

pub fn prepare_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let spec = &cfg.data.corpus;
    Corpus::build(generate_corpus(spec, cfg.data.seed)?, spec, cfg.data.seed, cfg.train.pretrain_scale)
}

/// Fresh backbone after pretraining and projector alignment.
pub fn build_backbone(
    cfg: &RunConfig,
    corpus: &Corpus,
    on_event: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<(OmniModel, StageReport, StageReport)> {
    let mut model = OmniModel::new(cfg.model.clone(), cfg.train.seed)?;
    let pre = pretrain(&mut model, &corpus.pretraining, &cfg.train, on_event)?;
    let s1 = train_stage1(&mut model, &corpus.train, &cfg.train, None, on_event)?;
    Ok((model, pre, s1))
}

/// Pretraining, stage 1 and stage 2 in sequence.
pub fn run_all(cfg: &RunConfig, corpus: &Corpus, on_event: &mut dyn FnMut(Event<'_>) -> Result<()>) -> Result<(OmniModel, Vec<StageReport>)> {
    let (mut model, pre, s1) = build_backbone(cfg, corpus, on_event)?;
    let s2 = train_stage2(&mut model, &corpus.train, &corpus.val, &cfg.train, None, on_event)?;
    Ok((model, vec![pre, s1, s2]))
}

/// Greedy responses for `samples`, rendered with graph and molecule strings.
pub fn predict(model: &OmniModel, samples: &[InstructionSample], max_new: usize, batch_size: usize) -> Result<Vec<EvalRecord>> {
    let tok = Tokenizer::standard();
    let render = RenderOptions::FULL;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let prompts = chunk.iter().map(|s| encode_prompt(s, &tok, render)).collect::<Result<Vec<_>>>()?;
        let graphs: Vec<Option<Vec<f64>>> = chunk
            .iter()
            .map(|s| s.graph.as_ref().map(|g| model.encoder.encode(g)))
            .collect();
        let gens = model.generate(&prompts, &graphs, max_new)?;
        for (s, g) in chunk.iter().zip(gens) {
            let ids: Vec<usize> = g.ids.into_iter().take_while(|&i| i != model.eot_id).collect();
            out.push(EvalRecord {
                task: s.task(),
                subtask: s.subtask,
                prediction: tok.decode(&ids)?,
                reference: s.response.clone(),
            });
        }
    }
    Ok(out)
}

/// Teacher-forced routing histograms per mixture layer (1-based layer ids).
pub fn router_histograms(model: &OmniModel, samples: &[InstructionSample], batch_size: usize, max_len: usize) -> Result<Vec<(usize, RouterHistogram)>> {
    let tok = Tokenizer::standard();
    let layers: Vec<usize> = (1..=model.cfg.n_layers).filter(|&l| model.expanded && model.cfg.is_moge_layer(l)).collect();
    let mut hists: Vec<(usize, RouterHistogram)> = layers.iter().map(|&l| (l, RouterHistogram::default())).collect();
    if hists.is_empty() {
        return Ok(hists);
    }
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = collate(chunk, &tok, max_len, RenderOptions::FULL, Some(&model.encoder as &dyn GraphFeaturizer))?;
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let inp = model.assemble_inputs(&mut tape, &mut binder, &batch)?;
        let out = model.forward(&mut tape, &mut binder, &inp, Head::None)?;
        for (h, r) in hists.iter_mut().zip(&out.routings) {
            h.1.add(&r.stats);
        }
    }
    Ok(hists)
}

pub fn evaluate(model: &OmniModel, samples: &[InstructionSample], cfg: &EvalConfig) -> Result<(Vec<EvalRecord>, Vec<TaskSummary>)> {
    let chosen: Vec<InstructionSample> = samples
        .iter()
        .filter(|s| cfg.subtasks.is_empty() || cfg.subtasks.contains(&s.subtask))
        .cloned()
        .collect();
    if chosen.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let records = predict(model, &chosen, cfg.max_new_tokens, cfg.batch_size)?;
    let summary = summarize(&records)?;
    Ok((records, summary))
}
