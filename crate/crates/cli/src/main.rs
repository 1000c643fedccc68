//! `omnimol`: corpus generation, staged training, evaluation and the
//! representation-alignment study, all driven by one TOML config.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use omnimol_core::alignment::task_scaling_study;
use omnimol_core::metrics::{summarize, summary_csv, EvalRecord};
use omnimol_core::moge::router_csv;
use omnimol_core::pipeline::{build_backbone, evaluate, prepare_corpus, router_histograms, Corpus, RunConfig};
use omnimol_core::taskforge::{write_jsonl, InstructionSample};
use omnimol_core::training::{
    checkpoint_digest, load_checkpoint, save_checkpoint, train_stage2, Checkpoint, Event, Resume, StageTag, TrainerState,
};
use omnimol_core::tselfies::{decode_str, descriptor};
use omnimol_core::Error;

#[derive(Parser)]
#[command(name = "omnimol", version, about = "Toy multi-task molecular instruction tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default configuration as TOML.
    PrintConfig,
    /// Generate the synthetic corpus and its statistics.
    Forge {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run training stages and write checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Checkpoint to continue from; required for `--stage 2`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate responses for a split and print the metric table.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also write predictions, metrics and routing histograms here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a predictions JSONL file without running a model.
    Score {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Train one model per ladder rung and write the alignment heatmap.
    Align {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to use as the shared backbone.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

/// Failure with its exit code and a one-line message.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Integrity { .. } => 4,
            _ => 3,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 3, msg: format!("io error: {e}") }
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_error(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| config_error(format!("config {}: {}", p.display(), e.message())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn config_toml(cfg: &RunConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| config_error(format!("cannot serialise config: {e}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replay record written next to every command's outputs.
#[derive(Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    config_sha256: String,
    data_seed: u64,
    train_seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> CliResult<Self> {
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: sha256_hex(config_toml(cfg)?.as_bytes()),
            data_seed: cfg.data.seed,
            train_seed: cfg.train.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), sha256_hex(&fs::read(path)?));
        Ok(())
    }

    /// Writes `bytes` to `dir/name` and records its digest.
    fn emit(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
        fs::write(dir.join(name), bytes)?;
        self.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Failure { code: 3, msg: e.to_string() })?;
        text.push('\n');
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn jsonl(samples: &[InstructionSample]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, samples)?;
    Ok(buf)
}

fn histogram_rows(name: &str, values: impl Iterator<Item = usize>) -> Vec<(String, usize, usize)> {
    let mut h: BTreeMap<usize, usize> = BTreeMap::new();
    values.for_each(|v| *h.entry(v).or_default() += 1);
    h.into_iter().map(|(bin, n)| (name.to_string(), bin, n)).collect()
}

/// Atom-count, ring-count and weight (10 Da bins) histograms over the
/// distinct molecules of the corpus, plus per-split sample counts.
fn corpus_stats(corpus: &Corpus) -> CliResult<String> {
    let mut molecules: Vec<&str> = corpus.all.iter().flat_map(|s| s.molecules.iter().map(String::as_str)).collect();
    molecules.sort_unstable();
    molecules.dedup();
    let descs = molecules.iter().map(|m| decode_str(m).map(|g| descriptor(&g))).collect::<Result<Vec<_>, _>>()?;
    let mut rows = histogram_rows("atoms", descs.iter().map(|d| d.atom_count));
    rows.extend(histogram_rows("rings", descs.iter().map(|d| d.ring_count)));
    rows.extend(histogram_rows("weight_10da", descs.iter().map(|d| (d.weight / 10.0).floor() as usize * 10)));
    let mut s = String::from("quantity,bin,count\n");
    for (split, n) in [("train", corpus.train.len()), ("val", corpus.val.len()), ("test", corpus.test.len())] {
        s.push_str(&format!("split,{split},{n}\n"));
    }
    s.push_str(&format!("leakage_removed,train,{}\n", corpus.leakage.removed.len()));
    for (q, bin, n) in rows {
        s.push_str(&format!("{q},{bin},{n}\n"));
    }
    Ok(s)
}

fn forge(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    fs::create_dir_all(&out)?;
    let corpus = prepare_corpus(&cfg)?;
    let mut m = Manifest::new("forge", &cfg)?;
    m.emit(&out, "corpus.jsonl", &jsonl(&corpus.all)?)?;
    m.emit(&out, "train.jsonl", &jsonl(&corpus.train)?)?;
    m.emit(&out, "val.jsonl", &jsonl(&corpus.val)?)?;
    m.emit(&out, "test.jsonl", &jsonl(&corpus.test)?)?;
    let stats = corpus_stats(&corpus)?;
    m.emit(&out, "stats.csv", stats.as_bytes())?;
    m.write(&out)?;
    print!("{stats}");
    Ok(())
}

/// Appends training events to a JSONL log and checkpoints after each
/// stage-2 epoch so an interrupted run can resume.
struct EventSink {
    log: fs::File,
    out: PathBuf,
    stage2_name: &'static str,
}

impl EventSink {
    fn handle(&mut self, e: Event<'_>) -> omnimol_core::Result<()> {
        match e {
            Event::Step(l) => {
                writeln!(self.log, "{}", serde_json::to_string(l).expect("step log serialises"))?;
            }
            Event::Epoch { log, model, optimizer, state } => {
                writeln!(self.log, "{}", serde_json::to_string(log).expect("epoch log serialises"))?;
                if log.stage == StageTag::Stage2 {
                    let ck = Checkpoint {
                        model: model.clone(),
                        stage: StageTag::Stage2,
                        step: log.step,
                        optimizer: optimizer.clone(),
                        state: state.clone(),
                    };
                    save_checkpoint(&ck, &self.out.join(self.stage2_name))?;
                }
            }
        }
        Ok(())
    }
}

fn train(config: Option<PathBuf>, stage: StageArg, resume: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if matches!(stage, StageArg::Two) && resume.is_none() {
        return Err(config_error("--stage 2 needs --resume with a stage-1 or stage-2 checkpoint"));
    }
    if !matches!(stage, StageArg::Two) && resume.is_some() {
        return Err(config_error("--resume applies to --stage 2 only"));
    }
    fs::create_dir_all(&out)?;
    let corpus = prepare_corpus(&cfg)?;
    let mut m = Manifest::new("train", &cfg)?;
    let mut sink = EventSink { log: fs::File::create(out.join("train_log.jsonl"))?, out: out.clone(), stage2_name: "stage2.ck" };
    let mut on_event = |e: Event<'_>| sink.handle(e);

    let (mut model, resume_state) = match &resume {
        Some(path) => {
            m.input(path)?;
            let ck = load_checkpoint(path)?;
            match ck.stage {
                StageTag::Stage1 => (ck.model, None),
                StageTag::Stage2 => (ck.model, Some(Resume { optimizer: ck.optimizer, state: ck.state, step: ck.step })),
                other => return Err(config_error(format!("cannot resume stage 2 from a {other:?} checkpoint"))),
            }
        }
        None => {
            let (model, _, s1) = build_backbone(&cfg, &corpus, &mut on_event)?;
            let ck = Checkpoint { model, stage: StageTag::Stage1, step: s1.steps, optimizer: s1.optimizer, state: TrainerState::default() };
            save_checkpoint(&ck, &out.join("stage1.ck"))?;
            let digest = checkpoint_digest(&ck)?;
            m.outputs.insert("stage1.ck".into(), digest.clone());
            println!("stage1 {} sha256 {digest}", out.join("stage1.ck").display());
            (ck.model, None)
        }
    };
    if !matches!(stage, StageArg::One) {
        let prior = resume_state.as_ref().map_or(0, |r| r.step);
        let report = train_stage2(&mut model, &corpus.train, &corpus.val, &cfg.train, resume_state, &mut on_event)?;
        let step = prior + report.steps;
        let ck = Checkpoint { model, stage: StageTag::Stage2, step, optimizer: report.optimizer, state: report.state };
        save_checkpoint(&ck, &out.join("stage2.ck"))?;
        let digest = checkpoint_digest(&ck)?;
        m.outputs.insert("stage2.ck".into(), digest.clone());
        println!("stage2 {} sha256 {digest}", out.join("stage2.ck").display());
    }
    m.emit(&out, "config.toml", config_toml(&cfg)?.as_bytes())?;
    m.write(&out)?;
    Ok(())
}

fn split_samples(corpus: &Corpus, split: SplitArg) -> &[InstructionSample] {
    match split {
        SplitArg::Train => &corpus.train,
        SplitArg::Val => &corpus.val,
        SplitArg::Test => &corpus.test,
    }
}

fn eval(config: Option<PathBuf>, ckpt: PathBuf, split: SplitArg, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config.as_deref())?;
    let ck = load_checkpoint(&ckpt)?;
    let corpus = prepare_corpus(&cfg)?;
    let samples = split_samples(&corpus, split);
    let (records, summaries) = evaluate(&ck.model, samples, &cfg.eval)?;
    let table = summary_csv(&summaries);
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        let mut m = Manifest::new("eval", &cfg)?;
        m.input(&ckpt)?;
        let mut preds = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut preds, r).map_err(|e| Failure { code: 3, msg: e.to_string() })?;
            preds.push(b'\n');
        }
        m.emit(&dir, "predictions.jsonl", &preds)?;
        m.emit(&dir, "metrics.csv", table.as_bytes())?;
        let hists = router_histograms(&ck.model, samples, cfg.eval.batch_size, cfg.train.max_len)?;
        m.emit(&dir, "router.csv", router_csv(&hists).as_bytes())?;
        m.write(&dir)?;
    }
    print!("{table}");
    Ok(())
}

fn score(predictions: PathBuf) -> CliResult<()> {
    let file = fs::File::open(&predictions).map_err(|e| Failure { code: 3, msg: format!("cannot open {}: {e}", predictions.display()) })?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufRead::lines(BufReader::new(file)).enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Failure { code: 3, msg: format!("{} line {}: {e}", predictions.display(), i + 1) })?;
        records.push(r);
    }
    print!("{}", summary_csv(&summarize(&records)?));
    Ok(())
}

fn align(config: Option<PathBuf>, out: PathBuf, ckpt: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config.as_deref())?;
    fs::create_dir_all(&out)?;
    let corpus = prepare_corpus(&cfg)?;
    let mut m = Manifest::new("align", &cfg)?;
    let backbone = match &ckpt {
        Some(p) => {
            m.input(p)?;
            let ck = load_checkpoint(p)?;
            if ck.model.expanded {
                return Err(config_error("align needs a stage-1 checkpoint as backbone"));
            }
            ck.model
        }
        None => build_backbone(&cfg, &corpus, &mut |_| Ok(()))?.0,
    };
    let report = task_scaling_study(&backbone, &corpus, &cfg, &mut |_| Ok(()))?;
    report.check()?;
    let csv = report.heatmap_csv();
    m.emit(&out, "alignment_heatmap.csv", csv.as_bytes())?;
    m.inputs.insert("probe".into(), report.probe_digest.clone());
    m.write(&out)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::PrintConfig => {
            print!("{}", config_toml(&RunConfig::default())?);
            Ok(())
        }
        Cmd::Forge { config, out, seed } => forge(config, out, seed),
        Cmd::Train { config, stage, resume, out, seed } => train(config, stage, resume, out, seed),
        Cmd::Eval { config, ckpt, split, out } => eval(config, ckpt, split, out),
        Cmd::Score { predictions } => score(predictions),
        Cmd::Align { config, out, ckpt } => align(config, out, ckpt),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
