//! Mutual nearest-neighbour similarity between models' hidden representations.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Head, OmniModel};
use crate::pipeline::{Corpus, RunConfig};
use crate::rng::SeededRng;
use crate::taskforge::{collate, Batch, GraphFeaturizer, InstructionSample, RenderOptions, Tokenizer};
use crate::tensor::{Binder, Tape};
use crate::training::{train_stage2, Event};

/// Sequence-averaged hidden states, one row per (sample, layer), sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub values: Vec<f64>,
    pub batch: usize,
    pub layers: usize,
    pub dim: usize,
}

impl FeatureStack {
    pub fn rows(&self) -> usize {
        self.batch * self.layers
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Masked mean over the sequence axis for each layer's `(batch·seq)×dim` states.
pub fn masked_mean(layers: &[&[f64]], mask: &[u8], batch: usize, seq: usize, dim: usize) -> Result<FeatureStack> {
    if mask.len() != batch * seq {
        return Err(Error::dim(format!("mask has {} entries, expected {}", mask.len(), batch * seq)));
    }
    for (l, h) in layers.iter().enumerate() {
        if h.len() != batch * seq * dim {
            return Err(Error::dim(format!("layer {l} has {} values, expected {}", h.len(), batch * seq * dim)));
        }
    }
    let n_layers = layers.len();
    let mut values = vec![0.0; batch * n_layers * dim];
    for b in 0..batch {
        let live: Vec<usize> = (0..seq).filter(|&t| mask[b * seq + t] != 0).collect();
        if live.is_empty() {
            return Err(Error::Data(format!("probe row {b} has no unpadded positions")));
        }
        let inv = 1.0 / live.len() as f64;
        for (l, h) in layers.iter().enumerate() {
            let out = &mut values[(b * n_layers + l) * dim..(b * n_layers + l + 1) * dim];
            for &t in &live {
                let src = &h[(b * seq + t) * dim..(b * seq + t + 1) * dim];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += s;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Ok(FeatureStack { values, batch, layers: n_layers, dim })
}

/// Runs `probe` through every decoder layer and averages over live positions.
pub fn extract_features(model: &OmniModel, probe: &Batch) -> Result<FeatureStack> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let inp = model.assemble_inputs(&mut tape, &mut binder, probe)?;
    let out = model.forward(&mut tape, &mut binder, &inp, Head::None)?;
    let layers: Vec<&[f64]> = out.hidden.iter().map(|&h| tape.value(h)).collect();
    masked_mean(&layers, &inp.attn_mask, inp.batch, inp.seq, model.cfg.d_model)
}

/// The `k` nearest other rows of each row, by Euclidean distance, lower index first on ties.
pub fn knn_sets(s: &FeatureStack, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = s.rows();
    if k == 0 || k >= n {
        return Err(Error::usage(format!("k = {k} needs 1 <= k < {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ri = s.row(i);
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (ri.iter().zip(s.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
            .collect();
        d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut nn: Vec<usize> = d[..k].iter().map(|p| p.1).collect();
        nn.sort_unstable();
        out.push(nn);
    }
    Ok(out)
}

/// Mean over rows of the shared fraction of k-nearest-neighbour sets.
pub fn mutual_knn_score(a: &FeatureStack, b: &FeatureStack, k: usize) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::dim(format!("feature stacks have {} and {} rows", a.rows(), b.rows())));
    }
    let na = knn_sets(a, k)?;
    let nb = knn_sets(b, k)?;
    Ok(score_sets(&na, &nb, k))
}

fn score_sets(na: &[Vec<usize>], nb: &[Vec<usize>], k: usize) -> f64 {
    let total: usize = na
        .iter()
        .zip(nb)
        .map(|(x, y)| x.iter().filter(|i| y.binary_search(i).is_ok()).count())
        .sum();
    total as f64 / (k * na.len()) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub labels: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub k: usize,
    pub seed: u64,
    /// SHA-256 of the probe token ids.
    pub probe_digest: String,
}

impl AlignmentReport {
    /// Pairwise scores for `stacks`, all computed on the same probe.
    pub fn from_stacks(labels: Vec<String>, stacks: &[FeatureStack], k: usize, seed: u64, probe_digest: String) -> Result<Self> {
        if labels.len() != stacks.len() {
            return Err(Error::usage("one label per feature stack"));
        }
        let sets = stacks.iter().map(|s| knn_sets(s, k)).collect::<Result<Vec<_>>>()?;
        let m = stacks.len();
        let mut scores = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                if sets[i].len() != sets[j].len() {
                    return Err(Error::dim("feature stacks differ in row count"));
                }
                scores[i][j] = score_sets(&sets[i], &sets[j], k);
            }
        }
        Ok(Self { labels, scores, k, seed, probe_digest })
    }

    /// Checks unit diagonal, symmetry and the unit interval.
    pub fn check(&self) -> Result<()> {
        for (i, row) in self.scores.iter().enumerate() {
            if (row[i] - 1.0).abs() > 1e-12 {
                return Err(Error::Data(format!("diagonal entry {i} is {}", row[i])));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) || (v - self.scores[j][i]).abs() > 1e-12 {
                    return Err(Error::Data(format!("entry ({i},{j}) = {v} breaks bounds or symmetry")));
                }
            }
        }
        Ok(())
    }

    /// Square matrix with a label header row and a label in the first column.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("model");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.scores) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Parses and validates a heatmap written by [`AlignmentReport::heatmap_csv`].
pub fn parse_heatmap(csv: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Data("empty heatmap".into()))?.split(',').collect();
    if header.first() != Some(&"model") || header.len() < 2 {
        return Err(Error::Data("heatmap header must start with `model`".into()));
    }
    let labels: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != labels.len() + 1 || cells[0] != labels.get(i).map(String::as_str).unwrap_or("") {
            return Err(Error::Data(format!("heatmap row {} malformed", i + 1)));
        }
        let vals = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| Error::Data(format!("heatmap row {}: bad number {c:?}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    if rows.len() != labels.len() {
        return Err(Error::Data(format!("{} labels but {} rows", labels.len(), rows.len())));
    }
    Ok((labels, rows))
}

/// Fixed probe drawn from the test split with the alignment seed.
pub fn probe_samples(test: &[InstructionSample], size: usize, seed: u64) -> Vec<InstructionSample> {
    let mut rng = SeededRng::new(seed).split("align-probe");
    let mut idx: Vec<usize> = (0..test.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(size);
    idx.sort_unstable();
    idx.into_iter().map(|i| test[i].clone()).collect()
}

pub fn probe_digest(b: &Batch) -> String {
    let mut h = Sha256::new();
    for id in &b.input_ids {
        h.update((*id as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Trains one stage-2 model per ladder rung from `backbone` and scores all pairs.
pub fn task_scaling_study(
    backbone: &OmniModel,
    corpus: &Corpus,
    cfg: &RunConfig,
    on_event: &mut dyn FnMut(Event<'_>) -> Result<()>,
) -> Result<AlignmentReport> {
    let ac = &cfg.align;
    if ac.ladder.is_empty() {
        return Err(Error::Config("align.ladder is empty".into()));
    }
    let tok = Tokenizer::standard();
    let probe = probe_samples(&corpus.test, ac.probe_size, ac.seed);
    if probe.len() < 2 {
        return Err(Error::Data("probe needs at least two test samples".into()));
    }
    let batch = collate(&probe, &tok, cfg.train.max_len, RenderOptions::FULL, Some(&backbone.encoder as &dyn GraphFeaturizer))?;
    let rows = probe.len() * backbone.cfg.n_layers;
    let k = ac.k.min(rows - 1);
    let mut tc = cfg.train.clone();
    tc.epochs = ac.epochs;
    let mut labels = Vec::new();
    let mut stacks = Vec::new();
    for rung in &ac.ladder {
        let train: Vec<InstructionSample> = corpus.train.iter().filter(|s| rung.contains(&s.subtask)).cloned().collect();
        let val: Vec<InstructionSample> = corpus.val.iter().filter(|s| rung.contains(&s.subtask)).cloned().collect();
        if train.is_empty() {
            return Err(Error::Data(format!("ladder rung {rung:?} has no training samples")));
        }
        let mut model = backbone.clone();
        train_stage2(&mut model, &train, &val, &tc, None, on_event)?;
        labels.push(rung.iter().map(|s| s.name()).collect::<Vec<_>>().join("+"));
        stacks.push(extract_features(&model, &batch)?);
    }
    AlignmentReport::from_stacks(labels, &stacks, k, ac.seed, probe_digest(&batch))
}
