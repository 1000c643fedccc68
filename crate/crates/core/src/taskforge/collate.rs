//! Tokenise, right-pad and batch rendered samples.

use crate::error::{Error, Result};
use crate::tselfies::MoleculeGraph;

use super::chat::{has_graph, render_completion, render_prompt, RenderOptions};
use super::corpus::InstructionSample;
use super::tokenizer::Tokenizer;

/// Anything that maps a molecule graph to `rows() × dim()` features.
pub trait GraphFeaturizer {
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn encode(&self, g: &MoleculeGraph) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    /// Row-major `batch × seq`.
    pub input_ids: Vec<usize>,
    pub attn_mask: Vec<u8>,
    pub label_mask: Vec<u8>,
    /// `batch × rows × dim`, zero rows where no graph is present.
    pub graph_features: Option<Vec<f64>>,
    pub graph_rows: usize,
    pub graph_dim: usize,
    pub graph_present: Vec<bool>,
    /// Rows whose response was cut to fit `max_len`.
    pub truncated: Vec<bool>,
}

impl Batch {
    pub fn row_ids(&self, b: usize) -> &[usize] {
        &self.input_ids[b * self.seq..(b + 1) * self.seq]
    }

    pub fn row_len(&self, b: usize) -> usize {
        self.attn_mask[b * self.seq..(b + 1) * self.seq].iter().map(|&m| m as usize).sum()
    }

    /// Unpadded token ids of row `b`.
    pub fn unpadded(&self, b: usize) -> &[usize] {
        &self.row_ids(b)[..self.row_len(b)]
    }
}

/// Prompt ids (through the assistant header) for generation.
pub fn encode_prompt(sample: &InstructionSample, tok: &Tokenizer, opts: RenderOptions) -> Result<Vec<usize>> {
    tok.encode(&render_prompt(sample, opts))
}

pub fn collate(
    samples: &[InstructionSample],
    tok: &Tokenizer,
    max_len: usize,
    opts: RenderOptions,
    featurizer: Option<&dyn GraphFeaturizer>,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::usage("collate on an empty sample list"));
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut truncated = Vec::with_capacity(samples.len());
    for s in samples {
        let prompt = tok.encode(&render_prompt(s, opts))?;
        let mut completion = tok.encode(&render_completion(s))?;
        if prompt.len() >= max_len {
            return Err(Error::Data(format!(
                "prompt of {} tokens leaves no room for a response within {max_len}",
                prompt.len()
            )));
        }
        let room = max_len - prompt.len();
        let cut = completion.len() > room;
        completion.truncate(room);
        truncated.push(cut);
        rows.push((prompt, completion));
    }
    let seq = rows.iter().map(|(p, c)| p.len() + c.len()).max().expect("non-empty");
    let b = samples.len();
    let mut input_ids = vec![tok.pad_id(); b * seq];
    let mut attn_mask = vec![0u8; b * seq];
    let mut label_mask = vec![0u8; b * seq];
    for (r, (p, c)) in rows.iter().enumerate() {
        let base = r * seq;
        for (t, &id) in p.iter().chain(c.iter()).enumerate() {
            input_ids[base + t] = id;
            attn_mask[base + t] = 1;
        }
        for t in p.len()..p.len() + c.len() {
            label_mask[base + t] = 1;
        }
    }
    let graph_present: Vec<bool> = samples.iter().map(|s| has_graph(s, opts)).collect();
    let (graph_features, graph_rows, graph_dim) = match featurizer {
        Some(f) if graph_present.iter().any(|&g| g) => {
            let stride = f.rows() * f.dim();
            let mut v = vec![0.0; b * stride];
            for (r, s) in samples.iter().enumerate() {
                if graph_present[r] {
                    let feats = f.encode(s.graph.as_ref().expect("present"));
                    debug_assert_eq!(feats.len(), stride);
                    v[r * stride..(r + 1) * stride].copy_from_slice(&feats);
                }
            }
            (Some(v), f.rows(), f.dim())
        }
        _ => (None, 0, 0),
    };
    Ok(Batch {
        batch: b,
        seq,
        input_ids,
        attn_mask,
        label_mask,
        graph_features,
        graph_rows,
        graph_dim,
        graph_present,
        truncated,
    })
}
