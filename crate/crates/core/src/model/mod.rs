//! Decoder-only transformer with graph-token injection, adapter-wrapped
//! projections and mixture blocks in the upper layers.

mod config;
mod graph;

use std::sync::Arc;

pub use config::ModelConfig;
pub use graph::{graph_histogram, project, GraphFeatures, Projector, ToyGraphEncoder, HIST_LEN};

use crate::error::{Error, Result};
use crate::gal::GalAdapter;
use crate::moge::{upcycle, Expert, FfnWeights, MogeLayer, Routing};
use crate::rng::SeededRng;
use crate::taskforge::{Batch, Tokenizer};
use crate::tensor::{Binder, Tape, Tensor, Var};

/// A frozen weight `[out × in]` with an optional adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub adapter: Option<GalAdapter>,
}

impl Linear {
    fn new(d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self { w: Tensor::uniform(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng), adapter: None }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.bind(tape, &self.w);
        let y = tape.matmul_nt(x, w)?;
        match &self.adapter {
            Some(a) => a.forward(tape, binder, x, y),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionBlock {
    fn projections(&self) -> [(&'static str, &Linear); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }

    fn projections_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [("q", &mut self.q), ("k", &mut self.k), ("v", &mut self.v), ("o", &mut self.o)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnBlock {
    /// Pre-expansion feed-forward.
    Dense(Arc<FfnWeights>),
    /// Frozen feed-forward with one adapter pair.
    Gal(Expert),
    Moge(MogeLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub attn_norm: Tensor,
    pub attn: AttentionBlock,
    pub ffn_norm: Tensor,
    pub ffn: FfnBlock,
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Every backbone tensor and the projector.
    Pretrain,
    /// Projector only.
    Stage1,
    /// Adapters, routers and projector.
    Stage2,
    /// Nothing.
    Frozen,
}

/// Parameter role used to decide trainability per mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Backbone,
    Projector,
    Adapter,
    Router,
}

impl ParamRole {
    pub fn trainable_in(self, mode: TrainMode) -> bool {
        match mode {
            TrainMode::Pretrain => matches!(self, ParamRole::Backbone | ParamRole::Projector),
            TrainMode::Stage1 => self == ParamRole::Projector,
            TrainMode::Stage2 => matches!(self, ParamRole::Adapter | ParamRole::Router | ParamRole::Projector),
            TrainMode::Frozen => false,
        }
    }
}

/// Embedded inputs after graph rows were spliced in.
#[derive(Debug)]
pub struct Assembled {
    pub batch: usize,
    pub seq: usize,
    /// `[batch·seq × d_model]`.
    pub x: Var,
    /// Token id per position; the pad id at graph rows and padding.
    pub ids: Vec<usize>,
    pub graph_pos: Vec<bool>,
    pub attn_mask: Vec<u8>,
    pub label_mask: Vec<u8>,
}

impl Assembled {
    /// Positions `(row, t)` flattened as `row·seq + t` whose successor is a
    /// label, with the successor token as target.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut pos = Vec::new();
        let mut tgt = Vec::new();
        for b in 0..self.batch {
            for t in 0..self.seq.saturating_sub(1) {
                let nxt = b * self.seq + t + 1;
                if self.label_mask[nxt] != 0 {
                    pos.push(b * self.seq + t);
                    tgt.push(self.ids[nxt]);
                }
            }
        }
        (pos, tgt)
    }
}

/// Which positions the output head is evaluated on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    /// Every position: logits `[batch·seq × V]`.
    All,
    /// Only the listed flattened positions.
    Rows(Vec<usize>),
    /// Skip the head.
    None,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Option<Var>,
    /// Output of every decoder layer, `[batch·seq × d_model]` each.
    pub hidden: Vec<Var>,
    pub routings: Vec<Routing>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<usize>,
    /// False when the budget ran out before end-of-turn.
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OmniModel {
    pub cfg: ModelConfig,
    /// `[V × d]`, tied with the output head.
    pub embed: Tensor,
    /// `[max_seq × d]`.
    pub pos: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor,
    pub projector: Projector,
    pub encoder: ToyGraphEncoder,
    pub expanded: bool,
    pub graph_id: usize,
    pub eot_id: usize,
    pub pad_id: usize,
}

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d]).expect("positive width")
}

impl OmniModel {
    /// Fresh dense backbone.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(seed).split("model");
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut rng = root.split_index("layer", l as u64);
                Layer {
                    attn_norm: ones(d),
                    attn: AttentionBlock {
                        q: Linear::new(d, d, &mut rng),
                        k: Linear::new(d, d, &mut rng),
                        v: Linear::new(d, d, &mut rng),
                        o: Linear::new(d, d, &mut rng),
                    },
                    ffn_norm: ones(d),
                    ffn: FfnBlock::Dense(Arc::new(FfnWeights::new(d, cfg.d_ff, &mut rng))),
                }
            })
            .collect();
        let tok = Tokenizer::standard();
        let mut m = Self {
            embed: Tensor::uniform(&[cfg.vocab_size, d], 0.5, &mut root.split("embed")),
            pos: Tensor::uniform(&[cfg.max_seq, d], 0.1, &mut root.split("pos")),
            layers,
            final_norm: ones(d),
            projector: Projector::new(cfg.graph_dim, d, &mut root.split("projector")),
            encoder: ToyGraphEncoder::new(cfg.graph_tokens, cfg.graph_dim),
            expanded: false,
            graph_id: tok.graph_id(),
            eot_id: tok.eot_id(),
            pad_id: tok.pad_id(),
            cfg,
        };
        m.set_mode(TrainMode::Frozen);
        Ok(m)
    }

    /// Wraps every projection with an adapter, gives lower layers an adapted
    /// feed-forward and upcycles upper layers into mixture blocks.
    pub fn expand(&mut self, seed: u64) -> Result<()> {
        if self.expanded {
            return Err(Error::usage("model already expanded"));
        }
        let root = SeededRng::new(seed).split("expand");
        let cfg = self.cfg.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let rng = root.split_index("layer", i as u64);
            for (name, lin) in layer.attn.projections_mut() {
                let (d_out, d_in) = (lin.w.shape()[0], lin.w.shape()[1]);
                lin.adapter = Some(GalAdapter::new(d_in, d_out, cfg.gal_rank, cfg.gal, &mut rng.split(name))?);
            }
            let base = match &layer.ffn {
                FfnBlock::Dense(b) => Arc::clone(b),
                _ => return Err(Error::usage("feed-forward already expanded")),
            };
            layer.ffn = if cfg.is_moge_layer(i + 1) {
                FfnBlock::Moge(upcycle(base, cfg.n_routed, cfg.top_e, cfg.gal_rank, cfg.gal, &mut rng.split("moge"))?)
            } else {
                FfnBlock::Gal(Expert::new(base, cfg.gal_rank, cfg.gal, &mut rng.split("ffn"))?)
            };
        }
        self.expanded = true;
        let n_moge = self.layers.iter().filter(|l| matches!(l.ffn, FfnBlock::Moge(_))).count();
        assert_eq!(n_moge, cfg.moge_layer_count(), "mixture layer layout");
        self.set_mode(TrainMode::Frozen);
        Ok(())
    }

    /// Visits every parameter once, with a stable name and role.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        use ParamRole::*;
        f("embed", Backbone, &self.embed);
        f("pos", Backbone, &self.pos);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            f(&format!("{p}.attn_norm"), Backbone, &layer.attn_norm);
            for (name, lin) in layer.attn.projections() {
                f(&format!("{p}.attn.{name}.w"), Backbone, &lin.w);
                if let Some(a) = &lin.adapter {
                    for (an, t) in a.params() {
                        f(&format!("{p}.attn.{name}.gal.{an}"), Adapter, t);
                    }
                }
            }
            f(&format!("{p}.ffn_norm"), Backbone, &layer.ffn_norm);
            let base = match &layer.ffn {
                FfnBlock::Dense(b) => b,
                FfnBlock::Gal(e) => &e.base,
                FfnBlock::Moge(m) => &m.shared_expert.base,
            };
            f(&format!("{p}.ffn.up"), Backbone, &base.up);
            f(&format!("{p}.ffn.down"), Backbone, &base.down);
            let mut expert = |prefix: &str, e: &Expert| {
                for (side, a) in [("up", &e.gal_up), ("down", &e.gal_down)] {
                    for (an, t) in a.params() {
                        f(&format!("{prefix}.gal_{side}.{an}"), Adapter, t);
                    }
                }
            };
            match &layer.ffn {
                FfnBlock::Dense(_) => {}
                FfnBlock::Gal(e) => expert(&format!("{p}.ffn"), e),
                FfnBlock::Moge(m) => {
                    expert(&format!("{p}.moge.shared"), &m.shared_expert);
                    for (j, e) in m.routed_experts.iter().enumerate() {
                        expert(&format!("{p}.moge.routed.{j}"), e);
                    }
                }
            }
            if let FfnBlock::Moge(m) = &layer.ffn {
                f(&format!("{p}.moge.router"), Router, &m.router);
            }
        }
        f("final_norm", Backbone, &self.final_norm);
        f("projector.w", Projector, &self.projector.w);
        f("projector.b", Projector, &self.projector.b);
    }

    /// Mutable counterpart of [`visit_params`](Self::visit_params), same order and names.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        use ParamRole::*;
        f("embed", Backbone, &mut self.embed);
        f("pos", Backbone, &mut self.pos);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{l}");
            f(&format!("{p}.attn_norm"), Backbone, &mut layer.attn_norm);
            for (name, lin) in layer.attn.projections_mut() {
                f(&format!("{p}.attn.{name}.w"), Backbone, &mut lin.w);
                if let Some(a) = &mut lin.adapter {
                    for (an, t) in a.params_mut() {
                        f(&format!("{p}.attn.{name}.gal.{an}"), Adapter, t);
                    }
                }
            }
            f(&format!("{p}.ffn_norm"), Backbone, &mut layer.ffn_norm);
            let mut base_fn = |w: &mut FfnWeights| {
                f(&format!("{p}.ffn.up"), Backbone, &mut w.up);
                f(&format!("{p}.ffn.down"), Backbone, &mut w.down);
            };
            match &mut layer.ffn {
                FfnBlock::Dense(b) => with_arc_mut(b, &mut base_fn),
                FfnBlock::Gal(e) => with_arc_mut(&mut e.base, &mut base_fn),
                FfnBlock::Moge(m) => m.base_mut(&mut base_fn),
            }
            let mut expert = |prefix: &str, e: &mut Expert| {
                for (side, a) in [("up", &mut e.gal_up), ("down", &mut e.gal_down)] {
                    for (an, t) in a.params_mut() {
                        f(&format!("{prefix}.gal_{side}.{an}"), Adapter, t);
                    }
                }
            };
            match &mut layer.ffn {
                FfnBlock::Dense(_) => {}
                FfnBlock::Gal(e) => expert(&format!("{p}.ffn"), e),
                FfnBlock::Moge(m) => {
                    expert(&format!("{p}.moge.shared"), &mut m.shared_expert);
                    for (j, e) in m.routed_experts.iter_mut().enumerate() {
                        expert(&format!("{p}.moge.routed.{j}"), e);
                    }
                }
            }
            if let FfnBlock::Moge(m) = &mut layer.ffn {
                f(&format!("{p}.moge.router"), Router, &mut m.router);
            }
        }
        f("final_norm", Backbone, &mut self.final_norm);
        f("projector.w", Projector, &mut self.projector.w);
        f("projector.b", Projector, &mut self.projector.b);
    }

    pub fn named_params(&self) -> Vec<(String, ParamRole, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, r, t| out.push((n.to_string(), r, t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, t| n += t.len());
        n
    }

    /// Sets `requires_grad` on every parameter according to its role.
    pub fn set_mode(&mut self, mode: TrainMode) {
        self.visit_params_mut(&mut |_, role, t| t.set_requires_grad(role.trainable_in(mode)));
    }

    /// Names of trainable and frozen parameters; disjoint and exhaustive.
    pub fn partition(&self) -> (Vec<String>, Vec<String>) {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        self.visit_params(&mut |n, _, t| {
            if t.requires_grad() {
                trainable.push(n.to_string());
            } else {
                frozen.push(n.to_string());
            }
        });
        (trainable, frozen)
    }

    pub fn adapters(&self) -> Vec<&GalAdapter> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for (_, lin) in layer.attn.projections() {
                out.extend(lin.adapter.as_ref());
            }
            match &layer.ffn {
                FfnBlock::Dense(_) => {}
                FfnBlock::Gal(e) => out.extend(e.adapters()),
                FfnBlock::Moge(m) => m.experts().for_each(|e| out.extend(e.adapters())),
            }
        }
        out
    }

    pub fn adapters_mut(&mut self) -> Vec<&mut GalAdapter> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let AttentionBlock { q, k, v, o } = &mut layer.attn;
            for lin in [q, k, v, o] {
                out.extend(lin.adapter.as_mut());
            }
            match &mut layer.ffn {
                FfnBlock::Dense(_) => {}
                FfnBlock::Gal(e) => out.extend(e.adapters_mut()),
                FfnBlock::Moge(m) => m.experts_mut().for_each(|e| out.extend(e.adapters_mut())),
            }
        }
        out
    }

    /// Projects every adapter's scalars back into their boxes.
    pub fn clip_adapters(&mut self) {
        for a in self.adapters_mut() {
            a.clip_params();
        }
    }

    /// Per-layer `(min, max)` of adapter scaling factors.
    pub fn gamma_extremes(&self) -> Vec<(f64, f64)> {
        self.layers
            .iter()
            .map(|layer| {
                let mut gs: Vec<f64> = Vec::new();
                for (_, lin) in layer.attn.projections() {
                    gs.extend(lin.adapter.as_ref().map(|a| a.scaling_factor()));
                }
                match &layer.ffn {
                    FfnBlock::Dense(_) => {}
                    FfnBlock::Gal(e) => gs.extend(e.adapters().iter().map(|a| a.scaling_factor())),
                    FfnBlock::Moge(m) => {
                        m.experts().for_each(|e| gs.extend(e.adapters().iter().map(|a| a.scaling_factor())))
                    }
                }
                gs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &g| (lo.min(g), hi.max(g)))
            })
            .collect()
    }

    /// Embeds `batch`, replacing each row's graph placeholder with the
    /// projected graph rows of that sample.
    pub fn assemble_inputs(&self, tape: &mut Tape, binder: &mut Binder, batch: &Batch) -> Result<Assembled> {
        let n = self.cfg.graph_tokens;
        let (bsz, seq) = (batch.batch, batch.seq);
        let mut layouts: Vec<Vec<Slot>> = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let row = batch.row_ids(b);
            let len = batch.row_len(b);
            let mut lay = Vec::with_capacity(len + n);
            let mut spliced = false;
            for (t, &id) in row.iter().enumerate().take(len) {
                if id == self.graph_id && !spliced {
                    if !batch.graph_present.get(b).copied().unwrap_or(false) || batch.graph_features.is_none() {
                        return Err(Error::Data(format!("row {b} has a graph placeholder but no graph")));
                    }
                    lay.extend((0..n).map(Slot::Graph));
                    spliced = true;
                } else {
                    lay.push(Slot::Token(t));
                }
            }
            layouts.push(lay);
        }
        let new_seq = layouts.iter().map(Vec::len).max().unwrap_or(0).max(1);
        if new_seq > self.cfg.max_seq {
            return Err(Error::input(format!("sequence of {new_seq} exceeds max_seq {}", self.cfg.max_seq)));
        }
        if let Some(f) = &batch.graph_features {
            if batch.graph_rows != n || batch.graph_dim != self.cfg.graph_dim || f.len() != bsz * n * batch.graph_dim {
                return Err(Error::dim(format!(
                    "graph features {}×{} do not match the model's {}×{}",
                    batch.graph_rows, batch.graph_dim, n, self.cfg.graph_dim
                )));
            }
        }

        let m = bsz * new_seq;
        let mut ids = vec![self.pad_id; m];
        let mut graph_pos = vec![false; m];
        let mut attn_mask = vec![0u8; m];
        let mut label_mask = vec![0u8; m];
        let mut gather = vec![0usize; m];
        for (b, lay) in layouts.iter().enumerate() {
            for (t, slot) in lay.iter().enumerate() {
                let at = b * new_seq + t;
                attn_mask[at] = 1;
                match *slot {
                    Slot::Token(src) => {
                        ids[at] = batch.input_ids[b * seq + src];
                        label_mask[at] = batch.label_mask[b * seq + src];
                        gather[at] = at;
                    }
                    Slot::Graph(k) => {
                        graph_pos[at] = true;
                        gather[at] = m + b * n + k;
                    }
                }
            }
            for t in lay.len()..new_seq {
                gather[b * new_seq + t] = b * new_seq + t;
            }
        }

        let table = binder.bind(tape, &self.embed);
        let mut x = tape.embedding(table, &ids)?;
        if graph_pos.iter().any(|&g| g) {
            let feats = batch.graph_features.as_ref().expect("checked above");
            let h = tape.constant(vec![bsz * n, self.cfg.graph_dim], feats.clone())?;
            let hg = self.projector.forward(tape, binder, h)?;
            let stacked = tape.concat_rows(x, hg)?;
            x = tape.gather_rows(stacked, &gather)?;
        }
        let pos_table = binder.bind(tape, &self.pos);
        let pos_idx: Vec<usize> = (0..m).map(|i| i % new_seq).collect();
        let pe = tape.gather_rows(pos_table, &pos_idx)?;
        let x = tape.add(x, pe)?;
        Ok(Assembled { batch: bsz, seq: new_seq, x, ids, graph_pos, attn_mask, label_mask })
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, inp: &Assembled, head: Head) -> Result<ForwardOutput> {
        let (bsz, seq) = (inp.batch, inp.seq);
        if seq > self.cfg.max_seq {
            return Err(Error::input(format!("sequence of {seq} exceeds max_seq {}", self.cfg.max_seq)));
        }
        let eps = self.cfg.norm_eps;
        let mut h = inp.x;
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut routings = Vec::new();
        for layer in &self.layers {
            let g = binder.bind(tape, &layer.attn_norm);
            let xn = tape.rmsnorm(h, g, 1, eps)?;
            let q = layer.attn.q.forward(tape, binder, xn)?;
            let k = layer.attn.k.forward(tape, binder, xn)?;
            let v = layer.attn.v.forward(tape, binder, xn)?;
            let a = tape.attention(q, k, v, &inp.attn_mask, bsz, seq, self.cfg.n_heads)?;
            let o = layer.attn.o.forward(tape, binder, a)?;
            h = tape.add(h, o)?;
            let g = binder.bind(tape, &layer.ffn_norm);
            let xn = tape.rmsnorm(h, g, 1, eps)?;
            let y = match &layer.ffn {
                FfnBlock::Dense(w) => w.forward(tape, binder, xn)?,
                FfnBlock::Gal(e) => e.forward(tape, binder, xn)?,
                FfnBlock::Moge(mg) => {
                    let (y, r) = mg.forward(tape, binder, xn, &inp.attn_mask, bsz, seq)?;
                    routings.push(r);
                    y
                }
            };
            h = tape.add(h, y)?;
            hidden.push(h);
        }
        let logits = match head {
            Head::None => None,
            Head::All => Some(self.head(tape, binder, h)?),
            Head::Rows(rows) => {
                let sel = tape.gather_rows(h, &rows)?;
                Some(self.head(tape, binder, sel)?)
            }
        };
        Ok(ForwardOutput { logits, hidden, routings })
    }

    fn head(&self, tape: &mut Tape, binder: &mut Binder, h: Var) -> Result<Var> {
        let g = binder.bind(tape, &self.final_norm);
        let hn = tape.rmsnorm(h, g, 1, self.cfg.norm_eps)?;
        let table = binder.bind(tape, &self.embed);
        tape.matmul_nt(hn, table)
    }

    /// Greedy decoding for several prompts at once. `graphs[i]` holds the
    /// encoder features of prompt `i` when it contains a placeholder.
    pub fn generate(&self, prompts: &[Vec<usize>], graphs: &[Option<Vec<f64>>], max_new: usize) -> Result<Vec<Generation>> {
        if prompts.len() != graphs.len() {
            return Err(Error::dim("one graph slot per prompt required"));
        }
        let n = self.cfg.graph_tokens;
        let d1 = self.cfg.graph_dim;
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let mut out: Vec<Generation> = prompts.iter().map(|_| Generation { ids: Vec::new(), finished: false }).collect();
        for (i, p) in prompts.iter().enumerate() {
            let grows = if p.contains(&self.graph_id) { n - 1 } else { 0 };
            if p.is_empty() || p.len() + grows + max_new > self.cfg.max_seq {
                return Err(Error::input(format!(
                    "prompt {i} of {} tokens plus {max_new} new exceeds max_seq {}",
                    p.len(),
                    self.cfg.max_seq
                )));
            }
        }
        for _ in 0..max_new {
            let active: Vec<usize> = (0..seqs.len()).filter(|&i| !out[i].finished).collect();
            if active.is_empty() {
                break;
            }
            let seq = active.iter().map(|&i| seqs[i].len()).max().expect("non-empty");
            let bsz = active.len();
            let mut input_ids = vec![self.pad_id; bsz * seq];
            let mut attn_mask = vec![0u8; bsz * seq];
            let any_graph = active.iter().any(|&i| graphs[i].is_some());
            let mut feats = if any_graph { Some(vec![0.0; bsz * n * d1]) } else { None };
            let mut present = vec![false; bsz];
            for (r, &i) in active.iter().enumerate() {
                for (t, &id) in seqs[i].iter().enumerate() {
                    input_ids[r * seq + t] = id;
                    attn_mask[r * seq + t] = 1;
                }
                if let (Some(g), Some(f)) = (&graphs[i], feats.as_mut()) {
                    if g.len() != n * d1 {
                        return Err(Error::dim(format!("graph features of length {} for prompt {i}", g.len())));
                    }
                    f[r * n * d1..(r + 1) * n * d1].copy_from_slice(g);
                    present[r] = true;
                }
            }
            let batch = Batch {
                batch: bsz,
                seq,
                input_ids,
                attn_mask,
                label_mask: vec![0; bsz * seq],
                graph_features: feats,
                graph_rows: if any_graph { n } else { 0 },
                graph_dim: if any_graph { d1 } else { 0 },
                graph_present: present,
                truncated: vec![false; bsz],
            };
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let inp = self.assemble_inputs(&mut tape, &mut binder, &batch)?;
            let last: Vec<usize> = (0..bsz)
                .map(|r| r * inp.seq + inp.attn_mask[r * inp.seq..(r + 1) * inp.seq].iter().filter(|&&m| m != 0).count() - 1)
                .collect();
            let fo = self.forward(&mut tape, &mut binder, &inp, Head::Rows(last))?;
            let logits = tape.value(fo.logits.expect("head requested"));
            let v = self.cfg.vocab_size;
            for (r, &i) in active.iter().enumerate() {
                let row = &logits[r * v..(r + 1) * v];
                let next = row
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (j, &x)| if x > bv { (j, x) } else { (bi, bv) })
                    .0;
                seqs[i].push(next);
                out[i].ids.push(next);
                if next == self.eot_id {
                    out[i].finished = true;
                }
            }
        }
        Ok(out)
    }
}

/// Source of one position after splicing.
#[derive(Clone, Copy)]
enum Slot {
    Token(usize),
    Graph(usize),
}

fn with_arc_mut(arc: &mut Arc<FfnWeights>, f: &mut dyn FnMut(&mut FfnWeights)) {
    let mut w = (**arc).clone();
    f(&mut w);
    *arc = Arc::new(w);
}
