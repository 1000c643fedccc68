//! Mixture of adapter experts.
//!
//! Every expert wraps the same frozen feed-forward weights and differs only
//! through its own pair of adapters. One shared expert sees every token; the
//! router picks `top_e` of the `n` routed experts per token.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gal::{GalAdapter, GalConstants};
use crate::rng::SeededRng;
use crate::tensor::{Binder, Tape, Tensor, Var};

/// Two-matrix SiLU feed-forward weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    /// `[d_ff × d]`.
    pub up: Tensor,
    /// `[d × d_ff]`.
    pub down: Tensor,
}

impl FfnWeights {
    pub fn new(d: usize, d_ff: usize, rng: &mut SeededRng) -> Self {
        Self {
            up: Tensor::uniform(&[d_ff, d], 1.0 / (d as f64).sqrt(), rng),
            down: Tensor::uniform(&[d, d_ff], 1.0 / (d_ff as f64).sqrt(), rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.up.shape()[1]
    }

    pub fn d_ff(&self) -> usize {
        self.up.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let up = binder.bind(tape, &self.up);
        let down = binder.bind(tape, &self.down);
        let hid = tape.matmul_nt(x, up)?;
        let act = tape.silu(hid);
        tape.matmul_nt(act, down)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.up.set_requires_grad(on);
        self.down.set_requires_grad(on);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub base: Arc<FfnWeights>,
    pub gal_up: GalAdapter,
    pub gal_down: GalAdapter,
}

impl Expert {
    pub fn new(base: Arc<FfnWeights>, rank: usize, consts: GalConstants, rng: &mut SeededRng) -> Result<Self> {
        let (d, d_ff) = (base.d_model(), base.d_ff());
        let gal_up = GalAdapter::new(d, d_ff, rank, consts, &mut rng.split("up"))?;
        let gal_down = GalAdapter::new(d_ff, d, rank, consts, &mut rng.split("down"))?;
        Ok(Self { base, gal_up, gal_down })
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w0x = self.base_up(tape, binder, x)?;
        self.forward_from(tape, binder, x, w0x)
    }

    /// Frozen up-projection `x·upᵀ`, identical for every expert sharing this base.
    pub fn base_up(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let up = binder.bind(tape, &self.base.up);
        tape.matmul_nt(x, up)
    }

    /// Forward pass given a precomputed [`Expert::base_up`] of `x`.
    pub fn forward_from(&self, tape: &mut Tape, binder: &mut Binder, x: Var, w0x: Var) -> Result<Var> {
        let down = binder.bind(tape, &self.base.down);
        let hid = self.gal_up.forward(tape, binder, x, w0x)?;
        let act = tape.silu(hid);
        let w0h = tape.matmul_nt(act, down)?;
        self.gal_down.forward(tape, binder, act, w0h)
    }

    pub fn adapters(&self) -> [&GalAdapter; 2] {
        [&self.gal_up, &self.gal_down]
    }

    pub fn adapters_mut(&mut self) -> [&mut GalAdapter; 2] {
        [&mut self.gal_up, &mut self.gal_down]
    }
}

/// Per-sequence routing statistics gathered over unpadded tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxLossStats {
    pub n: usize,
    pub e: usize,
    /// `B × N` selection counts.
    pub selection_counts: Vec<usize>,
    /// `B × N` mean router scores.
    pub mean_scores: Vec<f64>,
    pub tokens_per_row: Vec<usize>,
}

impl AuxLossStats {
    pub fn batch(&self) -> usize {
        self.tokens_per_row.len()
    }

    /// `C_ij = N·count_ij / (T_i·E)`; zero for rows without tokens.
    pub fn coefficients(&self) -> Vec<f64> {
        let (n, e) = (self.n, self.e);
        let mut c = vec![0.0; self.selection_counts.len()];
        for (i, &t) in self.tokens_per_row.iter().enumerate() {
            if t == 0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] = n as f64 * self.selection_counts[i * n + j] as f64 / (t * e) as f64;
            }
        }
        c
    }
}

/// `(1/B) Σ_i Σ_j C_ij · s̄_ij` evaluated on recorded statistics.
pub fn aux_loss(stats: &AuxLossStats, n: usize, e: usize) -> Result<f64> {
    let b = stats.batch();
    if stats.n != n || stats.e != e || stats.selection_counts.len() != b * n || stats.mean_scores.len() != b * n {
        return Err(Error::dim(format!("aux stats do not describe {b} rows of {n} experts choosing {e}")));
    }
    if b == 0 {
        return Err(Error::dim("aux stats over zero rows"));
    }
    let c = stats.coefficients();
    Ok(c.iter().zip(&stats.mean_scores).map(|(c, s)| c * s).sum::<f64>() / b as f64)
}

/// Output of one routing decision over `M = B·T` tokens.
#[derive(Debug)]
pub struct Routing {
    /// `[M × N]` softmax scores.
    pub scores: Var,
    /// `[M × N]` renormalised gates, zero outside the selection.
    pub gates: Var,
    /// `M × E` chosen expert ids, best first.
    pub indices: Vec<usize>,
    pub stats: AuxLossStats,
    /// Differentiable load-balancing loss for this layer.
    pub aux: Var,
}

/// Top-`e` indices of `row`, larger score first, lower index on ties.
pub fn top_indices(row: &[f64], e: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(e);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct MogeLayer {
    /// `[N × d]`.
    pub router: Tensor,
    pub shared_expert: Expert,
    pub routed_experts: Vec<Expert>,
    pub top_e: usize,
}

/// Builds `n_routed + 1` experts over the same frozen weights.
pub fn upcycle(
    ffn: Arc<FfnWeights>,
    n_routed: usize,
    top_e: usize,
    rank: usize,
    consts: GalConstants,
    rng: &mut SeededRng,
) -> Result<MogeLayer> {
    if top_e == 0 || top_e > n_routed {
        return Err(Error::usage(format!("need 1 <= top_e ({top_e}) <= n_routed ({n_routed})")));
    }
    let d = ffn.d_model();
    let shared_expert = Expert::new(Arc::clone(&ffn), rank, consts, &mut rng.split("shared"))?;
    let routed_experts = (0..n_routed)
        .map(|j| Expert::new(Arc::clone(&ffn), rank, consts, &mut rng.split_index("routed", j as u64)))
        .collect::<Result<Vec<_>>>()?;
    let router = Tensor::uniform(&[n_routed, d], 1.0 / (d as f64).sqrt(), &mut rng.split("router")).with_requires_grad(true);
    Ok(MogeLayer { router, shared_expert, routed_experts, top_e })
}

impl MogeLayer {
    pub fn n_routed(&self) -> usize {
        self.routed_experts.len()
    }

    /// Routes `h[B·T × d]`; `mask` marks unpadded tokens.
    pub fn route(&self, tape: &mut Tape, binder: &mut Binder, h: Var, mask: &[u8], batch: usize, seq: usize) -> Result<Routing> {
        let n = self.n_routed();
        let e = self.top_e;
        let m = batch * seq;
        if mask.len() != m || tape.value(h).len() != m * self.router.shape()[1] {
            return Err(Error::dim(format!("route over {batch}×{seq} tokens with mask of {}", mask.len())));
        }
        let psi = binder.bind(tape, &self.router);
        let logits = tape.matmul_nt(h, psi)?;
        let scores = tape.softmax(logits, 1)?;
        let sv = tape.value(scores).to_vec();
        let mut indices = Vec::with_capacity(m * e);
        let mut selected = vec![false; m * n];
        let mut counts = vec![0usize; batch * n];
        let mut sums = vec![0.0; batch * n];
        let mut tokens = vec![0usize; batch];
        for t in 0..m {
            let row = &sv[t * n..(t + 1) * n];
            let top = top_indices(row, e);
            for &j in &top {
                selected[t * n + j] = true;
            }
            if mask[t] != 0 {
                let b = t / seq;
                tokens[b] += 1;
                for &j in &top {
                    counts[b * n + j] += 1;
                }
                for j in 0..n {
                    sums[b * n + j] += row[j];
                }
            }
            indices.extend(top);
        }
        let mean_scores: Vec<f64> = sums
            .iter()
            .enumerate()
            .map(|(k, &s)| if tokens[k / n] > 0 { s / tokens[k / n] as f64 } else { 0.0 })
            .collect();
        let stats = AuxLossStats { n, e, selection_counts: counts, mean_scores, tokens_per_row: tokens };
        let gates = tape.topk_gates(scores, &selected)?;

        // Σ_ij C_ij · (1/T_i) Σ_t s_ijt / B as a weighted sum over token scores.
        let c = stats.coefficients();
        let mut w = vec![0.0; m * n];
        for t in 0..m {
            let b = t / seq;
            if mask[t] != 0 {
                let tb = stats.tokens_per_row[b] as f64;
                for j in 0..n {
                    w[t * n + j] = c[b * n + j] / (tb * batch as f64);
                }
            }
        }
        let aux = tape.weighted_sum(scores, &w)?;
        Ok(Routing { scores, gates, indices, stats, aux })
    }

    /// `shared(h) + Σ_j gate_j · routed_j(h)`; experts no token selected are skipped.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, h: Var, mask: &[u8], batch: usize, seq: usize) -> Result<(Var, Routing)> {
        let routing = self.route(tape, binder, h, mask, batch, seq)?;
        let w0x = self.shared_expert.base_up(tape, binder, h)?;
        let mut out = self.shared_expert.forward_from(tape, binder, h, w0x)?;
        for (j, expert) in self.routed_experts.iter().enumerate() {
            if !routing.indices.contains(&j) {
                continue;
            }
            let y = if Arc::ptr_eq(&expert.base, &self.shared_expert.base) {
                expert.forward_from(tape, binder, h, w0x)?
            } else {
                expert.forward(tape, binder, h)?
            };
            let gy = tape.mul_column(y, routing.gates, j)?;
            out = tape.add(out, gy)?;
        }
        Ok((out, routing))
    }

    /// Mutates the shared frozen weights and re-shares the result with every expert.
    pub fn base_mut<R>(&mut self, f: impl FnOnce(&mut FfnWeights) -> R) -> R {
        let mut base = (*self.shared_expert.base).clone();
        let r = f(&mut base);
        let base = Arc::new(base);
        for e in self.experts_mut() {
            e.base = Arc::clone(&base);
        }
        r
    }

    pub fn experts(&self) -> impl Iterator<Item = &Expert> {
        std::iter::once(&self.shared_expert).chain(self.routed_experts.iter())
    }

    pub fn experts_mut(&mut self) -> impl Iterator<Item = &mut Expert> {
        std::iter::once(&mut self.shared_expert).chain(self.routed_experts.iter_mut())
    }
}

/// Free-function form of [`MogeLayer::route`].
pub fn route(layer: &MogeLayer, tape: &mut Tape, binder: &mut Binder, h: Var, mask: &[u8], batch: usize, seq: usize) -> Result<Routing> {
    layer.route(tape, binder, h, mask, batch, seq)
}

/// Free-function form of [`MogeLayer::forward`].
pub fn moge_forward(
    layer: &MogeLayer,
    tape: &mut Tape,
    binder: &mut Binder,
    h: Var,
    mask: &[u8],
    batch: usize,
    seq: usize,
) -> Result<(Var, Routing)> {
    layer.forward(tape, binder, h, mask, batch, seq)
}

/// Accumulated expert selection counts for one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterHistogram {
    pub counts: Vec<u64>,
}

impl RouterHistogram {
    pub fn add(&mut self, stats: &AuxLossStats) {
        if self.counts.len() < stats.n {
            self.counts.resize(stats.n, 0);
        }
        for (k, &c) in stats.selection_counts.iter().enumerate() {
            self.counts[k % stats.n] += c as u64;
        }
    }

    pub fn fractions(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        self.counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

/// CSV with columns `layer,expert,fraction`.
pub fn router_csv(hists: &[(usize, RouterHistogram)]) -> String {
    let mut s = String::from("layer,expert,fraction\n");
    for (layer, h) in hists {
        for (j, f) in h.fractions().iter().enumerate() {
            s.push_str(&format!("{layer},{j},{f:.6}\n"));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_prefers_lower_ids() {
        assert_eq!(top_indices(&[0.25; 4], 2), vec![0, 1]);
        assert_eq!(top_indices(&[0.1, 0.9], 1), vec![1]);
        assert_eq!(top_indices(&[0.9, 0.1], 1), vec![0]);
    }

    #[test]
    fn upcycle_counts() {
        let mut rng = SeededRng::new(1);
        let ffn = Arc::new(FfnWeights::new(8, 16, &mut rng));
        let layer = upcycle(Arc::clone(&ffn), 2, 2, 4, GalConstants::default(), &mut rng).unwrap();
        assert_eq!(layer.experts().count(), 3);
        assert_eq!(Arc::strong_count(&ffn), 4);
        assert!(upcycle(Arc::clone(&ffn), 2, 3, 4, GalConstants::default(), &mut rng).is_err());
        assert!(upcycle(ffn, 2, 0, 4, GalConstants::default(), &mut rng).is_err());
    }
}
