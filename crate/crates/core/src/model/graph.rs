//! Deterministic toy graph encoder and the trainable projector.

use std::f64::consts::TAU;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::taskforge::GraphFeaturizer;
use crate::tensor::{Binder, Tape, Tensor, Var};
use crate::tselfies::{descriptor, Element, MoleculeGraph};

/// Length of the histogram summarising a graph.
pub const HIST_LEN: usize = 11;
const ENCODER_LABEL: &str = "graph-encoder";
/// Per-entry divisor keeping the histogram roughly unit-scale.
const HIST_SCALE: f64 = 4.0;

/// Element counts, degree histogram (0..=4), ring count, atom count.
pub fn graph_histogram(g: &MoleculeGraph) -> [f64; HIST_LEN] {
    let mut h = [0.0; HIST_LEN];
    for a in &g.atoms {
        h[a.element.index()] += 1.0;
    }
    for a in 0..g.atoms.len() {
        h[Element::ALL.len() + g.degree(a).min(4)] += 1.0;
    }
    let d = descriptor(g);
    h[HIST_LEN - 2] = d.ring_count as f64;
    h[HIST_LEN - 1] = d.atom_count as f64;
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeatures {
    /// `rows × dim`.
    pub values: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    /// Hex SHA-256 of the canonical form of the source graph.
    pub source: String,
}

/// Row `i` is `sin(R·hist + φ_i)` with `R` and `φ` drawn once from a fixed seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGraphEncoder {
    rows: usize,
    dim: usize,
    /// `dim × HIST_LEN`.
    proj: Vec<f64>,
    /// `rows × dim`.
    phase: Vec<f64>,
}

impl ToyGraphEncoder {
    pub fn new(rows: usize, dim: usize) -> Self {
        let mut rng = SeededRng::new(0).split(ENCODER_LABEL);
        let proj = (0..dim * HIST_LEN).map(|_| rng.uniform(1.0)).collect();
        let phase = (0..rows * dim).map(|_| rng.next_f64() * TAU).collect();
        Self { rows, dim, proj, phase }
    }

    pub fn encode_graph(&self, g: &MoleculeGraph) -> GraphFeatures {
        let h = graph_histogram(g);
        let mut values = vec![0.0; self.rows * self.dim];
        for k in 0..self.dim {
            let z: f64 = (0..HIST_LEN).map(|j| self.proj[k * HIST_LEN + j] * h[j] / HIST_SCALE).sum();
            for i in 0..self.rows {
                values[i * self.dim + k] = (z + self.phase[i * self.dim + k]).sin();
            }
        }
        let source = hex::encode(Sha256::digest(crate::tselfies::canonicalize(g).as_bytes()));
        GraphFeatures { values, rows: self.rows, dim: self.dim, source }
    }
}

impl GraphFeaturizer for ToyGraphEncoder {
    fn rows(&self) -> usize {
        self.rows
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, g: &MoleculeGraph) -> Vec<f64> {
        self.encode_graph(g).values
    }
}

/// Affine map from graph features to the model width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    /// `[d_model × d_in]`.
    pub w: Tensor,
    /// `[d_model]`.
    pub b: Tensor,
}

impl Projector {
    pub fn new(d_in: usize, d_model: usize, rng: &mut SeededRng) -> Self {
        Self {
            w: Tensor::uniform(&[d_model, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_model]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[1]
    }

    /// `h[rows × d_in] → [rows × d_model]`.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, h: Var) -> Result<Var> {
        if tape.shape(h).last() != Some(&self.d_in()) {
            return Err(Error::dim(format!("projector expects width {}, got {:?}", self.d_in(), tape.shape(h))));
        }
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        let y = tape.matmul_nt(h, w)?;
        tape.add_bias(y, b)
    }
}

/// Projects a single feature block outside any tape.
pub fn project(p: &Projector, h: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let rows = h.len() / p.d_in();
    let x = tape.constant(vec![rows, p.d_in()], h.to_vec())?;
    let y = p.forward(&mut tape, &mut binder, x)?;
    Ok(tape.value(y).to_vec())
}
