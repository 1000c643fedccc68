//! Morgan-style circular fingerprints with set semantics.

use std::collections::BTreeSet;

use super::MoleculeGraph;
use crate::error::{Error, Result};
use crate::rng::fnv1a;

pub const MAX_RADIUS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fingerprint {
    pub radius: usize,
    pub bits: BTreeSet<u64>,
}

fn hash_words(words: &[u64]) -> u64 {
    let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    fnv1a(&bytes)
}

/// Initial atom identifier: element and heavy-atom degree.
pub(crate) fn atom_seed(element_index: usize, degree: usize) -> u64 {
    hash_words(&[0x6d6f_7267_616e, element_index as u64, degree as u64])
}

/// ECFP-style iteration. Round 0 hashes (element, degree); each later round
/// hashes the atom's previous identifier with the sorted multiset of
/// (bond order, neighbour identifier). Every identifier of every round is
/// emitted. `radius` is clamped to [`MAX_RADIUS`].
pub fn morgan_fingerprint(g: &MoleculeGraph, radius: usize) -> Fingerprint {
    let radius = radius.min(MAX_RADIUS);
    let adj = g.adjacency();
    let mut ids: Vec<u64> = (0..g.atoms.len())
        .map(|a| atom_seed(g.atoms[a].element.index(), adj[a].len()))
        .collect();
    let mut bits: BTreeSet<u64> = ids.iter().copied().collect();
    for _ in 0..radius {
        ids = (0..g.atoms.len())
            .map(|a| {
                let mut env: Vec<(u64, u64)> = adj[a].iter().map(|&(w, o)| (o as u64, ids[w])).collect();
                env.sort_unstable();
                let mut words = vec![ids[a]];
                for (o, h) in env {
                    words.push(o);
                    words.push(h);
                }
                hash_words(&words)
            })
            .collect();
        bits.extend(ids.iter().copied());
    }
    Fingerprint { radius, bits }
}

/// `|a ∩ b| / |a ∪ b|`, defined as 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.radius != b.radius {
        return Err(Error::usage(format!("fingerprint radius {} vs {}", a.radius, b.radius)));
    }
    let inter = a.bits.intersection(&b.bits).count();
    let union = a.bits.len() + b.bits.len() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
