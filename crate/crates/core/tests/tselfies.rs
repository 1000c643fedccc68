//! Grammar decoding, canonical forms, fingerprints and descriptors.

use std::collections::BTreeSet;

use omnimol_core::rng::SeededRng;
use omnimol_core::tselfies::{
    alphabet, canonicalize, decode_str, descriptor, morgan_fingerprint, tanimoto, Atom, Bond, Element, Fingerprint,
    MoleculeGraph,
};
use proptest::prelude::*;

fn random_string(rng: &mut SeededRng, max_len: usize) -> String {
    let alpha = alphabet();
    let n = rng.below(max_len + 1);
    (0..n).map(|_| alpha[rng.below(alpha.len())]).collect()
}

/// Exhaustive search for an element- and bond-order-preserving bijection.
fn isomorphic(a: &MoleculeGraph, b: &MoleculeGraph) -> bool {
    if a.atoms.len() != b.atoms.len() || a.bonds.len() != b.bonds.len() {
        return false;
    }
    let n = a.atoms.len();
    let order = |g: &MoleculeGraph, i: usize, j: usize| g.bond_between(i, j).map_or(0, |x| x.order);
    fn extend(
        a: &MoleculeGraph,
        b: &MoleculeGraph,
        map: &mut Vec<usize>,
        used: &mut Vec<bool>,
        order: &dyn Fn(&MoleculeGraph, usize, usize) -> u8,
    ) -> bool {
        let i = map.len();
        if i == a.atoms.len() {
            return true;
        }
        for j in 0..b.atoms.len() {
            if used[j] || a.atoms[i].element != b.atoms[j].element {
                continue;
            }
            if (0..i).any(|k| order(a, i, k) != order(b, j, map[k])) {
                continue;
            }
            map.push(j);
            used[j] = true;
            if extend(a, b, map, used, order) {
                return true;
            }
            map.pop();
            used[j] = false;
        }
        false
    }
    extend(a, b, &mut Vec::with_capacity(n), &mut vec![false; n], &order)
}

fn permuted(g: &MoleculeGraph, rng: &mut SeededRng) -> MoleculeGraph {
    let mut perm: Vec<usize> = (0..g.atoms.len()).collect();
    rng.shuffle(&mut perm);
    let mut atoms = vec![Atom { element: Element::C, used_valence: 0 }; g.atoms.len()];
    for (old, &new) in perm.iter().enumerate() {
        atoms[new] = g.atoms[old].clone();
    }
    let mut bonds: Vec<Bond> = g
        .bonds
        .iter()
        .map(|b| if rng.below(2) == 0 { Bond { i: perm[b.i], j: perm[b.j], order: b.order } } else { Bond { i: perm[b.j], j: perm[b.i], order: b.order } })
        .collect();
    rng.shuffle(&mut bonds);
    MoleculeGraph { atoms, bonds, canonical_form: None }
}

/// Atom environments up to `radius` as nested strings, one set per molecule.
fn environments(g: &MoleculeGraph, radius: usize) -> BTreeSet<String> {
    let adj = g.adjacency();
    let mut cur: Vec<String> = (0..g.atoms.len()).map(|a| format!("{:?}/{}", g.atoms[a].element, adj[a].len())).collect();
    let mut out: BTreeSet<String> = cur.iter().map(|s| format!("r0:{s}")).collect();
    for r in 1..=radius {
        cur = (0..g.atoms.len())
            .map(|a| {
                let mut env: Vec<String> = adj[a].iter().map(|&(w, o)| format!("{o}-{}", cur[w])).collect();
                env.sort();
                format!("({}|{})", cur[a], env.join(","))
            })
            .collect();
        out.extend(cur.iter().map(|s| format!("r{r}:{s}")));
    }
    out
}

#[test]
fn chain_of_three_single_bonds() {
    let g = decode_str("[C][C][O]").unwrap();
    let els: Vec<Element> = g.atoms.iter().map(|a| a.element).collect();
    assert_eq!(els, vec![Element::C, Element::C, Element::O]);
    assert_eq!(g.bonds.len(), 2);
    assert!(g.bonds.iter().all(|b| b.order == 1));
    assert!(g.bond_between(0, 1).is_some() && g.bond_between(1, 2).is_some());
}

#[test]
fn dangling_branch_is_ignored() {
    let g = decode_str("[C][Branch1]").unwrap();
    assert_eq!(g.atoms.len(), 1);
    assert!(g.bonds.is_empty());
}

#[test]
fn unknown_symbol_fails_at_tokenization() {
    assert!(decode_str("[C][Xx]").is_err());
}

#[test]
fn two_orderings_of_a_pair_share_a_canonical_form() {
    let a = decode_str("[C][O]").unwrap();
    let b = decode_str("[O][C]").unwrap();
    assert!(isomorphic(&a, &b));
    assert_eq!(canonicalize(&a), canonicalize(&b));
}

#[test]
fn single_atoms_canonicalize_to_their_symbol() {
    for s in ["[C]", "[N]", "[O]", "[F]"] {
        assert_eq!(canonicalize(&decode_str(s).unwrap()), s);
    }
}

#[test]
fn fingerprint_small_cases() {
    let cc = decode_str("[C][C]").unwrap();
    assert_eq!(morgan_fingerprint(&cc, 0).bits.len(), 1);
    let a = morgan_fingerprint(&cc, 2);
    assert_eq!(a, morgan_fingerprint(&decode_str("[C][C]").unwrap(), 2));
    assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
}

#[test]
fn radius_one_overlap_matches_hand_enumeration() {
    let cco = decode_str("[C][C][O]").unwrap();
    let ccn = decode_str("[C][C][N]").unwrap();
    let (ea, eb) = (environments(&cco, 1), environments(&ccn, 1));
    let shared = ea.intersection(&eb).count();
    let union = ea.union(&eb).count();
    assert_eq!((shared, union), (3, 9));
    assert!(ea.contains("r1:(C/1|1-C/2)"));
    let (fa, fb) = (morgan_fingerprint(&cco, 1), morgan_fingerprint(&ccn, 1));
    assert_eq!(fa.bits.intersection(&fb.bits).count(), shared);
    assert_eq!(fa.bits.union(&fb.bits).count(), union);
    assert!((tanimoto(&fa, &fb).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn tanimoto_by_formula() {
    let fp = |bits: &[u64]| Fingerprint { radius: 2, bits: bits.iter().copied().collect() };
    assert_eq!(tanimoto(&fp(&[1, 2]), &fp(&[3, 4])).unwrap(), 0.0);
    assert!((tanimoto(&fp(&[1, 2, 3, 4]), &fp(&[1, 2, 5])).unwrap() - 0.4).abs() < 1e-15);
}

#[test]
fn descriptor_cases() {
    let d = descriptor(&decode_str("[C][C][O]").unwrap());
    assert_eq!((d.atom_count, d.ring_count, d.weight_text()), (3, 0, "40.02".to_string()));
    assert!((d.weight - (12.011 + 12.011 + 15.999)).abs() < 1e-12);
    let e = descriptor(&MoleculeGraph::default());
    assert_eq!((e.atom_count, e.ring_count, e.weight_text()), (0, 0, "0.00".to_string()));
    let ring = decode_str("[C][C][C][C][C][C][Ring1][I4]").unwrap();
    assert_eq!(ring.atoms.len(), 6);
    assert_eq!(ring.bonds.len(), 6);
    assert_eq!(descriptor(&ring).ring_count, 1);
}

#[test]
fn ten_thousand_random_strings_decode_validly() {
    let mut rng = SeededRng::new(2024);
    for _ in 0..10_000 {
        let s = random_string(&mut rng, 30);
        let g = decode_str(&s).unwrap();
        g.validate().unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decoded_graphs_respect_valence(seed in any::<u64>()) {
        let s = random_string(&mut SeededRng::new(seed), 30);
        let g = decode_str(&s).unwrap();
        prop_assert!(g.validate().is_ok());
        for a in 0..g.atoms.len() {
            let used: u8 = g.bonds.iter().filter(|b| b.i == a || b.j == a).map(|b| b.order).sum();
            prop_assert!(used <= g.atoms[a].element.max_valence());
        }
    }

    #[test]
    fn canonical_form_is_a_fixpoint_and_an_isomorph(seed in any::<u64>()) {
        let g = decode_str(&random_string(&mut SeededRng::new(seed), 16)).unwrap();
        prop_assume!(g.atoms.len() <= 8);
        let c = canonicalize(&g);
        let back = decode_str(&c).unwrap();
        prop_assert!(isomorphic(&g, &back));
        prop_assert_eq!(canonicalize(&back), c);
    }

    #[test]
    fn canonical_form_ignores_atom_numbering(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let g = decode_str(&random_string(&mut rng, 16)).unwrap();
        prop_assume!(g.atoms.len() <= 8);
        let p = permuted(&g, &mut rng);
        prop_assert_eq!(canonicalize(&g), canonicalize(&p));
    }

    #[test]
    fn equal_canonical_forms_iff_isomorphic(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a = decode_str(&random_string(&mut rng, 6)).unwrap();
        let b = decode_str(&random_string(&mut rng, 6)).unwrap();
        prop_assert_eq!(canonicalize(&a) == canonicalize(&b), isomorphic(&a, &b));
    }

    #[test]
    fn fingerprint_bits_are_distinct_environments(seed in any::<u64>()) {
        let g = decode_str(&random_string(&mut SeededRng::new(seed), 20)).unwrap();
        for r in 0..=2 {
            prop_assert_eq!(morgan_fingerprint(&g, r).bits.len(), environments(&g, r).len());
        }
    }

    #[test]
    fn tanimoto_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = morgan_fingerprint(&decode_str(&random_string(&mut SeededRng::new(s1), 20)).unwrap(), 2);
        let b = morgan_fingerprint(&decode_str(&random_string(&mut SeededRng::new(s2), 20)).unwrap(), 2);
        let t = tanimoto(&a, &b).unwrap();
        prop_assert_eq!(t, tanimoto(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&t));
    }
}
