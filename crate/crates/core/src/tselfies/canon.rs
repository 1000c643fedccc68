//! Canonical serialisation.
//!
//! Atoms are coloured by iterative refinement of (element, degree) with the
//! multiset of (bond order, neighbour colour); colours are ranked by the
//! lexicographic order of their refined signatures. Serialisations are
//! depth-first traversals rooted at a minimal-colour atom that visit
//! neighbours in colour order. Where colours tie, every resolution of the tie
//! is tried and the lexicographically smallest string is kept, which makes
//! the result independent of the input atom numbering.

use super::{render, Element, MoleculeGraph, Token};

/// Upper bound on traversals examined per root set.
const SEARCH_LIMIT: usize = 200_000;

/// Colour classes after refinement; smaller rank = smaller signature.
pub(crate) fn refine_colors(g: &MoleculeGraph) -> Vec<usize> {
    let n = g.atoms.len();
    let adj = g.adjacency();
    let initial: Vec<Vec<usize>> = (0..n)
        .map(|a| vec![g.atoms[a].element.index(), adj[a].len()])
        .collect();
    let mut ranks = rank(&initial);
    let mut classes = count_classes(&ranks);
    for _ in 0..n {
        let sigs: Vec<Vec<usize>> = (0..n)
            .map(|u| {
                let mut nb: Vec<(usize, usize)> = adj[u].iter().map(|&(w, o)| (o as usize, ranks[w])).collect();
                nb.sort_unstable();
                let mut s = vec![ranks[u]];
                for (o, r) in nb {
                    s.push(o);
                    s.push(r);
                }
                s
            })
            .collect();
        let next = rank(&sigs);
        let c = count_classes(&next);
        ranks = next;
        if c == classes {
            break;
        }
        classes = c;
    }
    ranks
}

fn rank(sigs: &[Vec<usize>]) -> Vec<usize> {
    let mut distinct: Vec<&Vec<usize>> = sigs.iter().collect();
    distinct.sort();
    distinct.dedup();
    sigs.iter()
        .map(|s| distinct.binary_search(&s).expect("present"))
        .collect()
}

fn count_classes(r: &[usize]) -> usize {
    let mut v = r.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

struct Walk<'a> {
    g: &'a MoleculeGraph,
    adj: &'a [Vec<(usize, u8)>],
    order: &'a [Vec<(usize, u8)>],
    pos: Vec<Option<usize>>,
    next: usize,
    strict: bool,
}

impl Walk<'_> {
    fn visit(&mut self, u: usize, parent: Option<(usize, u8)>) -> Option<Vec<Token>> {
        let element = self.g.atoms[u].element;
        let incoming = parent.map(|p| p.1).unwrap_or(1);
        let atom = match Token::atom(element, incoming) {
            Some(t) => t,
            None if !self.strict => Token::Atom { element, order: 1 },
            None => return None,
        };
        let mut out = vec![atom];
        self.pos[u] = Some(self.next);
        self.next += 1;
        let here = self.pos[u].unwrap();

        let mut closures: Vec<(usize, u8)> = self.adj[u]
            .iter()
            .filter(|&&(w, _)| self.pos[w].is_some() && Some(w) != parent.map(|p| p.0))
            .map(|&(w, o)| (self.pos[w].unwrap(), o))
            .collect();
        closures.sort_unstable();
        for (pw, o) in closures {
            let dist = here - pw - 1;
            if self.strict && (o != 1 || dist > 9) {
                return None;
            }
            out.push(Token::Ring);
            out.push(Token::Index(dist.min(9) as u8));
        }

        let mut subtrees = Vec::new();
        for &(w, o) in &self.order[u] {
            if self.pos[w].is_none() {
                subtrees.push(self.visit(w, Some((u, o)))?);
            }
        }
        let last = subtrees.pop();
        for sub in subtrees {
            if self.strict && sub.len() > 9 {
                return None;
            }
            out.push(Token::Branch);
            out.push(Token::Index(sub.len().min(9) as u8));
            out.extend(sub);
        }
        if let Some(sub) = last {
            out.extend(sub);
        }
        Some(out)
    }
}

/// All orderings of `items` that keep `key` non-decreasing.
fn tie_orderings<K: Ord + Copy>(items: &[(usize, u8)], key: impl Fn(&(usize, u8)) -> K) -> Vec<Vec<(usize, u8)>> {
    let mut sorted = items.to_vec();
    sorted.sort_by_key(|x| key(x));
    let mut groups: Vec<Vec<(usize, u8)>> = Vec::new();
    for it in sorted {
        match groups.last_mut() {
            Some(gp) if key(&gp[0]) == key(&it) => gp.push(it),
            _ => groups.push(vec![it]),
        }
    }
    let mut acc: Vec<Vec<(usize, u8)>> = vec![Vec::new()];
    for gp in groups {
        let perms = permutations(&gp);
        let mut next = Vec::with_capacity(acc.len() * perms.len());
        for a in &acc {
            for p in &perms {
                let mut v = a.clone();
                v.extend_from_slice(p);
                next.push(v);
            }
        }
        acc = next;
    }
    acc
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

/// Smallest serialisation over every root in `roots` and every combination of
/// per-atom neighbour orderings in `alts`.
fn search(
    g: &MoleculeGraph,
    adj: &[Vec<(usize, u8)>],
    roots: &[usize],
    alts: &[Vec<Vec<(usize, u8)>>],
    strict: bool,
) -> Option<String> {
    let mut best: Option<String> = None;
    let mut choice = vec![0usize; alts.len()];
    let mut examined = 0usize;
    'outer: loop {
        let order: Vec<Vec<(usize, u8)>> = alts.iter().zip(&choice).map(|(a, &c)| a[c].clone()).collect();
        for &r in roots {
            let mut walk = Walk {
                g,
                adj,
                order: &order,
                pos: vec![None; g.atoms.len()],
                next: 0,
                strict,
            };
            let mut tokens = Vec::new();
            let mut ok = true;
            // Root component first, then any remaining components.
            let mut starts = vec![r];
            starts.extend(0..g.atoms.len());
            for s in starts {
                if walk.pos[s].is_none() {
                    match walk.visit(s, None) {
                        Some(t) => tokens.extend(t),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
            }
            if ok {
                let s = render(&tokens);
                if best.as_ref().is_none_or(|b| s < *b) {
                    best = Some(s);
                }
            }
        }
        examined += 1;
        if examined >= SEARCH_LIMIT {
            break;
        }
        // Mixed-radix increment over the per-atom alternatives.
        for i in 0..choice.len() {
            choice[i] += 1;
            if choice[i] < alts[i].len() {
                continue 'outer;
            }
            choice[i] = 0;
        }
        break;
    }
    best
}

/// Deterministic canonical token string. Isomorphic graphs give identical
/// strings, and the string decodes back to an isomorphic graph whenever the
/// grammar's index range can express it (always the case for the small
/// molecules this crate generates).
pub fn canonicalize(g: &MoleculeGraph) -> String {
    if g.atoms.is_empty() {
        return String::new();
    }
    let colors = refine_colors(g);
    let adj = g.adjacency();

    // A nitrogen carrying a triple bond can only be written as a root: the
    // alphabet has no triple-bonded nitrogen token.
    let triple_n: Vec<usize> = (0..g.atoms.len())
        .filter(|&a| g.atoms[a].element == Element::N && adj[a].iter().any(|&(_, o)| o == 3))
        .collect();
    let min_color = *colors.iter().min().expect("non-empty");
    let roots: Vec<usize> = if triple_n.is_empty() {
        (0..g.atoms.len()).filter(|&a| colors[a] == min_color).collect()
    } else {
        let m = triple_n.iter().map(|&a| colors[a]).min().unwrap();
        triple_n.into_iter().filter(|&a| colors[a] == m).collect()
    };

    let colour_alts: Vec<Vec<Vec<(usize, u8)>>> = adj
        .iter()
        .map(|nb| tie_orderings(nb, |&(w, o)| (colors[w], o)))
        .collect();
    if let Some(s) = search(g, &adj, &roots, &colour_alts, true) {
        return s;
    }
    let all_roots: Vec<usize> = (0..g.atoms.len()).collect();
    let free_alts: Vec<Vec<Vec<(usize, u8)>>> = adj.iter().map(|nb| tie_orderings(nb, |_| 0u8)).collect();
    if let Some(s) = search(g, &adj, &all_roots, &free_alts, true) {
        return s;
    }
    search(g, &adj, &roots, &colour_alts, false).expect("non-strict search always succeeds")
}
