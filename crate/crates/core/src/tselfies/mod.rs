//! A miniature SELFIES-style molecular string grammar.
//!
//! Strings are concatenations of bracket tokens with no separators. Every
//! token sequence over the alphabet decodes to a valence-respecting
//! [`MoleculeGraph`]; only unknown symbols are rejected, at tokenisation.

mod canon;
mod fingerprint;

pub use canon::canonicalize;
pub use fingerprint::{morgan_fingerprint, tanimoto, Fingerprint};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    C,
    N,
    O,
    F,
}

impl Element {
    pub const ALL: [Element; 4] = [Element::C, Element::N, Element::O, Element::F];

    pub fn max_valence(self) -> u8 {
        match self {
            Element::C => 4,
            Element::N => 3,
            Element::O => 2,
            Element::F => 1,
        }
    }

    pub fn mass(self) -> f64 {
        match self {
            Element::C => 12.011,
            Element::N => 14.007,
            Element::O => 15.999,
            Element::F => 18.998,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// One grammar token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    /// An atom with the order of the bond to its parent.
    Atom { element: Element, order: u8 },
    Branch,
    Ring,
    Index(u8),
}

/// Atom symbols with their incoming bond order.
pub const ATOM_TOKENS: [(&str, Element, u8); 8] = [
    ("[C]", Element::C, 1),
    ("[N]", Element::N, 1),
    ("[O]", Element::O, 1),
    ("[F]", Element::F, 1),
    ("[=C]", Element::C, 2),
    ("[=N]", Element::N, 2),
    ("[=O]", Element::O, 2),
    ("[#C]", Element::C, 3),
];

pub const BRANCH_SYMBOL: &str = "[Branch1]";
pub const RING_SYMBOL: &str = "[Ring1]";
pub const INDEX_SYMBOLS: [&str; 10] = ["[I0]", "[I1]", "[I2]", "[I3]", "[I4]", "[I5]", "[I6]", "[I7]", "[I8]", "[I9]"];

/// Every symbol of the alphabet, in a fixed order.
pub fn alphabet() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = ATOM_TOKENS.iter().map(|t| t.0).collect();
    v.push(BRANCH_SYMBOL);
    v.push(RING_SYMBOL);
    v.extend(INDEX_SYMBOLS);
    v
}

impl Token {
    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Atom { .. } => TokenKind::Atom,
            Token::Branch => TokenKind::Branch,
            Token::Ring => TokenKind::Ring,
            Token::Index(_) => TokenKind::Index,
        }
    }

    pub fn symbol(&self) -> &'static str {
        match *self {
            Token::Atom { element, order } => ATOM_TOKENS
                .iter()
                .find(|t| t.1 == element && t.2 == order)
                .map(|t| t.0)
                .expect("atom tokens only hold table entries"),
            Token::Branch => BRANCH_SYMBOL,
            Token::Ring => RING_SYMBOL,
            Token::Index(i) => INDEX_SYMBOLS[i as usize],
        }
    }

    pub fn from_symbol(s: &str) -> Option<Token> {
        if let Some(t) = ATOM_TOKENS.iter().find(|t| t.0 == s) {
            return Some(Token::Atom { element: t.1, order: t.2 });
        }
        match s {
            BRANCH_SYMBOL => Some(Token::Branch),
            RING_SYMBOL => Some(Token::Ring),
            _ => INDEX_SYMBOLS.iter().position(|x| *x == s).map(|i| Token::Index(i as u8)),
        }
    }

    /// Atom token for an element receiving a bond of `order`, if the table has one.
    pub fn atom(element: Element, order: u8) -> Option<Token> {
        ATOM_TOKENS
            .iter()
            .find(|t| t.1 == element && t.2 == order)
            .map(|_| Token::Atom { element, order })
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Atom,
    Branch,
    Ring,
    Index,
}

/// Splits a string into bracket groups without validating them. Stray
/// characters outside brackets become one-character groups.
pub fn split_brackets(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    let bytes = s.as_bytes();
    while i < s.len() {
        if bytes[i] == b'[' {
            if let Some(close) = s[i..].find(']') {
                out.push(&s[i..i + close + 1]);
                i += close + 1;
                continue;
            }
        }
        let ch = s[i..].chars().next().expect("in bounds");
        out.push(&s[i..i + ch.len_utf8()]);
        i += ch.len_utf8();
    }
    out
}

/// Lexes a concatenated token string. Unknown symbols are a lexical error.
pub fn tokenize(s: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for piece in split_brackets(s) {
        match Token::from_symbol(piece) {
            Some(t) => out.push(t),
            None => {
                return Err(Error::Lexical {
                    offset,
                    msg: format!("unknown symbol {piece:?}"),
                })
            }
        }
        offset += piece.len();
    }
    Ok(out)
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.symbol()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub used_valence: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MoleculeGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub canonical_form: Option<String>,
}

impl MoleculeGraph {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn free_valence(&self, a: usize) -> u8 {
        let at = &self.atoms[a];
        at.element.max_valence() - at.used_valence
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.bonds
            .iter()
            .find(|x| (x.i == a && x.j == b) || (x.i == b && x.j == a))
    }

    /// `(neighbour, order)` lists per atom.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.i].push((b.j, b.order));
            adj[b.j].push((b.i, b.order));
        }
        adj
    }

    pub fn degree(&self, a: usize) -> usize {
        self.bonds.iter().filter(|b| b.i == a || b.j == a).count()
    }

    pub fn connected_components(&self) -> usize {
        let n = self.atoms.len();
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut comps = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            comps += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for &(w, _) in &adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        comps
    }

    fn add_atom(&mut self, element: Element) -> usize {
        self.atoms.push(Atom { element, used_valence: 0 });
        self.atoms.len() - 1
    }

    fn add_bond(&mut self, i: usize, j: usize, order: u8) {
        self.atoms[i].used_valence += order;
        self.atoms[j].used_valence += order;
        self.bonds.push(Bond { i, j, order });
    }

    /// Checks the structural invariants (valence, bond references, no
    /// self-loops, no duplicate pairs).
    pub fn validate(&self) -> Result<()> {
        let mut used = vec![0u32; self.atoms.len()];
        for (k, b) in self.bonds.iter().enumerate() {
            if b.i >= self.atoms.len() || b.j >= self.atoms.len() || b.i == b.j || b.order == 0 {
                return Err(Error::Data(format!("bad bond {b:?}")));
            }
            if self.bonds[..k]
                .iter()
                .any(|x| (x.i.min(x.j), x.i.max(x.j)) == (b.i.min(b.j), b.i.max(b.j)))
            {
                return Err(Error::Data(format!("duplicate bond {b:?}")));
            }
            used[b.i] += b.order as u32;
            used[b.j] += b.order as u32;
        }
        for (a, at) in self.atoms.iter().enumerate() {
            if used[a] != at.used_valence as u32 || at.used_valence > at.element.max_valence() {
                return Err(Error::Data(format!("valence violation on atom {a}")));
            }
        }
        Ok(())
    }
}

/// Derivation state shared by the recursive decoder.
struct Deriver<'a> {
    tokens: &'a [Token],
    graph: MoleculeGraph,
}

impl Deriver<'_> {
    /// Derives `tokens[start..end]` starting from attachment atom `current`.
    fn derive(&mut self, start: usize, end: usize, mut current: Option<usize>) {
        let mut i = start;
        while i < end {
            match self.tokens[i] {
                Token::Atom { element, order } => {
                    match current {
                        None => current = Some(self.graph.add_atom(element)),
                        Some(c) => {
                            let free = self.graph.free_valence(c);
                            if free > 0 {
                                let bond = order.min(free).min(element.max_valence());
                                let a = self.graph.add_atom(element);
                                self.graph.add_bond(c, a, bond);
                                current = Some(a);
                            }
                        }
                    }
                    i += 1;
                }
                Token::Branch => {
                    // Needs an index token and that many following tokens.
                    let n = match self.tokens.get(i + 1) {
                        Some(Token::Index(n)) if i + 1 < end => *n as usize,
                        _ => {
                            i += 1;
                            continue;
                        }
                    };
                    let body = i + 2;
                    if body + n > end {
                        i += 2;
                        continue;
                    }
                    if current.is_some() {
                        self.derive(body, body + n, current);
                    }
                    i = body + n;
                }
                Token::Ring => {
                    let n = match self.tokens.get(i + 1) {
                        Some(Token::Index(n)) if i + 1 < end => *n as usize,
                        _ => {
                            i += 1;
                            continue;
                        }
                    };
                    if let Some(c) = current {
                        if c >= n + 1 {
                            let target = c - (n + 1);
                            if self.graph.free_valence(c) > 0
                                && self.graph.free_valence(target) > 0
                                && self.graph.bond_between(c, target).is_none()
                            {
                                self.graph.add_bond(c, target, 1);
                            }
                        }
                    }
                    i += 2;
                }
                Token::Index(_) => i += 1,
            }
        }
    }
}

/// Robust decoding: total over every token sequence.
///
/// Rules: an atom bonds to the current atom with its bond order capped by the
/// current atom's free valence and becomes current; it is skipped when the
/// current atom is saturated. `[Branch1][In]` derives the next `n` tokens from
/// the current atom and then restores it. `[Ring1][In]` bonds the current atom
/// to the atom `n + 1` places earlier in derivation order when both have free
/// valence and are not already bonded. Branch, ring and index tokens without
/// the tokens they need are ignored.
pub fn decode(tokens: &[Token]) -> MoleculeGraph {
    let mut d = Deriver {
        tokens,
        graph: MoleculeGraph::default(),
    };
    d.derive(0, tokens.len(), None);
    d.graph
}

/// Tokenises then decodes.
pub fn decode_str(s: &str) -> Result<MoleculeGraph> {
    Ok(decode(&tokenize(s)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Descriptor {
    pub atom_count: usize,
    pub ring_count: usize,
    pub weight: f64,
}

impl Descriptor {
    /// Weight rendered with two decimals.
    pub fn weight_text(&self) -> String {
        format!("{:.2}", self.weight)
    }
}

/// Atom count, cyclomatic ring count and summed element masses.
pub fn descriptor(g: &MoleculeGraph) -> Descriptor {
    let atoms = g.atoms.len();
    let ring_count = if atoms == 0 {
        0
    } else {
        g.bonds.len() + g.connected_components() - atoms
    };
    Descriptor {
        atom_count: atoms,
        ring_count,
        weight: g.atoms.iter().fold(0.0, |acc, a| acc + a.element.mass()),
    }
}
