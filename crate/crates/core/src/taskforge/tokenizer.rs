//! Closed-vocabulary greedy longest-match tokenizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tselfies;

use super::chat::{ASSISTANT, EOT, GRAPH, HEADER_END, HEADER_START, PAD, BEGIN, SYSTEM_TEXT, USER, SYSTEM};
use super::corpus::template_segments;

/// Vocabulary mapping token text ↔ id. Id 0 is the pad token.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pieces: Vec<String>,
    ids: HashMap<String, usize>,
    /// Candidate piece ids per leading char, longest first.
    by_first: HashMap<char, Vec<usize>>,
}

impl Tokenizer {
    fn from_pieces(pieces: Vec<String>) -> Self {
        let mut ids = HashMap::new();
        let mut uniq = Vec::new();
        for p in pieces {
            if !ids.contains_key(&p) {
                ids.insert(p.clone(), uniq.len());
                uniq.push(p);
            }
        }
        let mut by_first: HashMap<char, Vec<usize>> = HashMap::new();
        for (i, p) in uniq.iter().enumerate() {
            let c = p.chars().next().expect("non-empty piece");
            by_first.entry(c).or_default().push(i);
        }
        for v in by_first.values_mut() {
            v.sort_by(|&a, &b| uniq[b].len().cmp(&uniq[a].len()).then(a.cmp(&b)));
        }
        Self { pieces: uniq, ids, by_first }
    }

    /// The vocabulary used throughout: chat specials, grammar symbols,
    /// template segments, and printable ASCII as a fallback.
    pub fn standard() -> Self {
        let mut pieces: Vec<String> = [PAD, BEGIN, HEADER_START, HEADER_END, EOT, GRAPH]
            .iter()
            .map(|s| s.to_string())
            .collect();
        pieces.extend([SYSTEM, USER, ASSISTANT, "\n\n", "\n", SYSTEM_TEXT].iter().map(|s| s.to_string()));
        pieces.extend(tselfies::alphabet().into_iter().map(String::from));
        pieces.extend(template_segments());
        pieces.extend((0x20u8..0x7f).map(|b| (b as char).to_string()));
        Self::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.ids.get(piece).copied()
    }

    pub fn eot_id(&self) -> usize {
        self.ids[EOT]
    }

    pub fn graph_id(&self) -> usize {
        self.ids[GRAPH]
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            let c = rest.chars().next().expect("in bounds");
            let hit = self
                .by_first
                .get(&c)
                .and_then(|cands| cands.iter().find(|&&id| rest.starts_with(self.pieces[id].as_str())));
            match hit {
                Some(&id) => {
                    out.push(id);
                    i += self.pieces[id].len();
                }
                None => {
                    return Err(Error::Lexical {
                        offset: i,
                        msg: format!("character {c:?} not in vocabulary"),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.piece(i)
                    .ok_or_else(|| Error::input(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }
}
