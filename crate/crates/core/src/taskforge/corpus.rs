//! Synthetic instruction corpus with rule-computed ground truth.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tselfies::{self, canonicalize, decode_str, descriptor, MoleculeGraph, Token};

use super::chat::SELFIES_LEAD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskCategory {
    Mol2Mol,
    Mol2Text,
    Mol2Num,
    Text2Mol,
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtask {
    Edit,
    Grow,
    Weight,
    Atoms,
    Caption,
    Design,
}

impl Subtask {
    pub const ALL: [Subtask; 6] = [
        Subtask::Edit,
        Subtask::Grow,
        Subtask::Weight,
        Subtask::Atoms,
        Subtask::Caption,
        Subtask::Design,
    ];

    pub fn category(self) -> TaskCategory {
        match self {
            Subtask::Edit | Subtask::Grow => TaskCategory::Mol2Mol,
            Subtask::Weight | Subtask::Atoms => TaskCategory::Mol2Num,
            Subtask::Caption => TaskCategory::Mol2Text,
            Subtask::Design => TaskCategory::Text2Mol,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Edit => "edit",
            Subtask::Grow => "grow",
            Subtask::Weight => "weight",
            Subtask::Atoms => "atoms",
            Subtask::Caption => "caption",
            Subtask::Design => "design",
        }
    }

    /// Whether responses are molecule strings.
    pub fn molecule_output(self) -> bool {
        matches!(self.category(), TaskCategory::Mol2Mol | TaskCategory::Text2Mol)
    }

    pub fn numeric_output(self) -> bool {
        self.category() == TaskCategory::Mol2Num
    }

    /// Fixed instruction text; Design instead embeds a caption.
    pub fn instruction(self) -> &'static str {
        match self {
            Subtask::Edit => "Replace every oxygen atom in this molecule with a nitrogen atom and give the edited molecule.",
            Subtask::Grow => "Extend this molecule by appending two carbon atoms to the end of its sequence.",
            Subtask::Weight => "Please provide the molecular weight of this molecule. Respond with the numerical value only.",
            Subtask::Atoms => "How many heavy atoms does this molecule contain? Respond with the numerical value only.",
            Subtask::Caption => "Describe the composition of this molecule.",
            Subtask::Design => DESIGN_LEAD,
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subtask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown subtask {s:?}")))
    }
}

const DESIGN_LEAD: &str = "Design a molecule that fits the following description. Respond with the SELFIES sequence only. Description: ";
const CAPTION_HEAD: &str = "This molecule contains ";
const CAPTION_MID: &str = " atoms and ";
const CAPTION_TAIL: &str = " rings.";

pub fn caption(atoms: usize, rings: usize) -> String {
    format!("{CAPTION_HEAD}{atoms}{CAPTION_MID}{rings}{CAPTION_TAIL}")
}

/// Multi-character template pieces the tokenizer treats as single tokens.
pub fn template_segments() -> Vec<String> {
    let mut v: Vec<String> = Subtask::ALL.iter().map(|t| t.instruction().to_string()).collect();
    v.extend([SELFIES_LEAD, CAPTION_HEAD, CAPTION_MID, CAPTION_TAIL].iter().map(|s| s.to_string()));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionSample {
    pub subtask: Subtask,
    pub instruction: String,
    pub molecules: Vec<String>,
    /// Graph of the first molecule, if any.
    pub graph: Option<MoleculeGraph>,
    pub response: String,
    pub split: Split,
}

impl InstructionSample {
    pub fn task(&self) -> TaskCategory {
        self.subtask.category()
    }

    pub fn new(subtask: Subtask, instruction: String, molecules: Vec<String>, response: String, split: Split) -> Result<Self> {
        if instruction.is_empty() {
            return Err(Error::Data("empty instruction".into()));
        }
        if subtask.category() == TaskCategory::Text2Mol && !molecules.is_empty() {
            return Err(Error::Data("Text2Mol sample carries input molecules".into()));
        }
        let graph = match molecules.first() {
            Some(m) => Some(decode_str(m).map_err(|e| Error::Data(format!("molecule {m:?}: {e}")))?),
            None => None,
        };
        Ok(Self { subtask, instruction, molecules, graph, response, split })
    }
}

/// On-disk record, one JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: TaskCategory,
    subtask: Subtask,
    instruction: String,
    molecules: Vec<String>,
    response: String,
    split: Split,
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[InstructionSample]) -> Result<()> {
    for s in samples {
        let rec = Record {
            task: s.task(),
            subtask: s.subtask,
            instruction: s.instruction.clone(),
            molecules: s.molecules.clone(),
            response: s.response.clone(),
            split: s.split,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<InstructionSample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        if rec.task != rec.subtask.category() {
            return Err(Error::Data(format!(
                "line {}: subtask {} does not belong to {}",
                n + 1,
                rec.subtask,
                rec.task
            )));
        }
        out.push(InstructionSample::new(rec.subtask, rec.instruction, rec.molecules, rec.response, rec.split)?);
    }
    Ok(out)
}

/// Per-subtask sample counts and split fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub counts: BTreeMap<Subtask, usize>,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub min_atoms: usize,
    pub max_atoms: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let counts = [
            (Subtask::Edit, 500),
            (Subtask::Grow, 300),
            (Subtask::Weight, 300),
            (Subtask::Atoms, 300),
            (Subtask::Caption, 580),
            (Subtask::Design, 20),
        ]
        .into_iter()
        .collect();
        Self { counts, test_fraction: 0.1, val_fraction: 0.1, min_atoms: 3, max_atoms: 8 }
    }
}

impl CorpusSpec {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("split fractions must lie in [0, 1)".into()));
        }
        if self.min_atoms < 2 || self.min_atoms > self.max_atoms || self.max_atoms > 12 {
            return Err(Error::Config(format!(
                "atom range {}..={} must satisfy 2 <= min <= max <= 12",
                self.min_atoms, self.max_atoms
            )));
        }
        if let Some(&n) = self.counts.get(&Subtask::Design) {
            if n > DESIGN_MAX {
                return Err(Error::Config(format!("design supports at most {DESIGN_MAX} samples, got {n}")));
            }
        }
        Ok(())
    }
}

/// Longest carbon chain offered by the design subtask.
const DESIGN_MAX: usize = 20;
const ATTEMPTS: u64 = 10_000;

const ATOM_WEIGHTS: [(&str, f64); 8] = [
    ("[C]", 0.50),
    ("[=C]", 0.06),
    ("[#C]", 0.02),
    ("[N]", 0.12),
    ("[=N]", 0.03),
    ("[O]", 0.17),
    ("[=O]", 0.05),
    ("[F]", 0.05),
];

/// Random molecule with an atom count in `min..=max`, returned canonical.
fn random_molecule(rng: &mut SeededRng, min: usize, max: usize) -> Option<(String, MoleculeGraph)> {
    let target = min + rng.below(max - min + 1);
    let weights: Vec<f64> = ATOM_WEIGHTS.iter().map(|w| w.1).collect();
    let atom = |rng: &mut SeededRng| ATOM_WEIGHTS[rng.weighted(&weights)].0;
    let mut parts: Vec<&str> = vec!["[C]"];
    if rng.next_f64() < 0.4 {
        parts[0] = atom(rng);
    }
    let mut atoms = 1;
    while atoms < target {
        let roll = rng.next_f64();
        if roll < 0.15 && atoms + 2 <= target {
            parts.extend([tselfies::BRANCH_SYMBOL, tselfies::INDEX_SYMBOLS[1], atom(rng)]);
            atoms += 1;
        } else if roll < 0.25 && atoms >= 4 {
            parts.extend([tselfies::RING_SYMBOL, tselfies::INDEX_SYMBOLS[2 + rng.below(2)]]);
            continue;
        }
        parts.push(atom(rng));
        atoms += 1;
    }
    let g = decode_str(&parts.concat()).ok()?;
    if g.atom_count() < min || g.atom_count() > max {
        return None;
    }
    let canon = canonicalize(&g);
    let graph = decode_str(&canon).ok()?;
    Some((canon, graph))
}

fn split_for(index: usize, n: usize, spec: &CorpusSpec) -> Split {
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = ((n - n_test) as f64 * spec.val_fraction).round() as usize;
    if index < n_test {
        Split::Test
    } else if index < n_test + n_val {
        Split::Val
    } else {
        Split::Train
    }
}

/// Sample for a molecule-input subtask, with the response derived by rule.
pub fn molecule_sample(task: Subtask, mol: &str, split: Split) -> Result<InstructionSample> {
    let d = descriptor(&decode_str(mol)?);
    let response = match task {
        Subtask::Edit => mol.replace("[O]", "[N]"),
        Subtask::Grow => format!("{mol}[C][C]"),
        Subtask::Weight => d.weight_text(),
        Subtask::Atoms => d.atom_count.to_string(),
        Subtask::Caption => caption(d.atom_count, d.ring_count),
        Subtask::Design => return Err(Error::usage("design samples take a caption, not a molecule")),
    };
    InstructionSample::new(task, task.instruction().to_string(), vec![mol.to_string()], response, split)
}

/// Deterministic corpus: each subtask draws from its own derived stream and
/// rejects repeated canonical inputs.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<InstructionSample>> {
    spec.validate()?;
    let root = SeededRng::new(seed);
    let mut out = Vec::with_capacity(spec.total());
    for (&task, &count) in &spec.counts {
        if task == Subtask::Design {
            let mut lengths: Vec<usize> = (1..=DESIGN_MAX).collect();
            root.split("design").shuffle(&mut lengths);
            for (i, &a) in lengths.iter().take(count).enumerate() {
                let instruction = format!("{}{}", task.instruction(), caption(a, 0));
                let response = canonicalize(&decode_str(&"[C]".repeat(a))?);
                out.push(InstructionSample::new(task, instruction, vec![], response, split_for(i, count, spec))?);
            }
            continue;
        }
        let mut seen = HashSet::new();
        let mut i = 0usize;
        let mut attempt = 0u64;
        while i < count {
            if attempt >= ATTEMPTS * (count as u64 + 1) {
                return Err(Error::Data(format!("could not draw {count} distinct molecules for {task}")));
            }
            let mut rng = root.split_index(task.name(), attempt);
            attempt += 1;
            let Some((mol, _)) = random_molecule(&mut rng, spec.min_atoms, spec.max_atoms) else {
                continue;
            };
            if task == Subtask::Edit && !mol.contains("[O]") {
                continue;
            }
            if !seen.insert(mol.clone()) {
                continue;
            }
            out.push(molecule_sample(task, &mol, split_for(i, count, spec))?);
            i += 1;
        }
    }
    Ok(out)
}

/// Backbone pretraining stream: `scale`× the per-subtask counts drawn from a
/// seed independent of the tuning corpus, all marked `Train`, minus anything
/// sharing a leakage key with `held_out`.
pub fn pretraining_corpus(
    spec: &CorpusSpec,
    seed: u64,
    scale: usize,
    held_out: &[&[InstructionSample]],
) -> Result<(Vec<InstructionSample>, LeakageReport)> {
    if scale == 0 {
        return Err(Error::Config("pretraining scale must be positive".into()));
    }
    let mut big = spec.clone();
    for (task, n) in big.counts.iter_mut() {
        *n = if *task == Subtask::Design { (*n * scale).min(DESIGN_MAX) } else { *n * scale };
    }
    big.test_fraction = 0.0;
    big.val_fraction = 0.0;
    let stream = generate_corpus(&big, SeededRng::new(seed).split("pretraining").next_u64())?;
    Ok(leakage_scan(&stream, held_out))
}

pub fn by_split(samples: &[InstructionSample], split: Split) -> Vec<InstructionSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

/// Leakage key: subtask with canonical input molecules, or the instruction
/// text when there are no input molecules.
pub fn leakage_key(s: &InstructionSample) -> (Subtask, String) {
    if s.molecules.is_empty() {
        return (s.subtask, s.instruction.clone());
    }
    let canon: Vec<String> = s
        .molecules
        .iter()
        .map(|m| match decode_str(m) {
            Ok(g) => canonicalize(&g),
            Err(_) => m.clone(),
        })
        .collect();
    (s.subtask, canon.join("."))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LeakageReport {
    /// Indices into the original train list, with their keys.
    pub removed: Vec<(usize, Subtask, String)>,
}

pub fn leakage_scan(train: &[InstructionSample], tests: &[&[InstructionSample]]) -> (Vec<InstructionSample>, LeakageReport) {
    let keys: HashSet<(Subtask, String)> = tests.iter().flat_map(|t| t.iter().map(leakage_key)).collect();
    let mut kept = Vec::with_capacity(train.len());
    let mut report = LeakageReport::default();
    for (i, s) in train.iter().enumerate() {
        let k = leakage_key(s);
        if keys.contains(&k) {
            report.removed.push((i, k.0, k.1));
        } else {
            kept.push(s.clone());
        }
    }
    (kept, report)
}

/// Number of grammar tokens in a molecule string; unknown symbols count as one.
pub fn molecule_token_len(s: &str) -> usize {
    tselfies::split_brackets(s).len()
}

/// True when every bracket symbol is in the alphabet.
pub fn in_alphabet(s: &str) -> bool {
    tselfies::split_brackets(s).iter().all(|p| Token::from_symbol(p).is_some())
}
