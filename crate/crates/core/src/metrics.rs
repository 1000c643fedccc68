//! Evaluation metrics over generated responses.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskforge::{Subtask, TaskCategory};
use crate::tselfies::{self, canonicalize, decode, morgan_fingerprint, tanimoto};

fn canonical(s: &str) -> Option<String> {
    let toks = tselfies::tokenize(s).ok()?;
    Some(canonicalize(&decode(&toks)))
}

/// 1 when the responses agree: canonical graph equality for molecules,
/// string equality otherwise.
pub fn exact_match(pred: &str, reference: &str, molecule: bool) -> f64 {
    let hit = if molecule {
        match (canonical(pred), canonical(reference)) {
            (Some(a), Some(b)) => a == b,
            _ => pred == reference,
        }
    } else {
        pred == reference
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Unit-cost edit distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Grammar tokens for molecules, characters otherwise.
pub fn levenshtein(pred: &str, reference: &str, molecule: bool) -> usize {
    if molecule {
        edit_distance(&tselfies::split_brackets(pred), &tselfies::split_brackets(reference))
    } else {
        let a: Vec<char> = pred.chars().collect();
        let b: Vec<char> = reference.chars().collect();
        edit_distance(&a, &b)
    }
}

fn ngrams<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed sentence BLEU over pre-split tokens. Orders longer than both
/// sequences are left out of the geometric mean.
pub fn bleu_tokens(pred: &[&str], reference: &[&str], max_n: usize) -> f64 {
    if pred.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let p = ngrams(pred, n);
        let r = ngrams(reference, n);
        let total: usize = p.values().sum();
        if total == 0 && r.is_empty() {
            continue;
        }
        let clipped: usize = p.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
        orders += 1;
    }
    let bp = if pred.len() < reference.len() {
        (1.0 - reference.len() as f64 / pred.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / orders as f64).exp()
}

pub fn metric_tokens(s: &str, molecule: bool) -> Vec<&str> {
    if molecule {
        tselfies::split_brackets(s)
    } else {
        s.split_whitespace().collect()
    }
}

pub fn bleu(pred: &str, reference: &str, max_n: usize, molecule: bool) -> f64 {
    bleu_tokens(&metric_tokens(pred, molecule), &metric_tokens(reference, molecule), max_n)
}

/// A non-empty string made only of grammar tokens.
pub fn validity(pred: &str) -> bool {
    matches!(tselfies::tokenize(pred), Ok(t) if !t.is_empty())
}

pub fn validity_rate(preds: &[&str]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| validity(p)).count() as f64 / preds.len() as f64
}

/// Tanimoto similarity of radius-`radius` fingerprints; `None` if either
/// side is not made of grammar tokens.
pub fn fingerprint_similarity(pred: &str, reference: &str, radius: usize) -> Option<f64> {
    let a = decode(&tselfies::tokenize(pred).ok()?);
    let b = decode(&tselfies::tokenize(reference).ok()?);
    tanimoto(&morgan_fingerprint(&a, radius), &morgan_fingerprint(&b, radius)).ok()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Regression {
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub parsed: usize,
    pub total: usize,
}

impl Regression {
    pub fn valid_pct(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.parsed as f64 / self.total as f64
        }
    }
}

/// MAE and R² over parseable predictions; R² is `None` when the references
/// have zero variance.
pub fn regression_metrics(preds: &[Option<f64>], refs: &[f64]) -> Result<Regression> {
    if preds.len() != refs.len() || preds.is_empty() {
        return Err(Error::usage(format!("{} predictions for {} references", preds.len(), refs.len())));
    }
    let pairs: Vec<(f64, f64)> = preds.iter().zip(refs).filter_map(|(p, &r)| p.map(|p| (p, r))).collect();
    if pairs.is_empty() {
        return Ok(Regression { mae: None, r2: None, parsed: 0, total: refs.len() });
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, r)| (p - r).abs()).sum::<f64>() / n;
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(_, r)| (r - mean).powi(2)).sum();
    let ss_res: f64 = pairs.iter().map(|(p, r)| (p - r).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(Regression { mae: Some(mae), r2, parsed: pairs.len(), total: refs.len() })
}

pub fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: TaskCategory,
    pub subtask: Subtask,
    pub prediction: String,
    pub reference: String,
}

/// Aggregates for one subtask. Inapplicable metrics are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSummary {
    pub task: TaskCategory,
    pub subtask: Subtask,
    pub n: usize,
    pub exact: f64,
    pub bleu2: Option<f64>,
    pub bleu4: Option<f64>,
    pub levenshtein: Option<f64>,
    pub morgan: Option<f64>,
    pub validity: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub valid_pct: Option<f64>,
}

pub const MORGAN_RADIUS: usize = 2;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn summarize(records: &[EvalRecord]) -> Result<Vec<TaskSummary>> {
    let mut groups: BTreeMap<Subtask, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.subtask).or_default().push(r);
    }
    let mut out = Vec::new();
    for (sub, rs) in groups {
        let mol = sub.molecule_output();
        let exact: Vec<f64> = rs.iter().map(|r| exact_match(&r.prediction, &r.reference, mol)).collect();
        let mut s = TaskSummary {
            task: sub.category(),
            subtask: sub,
            n: rs.len(),
            exact: mean(&exact),
            bleu2: None,
            bleu4: None,
            levenshtein: None,
            morgan: None,
            validity: None,
            mae: None,
            r2: None,
            valid_pct: None,
        };
        if sub.numeric_output() {
            let preds: Vec<Option<f64>> = rs.iter().map(|r| parse_number(&r.prediction)).collect();
            let refs: Vec<f64> = rs
                .iter()
                .map(|r| parse_number(&r.reference).ok_or_else(|| Error::Data(format!("non-numeric reference {:?}", r.reference))))
                .collect::<Result<_>>()?;
            let reg = regression_metrics(&preds, &refs)?;
            s.mae = reg.mae;
            s.r2 = reg.r2;
            s.valid_pct = Some(reg.valid_pct());
        } else {
            let b2: Vec<f64> = rs.iter().map(|r| bleu(&r.prediction, &r.reference, 2, mol)).collect();
            let b4: Vec<f64> = rs.iter().map(|r| bleu(&r.prediction, &r.reference, 4, mol)).collect();
            let lev: Vec<f64> = rs.iter().map(|r| levenshtein(&r.prediction, &r.reference, mol) as f64).collect();
            s.bleu2 = Some(mean(&b2));
            s.bleu4 = Some(mean(&b4));
            s.levenshtein = Some(mean(&lev));
            if mol {
                let sims: Vec<f64> = rs
                    .iter()
                    .map(|r| fingerprint_similarity(&r.prediction, &r.reference, MORGAN_RADIUS).unwrap_or(0.0))
                    .collect();
                s.morgan = Some(mean(&sims));
                let preds: Vec<&str> = rs.iter().map(|r| r.prediction.as_str()).collect();
                s.validity = Some(validity_rate(&preds));
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub const SUMMARY_HEADER: &str = "task,subtask,n,exact,bleu2,bleu4,levenshtein,morgan,validity,mae,r2,valid_pct";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn summary_csv(rows: &[TaskSummary]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.subtask,
            r.n,
            r.exact,
            cell(r.bleu2),
            cell(r.bleu4),
            cell(r.levenshtein),
            cell(r.morgan),
            cell(r.validity),
            cell(r.mae),
            cell(r.r2),
            r.valid_pct.map(|v| format!("{v:.1}")).unwrap_or_default(),
        ));
    }
    s
}
