//! Corpus rules, chat rendering, collation masks and leakage removal.

use std::collections::{BTreeMap, HashSet};

use omnimol_core::taskforge::{
    collate, generate_corpus, leakage_key, leakage_scan, molecule_sample, read_jsonl, render_chat, write_jsonl, CorpusSpec,
    InstructionSample, RenderOptions, Split, Subtask, Tokenizer,
};
use omnimol_core::tselfies::canonicalize;
use omnimol_core::tselfies::decode_str;
use proptest::prelude::*;

fn spec(counts: &[(Subtask, usize)]) -> CorpusSpec {
    CorpusSpec { counts: counts.iter().copied().collect::<BTreeMap<_, _>>(), ..CorpusSpec::default() }
}

fn small_corpus(seed: u64) -> Vec<InstructionSample> {
    let s = spec(&[
        (Subtask::Edit, 20),
        (Subtask::Grow, 10),
        (Subtask::Weight, 10),
        (Subtask::Atoms, 10),
        (Subtask::Caption, 10),
        (Subtask::Design, 5),
    ]);
    generate_corpus(&s, seed).unwrap()
}

#[test]
fn rule_examples() {
    assert_eq!(molecule_sample(Subtask::Weight, "[C][C][O]", Split::Train).unwrap().response, "40.02");
    assert_eq!(molecule_sample(Subtask::Edit, "[C][O][C]", Split::Train).unwrap().response, "[C][N][C]");
    assert_eq!(molecule_sample(Subtask::Grow, "[C][O]", Split::Train).unwrap().response, "[C][O][C][C]");
    assert_eq!(molecule_sample(Subtask::Atoms, "[C][O][C]", Split::Train).unwrap().response, "3");
    assert_eq!(
        molecule_sample(Subtask::Caption, "[C][C][C][C][C][C][Ring1][I4]", Split::Train).unwrap().response,
        "This molecule contains 6 atoms and 1 rings."
    );
    assert!(molecule_sample(Subtask::Design, "[C]", Split::Train).is_err());
}

#[test]
fn thousand_molecules_have_distinct_canonical_forms() {
    let corpus = generate_corpus(&spec(&[(Subtask::Atoms, 1000)]), 0).unwrap();
    let mut seen = HashSet::new();
    for s in &corpus {
        let canon = canonicalize(&decode_str(&s.molecules[0]).unwrap());
        assert!(seen.insert(canon));
    }
}

#[test]
fn responses_follow_their_rules() {
    for s in small_corpus(3) {
        match s.subtask {
            Subtask::Design => {
                assert!(s.molecules.is_empty() && s.graph.is_none());
                let a = s.response.matches("[C]").count();
                assert_eq!(s.response, "[C]".repeat(a));
                assert!(s.instruction.contains(&format!("contains {a} atoms and 0 rings")));
            }
            t => assert_eq!(molecule_sample(t, &s.molecules[0], s.split).unwrap().response, s.response),
        }
    }
}

#[test]
fn same_seed_same_corpus_bytes() {
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_jsonl(&mut a, &small_corpus(11)).unwrap();
    write_jsonl(&mut b, &small_corpus(11)).unwrap();
    assert_eq!(a, b);
    let mut c = Vec::new();
    write_jsonl(&mut c, &small_corpus(12)).unwrap();
    assert_ne!(a, c);
    assert_eq!(read_jsonl(&a[..]).unwrap(), small_corpus(11));
}

#[test]
fn chat_template_shape() {
    let s = molecule_sample(Subtask::Weight, "[C][C][O]", Split::Test).unwrap();
    let text = render_chat(&s, RenderOptions::FULL);
    assert!(text.starts_with("<|begin_of_text|>") && text.ends_with("<|eot_id|>"));
    assert!(text.contains("<|start_header_id|>user<|end_header_id|>\n\n<graph_token>\n"));
    assert!(text.contains("Respond with the numerical value only."));
    assert!(text.contains(
        "<|start_header_id|>system<|end_header_id|>\n\n A chat between a curious user and an artificial intelligence assistant."
    ));
    assert!(text.ends_with("<|start_header_id|>assistant<|end_header_id|>\n\n40.02<|eot_id|>"));
    let design = small_corpus(1).into_iter().find(|s| s.subtask == Subtask::Design).unwrap();
    assert!(!render_chat(&design, RenderOptions::FULL).contains("<graph_token>"));
}

#[test]
fn leakage_cases() {
    let train = vec![
        molecule_sample(Subtask::Edit, "[C][O][C]", Split::Train).unwrap(),
        molecule_sample(Subtask::Edit, "[C][C][O]", Split::Train).unwrap(),
        molecule_sample(Subtask::Atoms, "[C][O][C]", Split::Train).unwrap(),
    ];
    let disjoint = vec![molecule_sample(Subtask::Edit, "[N][N]", Split::Test).unwrap()];
    let (kept, report) = leakage_scan(&train, &[&disjoint]);
    assert_eq!((kept.len(), report.removed.len()), (3, 0));

    let injected = vec![train[0].clone()];
    let (kept, report) = leakage_scan(&train, &[&injected]);
    assert_eq!(kept.len(), 2);
    assert_eq!(report.removed.len(), 1);
    assert_eq!(report.removed[0].0, 0);

    // "[O][C][C]" is the same graph as "[C][C][O]" written from the other end.
    let reordered = vec![InstructionSample::new(
        Subtask::Edit,
        Subtask::Edit.instruction().into(),
        vec!["[O][C][C]".into()],
        "[N][C][C]".into(),
        Split::Test,
    )
    .unwrap()];
    let (kept, report) = leakage_scan(&train, &[&reordered]);
    assert_eq!(report.removed.len(), 1);
    assert_eq!(report.removed[0].0, 1);
    assert!(!kept.contains(&train[1]));
}

#[test]
fn padding_and_masks() {
    let tok = Tokenizer::standard();
    let mut short = molecule_sample(Subtask::Atoms, "[C]", Split::Train).unwrap();
    short.response = "1".into();
    let long = molecule_sample(Subtask::Edit, "[C][O][C][O][C]", Split::Train).unwrap();
    let b = collate(&[short.clone(), long.clone()], &tok, 200, RenderOptions::TEXT_ONLY, None).unwrap();
    let (l0, l1) = (b.row_len(0), b.row_len(1));
    assert_eq!(b.seq, l0.max(l1));
    assert_eq!(b.attn_mask[..b.seq].iter().filter(|&&m| m == 0).count(), b.seq - l0);
    assert!(l1 > l0);

    for (row, s) in [short, long].iter().enumerate() {
        let ids = b.unpadded(row);
        assert_eq!(tok.decode(ids).unwrap(), render_chat(s, RenderOptions::TEXT_ONLY));
        let resp = tok.encode(&format!("{}<|eot_id|>", s.response)).unwrap();
        let labelled: Vec<usize> = (0..b.seq).filter(|&t| b.label_mask[row * b.seq + t] == 1).map(|t| b.row_ids(row)[t]).collect();
        assert_eq!(labelled, resp);
        let first = (0..b.seq).find(|&t| b.label_mask[row * b.seq + t] == 1).unwrap();
        assert!(tok.decode(&ids[..first]).unwrap().ends_with("<|start_header_id|>assistant<|end_header_id|>\n\n"));
    }
}

#[test]
fn empty_batch_is_usage_error() {
    let tok = Tokenizer::standard();
    assert!(collate(&[], &tok, 80, RenderOptions::FULL, None).is_err());
}

#[test]
fn long_responses_are_cut_and_flagged() {
    let tok = Tokenizer::standard();
    let s = molecule_sample(Subtask::Grow, "[C][O][C][O][C][O][C][O]", Split::Train).unwrap();
    let full = collate(&[s.clone()], &tok, 200, RenderOptions::TEXT_ONLY, None).unwrap();
    let cut = collate(&[s], &tok, full.seq - 3, RenderOptions::TEXT_ONLY, None).unwrap();
    assert!(!full.truncated[0] && cut.truncated[0]);
    assert_eq!(cut.seq, full.seq - 3);
    assert!(cut.label_mask.iter().any(|&m| m == 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scan_leaves_no_shared_keys(seed in 0u64..1000) {
        let mut all = small_corpus(seed);
        // Re-label some test rows as train to force collisions.
        let tests: Vec<InstructionSample> = all.iter().filter(|s| s.split == Split::Test).cloned().collect();
        all.extend(tests.iter().take(3).map(|s| InstructionSample { split: Split::Train, ..s.clone() }));
        let train: Vec<InstructionSample> = all.iter().filter(|s| s.split == Split::Train).cloned().collect();
        let (kept, report) = leakage_scan(&train, &[&tests]);
        let test_keys: HashSet<_> = tests.iter().map(leakage_key).collect();
        prop_assert!(kept.iter().all(|s| !test_keys.contains(&leakage_key(s))));
        prop_assert!(report.removed.len() >= 3.min(tests.len()));
        prop_assert_eq!(kept.len() + report.removed.len(), train.len());
    }

    #[test]
    fn masks_are_disciplined(seed in 0u64..1000, take in 1usize..12, graph in any::<bool>()) {
        let tok = Tokenizer::standard();
        let corpus = small_corpus(seed);
        let rows: Vec<InstructionSample> = corpus.iter().skip((seed as usize) % 40).take(take).cloned().collect();
        let opts = if graph { RenderOptions::FULL } else { RenderOptions::TEXT_ONLY };
        let b = collate(&rows, &tok, 96, opts, None).unwrap();
        for r in 0..b.batch {
            let m = &b.attn_mask[r * b.seq..(r + 1) * b.seq];
            let l = &b.label_mask[r * b.seq..(r + 1) * b.seq];
            let live = b.row_len(r);
            prop_assert!(m[..live].iter().all(|&x| x == 1) && m[live..].iter().all(|&x| x == 0));
            prop_assert!(l.iter().zip(m).all(|(&a, &b)| a <= b));
            prop_assert!(l.iter().any(|&x| x == 1));
            prop_assert!(b.row_ids(r)[live..].iter().all(|&id| id == tok.pad_id()));
        }
    }
}
