//! Graph injection, forward-pass structure and decoding.

mod common;

use std::sync::Arc;

use omnimol_core::model::{graph_histogram, project, FfnBlock, Head, ModelConfig, OmniModel, TrainMode};
use omnimol_core::moge::FfnWeights;
use omnimol_core::rng::SeededRng;
use omnimol_core::taskforge::{collate, molecule_sample, Batch, GraphFeaturizer, RenderOptions, Split, Subtask, Tokenizer};
use omnimol_core::tensor::{Binder, Tape, Tensor};
use omnimol_core::training::batch_loss;
use omnimol_core::tselfies::decode_str;
use proptest::prelude::*;

use common::module_grad_error;

fn small() -> ModelConfig {
    ModelConfig { d_model: 16, n_layers: 4, n_heads: 2, d_ff: 32, graph_dim: 8, graph_tokens: 3, gal_rank: 2, max_seq: 96, ..ModelConfig::default() }
}

fn samples() -> Vec<omnimol_core::taskforge::InstructionSample> {
    vec![
        molecule_sample(Subtask::Edit, "[C][O][C]", Split::Train).unwrap(),
        molecule_sample(Subtask::Atoms, "[C][C][N][C]", Split::Train).unwrap(),
    ]
}

fn full_batch(model: &OmniModel) -> Batch {
    collate(&samples(), &Tokenizer::standard(), 80, RenderOptions::FULL, Some(&model.encoder as &dyn GraphFeaturizer)).unwrap()
}

fn logits(model: &OmniModel, batch: &Batch) -> (Vec<f64>, usize) {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let inp = model.assemble_inputs(&mut tape, &mut binder, batch).unwrap();
    let out = model.forward(&mut tape, &mut binder, &inp, Head::All).unwrap();
    (tape.value(out.logits.unwrap()).to_vec(), inp.seq)
}

#[test]
fn histogram_of_a_short_chain() {
    let h = graph_histogram(&decode_str("[C][C][O]").unwrap());
    // C N O F | degree 0..=4 | rings | atoms
    assert_eq!(h, [2.0, 0.0, 1.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 3.0]);
}

#[test]
fn encoder_depends_only_on_the_graph() {
    let m = OmniModel::new(small(), 0).unwrap();
    let a = m.encoder.encode_graph(&decode_str("[C][C][O]").unwrap());
    let b = m.encoder.encode_graph(&decode_str("[O][C][C]").unwrap());
    assert_eq!(a, b);
    assert_eq!((a.rows, a.dim), (3, 8));
    assert!(a.values.iter().all(|v| v.abs() <= 1.0));
    assert_ne!(a.values, m.encoder.encode_graph(&decode_str("[C][C][N]").unwrap()).values);
}

#[test]
fn projector_zero_and_identity() {
    let mut m = OmniModel::new(ModelConfig { graph_dim: 16, ..small() }, 0).unwrap();
    let h: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).cos()).collect();
    m.projector.w = Tensor::zeros(&[16, 16]);
    m.projector.b = Tensor::new(vec![16], (0..16).map(|i| i as f64).collect()).unwrap();
    let y = project(&m.projector, &h).unwrap();
    assert_eq!(&y[..16], &y[16..]);
    assert_eq!(y[5], 5.0);
    let mut eye = vec![0.0; 256];
    (0..16).for_each(|i| eye[i * 16 + i] = 1.0);
    m.projector.w = Tensor::new(vec![16, 16], eye).unwrap();
    m.projector.b = Tensor::zeros(&[16]);
    assert_eq!(project(&m.projector, &h).unwrap(), h);
}

#[test]
fn graph_rows_are_spliced_in_place() {
    let m = OmniModel::new(small(), 0).unwrap();
    let b = full_batch(&m);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let inp = m.assemble_inputs(&mut tape, &mut binder, &b).unwrap();
    let n = m.cfg.graph_tokens;
    assert_eq!(inp.seq, b.seq + n - 1);
    for r in 0..b.batch {
        let row = &inp.graph_pos[r * inp.seq..(r + 1) * inp.seq];
        let first = b.row_ids(r).iter().position(|&id| id == m.graph_id).unwrap();
        let marked: Vec<usize> = (0..inp.seq).filter(|&t| row[t]).collect();
        assert_eq!(marked, (first..first + n).collect::<Vec<_>>());
        let live = inp.attn_mask[r * inp.seq..(r + 1) * inp.seq].iter().filter(|&&x| x == 1).count();
        assert_eq!(live, b.row_len(r) + n - 1);
        // Tokens after the placeholder are shifted by n - 1.
        for t in first + 1..b.row_len(r) {
            assert_eq!(inp.ids[r * inp.seq + t + n - 1], b.row_ids(r)[t]);
        }
    }
}

#[test]
fn targets_are_the_response_tokens() {
    let m = OmniModel::new(small(), 0).unwrap();
    let b = full_batch(&m);
    let tok = Tokenizer::standard();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let inp = m.assemble_inputs(&mut tape, &mut binder, &b).unwrap();
    let (pos, tgt) = inp.next_token_targets();
    let mut expected = Vec::new();
    for s in samples() {
        expected.extend(tok.encode(&format!("{}<|eot_id|>", s.response)).unwrap());
    }
    assert_eq!(tgt, expected);
    assert!(pos.iter().all(|&p| inp.label_mask[p + 1] == 1 && !inp.graph_pos[p + 1]));
}

#[test]
fn earlier_logits_ignore_later_tokens() {
    let m = OmniModel::new(small(), 4).unwrap();
    let b = full_batch(&m);
    let (before, seq) = logits(&m, &b);
    let mut changed = b.clone();
    let last = b.row_len(0) - 2;
    changed.input_ids[last] = (changed.input_ids[last] + 7) % m.cfg.vocab_size;
    let (after, _) = logits(&m, &changed);
    let v = m.cfg.vocab_size;
    let cut = last + m.cfg.graph_tokens - 1;
    assert_eq!(&before[..cut * v], &after[..cut * v]);
    assert_ne!(&before[cut * v..(cut + 1) * v], &after[cut * v..(cut + 1) * v]);
    assert_eq!(&before[seq * v..], &after[seq * v..]);
}

#[test]
fn fresh_expansion_doubles_mixture_feed_forward() {
    let dense = OmniModel::new(small(), 5).unwrap();
    let mut expanded = dense.clone();
    expanded.expand(6).unwrap();
    let mut reference = dense.clone();
    for (i, layer) in reference.layers.iter_mut().enumerate() {
        if reference.cfg.is_moge_layer(i + 1) {
            if let FfnBlock::Dense(w) = &layer.ffn {
                let mut w2: FfnWeights = (**w).clone();
                w2.down.data_mut().iter_mut().for_each(|x| *x *= 2.0);
                layer.ffn = FfnBlock::Dense(Arc::new(w2));
            }
        }
    }
    let b = full_batch(&dense);
    let (x, _) = logits(&expanded, &b);
    let (y, _) = logits(&reference, &b);
    let worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
    assert!(expanded.expand(7).is_err());
}

#[test]
fn greedy_decoding_is_deterministic() {
    let mut m = OmniModel::new(small(), 8).unwrap();
    m.expand(9).unwrap();
    let tok = Tokenizer::standard();
    let s = &samples()[0];
    let prompt = omnimol_core::taskforge::encode_prompt(s, &tok, RenderOptions::FULL).unwrap();
    let g = Some(m.encoder.encode(&decode_str(&s.molecules[0]).unwrap()));
    let a = m.generate(&[prompt.clone(), prompt.clone()], &[g.clone(), g.clone()], 6).unwrap();
    let b = m.generate(&[prompt.clone()], &[g.clone()], 6).unwrap();
    assert_eq!(a[0], a[1]);
    assert_eq!(a[0], b[0]);
    assert!(m.generate(&[prompt], &[g], 200).is_err());
}

#[test]
fn projector_gradient_matches_finite_differences() {
    let mut m = OmniModel::new(small(), 10).unwrap();
    m.set_mode(TrainMode::Stage1);
    let b = full_batch(&m);
    let err = module_grad_error(
        &m,
        2,
        &|m: &OmniModel, k| if k == 0 { &m.projector.w } else { &m.projector.b },
        &|m: &mut OmniModel, k| if k == 0 { &mut m.projector.w } else { &mut m.projector.b },
        &|m: &OmniModel, tape, binder| batch_loss(m, tape, binder, &b, 0.0).unwrap().total,
        12,
    );
    assert!(err < 1e-5, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_stay_finite(seed in any::<u64>(), len in 1usize..40) {
        let m = OmniModel::new(small(), 11).unwrap();
        let mut rng = SeededRng::new(seed);
        let ids: Vec<usize> = (0..len).map(|_| 1 + rng.below(m.cfg.vocab_size - 1)).filter(|&i| i != m.graph_id).collect();
        prop_assume!(!ids.is_empty());
        let n = ids.len();
        let batch = Batch {
            batch: 1,
            seq: n,
            input_ids: ids,
            attn_mask: vec![1; n],
            label_mask: vec![0; n],
            graph_features: None,
            graph_rows: 0,
            graph_dim: 0,
            graph_present: vec![false],
            truncated: vec![false],
        };
        let (l, _) = logits(&m, &batch);
        prop_assert!(l.iter().all(|x| x.is_finite()));
    }
}
