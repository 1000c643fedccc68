//! Feature pooling and mutual nearest-neighbour scores.

use omnimol_core::alignment::{
    extract_features, knn_sets, masked_mean, mutual_knn_score, parse_heatmap, AlignmentReport, FeatureStack,
};
use omnimol_core::model::{ModelConfig, OmniModel};
use omnimol_core::rng::SeededRng;
use omnimol_core::taskforge::{collate, molecule_sample, Batch, GraphFeaturizer, RenderOptions, Split, Subtask, Tokenizer};
use proptest::prelude::*;

fn stack(rows: &[&[f64]]) -> FeatureStack {
    FeatureStack { values: rows.concat(), batch: rows.len(), layers: 1, dim: rows[0].len() }
}

fn random_stack(n: usize, d: usize, seed: u64) -> FeatureStack {
    let mut rng = SeededRng::new(seed);
    FeatureStack { values: (0..n * d).map(|_| rng.uniform(1.0)).collect(), batch: n, layers: 1, dim: d }
}

/// Sort every other row by (distance, index) and keep the first k.
fn brute_knn(s: &FeatureStack, k: usize) -> Vec<Vec<usize>> {
    (0..s.rows())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..s.rows())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = s.row(i).iter().zip(s.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut v: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
            v.sort();
            v
        })
        .collect()
}

#[test]
fn single_position_mean_is_that_position() {
    let h = [1.0, 2.0, 3.0, 4.0];
    let f = masked_mean(&[&h], &[1, 1], 2, 1, 2).unwrap();
    assert_eq!(f.values, h);
}

#[test]
fn pooling_matches_loop_oracle() {
    let (b, l, t, d) = (2, 3, 4, 5);
    let r: Vec<Vec<f64>> = (0..l).map(|li| (0..b * t * d).map(|i| ((i * 7 + li * 13) as f64).sin()).collect()).collect();
    let mask = [1u8, 1, 1, 0, 1, 0, 0, 0];
    let layers: Vec<&[f64]> = r.iter().map(|v| v.as_slice()).collect();
    let f = masked_mean(&layers, &mask, b, t, d).unwrap();
    assert_eq!(f.rows(), b * l);
    for bi in 0..b {
        for li in 0..l {
            for di in 0..d {
                let mut num = 0.0;
                let mut den = 0.0;
                for ti in 0..t {
                    let m = mask[bi * t + ti] as f64;
                    num += m * r[li][(bi * t + ti) * d + di];
                    den += m;
                }
                assert!((f.row(bi * l + li)[di] - num / den).abs() < 1e-15);
            }
        }
    }
    assert!(masked_mean(&layers, &[1, 1, 1, 1, 0, 0, 0, 0], b, t, d).is_err());
}

#[test]
fn identical_stacks_score_one() {
    let s = random_stack(12, 3, 1);
    assert_eq!(mutual_knn_score(&s, &s, 4).unwrap(), 1.0);
}

#[test]
fn constructed_half_overlap() {
    let a = stack(&[&[0.0], &[1.0], &[10.0], &[11.0]]);
    let b = stack(&[&[0.0], &[1.0], &[3.0], &[1.5]]);
    assert_eq!(brute_knn(&a, 1), vec![vec![1], vec![0], vec![3], vec![2]]);
    assert_eq!(brute_knn(&b, 1), vec![vec![1], vec![3], vec![3], vec![1]]);
    assert_eq!(mutual_knn_score(&a, &b, 1).unwrap(), 0.5);
}

#[test]
fn ties_go_to_lower_rows_and_k_is_bounded() {
    let s = stack(&[&[0.0], &[-1.0], &[1.0], &[5.0]]);
    assert_eq!(knn_sets(&s, 1).unwrap()[0], vec![1]);
    assert!(knn_sets(&s, 4).is_err());
    assert!(knn_sets(&s, 0).is_err());
    assert!(mutual_knn_score(&s, &random_stack(5, 1, 2), 1).is_err());
}

#[test]
fn report_schema_and_axioms() {
    let stacks: Vec<FeatureStack> = (0..3).map(|i| random_stack(16, 4, 10 + i)).collect();
    let labels = vec!["edit".to_string(), "edit+atoms".into(), "edit+atoms+caption+grow".into()];
    let r = AlignmentReport::from_stacks(labels.clone(), &stacks, 3, 7, "abc".into()).unwrap();
    r.check().unwrap();
    assert_eq!((r.k, r.seed, r.probe_digest.as_str()), (3, 7, "abc"));
    let (parsed_labels, m) = parse_heatmap(&r.heatmap_csv()).unwrap();
    assert_eq!(parsed_labels, labels);
    for i in 0..3 {
        assert_eq!(m[i][i], 1.0);
        for j in 0..3 {
            assert_eq!(m[i][j], m[j][i]);
        }
    }
    assert!(parse_heatmap("model,a\nb,1.0\n").is_err());
}

fn tiny_model() -> OmniModel {
    let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, graph_dim: 8, graph_tokens: 2, gal_rank: 2, ..ModelConfig::default() };
    OmniModel::new(cfg, 3).unwrap()
}

fn with_extra_padding(b: &Batch, extra: usize) -> Batch {
    let seq = b.seq + extra;
    let mut out = b.clone();
    out.seq = seq;
    out.input_ids = vec![0; b.batch * seq];
    out.attn_mask = vec![0; b.batch * seq];
    out.label_mask = vec![0; b.batch * seq];
    for r in 0..b.batch {
        for t in 0..b.seq {
            out.input_ids[r * seq + t] = b.input_ids[r * b.seq + t];
            out.attn_mask[r * seq + t] = b.attn_mask[r * b.seq + t];
            out.label_mask[r * seq + t] = b.label_mask[r * b.seq + t];
        }
    }
    out
}

#[test]
fn model_features_ignore_trailing_padding() {
    let model = tiny_model();
    let tok = Tokenizer::standard();
    let samples = vec![
        molecule_sample(Subtask::Edit, "[C][O][C]", Split::Test).unwrap(),
        molecule_sample(Subtask::Atoms, "[C][C][C][O][N]", Split::Test).unwrap(),
    ];
    let b = collate(&samples, &tok, 80, RenderOptions::FULL, Some(&model.encoder as &dyn GraphFeaturizer)).unwrap();
    let f = extract_features(&model, &b).unwrap();
    assert_eq!(f.rows(), 2 * model.cfg.n_layers);
    let g = extract_features(&model, &with_extra_padding(&b, b.seq)).unwrap();
    for (x, y) in f.values.iter().zip(&g.values) {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 2usize..14, k in 1usize..6) {
        let s = random_stack(n, 3, seed);
        let k = k.min(n - 1);
        prop_assert_eq!(knn_sets(&s, k).unwrap(), brute_knn(&s, k));
    }

    #[test]
    fn score_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>(), k in 1usize..6) {
        let a = random_stack(10, 2, s1);
        let b = random_stack(10, 2, s2);
        let ab = mutual_knn_score(&a, &b, k).unwrap();
        prop_assert_eq!(ab, mutual_knn_score(&b, &a, k).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}
