//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use omnimol_core::alignment::{parse_heatmap, task_scaling_study};
use omnimol_core::gal::GalConstants;
use omnimol_core::metrics::{bleu_tokens, levenshtein, regression_metrics, validity_rate};
use omnimol_core::model::{FfnBlock, ModelConfig, OmniModel, ParamRole, TrainMode};
use omnimol_core::moge::{aux_loss, upcycle, AuxLossStats, FfnWeights};
use omnimol_core::pipeline::{build_backbone, evaluate, prepare_corpus, RunConfig};
use omnimol_core::rng::SeededRng;
use omnimol_core::taskforge::{collate, GraphFeaturizer, InstructionSample, RenderOptions, Subtask, Tokenizer};
use omnimol_core::tensor::{Binder, Tape, Tensor};
use omnimol_core::training::{
    alignment_samples, batch_loss, checkpoint_digest, ignore_events, run_stage, train_stage2, Checkpoint, StageSpec,
    StageTag, TrainConfig,
};
use omnimol_core::tselfies::{alphabet, decode_str};

use common::{module_grad_error, tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Box<dyn FnOnce() -> Outcome>;

fn gal_range() -> Outcome {
    let c = GalConstants::default();
    let r = 64f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for a in [c.alpha0 - c.eps, c.alpha0 + c.eps] {
        for p in [c.p0 - c.delta, c.p0 + c.delta] {
            for b in [c.beta0 - c.eps, c.beta0 + c.eps] {
                let g = a / r.powf(p) + b;
                lo = lo.min(g);
                hi = hi.max(g);
            }
        }
    }
    let (ilo, ihi) = c.gamma_range(64);
    let pass = (lo - 1.863).abs() <= 1e-3 && (hi - 2.141).abs() <= 1e-3 && ilo == lo && ihi == hi;
    outcome(pass, format!("corners [{lo:.4}, {hi:.4}], library [{ilo:.4}, {ihi:.4}]"))
}

fn tiny() -> ModelConfig {
    ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, graph_dim: 8, graph_tokens: 2, gal_rank: 4, ..ModelConfig::default() }
}

fn probe_samples() -> Vec<InstructionSample> {
    use omnimol_core::taskforge::{molecule_sample, Split};
    vec![
        molecule_sample(Subtask::Edit, "[C][O][C]", Split::Train).unwrap(),
        molecule_sample(Subtask::Caption, "[C][C][N]", Split::Train).unwrap(),
    ]
}

fn probe_batch(m: &OmniModel) -> omnimol_core::taskforge::Batch {
    collate(&probe_samples(), &Tokenizer::standard(), 80, RenderOptions::FULL, Some(&m.encoder as &dyn GraphFeaturizer)).unwrap()
}

fn adapter_param(m: &OmniModel, k: usize) -> &Tensor {
    m.adapters()[k / 5].params()[k % 5].1
}

fn adapter_param_mut(m: &mut OmniModel, k: usize) -> &mut Tensor {
    m.adapters_mut().into_iter().nth(k / 5).unwrap().params_mut().into_iter().nth(k % 5).unwrap().1
}

fn gradient_soundness() -> Outcome {
    const TOL: f64 = 1e-4;
    let mut report = Vec::new();
    let mut worst = 0.0f64;

    let mut dense = OmniModel::new(tiny(), 1).unwrap();
    dense.set_mode(TrainMode::Pretrain);
    let b = probe_batch(&dense);
    let loss = |m: &OmniModel, tape: &mut Tape, binder: &mut Binder| batch_loss(m, tape, binder, &b, 0.01).unwrap().total;
    let e = module_grad_error(&dense, 1, &|m: &OmniModel, _| &m.embed, &|m: &mut OmniModel, _| &mut m.embed, &loss, 24);
    report.push(format!("embed {e:.1e}"));
    worst = worst.max(e);

    let mut m = dense.clone();
    m.expand(2).unwrap();
    // Non-zero B so every adapter scalar influences the loss.
    for (i, a) in m.adapters_mut().into_iter().enumerate() {
        let shape = a.b.shape().to_vec();
        let mut t = tensor(&shape, 100 + i as u64);
        t.data_mut().iter_mut().for_each(|x| *x *= 0.2);
        a.b = t;
    }
    m.set_mode(TrainMode::Stage2);
    let n_adapters = m.adapters().len();
    for (j, name) in ["A", "B", "alpha", "p", "beta"].iter().enumerate() {
        let picks: Vec<usize> = [0, n_adapters / 2, n_adapters - 1].iter().map(|&a| a * 5 + j).collect();
        let e = module_grad_error(
            &m,
            picks.len(),
            &|m: &OmniModel, k| adapter_param(m, picks[k]),
            &|m: &mut OmniModel, k| adapter_param_mut(m, picks[k]),
            &loss,
            6,
        );
        report.push(format!("{name} {e:.1e}"));
        worst = worst.max(e);
    }
    let moge: Vec<usize> = (0..m.layers.len()).filter(|&l| matches!(m.layers[l].ffn, FfnBlock::Moge(_))).collect();
    let e = module_grad_error(
        &m,
        moge.len(),
        &|m: &OmniModel, k| match &m.layers[moge[k]].ffn {
            FfnBlock::Moge(g) => &g.router,
            _ => unreachable!(),
        },
        &|m: &mut OmniModel, k| match &mut m.layers[moge[k]].ffn {
            FfnBlock::Moge(g) => &mut g.router,
            _ => unreachable!(),
        },
        &loss,
        16,
    );
    report.push(format!("router {e:.1e}"));
    worst = worst.max(e);
    let e = module_grad_error(
        &m,
        2,
        &|m: &OmniModel, k| if k == 0 { &m.projector.w } else { &m.projector.b },
        &|m: &mut OmniModel, k| if k == 0 { &mut m.projector.w } else { &mut m.projector.b },
        &loss,
        16,
    );
    report.push(format!("projector {e:.1e}"));
    worst = worst.max(e);
    outcome(worst <= TOL, format!("max rel-err {worst:.2e} ({})", report.join(", ")))
}

fn moge_identity() -> Outcome {
    let cfg = ModelConfig::default();
    let rng = SeededRng::new(3);
    let ffn = Arc::new(FfnWeights::new(cfg.d_model, cfg.d_ff, &mut rng.split("ffn")));
    let layer = upcycle(Arc::clone(&ffn), cfg.n_routed, cfg.top_e, cfg.gal_rank, cfg.gal, &mut rng.split("up")).unwrap();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let h = Tensor::uniform(&[1, cfg.d_model], 2.0, &mut rng.split_index("input", i));
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let hv = tape.leaf(&h);
        let (y, _) = layer.forward(&mut tape, &mut binder, hv, &[1], 1, 1).unwrap();
        let r = ffn.forward(&mut tape, &mut binder, hv).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(r)) {
            worst = worst.max((a - 2.0 * b).abs());
        }
    }
    outcome(worst <= 1e-10, format!("max |y - 2 FFN| = {worst:.2e} over 100 inputs"))
}

fn aux_closed_form() -> Outcome {
    let (n, e, t) = (4, 2, 8);
    let balanced = AuxLossStats {
        n,
        e,
        selection_counts: vec![t * e / n; 3 * n],
        mean_scores: vec![1.0 / n as f64; 3 * n],
        tokens_per_row: vec![t; 3],
    };
    let uniform = aux_loss(&balanced, n, e).unwrap();
    let top = 0.9;
    let concentrated = AuxLossStats {
        n,
        e: 1,
        selection_counts: vec![t, 0, 0, 0],
        mean_scores: vec![top, 0.05, 0.03, 0.02],
        tokens_per_row: vec![t],
    };
    let conc = aux_loss(&concentrated, n, 1).unwrap();

    let mut rng = SeededRng::new(4);
    let d = 8;
    let layer = upcycle(Arc::new(FfnWeights::new(d, 16, &mut rng.split("ffn"))), n, e, 2, GalConstants::default(), &mut rng).unwrap();
    let live = tensor(&[3, d], 5);
    let mut padded = live.data().to_vec();
    padded.extend(std::iter::repeat_n(0.7, 2 * d));
    let aux_of = |h: &Tensor, mask: &[u8], seq: usize| {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let hv = tape.leaf(h);
        let r = layer.route(&mut tape, &mut binder, hv, mask, 1, seq).unwrap();
        tape.scalar(r.aux)
    };
    let a = aux_of(&live, &[1, 1, 1], 3);
    let b = aux_of(&Tensor::new(vec![5, d], padded).unwrap(), &[1, 1, 1, 0, 0], 5);
    let pass = (uniform - 1.0).abs() <= 1e-12 && (conc - n as f64 * top).abs() <= 1e-12 && (a - b).abs() <= 1e-12;
    outcome(pass, format!("uniform {uniform}, concentrated {conc} (expect {}), padding delta {:.1e}", n as f64 * top, (a - b).abs()))
}

fn snapshot(m: &OmniModel) -> Vec<(String, ParamRole, Vec<u64>)> {
    m.named_params().into_iter().map(|(n, r, t)| (n, r, t.data().iter().map(|x| x.to_bits()).collect())).collect()
}

fn moved_roles(before: &[(String, ParamRole, Vec<u64>)], after: &[(String, ParamRole, Vec<u64>)]) -> Vec<ParamRole> {
    let mut roles = Vec::new();
    for (a, b) in before.iter().zip(after) {
        if a.2 != b.2 && !roles.contains(&a.1) {
            roles.push(a.1);
        }
    }
    roles.sort_by_key(|r| *r as u8);
    roles
}

fn freezing_audits() -> Outcome {
    let cfg = RunConfig::default();
    let corpus = prepare_corpus(&cfg).unwrap();
    let tc = TrainConfig { batch_size: 4, ..cfg.train.clone() };
    let model_cfg = ModelConfig { d_model: 32, n_layers: 4, n_heads: 2, d_ff: 64, ..ModelConfig::default() };
    let mut m = OmniModel::new(model_cfg, 0).unwrap();
    let train: Vec<InstructionSample> = corpus.train.iter().step_by((corpus.train.len() / 200).max(1)).cloned().collect();
    let steps = 100;
    let limit = |s: StageSpec| StageSpec { max_steps: Some(steps), epochs: usize::MAX, patience: None, ..s };

    let before = snapshot(&m);
    run_stage(&mut m, &alignment_samples(&train), &[], &limit(StageSpec::stage1(&tc)), tc.adam, None, &mut ignore_events).unwrap();
    let s1 = moved_roles(&before, &snapshot(&m));

    m.expand(1).unwrap();
    let before = snapshot(&m);
    run_stage(&mut m, &train, &[], &limit(StageSpec::stage2(&tc)), tc.adam, None, &mut ignore_events).unwrap();
    let after = snapshot(&m);
    let s2 = moved_roles(&before, &after);
    let frozen_same = before.iter().zip(&after).filter(|(a, _)| a.1 == ParamRole::Backbone).all(|(a, b)| a.2 == b.2);
    let pass = s1 == [ParamRole::Projector]
        && s2 == [ParamRole::Projector, ParamRole::Adapter, ParamRole::Router]
        && frozen_same;
    outcome(pass, format!("stage 1 moved {s1:?}; stage 2 moved {s2:?}; backbone bit-identical: {frozen_same}"))
}

fn robust_decoding() -> Outcome {
    let alpha = alphabet();
    let mut rng = SeededRng::new(6);
    let strings: Vec<String> = (0..10_000)
        .map(|_| {
            let n = 1 + rng.below(30);
            (0..n).map(|_| alpha[rng.below(alpha.len())]).collect()
        })
        .collect();
    let violations = strings.iter().filter(|s| decode_str(s).and_then(|g| g.validate()).is_err()).count();
    let refs: Vec<&str> = strings.iter().map(String::as_str).collect();
    let rate = validity_rate(&refs);
    outcome(violations == 0 && rate == 1.0, format!("{violations} violations, validity {rate:.2}"))
}

fn dp_oracle(a: &[char], b: &[char]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

fn metric_oracles() -> Outcome {
    let mut rng = SeededRng::new(9);
    let word = |rng: &mut SeededRng| -> String { (0..rng.below(15)).map(|_| (b'a' + rng.below(5) as u8) as char).collect() };
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (a, b) = (word(&mut rng), word(&mut rng));
        let oracle = dp_oracle(&a.chars().collect::<Vec<_>>(), &b.chars().collect::<Vec<_>>());
        mismatches += usize::from(levenshtein(&a, &b, false) != oracle);
    }
    let bleu = bleu_tokens(&["a", "b", "c"], &["a", "b", "c", "d"], 2);
    let r2 = regression_metrics(&[Some(1.0), Some(2.0)], &[2.0, 4.0]).unwrap().r2;
    let pass = mismatches == 0 && (bleu - (-1.0f64 / 3.0).exp()).abs() <= 1e-4 && r2 == Some(-1.5);
    outcome(pass, format!("{mismatches}/1000 Levenshtein mismatches, BLEU {bleu:.6}, R2 {r2:?}"))
}

struct EndToEnd {
    backbone: OmniModel,
    backbone_secs: f64,
    digest: String,
    edit_exact: f64,
    atoms_mae: f64,
    validity: f64,
    secs: f64,
}

fn end_to_end(cfg: &RunConfig) -> EndToEnd {
    let t0 = Instant::now();
    let corpus = prepare_corpus(cfg).unwrap();
    let (backbone, _, _) = build_backbone(cfg, &corpus, &mut ignore_events).unwrap();
    let backbone_secs = t0.elapsed().as_secs_f64();
    let mut model = backbone.clone();
    let s2 = train_stage2(&mut model, &corpus.train, &corpus.val, &cfg.train, None, &mut ignore_events).unwrap();
    let (_, summaries) = evaluate(&model, &corpus.test, &cfg.eval).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let row = |s: Subtask| summaries.iter().find(|r| r.subtask == s).unwrap();
    let ck = Checkpoint { model, stage: StageTag::Stage2, step: s2.steps, optimizer: s2.optimizer, state: s2.state };
    let validity: Vec<f64> = summaries.iter().filter_map(|r| r.validity).collect();
    EndToEnd {
        backbone,
        backbone_secs,
        digest: checkpoint_digest(&ck).unwrap(),
        edit_exact: row(Subtask::Edit).exact,
        atoms_mae: row(Subtask::Atoms).mae.unwrap_or(f64::INFINITY),
        validity: validity.iter().cloned().fold(f64::INFINITY, f64::min),
        secs,
    }
}

fn alignment_axioms(cfg: &RunConfig, first: &EndToEnd) -> Outcome {
    let t0 = Instant::now();
    let corpus = prepare_corpus(cfg).unwrap();
    let report = task_scaling_study(&first.backbone, &corpus, cfg, &mut ignore_events).unwrap();
    let secs = first.backbone_secs + t0.elapsed().as_secs_f64();
    let n = report.scores.len();
    let mut asym = 0.0f64;
    let mut diag_ok = true;
    let mut bounded = true;
    for i in 0..n {
        diag_ok &= report.scores[i][i] == 1.0;
        for j in 0..n {
            asym = asym.max((report.scores[i][j] - report.scores[j][i]).abs());
            bounded &= (0.0..=1.0).contains(&report.scores[i][j]);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alignment_heatmap.csv");
    std::fs::write(&path, report.heatmap_csv()).unwrap();
    let schema = parse_heatmap(&std::fs::read_to_string(&path).unwrap()).map(|(l, m)| l == report.labels && m.len() == n);
    let schema_ok = matches!(schema, Ok(true));
    let pass = n == 3 && diag_ok && asym <= 1e-12 && bounded && schema_ok && secs <= 20.0 * 60.0;
    let off: Vec<String> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| format!("{:.3}", report.scores[i][j])).collect();
    outcome(
        pass,
        format!(
            "{n} models {:?}, off-diagonal [{}], asymmetry {asym:.1e}, schema {schema_ok}, {secs:.0} s",
            report.labels,
            off.join(", ")
        ),
    )
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t0 = Instant::now();
    let mut o = f();
    let took = t0.elapsed();
    if took > budget {
        o.pass = false;
    }
    o.detail = format!("{} [{:.1} s, budget {} s]", o.detail, took.as_secs_f64(), budget.as_secs());
    o
}

fn main() {
    let secs = Duration::from_secs;
    let quick: Vec<(u8, &str, Check)> = vec![
        (1, "GAL range pin", Box::new(move || timed(secs(1), gal_range))),
        (2, "gradient soundness", Box::new(move || timed(secs(30), gradient_soundness))),
        (3, "mixture init identity", Box::new(move || timed(secs(5), moge_identity))),
        (4, "closed-form balancing loss", Box::new(move || timed(secs(5), aux_closed_form))),
        (5, "freezing audits", Box::new(move || timed(secs(60), freezing_audits))),
        (6, "robust decoding", Box::new(move || timed(secs(10), robust_decoding))),
        (9, "metric oracles", Box::new(move || timed(secs(10), metric_oracles))),
    ];
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    for (id, name, check) in quick {
        let o = check();
        println!("criterion {id} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    }

    let cfg = RunConfig::default();
    let first = end_to_end(&cfg);
    let second = end_to_end(&cfg);
    let pass8 = first.edit_exact >= 0.90
        && first.atoms_mae <= 0.5
        && first.validity >= 0.99
        && first.secs <= 15.0 * 60.0
        && second.secs <= 15.0 * 60.0
        && first.digest == second.digest;
    let o8 = outcome(
        pass8,
        format!(
            "edit exact {:.3}, atoms MAE {:.3}, validity {:.3}, runs {:.0} s / {:.0} s, checkpoints {}",
            first.edit_exact,
            first.atoms_mae,
            first.validity,
            first.secs,
            second.secs,
            if first.digest == second.digest { "identical" } else { "differ" }
        ),
    );
    let o7 = alignment_axioms(&cfg, &first);
    for (id, name, o) in [(7, "mutual-kNN axioms", o7), (8, "end-to-end smoke", o8)] {
        println!("criterion {id} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    }

    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
