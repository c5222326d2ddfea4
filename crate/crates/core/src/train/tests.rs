use super::loss::*;
use super::metrics::*;
use super::*;
use crate::config::Variant;
use crate::synth::{self, SynthConfig};

fn tiny_config(variant: Variant) -> Config {
    let mut c = Config { variant, ..Config::default() };
    c.model.word_embedding = 8;
    c.model.dialogue_context_embedding = 8;
    c.model.context_hidden = 8;
    c.model.hidden_dim = 8;
    c.model.projection_strategy = 8;
    c.model.projection_da = 8;
    c.model.rnn_hidden_size = 8;
    c.model.decoder_embedding = 4;
    c.model.decoder_hidden = 8;
    c.train.max_utterances_in_batch = 32;
    c.train.lr = 0.01;
    c
}

fn tiny_split() -> (Corpus, Corpus) {
    let c = synth::generate(&SynthConfig { dialogues: 20, turns: 5, ..SynthConfig::default() }).unwrap();
    let (train, valid, _) = synth::split(&c);
    (train, valid)
}

#[test]
fn strategy_loss_examples() {
    let l = loss_strategy(&[0.8, 0.3], &[true, false], &[3.0, 1.0]);
    assert!((l - (-3.0 * 0.8f64.ln() - 0.7f64.ln())).abs() < 1e-15);
    assert!((l - 1.0261).abs() < 1e-4);
    let perfect = loss_strategy(&[1.0, 0.0], &[true, false], &[3.0, 1.0]);
    assert_eq!(perfect, 0.0);
    // clamped, not infinite
    assert!(loss_strategy(&[0.0], &[true], &[1.0]).is_finite());
}

#[test]
fn strategy_loss_monotone_in_probability() {
    let ps = [0.1, 0.3, 0.5, 0.7, 0.9];
    for w in ps.windows(2) {
        assert!(loss_strategy(&[w[1]], &[true], &[2.0]) < loss_strategy(&[w[0]], &[true], &[2.0]));
        assert!(loss_strategy(&[w[1]], &[false], &[2.0]) > loss_strategy(&[w[0]], &[false], &[2.0]));
    }
}

#[test]
fn act_outcome_and_joint_examples() {
    let uniform = vec![0.3; 14];
    assert!((loss_dialogue_act(&uniform, 4, &[1.0; 14]) - 14f64.ln()).abs() < 1e-12);
    let mut rho = vec![1.0; 14];
    let base = loss_dialogue_act(&[0.1, 2.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, &rho);
    rho[2] = 2.0;
    let doubled = loss_dialogue_act(&[0.1, 2.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2, &rho);
    assert!((doubled - 2.0 * base).abs() < 1e-12);
    assert!((loss_outcome(&[0.0; 5], 3) - 5f64.ln()).abs() < 1e-12);
    assert_eq!(loss_generation(&[1.0]), 0.0);
    assert!((loss_generation(&[0.5, 0.25]) - (loss_generation(&[0.5]) + loss_generation(&[0.25]))).abs() < 1e-15);
    assert_eq!(loss_joint(1.0, 2.0, 3.0, 4.0, LossWeights::default()), 73.0);
    assert_eq!(loss_joint(1.5, 2.0, 3.0, 4.0, LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }), 1.5);
}

#[test]
fn tape_loss_matches_value_loss() {
    let (train, _) = tiny_split();
    let model = model_for_corpus(tiny_config(Variant::Graph), &train).unwrap();
    let p = model.prepare(&train.dialogues[0]);
    let n = p.predicted_turns();
    let mut tape = Tape::new(&model.store);
    let (_, parts) = model.loss(&mut tape, &p, None).unwrap();
    let steps = model.forward(&mut tape, &p, n, None).unwrap();
    let (mut st, mut da, mut r) = (0.0, 0.0, 0.0);
    for (t, s) in steps.iter().enumerate() {
        let probs: Vec<f64> = tape.value(s.st_logits).data().iter().map(|&x| crate::nd::sigmoid(x)).collect();
        st += loss_strategy(&probs, &p.content_khot(t + 1), &model.weights.delta);
        da += loss_dialogue_act(tape.value(s.da_logits).data(), p.acts[t + 1], &model.weights.rho);
        r += loss_outcome(tape.value(s.outcome_logits).data(), p.outcome.unwrap());
    }
    assert!((parts.st - st).abs() < 1e-9, "{} vs {st}", parts.st);
    assert!((parts.da - da).abs() < 1e-9);
    assert!((parts.r - r).abs() < 1e-9);
    let w = LossWeights::from(&model.config.train);
    assert!((parts.joint - loss_joint(parts.nlg, st, da, r, w)).abs() < 1e-9);
}

#[test]
fn perfect_predictions_score_one() {
    let gold = vec![vec![true, false, true], vec![false, true, false]];
    let s = f1_scores(&gold, &gold);
    assert_eq!((s.macro_f1, s.micro_f1, s.weighted_f1), (1.0, 1.0, 1.0));
    let probs: Vec<Vec<f64>> = gold.iter().map(|r| r.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect()).collect();
    let a = auc_scores(&gold, &probs);
    assert_eq!((a.macro_auc, a.micro_auc, a.weighted_auc), (Some(1.0), Some(1.0), Some(1.0)));
    let h = vec![vec![1, 2, 3], vec![4, 5]];
    assert!((corpus_bleu(&h, &h) - 100.0).abs() < 1e-9);
    assert_eq!(accuracy(&[1, 2], &[1, 2]), Some(1.0));
}

#[test]
fn f1_handles_absent_labels() {
    let gold = vec![vec![true, false, false]];
    let pred = vec![vec![true, true, false]];
    let s = f1_scores(&gold, &pred);
    assert_eq!(s.per_label, vec![Some(1.0), Some(0.0), None]);
    assert_eq!(s.macro_f1, 0.5);
    assert_eq!(s.weighted_f1, 1.0);
    assert!((s.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn auc_ties_and_missing_classes() {
    assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
    assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
    assert_eq!(roc_auc(&[0.9, 0.1, 0.4], &[false, true, true]), Some(0.0));
}

#[test]
fn bleu_edge_cases() {
    let empty: Vec<Vec<u32>> = vec![vec![]];
    assert_eq!(corpus_bleu(&empty, &[vec![1]]), 0.0);
    assert_eq!(corpus_bleu(&[vec![9, 9]], &[vec![1, 2]]), 0.0);
    // short hypothesis pays the brevity penalty
    let short = corpus_bleu(&[vec![1, 2]], &[vec![1, 2, 3, 4]]);
    assert!(short < 100.0 && short > 0.0);
}

#[test]
fn batches_respect_cap_and_order() {
    let lens = [5, 60, 70, 3, 200, 10];
    let order = [0, 1, 2, 3, 4, 5];
    let b = batches(&lens, &order, 128);
    assert_eq!(b, vec![vec![0, 1], vec![2, 3], vec![4], vec![5]]);
    let flat: Vec<usize> = b.concat();
    assert_eq!(flat, order);
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let (train, _) = tiny_split();
    let model = model_for_corpus(tiny_config(Variant::Graph), &train).unwrap();
    let prepared: Vec<Prepared> = train.dialogues.iter().map(|d| model.prepare(d)).collect();
    let batch: Vec<usize> = (0..prepared.len()).collect();
    let idx: Vec<u64> = batch.iter().map(|&i| i as u64).collect();
    let (gp, lp) = batch_gradients(&model, &prepared, &batch, Some(&idx), true).unwrap();
    let (gs, ls) = batch_gradients(&model, &prepared, &batch, Some(&idx), false).unwrap();
    assert_eq!(lp, ls);
    for id in model.store.ids() {
        assert_eq!(gp.get(id), gs.get(id));
    }
}

#[test]
fn fit_is_deterministic_and_checkpoint_reproduces_metrics() {
    let (train, valid) = tiny_split();
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let mut model = model_for_corpus(tiny_config(Variant::Graph), &train).unwrap();
        let opts = FitOptions {
            log_csv: Some(dir.path().join(format!("{tag}.csv"))),
            checkpoint: Some(dir.path().join(format!("{tag}.json"))),
            max_epochs: Some(3),
            no_early_stop: false,
        };
        let report = fit(&mut model, &train, &valid, &opts).unwrap();
        (model, report)
    };
    let (m1, r1) = run("a");
    let (_, r2) = run("b");
    assert_eq!(r1, r2);
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.json"), read("b.json"));
    assert_eq!(r1.epochs.len(), 3);

    let (back, _) = Model::load(dir.path().join("a.json")).unwrap();
    let e1 = evaluate(&m1, &valid, true).unwrap();
    let e2 = evaluate(&back, &valid, true).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.strategy_f1.macro_f1, r1.best_score);
}

#[test]
fn early_stopping_honours_patience() {
    let (train, valid) = tiny_split();
    let mut cfg = tiny_config(Variant::None);
    cfg.train.patience = 1;
    cfg.train.lr = 1e-9;
    let mut model = model_for_corpus(cfg, &train).unwrap();
    let report = fit(&mut model, &train, &valid, &FitOptions { max_epochs: Some(10), ..Default::default() }).unwrap();
    assert!(report.stopped_early);
    assert!(report.epochs.len() < 10);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (train, valid) = tiny_split();
    let mut model = model_for_corpus(tiny_config(Variant::None), &train).unwrap();
    let id = model.store.id("head_st.w").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    match fit(&mut model, &train, &valid, &FitOptions { max_epochs: Some(1), ..Default::default() }) {
        Err(TrainError::NonFinite { epoch: 0, batch: 0, norms }) => assert!(norms.contains("head_st.w")),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn empty_evaluation_set_is_an_error() {
    let (train, _) = tiny_split();
    let model = model_for_corpus(tiny_config(Variant::None), &train).unwrap();
    assert!(matches!(evaluate(&model, &Corpus::default(), false), Err(TrainError::EmptyEval)));
}

#[test]
fn prediction_dump_is_jsonl() {
    let (train, valid) = tiny_split();
    let model = model_for_corpus(tiny_config(Variant::Rnn), &train).unwrap();
    let prepared: Vec<Prepared> = valid.dialogues.iter().map(|d| model.prepare(d)).collect();
    let records = predict_all(&model, &prepared, true).unwrap();
    let mut buf = Vec::new();
    write_predictions(&records, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), records.len());
    let first: TurnRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first, records[0]);
    assert!(records.iter().any(|r| r.generated.is_some()));
}
