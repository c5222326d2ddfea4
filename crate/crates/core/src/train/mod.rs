//! Training loop with early stopping, and evaluation.

pub mod loss;
pub mod metrics;

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::corpus::{Corpus, RatioBoundaries, Speaker, TokenVocab, N_CONTENT_STRATEGIES};
use crate::model::{ClassWeights, LossParts, Model, ModelError, Prepared, N_ACTS};
use crate::nd::rng::{stream, Stream};
use crate::nd::{AdamConfig, AdamState, Grads, ParamStore, Tape};
use crate::par;
use crate::heads::argmax;

pub use loss::LossWeights;
pub use metrics::{AucScores, F1Scores};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("evaluation set has no predictable turns")]
    EmptyEval,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; largest parameter norms: {norms}")]
    NonFinite { epoch: usize, batch: usize, norms: String },
}

/// Builds a fresh model whose vocabulary, ratio boundaries and class weights
/// come from `train` only.
pub fn model_for_corpus(config: Config, train: &Corpus) -> Result<Model, ModelError> {
    let weighted = config.train.weighted_strategy_loss;
    let mut model = Model::new(config, TokenVocab::build(train))?;
    attach_train_statistics(&mut model, train, weighted);
    Ok(model)
}

pub fn attach_train_statistics(model: &mut Model, train: &Corpus, weighted: bool) {
    model.boundaries = match RatioBoundaries::fit(&train.ratios()) {
        Ok(b) => Some(b),
        Err(e) => {
            log::warn!("no outcome classes: {e}");
            None
        }
    };
    model.weights = ClassWeights::fit(train, weighted);
}

/// Splits `order` into runs of consecutive dialogues whose turn counts sum to
/// at most `cap`; a longer dialogue forms a batch on its own.
pub fn batches(lens: &[usize], order: &[usize], cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut total = 0;
    for &i in order {
        if !cur.is_empty() && total + lens[i] > cap {
            out.push(std::mem::take(&mut cur));
            total = 0;
        }
        cur.push(i);
        total += lens[i];
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Per-dialogue loss and parameter gradients, with dropout driven by `rng_index`.
pub fn dialogue_gradients(
    model: &Model,
    p: &Prepared,
    seed: u64,
    rng_index: Option<u64>,
) -> Result<(Grads, LossParts), ModelError> {
    let mut tape = Tape::new(&model.store);
    let mut rng = rng_index.map(|i| stream(seed, Stream::Dropout, i));
    let (l, parts) = model.loss(&mut tape, p, rng.as_mut())?;
    let grads = tape.backward(l)?;
    Ok((grads, parts))
}

/// Sums gradients of the batch in batch order and scales by the number of
/// predicted turns. `parallel` selects the rayon path (when compiled in); both
/// paths produce identical sums.
pub fn batch_gradients(
    model: &Model,
    prepared: &[Prepared],
    batch: &[usize],
    rng_indices: Option<&[u64]>,
    parallel: bool,
) -> Result<(Grads, LossParts), ModelError> {
    let seed = model.config.seed;
    let work = |k: usize, &i: &usize| dialogue_gradients(model, &prepared[i], seed, rng_indices.map(|r| r[k]));
    let results = if parallel { par::map(batch, work) } else { par::sequential_map(batch, work) };
    let mut grads = Grads::new(model.store.len());
    let mut parts = LossParts::default();
    for r in results {
        let (g, lp) = r?;
        grads.merge(g);
        parts.add(&lp);
    }
    grads.scale(1.0 / parts.turns.max(1) as f64);
    Ok((grads, parts))
}

/// One row of the per-epoch CSV log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_joint: f64,
    pub loss_nlg: f64,
    pub loss_strategy: f64,
    pub loss_act: f64,
    pub loss_outcome: f64,
    pub valid_strategy_macro_f1: f64,
    pub valid_strategy_micro_f1: f64,
    pub valid_act_micro_f1: f64,
    pub valid_rc_acc: Option<f64>,
    pub valid_bleu: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub log_csv: Option<PathBuf>,
    /// Written once at the end: best parameters plus the final optimizer state.
    pub checkpoint: Option<PathBuf>,
    /// Overrides `train.max_epochs`.
    pub max_epochs: Option<usize>,
    /// Turns off early stopping (used for fixed-length runs).
    pub no_early_stop: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

fn norms_summary(store: &ParamStore) -> String {
    let mut n = store.norms();
    n.sort_by(|a, b| b.1.total_cmp(&a.1));
    n.iter().take(5).map(|(k, v)| format!("{k}={v:.3e}")).collect::<Vec<_>>().join(", ")
}

/// Trains with Adam on shuffled dialogue batches and keeps the parameters with
/// the best validation strategy macro-F1 (strict improvement); stops after
/// `patience` epochs without one.
pub fn fit(model: &mut Model, train: &Corpus, valid: &Corpus, opts: &FitOptions) -> Result<FitReport, TrainError> {
    let tc = model.config.train.clone();
    let seed = model.config.seed;
    let prepared: Vec<Prepared> =
        train.dialogues.iter().map(|d| model.prepare(d)).filter(|p| p.predicted_turns() > 0).collect();
    let valid_prepared: Vec<Prepared> =
        valid.dialogues.iter().map(|d| model.prepare(d)).filter(|p| p.predicted_turns() > 0).collect();
    if prepared.is_empty() || valid_prepared.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let lens: Vec<usize> = prepared.iter().map(Prepared::len).collect();
    let mut adam = AdamState::new(&model.store, AdamConfig { lr: tc.lr, weight_decay: tc.l2, ..AdamConfig::default() });
    let mut log = match &opts.log_csv {
        Some(path) => Some(csv::Writer::from_path(path)?),
        None => None,
    };
    let max_epochs = opts.max_epochs.unwrap_or(tc.max_epochs);
    let mut report = FitReport { epochs: Vec::new(), best_epoch: 0, best_score: f64::NEG_INFINITY, stopped_early: false };
    let mut best_store = model.store.clone();
    let mut since_best = 0;

    for epoch in 0..max_epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut stream(seed, Stream::Shuffle, epoch as u64));
        let mut epoch_parts = LossParts::default();
        for (b, batch) in batches(&lens, &order, tc.max_utterances_in_batch).iter().enumerate() {
            let rng_idx: Vec<u64> = batch.iter().map(|&i| ((epoch as u64) << 32) | i as u64).collect();
            let (grads, parts) = match batch_gradients(model, &prepared, batch, Some(&rng_idx), true) {
                Ok(r) => r,
                Err(ModelError::Nd(crate::nd::NdError::NonFinite { op })) => {
                    log::error!("non-finite value in {op}");
                    return Err(TrainError::NonFinite { epoch, batch: b, norms: norms_summary(&model.store) });
                }
                Err(e) => return Err(e.into()),
            };
            if !parts.joint.is_finite() || !grads.sq_norm().is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b, norms: norms_summary(&model.store) });
            }
            adam.step(&mut model.store, &grads).map_err(ModelError::from)?;
            epoch_parts.add(&parts);
        }
        let mean = epoch_parts.mean();
        let eval = evaluate_prepared(model, &valid_prepared, tc.validate_bleu)?;
        let score = eval.strategy_f1.macro_f1;
        let improved = score > report.best_score;
        if improved {
            report.best_score = score;
            report.best_epoch = epoch;
            best_store = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let row = EpochLog {
            epoch,
            loss_joint: mean.joint,
            loss_nlg: mean.nlg,
            loss_strategy: mean.st,
            loss_act: mean.da,
            loss_outcome: mean.r,
            valid_strategy_macro_f1: score,
            valid_strategy_micro_f1: eval.strategy_f1.micro_f1,
            valid_act_micro_f1: eval.act_f1.micro_f1,
            valid_rc_acc: eval.rc_acc,
            valid_bleu: eval.bleu,
            improved,
        };
        log::info!(
            "epoch {epoch}: joint {:.4} valid strategy macro-F1 {:.4} micro-F1 {:.4}",
            row.loss_joint,
            score,
            row.valid_strategy_micro_f1
        );
        if let Some(w) = log.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        report.epochs.push(row);
        if !opts.no_early_stop && since_best >= tc.patience {
            report.stopped_early = true;
            break;
        }
    }
    model.store = best_store;
    if let Some(path) = &opts.checkpoint {
        model.save(path, Some(&adam), report.best_epoch)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dialogues: usize,
    pub turns: usize,
    pub strategy_f1: F1Scores,
    pub strategy_auc: AucScores,
    pub act_f1: F1Scores,
    pub act_auc: AucScores,
    pub bleu: Option<f64>,
    pub rc_acc: Option<f64>,
}

/// Predictions for every predicted turn of one dialogue, as written to the
/// prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue: u64,
    /// Index of the predicted turn (the model has seen turns before it).
    pub turn: usize,
    pub gold_strategies: Vec<usize>,
    pub predicted_strategies: Vec<usize>,
    pub strategy_probs: Vec<f64>,
    pub gold_act: usize,
    pub predicted_act: usize,
    pub act_probs: Vec<f64>,
    pub gold_outcome: Option<usize>,
    pub predicted_outcome: usize,
    /// Greedy decoder output for seller turns when generation was requested.
    pub generated: Option<Vec<usize>>,
    pub reference: Option<Vec<usize>>,
}

pub fn predict_dialogue(model: &Model, p: &Prepared, generate: bool) -> Result<Vec<TurnRecord>, ModelError> {
    let n = p.predicted_turns();
    let preds = model.predict(p, n)?;
    let mut out = Vec::with_capacity(n);
    for (t, pr) in preds.iter().enumerate() {
        let target = t + 1;
        let gold_strategies = p.strategies[target].iter().copied().filter(|&s| s < N_CONTENT_STRATEGIES).collect();
        let seller = p.speakers[target] == Speaker::Seller;
        let generated = if generate && seller { Some(model.decode(&pr.h)?) } else { None };
        out.push(TurnRecord {
            dialogue: p.id,
            turn: target,
            gold_strategies,
            predicted_strategies: pr.strategies.labels(),
            strategy_probs: pr.strategies.probs.clone(),
            gold_act: p.acts[target],
            predicted_act: argmax(&pr.act_probs),
            act_probs: pr.act_probs.clone(),
            gold_outcome: p.outcome,
            predicted_outcome: argmax(&pr.outcome_probs),
            reference: generated.as_ref().map(|_| p.targets[target].clone()),
            generated,
        });
    }
    Ok(out)
}

pub fn predict_all(model: &Model, prepared: &[Prepared], generate: bool) -> Result<Vec<TurnRecord>, ModelError> {
    let per: Vec<Result<Vec<TurnRecord>, ModelError>> = par::map(prepared, |_, p| predict_dialogue(model, p, generate));
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

pub fn report_from_records(records: &[TurnRecord], dialogues: usize) -> Result<EvalReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let khot = |labels: &[usize]| {
        let mut v = vec![false; N_CONTENT_STRATEGIES];
        for &l in labels {
            v[l] = true;
        }
        v
    };
    let gold_st: Vec<Vec<bool>> = records.iter().map(|r| khot(&r.gold_strategies)).collect();
    let pred_st: Vec<Vec<bool>> = records.iter().map(|r| khot(&r.predicted_strategies)).collect();
    let st_probs: Vec<Vec<f64>> = records.iter().map(|r| r.strategy_probs.clone()).collect();
    let gold_da: Vec<usize> = records.iter().map(|r| r.gold_act).collect();
    let pred_da: Vec<usize> = records.iter().map(|r| r.predicted_act).collect();
    let da_probs: Vec<Vec<f64>> = records.iter().map(|r| r.act_probs.clone()).collect();
    let gold_da_hot = metrics::one_hot(&gold_da, N_ACTS);

    let (hyps, refs): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
        records.iter().filter_map(|r| Some((r.generated.clone()?, r.reference.clone()?))).unzip();
    let bleu = (!hyps.is_empty()).then(|| metrics::corpus_bleu(&hyps, &refs));

    let (pred_r, gold_r): (Vec<usize>, Vec<usize>) =
        records.iter().filter_map(|r| Some((r.predicted_outcome, r.gold_outcome?))).unzip();

    Ok(EvalReport {
        dialogues,
        turns: records.len(),
        strategy_f1: metrics::f1_scores(&gold_st, &pred_st),
        strategy_auc: metrics::auc_scores(&gold_st, &st_probs),
        act_f1: metrics::f1_scores(&gold_da_hot, &metrics::one_hot(&pred_da, N_ACTS)),
        act_auc: metrics::auc_scores(&gold_da_hot, &da_probs),
        bleu,
        rc_acc: metrics::accuracy(&pred_r, &gold_r),
    })
}

fn evaluate_prepared(model: &Model, prepared: &[Prepared], bleu: bool) -> Result<EvalReport, TrainError> {
    let records = predict_all(model, prepared, bleu)?;
    report_from_records(&records, prepared.len())
}

/// Metrics over every predicted turn of `corpus`; BLEU only when `bleu` is set.
pub fn evaluate(model: &Model, corpus: &Corpus, bleu: bool) -> Result<EvalReport, TrainError> {
    let prepared: Vec<Prepared> =
        corpus.dialogues.iter().map(|d| model.prepare(d)).filter(|p| p.predicted_turns() > 0).collect();
    evaluate_prepared(model, &prepared, bleu)
}

/// Writes one JSON object per predicted turn.
pub fn write_predictions(records: &[TurnRecord], mut w: impl Write) -> Result<(), TrainError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| std::io::Error::other(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
