//! Trains the graph and `none` variants on a synthetic corpus with planted
//! lag-1 strategy rules and reports held-out consequence micro-F1 and how
//! often the trigger is the strongest influence on its consequence.
//!
//! `cargo run --release --example planted -- [epochs]`

use std::time::Instant;

use negograph::config::{Config, Variant};
use negograph::interpret::{influence_map, trace_dialogue};
use negograph::synth::{self, SynthConfig};
use negograph::train::{self, metrics, FitOptions};

fn config(variant: Variant) -> Config {
    let mut c = Config { variant, seed: 5, ..Config::default() };
    let m = &mut c.model;
    m.word_embedding = 16;
    m.dialogue_context_embedding = 16;
    m.context_hidden = 16;
    m.hidden_dim = 16;
    m.projection_strategy = 16;
    m.projection_da = 16;
    m.rnn_hidden_size = 16;
    m.decoder_embedding = 8;
    m.decoder_hidden = 16;
    c.train.lr = 0.01;
    c
}

fn main() {
    env_logger::init();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let cfg = SynthConfig::default();
    let corpus = synth::generate(&cfg).expect("synth");
    let (train_c, valid_c, test_c) = synth::split(&corpus);
    let consequences: Vec<usize> = cfg.rules.iter().map(|r| r.consequence).collect();
    for variant in [Variant::Graph, Variant::None] {
        let start = Instant::now();
        let mut model = train::model_for_corpus(config(variant), &train_c).expect("model");
        let report = train::fit(&mut model, &train_c, &valid_c, &FitOptions { max_epochs: Some(epochs), ..Default::default() })
            .expect("fit");
        let prepared: Vec<_> = test_c.dialogues.iter().map(|d| model.prepare(d)).collect();
        let records = train::predict_all(&model, &prepared, false).expect("predict");
        let pick = |labels: &[usize]| consequences.iter().map(|c| labels.contains(c)).collect::<Vec<bool>>();
        let gold: Vec<Vec<bool>> = records.iter().map(|r| pick(&r.gold_strategies)).collect();
        let pred: Vec<Vec<bool>> = records.iter().map(|r| pick(&r.predicted_strategies)).collect();
        let f1 = metrics::f1_scores(&gold, &pred);
        let (mut hits, mut total) = (0, 0);
        for p in &prepared {
            let Some(lt) = trace_dialogue(&model, p).expect("trace") else { continue };
            for rule in &cfg.rules {
                for (i, n) in lt.nodes.iter().enumerate() {
                    if n.label != rule.consequence {
                        continue;
                    }
                    total += 1;
                    let trig = lt.nodes.iter().position(|m| m.label == rule.trigger && m.turn + rule.lag == n.turn);
                    let map = influence_map(&lt.trace, i).expect("map");
                    if !map.uninformative && trig.is_some_and(|t| map.strongest().contains(&t)) {
                        hits += 1;
                    }
                }
            }
        }
        println!(
            "{variant}: epochs {} best {} micro-F1 {:.4} influence {}/{} time {:.1}s",
            report.epochs.len(),
            report.best_epoch,
            f1.micro_f1,
            hits,
            total,
            start.elapsed().as_secs_f64()
        );
        for e in report.epochs.iter().step_by(5) {
            println!("  {} joint {:.3} st {:.3} valid macro {:.3} micro {:.3}", e.epoch, e.loss_joint, e.loss_strategy, e.valid_strategy_macro_f1, e.valid_strategy_micro_f1);
        }
    }
}
