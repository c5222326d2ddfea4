//! Batch subcommands: train, eval, explain, synth. Every JSON output carries
//! `v` and the `config_hash` of the run configuration it came from.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use negograph::config::Config;
use negograph::corpus::{load_corpus, Corpus, LabelVocab, N_CONTENT_STRATEGIES, STRATEGY_LABELS};
use negograph::interpret::{association_scores, boundary_report, influence_map, to_dot, LabeledTrace};
use negograph::model::Model;
use negograph::synth::{self, SynthConfig};
use negograph::train::metrics::f1_scores;
use negograph::train::{self, EvalReport, F1Scores, FitOptions, TurnRecord};
use serde::{Deserialize, Serialize};

use crate::args::{Common, EvalArgs, ExplainArgs, SynthArgs, TrainArgs};

/// Version of every JSON document the CLI writes.
pub const OUTPUT_VERSION: u32 = 1;

pub fn resolve_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(v) = c.variant {
        cfg.variant = v.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating output directory {}", p.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(path: &Path, min_turns: usize) -> Result<Corpus> {
    load_corpus(path, min_turns).with_context(|| format!("loading corpus {}", path.display()))
}

#[derive(Serialize, Deserialize)]
pub struct RunSummary {
    pub v: u32,
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub train_dialogues: usize,
    pub valid_dialogues: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    let hash = cfg.hash();
    let train_c = load_split(&a.corpus.join("train.jsonl"), cfg.train.min_turns)?;
    let valid_c = load_split(&a.corpus.join("valid.jsonl"), cfg.train.min_turns)?;
    ensure!(!train_c.is_empty(), "no training dialogues with at least {} turns", cfg.train.min_turns);
    ensure!(!valid_c.is_empty(), "no validation dialogues with at least {} turns", cfg.train.min_turns);
    out_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    log::info!("config {hash}: {} train / {} valid dialogues", train_c.len(), valid_c.len());

    let mut model = train::model_for_corpus(cfg.clone(), &train_c)?;
    let opts = FitOptions {
        log_csv: Some(a.out.join("train_log.csv")),
        checkpoint: Some(a.out.join("checkpoint.json")),
        max_epochs: a.max_epochs,
        no_early_stop: a.no_early_stop,
    };
    let report = train::fit(&mut model, &train_c, &valid_c, &opts)?;
    let summary = RunSummary {
        v: OUTPUT_VERSION,
        config_hash: hash,
        seed: cfg.seed,
        variant: cfg.variant.to_string(),
        train_dialogues: train_c.len(),
        valid_dialogues: valid_c.len(),
        epochs: report.epochs.len(),
        best_epoch: report.best_epoch,
        best_score: report.best_score,
        stopped_early: report.stopped_early,
    };
    write_json(&a.out.join("run.json"), &summary)?;
    println!(
        "trained {} epochs, best epoch {} (score {:.4}); outputs in {}",
        summary.epochs,
        summary.best_epoch,
        summary.best_score,
        a.out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsetScores {
    pub labels: Vec<String>,
    pub f1: F1Scores,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSource {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub v: u32,
    pub config_hash: String,
    pub source: EvalSource,
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_subset: Option<SubsetScores>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracesFile {
    pub v: u32,
    pub config_hash: String,
    pub traces: Vec<LabeledTrace>,
}

fn subset_ids(labels: &[String]) -> Result<Vec<usize>> {
    let vocab = LabelVocab::strategies();
    labels
        .iter()
        .map(|l| match vocab.id(l) {
            Some(i) if i < N_CONTENT_STRATEGIES => Ok(i),
            _ => bail!("unknown strategy label {l:?}"),
        })
        .collect()
}

/// F1 over the chosen strategy columns only.
pub fn subset_scores(records: &[TurnRecord], ids: &[usize]) -> F1Scores {
    let pick = |labels: &[usize]| ids.iter().map(|c| labels.contains(c)).collect::<Vec<bool>>();
    let gold: Vec<Vec<bool>> = records.iter().map(|r| pick(&r.gold_strategies)).collect();
    let pred: Vec<Vec<bool>> = records.iter().map(|r| pick(&r.predicted_strategies)).collect();
    f1_scores(&gold, &pred)
}

fn read_predictions(path: &Path) -> Result<Vec<TurnRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TurnRecord =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        ensure!(
            r.strategy_probs.len() == N_CONTENT_STRATEGIES,
            "{} line {}: expected {N_CONTENT_STRATEGIES} strategy probabilities",
            path.display(),
            i + 1
        );
        out.push(r);
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ids = subset_ids(&a.strategy_labels)?;
    out_dir(&a.out)?;
    let (records, dialogues, hash, source, traces) = if let Some(pred) = &a.predictions {
        let cfg = resolve_config(&a.common)?;
        let records = read_predictions(pred)?;
        let dialogues = records.iter().map(|r| r.dialogue).collect::<BTreeSet<_>>().len();
        let source = EvalSource { checkpoint: None, corpus: None, predictions: Some(pred.clone()) };
        (records, dialogues, cfg.hash(), source, None)
    } else {
        let ck = a.checkpoint.as_ref().expect("clap requires a source");
        let corpus_path = a.corpus.as_ref().expect("clap requires corpus with checkpoint");
        let (model, checkpoint) =
            Model::load(ck).with_context(|| format!("loading checkpoint {}", ck.display()))?;
        let path = if corpus_path.is_dir() { corpus_path.join(a.split.file()) } else { corpus_path.clone() };
        let corpus = load_split(&path, model.config.train.min_turns)?;
        let prepared: Vec<_> =
            corpus.dialogues.iter().map(|d| model.prepare(d)).filter(|p| p.predicted_turns() > 0).collect();
        ensure!(!prepared.is_empty(), "no dialogues to evaluate in {}", path.display());
        let records = train::predict_all(&model, &prepared, a.bleu)?;
        let mut traces = Vec::new();
        for p in &prepared {
            if let Some(t) = negograph::interpret::trace_dialogue(&model, p)? {
                traces.push(t);
            }
        }
        let source = EvalSource { checkpoint: Some(ck.clone()), corpus: Some(path), predictions: None };
        (records, prepared.len(), checkpoint.config_hash, source, Some(traces))
    };

    let report = train::report_from_records(&records, dialogues)?;
    let strategy_subset = (!ids.is_empty()).then(|| SubsetScores {
        labels: ids.iter().map(|&i| STRATEGY_LABELS[i].to_string()).collect(),
        f1: subset_scores(&records, &ids),
    });
    let metrics = MetricsFile { v: OUTPUT_VERSION, config_hash: hash.clone(), source, report, strategy_subset };
    write_json(&a.out.join("metrics.json"), &metrics)?;
    if let Some(traces) = traces {
        let mut w = BufWriter::new(File::create(a.out.join("predictions.jsonl"))?);
        train::write_predictions(&records, &mut w)?;
        w.flush()?;
        write_json(&a.out.join("traces.json"), &TracesFile { v: OUTPUT_VERSION, config_hash: hash, traces })?;
    }
    let r = &metrics.report;
    println!(
        "{} dialogues, {} turns: strategy micro-F1 {:.4} macro-F1 {:.4}, act micro-F1 {:.4}",
        r.dialogues, r.turns, r.strategy_f1.micro_f1, r.strategy_f1.macro_f1, r.act_f1.micro_f1
    );
    if let Some(s) = &metrics.strategy_subset {
        println!("subset {:?}: micro-F1 {:.4}", s.labels, s.f1.micro_f1);
    }
    Ok(())
}

#[derive(Serialize)]
struct ExplainSummary {
    v: u32,
    config_hash: String,
    dialogues: usize,
    boundary_label: String,
    files: Vec<String>,
}

#[derive(Serialize)]
struct InfluenceLine<'a> {
    dialogue: u64,
    target: usize,
    target_turn: usize,
    target_label: &'a str,
    map: negograph::interpret::InfluenceMap,
}

pub fn explain(a: &ExplainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.traces).with_context(|| format!("reading {}", a.traces.display()))?;
    let tf: TracesFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.traces.display()))?;
    ensure!(tf.v == OUTPUT_VERSION, "unsupported trace file version {}", tf.v);
    let vocab = LabelVocab::strategies();
    let boundary = vocab.id(&a.boundary).with_context(|| format!("unknown boundary label {:?}", a.boundary))?;
    out_dir(&a.out)?;
    let mut files = Vec::new();

    let table = association_scores(&tf.traces, &vocab)?;
    table.write_csv(BufWriter::new(File::create(a.out.join("association.csv"))?))?;
    files.push("association.csv".to_string());

    let mut w = BufWriter::new(File::create(a.out.join("influence.jsonl"))?);
    for lt in &tf.traces {
        let Some(first) = lt.trace.layers.first() else { continue };
        // Nodes of the first turn only attend to themselves.
        let targets: BTreeSet<usize> = first.alpha.iter().filter(|e| e.src != e.dst).map(|e| e.dst).collect();
        for target in targets {
            let node = lt.nodes.get(target).with_context(|| format!("dialogue {}: node {target} missing", lt.dialogue))?;
            let line = InfluenceLine {
                dialogue: lt.dialogue,
                target,
                target_turn: node.turn,
                target_label: vocab.label(node.label).unwrap_or("?"),
                map: influence_map(&lt.trace, target)?,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    files.push("influence.jsonl".to_string());

    write_json(&a.out.join("boundary.json"), &boundary_report(&tf.traces, boundary))?;
    files.push("boundary.json".to_string());

    for lt in tf.traces.iter().take(a.dot_limit) {
        let name = format!("dialogue-{}.dot", lt.dialogue);
        fs::write(a.out.join(&name), to_dot(lt, &vocab, a.dot_edges))?;
        files.push(name);
    }
    let summary = ExplainSummary {
        v: OUTPUT_VERSION,
        config_hash: tf.config_hash,
        dialogues: tf.traces.len(),
        boundary_label: a.boundary.clone(),
        files,
    };
    write_json(&a.out.join("explain.json"), &summary)?;
    println!("explained {} dialogues into {}", summary.dialogues, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct RuleView {
    trigger: String,
    consequence: String,
    lag: usize,
    probability: f64,
}

#[derive(Serialize)]
struct SynthSummary {
    v: u32,
    config_hash: String,
    seed: u64,
    dialogues: usize,
    turns: usize,
    noise_rate: f64,
    rules: Vec<RuleView>,
    splits: [usize; 3],
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(&a.common)?;
    let sc = SynthConfig {
        dialogues: a.dialogues,
        turns: a.turns,
        noise_rate: a.noise_rate,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let corpus = synth::generate(&sc)?;
    let (tr, va, te) = synth::split(&corpus);
    out_dir(&a.out)?;
    for (c, name) in [(&tr, "train.jsonl"), (&va, "valid.jsonl"), (&te, "test.jsonl")] {
        c.save(a.out.join(name)).with_context(|| format!("writing {name}"))?;
    }
    let summary = SynthSummary {
        v: OUTPUT_VERSION,
        config_hash: cfg.hash(),
        seed: sc.seed,
        dialogues: sc.dialogues,
        turns: sc.turns,
        noise_rate: sc.noise_rate,
        rules: sc
            .rules
            .iter()
            .map(|r| RuleView {
                trigger: STRATEGY_LABELS[r.trigger].to_string(),
                consequence: STRATEGY_LABELS[r.consequence].to_string(),
                lag: r.lag,
                probability: r.probability,
            })
            .collect(),
        splits: [tr.len(), va.len(), te.len()],
    };
    write_json(&a.out.join("synth.json"), &summary)?;
    println!("wrote {}/{}/{} dialogues to {}", tr.len(), va.len(), te.len(), a.out.display());
    Ok(())
}
