//! Dialogue data model, JSONL corpus ingestion, vocabularies and price arithmetic.

pub mod import;
pub mod price;
mod vocab;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use price::{
    compute_ratio, placeholder_to_price, price_to_placeholder, ratio_to_class, RatioBoundaries,
};
pub use vocab::{
    LabelVocab, TokenVocab, DIALOGUE_ACT_LABELS, N_CONTENT_STRATEGIES, START_STRATEGY, STRATEGY_LABELS,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error at record {record}: {message}")]
    Schema { record: usize, message: String },
    #[error("record {record}: unknown {vocab} label {label:?}")]
    UnknownLabel { record: usize, vocab: &'static str, label: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed price placeholder {0:?}")]
    Placeholder(String),
    #[error("fit error: {0}")]
    Fit(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Buyer,
    Seller,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub listed_price: f64,
    pub buyer_target_price: f64,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Scenario {
    pub fn new(listed_price: f64, buyer_target_price: f64, title: impl Into<String>) -> Result<Self, CorpusError> {
        let s = Self { listed_price, buyer_target_price, title: title.into(), description: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.listed_price > 0.0 && self.listed_price.is_finite()) {
            return Err(CorpusError::Domain(format!("listed price must be positive, got {}", self.listed_price)));
        }
        if self.listed_price == self.buyer_target_price {
            return Err(CorpusError::Domain("listed price equals buyer target price".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
    pub tokens: Vec<String>,
    pub dialogue_act: usize,
    /// Sorted, deduplicated strategy ids.
    pub strategies: Vec<usize>,
    /// `(token position, currency amount)` for every price mention.
    pub raw_prices: Vec<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalAction {
    Offer,
    Accept,
    Reject,
    Quit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub sale_price: Option<f64>,
    pub final_action: FinalAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    /// Record index in the source file, counted before filtering.
    pub id: usize,
    pub scenario: Scenario,
    pub turns: Vec<DialogueTurn>,
    pub outcome: Outcome,
}

impl Dialogue {
    /// Sale-to-list ratio, when the dialogue ended in a sale.
    pub fn ratio(&self) -> Option<f64> {
        let sale = self.outcome.sale_price?;
        compute_ratio(sale, self.scenario.buyer_target_price, self.scenario.listed_price).ok()
    }

    pub fn strategy_sets(&self) -> Vec<Vec<usize>> {
        self.turns.iter().map(|t| t.strategies.clone()).collect()
    }

    pub fn dialogue_acts(&self) -> Vec<usize> {
        self.turns.iter().map(|t| t.dialogue_act).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub strategies: LabelVocab,
    pub acts: LabelVocab,
}

impl Default for Corpus {
    fn default() -> Self {
        Self { dialogues: Vec::new(), strategies: LabelVocab::strategies(), acts: LabelVocab::dialogue_acts() }
    }
}

// ---- on-disk record schema -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub speaker: Speaker,
    pub text: String,
    pub tokens: Vec<String>,
    pub dialogue_act: String,
    pub strategies: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub scenario: Scenario,
    pub turns: Vec<TurnRecord>,
    pub outcome: Outcome,
}

static TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<price-\d+\.\d+>|\$\d+(?:,\d{3})*(?:\.\d+)?|\d+(?:\.\d+)?|\w+(?:'\w+)?|[^\w\s]").expect("regex"));

/// Lowercasing word/punctuation tokenizer that keeps `$35` and placeholders whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    TOKEN.find_iter(&lower).map(|m| m.as_str().to_string()).collect()
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    /// Resolves one record against the vocabularies.
    pub fn resolve(&self, record: &DialogueRecord, index: usize) -> Result<Dialogue, CorpusError> {
        record.scenario.validate().map_err(|e| CorpusError::Schema { record: index, message: e.to_string() })?;
        let start = self.strategies.id(START_STRATEGY).expect("vocab has <start>");
        let mut turns = Vec::with_capacity(record.turns.len());
        for (t, tr) in record.turns.iter().enumerate() {
            let dialogue_act = self.acts.id(&tr.dialogue_act).ok_or_else(|| CorpusError::UnknownLabel {
                record: index,
                vocab: "dialogue act",
                label: tr.dialogue_act.clone(),
            })?;
            let mut set = BTreeSet::new();
            for s in &tr.strategies {
                set.insert(self.strategies.id(s).ok_or_else(|| CorpusError::UnknownLabel {
                    record: index,
                    vocab: "strategy",
                    label: s.clone(),
                })?);
            }
            if t == 0 && set.is_empty() {
                set.insert(start);
            }
            let raw_prices = price::extract_prices(&tr.tokens, record.scenario.listed_price);
            turns.push(DialogueTurn {
                speaker: tr.speaker,
                text: tr.text.clone(),
                tokens: tr.tokens.clone(),
                dialogue_act,
                strategies: set.into_iter().collect(),
                raw_prices,
            });
        }
        Ok(Dialogue { id: index, scenario: record.scenario.clone(), turns, outcome: record.outcome.clone() })
    }

    pub fn to_record(&self, d: &Dialogue) -> DialogueRecord {
        DialogueRecord {
            scenario: d.scenario.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| TurnRecord {
                    speaker: t.speaker,
                    text: t.text.clone(),
                    tokens: t.tokens.clone(),
                    dialogue_act: self.acts.label(t.dialogue_act).unwrap_or("unknown").to_string(),
                    strategies: t.strategies.iter().filter_map(|&s| self.strategies.label(s).map(String::from)).collect(),
                })
                .collect(),
            outcome: d.outcome.clone(),
        }
    }

    pub fn from_records(records: &[DialogueRecord], min_turns: usize) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (i, r) in records.iter().enumerate() {
            let d = corpus.resolve(r, i)?;
            if d.turns.len() >= min_turns {
                corpus.dialogues.push(d);
            }
        }
        Ok(corpus)
    }

    pub fn parse_jsonl(reader: impl BufRead, min_turns: usize) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        let mut record = 0;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DialogueRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Schema { record, message: e.to_string() })?;
            let d = corpus.resolve(&r, record)?;
            if d.turns.len() >= min_turns {
                corpus.dialogues.push(d);
            }
            record += 1;
        }
        Ok(corpus)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), CorpusError> {
        for d in &self.dialogues {
            let line = serde_json::to_string(&self.to_record(d)).map_err(|e| CorpusError::Schema {
                record: 0,
                message: e.to_string(),
            })?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Outcome ratios of every dialogue that ended in a sale.
    pub fn ratios(&self) -> Vec<f64> {
        self.dialogues.iter().filter_map(Dialogue::ratio).collect()
    }

    /// Total number of turns.
    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    /// Number of turns carrying each strategy id.
    pub fn strategy_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.strategies.len()];
        for d in &self.dialogues {
            for t in &d.turns {
                for &s in &t.strategies {
                    counts[s] += 1;
                }
            }
        }
        counts
    }
}

/// Loads a JSONL corpus and drops dialogues shorter than `min_turns`.
pub fn load_corpus(path: impl AsRef<Path>, min_turns: usize) -> Result<Corpus, CorpusError> {
    let f = std::fs::File::open(path)?;
    Corpus::parse_jsonl(BufReader::new(f), min_turns)
}
