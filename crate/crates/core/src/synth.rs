//! Synthetic corpora with planted strategy dependencies.
//!
//! Every dialogue carries one rule (rules are assigned round-robin). The
//! rule's trigger is placed once at a random turn `t`, and the consequence is
//! added at `t + lag` with the rule's probability. Noise labels are drawn only
//! from strategies that no rule uses, so the consequence is the only label
//! predictable from history.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    tokenize, Corpus, CorpusError, DialogueRecord, FinalAction, Outcome, Scenario, Speaker, TurnRecord,
    DIALOGUE_ACT_LABELS, N_CONTENT_STRATEGIES, STRATEGY_LABELS,
};
use crate::nd::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid rule: {0}")]
    Rule(String),
    #[error("invalid synth setting: {0}")]
    Setting(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantRule {
    pub trigger: usize,
    pub consequence: usize,
    pub lag: usize,
    pub probability: f64,
}

impl PlantRule {
    pub fn deterministic(trigger: &str, consequence: &str) -> Self {
        let id = |s: &str| STRATEGY_LABELS.iter().position(|l| *l == s).unwrap_or(usize::MAX);
        Self { trigger: id(trigger), consequence: id(consequence), lag: 1, probability: 1.0 }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.trigger >= N_CONTENT_STRATEGIES || self.consequence >= N_CONTENT_STRATEGIES {
            return Err(SynthError::Rule(format!("labels {} -> {} out of range", self.trigger, self.consequence)));
        }
        if self.trigger == self.consequence {
            return Err(SynthError::Rule("trigger equals consequence".into()));
        }
        if self.lag == 0 || !(0.0..=1.0).contains(&self.probability) {
            return Err(SynthError::Rule("lag must be >= 1 and probability in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rules: Vec<PlantRule>,
    pub dialogues: usize,
    pub turns: usize,
    /// Per-turn probability of one extra noise label.
    pub noise_rate: f64,
    /// Probability that a strategy's cue word appears in the utterance text.
    pub cue_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rules: default_rules(),
            dialogues: 500,
            turns: 8,
            noise_rate: 0.05,
            cue_rate: 0.25,
            seed: 7,
        }
    }
}

/// Three deterministic lag-1 rules over six distinct strategies.
pub fn default_rules() -> Vec<PlantRule> {
    vec![
        PlantRule::deterministic("propose", "politeness_gratitude"),
        PlantRule::deterministic("trade_in", "liwc_certainty"),
        PlantRule::deterministic("family", "personal_concern"),
    ]
}

const CUES: [&str; 21] = [
    "i", "great", "sure", "he", "maybe", "bad", "need", "offer", "hello", "definitely", "sadly", "actually",
    "thanks", "we", "certainly", "yeah", "they", "swap", "please", "kids", "buddy",
];

const FILLER: [&str; 29] = [
    "the", "a", "it", "is", "this", "that", "bike", "table", "phone", "price", "item", "good", "condition", "new",
    "used", "still", "have", "can", "do", "you", "about", "for", "and", "with", "pick", "up", "today", "works",
    "ok",
];

const ACT_PATTERN: [&str; 8] =
    ["intro", "inquiry", "inform", "init-price", "counter-price", "vague-price", "insist", "agree"];

/// Ratio used for dialogues of each outcome class; classes cycle so they are balanced.
const CLASS_RATIOS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

pub fn generate(config: &SynthConfig) -> Result<Corpus, SynthError> {
    let records = generate_records(config)?;
    Ok(Corpus::from_records(&records, 0)?)
}

pub fn generate_records(config: &SynthConfig) -> Result<Vec<DialogueRecord>, SynthError> {
    for r in &config.rules {
        r.validate()?;
        if r.lag + 1 >= config.turns {
            return Err(SynthError::Setting(format!("lag {} does not fit in {} turns", r.lag, config.turns)));
        }
    }
    if config.turns < 2 {
        return Err(SynthError::Setting("need at least two turns".into()));
    }
    if !(0.0..=1.0).contains(&config.noise_rate) || !(0.0..=1.0).contains(&config.cue_rate) {
        return Err(SynthError::Setting("rates must be in [0, 1]".into()));
    }
    let used: Vec<usize> = config.rules.iter().flat_map(|r| [r.trigger, r.consequence]).collect();
    let noise_pool: Vec<usize> = (0..N_CONTENT_STRATEGIES).filter(|s| !used.contains(s)).collect();
    let mut rng = stream(config.seed, Stream::Synth, 0);
    let mut out = Vec::with_capacity(config.dialogues);
    for i in 0..config.dialogues {
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); config.turns];
        if !config.rules.is_empty() {
            let rule = &config.rules[i % config.rules.len()];
            let t = rng.random_range(1..config.turns - rule.lag);
            sets[t].push(rule.trigger);
            if rng.random_bool(rule.probability) {
                sets[t + rule.lag].push(rule.consequence);
            }
        }
        for set in sets.iter_mut().skip(1) {
            if !noise_pool.is_empty() && rng.random_bool(config.noise_rate) {
                let n = *noise_pool.choose(&mut rng).expect("non-empty pool");
                if !set.contains(&n) {
                    set.push(n);
                }
            }
        }
        let turns = sets
            .iter()
            .enumerate()
            .map(|(t, set)| {
                let mut words: Vec<&str> = (0..rng.random_range(3..7)).map(|_| *FILLER.choose(&mut rng).expect("filler")).collect();
                for &s in set {
                    if rng.random_bool(config.cue_rate) {
                        let at = rng.random_range(0..=words.len());
                        words.insert(at, CUES[s]);
                    }
                }
                let text = words.join(" ");
                TurnRecord {
                    speaker: if t % 2 == 0 { Speaker::Buyer } else { Speaker::Seller },
                    tokens: tokenize(&text),
                    text,
                    dialogue_act: ACT_PATTERN[t % ACT_PATTERN.len()].to_string(),
                    strategies: set.iter().map(|&s| STRATEGY_LABELS[s].to_string()).collect(),
                }
            })
            .collect();
        let (listed, target) = (100.0, 70.0);
        let ratio = CLASS_RATIOS[i % CLASS_RATIOS.len()];
        out.push(DialogueRecord {
            scenario: Scenario::new(listed, target, "item")?,
            turns,
            outcome: Outcome { sale_price: Some(target + ratio * (listed - target)), final_action: FinalAction::Accept },
        });
    }
    debug_assert!(DIALOGUE_ACT_LABELS.len() >= ACT_PATTERN.len());
    Ok(out)
}

/// Splits into train/valid/test by dialogue index modulo 10 (8/1/1).
pub fn split(corpus: &Corpus) -> (Corpus, Corpus, Corpus) {
    let mut parts = [Corpus::default(), Corpus::default(), Corpus::default()];
    for (i, d) in corpus.dialogues.iter().enumerate() {
        let k = match i % 10 {
            8 => 1,
            9 => 2,
            _ => 0,
        };
        parts[k].dialogues.push(d.clone());
    }
    let [a, b, c] = parts;
    (a, b, c)
}
