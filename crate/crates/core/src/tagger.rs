//! Keyword tagger for buyer turns typed live. Rules come from a TOML table;
//! the shipped table is `data/tagger.toml`.

use regex::{Regex, RegexBuilder};
use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{LabelVocab, DIALOGUE_ACT_LABELS};

pub const DEFAULT_TABLE: &str = include_str!("../data/tagger.toml");

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("tag table parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown label {0:?}")]
    Label(String),
    #[error("bad pattern {pattern:?}: {source}")]
    Pattern { pattern: String, source: regex::Error },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Table {
    rule: Vec<RuleSpec>,
    acts: ActSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    label: String,
    patterns: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActSpec {
    greeting: String,
    question: String,
    first_price: String,
    later_price: String,
    agreement: String,
    disagreement: String,
    fallback: String,
    agree_patterns: Vec<String>,
    disagree_patterns: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Tagger {
    rules: Vec<(usize, Vec<Regex>)>,
    greet: usize,
    acts: Acts,
    agree: Vec<Regex>,
    disagree: Vec<Regex>,
}

#[derive(Clone, Copy, Debug)]
struct Acts {
    greeting: usize,
    question: usize,
    first_price: usize,
    later_price: usize,
    agreement: usize,
    disagreement: usize,
    fallback: usize,
}

fn compile(patterns: &[String]) -> Result<Vec<Regex>, TaggerError> {
    patterns
        .iter()
        .map(|p| {
            RegexBuilder::new(p)
                .case_insensitive(true)
                .build()
                .map_err(|source| TaggerError::Pattern { pattern: p.clone(), source })
        })
        .collect()
}

/// What the tagger read from one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tags {
    /// Sorted strategy ids.
    pub strategies: Vec<usize>,
    pub act: usize,
}

impl Tagger {
    pub fn from_toml(text: &str) -> Result<Self, TaggerError> {
        let table: Table = toml::from_str(text)?;
        let strategies = LabelVocab::strategies();
        let sid = |l: &str| strategies.id(l).ok_or_else(|| TaggerError::Label(l.to_string()));
        let aid = |l: &str| {
            DIALOGUE_ACT_LABELS.iter().position(|a| *a == l).ok_or_else(|| TaggerError::Label(l.to_string()))
        };
        let mut rules = Vec::with_capacity(table.rule.len());
        for r in &table.rule {
            rules.push((sid(&r.label)?, compile(&r.patterns)?));
        }
        let a = &table.acts;
        Ok(Self {
            rules,
            greet: sid("politeness_greet")?,
            acts: Acts {
                greeting: aid(&a.greeting)?,
                question: aid(&a.question)?,
                first_price: aid(&a.first_price)?,
                later_price: aid(&a.later_price)?,
                agreement: aid(&a.agreement)?,
                disagreement: aid(&a.disagreement)?,
                fallback: aid(&a.fallback)?,
            },
            agree: compile(&a.agree_patterns)?,
            disagree: compile(&a.disagree_patterns)?,
        })
    }

    pub fn strategies(&self, text: &str) -> Vec<usize> {
        let mut out: Vec<usize> =
            self.rules.iter().filter(|(_, ps)| ps.iter().any(|p| p.is_match(text))).map(|(l, _)| *l).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// `price_seen` tells whether an earlier turn already mentioned a price.
    pub fn tag(&self, text: &str, price_seen: bool) -> Tags {
        let strategies = self.strategies(text);
        let has = |l: usize| strategies.contains(&l);
        let a = self.acts;
        let mentions_price = crate::corpus::tokenize(text).iter().any(|t| crate::corpus::price::currency_amount(t).is_some());
        let act = if mentions_price {
            if price_seen {
                a.later_price
            } else {
                a.first_price
            }
        } else if has(self.greet) {
            a.greeting
        } else if text.trim_end().ends_with('?') {
            a.question
        } else if self.disagree.iter().any(|p| p.is_match(text)) {
            a.disagreement
        } else if self.agree.iter().any(|p| p.is_match(text)) {
            a.agreement
        } else {
            a.fallback
        };
        Tags { strategies, act }
    }
}

impl Default for Tagger {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TABLE).expect("shipped tag table is valid")
    }
}
