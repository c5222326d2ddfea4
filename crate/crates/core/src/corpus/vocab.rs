use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::price::{self, GRID_SIZE};
use super::{Corpus, Dialogue, DialogueTurn};

pub const START_STRATEGY: &str = "<start>";

/// Content strategies in fixed order, followed by the `<start>` marker.
pub const STRATEGY_LABELS: [&str; 22] = [
    "first_person_singular_count",
    "pos_sentiment",
    "number_of_diff_dic_pos",
    "third_person_singular",
    "hedge_count",
    "number_of_diff_dic_neg",
    "personal_concern",
    "propose",
    "politeness_greet",
    "assertive_count",
    "neg_sentiment",
    "factive_count",
    "politeness_gratitude",
    "first_person_plural_count",
    "liwc_certainty",
    "liwc_informal",
    "third_person_plural",
    "trade_in",
    "politeness_please",
    "family",
    "friend",
    START_STRATEGY,
];

/// Number of predictable strategies (everything but `<start>`).
pub const N_CONTENT_STRATEGIES: usize = 21;

/// Ten utterance acts followed by four outcome acts.
pub const DIALOGUE_ACT_LABELS: [&str; 14] = [
    "intro",
    "inquiry",
    "init-price",
    "counter-price",
    "unknown",
    "agree",
    "disagree",
    "inform",
    "vague-price",
    "insist",
    "<offer>",
    "<accept>",
    "<reject>",
    "<quit>",
];

/// Ordered label set; a label's id is its line number in the vocab file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelVocab {
    fn from(labels: Vec<String>) -> Self {
        let index = labels.iter().cloned().enumerate().map(|(i, l)| (l, i)).collect();
        Self { labels, index }
    }
}

impl From<LabelVocab> for Vec<String> {
    fn from(v: LabelVocab) -> Self {
        v.labels
    }
}

impl LabelVocab {
    pub fn new<S: AsRef<str>>(labels: &[S]) -> Self {
        labels.iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>().into()
    }

    pub fn strategies() -> Self {
        Self::new(&STRATEGY_LABELS)
    }

    pub fn dialogue_acts() -> Self {
        Self::new(&DIALOGUE_ACT_LABELS)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn to_text(&self) -> String {
        let mut s = self.labels.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Self {
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect::<Vec<_>>().into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::from_text(&std::fs::read_to_string(path)?))
    }
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Word vocabulary: special tokens, the 41 price-grid placeholders, then
/// surface words ordered by descending frequency and then lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: LabelVocab,
    /// Distinct raw token types seen in the corpus, prices included.
    pub surface_types: usize,
}

impl TokenVocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;
    pub const GRID_OFFSET: usize = 4;

    pub fn build(corpus: &Corpus) -> Self {
        Self::build_from(corpus.dialogues.iter())
    }

    pub fn build_from<'a>(dialogues: impl Iterator<Item = &'a Dialogue>) -> Self {
        let mut raw: HashMap<&str, ()> = HashMap::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for d in dialogues {
            for turn in &d.turns {
                for (i, tok) in turn.tokens.iter().enumerate() {
                    raw.insert(tok, ());
                    if turn.raw_prices.iter().any(|(p, _)| *p == i) || price::is_placeholder(tok) {
                        continue;
                    }
                    *counts.entry(tok.clone()).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut labels: Vec<String> = [PAD, UNK, BOS, EOS].iter().map(|s| s.to_string()).collect();
        labels.extend((0..GRID_SIZE).map(price::grid_token));
        labels.extend(words.into_iter().map(|(w, _)| w).filter(|w| ![PAD, UNK, BOS, EOS].contains(&w.as_str())));
        Self { tokens: labels.into(), surface_types: raw.len() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.label(id).unwrap_or(UNK)
    }

    pub fn labels(&self) -> &LabelVocab {
        &self.tokens
    }

    pub fn is_grid(&self, id: usize) -> bool {
        (Self::GRID_OFFSET..Self::GRID_OFFSET + GRID_SIZE).contains(&id)
    }

    /// Token ids for a turn, with every price mention mapped onto the grid.
    pub fn encode_turn(&self, turn: &DialogueTurn, listed: f64) -> Vec<usize> {
        turn.tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| match turn.raw_prices.iter().find(|(p, _)| *p == i) {
                Some((_, amount)) => Self::GRID_OFFSET + price::grid_index(amount / listed),
                None => self.id(tok),
            })
            .collect()
    }
}
