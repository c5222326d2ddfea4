//! Run configuration, read from TOML. Key names follow the usual
//! hyperparameter table (lr, l2, pooling ratio, loss alpha/beta/gamma, ...).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Structure-encoder variant; `rnn` and `none` are the ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Graph,
    Rnn,
    None,
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graph" => Ok(Self::Graph),
            "rnn" => Ok(Self::Rnn),
            "none" => Ok(Self::None),
            other => Err(ConfigError::Invalid(format!("unknown variant {other:?} (graph, rnn, none)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Graph => "graph",
            Self::Rnn => "rnn",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtteranceMode {
    Trainable,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub utterance_encoder: UtteranceMode,
    /// Binary embedding table used when `utterance_encoder = "external"`.
    pub external_embeddings: Option<String>,
    pub word_embedding: usize,
    pub dialogue_context_embedding: usize,
    pub dialogue_context_dropout: f64,
    pub context_hidden: usize,
    pub hidden_dim: usize,
    pub graph_layers: usize,
    pub graph_dropout: f64,
    pub asap_pooling_ratio: f64,
    pub projection_strategy: usize,
    pub projection_da: usize,
    pub rnn_hidden_size: usize,
    pub decoder_embedding: usize,
    pub decoder_hidden: usize,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            utterance_encoder: UtteranceMode::Trainable,
            external_embeddings: None,
            word_embedding: 64,
            dialogue_context_embedding: 300,
            dialogue_context_dropout: 0.1,
            context_hidden: 64,
            hidden_dim: 64,
            graph_layers: 2,
            graph_dropout: 0.0,
            asap_pooling_ratio: 0.8,
            projection_strategy: 64,
            projection_da: 64,
            rnn_hidden_size: 64,
            decoder_embedding: 64,
            decoder_hidden: 64,
            max_decode_len: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decoupled weight decay.
    pub l2: f64,
    pub max_utterances_in_batch: usize,
    pub weighted_strategy_loss: bool,
    pub loss_alpha: f64,
    pub loss_beta: f64,
    pub loss_gamma: f64,
    /// Include the decoder's generation loss in the joint objective.
    pub generation_loss: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_turns: usize,
    /// Compute BLEU on the validation split after every epoch (slow).
    pub validate_bleu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            l2: 1e-3,
            max_utterances_in_batch: 128,
            weighted_strategy_loss: true,
            loss_alpha: 1.0,
            loss_beta: 10.0,
            loss_gamma: 10.0,
            generation_loss: true,
            max_epochs: 200,
            patience: 10,
            min_turns: 5,
            validate_bleu: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self { seed: 17, variant: Variant::Graph, model: ModelConfig::default(), train: TrainConfig::default() }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if !(m.asap_pooling_ratio > 0.0 && m.asap_pooling_ratio <= 1.0) {
            return bad("asap_pooling_ratio must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&m.dialogue_context_dropout) || !(0.0..1.0).contains(&m.graph_dropout) {
            return bad("dropout rates must be in [0, 1)");
        }
        if m.graph_layers == 0 {
            return bad("graph_layers must be at least 1");
        }
        let dims = [
            m.word_embedding,
            m.dialogue_context_embedding,
            m.context_hidden,
            m.hidden_dim,
            m.projection_strategy,
            m.projection_da,
            m.rnn_hidden_size,
            m.decoder_embedding,
            m.decoder_hidden,
        ];
        if dims.contains(&0) {
            return bad("dimensions must be positive");
        }
        if m.utterance_encoder == UtteranceMode::External && m.external_embeddings.is_none() {
            return bad("external utterance encoder needs external_embeddings");
        }
        if [t.loss_alpha, t.loss_beta, t.loss_gamma].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be nonnegative");
        }
        if !(t.lr > 0.0) || !(t.l2 >= 0.0) || t.max_utterances_in_batch == 0 {
            return bad("lr must be positive, l2 nonnegative, batch cap positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_table() {
        let c = Config::default();
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.l2, 1e-3);
        assert_eq!(c.train.max_utterances_in_batch, 128);
        assert_eq!((c.train.loss_alpha, c.train.loss_beta, c.train.loss_gamma), (1.0, 10.0, 10.0));
        assert_eq!(c.model.asap_pooling_ratio, 0.8);
        assert_eq!(c.model.graph_layers, 2);
        assert_eq!(c.model.hidden_dim, 64);
        assert_eq!(c.model.dialogue_context_embedding, 300);
        assert_eq!(c.model.dialogue_context_dropout, 0.1);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        let partial = Config::from_toml("seed = 3\nvariant = \"rnn\"\n[train]\nlr = 0.005\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.variant, Variant::Rnn);
        assert_eq!(partial.train.lr, 0.005);
        assert_eq!(partial.train.patience, 10);
        assert!(Config::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(Config::from_toml("[model]\nasap_pooling_ratio = 0.0\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
