//! The joint model: utterance and context encoders, structure encoders for
//! strategies and dialogue acts, the prediction heads and the decoder.
//!
//! Turn `t` produces `h_t = [h_t^u ; h_t^ST ; h_t^da]` from the prefix
//! `0..=t`; the heads read it to predict turn `t + 1`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, ConfigError, UtteranceMode, Variant};
use crate::corpus::{
    Corpus, Dialogue, RatioBoundaries, Speaker, TokenVocab, DIALOGUE_ACT_LABELS, N_CONTENT_STRATEGIES,
    STRATEGY_LABELS,
};
use crate::dialenc::{
    ContextEncoderParams, EmbeddingError, EmbeddingTable, EncodeError, UtteranceEncoderParams, UtteranceSource,
};
use crate::gnn::{AttentionTrace, StructureEncoderParams};
use crate::graphbuild::{build_da_graph, build_graph, GraphError, StrategyGraph};
use crate::heads::{softmax, DecoderParams, LinearHead, StrategyPrediction};
use crate::nd::rng::{stream, Rng, Stream};
use crate::nd::{AdamState, GruParams, NdError, ParamStore, Tape, Tensor, Var};

pub const N_STRATEGIES: usize = STRATEGY_LABELS.len();
pub const N_ACTS: usize = DIALOGUE_ACT_LABELS.len();
pub const N_OUTCOME_CLASSES: usize = 5;
/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Positive-class weights `delta` for the 21 content strategies and class
/// weights `rho` for the 14 dialogue acts, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub delta: Vec<f64>,
    pub rho: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self { delta: vec![1.0; N_CONTENT_STRATEGIES], rho: vec![1.0; N_ACTS] }
    }

    /// `delta_j = (#utterances without j) / (#utterances with j)`;
    /// `rho_c = U / (C * n_c)` over the `C` acts that occur. Labels that never
    /// occur get weight 1.
    pub fn fit(train: &Corpus, weighted_strategies: bool) -> Self {
        let total = train.utterance_count();
        let counts = train.strategy_counts();
        let delta = (0..N_CONTENT_STRATEGIES)
            .map(|j| match counts.get(j).copied().unwrap_or(0) {
                0 => 1.0,
                n if weighted_strategies => (total - n) as f64 / n as f64,
                _ => 1.0,
            })
            .collect();
        let mut acts = [0usize; N_ACTS];
        for d in &train.dialogues {
            for t in &d.turns {
                acts[t.dialogue_act] += 1;
            }
        }
        let present = acts.iter().filter(|&&n| n > 0).count().max(1);
        let rho = acts.iter().map(|&n| if n == 0 { 1.0 } else { total as f64 / (present * n) as f64 }).collect();
        Self { delta, rho }
    }
}

/// A dialogue with token ids and targets resolved once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: u64,
    pub listed: f64,
    /// Encoder input per turn; never empty (an empty turn is a single pad token).
    pub inputs: Vec<Vec<usize>>,
    /// Decoder targets per turn (possibly empty).
    pub targets: Vec<Vec<usize>>,
    pub strategies: Vec<Vec<usize>>,
    pub acts: Vec<usize>,
    pub speakers: Vec<Speaker>,
    /// Outcome class in `0..5` when the dialogue ended in a sale.
    pub outcome: Option<usize>,
}

impl Prepared {
    pub fn new(d: &Dialogue, vocab: &TokenVocab, boundaries: Option<&RatioBoundaries>) -> Self {
        let targets: Vec<Vec<usize>> =
            d.turns.iter().map(|t| vocab.encode_turn(t, d.scenario.listed_price)).collect();
        let inputs =
            targets.iter().map(|t| if t.is_empty() { vec![TokenVocab::PAD_ID] } else { t.clone() }).collect();
        Self {
            id: d.id as u64,
            listed: d.scenario.listed_price,
            inputs,
            targets,
            strategies: d.strategy_sets(),
            acts: d.dialogue_acts(),
            speakers: d.turns.iter().map(|t| t.speaker).collect(),
            outcome: boundaries.and_then(|b| d.ratio().map(|r| b.class_of(r) - 1)),
        }
    }

    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    /// Number of turns that serve as prediction targets.
    pub fn predicted_turns(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn content_khot(&self, turn: usize) -> Vec<bool> {
        let mut k = vec![false; N_CONTENT_STRATEGIES];
        for &s in &self.strategies[turn] {
            if s < N_CONTENT_STRATEGIES {
                k[s] = true;
            }
        }
        k
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Structure {
    Graph { st: StructureEncoderParams, da: StructureEncoderParams },
    Rnn { st: GruParams, da: GruParams },
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Parts {
    utterance: Option<UtteranceEncoderParams>,
    context: ContextEncoderParams,
    structure: Structure,
    strategy_head: LinearHead,
    act_head: LinearHead,
    outcome_head: LinearHead,
    decoder: DecoderParams,
}

/// Outputs of one encoded turn.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub h: Var,
    pub st_logits: Var,
    pub da_logits: Var,
    pub outcome_logits: Var,
}

/// Per-part loss sums for one dialogue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub nlg: f64,
    pub st: f64,
    pub da: f64,
    pub r: f64,
    pub joint: f64,
    /// Predicted turns contributing to the sums.
    pub turns: usize,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.nlg += o.nlg;
        self.st += o.st;
        self.da += o.da;
        self.r += o.r;
        self.joint += o.joint;
        self.turns += o.turns;
    }

    pub fn mean(&self) -> LossParts {
        let n = self.turns.max(1) as f64;
        LossParts {
            nlg: self.nlg / n,
            st: self.st / n,
            da: self.da / n,
            r: self.r / n,
            joint: self.joint / n,
            turns: self.turns,
        }
    }
}

/// Value-only prediction for one turn (predicting the following turn).
#[derive(Clone, Debug, PartialEq)]
pub struct TurnPrediction {
    pub strategies: StrategyPrediction,
    pub act_probs: Vec<f64>,
    pub outcome_probs: Vec<f64>,
    pub h: Tensor,
}

pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub vocab: TokenVocab,
    pub boundaries: Option<RatioBoundaries>,
    pub weights: ClassWeights,
    parts: Parts,
    external: Option<Arc<EmbeddingTable>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            vocab: self.vocab.clone(),
            boundaries: self.boundaries.clone(),
            weights: self.weights.clone(),
            parts: self.parts.clone(),
            external: self.external.clone(),
        }
    }
}

impl Model {
    /// Fresh parameters. Each component draws from its own seeded stream, so
    /// variants that share a component share its initialization.
    pub fn new(config: Config, vocab: TokenVocab) -> Result<Self, ModelError> {
        config.validate()?;
        let external = match config.model.utterance_encoder {
            UtteranceMode::Trainable => None,
            UtteranceMode::External => {
                let path = config.model.external_embeddings.as_deref().expect("validated");
                Some(Arc::new(EmbeddingTable::load(path)?))
            }
        };
        Self::with_external(config, vocab, external)
    }

    pub fn with_external(
        config: Config,
        vocab: TokenVocab,
        external: Option<Arc<EmbeddingTable>>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let m = &config.model;
        let seed = config.seed;
        let rng = |k: u64| stream(seed, Stream::Init, k);
        let mut store = ParamStore::new();

        let (utterance, e_dim) = match (&external, m.utterance_encoder) {
            (Some(table), UtteranceMode::External) => (None, table.dim()),
            (None, UtteranceMode::External) => {
                return Err(ModelError::Checkpoint("external utterance encoder without a table".into()))
            }
            _ => {
                let p = UtteranceEncoderParams::new(
                    &mut store,
                    "utt",
                    vocab.len(),
                    m.word_embedding,
                    m.dialogue_context_embedding,
                    &mut rng(0),
                );
                (Some(p), m.dialogue_context_embedding)
            }
        };
        let context = ContextEncoderParams::new(&mut store, "ctx", e_dim, m.context_hidden, &mut rng(1));
        let (structure, st_dim, da_dim) = match config.variant {
            Variant::Graph => {
                let st = StructureEncoderParams::new(
                    &mut store,
                    "st_graph",
                    N_STRATEGIES,
                    m.hidden_dim,
                    m.projection_strategy,
                    m.graph_layers,
                    m.asap_pooling_ratio,
                    &mut rng(2),
                );
                let da = StructureEncoderParams::new(
                    &mut store,
                    "da_graph",
                    N_ACTS,
                    m.hidden_dim,
                    m.projection_da,
                    m.graph_layers,
                    m.asap_pooling_ratio,
                    &mut rng(3),
                );
                (Structure::Graph { st, da }, m.projection_strategy, m.projection_da)
            }
            Variant::Rnn => {
                let st = GruParams::new(&mut store, "st_rnn", N_STRATEGIES, m.rnn_hidden_size, &mut rng(2));
                let da = GruParams::new(&mut store, "da_rnn", N_ACTS, m.rnn_hidden_size, &mut rng(3));
                (Structure::Rnn { st, da }, m.rnn_hidden_size, m.rnn_hidden_size)
            }
            Variant::None => (Structure::None, 0, 0),
        };
        let h_dim = m.context_hidden + st_dim + da_dim;
        let st_in = if st_dim == 0 { m.context_hidden } else { st_dim };
        let da_in = if da_dim == 0 { m.context_hidden } else { da_dim };
        let strategy_head = LinearHead::new(&mut store, "head_st", st_in, N_CONTENT_STRATEGIES, &mut rng(4));
        let act_head = LinearHead::new(&mut store, "head_da", da_in, N_ACTS, &mut rng(5));
        let outcome_head = LinearHead::new(&mut store, "head_r", h_dim, N_OUTCOME_CLASSES, &mut rng(6));
        let decoder =
            DecoderParams::new(&mut store, "dec", vocab.len(), m.decoder_embedding, m.decoder_hidden, h_dim, &mut rng(7));
        let parts = Parts { utterance, context, structure, strategy_head, act_head, outcome_head, decoder };
        Ok(Self { config, store, vocab, boundaries: None, weights: ClassWeights::uniform(), parts, external })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn h_dim(&self) -> usize {
        self.parts.outcome_head.input
    }

    pub fn prepare(&self, d: &Dialogue) -> Prepared {
        Prepared::new(d, &self.vocab, self.boundaries.as_ref())
    }

    fn source(&self) -> UtteranceSource<'_> {
        match (&self.parts.utterance, &self.external) {
            (Some(p), _) => UtteranceSource::Trainable(p),
            (None, Some(t)) => UtteranceSource::External(t),
            (None, None) => unreachable!("model built without an utterance source"),
        }
    }

    /// Encodes turns `0..upto` and returns one [`Step`] per turn. Dropout is
    /// active only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Prepared,
        upto: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<Step>, ModelError> {
        let m = &self.config.model;
        let source = self.source();
        let mut h_u = self.parts.context.initial(tape)?;
        let mut steps = Vec::with_capacity(upto);

        let mut st_graph = StrategyGraph::empty(N_STRATEGIES);
        let mut da_graph = StrategyGraph::empty(N_ACTS);
        let mut h_st: Option<Var> = None;
        let mut rnn_st: Option<Var> = None;
        let mut rnn_da: Option<Var> = None;

        for t in 0..upto {
            let mut e = source.encode(tape, &p.inputs[t], (p.id, t as u32))?;
            if let Some(r) = rng.as_deref_mut() {
                e = tape.dropout(e, m.dialogue_context_dropout, r)?;
            }
            h_u = self.parts.context.step(tape, e, h_u)?;

            let (st_vec, da_vec) = match &self.parts.structure {
                Structure::Graph { st, da } => {
                    let changed = !p.strategies[t].is_empty();
                    st_graph.push_turn(&p.strategies[t])?;
                    da_graph.push_turn(&[p.acts[t]])?;
                    let dropout = rng.as_deref_mut().filter(|_| m.graph_dropout > 0.0).map(|r| (m.graph_dropout, r));
                    let st_h = match h_st {
                        Some(prev) if !changed && dropout.is_none() => prev,
                        _ if st_graph.is_empty() => tape.constant(Tensor::zeros(1, m.projection_strategy))?,
                        _ => st.encode_with_dropout(tape, &st_graph, dropout)?.h,
                    };
                    h_st = Some(st_h);
                    let dropout = rng.as_deref_mut().filter(|_| m.graph_dropout > 0.0).map(|r| (m.graph_dropout, r));
                    let da_h = da.encode_with_dropout(tape, &da_graph, dropout)?.h;
                    (Some(st_h), Some(da_h))
                }
                Structure::Rnn { st, da } => {
                    let mut k = vec![0.0; N_STRATEGIES];
                    for &s in &p.strategies[t] {
                        k[s] = 1.0;
                    }
                    let mut o = vec![0.0; N_ACTS];
                    o[p.acts[t]] = 1.0;
                    let kx = tape.constant(Tensor::row_vector(k))?;
                    let ox = tape.constant(Tensor::row_vector(o))?;
                    let hs = match rnn_st {
                        Some(h) => h,
                        None => tape.constant(Tensor::zeros(1, st.hidden))?,
                    };
                    let hd = match rnn_da {
                        Some(h) => h,
                        None => tape.constant(Tensor::zeros(1, da.hidden))?,
                    };
                    let hs = st.cell(tape, kx, hs)?;
                    let hd = da.cell(tape, ox, hd)?;
                    rnn_st = Some(hs);
                    rnn_da = Some(hd);
                    (Some(hs), Some(hd))
                }
                Structure::None => (None, None),
            };

            let h = match (st_vec, da_vec) {
                (Some(s), Some(d)) => tape.concat_cols(&[h_u, s, d])?,
                _ => h_u,
            };
            let st_logits = self.parts.strategy_head.logits(tape, st_vec.unwrap_or(h_u))?;
            let da_logits = self.parts.act_head.logits(tape, da_vec.unwrap_or(h_u))?;
            let outcome_logits = self.parts.outcome_head.logits(tape, h)?;
            steps.push(Step { h, st_logits, da_logits, outcome_logits });
        }
        Ok(steps)
    }

    /// Joint loss summed over the predicted turns of one dialogue:
    /// `sum_t L_NLG + alpha L_ST + beta L_DA + gamma L_R`.
    pub fn loss(&self, tape: &mut Tape, p: &Prepared, rng: Option<&mut Rng>) -> Result<(Var, LossParts), ModelError> {
        let n = p.predicted_turns();
        if n == 0 {
            return Err(ModelError::Nd(NdError::Contract("dialogue with fewer than two turns".into())));
        }
        let tc = &self.config.train;
        let steps = self.forward(tape, p, n, rng)?;

        // Strategies: weighted binary log-likelihood over the content labels.
        let st_rows: Vec<Var> = steps.iter().map(|s| s.st_logits).collect();
        let st_logits = tape.concat_rows(&st_rows)?;
        let probs = tape.sigmoid(st_logits)?;
        let mut w_pos = Tensor::zeros(n, N_CONTENT_STRATEGIES);
        let mut w_neg = Tensor::zeros(n, N_CONTENT_STRATEGIES);
        for t in 0..n {
            for (j, &y) in p.content_khot(t + 1).iter().enumerate() {
                if y {
                    w_pos.set(t, j, -self.weights.delta[j]);
                } else {
                    w_neg.set(t, j, -1.0);
                }
            }
        }
        let log_p = tape.ln_clamped(probs, PROB_EPS)?;
        let one_minus = tape.affine(probs, -1.0, 1.0)?;
        let log_q = tape.ln_clamped(one_minus, PROB_EPS)?;
        let pos = tape.mul_const(log_p, w_pos)?;
        let neg = tape.mul_const(log_q, w_neg)?;
        let pos = tape.sum(pos)?;
        let neg = tape.sum(neg)?;
        let l_st = tape.add(pos, neg)?;

        // Dialogue acts: class-weighted cross entropy.
        let da_rows: Vec<Var> = steps.iter().map(|s| s.da_logits).collect();
        let da_logits = tape.concat_rows(&da_rows)?;
        let da_logp = tape.log_softmax_rows(da_logits)?;
        let mut pick = Tensor::zeros(n, N_ACTS);
        for t in 0..n {
            let a = p.acts[t + 1];
            pick.set(t, a, -self.weights.rho[a]);
        }
        let l_da = tape.mul_const(da_logp, pick)?;
        let l_da = tape.sum(l_da)?;

        let mut total = tape.scale(l_st, tc.loss_alpha)?;
        let da_scaled = tape.scale(l_da, tc.loss_beta)?;
        total = tape.add(total, da_scaled)?;
        let mut parts = LossParts { st: tape.scalar(l_st), da: tape.scalar(l_da), turns: n, ..Default::default() };

        if let Some(class) = p.outcome {
            let rows: Vec<Var> = steps.iter().map(|s| s.outcome_logits).collect();
            let logits = tape.concat_rows(&rows)?;
            let logp = tape.log_softmax_rows(logits)?;
            let mut pick = Tensor::zeros(n, N_OUTCOME_CLASSES);
            for t in 0..n {
                pick.set(t, class, -1.0);
            }
            let l_r = tape.mul_const(logp, pick)?;
            let l_r = tape.sum(l_r)?;
            parts.r = tape.scalar(l_r);
            let scaled = tape.scale(l_r, tc.loss_gamma)?;
            total = tape.add(total, scaled)?;
        }

        if tc.generation_loss {
            for t in 0..n {
                if p.speakers[t + 1] == Speaker::Seller {
                    let l = self.parts.decoder.nll(tape, steps[t].h, &p.targets[t + 1])?;
                    parts.nlg += tape.scalar(l);
                    total = tape.add(total, l)?;
                }
            }
        }
        parts.joint = tape.scalar(total);
        Ok((total, parts))
    }

    /// Predictions for every turn `0..upto` without dropout.
    pub fn predict(&self, p: &Prepared, upto: usize) -> Result<Vec<TurnPrediction>, ModelError> {
        let mut tape = Tape::new(&self.store);
        let steps = self.forward(&mut tape, p, upto, None)?;
        Ok(steps
            .iter()
            .map(|s| TurnPrediction {
                strategies: StrategyPrediction::from_logits(tape.value(s.st_logits).data()),
                act_probs: softmax(tape.value(s.da_logits).data()),
                outcome_probs: softmax(tape.value(s.outcome_logits).data()),
                h: tape.value(s.h).clone(),
            })
            .collect())
    }

    /// Greedy reply conditioned on `h_t`, as token ids.
    pub fn decode(&self, h: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(self.parts.decoder.greedy(&self.store, h, self.config.model.max_decode_len)?)
    }

    /// Attention trace of the strategy graph over turns `0..upto`; `None` for
    /// non-graph variants or an empty graph.
    pub fn strategy_trace(&self, p: &Prepared, upto: usize) -> Result<Option<AttentionTrace>, ModelError> {
        let Structure::Graph { st, .. } = &self.parts.structure else {
            return Ok(None);
        };
        let g = build_graph(&p.strategies[..upto], N_STRATEGIES)?;
        if g.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new(&self.store);
        Ok(Some(st.encode(&mut tape, &g)?.trace))
    }

    pub fn act_trace(&self, p: &Prepared, upto: usize) -> Result<Option<AttentionTrace>, ModelError> {
        let Structure::Graph { da, .. } = &self.parts.structure else {
            return Ok(None);
        };
        let g = build_da_graph(&p.acts[..upto], N_ACTS)?;
        if g.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new(&self.store);
        Ok(Some(da.encode(&mut tape, &g)?.trace))
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&AdamState>, epoch: usize) -> Result<(), ModelError> {
        let ck = Checkpoint {
            v: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            boundaries: self.boundaries.clone(),
            weights: self.weights.clone(),
            params: self.store.clone(),
            optimizer: optimizer.cloned(),
            epoch,
        };
        let json = serde_json::to_string(&ck).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Checkpoint), ModelError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let model = Self::from_checkpoint(&ck)?;
        Ok((model, ck))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        if ck.v != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported checkpoint version {}", ck.v)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(ModelError::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut model = Self::new(ck.config.clone(), ck.vocab.clone())?;
        model.store.load_from(&ck.params)?;
        model.boundaries = ck.boundaries.clone();
        model.weights = ck.weights.clone();
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub v: u32,
    pub config_hash: String,
    pub config: Config,
    pub vocab: TokenVocab,
    pub boundaries: Option<RatioBoundaries>,
    pub weights: ClassWeights,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub epoch: usize,
}
