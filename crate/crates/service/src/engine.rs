//! Session state and the per-message pipeline, independent of the transport.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use negograph::corpus::price::extract_prices;
use negograph::corpus::{
    compute_ratio, tokenize, Corpus, CorpusError, DialogueRecord, FinalAction, LabelVocab, Outcome, Scenario,
    Speaker, TurnRecord, DIALOGUE_ACT_LABELS, START_STRATEGY,
};
use negograph::gnn::AttentionTrace;
use negograph::graphbuild::{build_da_graph, build_graph, GraphDump, GraphError, StrategyGraph};
use negograph::heads::{argmax, format_price, realize};
use negograph::model::{Model, ModelError, Prepared, N_ACTS, N_STRATEGIES};
use negograph::tagger::Tagger;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version carried by every payload.
pub const API_VERSION: u32 = 1;
/// Edge budget of the trace attached to each message response.
pub const TRACE_EDGE_LIMIT: usize = 200;
pub const GREETING: &str = "hi there! thanks for your interest in the item.";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no model loaded")]
    NoModel,
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} has finished")]
    Finished(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            Self::NoModel => 503,
            Self::UnknownSession(_) => 404,
            Self::Finished(_) | Self::Conflict(_) => 409,
            Self::BadRequest(_) => 400,
            Self::Model(_) | Self::Graph(_) | Self::Corpus(_) | Self::Internal(_) => 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default = "version")]
    pub v: u32,
    pub scenario: Scenario,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuyerMessage {
    #[serde(default = "version")]
    pub v: u32,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Offer,
    Accept,
    Reject,
    Quit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRequest {
    #[serde(default = "version")]
    pub v: u32,
    pub action: ActionKind,
    /// Required for `offer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amount: Option<f64>,
}

fn version() -> u32 {
    API_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub turn: usize,
    pub speaker: Speaker,
    pub text: String,
    pub dialogue_act: String,
    pub strategies: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub v: u32,
    pub id: String,
    pub scenario: Scenario,
    pub opening: TurnView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelProb {
    pub label: String,
    pub prob: f64,
    pub predicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub turn: usize,
    pub amount: f64,
    /// `amount / listed_price`.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offer {
    pub amount: f64,
    pub proposer: Speaker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceState {
    pub listed_price: f64,
    pub buyer_target_price: f64,
    pub last_buyer_proposal: Option<Proposal>,
    pub last_seller_proposal: Option<Proposal>,
    pub outstanding_offer: Option<Offer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    pub v: u32,
    pub buyer: TurnView,
    pub bot_reply: String,
    pub bot_strategies: Vec<String>,
    pub bot_da: String,
    /// Content-strategy probabilities for the buyer's next turn, in label order.
    pub predicted_next_strategies: Vec<LabelProb>,
    pub price_state: PriceState,
    /// Most recent edges of the strategy-graph trace; `None` for non-graph models.
    pub trace_snapshot: Option<AttentionTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub final_action: FinalAction,
    pub sale_price: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionReply {
    pub v: u32,
    pub id: String,
    pub finished: bool,
    pub price_state: PriceState,
    pub outcome: Option<OutcomeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReply {
    pub v: u32,
    pub id: String,
    pub turns: Vec<TurnView>,
    pub strategy_graph: GraphDump,
    pub act_graph: GraphDump,
    pub strategy_trace: Option<AttentionTrace>,
    pub act_trace: Option<AttentionTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub v: u32,
    pub status: String,
    pub model_loaded: bool,
    pub config_hash: Option<String>,
    pub sessions: usize,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub scenario: Scenario,
    pub history: Vec<TurnRecord>,
    pub strategy_graph: StrategyGraph,
    pub act_graph: StrategyGraph,
    pub offer: Option<Offer>,
    pub outcome: Option<OutcomeRecord>,
}

impl Session {
    fn new(id: String, scenario: Scenario) -> Self {
        Self {
            id,
            scenario,
            history: Vec::new(),
            strategy_graph: StrategyGraph::empty(N_STRATEGIES),
            act_graph: StrategyGraph::empty(N_ACTS),
            offer: None,
            outcome: None,
        }
    }

    fn record(&self) -> DialogueRecord {
        DialogueRecord {
            scenario: self.scenario.clone(),
            turns: self.history.clone(),
            outcome: Outcome { sale_price: None, final_action: FinalAction::Quit },
        }
    }

    fn push(&mut self, speaker: Speaker, text: &str, act: usize, strategies: &[usize]) -> Result<(), ServiceError> {
        let svocab = LabelVocab::strategies();
        let mut ids = strategies.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let graph_ids = if self.history.is_empty() && ids.is_empty() {
            vec![svocab.id(START_STRATEGY).expect("vocab has <start>")]
        } else {
            ids.clone()
        };
        self.strategy_graph.push_turn(&graph_ids)?;
        self.act_graph.push_turn(&[act])?;
        self.history.push(TurnRecord {
            speaker,
            text: text.to_string(),
            tokens: tokenize(text),
            dialogue_act: DIALOGUE_ACT_LABELS[act].to_string(),
            strategies: ids.iter().map(|&i| svocab.label(i).expect("tagged id").to_string()).collect(),
        });
        Ok(())
    }

    fn view(&self, turn: usize) -> TurnView {
        let t = &self.history[turn];
        TurnView {
            turn,
            speaker: t.speaker,
            text: t.text.clone(),
            dialogue_act: t.dialogue_act.clone(),
            strategies: t.strategies.clone(),
        }
    }

    fn price_seen(&self) -> bool {
        self.history.iter().any(|t| !extract_prices(&t.tokens, self.scenario.listed_price).is_empty())
    }

    pub fn price_state(&self) -> PriceState {
        let listed = self.scenario.listed_price;
        let last = |who: Speaker| {
            self.history.iter().enumerate().rev().filter(|(_, t)| t.speaker == who).find_map(|(i, t)| {
                extract_prices(&t.tokens, listed)
                    .last()
                    .map(|&(_, amount)| Proposal { turn: i, amount, fraction: amount / listed })
            })
        };
        PriceState {
            listed_price: listed,
            buyer_target_price: self.scenario.buyer_target_price,
            last_buyer_proposal: last(Speaker::Buyer),
            last_seller_proposal: last(Speaker::Seller),
            outstanding_offer: self.offer.clone(),
        }
    }

    /// Checks that the live graphs match a rebuild from the history.
    pub fn graphs_consistent(&self) -> Result<bool, ServiceError> {
        let d = Corpus::default().resolve(&self.record(), 0)?;
        let st = build_graph(&d.strategy_sets(), N_STRATEGIES)?;
        let da = build_da_graph(&d.dialogue_acts(), N_ACTS)?;
        Ok(st == self.strategy_graph && da == self.act_graph)
    }

    fn ensure_open(&self) -> Result<(), ServiceError> {
        if self.outcome.is_some() {
            return Err(ServiceError::Finished(self.id.clone()));
        }
        Ok(())
    }
}

fn act_id(label: &str) -> usize {
    DIALOGUE_ACT_LABELS.iter().position(|a| *a == label).expect("known act")
}

pub struct Engine {
    model: Option<Arc<Model>>,
    tagger: Tagger,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl Engine {
    pub fn new(model: Option<Model>) -> Self {
        Self::with_tagger(model, Tagger::default())
    }

    pub fn with_tagger(model: Option<Model>, tagger: Tagger) -> Self {
        Self { model: model.map(Arc::new), tagger, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    fn model(&self) -> Result<&Model, ServiceError> {
        self.model.as_deref().ok_or(ServiceError::NoModel)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        let map = self.sessions.lock().map_err(|_| ServiceError::Internal("session table poisoned".into()))?;
        map.get(id).cloned().ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let s = self.session(id)?;
        let mut guard = s.lock().map_err(|_| ServiceError::Internal(format!("session {id} poisoned")))?;
        f(&mut guard)
    }

    pub fn health(&self) -> Health {
        Health {
            v: API_VERSION,
            status: if self.model.is_some() { "ok" } else { "no-model" }.to_string(),
            model_loaded: self.model.is_some(),
            config_hash: self.model.as_ref().map(|m| m.config.hash()),
            sessions: self.sessions.lock().map(|m| m.len()).unwrap_or(0),
        }
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<SessionCreated, ServiceError> {
        self.model()?;
        req.scenario.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut session = Session::new(id.clone(), req.scenario.clone());
        let tags = self.tagger.tag(GREETING, false);
        session.push(Speaker::Seller, GREETING, act_id("intro"), &tags.strategies)?;
        let opening = session.view(0);
        self.sessions
            .lock()
            .map_err(|_| ServiceError::Internal("session table poisoned".into()))?
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(SessionCreated { v: API_VERSION, id, scenario: req.scenario.clone(), opening })
    }

    pub fn message(&self, id: &str, req: &BuyerMessage) -> Result<MessageReply, ServiceError> {
        let model = self.model()?;
        self.with_session(id, |s| {
            s.ensure_open()?;
            let text = req.text.trim();
            if text.is_empty() {
                return Err(ServiceError::BadRequest("empty message".into()));
            }
            let tags = self.tagger.tag(text, s.price_seen());
            s.push(Speaker::Buyer, text, tags.act, &tags.strategies)?;
            let buyer = s.view(s.history.len() - 1);

            let prepared = prepare(model, s)?;
            let preds = model.predict(&prepared, prepared.len())?;
            let step = preds.last().ok_or_else(|| ServiceError::Internal("empty prediction".into()))?;
            let reply = realize(&model.decode(&step.h)?, &model.vocab, s.scenario.listed_price);
            let reply = if reply.trim().is_empty() { "...".to_string() } else { reply };
            let reply_tags = self.tagger.tag(&reply, s.price_seen());
            let predicted_act = argmax(&step.act_probs);
            // Action acts belong to explicit user actions, never to generated text.
            let bot_act = if DIALOGUE_ACT_LABELS[predicted_act].starts_with('<') { reply_tags.act } else { predicted_act };
            s.push(Speaker::Seller, &reply, bot_act, &reply_tags.strategies)?;
            let bot = s.view(s.history.len() - 1);

            let prepared = prepare(model, s)?;
            let next = model.predict(&prepared, prepared.len())?;
            let next = &next.last().expect("non-empty history").strategies;
            let svocab = LabelVocab::strategies();
            let predicted_next_strategies = next
                .probs
                .iter()
                .zip(&next.khot)
                .enumerate()
                .map(|(i, (&prob, &predicted))| LabelProb {
                    label: svocab.label(i).expect("label").to_string(),
                    prob,
                    predicted,
                })
                .collect();
            let trace_snapshot =
                model.strategy_trace(&prepared, prepared.len())?.map(|t| t.truncated(TRACE_EDGE_LIMIT));
            debug_assert!(s.graphs_consistent().unwrap_or(false));
            Ok(MessageReply {
                v: API_VERSION,
                buyer,
                bot_reply: bot.text,
                bot_strategies: bot.strategies,
                bot_da: bot.dialogue_act,
                predicted_next_strategies,
                price_state: s.price_state(),
                trace_snapshot,
            })
        })
    }

    pub fn action(&self, id: &str, req: &ActionRequest) -> Result<ActionReply, ServiceError> {
        self.model()?;
        self.with_session(id, |s| {
            s.ensure_open()?;
            let (t, l) = (s.scenario.buyer_target_price, s.scenario.listed_price);
            match req.action {
                ActionKind::Offer => {
                    let amount = req
                        .amount
                        .filter(|a| a.is_finite() && *a > 0.0)
                        .ok_or_else(|| ServiceError::BadRequest("offer needs a positive amount".into()))?;
                    s.push(Speaker::Buyer, &format_price(amount), act_id("<offer>"), &[])?;
                    s.offer = Some(Offer { amount, proposer: Speaker::Buyer });
                }
                ActionKind::Accept => {
                    let offer = s.offer.clone().ok_or_else(|| ServiceError::Conflict("no outstanding offer to accept".into()))?;
                    s.push(Speaker::Seller, "", act_id("<accept>"), &[])?;
                    let ratio = compute_ratio(offer.amount, t, l)?;
                    s.outcome = Some(OutcomeRecord {
                        final_action: FinalAction::Accept,
                        sale_price: Some(offer.amount),
                        ratio: Some(ratio),
                    });
                }
                ActionKind::Reject => {
                    if s.offer.is_none() {
                        return Err(ServiceError::Conflict("no outstanding offer to reject".into()));
                    }
                    s.push(Speaker::Seller, "", act_id("<reject>"), &[])?;
                    s.outcome = Some(OutcomeRecord { final_action: FinalAction::Reject, sale_price: None, ratio: None });
                }
                ActionKind::Quit => {
                    s.push(Speaker::Buyer, "", act_id("<quit>"), &[])?;
                    s.outcome = Some(OutcomeRecord { final_action: FinalAction::Quit, sale_price: None, ratio: None });
                }
            }
            Ok(ActionReply {
                v: API_VERSION,
                id: s.id.clone(),
                finished: s.outcome.is_some(),
                price_state: s.price_state(),
                outcome: s.outcome.clone(),
            })
        })
    }

    /// Full, untruncated traces over the whole history.
    pub fn trace(&self, id: &str) -> Result<TraceReply, ServiceError> {
        let model = self.model()?;
        self.with_session(id, |s| {
            let prepared = prepare(model, s)?;
            let n = prepared.len();
            Ok(TraceReply {
                v: API_VERSION,
                id: s.id.clone(),
                turns: (0..s.history.len()).map(|i| s.view(i)).collect(),
                strategy_graph: s.strategy_graph.to_dump(&LabelVocab::strategies()),
                act_graph: s.act_graph.to_dump(&LabelVocab::dialogue_acts()),
                strategy_trace: model.strategy_trace(&prepared, n)?,
                act_trace: model.act_trace(&prepared, n)?,
            })
        })
    }

    /// Copy of a session's state, for inspection.
    pub fn snapshot(&self, id: &str) -> Result<Session, ServiceError> {
        self.with_session(id, |s| Ok(s.clone()))
    }
}

fn prepare(model: &Model, s: &Session) -> Result<Prepared, ServiceError> {
    let d = Corpus::default().resolve(&s.record(), 0)?;
    Ok(model.prepare(&d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(s: &mut Session) {
        let t = Tagger::default();
        let tags = t.tag(GREETING, false);
        s.push(Speaker::Seller, GREETING, act_id("intro"), &tags.strategies).unwrap();
    }

    fn scenario() -> Scenario {
        Scenario::new(40.0, 36.0, "bike").unwrap()
    }

    #[test]
    fn price_state_fraction() {
        let mut s = Session::new("x".into(), scenario());
        open(&mut s);
        s.push(Speaker::Buyer, "would you take $30?", act_id("init-price"), &[]).unwrap();
        let p = s.price_state().last_buyer_proposal.unwrap();
        assert_eq!(p.amount, 30.0);
        assert_eq!(p.fraction, 0.75);
        assert!(s.price_state().last_seller_proposal.is_none());
    }

    #[test]
    fn empty_first_turn_gets_start() {
        let mut s = Session::new("x".into(), scenario());
        s.push(Speaker::Seller, "ok", act_id("unknown"), &[]).unwrap();
        s.push(Speaker::Buyer, "", act_id("unknown"), &[]).unwrap();
        assert_eq!(s.strategy_graph.node_count(), 1);
        assert!(s.graphs_consistent().unwrap());
    }

    #[test]
    fn error_statuses() {
        assert_eq!(ServiceError::NoModel.status(), 503);
        assert_eq!(ServiceError::UnknownSession("a".into()).status(), 404);
        assert_eq!(ServiceError::Finished("a".into()).status(), 409);
        assert_eq!(ServiceError::BadRequest("a".into()).status(), 400);
    }

    #[test]
    fn no_model_refuses_sessions() {
        let e = Engine::new(None);
        let err = e.create_session(&CreateSession { v: 1, scenario: scenario() }).unwrap_err();
        assert_eq!(err.status(), 503);
        assert!(!e.health().model_loaded);
    }
}
