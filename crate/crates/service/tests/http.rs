use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use negograph::config::{Config, Variant};
use negograph::corpus::{compute_ratio, Corpus, FinalAction, N_CONTENT_STRATEGIES};
use negograph::gnn::AttentionTrace;
use negograph::graphbuild::build_graph;
use negograph::model::{Model, N_STRATEGIES};
use negograph::synth::{self, SynthConfig};
use negograph::train::model_for_corpus;
use negograph_service::engine::{ActionKind, ActionRequest, BuyerMessage, CreateSession};
use negograph_service::{router, Engine, TRACE_EDGE_LIMIT};
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_model(variant: Variant) -> Model {
    let corpus = synth::generate(&SynthConfig { dialogues: 12, turns: 6, ..SynthConfig::default() }).unwrap();
    let mut cfg = Config { variant, ..Config::default() };
    let m = &mut cfg.model;
    for d in [
        &mut m.word_embedding,
        &mut m.dialogue_context_embedding,
        &mut m.context_hidden,
        &mut m.hidden_dim,
        &mut m.projection_strategy,
        &mut m.projection_da,
        &mut m.rnn_hidden_size,
        &mut m.decoder_embedding,
        &mut m.decoder_hidden,
    ] {
        *d = 8;
    }
    m.max_decode_len = 8;
    model_for_corpus(cfg, &corpus).unwrap()
}

fn app() -> Router {
    router(Arc::new(Engine::new(Some(tiny_model(Variant::Graph)))))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn scenario(listed: f64, target: f64) -> Value {
    json!({"v": 1, "scenario": {"listed_price": listed, "buyer_target_price": target, "title": "bike"}})
}

async fn session(app: &Router, listed: f64, target: f64) -> String {
    let (st, body) = call(app, "POST", "/sessions", Some(scenario(listed, target))).await;
    assert_eq!(st, StatusCode::OK, "{body}");
    body["id"].as_str().unwrap().to_string()
}

async fn act(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{id}/action"), Some(body)).await
}

#[tokio::test]
async fn healthz_reports_model() {
    let (st, body) = call(&app(), "GET", "/healthz", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["v"], 1);
    assert_eq!(body["model_loaded"], true);
    assert_eq!(body["config_hash"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn create_without_model_is_503() {
    let app = router(Arc::new(Engine::new(None)));
    let (st, body) = call(&app, "POST", "/sessions", Some(scenario(40.0, 36.0))).await;
    assert_eq!(st, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["v"], 1);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn create_session_opens_with_greeting() {
    let app = app();
    let (st, body) = call(&app, "POST", "/sessions", Some(scenario(40.0, 36.0))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["opening"]["speaker"], "seller");
    assert_eq!(body["opening"]["dialogue_act"], "intro");
    assert!(body["opening"]["strategies"].as_array().unwrap().contains(&json!("politeness_greet")));
}

#[tokio::test]
async fn equal_listed_and_target_rejected() {
    let (st, _) = call(&app(), "POST", "/sessions", Some(scenario(40.0, 40.0))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn ids_are_distinct() {
    let app = app();
    let a = session(&app, 40.0, 36.0).await;
    let b = session(&app, 40.0, 36.0).await;
    assert_ne!(a, b);
}

#[tokio::test]
async fn bad_payloads() {
    let app = app();
    let (st, body) = call(&app, "POST", "/sessions", Some(json!({"v": 1}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{body}");
    let (st, _) = call(&app, "POST", "/sessions", Some(json!({"v": 9, "scenario": scenario(40.0, 30.0)["scenario"]}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn greeting_is_tagged_and_answered() {
    let app = app();
    let id = session(&app, 40.0, 36.0).await;
    let (st, body) = call(&app, "POST", &format!("/sessions/{id}/message"), Some(json!({"v": 1, "text": "hi"}))).await;
    assert_eq!(st, StatusCode::OK, "{body}");
    assert!(body["buyer"]["strategies"].as_array().unwrap().contains(&json!("politeness_greet")));
    assert!(!body["bot_reply"].as_str().unwrap().is_empty());
    assert!(body["bot_da"].is_string());
    assert_eq!(body["predicted_next_strategies"].as_array().unwrap().len(), N_CONTENT_STRATEGIES);
    let trace: AttentionTrace = serde_json::from_value(body["trace_snapshot"].clone()).unwrap();
    assert!(!trace.layers.is_empty());
    assert!(trace.layers[0].alpha.len() <= TRACE_EDGE_LIMIT);
}

#[tokio::test]
async fn proposal_fraction() {
    let app = app();
    let id = session(&app, 40.0, 36.0).await;
    let (_, body) =
        call(&app, "POST", &format!("/sessions/{id}/message"), Some(json!({"v": 1, "text": "would you take $30?"})))
            .await;
    let p = &body["price_state"]["last_buyer_proposal"];
    assert_eq!(p["amount"].as_f64().unwrap(), 30.0);
    assert_eq!(p["fraction"].as_f64().unwrap(), 0.75);
    assert_eq!(body["buyer"]["dialogue_act"], "init-price");
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app();
    let (st, _) = call(&app, "POST", "/sessions/nope/message", Some(json!({"v": 1, "text": "hi"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "GET", "/sessions/nope/trace", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn offer_then_accept_ratio() {
    let app = app();
    let id = session(&app, 40.0, 36.0).await;
    let (st, body) = act(&app, &id, json!({"v": 1, "action": "offer", "amount": 35})).await;
    assert_eq!(st, StatusCode::OK, "{body}");
    assert_eq!(body["finished"], false);
    assert_eq!(body["price_state"]["outstanding_offer"]["amount"].as_f64().unwrap(), 35.0);
    let (st, body) = act(&app, &id, json!({"v": 1, "action": "accept"})).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["outcome"]["final_action"], "accept");
    assert_eq!(body["outcome"]["sale_price"].as_f64().unwrap(), 35.0);
    let r = body["outcome"]["ratio"].as_f64().unwrap();
    assert!((r - -0.25).abs() < 1e-12);
    assert_eq!(r, compute_ratio(35.0, 36.0, 40.0).unwrap());
}

#[tokio::test]
async fn offer_at_listed_gives_ratio_one() {
    let app = app();
    let id = session(&app, 40.0, 36.0).await;
    act(&app, &id, json!({"v": 1, "action": "offer", "amount": 40})).await;
    let (_, body) = act(&app, &id, json!({"v": 1, "action": "accept"})).await;
    assert_eq!(body["outcome"]["ratio"].as_f64().unwrap(), 1.0);
}

#[tokio::test]
async fn quit_has_no_sale_and_finishes() {
    let app = app();
    let id = session(&app, 40.0, 36.0).await;
    let (st, body) = act(&app, &id, json!({"v": 1, "action": "quit"})).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["outcome"]["final_action"], "quit");
    assert!(body["outcome"]["sale_price"].is_null());
    let (st, _) = call(&app, "POST", &format!("/sessions/{id}/message"), Some(json!({"v": 1, "text": "hi"}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = act(&app, &id, json!({"v": 1, "action": "quit"})).await;
    assert_eq!(st, StatusCode::CONFLICT);
}

#[tokio::test]
async fn accept_without_offer_conflicts() {
    let app = app();
    let id = session(&app, 40.0, 36.0).await;
    let (st, _) = act(&app, &id, json!({"v": 1, "action": "accept"})).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = act(&app, &id, json!({"v": 1, "action": "reject"})).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = act(&app, &id, json!({"v": 1, "action": "offer"})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn full_trace_endpoint() {
    let app = app();
    let id = session(&app, 40.0, 36.0).await;
    call(&app, "POST", &format!("/sessions/{id}/message"), Some(json!({"v": 1, "text": "hello, is it available?"})))
        .await;
    let (st, body) = call(&app, "GET", &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["turns"].as_array().unwrap().len(), 3);
    assert!(body["strategy_trace"]["layers"].is_array());
    assert!(body["act_trace"]["layers"].is_array());
    assert_eq!(body["act_graph"]["nodes"].as_array().unwrap().len(), 3);
}

const SCRIPT: [&str; 5] = [
    "hi",
    "is it still available?",
    "would you take $30? i can pick it up today",
    "that is too high for me, sorry",
    "how about $33, please",
];

fn engine_script(engine: &Engine) -> (Vec<String>, Vec<Option<AttentionTrace>>, String) {
    let sc = serde_json::from_value(scenario(40.0, 30.0)["scenario"].clone()).unwrap();
    let id = engine.create_session(&CreateSession { v: 1, scenario: sc }).unwrap().id;
    let mut replies = Vec::new();
    let mut traces = Vec::new();
    for text in SCRIPT {
        let r = engine.message(&id, &BuyerMessage { v: 1, text: text.into() }).unwrap();
        replies.push(r.bot_reply);
        traces.push(r.trace_snapshot);
        let s = engine.snapshot(&id).unwrap();
        let d = Corpus::default().resolve(&negograph::corpus::DialogueRecord {
            scenario: s.scenario.clone(),
            turns: s.history.clone(),
            outcome: negograph::corpus::Outcome { sale_price: None, final_action: FinalAction::Quit },
        }, 0)
        .unwrap();
        assert_eq!(s.strategy_graph, build_graph(&d.strategy_sets(), N_STRATEGIES).unwrap());
        assert!(s.graphs_consistent().unwrap());
    }
    (replies, traces, id)
}

#[test]
fn replay_is_deterministic_and_graphs_consistent() {
    let model = tiny_model(Variant::Graph);
    let a = engine_script(&Engine::new(Some(model.clone())));
    let b = engine_script(&Engine::new(Some(model)));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn non_graph_model_has_no_trace() {
    let engine = Engine::new(Some(tiny_model(Variant::None)));
    let (_, traces, id) = engine_script(&engine);
    assert!(traces.iter().all(Option::is_none));
    let r = engine.action(&id, &ActionRequest { v: 1, action: ActionKind::Quit, amount: None }).unwrap();
    assert!(r.finished);
}

#[test]
fn concurrent_sessions() {
    let engine = Arc::new(Engine::new(Some(tiny_model(Variant::Graph))));
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let e = Arc::clone(&engine);
            std::thread::spawn(move || engine_script(&e).0)
        })
        .collect();
    let outs: Vec<Vec<String>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(engine.health().sessions, 4);
}
