//! Adapter from the original CraigslistBargain JSON release to the JSONL record schema.
//!
//! The release carries no coarse dialogue acts or strategy annotations for
//! message events, so messages map to `unknown` with an empty strategy set;
//! offer/accept/reject/quit events map to the outcome acts.

use serde::Deserialize;
use serde_json::Value;

use super::{tokenize, CorpusError, DialogueRecord, FinalAction, Outcome, Scenario, Speaker, TurnRecord};

#[derive(Deserialize)]
struct RawExample {
    scenario: RawScenario,
    events: Vec<RawEvent>,
    #[serde(default)]
    outcome: Option<RawOutcome>,
}

#[derive(Deserialize)]
struct RawScenario {
    kbs: Vec<RawKb>,
}

#[derive(Deserialize)]
struct RawKb {
    item: RawItem,
    personal: RawPersonal,
}

#[derive(Deserialize)]
struct RawItem {
    #[serde(rename = "Price")]
    price: f64,
    #[serde(rename = "Title", default)]
    title: String,
    #[serde(rename = "Description", default)]
    description: Vec<String>,
}

#[derive(Deserialize)]
struct RawPersonal {
    #[serde(rename = "Role")]
    role: String,
    #[serde(rename = "Target")]
    target: f64,
}

#[derive(Deserialize)]
struct RawEvent {
    agent: usize,
    action: String,
    #[serde(default)]
    data: Value,
}

#[derive(Deserialize)]
struct RawOutcome {
    #[serde(default)]
    reward: Option<f64>,
    #[serde(default)]
    offer: Option<Value>,
}

fn offer_price(v: &Value) -> Option<f64> {
    v.get("price").and_then(Value::as_f64)
}

/// Converts a CraigslistBargain JSON array into schema records. Examples with
/// unusable scenarios (equal listed and target price) are skipped.
pub fn import_craigslist(json: &str) -> Result<Vec<DialogueRecord>, CorpusError> {
    let raw: Vec<RawExample> =
        serde_json::from_str(json).map_err(|e| CorpusError::Schema { record: 0, message: e.to_string() })?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, ex) in raw.into_iter().enumerate() {
        let role = |agent: usize| -> Result<Speaker, CorpusError> {
            match ex.scenario.kbs.get(agent).map(|kb| kb.personal.role.as_str()) {
                Some("buyer") => Ok(Speaker::Buyer),
                Some("seller") => Ok(Speaker::Seller),
                other => Err(CorpusError::Schema { record: i, message: format!("agent {agent} has role {other:?}") }),
            }
        };
        let seller = ex.scenario.kbs.iter().find(|kb| kb.personal.role == "seller");
        let buyer = ex.scenario.kbs.iter().find(|kb| kb.personal.role == "buyer");
        let (Some(seller), Some(buyer)) = (seller, buyer) else {
            return Err(CorpusError::Schema { record: i, message: "missing buyer or seller kb".into() });
        };
        let scenario = Scenario {
            listed_price: seller.item.price,
            buyer_target_price: buyer.personal.target,
            title: seller.item.title.clone(),
            description: Some(seller.item.description.join(" ")).filter(|s| !s.is_empty()),
        };
        if scenario.validate().is_err() {
            continue;
        }

        let mut turns = Vec::new();
        let mut final_action = FinalAction::Quit;
        let mut last_offer = None;
        for ev in &ex.events {
            let speaker = role(ev.agent)?;
            let (text, act) = match ev.action.as_str() {
                "message" => (ev.data.as_str().unwrap_or_default().to_string(), "unknown"),
                "offer" => {
                    final_action = FinalAction::Offer;
                    last_offer = offer_price(&ev.data);
                    (last_offer.map(|p| format!("${p}")).unwrap_or_default(), "<offer>")
                }
                "accept" => {
                    final_action = FinalAction::Accept;
                    (String::new(), "<accept>")
                }
                "reject" => {
                    final_action = FinalAction::Reject;
                    (String::new(), "<reject>")
                }
                "quit" => {
                    final_action = FinalAction::Quit;
                    (String::new(), "<quit>")
                }
                _ => continue,
            };
            turns.push(TurnRecord {
                speaker,
                tokens: tokenize(&text),
                text,
                dialogue_act: act.to_string(),
                strategies: Vec::new(),
            });
        }
        let accepted = ex.outcome.as_ref().and_then(|o| o.reward).is_some_and(|r| r > 0.0);
        let sale_price = if accepted {
            ex.outcome.as_ref().and_then(|o| o.offer.as_ref()).and_then(offer_price).or(last_offer)
        } else {
            None
        };
        out.push(DialogueRecord { scenario, turns, outcome: Outcome { sale_price, final_action } });
    }
    Ok(out)
}
