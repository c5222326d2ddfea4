//! Live subcommands: terminal chat and the HTTP service.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use negograph::corpus::Scenario;
use negograph::model::Model;
use negograph_service::engine::{ActionKind, ActionRequest, BuyerMessage, CreateSession};
use negograph_service::{Engine, ServiceError, API_VERSION};

use crate::args::{ChatArgs, ServeArgs};

fn load(path: &Path) -> Result<Model> {
    let (model, ck) = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    log::info!("checkpoint {} (config {})", path.display(), ck.config_hash);
    Ok(model)
}

const HELP: &str = "type a message, or /offer <amount>, /accept, /reject, /quit";

/// Reads buyer lines from `input` until the session ends or input runs out.
pub fn chat_loop(engine: &Engine, scenario: Scenario, input: impl BufRead, mut out: impl Write) -> Result<()> {
    let created = engine.create_session(&CreateSession { v: API_VERSION, scenario })?;
    let id = created.id;
    writeln!(out, "{HELP}")?;
    writeln!(out, "seller: {}", created.opening.text)?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let action = match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["/offer", amount] => match amount.trim_start_matches('$').parse::<f64>() {
                Ok(a) => Some(ActionRequest { v: API_VERSION, action: ActionKind::Offer, amount: Some(a) }),
                Err(_) => {
                    writeln!(out, "could not read amount {amount:?}")?;
                    continue;
                }
            },
            ["/accept"] => Some(ActionRequest { v: API_VERSION, action: ActionKind::Accept, amount: None }),
            ["/reject"] => Some(ActionRequest { v: API_VERSION, action: ActionKind::Reject, amount: None }),
            ["/quit"] => Some(ActionRequest { v: API_VERSION, action: ActionKind::Quit, amount: None }),
            [cmd, ..] if cmd.starts_with('/') => {
                writeln!(out, "{HELP}")?;
                continue;
            }
            _ => None,
        };
        let result = match action {
            Some(req) => engine.action(&id, &req).map(|r| {
                if let Some(o) = &r.outcome {
                    let sale = o.sale_price.map_or("none".to_string(), |p| format!("{p:.2}"));
                    let ratio = o.ratio.map_or("none".to_string(), |p| format!("{p:.4}"));
                    format!("outcome: {:?}, sale price {sale}, ratio {ratio}", o.final_action).to_lowercase()
                } else if let Some(o) = &r.price_state.outstanding_offer {
                    format!("offer of {:.2} is on the table", o.amount)
                } else {
                    String::new()
                }
            }),
            None => engine.message(&id, &BuyerMessage { v: API_VERSION, text: line.to_string() }).map(|r| {
                format!("seller: {}\n  [{}; {}]", r.bot_reply, r.bot_da, r.bot_strategies.join(", "))
            }),
        };
        match result {
            Ok(text) => writeln!(out, "{text}")?,
            Err(e @ (ServiceError::Conflict(_) | ServiceError::BadRequest(_))) => writeln!(out, "{e}")?,
            Err(e) => return Err(e.into()),
        }
        if engine.snapshot(&id)?.outcome.is_some() {
            break;
        }
    }
    Ok(())
}

pub fn chat(a: &ChatArgs) -> Result<()> {
    let model = load(&a.checkpoint)?;
    let scenario = Scenario::new(a.listed, a.target, a.title.clone())?;
    let engine = Engine::new(Some(model));
    let stdin = std::io::stdin();
    chat_loop(&engine, scenario, stdin.lock(), std::io::stdout().lock())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let model = a.checkpoint.as_deref().map(load).transpose()?;
    if model.is_none() {
        log::warn!("no checkpoint given; session requests will be refused");
    }
    let engine = Arc::new(Engine::new(model));
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(negograph_service::serve(engine, addr)).with_context(|| format!("serving on {addr}"))
}
