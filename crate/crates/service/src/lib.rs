//! Session-oriented HTTP API for live buyer-bot negotiation.
//!
//! The [`engine::Engine`] owns sessions and the shared read-only model;
//! [`http`] maps it onto JSON endpoints.

pub mod engine;
pub mod http;

pub use engine::{Engine, ServiceError, API_VERSION, TRACE_EDGE_LIMIT};
pub use http::{router, serve};
