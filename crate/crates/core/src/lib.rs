pub mod config;
pub mod corpus;
pub mod dialenc;
pub mod gnn;
pub mod graphbuild;
pub mod heads;
pub mod interpret;
pub mod model;
pub mod nd;
pub mod par;
pub mod synth;
pub mod tagger;
pub mod train;
