//! Audit engine core: byte-exact cards, relation-first graphs,
//! evidence-anchored retrieval, hypothesis lifecycle and coverage-driven
//! planning, with all model reasoning behind a [`provider::Provider`].

pub mod agent;
pub mod beliefs;
pub mod builder;
pub mod error;
pub mod graph;
pub mod inbox;
pub mod ingest;
pub mod planning;
pub mod project;
pub mod provider;
pub mod report;
pub mod retrieval;
pub mod session;
pub mod storage;

pub use error::{Error, Result};
