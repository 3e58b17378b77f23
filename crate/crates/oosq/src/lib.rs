//! File-backed pipeline around `oosq-core`: configuration, NDJSON storage,
//! the HTTP and mock gateways, and the command-line stages.

pub mod cli;
pub mod config;
pub mod datastore;
pub mod error;
pub mod gateway;
pub mod ingest;
pub mod report;
pub mod vectors;
