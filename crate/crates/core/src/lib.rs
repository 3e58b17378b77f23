//! Allocation-only core of the out-of-scope question toolkit.
//!
//! Everything in this crate is pure computation over in-memory values. LLM
//! access goes through the [`gateway::ChatGateway`] trait; file formats,
//! HTTP, caching and the command line live in the `oosq` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod forge;
pub mod gateway;
pub mod harness;
pub mod metrics;
pub mod probe;
pub mod prompt;
pub mod retrieval;
mod text;

pub use corpus::Document;
pub use forge::{Claim, ClaimKind, ForgeConfig, QuestionRecord, Scope};
pub use gateway::{ChatGateway, ChatRequest, ChatResponse, GatewayError};
pub use harness::{Judgement, Verdict as MajorityVerdict};
pub use metrics::YesNo;
pub use prompt::{TemplateId, Verdict};
