//! Sequential multi-agent sentiment analysis with probabilistic outputs.
//!
//! A text instance is classified by one of three systems:
//!
//! * `single` — one model call that outputs a probability per label.
//! * `kcs` — a shared document circulates through N agents; each agent reads
//!   the accumulated analyses and appends its own analysis, a one-sentence
//!   reasoning, and a fresh distribution. A judge call fuses the finished
//!   document into the final distribution.
//! * `kcs_ibc` — same circulation, but paused once mid-run for an informal
//!   chat session in which every agent drops a free-form comment. The
//!   comments join the document and are visible to the remaining agents and
//!   to the judge.
//!
//! The crate also ships dataset loaders, classification and calibration
//! metrics with per-step uncertainty dynamics, a scripted backend for
//! deterministic offline runs, and the experiment runner behind the
//! `kairanban` CLI.

pub mod backend;
pub mod datasets;
pub mod document;
pub mod experiment;
pub mod fixtures;
pub mod metrics;
pub mod orchestrator;
pub mod prob;
pub mod prompting;

pub use backend::{
    Backend, BackendError, CompletionRequest, CompletionResponse, HttpBackend, Message,
    RetryPolicy, ScriptedBackend,
};
pub use document::{AgentStepRecord, Comment, Document};
pub use orchestrator::{FinalizeMode, PipelineConfig, PipelineRunner, System, Transcript};
pub use prob::{LabelSpace, ProbabilityVector};
