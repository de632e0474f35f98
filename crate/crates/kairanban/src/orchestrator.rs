//! Pipeline orchestration: circulation steps, the chat session, the judge,
//! and transcript assembly.
//!
//! Degradation policy: when a reply cannot be turned into a distribution,
//! the same prompt is re-asked once with an explicit format reminder. If the
//! second reply also fails, the step is substituted — uniform distribution,
//! sentinel text — marked degraded, and the run continues; a flaky reply
//! never aborts an instance. Transport and auth errors, by contrast, do
//! abort: they are infrastructure problems, not model sloppiness.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest, DEFAULT_MAX_TOKENS};
use crate::document::{AgentStepRecord, Comment, Document, DocumentError, DEGRADED_OUTPUT};
use crate::prob::{LabelSpace, ProbabilityVector};
use crate::prompting::{parse_agent_output, IbcInputs, PromptError, PromptSet, RenderedPrompt};

/// Default number of circulating agents.
pub const DEFAULT_N_AGENTS: usize = 6;

/// Default 1-based step before which the chat session runs.
pub const DEFAULT_IBC_INDEX: usize = 3;

/// Which system processes an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    /// One direct call.
    Single,
    /// Sequential circulation through all agents, then finalization.
    Kcs,
    /// Circulation with one informal chat session inserted mid-run.
    KcsIbc,
}

impl System {
    pub const ALL: [System; 3] = [System::Single, System::Kcs, System::KcsIbc];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Single => "single",
            System::Kcs => "kcs",
            System::KcsIbc => "kcs_ibc",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "single" => Ok(System::Single),
            "kcs" => Ok(System::Kcs),
            "kcs_ibc" | "kcs-ibc" => Ok(System::KcsIbc),
            other => Err(format!(
                "unknown system {other:?}; expected single, kcs, or kcs_ibc"
            )),
        }
    }
}

/// How a circulation run produces its final distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalizeMode {
    /// A dedicated judge call fuses the finished document (default).
    Judge,
    /// Skip the judge; the last agent's distribution is the answer.
    LastStep,
}

impl fmt::Display for FinalizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinalizeMode::Judge => "judge",
            FinalizeMode::LastStep => "last_step",
        })
    }
}

impl FromStr for FinalizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "judge" => Ok(FinalizeMode::Judge),
            "last_step" | "last-step" => Ok(FinalizeMode::LastStep),
            other => Err(format!(
                "unknown finalize mode {other:?}; expected judge or last_step"
            )),
        }
    }
}

/// Which stage of a run a call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Kcs,
    Ibc,
    Judge,
    Single,
}

/// Per-instance pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub system: System,
    pub n_agents: usize,
    /// The chat session runs after step `ibc_index - 1`, before step
    /// `ibc_index` (1-based; only used by [`System::KcsIbc`]).
    pub ibc_index: usize,
    pub space: LabelSpace,
    pub finalize: FinalizeMode,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl PipelineConfig {
    pub fn new(system: System, space: LabelSpace) -> Self {
        Self {
            system,
            n_agents: DEFAULT_N_AGENTS,
            ibc_index: DEFAULT_IBC_INDEX,
            space,
            finalize: FinalizeMode::Judge,
            model: "default".to_string(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.system != System::Single && self.n_agents < 1 {
            return Err(OrchestratorError::InvalidConfig(
                "n_agents must be at least 1".into(),
            ));
        }
        if self.system == System::KcsIbc && !(1..=self.n_agents).contains(&self.ibc_index) {
            return Err(OrchestratorError::InvalidConfig(format!(
                "ibc_index must lie in 1..={}, got {}",
                self.n_agents, self.ibc_index
            )));
        }
        if self.model.trim().is_empty() {
            return Err(OrchestratorError::InvalidConfig("model is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(OrchestratorError::InvalidConfig(format!(
                "temperature {} is invalid",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(OrchestratorError::InvalidConfig(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Model calls a full run makes under this config.
    pub fn expected_calls(&self) -> usize {
        let judge = usize::from(self.finalize == FinalizeMode::Judge);
        match self.system {
            System::Single => 1,
            System::Kcs => self.n_agents + judge,
            System::KcsIbc => self.n_agents + (self.n_agents + 1) + judge,
        }
    }
}

/// Errors that abort an instance run.
#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("operation needs system {expected}, config says {actual}")]
    WrongSystem { expected: System, actual: System },
    #[error("step {agent_index} outside 1..={n_agents}")]
    StepOutOfRange { agent_index: usize, n_agents: usize },
    #[error("step {agent_index} was already taken")]
    StepAlreadyTaken { agent_index: usize },
    #[error("chat session must run with exactly {expected} entries present, document has {got}")]
    IbcTiming { expected: usize, got: usize },
    #[error("chat session needs the analysis of agent {agent_index}")]
    MissingAnalysis { agent_index: usize },
}

/// What a call produced, as stored in the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParsedCall {
    /// A circulation step: analysis, reasoning, normalized distribution.
    Step {
        analysis: String,
        reasoning: String,
        distribution: ProbabilityVector,
    },
    /// A chat comment.
    Comment { text: String },
    /// A bare distribution (judge and single calls).
    Distribution { distribution: ProbabilityVector },
    /// An unusable reply. `substituted` is set on the reply that triggered
    /// the degradation substitute.
    Failed {
        error: String,
        substituted: Option<ProbabilityVector>,
    },
}

/// One model call: prompt, raw reply, parse outcome, bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub phase: Phase,
    /// The judge records agent index 0: finalization returns to the head of
    /// the chain rather than introducing an extra participant.
    pub agent_index: usize,
    pub prompt: String,
    pub fingerprint: String,
    pub raw_response: String,
    pub parsed: ParsedCall,
    pub degraded: bool,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

/// Everything one instance run did, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub instance_id: String,
    pub config: PipelineConfig,
    pub calls: Vec<CallRecord>,
    /// Distribution after each circulation step (one entry for `single`).
    pub per_step_distributions: Vec<ProbabilityVector>,
    pub final_distribution: ProbabilityVector,
}

impl Transcript {
    /// Phases of the calls, in order.
    pub fn phase_sequence(&self) -> Vec<Phase> {
        self.calls.iter().map(|c| c.phase).collect()
    }

    /// Number of calls that ended degraded.
    pub fn degraded_count(&self) -> usize {
        self.calls.iter().filter(|c| c.degraded).count()
    }

    pub fn degraded_any(&self) -> bool {
        self.calls.iter().any(|c| c.degraded)
    }
}

enum CallKind {
    Step,
    Distribution,
}

struct StepOutcome {
    analysis: String,
    reasoning: String,
    distribution: ProbabilityVector,
}

/// Runs instances through the configured system against a backend.
pub struct PipelineRunner {
    config: PipelineConfig,
    backend: Arc<dyn Backend>,
    prompts: Arc<PromptSet>,
}

impl PipelineRunner {
    pub fn new(
        config: PipelineConfig,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, OrchestratorError> {
        Self::with_prompts(config, backend, Arc::new(PromptSet::builtin()))
    }

    pub fn with_prompts(
        config: PipelineConfig,
        backend: Arc<dyn Backend>,
        prompts: Arc<PromptSet>,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        Ok(Self {
            config,
            backend,
            prompts,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Seeds the document for an instance.
    pub fn init_document(&self, input_text: &str) -> Result<Document, OrchestratorError> {
        Ok(Document::new(input_text, self.config.space.k())?)
    }

    fn request_for(&self, prompt: &RenderedPrompt) -> CompletionRequest {
        let mut request = CompletionRequest::new(self.config.model.clone(), prompt.messages());
        request.temperature = self.config.temperature;
        request.max_tokens = self.config.max_tokens;
        request
    }

    /// Tries to turn a reply into a full step outcome.
    fn try_parse(&self, reply: &str) -> Result<(String, String, ProbabilityVector), String> {
        let parsed = parse_agent_output(reply, &self.config.space).map_err(|e| e.to_string())?;
        let distribution =
            ProbabilityVector::normalize(&parsed.raw_probs).map_err(|e| e.to_string())?;
        Ok((parsed.analysis, parsed.reasoning, distribution))
    }

    /// One distribution-bearing call with the re-ask-then-substitute policy.
    async fn call_for_distribution(
        &self,
        phase: Phase,
        agent_index: usize,
        prompt: &RenderedPrompt,
        kind: CallKind,
        records: &mut Vec<CallRecord>,
    ) -> Result<StepOutcome, OrchestratorError> {
        let mut active = prompt.clone();
        for round in 0..2 {
            let request = self.request_for(&active);
            let response = self.backend.complete(&request).await?;
            let last_round = round == 1;
            match self.try_parse(&response.text) {
                Ok((analysis, reasoning, distribution)) => {
                    let parsed = match kind {
                        CallKind::Step => ParsedCall::Step {
                            analysis: analysis.clone(),
                            reasoning: reasoning.clone(),
                            distribution: distribution.clone(),
                        },
                        CallKind::Distribution => ParsedCall::Distribution {
                            distribution: distribution.clone(),
                        },
                    };
                    records.push(CallRecord {
                        phase,
                        agent_index,
                        prompt: request.concatenated_text(),
                        fingerprint: request.fingerprint(),
                        raw_response: response.text,
                        parsed,
                        degraded: false,
                        attempt_count: response.attempt_count,
                        latency_ms: response.latency_ms,
                    });
                    return Ok(StepOutcome {
                        analysis,
                        reasoning,
                        distribution,
                    });
                }
                Err(error) => {
                    let substituted =
                        last_round.then(|| ProbabilityVector::uniform(self.config.space.k()));
                    records.push(CallRecord {
                        phase,
                        agent_index,
                        prompt: request.concatenated_text(),
                        fingerprint: request.fingerprint(),
                        raw_response: response.text,
                        parsed: ParsedCall::Failed {
                            error,
                            substituted: substituted.clone(),
                        },
                        degraded: last_round,
                        attempt_count: response.attempt_count,
                        latency_ms: response.latency_ms,
                    });
                    if let Some(distribution) = substituted {
                        return Ok(StepOutcome {
                            analysis: DEGRADED_OUTPUT.to_string(),
                            reasoning: DEGRADED_OUTPUT.to_string(),
                            distribution,
                        });
                    }
                    active = active.with_reask();
                }
            }
        }
        unreachable!("degradation substitutes on the second round");
    }

    /// One comment call with the same re-ask-then-substitute policy; only an
    /// effectively empty reply counts as unparseable here.
    async fn call_for_comment(
        &self,
        agent_index: usize,
        prompt: &RenderedPrompt,
        records: &mut Vec<CallRecord>,
    ) -> Result<Comment, OrchestratorError> {
        let mut active = prompt.clone();
        for round in 0..2 {
            let request = self.request_for(&active);
            let response = self.backend.complete(&request).await?;
            let last_round = round == 1;
            match Comment::new(agent_index, response.text.trim()) {
                Ok(comment) => {
                    records.push(CallRecord {
                        phase: Phase::Ibc,
                        agent_index,
                        prompt: request.concatenated_text(),
                        fingerprint: request.fingerprint(),
                        raw_response: response.text,
                        parsed: ParsedCall::Comment {
                            text: comment.text().to_string(),
                        },
                        degraded: false,
                        attempt_count: response.attempt_count,
                        latency_ms: response.latency_ms,
                    });
                    return Ok(comment);
                }
                Err(error) => {
                    records.push(CallRecord {
                        phase: Phase::Ibc,
                        agent_index,
                        prompt: request.concatenated_text(),
                        fingerprint: request.fingerprint(),
                        raw_response: response.text,
                        parsed: ParsedCall::Failed {
                            error: error.to_string(),
                            substituted: None,
                        },
                        degraded: last_round,
                        attempt_count: response.attempt_count,
                        latency_ms: response.latency_ms,
                    });
                    if last_round {
                        return Ok(Comment::new(agent_index, DEGRADED_OUTPUT)
                            .expect("sentinel comment text is non-empty"));
                    }
                    active = active.with_reask();
                }
            }
        }
        unreachable!("degradation substitutes on the second round");
    }

    /// Runs circulation step `agent_index` (1-based) and appends the entry to
    /// the document.
    pub async fn kcs_step(
        &self,
        doc: &mut Document,
        agent_index: usize,
    ) -> Result<Vec<CallRecord>, OrchestratorError> {
        if agent_index == 0 || agent_index > self.config.n_agents {
            return Err(OrchestratorError::StepOutOfRange {
                agent_index,
                n_agents: self.config.n_agents,
            });
        }
        if doc.next_step_index() > agent_index {
            return Err(OrchestratorError::StepAlreadyTaken { agent_index });
        }
        let prompt =
            self.prompts
                .render_kcs(doc, agent_index, self.config.n_agents, &self.config.space)?;
        let mut records = Vec::new();
        let outcome = self
            .call_for_distribution(
                Phase::Kcs,
                agent_index,
                &prompt,
                CallKind::Step,
                &mut records,
            )
            .await?;
        doc.push_step(AgentStepRecord {
            agent_index,
            analysis: outcome.analysis,
            reasoning: outcome.reasoning,
            distribution: outcome.distribution,
        })?;
        Ok(records)
    }

    /// Runs the full chat session: one comment per participant, visible to
    /// later participants while the session runs, all appended to the
    /// document at the end.
    pub async fn ibc_session(
        &self,
        doc: &mut Document,
    ) -> Result<Vec<CallRecord>, OrchestratorError> {
        let m = self.config.ibc_index;
        if doc.next_step_index() != m {
            return Err(OrchestratorError::IbcTiming {
                expected: m,
                got: doc.next_step_index(),
            });
        }
        if !doc.comments().is_empty() {
            return Err(OrchestratorError::Document(
                DocumentError::CommentsAlreadyPresent,
            ));
        }
        let analysis_of = |j: usize| -> Result<&str, OrchestratorError> {
            doc.steps()
                .get(j)
                .map(|s| s.analysis.as_str())
                .ok_or(OrchestratorError::MissingAnalysis { agent_index: j })
        };

        let mut records = Vec::new();
        let mut session: Vec<Comment> = Vec::new();
        for j in 0..=self.config.n_agents {
            let inputs = if j == 0 {
                IbcInputs {
                    agent_index: j,
                    own_analysis: Some(analysis_of(0)?),
                    prev_analysis: None,
                    comments: &[],
                }
            } else if j < m {
                IbcInputs {
                    agent_index: j,
                    own_analysis: Some(analysis_of(j)?),
                    prev_analysis: Some((j - 1, analysis_of(j - 1)?)),
                    comments: &session,
                }
            } else if j == m {
                IbcInputs {
                    agent_index: j,
                    own_analysis: None,
                    prev_analysis: Some((m - 1, analysis_of(m - 1)?)),
                    comments: &session,
                }
            } else {
                IbcInputs {
                    agent_index: j,
                    own_analysis: None,
                    prev_analysis: None,
                    comments: &session,
                }
            };
            let prompt =
                self.prompts
                    .render_ibc(doc.input_text(), &inputs, self.config.n_agents)?;
            let comment = self.call_for_comment(j, &prompt, &mut records).await?;
            session.push(comment);
        }
        doc.push_comments(session)?;
        Ok(records)
    }

    /// The final judge call over a finished document.
    pub async fn judge_finalize(
        &self,
        doc: &Document,
    ) -> Result<(ProbabilityVector, Vec<CallRecord>), OrchestratorError> {
        let prompt = self
            .prompts
            .render_judge(doc, self.config.n_agents, &self.config.space)?;
        let mut records = Vec::new();
        let outcome = self
            .call_for_distribution(
                Phase::Judge,
                0,
                &prompt,
                CallKind::Distribution,
                &mut records,
            )
            .await?;
        Ok((outcome.distribution, records))
    }

    /// Runs the one-call baseline.
    pub async fn run_single(
        &self,
        instance_id: &str,
        input_text: &str,
    ) -> Result<Transcript, OrchestratorError> {
        if self.config.system != System::Single {
            return Err(OrchestratorError::WrongSystem {
                expected: System::Single,
                actual: self.config.system,
            });
        }
        // Seed a document purely to reuse the instance-text validation.
        let _ = self.init_document(input_text)?;
        let prompt = self.prompts.render_single(input_text, &self.config.space)?;
        let mut records = Vec::new();
        let outcome = self
            .call_for_distribution(
                Phase::Single,
                0,
                &prompt,
                CallKind::Distribution,
                &mut records,
            )
            .await?;
        Ok(Transcript {
            instance_id: instance_id.to_string(),
            config: self.config.clone(),
            calls: records,
            per_step_distributions: vec![outcome.distribution.clone()],
            final_distribution: outcome.distribution,
        })
    }

    /// Runs a circulation system end to end.
    pub async fn run_pipeline(
        &self,
        instance_id: &str,
        input_text: &str,
    ) -> Result<Transcript, OrchestratorError> {
        if self.config.system == System::Single {
            return Err(OrchestratorError::WrongSystem {
                expected: System::Kcs,
                actual: self.config.system,
            });
        }
        let mut doc = self.init_document(input_text)?;
        let mut calls = Vec::new();
        for agent_index in 1..=self.config.n_agents {
            if self.config.system == System::KcsIbc && agent_index == self.config.ibc_index {
                calls.extend(self.ibc_session(&mut doc).await?);
            }
            calls.extend(self.kcs_step(&mut doc, agent_index).await?);
        }
        let final_distribution = match self.config.finalize {
            FinalizeMode::Judge => {
                let (distribution, judge_calls) = self.judge_finalize(&doc).await?;
                calls.extend(judge_calls);
                distribution
            }
            FinalizeMode::LastStep => doc.last_step().distribution.clone(),
        };
        Ok(Transcript {
            instance_id: instance_id.to_string(),
            config: self.config.clone(),
            calls,
            per_step_distributions: doc.steps()[1..]
                .iter()
                .map(|s| s.distribution.clone())
                .collect(),
            final_distribution,
        })
    }

    /// Runs whatever system the config selects.
    pub async fn run(
        &self,
        instance_id: &str,
        input_text: &str,
    ) -> Result<Transcript, OrchestratorError> {
        match self.config.system {
            System::Single => self.run_single(instance_id, input_text).await,
            _ => self.run_pipeline(instance_id, input_text).await,
        }
    }
}
