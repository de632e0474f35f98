//! The shared document that circulates through the agents.
//!
//! A run starts from a seed step (index 0) holding fixed sentinel text and an
//! all-zero placeholder distribution; no model call produces it. Each agent
//! then appends exactly one step. A chat session may later append one comment
//! per participant. The document is append-only: steps stay contiguous and
//! comments arrive once, in agent order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::ProbabilityVector;

/// Analysis text of the seed step. Deliberately content-free so it cannot
/// steer the first real agent.
pub const INITIAL_ANALYSIS: &str = "(no analysis yet; the document has not circulated)";

/// Reasoning sentence of the seed step.
pub const INITIAL_REASONING: &str =
    "(no initial hypothesis; the first reviewer starts from the text alone)";

/// Substituted analysis/reasoning/comment text when a reply stayed
/// unparseable after the re-ask.
pub const DEGRADED_OUTPUT: &str = "(no parseable output)";

/// Errors from document construction and mutation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DocumentError {
    #[error("instance text is empty")]
    EmptyInstance,
    #[error("expected step index {expected}, got {got}")]
    NonContiguousStep { expected: usize, got: usize },
    #[error("step {index} must carry a real distribution, not a placeholder")]
    PlaceholderStep { index: usize },
    #[error("step {index} has {got} probabilities, the document uses {expected}")]
    WrongArity {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("comment from agent {agent_index} is empty")]
    EmptyComment { agent_index: usize },
    #[error("comments were already appended")]
    CommentsAlreadyPresent,
    #[error("comment {position} has agent index {got}, expected {expected}")]
    BadCommentOrder {
        position: usize,
        expected: usize,
        got: usize,
    },
}

/// One agent's contribution to the document: a free-form analysis, a
/// one-sentence reasoning, and a probability distribution over the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStepRecord {
    pub agent_index: usize,
    pub analysis: String,
    pub reasoning: String,
    pub distribution: ProbabilityVector,
}

impl AgentStepRecord {
    /// The seed step: sentinel texts plus the all-zero placeholder.
    pub fn seed(k: usize) -> Self {
        Self {
            agent_index: 0,
            analysis: INITIAL_ANALYSIS.to_string(),
            reasoning: INITIAL_REASONING.to_string(),
            distribution: ProbabilityVector::placeholder(k),
        }
    }
}

/// One chat comment. The text is guaranteed non-empty after trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    agent_index: usize,
    text: String,
}

impl Comment {
    pub fn new(agent_index: usize, text: impl Into<String>) -> Result<Self, DocumentError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DocumentError::EmptyComment { agent_index });
        }
        Ok(Self { agent_index, text })
    }

    pub fn agent_index(&self) -> usize {
        self.agent_index
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// The circulating document: the instance text, the contiguous step history,
/// and (after a chat session) the comments.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    input_text: String,
    steps: Vec<AgentStepRecord>,
    comments: Vec<Comment>,
}

impl Document {
    /// Creates a document seeded with the sentinel step 0 for a `k`-class
    /// label space. Rejects whitespace-only instance text.
    pub fn new(input_text: impl Into<String>, k: usize) -> Result<Self, DocumentError> {
        let input_text = input_text.into();
        if input_text.trim().is_empty() {
            return Err(DocumentError::EmptyInstance);
        }
        Ok(Self {
            input_text,
            steps: vec![AgentStepRecord::seed(k)],
            comments: Vec::new(),
        })
    }

    pub fn input_text(&self) -> &str {
        &self.input_text
    }

    /// All steps, starting with the seed at index 0.
    pub fn steps(&self) -> &[AgentStepRecord] {
        &self.steps
    }

    /// The most recent step (at minimum the seed).
    pub fn last_step(&self) -> &AgentStepRecord {
        self.steps
            .last()
            .expect("document always has the seed step")
    }

    /// Index the next appended step must carry.
    pub fn next_step_index(&self) -> usize {
        self.steps.len()
    }

    pub fn comments(&self) -> &[Comment] {
        &self.comments
    }

    /// Appends an agent step. The step index must continue the sequence and
    /// real steps may not carry a placeholder distribution.
    pub fn push_step(&mut self, step: AgentStepRecord) -> Result<(), DocumentError> {
        let expected = self.steps.len();
        if step.agent_index != expected {
            return Err(DocumentError::NonContiguousStep {
                expected,
                got: step.agent_index,
            });
        }
        if step.distribution.is_placeholder() {
            return Err(DocumentError::PlaceholderStep {
                index: step.agent_index,
            });
        }
        let expected_k = self.steps[0].distribution.k();
        if step.distribution.k() != expected_k {
            return Err(DocumentError::WrongArity {
                index: step.agent_index,
                expected: expected_k,
                got: step.distribution.k(),
            });
        }
        self.steps.push(step);
        Ok(())
    }

    /// Appends the full comment batch from a chat session, once. Indices must
    /// run 0, 1, 2, … in order.
    pub fn push_comments(&mut self, comments: Vec<Comment>) -> Result<(), DocumentError> {
        if !self.comments.is_empty() {
            return Err(DocumentError::CommentsAlreadyPresent);
        }
        for (position, comment) in comments.iter().enumerate() {
            if comment.agent_index != position {
                return Err(DocumentError::BadCommentOrder {
                    position,
                    expected: position,
                    got: comment.agent_index,
                });
            }
        }
        self.comments = comments;
        Ok(())
    }
}
