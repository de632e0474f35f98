//! Canned reply scripts for offline runs.
//!
//! A script is a JSON-lines file, one reply per line, consumed front to back;
//! an entry may instead carry a prompt fingerprint to answer one specific
//! prompt. [`converging_script`] builds the standard demo script whose
//! distributions tighten step by step, so uncertainty metrics have a known
//! signature to test against.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ScriptedBackend;
use crate::prob::LabelSpace;

/// Errors from reading or writing script files.
#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("failed to read script {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("script line {line} is not a valid entry: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// One scripted reply, optionally pinned to a prompt fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub reply: String,
}

/// An ordered collection of scripted replies.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn from_replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            entries: replies
                .into_iter()
                .map(|reply| ScriptEntry {
                    fingerprint: None,
                    reply: reply.into(),
                })
                .collect(),
        }
    }

    pub fn push_reply(&mut self, reply: impl Into<String>) {
        self.entries.push(ScriptEntry {
            fingerprint: None,
            reply: reply.into(),
        });
    }

    pub fn push_keyed(&mut self, fingerprint: impl Into<String>, reply: impl Into<String>) {
        self.entries.push(ScriptEntry {
            fingerprint: Some(fingerprint.into()),
            reply: reply.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes to JSON lines, one entry per line, trailing newline.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("script entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses JSON lines; blank lines are ignored, anything else must be an
    /// entry.
    pub fn from_jsonl(text: &str) -> Result<Self, FixtureError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|source| FixtureError::Parse {
                    line: i + 1,
                    source,
                })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), FixtureError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| FixtureError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Builds the replay backend: keyed entries answer their prompt, unkeyed
    /// entries queue up in order.
    pub fn to_backend(&self) -> ScriptedBackend {
        let mut queue = Vec::new();
        let mut by_fingerprint = HashMap::new();
        for entry in &self.entries {
            match &entry.fingerprint {
                Some(fp) => {
                    by_fingerprint.insert(fp.clone(), entry.reply.clone());
                }
                None => queue.push(entry.reply.clone()),
            }
        }
        ScriptedBackend::with_parts(queue, by_fingerprint)
    }
}

/// Formats a well-formed circulation-step reply: `Analysis:` line,
/// `Reasoning:` line, fenced JSON probability block.
pub fn step_reply(analysis: &str, reasoning: &str, space: &LabelSpace, probs: &[f64]) -> String {
    assert_eq!(
        space.k(),
        probs.len(),
        "probability count must match the label space"
    );
    let mut map = serde_json::Map::new();
    for (label, p) in space.labels().iter().zip(probs) {
        map.insert(label.clone(), serde_json::json!(p));
    }
    format!(
        "Analysis: {analysis}\nReasoning: {reasoning}\n```json\n{}\n```",
        serde_json::Value::Object(map)
    )
}

/// Mixture weight of the one-hot component at circulation step `s` of `n`.
/// Grows linearly from 0.25 to 0.85, so entropy falls and variance rises
/// strictly with every step.
fn convergence_weight(s: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        0.25 + 0.6 * (s - 1) as f64 / (n - 1) as f64
    }
}

fn mixture(space: &LabelSpace, weight: f64) -> Vec<f64> {
    let k = space.k() as f64;
    (0..space.k())
        .map(|i| (1.0 - weight) / k + if i == 0 { weight } else { 0.0 })
        .collect()
}

/// The standard offline demo script for a `kcs_ibc` run: replies arrive in
/// exactly the order the pipeline asks for them (steps before the chat
/// session, one comment per participant, the remaining steps, the judge),
/// and each step's distribution is strictly more peaked than the previous
/// one. The judge is more confident still.
pub fn converging_script(n_agents: usize, ibc_index: usize, space: &LabelSpace) -> Script {
    let target = space.label(0);
    let step = |s: usize| {
        step_reply(
            &format!("Pass {s}: the text reads {target}, and the accumulated entries agree."),
            &format!("Pass {s}: each reading firms up the {target} call a little more."),
            space,
            &mixture(space, convergence_weight(s, n_agents)),
        )
    };
    let mut script = Script::default();
    for s in 1..ibc_index {
        script.push_reply(step(s));
    }
    for j in 0..=n_agents {
        script.push_reply(format!(
            "Participant {j} here — still sounds {target} to me, though the certainty in the document feels a touch high."
        ));
    }
    for s in ibc_index..=n_agents {
        script.push_reply(step(s));
    }
    script.push_reply(step_reply(
        "Weighing every entry, the document converged cleanly.",
        &format!("All entries point to {target} with rising confidence."),
        space,
        &mixture(space, 0.9),
    ));
    script
}

/// A same-shaped script whose every distribution is uniform: the flat
/// baseline signature (entropy pinned at ln k, variance at zero).
pub fn uniform_script(n_agents: usize, ibc_index: usize, space: &LabelSpace) -> Script {
    let uniform = vec![1.0 / space.k() as f64; space.k()];
    let step = |s: usize| {
        step_reply(
            &format!("Pass {s}: no clear signal either way."),
            &format!("Pass {s}: the cues balance out, so no label stands out."),
            space,
            &uniform,
        )
    };
    let mut script = Script::default();
    for s in 1..ibc_index {
        script.push_reply(step(s));
    }
    for j in 0..=n_agents {
        script.push_reply(format!("Participant {j}: honestly, it could go any way."));
    }
    for s in ibc_index..=n_agents {
        script.push_reply(step(s));
    }
    script.push_reply(step_reply(
        "The document never picked a side.",
        "No entry justifies leaning off the fence.",
        space,
        &uniform,
    ));
    script
}
