//! Prompt templates, rendering, and reply parsing.
//!
//! Templates live in plain text files: a system preamble, a line holding only
//! `---`, then the user body. Both halves may contain `{{slot}}` markers.
//! Substitution is single-pass, so slot values (for example the instance
//! text) are never re-scanned for markers.
//!
//! Replies are expected to carry the probabilities in a fenced code block
//! containing one JSON object that maps every label to a number. Everything
//! around the block is mined for `Analysis:` / `Reasoning:` lines, with
//! first-sentence fallbacks, so a sloppy but well-meaning reply still parses.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::Message;
use crate::document::{Comment, Document};
use crate::prob::{LabelSpace, ProbabilityVector};

/// Fallback reasoning when a reply offers no usable sentence.
pub const NO_REASONING: &str = "(no reasoning given)";

/// Fallback analysis when a reply is nothing but the probability block.
pub const NO_ANALYSIS: &str = "(no analysis given)";

/// Instruction appended verbatim to the user prompt on the one re-ask after
/// an unparseable reply.
pub const REASK_INSTRUCTION: &str =
    "Your previous reply could not be parsed. Respond with only the fenced JSON block.";

/// Errors from template handling, rendering preconditions, and reply parsing.
#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template is missing the '---' separator between preamble and body")]
    MissingSeparator,
    #[error("template slot {{{{{name}}}}} has no value")]
    UnknownSlot { name: String },
    #[error("template has an unclosed '{{{{' marker")]
    UnclosedSlot,
    #[error("failed to read template {path}: {source}")]
    TemplateIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("reply has no parseable probability block: {reason}")]
    ParseFailure { reason: String },
    #[error("probability block does not match the label space: {detail}")]
    LabelMismatch { detail: String },
    #[error("probability for label {label:?} is not a number")]
    NonNumeric { label: String },
    #[error("agent {agent_index} has no predecessor entry to read")]
    MissingPredecessor { agent_index: usize },
    #[error("judge needs all {expected} agent entries, found {got}")]
    MissingSteps { expected: usize, got: usize },
}

/// A parsed template: system preamble plus user body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role_preamble: String,
    pub body: String,
}

impl PromptTemplate {
    /// Splits a template source at the first line consisting of `---`.
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut preamble = Vec::new();
        let mut lines = source.lines();
        for line in lines.by_ref() {
            if line.trim_end() == "---" {
                let body: Vec<&str> = lines.collect();
                return Ok(Self {
                    role_preamble: preamble.join("\n").trim().to_string(),
                    body: body.join("\n").trim_end().to_string(),
                });
            }
            preamble.push(line);
        }
        Err(PromptError::MissingSeparator)
    }
}

/// A rendered prompt: one system message and one user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// The chat messages this prompt turns into.
    pub fn messages(&self) -> Vec<Message> {
        vec![
            Message::system(self.system.clone()),
            Message::user(self.user.clone()),
        ]
    }

    /// Copy of this prompt with the re-ask instruction appended to the user
    /// message.
    pub fn with_reask(&self) -> Self {
        Self {
            system: self.system.clone(),
            user: format!("{}\n\n{}", self.user, REASK_INSTRUCTION),
        }
    }
}

/// Single-pass `{{slot}}` substitution; values are never re-scanned.
fn substitute(template: &str, slots: &HashMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or(PromptError::UnclosedSlot)?;
        let name = after[..end].trim();
        let value = slots.get(name).ok_or_else(|| PromptError::UnknownSlot {
            name: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders a distribution for a prompt, label by label at four decimals. The
/// seed placeholder renders as literal zeros.
pub fn format_distribution(p: &ProbabilityVector, space: &LabelSpace) -> String {
    let inner = space
        .labels()
        .iter()
        .zip(p.entries())
        .map(|(label, value)| format!("{label:?}: {value:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("{{{inner}}}")
}

/// Inputs for one chat-session comment prompt. Which fields are set encodes
/// the speaker's position in the session:
///
/// * the opening speaker sees only their own earlier analysis;
/// * speakers who already wrote an entry see their own analysis, the
///   previous agent's analysis, and the chat so far;
/// * the first speaker without an entry sees the most recent analysis and
///   the chat so far;
/// * everyone after that sees only the chat so far.
#[derive(Debug, Clone, Default)]
pub struct IbcInputs<'a> {
    pub agent_index: usize,
    pub own_analysis: Option<&'a str>,
    /// `(agent index, analysis text)` of the most recent other entry shown.
    pub prev_analysis: Option<(usize, &'a str)>,
    pub comments: &'a [Comment],
}

/// The four templates a run needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    kcs: PromptTemplate,
    ibc: PromptTemplate,
    single: PromptTemplate,
    judge: PromptTemplate,
}

fn comment_lines(comments: &[Comment]) -> String {
    comments
        .iter()
        .map(|c| format!("agent {}: {}", c.agent_index(), c.text()))
        .collect::<Vec<_>>()
        .join("\n")
}

impl PromptSet {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        Self {
            kcs: PromptTemplate::parse(include_str!("../templates/kcs.txt"))
                .expect("built-in kcs template is valid"),
            ibc: PromptTemplate::parse(include_str!("../templates/ibc.txt"))
                .expect("built-in ibc template is valid"),
            single: PromptTemplate::parse(include_str!("../templates/single.txt"))
                .expect("built-in single template is valid"),
            judge: PromptTemplate::parse(include_str!("../templates/judge.txt"))
                .expect("built-in judge template is valid"),
        }
    }

    /// Loads `kcs.txt`, `ibc.txt`, `single.txt`, and `judge.txt` from a
    /// directory, for prompt experiments without a rebuild.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| -> Result<PromptTemplate, PromptError> {
            let path = dir.join(name);
            let source = std::fs::read_to_string(&path)
                .map_err(|source| PromptError::TemplateIo { path, source })?;
            PromptTemplate::parse(&source)
        };
        Ok(Self {
            kcs: read("kcs.txt")?,
            ibc: read("ibc.txt")?,
            single: read("single.txt")?,
            judge: read("judge.txt")?,
        })
    }

    fn render(
        template: &PromptTemplate,
        slots: &HashMap<&str, String>,
    ) -> Result<RenderedPrompt, PromptError> {
        Ok(RenderedPrompt {
            system: substitute(&template.role_preamble, slots)?,
            user: substitute(&template.body, slots)?,
        })
    }

    /// Prompt for circulation step `agent_index` (1-based). The document must
    /// already hold entries 0 through `agent_index - 1`.
    pub fn render_kcs(
        &self,
        doc: &Document,
        agent_index: usize,
        n_agents: usize,
        space: &LabelSpace,
    ) -> Result<RenderedPrompt, PromptError> {
        if agent_index == 0 || doc.steps().len() < agent_index {
            return Err(PromptError::MissingPredecessor { agent_index });
        }
        let prev = &doc.steps()[agent_index - 1];
        let prior_opinions = doc.steps()[..agent_index]
            .iter()
            .map(|s| format!("agent {}: {}", s.agent_index, s.reasoning))
            .collect::<Vec<_>>()
            .join("\n");
        let comments_section = if doc.comments().is_empty() {
            String::new()
        } else {
            format!(
                "Comments from the chat session:\n{}\n\n",
                comment_lines(doc.comments())
            )
        };
        let slots = HashMap::from([
            ("agent_index", agent_index.to_string()),
            ("n_agents", n_agents.to_string()),
            ("input_text", doc.input_text().to_string()),
            ("prev_index", prev.agent_index.to_string()),
            ("prev_analysis", prev.analysis.clone()),
            (
                "prev_distribution",
                format_distribution(&prev.distribution, space),
            ),
            ("prior_opinions", prior_opinions),
            ("comments_section", comments_section),
            ("labels", space.joined()),
        ]);
        Self::render(&self.kcs, &slots)
    }

    /// Prompt for one chat-session comment.
    pub fn render_ibc(
        &self,
        input_text: &str,
        inputs: &IbcInputs<'_>,
        n_agents: usize,
    ) -> Result<RenderedPrompt, PromptError> {
        let own_analysis_section = match inputs.own_analysis {
            Some(text) => format!("Your earlier analysis from the document:\n{text}\n\n"),
            None => String::new(),
        };
        let prev_analysis_section = match inputs.prev_analysis {
            Some((index, text)) => {
                format!("The most recent analysis from another agent (agent {index}):\n{text}\n\n")
            }
            None => String::new(),
        };
        let comments_section = if inputs.comments.is_empty() {
            String::new()
        } else {
            format!("The chat so far:\n{}\n\n", comment_lines(inputs.comments))
        };
        let slots = HashMap::from([
            ("agent_index", inputs.agent_index.to_string()),
            ("n_agents", n_agents.to_string()),
            ("input_text", input_text.to_string()),
            ("own_analysis_section", own_analysis_section),
            ("prev_analysis_section", prev_analysis_section),
            ("comments_section", comments_section),
        ]);
        Self::render(&self.ibc, &slots)
    }

    /// Prompt for the one-call baseline.
    pub fn render_single(
        &self,
        input_text: &str,
        space: &LabelSpace,
    ) -> Result<RenderedPrompt, PromptError> {
        let slots = HashMap::from([
            ("input_text", input_text.to_string()),
            ("labels", space.joined()),
        ]);
        Self::render(&self.single, &slots)
    }

    /// Prompt for the final judge call. The document must hold the seed plus
    /// all `n_agents` entries.
    pub fn render_judge(
        &self,
        doc: &Document,
        n_agents: usize,
        space: &LabelSpace,
    ) -> Result<RenderedPrompt, PromptError> {
        if doc.steps().len() != n_agents + 1 {
            return Err(PromptError::MissingSteps {
                expected: n_agents,
                got: doc.steps().len().saturating_sub(1),
            });
        }
        let agent_summaries = doc.steps()[1..]
            .iter()
            .map(|s| {
                format!(
                    "agent {} — reasoning: {}; probabilities: {}",
                    s.agent_index,
                    s.reasoning,
                    format_distribution(&s.distribution, space)
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let comments_section = if doc.comments().is_empty() {
            String::new()
        } else {
            format!(
                "Comments from the chat session:\n{}\n\n",
                comment_lines(doc.comments())
            )
        };
        let slots = HashMap::from([
            ("input_text", doc.input_text().to_string()),
            ("agent_summaries", agent_summaries),
            ("comments_section", comments_section),
            ("labels", space.joined()),
        ]);
        Self::render(&self.judge, &slots)
    }
}

/// The structured pieces mined from an agent reply.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAgentOutput {
    pub analysis: String,
    pub reasoning: String,
    /// Raw per-label weights in label-space order; not yet normalized.
    pub raw_probs: Vec<f64>,
}

/// Byte ranges of fenced code blocks, with language tags skipped.
fn fenced_blocks(text: &str) -> Vec<(std::ops::Range<usize>, &str)> {
    let mut blocks = Vec::new();
    let mut cursor = 0;
    while let Some(open) = text[cursor..].find("```") {
        let fence_start = cursor + open;
        let after_fence = fence_start + 3;
        // The rest of the fence line is a language tag; content starts on the
        // next line (or immediately, if the fence is inline).
        let content_start = match text[after_fence..].find('\n') {
            Some(nl) => after_fence + nl + 1,
            None => return blocks,
        };
        let Some(close) = text[content_start..].find("```") else {
            return blocks;
        };
        let content_end = content_start + close;
        blocks.push((
            fence_start..content_end + 3,
            &text[content_start..content_end],
        ));
        cursor = content_end + 3;
    }
    blocks
}

fn first_sentence(text: &str) -> Option<String> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return None;
    }
    for (i, c) in trimmed.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let sentence = trimmed[..i + c.len_utf8()].trim();
            if !sentence.is_empty() {
                return Some(sentence.to_string());
            }
        }
    }
    Some(trimmed.to_string())
}

/// Parses an agent reply: probability block, `Analysis:`, and `Reasoning:`.
///
/// The block must be a fenced JSON object naming every label exactly once
/// (case-insensitively). Missing `Reasoning:` falls back to the first
/// sentence outside the block, missing `Analysis:` to the whole remainder.
pub fn parse_agent_output(
    reply: &str,
    space: &LabelSpace,
) -> Result<ParsedAgentOutput, PromptError> {
    let blocks = fenced_blocks(reply);
    if blocks.is_empty() {
        return Err(PromptError::ParseFailure {
            reason: "no fenced code block found".into(),
        });
    }
    let mut chosen: Option<(
        std::ops::Range<usize>,
        serde_json::Map<String, serde_json::Value>,
    )> = None;
    for (range, content) in &blocks {
        if let Ok(serde_json::Value::Object(map)) =
            serde_json::from_str::<serde_json::Value>(content)
        {
            chosen = Some((range.clone(), map));
            break;
        }
    }
    let Some((range, map)) = chosen else {
        return Err(PromptError::ParseFailure {
            reason: "no fenced block contained a JSON object".into(),
        });
    };

    let mut raw_probs = vec![None; space.k()];
    for (key, value) in &map {
        let Some(index) = space.index_of(key) else {
            return Err(PromptError::LabelMismatch {
                detail: format!("unknown label {key:?}"),
            });
        };
        if raw_probs[index].is_some() {
            return Err(PromptError::LabelMismatch {
                detail: format!("label {:?} appears more than once", space.label(index)),
            });
        }
        let Some(number) = value.as_f64() else {
            return Err(PromptError::NonNumeric { label: key.clone() });
        };
        raw_probs[index] = Some(number);
    }
    let mut probs = Vec::with_capacity(space.k());
    for (index, slot) in raw_probs.into_iter().enumerate() {
        match slot {
            Some(p) => probs.push(p),
            None => {
                return Err(PromptError::LabelMismatch {
                    detail: format!("missing label {:?}", space.label(index)),
                })
            }
        }
    }

    let remainder = format!("{}\n{}", &reply[..range.start], &reply[range.end..]);
    let mut analysis_lines: Vec<String> = Vec::new();
    let mut reasoning: Option<String> = None;
    let mut in_analysis = false;
    for line in remainder.lines() {
        let trimmed = line.trim_start();
        let lower = trimmed.to_lowercase();
        if lower.starts_with("reasoning:") {
            reasoning = Some(trimmed["reasoning:".len()..].trim().to_string());
            in_analysis = false;
        } else if lower.starts_with("analysis:") {
            analysis_lines.push(trimmed["analysis:".len()..].trim().to_string());
            in_analysis = true;
        } else if in_analysis {
            analysis_lines.push(line.to_string());
        }
    }

    let analysis = if analysis_lines.is_empty() {
        let fallback = remainder.trim();
        if fallback.is_empty() {
            NO_ANALYSIS.to_string()
        } else {
            fallback.to_string()
        }
    } else {
        analysis_lines.join("\n").trim().to_string()
    };
    let reasoning = match reasoning {
        Some(r) if !r.is_empty() => r,
        _ => first_sentence(&remainder).unwrap_or_else(|| NO_REASONING.to_string()),
    };
    let reasoning = if reasoning.is_empty() {
        NO_REASONING.to_string()
    } else {
        reasoning
    };

    Ok(ParsedAgentOutput {
        analysis,
        reasoning,
        raw_probs: probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::AgentStepRecord;

    fn doc_with_steps(n: usize) -> Document {
        let mut doc = Document::new("The service was slow but the food made up for it.", 3)
            .expect("valid document");
        for i in 1..=n {
            doc.push_step(AgentStepRecord {
                agent_index: i,
                analysis: format!("analysis text {i}"),
                reasoning: format!("reasoning sentence {i}"),
                distribution: ProbabilityVector::new(vec![0.2, 0.3, 0.5]).unwrap(),
            })
            .unwrap();
        }
        doc
    }

    #[test]
    fn template_parse_splits_on_separator() {
        let t = PromptTemplate::parse("preamble line\n---\nbody one\nbody two\n").unwrap();
        assert_eq!(t.role_preamble, "preamble line");
        assert_eq!(t.body, "body one\nbody two");

        assert!(matches!(
            PromptTemplate::parse("no separator here").unwrap_err(),
            PromptError::MissingSeparator
        ));
    }

    #[test]
    fn substitution_is_single_pass_and_strict() {
        let slots = HashMap::from([("name", "{{evil}}".to_string())]);
        // A slot value containing markers is not re-expanded.
        assert_eq!(substitute("hi {{name}}!", &slots).unwrap(), "hi {{evil}}!");

        assert!(matches!(
            substitute("{{missing}}", &slots).unwrap_err(),
            PromptError::UnknownSlot { .. }
        ));
        assert!(matches!(
            substitute("{{open", &slots).unwrap_err(),
            PromptError::UnclosedSlot
        ));
    }

    #[test]
    fn distribution_formatting_is_fixed_width() {
        let space = LabelSpace::ternary();
        let p = ProbabilityVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(
            format_distribution(&p, &space),
            r#"{"negative": 0.2000, "neutral": 0.3000, "positive": 0.5000}"#
        );
        let placeholder = ProbabilityVector::placeholder(3);
        assert_eq!(
            format_distribution(&placeholder, &space),
            r#"{"negative": 0.0000, "neutral": 0.0000, "positive": 0.0000}"#
        );
    }

    #[test]
    fn kcs_prompt_carries_predecessor_and_all_prior_opinions() {
        let space = LabelSpace::ternary();
        let doc = doc_with_steps(2);
        let prompt = PromptSet::builtin().render_kcs(&doc, 3, 6, &space).unwrap();

        assert!(prompt.system.contains("agent 3 of 6"));
        assert!(prompt.user.contains(doc.input_text()));
        assert!(prompt.user.contains("analysis text 2"));
        // Opinions of the seed and both prior agents, in order.
        let p0 = prompt
            .user
            .find(crate::document::INITIAL_REASONING)
            .unwrap();
        let p1 = prompt.user.find("reasoning sentence 1").unwrap();
        let p2 = prompt.user.find("reasoning sentence 2").unwrap();
        assert!(p0 < p1 && p1 < p2);
        // All labels, in order, in the output instruction.
        assert!(prompt.user.contains("negative, neutral, positive"));
        // No chat section before any comments exist.
        assert!(!prompt.user.contains("chat session"));
    }

    #[test]
    fn kcs_prompt_requires_predecessor() {
        let space = LabelSpace::ternary();
        let doc = doc_with_steps(1);
        let err = PromptSet::builtin()
            .render_kcs(&doc, 3, 6, &space)
            .unwrap_err();
        assert!(matches!(
            err,
            PromptError::MissingPredecessor { agent_index: 3 }
        ));
    }

    #[test]
    fn first_kcs_prompt_renders_seed_sentinels_verbatim() {
        let space = LabelSpace::ternary();
        let doc = doc_with_steps(0);
        let prompt = PromptSet::builtin().render_kcs(&doc, 1, 6, &space).unwrap();
        assert!(prompt.user.contains(crate::document::INITIAL_ANALYSIS));
        assert!(prompt.user.contains(crate::document::INITIAL_REASONING));
        assert!(prompt
            .user
            .contains(r#"{"negative": 0.0000, "neutral": 0.0000, "positive": 0.0000}"#));
    }

    #[test]
    fn kcs_prompt_after_chat_includes_comments() {
        let space = LabelSpace::ternary();
        let mut doc = doc_with_steps(3);
        doc.push_comments(vec![
            Comment::new(0, "gut says positive").unwrap(),
            Comment::new(1, "the slowness reads negative to me").unwrap(),
        ])
        .unwrap();
        let prompt = PromptSet::builtin().render_kcs(&doc, 4, 6, &space).unwrap();
        assert!(prompt.user.contains("Comments from the chat session:"));
        assert!(prompt.user.contains("agent 0: gut says positive"));
        assert!(prompt
            .user
            .contains("agent 1: the slowness reads negative to me"));
    }

    #[test]
    fn ibc_prompt_renders_exactly_the_given_sections() {
        let set = PromptSet::builtin();
        let comments = vec![Comment::new(0, "looks positive overall").unwrap()];

        // Opener: own analysis only.
        let opener = set
            .render_ibc(
                "text",
                &IbcInputs {
                    agent_index: 0,
                    own_analysis: Some("my own take"),
                    prev_analysis: None,
                    comments: &[],
                },
                6,
            )
            .unwrap();
        assert!(opener.user.contains("my own take"));
        assert!(!opener.user.contains("The chat so far:"));
        assert!(!opener.user.contains("most recent analysis"));

        // Mid-session speaker with an entry: everything.
        let mid = set
            .render_ibc(
                "text",
                &IbcInputs {
                    agent_index: 2,
                    own_analysis: Some("my own take"),
                    prev_analysis: Some((1, "the take before mine")),
                    comments: &comments,
                },
                6,
            )
            .unwrap();
        assert!(mid.user.contains("my own take"));
        assert!(mid.user.contains("the take before mine"));
        assert!(mid.user.contains("agent 0: looks positive overall"));

        // Late speaker: comments only.
        let late = set
            .render_ibc(
                "text",
                &IbcInputs {
                    agent_index: 5,
                    own_analysis: None,
                    prev_analysis: None,
                    comments: &comments,
                },
                6,
            )
            .unwrap();
        assert!(!late.user.contains("my own take"));
        assert!(!late.user.contains("earlier analysis"));
        assert!(late.user.contains("agent 0: looks positive overall"));
    }

    #[test]
    fn single_prompt_lists_labels_in_order() {
        let space = LabelSpace::five_point();
        let prompt = PromptSet::builtin()
            .render_single("a gorgeous, moving film", &space)
            .unwrap();
        assert!(prompt.user.contains("a gorgeous, moving film"));
        assert!(prompt
            .user
            .contains("very negative, negative, neutral, positive, very positive"));
    }

    #[test]
    fn judge_prompt_requires_full_document() {
        let space = LabelSpace::ternary();
        let set = PromptSet::builtin();
        let doc = doc_with_steps(4);
        let err = set.render_judge(&doc, 6, &space).unwrap_err();
        assert!(matches!(
            err,
            PromptError::MissingSteps {
                expected: 6,
                got: 4
            }
        ));

        let doc = doc_with_steps(6);
        let prompt = set.render_judge(&doc, 6, &space).unwrap();
        for i in 1..=6 {
            assert!(prompt.user.contains(&format!("reasoning sentence {i}")));
        }
        // The seed entry is scaffolding, not an opinion; the judge never
        // sees it.
        assert!(!prompt.user.contains(crate::document::INITIAL_REASONING));
    }

    #[test]
    fn parse_extracts_all_three_parts() {
        let space = LabelSpace::ternary();
        let reply = "Analysis: The tone is warm despite the complaint.\n\
                     Reasoning: Praise outweighs the gripe about waiting.\n\
                     ```json\n\
                     {\"negative\": 0.1, \"neutral\": 0.2, \"positive\": 0.7}\n\
                     ```";
        let parsed = parse_agent_output(reply, &space).unwrap();
        assert_eq!(parsed.analysis, "The tone is warm despite the complaint.");
        assert_eq!(
            parsed.reasoning,
            "Praise outweighs the gripe about waiting."
        );
        assert_eq!(parsed.raw_probs, vec![0.1, 0.2, 0.7]);
    }

    #[test]
    fn parse_accepts_case_insensitive_labels_and_plain_fence() {
        let space = LabelSpace::ternary();
        let reply = "```\n{\"Negative\": 0.5, \"NEUTRAL\": 0.3, \"Positive\": 0.2}\n```";
        let parsed = parse_agent_output(reply, &space).unwrap();
        assert_eq!(parsed.raw_probs, vec![0.5, 0.3, 0.2]);
        // No prose at all: fallbacks kick in.
        assert_eq!(parsed.analysis, NO_ANALYSIS);
        assert_eq!(parsed.reasoning, NO_REASONING);
    }

    #[test]
    fn parse_falls_back_to_first_sentence_for_reasoning() {
        let space = LabelSpace::ternary();
        let reply = "Leaning positive here! The rest is detail.\n\
                     ```json\n{\"negative\": 0.2, \"neutral\": 0.2, \"positive\": 0.6}\n```";
        let parsed = parse_agent_output(reply, &space).unwrap();
        assert_eq!(parsed.reasoning, "Leaning positive here!");
        assert_eq!(
            parsed.analysis,
            "Leaning positive here! The rest is detail."
        );
    }

    #[test]
    fn parse_reports_each_failure_mode() {
        let space = LabelSpace::ternary();

        let no_block = "positive: 0.9, negative: 0.1";
        assert!(matches!(
            parse_agent_output(no_block, &space).unwrap_err(),
            PromptError::ParseFailure { .. }
        ));

        let not_json = "```\nnot a json object\n```";
        assert!(matches!(
            parse_agent_output(not_json, &space).unwrap_err(),
            PromptError::ParseFailure { .. }
        ));

        let unknown = "```json\n{\"negative\": 0.5, \"neutral\": 0.3, \"amused\": 0.2}\n```";
        assert!(matches!(
            parse_agent_output(unknown, &space).unwrap_err(),
            PromptError::LabelMismatch { .. }
        ));

        let missing = "```json\n{\"negative\": 0.5, \"neutral\": 0.5}\n```";
        assert!(matches!(
            parse_agent_output(missing, &space).unwrap_err(),
            PromptError::LabelMismatch { .. }
        ));

        let duplicate = "```json\n{\"negative\": 0.5, \"Negative\": 0.3, \"neutral\": 0.1, \"positive\": 0.1}\n```";
        assert!(matches!(
            parse_agent_output(duplicate, &space).unwrap_err(),
            PromptError::LabelMismatch { .. }
        ));

        let non_numeric =
            "```json\n{\"negative\": \"high\", \"neutral\": 0.3, \"positive\": 0.2}\n```";
        assert!(matches!(
            parse_agent_output(non_numeric, &space).unwrap_err(),
            PromptError::NonNumeric { .. }
        ));
    }

    #[test]
    fn parse_skips_non_json_fences_and_keeps_probability_order() {
        let space = LabelSpace::five_point();
        let reply = "Analysis: mixed feelings.\n\
                     ```\nsome code sample\n```\n\
                     Reasoning: mildly upbeat.\n\
                     ```json\n{\"very positive\": 0.1, \"positive\": 0.3, \"neutral\": 0.3, \"negative\": 0.2, \"very negative\": 0.1}\n```";
        let parsed = parse_agent_output(reply, &space).unwrap();
        // Returned in label-space order, not reply order.
        assert_eq!(parsed.raw_probs, vec![0.1, 0.2, 0.3, 0.3, 0.1]);
        assert_eq!(parsed.reasoning, "mildly upbeat.");
    }

    #[test]
    fn parse_tolerates_integer_probabilities() {
        let space = LabelSpace::ternary();
        let reply = "```json\n{\"negative\": 0, \"neutral\": 0, \"positive\": 1}\n```";
        let parsed = parse_agent_output(reply, &space).unwrap();
        assert_eq!(parsed.raw_probs, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn reask_appends_instruction_to_user_message() {
        let prompt = RenderedPrompt {
            system: "sys".into(),
            user: "user".into(),
        };
        let reask = prompt.with_reask();
        assert_eq!(reask.system, "sys");
        assert!(reask.user.starts_with("user"));
        assert!(reask.user.ends_with(REASK_INSTRUCTION));
    }

    #[test]
    fn builtin_templates_round_trip_through_dir_loader() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["kcs", "ibc", "single", "judge"] {
            std::fs::write(
                dir.path().join(format!("{name}.txt")),
                std::fs::read_to_string(
                    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
                        .join("templates")
                        .join(format!("{name}.txt")),
                )
                .unwrap(),
            )
            .unwrap();
        }
        let loaded = PromptSet::from_dir(dir.path()).unwrap();
        assert_eq!(loaded, PromptSet::builtin());
    }
}
