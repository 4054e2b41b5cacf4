//! Prompt bundles for summary generation and error definition generation.
//!
//! Rendering is a pure template fill: the same inputs always produce the
//! same bytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum summary length requested from the model.
pub const SUMMARY_MAX_CHARS: usize = 250;
pub const SUMMARY_EXAMPLES: usize = 3;
pub const KNOWN_DEFINITIONS: usize = 3;
pub const DEFAULT_THRESHOLD: usize = 10;

/// Default text for the directive slot that lets the model analyze
/// dialogues containing offensive language instead of refusing.
pub const DEFAULT_SAFETY_DIRECTIVE: &str = "The dialogues may contain offensive, harmful or inappropriate language. \
This is an annotation task: analyze the content as written, do not refuse, and do not comment on it.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("dialogue context is empty")]
    EmptyContext,
    #[error("expected exactly {expected} examples, got {got}")]
    ExampleCount { expected: usize, got: usize },
    #[error("cluster has {size} contexts, below the threshold of {threshold}")]
    ThresholdNotMet { size: usize, threshold: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.to_string(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_directives: String,
    pub few_shot_examples: Vec<FewShot>,
    pub user_payload: String,
}

impl PromptBundle {
    /// Chat messages: system, one user/assistant pair per example, then the payload.
    pub fn messages(&self) -> Vec<Message> {
        let mut out = vec![Message::new("system", self.system_directives.clone())];
        for ex in &self.few_shot_examples {
            out.push(Message::new("user", ex.input.clone()));
            out.push(Message::new("assistant", ex.output.clone()));
        }
        out.push(Message::new("user", self.user_payload.clone()));
        out
    }

    /// Plain-text rendering of [`PromptBundle::messages`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in self.messages() {
            out.push_str(&format!("[{}]\n{}\n\n", m.role, m.content));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    pub safety_directive: String,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self { safety_directive: DEFAULT_SAFETY_DIRECTIVE.to_string() }
    }
}

pub fn render_summary_prompt(
    context: &str,
    knowledge: Option<&str>,
    examples: &[FewShot],
    opts: &PromptOptions,
) -> Result<PromptBundle, PromptError> {
    if context.trim().is_empty() {
        return Err(PromptError::EmptyContext);
    }
    if examples.len() != SUMMARY_EXAMPLES {
        return Err(PromptError::ExampleCount { expected: SUMMARY_EXAMPLES, got: examples.len() });
    }
    let system_directives = format!(
        "You analyze dialogues between a user and a conversational agent.\n\
         {}\n\
         Summarize the dialogue context in max. {SUMMARY_MAX_CHARS} characters. \
         Focus on information indicative of errors in the last agent utterance.\n\
         Answer with the summary only.",
        opts.safety_directive
    );
    let mut user_payload = format!("Dialogue context:\n{}\n", context.trim_end());
    if let Some(k) = knowledge {
        user_payload.push_str(&format!("\nKnowledge:\n{}\n", k.trim_end()));
    }
    user_payload.push_str(&format!("\nSummary (max. {SUMMARY_MAX_CHARS} characters):"));
    Ok(PromptBundle { system_directives, few_shot_examples: examples.to_vec(), user_payload })
}

/// One dialogue of a discovered cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSample {
    pub id: String,
    pub context: String,
    pub summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownDefinition {
    pub name: String,
    pub definition: String,
}

pub fn render_definition_prompt(
    samples: &[ClusterSample],
    known: &[KnownDefinition],
    threshold: usize,
    opts: &PromptOptions,
) -> Result<PromptBundle, PromptError> {
    if samples.len() < threshold {
        return Err(PromptError::ThresholdNotMet { size: samples.len(), threshold });
    }
    if samples.is_empty() {
        return Err(PromptError::EmptyContext);
    }
    if known.len() != KNOWN_DEFINITIONS {
        return Err(PromptError::ExampleCount { expected: KNOWN_DEFINITIONS, got: known.len() });
    }
    let system_directives = format!(
        "You analyze dialogues between a user and a conversational agent.\n\
         {}\n\
         The dialogue contexts you receive share an error in the last agent utterance that is not among the known error types. \
         Name this error type and write a definition that characterizes the problem present in the dialogues. \
         Match the style and level of detail of the known error type definitions.\n\
         Answer in exactly this format:\n\
         Name: <error type name>\n\
         Definition: <definition>",
        opts.safety_directive
    );
    let few_shot_examples = known
        .iter()
        .map(|k| FewShot {
            input: format!("Known error type: {}", k.name),
            output: format!("Name: {}\nDefinition: {}", k.name, k.definition),
        })
        .collect();
    let mut user_payload = format!("Dialogue contexts ({}):\n", samples.len());
    for (i, s) in samples.iter().enumerate() {
        user_payload.push_str(&format!("\n[{}] {}\nContext:\n{}\n", i + 1, s.id, s.context.trim_end()));
        if let Some(summary) = &s.summary {
            user_payload.push_str(&format!("Summary: {}\n", summary.trim_end()));
        }
    }
    user_payload.push_str("\nName and define the error type shared by these dialogues.");
    Ok(PromptBundle { system_directives, few_shot_examples, user_payload })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn examples() -> Vec<FewShot> {
        (1..=3)
            .map(|i| FewShot { input: format!("example dialogue {i}"), output: format!("example summary {i}") })
            .collect()
    }

    #[test]
    fn knowledge_section_is_conditional() {
        let opts = PromptOptions::default();
        let without = render_summary_prompt("User: hi\nAgent: no", None, &examples(), &opts).unwrap();
        assert!(!without.render().contains("Knowledge:"));
        let with = render_summary_prompt("User: hi\nAgent: no", Some("doc"), &examples(), &opts).unwrap();
        assert!(with.render().contains("Knowledge:\ndoc\n"));
        assert!(with.system_directives.contains("max. 250 characters"));
        assert!(with.system_directives.contains(DEFAULT_SAFETY_DIRECTIVE));
    }

    #[test]
    fn summary_preconditions() {
        let opts = PromptOptions::default();
        assert_eq!(
            render_summary_prompt("ctx", None, &examples()[..2], &opts),
            Err(PromptError::ExampleCount { expected: 3, got: 2 })
        );
        assert_eq!(render_summary_prompt("  ", None, &examples(), &opts), Err(PromptError::EmptyContext));
    }

    fn known() -> Vec<KnownDefinition> {
        ["a", "b", "c"]
            .iter()
            .map(|n| KnownDefinition { name: n.to_string(), definition: format!("{n} happens") })
            .collect()
    }

    fn cluster(n: usize) -> Vec<ClusterSample> {
        (0..n)
            .map(|i| ClusterSample { id: format!("d{i}"), context: format!("ctx {i}"), summary: Some(format!("sum {i}")) })
            .collect()
    }

    #[test]
    fn definition_threshold() {
        let opts = PromptOptions::default();
        assert_eq!(
            render_definition_prompt(&cluster(9), &known(), 10, &opts),
            Err(PromptError::ThresholdNotMet { size: 9, threshold: 10 })
        );
        let one = render_definition_prompt(&cluster(1), &known(), 1, &opts).unwrap();
        assert!(one.user_payload.contains("ctx 0"));
        assert!(render_definition_prompt(&cluster(3), &known()[..2], 1, &opts).is_err());
    }

    proptest! {
        #[test]
        fn every_example_and_payload_appear_once(
            inputs in prop::collection::vec("[a-z]{6,12}", 3),
            context in "[a-z]{8,20}",
        ) {
            let ex: Vec<FewShot> = inputs.iter().enumerate()
                .map(|(i, s)| FewShot { input: format!("<in{i}:{s}>"), output: format!("<out{i}:{s}>") })
                .collect();
            let b = render_summary_prompt(&format!("<ctx:{context}>"), None, &ex, &PromptOptions::default()).unwrap();
            let text = b.render();
            for e in &ex {
                prop_assert_eq!(text.matches(&e.input).count(), 1);
                prop_assert_eq!(text.matches(&e.output).count(), 1);
            }
            prop_assert_eq!(text.matches(&b.user_payload).count(), 1);
            prop_assert_eq!(b.render(), text);
        }
    }
}
