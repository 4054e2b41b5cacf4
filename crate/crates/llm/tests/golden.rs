//! Rendered prompts compared byte for byte against checked-in files.
//! Set ERRDISC_BLESS=1 to rewrite them after an intended template change.

use std::path::PathBuf;

use errdisc_llm::{render_definition_prompt, render_summary_prompt, ClusterSample, FewShot, KnownDefinition, PromptOptions};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    if std::env::var_os("ERRDISC_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} drifted");
}

fn summary_examples() -> Vec<FewShot> {
    vec![
        FewShot {
            input: "User: What time does the museum open?\nAgent: I love museums!".into(),
            output: "The user asks for the museum opening time. The agent does not answer and only expresses enthusiasm.".into(),
        },
        FewShot {
            input: "User: I want a vegetarian pizza.\nAgent: Sure, one pepperoni pizza coming up.".into(),
            output: "The user orders a vegetarian pizza. The agent confirms a pepperoni pizza, contradicting the request.".into(),
        },
        FewShot {
            input: "User: My flight got cancelled.\nAgent: Great, have a nice trip!".into(),
            output: "The user reports a cancelled flight. The agent responds cheerfully, ignoring the problem.".into(),
        },
    ]
}

const CONTEXT: &str = "User: Can you book a table for two at 7?\nAgent: The weather in Paris is sunny today.";

#[test]
fn summary_prompt_without_knowledge() {
    let b = render_summary_prompt(CONTEXT, None, &summary_examples(), &PromptOptions::default()).unwrap();
    check("summary_prompt.txt", &b.render());
}

#[test]
fn summary_prompt_with_knowledge() {
    let b = render_summary_prompt(
        CONTEXT,
        Some("Restaurant Le Marais accepts bookings from 18:00 to 22:00."),
        &summary_examples(),
        &PromptOptions::default(),
    )
    .unwrap();
    check("summary_prompt_knowledge.txt", &b.render());
}

#[test]
fn definition_prompt_with_ten_summaries() {
    let samples: Vec<ClusterSample> = (1..=10)
        .map(|i| ClusterSample {
            id: format!("dlg-{i:03}"),
            context: format!("User: Please remind me about item {i}.\nAgent: Item {i}? Never heard of it."),
            summary: Some(format!("The user asks for a reminder about item {i}; the agent denies knowing the item.")),
        })
        .collect();
    let known = vec![
        KnownDefinition { name: "Ignore Question".into(), definition: "The agent does not address the user's question.".into() },
        KnownDefinition { name: "Factually Incorrect".into(), definition: "The agent states information that is wrong.".into() },
        KnownDefinition { name: "Topic Transition Error".into(), definition: "The agent abruptly changes the topic.".into() },
    ];
    let b = render_definition_prompt(&samples, &known, 10, &PromptOptions::default()).unwrap();
    let text = b.render();
    for s in &samples {
        assert_eq!(text.matches(s.summary.as_deref().unwrap()).count(), 1);
    }
    check("definition_prompt.txt", &text);
}
