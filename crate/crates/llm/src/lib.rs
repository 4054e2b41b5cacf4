//! Prompt templates and a chat-completion client for summarizing dialogue
//! contexts and defining newly discovered error types.

pub mod client;
pub mod define;
pub mod prompt;

pub use client::{stub_response, ChatClient, ChatClientConfig, HttpResponse, LlmError, Transport, UreqTransport};
pub use define::{define_clusters, parse_definition, ClusterDefinition, DefinitionRequest, ErrorDefinition};
pub use prompt::{
    render_definition_prompt, render_summary_prompt, ClusterSample, FewShot, KnownDefinition, Message, PromptBundle,
    PromptError, PromptOptions,
};
