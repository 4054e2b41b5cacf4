//! Turning novel clusters into named error definitions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::client::{ChatClient, LlmError};
use crate::prompt::{render_definition_prompt, ClusterSample, KnownDefinition, PromptOptions};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDefinition {
    pub name: String,
    pub definition: String,
    pub supporting_context_ids: Vec<String>,
}

/// Member dialogues of one novel cluster plus the known definitions shown
/// as style examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionRequest {
    pub cluster: usize,
    pub samples: Vec<ClusterSample>,
    pub known: Vec<KnownDefinition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDefinition {
    pub cluster: usize,
    pub result: Result<ErrorDefinition, LlmError>,
}

/// Strips markdown decoration and returns the value after `key:` if the
/// line holds that key.
fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let t = line.trim().trim_start_matches(['#', '*', '-', '>', ' ']);
    let (k, v) = t.split_once(':')?;
    let k = k.trim().trim_matches('*').trim();
    k.eq_ignore_ascii_case(key).then(|| v.trim().trim_start_matches('*').trim())
}

/// Parses `Name: ...` / `Definition: ...` model output into
/// (name, definition). The definition may run over several lines.
pub fn parse_definition(text: &str) -> Result<(String, String), LlmError> {
    let mut name = None;
    let mut definition: Option<String> = None;
    let mut in_definition = false;
    for line in text.lines() {
        if let Some(v) = field(line, "name") {
            if name.is_none() {
                name = Some(v.trim_matches(['*', '"', '`']).trim().to_string());
            }
            in_definition = false;
        } else if let Some(v) = field(line, "definition") {
            if definition.is_none() {
                definition = Some(v.to_string());
                in_definition = true;
            }
        } else if in_definition {
            if line.trim().is_empty() {
                in_definition = false;
            } else if let Some(d) = definition.as_mut() {
                if !d.is_empty() {
                    d.push(' ');
                }
                d.push_str(line.trim());
            }
        }
    }
    let excerpt = || text.chars().take(120).collect::<String>();
    let name = name.filter(|n| !n.is_empty()).ok_or_else(|| LlmError::Parse(format!("no name in {:?}", excerpt())))?;
    let definition = definition
        .map(|d| d.trim().to_string())
        .filter(|d| !d.is_empty())
        .ok_or_else(|| LlmError::Parse(format!("no definition in {:?}", excerpt())))?;
    Ok((name, definition))
}

/// Requests a definition for every cluster with at least `threshold`
/// samples. Smaller clusters are skipped without contacting the endpoint.
/// Results follow request order and only cover clusters that were sent.
pub fn define_clusters(
    client: &ChatClient,
    requests: &[DefinitionRequest],
    existing_names: &[String],
    threshold: usize,
    opts: &PromptOptions,
) -> Result<Vec<ClusterDefinition>, LlmError> {
    let mut sent = Vec::new();
    let mut bundles = Vec::new();
    for req in requests {
        if req.samples.len() < threshold {
            log::info!("cluster {}: {} contexts, below threshold {threshold}; skipped", req.cluster, req.samples.len());
            continue;
        }
        bundles.push(render_definition_prompt(&req.samples, &req.known, threshold, opts)?);
        sent.push(req);
    }
    let mut seen: BTreeSet<String> = existing_names.iter().map(|n| n.to_lowercase()).collect();
    let out = client
        .generate_all(&bundles)
        .into_iter()
        .zip(sent)
        .map(|(text, req)| {
            let result = text.and_then(|t| parse_definition(&t)).map(|(name, definition)| {
                if !seen.insert(name.to_lowercase()) {
                    log::warn!("cluster {}: generated name {name:?} duplicates an existing error type", req.cluster);
                }
                ErrorDefinition {
                    name,
                    definition,
                    supporting_context_ids: req.samples.iter().map(|s| s.id.clone()).collect(),
                }
            });
            ClusterDefinition { cluster: req.cluster, result }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ChatClientConfig;

    #[test]
    fn parses_plain_and_markdown() {
        let (n, d) = parse_definition("Name: Ignore Question\nDefinition: The agent skips the question.").unwrap();
        assert_eq!((n.as_str(), d.as_str()), ("Ignore Question", "The agent skips the question."));
        let (n, d) = parse_definition("Sure!\n\n**Name:** *Topic Drift*\n**Definition:** The agent\nchanges topic.\n\nThanks").unwrap();
        assert_eq!(n, "Topic Drift");
        assert_eq!(d, "The agent changes topic.");
        assert!(matches!(parse_definition("Definition: only this"), Err(LlmError::Parse(_))));
        assert!(matches!(parse_definition("Name: x\nDefinition:   "), Err(LlmError::Parse(_))));
    }

    fn known() -> Vec<KnownDefinition> {
        ["A", "B", "C"]
            .iter()
            .map(|n| KnownDefinition { name: n.to_string(), definition: format!("{n} def") })
            .collect()
    }

    fn request(cluster: usize, n: usize) -> DefinitionRequest {
        DefinitionRequest {
            cluster,
            samples: (0..n)
                .map(|i| ClusterSample { id: format!("c{cluster}-{i}"), context: format!("ctx {i}"), summary: None })
                .collect(),
            known: known(),
        }
    }

    #[test]
    fn small_clusters_are_skipped() {
        let client = ChatClient::new(ChatClientConfig { stub: true, ..ChatClientConfig::default() });
        let reqs = [request(3, 9), request(5, 10), request(7, 12)];
        let out = define_clusters(&client, &reqs, &[], 10, &PromptOptions::default()).unwrap();
        assert_eq!(out.iter().map(|c| c.cluster).collect::<Vec<_>>(), [5, 7]);
        let def = out[0].result.as_ref().unwrap();
        assert!(!def.name.is_empty());
        assert_eq!(def.supporting_context_ids.len(), 10);
        assert_eq!(def.supporting_context_ids[0], "c5-0");
    }

    struct Refuse(std::sync::Arc<std::sync::atomic::AtomicUsize>);

    impl crate::client::Transport for Refuse {
        fn post_json(
            &self,
            _: &str,
            _: &[(String, String)],
            _: &str,
            _: std::time::Duration,
        ) -> Result<crate::client::HttpResponse, String> {
            self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Err("unreachable".into())
        }
    }

    #[test]
    fn below_threshold_never_reaches_the_transport() {
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let client = ChatClient::with_transport(ChatClientConfig::default(), Box::new(Refuse(calls.clone())));
        let out = define_clusters(&client, &[request(0, 4), request(1, 9)], &[], 10, &PromptOptions::default()).unwrap();
        assert!(out.is_empty());
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 0);
    }

    #[test]
    fn duplicate_names_are_kept() {
        let client = ChatClient::new(ChatClientConfig { stub: true, ..ChatClientConfig::default() });
        let req = request(2, 10);
        let first = define_clusters(&client, &[req.clone()], &[], 10, &PromptOptions::default()).unwrap();
        let name = first[0].result.as_ref().unwrap().name.to_uppercase();
        // Same prompt twice plus a case-insensitive clash; only a warning.
        let out = define_clusters(&client, &[req.clone(), req], &[name], 10, &PromptOptions::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|c| c.result.is_ok()));
    }
}
