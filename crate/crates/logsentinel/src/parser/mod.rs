//! Online log template mining with a fixed-depth parse tree.
//!
//! Raw lines are preprocessed (known parameter shapes masked to `<*>`),
//! whitespace-tokenized, then routed through a prefix tree keyed first by
//! token count and then by the leading tokens. Each leaf holds the
//! templates sharing that path; a line joins the most similar template at
//! its leaf (merging divergent positions to `<*>`) or founds a new one.
//! Template ids are assigned in creation order and are stable for a given
//! corpus and config.

pub mod adapter;

pub use adapter::{Adapter, AdapterKind, RawEvent};

use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The wildcard token marking a parameter position.
pub const WILDCARD: &str = "<*>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParserConfig {
    /// Tree depth: one token-count level plus `depth - 1` token levels.
    pub depth: usize,
    /// Minimum similarity for a line to join an existing template, in (0, 1).
    pub similarity_threshold: f64,
    /// Maximum distinct children per tree node; overflow routes to a
    /// catch-all `<*>` child.
    pub max_children: usize,
    /// Ordered (pattern, replacement) pairs applied to the raw content
    /// before tokenization.
    pub preprocessing: Vec<(String, String)>,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            depth: 4,
            similarity_threshold: 0.4,
            max_children: 100,
            preprocessing: default_preprocessing(),
        }
    }
}

/// Default parameter maskers: block ids, hex constants, IPv4(:port) with an
/// optional leading slash, standalone integers.
pub fn default_preprocessing() -> Vec<(String, String)> {
    [
        r"blk_-?\d+",
        r"0x[0-9a-fA-F]+",
        r"(/|)\d{1,3}(\.\d{1,3}){3}(:\d+)?",
        r"\b\d+\b",
    ]
    .iter()
    .map(|p| (p.to_string(), WILDCARD.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogTemplate {
    pub template_id: u32,
    pub tokens: Vec<String>,
    pub match_count: u64,
}

impl LogTemplate {
    pub fn template_string(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Template-store record written by `parse`: one line per template.
#[derive(Debug, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub template_id: u32,
    pub template_string: String,
    pub match_count: u64,
}

/// One parsed log message in the event stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParsedEvent {
    pub line_no: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_key: Option<String>,
    pub template_id: u32,
    /// Alert tag for datasets that label individual messages;
    /// `None` when the dataset carries no per-message labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert: Option<bool>,
}

#[derive(Debug, Default)]
struct Node {
    children: HashMap<String, Node>,
    /// Template ids at this leaf, in creation order.
    templates: Vec<u32>,
}

/// The mutable state of the online miner.
pub struct ParserState {
    config: ParserConfig,
    regexes: Vec<(Regex, String)>,
    root: HashMap<usize, Node>,
    templates: Vec<LogTemplate>,
}

impl ParserState {
    pub fn new(config: ParserConfig) -> Result<Self> {
        if config.depth < 2 {
            return Err(Error::Config("parser depth must be at least 2".into()));
        }
        if !(config.similarity_threshold > 0.0 && config.similarity_threshold < 1.0) {
            return Err(Error::Config(format!(
                "similarity_threshold must lie strictly between 0 and 1, got {}",
                config.similarity_threshold
            )));
        }
        if config.max_children == 0 {
            return Err(Error::Config("max_children must be positive".into()));
        }
        let mut regexes = Vec::with_capacity(config.preprocessing.len());
        for (pat, rep) in &config.preprocessing {
            let re = Regex::new(pat)
                .map_err(|e| Error::Config(format!("bad preprocessing pattern {pat:?}: {e}")))?;
            regexes.push((re, rep.clone()));
        }
        Ok(ParserState {
            config,
            regexes,
            root: HashMap::new(),
            templates: Vec::new(),
        })
    }

    pub fn config(&self) -> &ParserConfig {
        &self.config
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn template_records(&self) -> Vec<TemplateRecord> {
        self.templates
            .iter()
            .map(|t| TemplateRecord {
                template_id: t.template_id,
                template_string: t.template_string(),
                match_count: t.match_count,
            })
            .collect()
    }

    /// Mask parameters and tokenize. Empty input gives an empty token list.
    pub fn preprocess_line(&self, raw: &str) -> Vec<String> {
        let mut line = raw.to_string();
        for (re, rep) in &self.regexes {
            line = re.replace_all(&line, rep.as_str()).into_owned();
        }
        line.split_whitespace().map(|t| t.to_string()).collect()
    }

    /// Parse one content line, creating or merging a template.
    /// Returns `None` for lines that tokenize to nothing.
    pub fn parse_line(&mut self, raw: &str) -> Option<u32> {
        let tokens = self.preprocess_line(raw);
        if tokens.is_empty() {
            return None;
        }
        let max_children = self.config.max_children;
        let levels = self.config.depth - 1;
        let mut node = self.root.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(levels) {
            node = descend(node, tok, max_children);
        }

        // Best template at this leaf; ties resolve to the lowest id because
        // leaf order is creation order.
        let mut best: Option<(u32, f64)> = None;
        for &id in &node.templates {
            let sim = similarity(&self.templates[id as usize].tokens, &tokens);
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((id, sim));
            }
        }

        if let Some((id, sim)) = best {
            if sim >= self.config.similarity_threshold {
                let tmpl = &mut self.templates[id as usize];
                for (slot, tok) in tmpl.tokens.iter_mut().zip(tokens.iter()) {
                    if slot != tok && slot != WILDCARD {
                        *slot = WILDCARD.to_string();
                    }
                }
                tmpl.match_count += 1;
                return Some(id);
            }
        }

        let id = self.templates.len() as u32;
        self.templates.push(LogTemplate {
            template_id: id,
            tokens: tokens.clone(),
            match_count: 1,
        });
        node.templates.push(id);
        Some(id)
    }

    /// Read-only lookup against a frozen store: returns the best template
    /// meeting the threshold without creating or merging anything.
    /// Safe to call concurrently through a shared reference.
    pub fn match_line(&self, raw: &str) -> Option<u32> {
        let tokens = self.preprocess_line(raw);
        if tokens.is_empty() {
            return None;
        }
        let levels = self.config.depth - 1;
        let mut node = self.root.get(&tokens.len())?;
        for tok in tokens.iter().take(levels) {
            node = match node.children.get(tok.as_str()) {
                Some(child) => child,
                None => node.children.get(WILDCARD)?,
            };
        }
        let mut best: Option<(u32, f64)> = None;
        for &id in &node.templates {
            let sim = similarity(&self.templates[id as usize].tokens, &tokens);
            if best.map_or(true, |(_, b)| sim > b) {
                best = Some((id, sim));
            }
        }
        best.filter(|&(_, sim)| sim >= self.config.similarity_threshold)
            .map(|(id, _)| id)
    }
}

fn descend<'a>(node: &'a mut Node, token: &str, max_children: usize) -> &'a mut Node {
    if node.children.contains_key(token) {
        node.children.get_mut(token).unwrap()
    } else if node.children.len() < max_children {
        node.children.entry(token.to_string()).or_default()
    } else {
        node.children.entry(WILDCARD.to_string()).or_default()
    }
}

/// Fraction of positions where the template matches the line. A template
/// wildcard matches any token, so a line keeps similarity 1 against the
/// template it has already merged into.
fn similarity(template: &[String], tokens: &[String]) -> f64 {
    debug_assert_eq!(template.len(), tokens.len());
    let equal = template
        .iter()
        .zip(tokens.iter())
        .filter(|(t, s)| *t == *s || t.as_str() == WILDCARD)
        .count();
    equal as f64 / template.len() as f64
}
