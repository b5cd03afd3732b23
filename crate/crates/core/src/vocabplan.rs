//! Planning-token membership: structural keywords and punctuation, tokens
//! with a capitalized initial, and the end-of-sequence anchor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DomainError, TokenId, Vocabulary};

/// The shipped static list, one entry per line.
pub const DEFAULT_STATIC_LIST: &str = include_str!("../data/planning_tokens.txt");

/// Which rule admitted a token. Rules are tried in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceTag {
    StaticList,
    Capitalized,
    Eos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanningSet {
    members: Vec<bool>,
    tags: BTreeMap<TokenId, SourceTag>,
}

impl PlanningSet {
    pub fn is_planning(&self, token: TokenId) -> bool {
        self.members.get(token as usize).copied().unwrap_or(false)
    }

    pub fn tag(&self, token: TokenId) -> Option<SourceTag> {
        self.tags.get(&token).copied()
    }

    pub fn member_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.tags.keys().copied()
    }

    pub fn source_tags(&self) -> &BTreeMap<TokenId, SourceTag> {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Parses a static list file: one entry per line; lines starting with `"# "`
/// are comments, so the bare `#` token is kept. Blank lines are skipped.
pub fn parse_static_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.is_empty() && !l.starts_with("# "))
        .map(str::to_string)
        .collect()
}

pub fn load_static_list(path: impl AsRef<Path>) -> Result<Vec<String>, DomainError> {
    Ok(parse_static_list(&std::fs::read_to_string(path)?))
}

pub fn default_static_list() -> Vec<String> {
    parse_static_list(DEFAULT_STATIC_LIST)
}

/// Drops one leading space or `U+2581` word marker.
fn strip_marker(s: &str) -> &str {
    s.strip_prefix(' ').or_else(|| s.strip_prefix('\u{2581}')).unwrap_or(s)
}

fn starts_uppercase(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

pub fn build_planning_set(vocab: &Vocabulary, static_list: &[String]) -> PlanningSet {
    let statics: std::collections::HashSet<&str> = static_list.iter().map(String::as_str).collect();
    let mut members = vec![false; vocab.len()];
    let mut tags = BTreeMap::new();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        let id = id as TokenId;
        if id == vocab.mask_id() {
            continue;
        }
        let bare = strip_marker(tok);
        let tag = if statics.contains(bare) {
            Some(SourceTag::StaticList)
        } else if starts_uppercase(bare) {
            Some(SourceTag::Capitalized)
        } else if id == vocab.eos_id() {
            Some(SourceTag::Eos)
        } else {
            None
        };
        if let Some(tag) = tag {
            members[id as usize] = true;
            tags.insert(id, tag);
        }
    }
    PlanningSet { members, tags }
}
