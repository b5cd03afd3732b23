use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainError, TokenId};

/// Token strings plus the three reserved ids the engine relies on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    mask_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, mask_id: TokenId, eos_id: TokenId, pad_id: TokenId) -> Result<Self, DomainError> {
        let n = tokens.len();
        for (name, id) in [("mask", mask_id), ("eos", eos_id), ("pad", pad_id)] {
            if id as usize >= n {
                return Err(DomainError::InvalidVocabulary(format!(
                    "{name} id {id} out of range for {n} tokens"
                )));
            }
        }
        if mask_id == eos_id || mask_id == pad_id || eos_id == pad_id {
            return Err(DomainError::InvalidVocabulary(
                "mask, eos and pad ids must be distinct".into(),
            ));
        }
        Ok(Self {
            tokens,
            mask_id,
            eos_id,
            pad_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// First id whose string equals `s` exactly.
    pub fn id_of(&self, s: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == s).map(|i| i as TokenId)
    }

    /// Parses the vocabulary file format: a `#mask=<idx> #eos=<idx> #pad=<idx>`
    /// header line followed by one token per line.
    pub fn parse(text: &str) -> Result<Self, DomainError> {
        let mut lines = text.split('\n');
        let header = lines
            .next()
            .ok_or_else(|| DomainError::InvalidVocabulary("empty file".into()))?;
        let (mut mask, mut eos, mut pad) = (None, None, None);
        for field in header.trim_end_matches('\r').split_whitespace() {
            let (key, value) = field
                .strip_prefix('#')
                .and_then(|f| f.split_once('='))
                .ok_or_else(|| DomainError::InvalidVocabulary(format!("bad header field {field:?}")))?;
            let value: TokenId = value
                .parse()
                .map_err(|_| DomainError::InvalidVocabulary(format!("bad index in {field:?}")))?;
            match key {
                "mask" => mask = Some(value),
                "eos" => eos = Some(value),
                "pad" => pad = Some(value),
                other => return Err(DomainError::InvalidVocabulary(format!("unknown header key {other:?}"))),
            }
        }
        let missing = |k: &str| DomainError::InvalidVocabulary(format!("header lacks #{k}="));
        let mut tokens: Vec<String> = lines.map(|l| l.strip_suffix('\r').unwrap_or(l).to_string()).collect();
        // trailing newline
        if tokens.last().is_some_and(|t| t.is_empty()) {
            tokens.pop();
        }
        Self::new(
            tokens,
            mask.ok_or_else(|| missing("mask"))?,
            eos.ok_or_else(|| missing("eos"))?,
            pad.ok_or_else(|| missing("pad"))?,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("#mask={} #eos={} #pad={}\n", self.mask_id, self.eos_id, self.pad_id);
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    /// Space-joined rendering of a token sequence, masks shown as `_`.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| {
                if id == self.mask_id {
                    "_".to_string()
                } else {
                    self.token(id).unwrap_or("?").to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
