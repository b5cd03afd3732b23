use std::sync::Arc;

use super::{DomainError, TokenId};

/// Prompt plus a fixed-length generation region in which unresolved positions
/// hold the mask sentinel. Clones are cheap (the prompt is shared) and every
/// commit produces a new value, so candidate trajectories are plain snapshots.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Canvas {
    prompt: Arc<[TokenId]>,
    gen: Vec<TokenId>,
    step: usize,
    mask_id: TokenId,
}

impl Canvas {
    /// Fresh canvas: `gen_length` masks after `prompt`.
    pub fn new(prompt: Vec<TokenId>, gen_length: usize, mask_id: TokenId) -> Result<Self, DomainError> {
        if prompt.contains(&mask_id) {
            return Err(DomainError::MaskInPrompt);
        }
        Ok(Self {
            prompt: prompt.into(),
            gen: vec![mask_id; gen_length],
            step: 0,
            mask_id,
        })
    }

    /// Canvas with an arbitrary (possibly partially resolved) generation region.
    pub fn from_parts(prompt: Vec<TokenId>, gen: Vec<TokenId>, mask_id: TokenId) -> Result<Self, DomainError> {
        if prompt.contains(&mask_id) {
            return Err(DomainError::MaskInPrompt);
        }
        Ok(Self {
            prompt: prompt.into(),
            gen,
            step: 0,
            mask_id,
        })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn gen(&self) -> &[TokenId] {
        &self.gen
    }

    pub fn len(&self) -> usize {
        self.gen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gen.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.gen.get(pos) == Some(&self.mask_id)
    }

    pub fn token_at(&self, pos: usize) -> Option<TokenId> {
        self.gen.get(pos).copied().filter(|&t| t != self.mask_id)
    }

    pub fn mask_count(&self) -> usize {
        self.gen.iter().filter(|&&t| t == self.mask_id).count()
    }

    pub fn is_resolved(&self) -> bool {
        !self.gen.contains(&self.mask_id)
    }

    /// Positions of `block` that still hold the mask sentinel, ascending.
    pub fn masked_set(&self, block: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut out: Vec<usize> = block.into_iter().filter(|&i| self.is_masked(i)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Returns a new canvas with `commits` written. The receiver is unchanged
    /// and the step counter is carried over untouched.
    pub fn apply_commits(&self, commits: &[(usize, TokenId)]) -> Result<Self, DomainError> {
        let mut next = self.clone();
        for &(pos, tok) in commits {
            if tok == self.mask_id {
                return Err(DomainError::MaskWrite { position: pos });
            }
            match next.gen.get_mut(pos) {
                None => {
                    return Err(DomainError::PositionOutOfRange {
                        position: pos,
                        len: self.gen.len(),
                    })
                }
                Some(slot) if *slot != self.mask_id => {
                    return Err(DomainError::Overwrite {
                        position: pos,
                        existing: *slot,
                    })
                }
                Some(slot) => *slot = tok,
            }
        }
        Ok(next)
    }

    /// Full sequence (prompt then generation region) with masks as -1.
    pub fn to_wire(&self) -> Vec<i64> {
        self.prompt
            .iter()
            .chain(self.gen.iter())
            .map(|&t| if t == self.mask_id { -1 } else { t as i64 })
            .collect()
    }

    /// Generation region only, masks as -1.
    pub fn gen_snapshot(&self) -> Vec<i64> {
        self.gen
            .iter()
            .map(|&t| if t == self.mask_id { -1 } else { t as i64 })
            .collect()
    }

    /// Lowercase hex of the wire form, each id as a big-endian i32.
    pub fn fingerprint(&self) -> String {
        let bytes: Vec<u8> = self
            .to_wire()
            .into_iter()
            .flat_map(|t| (t as i32).to_be_bytes())
            .collect();
        hex::encode(bytes)
    }
}
