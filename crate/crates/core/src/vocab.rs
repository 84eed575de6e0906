//! Vocabulary descriptor: size plus an optional reserved mask token.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VocabError {
    #[error("vocabulary needs at least 2 tokens, got {m}")]
    TooSmall { m: usize },
    #[error("vocabulary size {m} exceeds u32 token ids")]
    TooLarge { m: usize },
    #[error("mask id {mask} outside vocabulary of size {m}")]
    MaskOutOfRange { mask: u32, m: usize },
}

/// A finite token vocabulary `{0, .., m-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    m: usize,
    mask: Option<u32>,
}

impl Vocab {
    pub fn new(m: usize) -> Result<Self, VocabError> {
        if m < 2 {
            return Err(VocabError::TooSmall { m });
        }
        if m > u32::MAX as usize {
            return Err(VocabError::TooLarge { m });
        }
        Ok(Vocab { m, mask: None })
    }

    /// Vocabulary whose last token id is the reserved mask.
    pub fn with_trailing_mask(m: usize) -> Result<Self, VocabError> {
        Self::new(m)?.masked(m as u32 - 1)
    }

    pub fn masked(self, mask: u32) -> Result<Self, VocabError> {
        if mask as usize >= self.m {
            return Err(VocabError::MaskOutOfRange { mask, m: self.m });
        }
        Ok(Vocab {
            m: self.m,
            mask: Some(mask),
        })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn mask_id(&self) -> Option<u32> {
        self.mask
    }

    pub fn contains(&self, token: u32) -> bool {
        (token as usize) < self.m
    }
}
