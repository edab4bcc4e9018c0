//! Vocabulary and token sequences.
//!
//! The MASK token always occupies the last index so that generator matrices
//! can be laid out with MASK as their final row and column.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab {
    size_total: usize,
}

impl Vocab {
    /// `size_total` counts every state, MASK included.
    pub fn new(size_total: usize) -> Result<Self> {
        if size_total < 2 {
            return Err(Error::invalid("vocab size", "need at least one real token plus MASK"));
        }
        Ok(Self { size_total })
    }

    /// Vocabulary with `num_real` real tokens followed by MASK.
    pub fn with_real_tokens(num_real: usize) -> Result<Self> {
        Self::new(num_real + 1)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size_total
    }

    #[inline]
    pub fn mask_id(&self) -> usize {
        self.size_total - 1
    }

    #[inline]
    pub fn num_real(&self) -> usize {
        self.size_total - 1
    }

    #[inline]
    pub fn is_mask(&self, token: usize) -> bool {
        token == self.mask_id()
    }

    /// Index of the conditioning (BOS) embedding row used by the Shifted
    /// wiring. It lives one past MASK and is never produced as output.
    #[inline]
    pub fn bos_id(&self) -> usize {
        self.size_total
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Sequence(pub Vec<usize>);

impl Sequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn masked(vocab: &Vocab, len: usize) -> Self {
        Self(vec![vocab.mask_id(); len])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn count_masks(&self, vocab: &Vocab) -> usize {
        self.0.iter().filter(|&&t| vocab.is_mask(t)).count()
    }

    /// Checks every id is in range and, for training data, that no MASK appears.
    pub fn validate(&self, vocab: &Vocab, allow_mask: bool) -> Result<()> {
        for (i, &t) in self.0.iter().enumerate() {
            if t >= vocab.size() {
                return Err(Error::invalid("token", format!("id {t} at {i} out of range")));
            }
            if !allow_mask && vocab.is_mask(t) {
                return Err(Error::invalid("token", format!("unexpected MASK at {i}")));
            }
        }
        Ok(())
    }
}

impl From<Vec<usize>> for Sequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl std::fmt::Display for Sequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut first = true;
        for t in &self.0 {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
            first = false;
        }
        Ok(())
    }
}
