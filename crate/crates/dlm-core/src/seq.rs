//! Token ids and sequences.
//!
//! The id layout is a project-wide contract shared by the tokenizer, the
//! corruption process, the model, and the sampler: id 0 is the BOS start
//! token, id 1 is the absorbing MASK state, id 2 separates packed
//! documents, and content symbols occupy ids 3 and up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Start-of-block token; occupies slot 0 of every packed or generated buffer.
pub const BOS_ID: TokenId = 0;
/// The absorbing state of the forward process; never appears in clean data.
pub const MASK_ID: TokenId = 1;
/// Document separator inserted between packed documents.
pub const DOCSEP_ID: TokenId = 2;

/// A sequence of token ids. Clean sequences (`x0`) contain no MASK; noisy
/// ones may. Construction through [`TokenSeq::clean`] enforces the former.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    /// Wraps ids without any MASK-freedom check; use for noisy buffers.
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::domain("TokenSeq must have length >= 1"));
        }
        Ok(Self { ids })
    }

    /// Wraps a clean sequence, rejecting any MASK id.
    pub fn clean(ids: Vec<TokenId>) -> Result<Self> {
        if ids.contains(&MASK_ID) {
            return Err(Error::domain("clean sequence contains MASK"));
        }
        Self::new(ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True when no position holds the MASK id.
    pub fn is_clean(&self) -> bool {
        self.ids.iter().all(|&id| id != MASK_ID)
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_rejects_mask() {
        assert!(TokenSeq::clean(vec![0, 3, 4]).is_ok());
        assert!(TokenSeq::clean(vec![0, MASK_ID, 4]).is_err());
        assert!(TokenSeq::new(vec![]).is_err());
    }

    #[test]
    fn special_ids_are_distinct_and_low() {
        assert_eq!(BOS_ID, 0);
        assert_eq!(MASK_ID, 1);
        assert_eq!(DOCSEP_ID, 2);
    }
}
