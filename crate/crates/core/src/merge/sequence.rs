use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Bookkeeping that travels with a token sequence through merge layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    /// Number of original tokens absorbed by each current token.
    pub sizes: Vec<u32>,
    /// Original position of each token's representative.
    pub orig_index: Vec<usize>,
    /// Original positions absorbed by each token, ascending.
    pub members: Vec<Vec<usize>>,
    /// Current position of the protected class token, if any.
    pub cls_pos: Option<usize>,
}

impl TokenLayout {
    /// Fresh layout of `n` unmerged tokens.
    pub fn identity(n: usize, cls_pos: Option<usize>) -> Self {
        Self {
            sizes: vec![1; n],
            orig_index: (0..n).collect(),
            members: (0..n).map(|i| vec![i]).collect(),
            cls_pos,
        }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn total_size(&self) -> u64 {
        self.sizes.iter().map(|&s| s as u64).sum()
    }

    pub fn is_protected(&self, pos: usize) -> bool {
        self.cls_pos == Some(pos)
    }

    /// Checks internal consistency against an expected original count.
    pub fn validate(&self, original: usize) -> Result<()> {
        let n = self.len();
        if self.orig_index.len() != n || self.members.len() != n {
            return Err(Error::Config("layout vectors differ in length".into()));
        }
        if self.total_size() != original as u64 {
            return Err(Error::Config(format!(
                "sizes sum to {} but {original} tokens entered",
                self.total_size()
            )));
        }
        let mut seen = vec![false; original];
        for (i, m) in self.members.iter().enumerate() {
            if m.len() != self.sizes[i] as usize {
                return Err(Error::Config(format!("token {i}: size/member mismatch")));
            }
            if !m.contains(&self.orig_index[i]) {
                return Err(Error::Config(format!(
                    "token {i}: representative not among members"
                )));
            }
            for &o in m {
                if o >= original || std::mem::replace(&mut seen[o], true) {
                    return Err(Error::Config(format!("original token {o} duplicated")));
                }
            }
        }
        if let Some(c) = self.cls_pos {
            if c >= n || self.sizes[c] != 1 {
                return Err(Error::Config("class token merged or out of range".into()));
            }
        }
        Ok(())
    }
}

/// Token values plus their merge bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<S> {
    /// `N × D`.
    pub values: Tensor<S>,
    pub layout: TokenLayout,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn new(values: Tensor<S>, cls_pos: Option<usize>) -> Self {
        let layout = TokenLayout::identity(values.rows(), cls_pos);
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn sizes(&self) -> &[u32] {
        &self.layout.sizes
    }

    pub fn orig_index(&self) -> &[usize] {
        &self.layout.orig_index
    }

    pub fn cls_pos(&self) -> Option<usize> {
        self.layout.cls_pos
    }
}
