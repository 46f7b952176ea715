//! Vocabulary partitioning and token-to-state extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inactive silence (a padding token was emitted).
pub const INACTIVE: u8 = 0;
/// Active speech (any non-padding token was emitted).
pub const ACTIVE: u8 = 1;

/// The token vocabulary split into padding and non-padding ids.
///
/// Both id lists are sorted ascending, disjoint, and together cover
/// `0..vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct VocabPartition {
    vocab_size: usize,
    pad_ids: Vec<usize>,
    non_pad_ids: Vec<usize>,
    is_pad: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    vocab_size: usize,
    pad_ids: Vec<usize>,
}

impl TryFrom<PartitionRepr> for VocabPartition {
    type Error = Error;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        VocabPartition::new(r.vocab_size, r.pad_ids)
    }
}

impl From<VocabPartition> for PartitionRepr {
    fn from(p: VocabPartition) -> Self {
        PartitionRepr {
            vocab_size: p.vocab_size,
            pad_ids: p.pad_ids,
        }
    }
}

impl VocabPartition {
    pub fn new(vocab_size: usize, pad_ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut is_pad = vec![false; vocab_size];
        for id in pad_ids {
            if id >= vocab_size {
                return Err(Error::Range {
                    id,
                    limit: vocab_size,
                });
            }
            is_pad[id] = true;
        }
        let pad_ids: Vec<usize> = (0..vocab_size).filter(|&v| is_pad[v]).collect();
        let non_pad_ids: Vec<usize> = (0..vocab_size).filter(|&v| !is_pad[v]).collect();
        if pad_ids.is_empty() {
            return Err(Error::DegeneratePartition("pad set is empty"));
        }
        if non_pad_ids.is_empty() {
            return Err(Error::DegeneratePartition("non-pad set is empty"));
        }
        Ok(VocabPartition {
            vocab_size,
            pad_ids,
            non_pad_ids,
            is_pad,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn pad_ids(&self) -> &[usize] {
        &self.pad_ids
    }

    pub fn non_pad_ids(&self) -> &[usize] {
        &self.non_pad_ids
    }

    pub fn is_pad(&self, id: usize) -> bool {
        self.is_pad[id]
    }

    /// Token ids belonging to state `s` (0 = pad set, 1 = non-pad set).
    pub fn ids_for_state(&self, s: u8) -> &[usize] {
        if s == ACTIVE {
            &self.non_pad_ids
        } else {
            &self.pad_ids
        }
    }

    pub fn state_of(&self, id: usize) -> Result<u8> {
        match self.is_pad.get(id) {
            Some(true) => Ok(INACTIVE),
            Some(false) => Ok(ACTIVE),
            None => Err(Error::Range {
                id,
                limit: self.vocab_size,
            }),
        }
    }
}

/// A non-empty sequence of token ids, all inside the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Range {
                id,
                limit: vocab_size,
            });
        }
        Ok(TokenSequence(tokens))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

/// Per-frame binary speak/silence states.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct StateSequence(Vec<u8>);

impl StateSequence {
    pub fn new(states: Vec<u8>) -> Result<Self> {
        if let Some(pos) = states.iter().position(|&s| s > 1) {
            return Err(Error::Config(format!(
                "state at frame {pos} is {}, expected 0 or 1",
                states[pos]
            )));
        }
        Ok(StateSequence(states))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active_frames(&self) -> usize {
        self.0.iter().filter(|&&s| s == ACTIVE).count()
    }

    /// Shift every state by `frames` positions, filling vacated frames with
    /// silence and dropping frames pushed past the end.
    pub fn shifted(&self, frames: usize) -> StateSequence {
        let n = self.0.len();
        let mut out = vec![INACTIVE; n];
        if frames < n {
            out[frames..].copy_from_slice(&self.0[..n - frames]);
        }
        StateSequence(out)
    }
}

impl TryFrom<Vec<u8>> for StateSequence {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        StateSequence::new(v)
    }
}

impl From<StateSequence> for Vec<u8> {
    fn from(s: StateSequence) -> Self {
        s.0
    }
}

/// `states[t] = 1` iff `tokens[t]` is a non-pad id.
pub fn extract_states(tokens: &[usize], partition: &VocabPartition) -> Result<StateSequence> {
    tokens
        .iter()
        .map(|&t| partition.state_of(t))
        .collect::<Result<Vec<_>>>()
        .map(StateSequence)
}
