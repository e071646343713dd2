//! Rollout records and the aux-span state machine.

use serde::{Deserialize, Serialize};

use crate::vocab::{Role, TokenId, Vocabulary};

/// Conditioning protocol a trajectory was sampled under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    /// Prefix-forced to open an aux span.
    Mandatory,
    /// Aux tokens masked out at every step.
    Prohibited,
    /// Unconstrained; the only subset that is optimized.
    Natural,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Mandatory, Protocol::Prohibited, Protocol::Natural];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Generated,
    Injected,
}

/// A sampled response. `tokens` excludes the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub protocol: Protocol,
    pub tokens: Vec<TokenId>,
    pub origin: Vec<Origin>,
    /// One entry per generated token, in order.
    pub logprobs: Vec<f64>,
    /// Body of the first well-formed aux span: `tokens[start..end]`, where
    /// `tokens[start - 1]` is AUX_OPEN and `tokens[end]` is AUX_CLOSE.
    pub aux_span: Option<(usize, usize)>,
    pub reprompted: bool,
    pub truncated: bool,
}

impl Trajectory {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            tokens: Vec::new(),
            origin: Vec::new(),
            logprobs: Vec::new(),
            aux_span: None,
            reprompted: false,
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push_generated(&mut self, token: TokenId, logprob: f64) {
        self.tokens.push(token);
        self.origin.push(Origin::Generated);
        self.logprobs.push(logprob);
    }

    pub fn push_injected(&mut self, tokens: &[TokenId]) {
        self.tokens.extend_from_slice(tokens);
        self.origin.extend(std::iter::repeat_n(Origin::Injected, tokens.len()));
    }

    pub fn generated_count(&self) -> usize {
        self.origin.iter().filter(|&&o| o == Origin::Generated).count()
    }

    /// 𝕀_aux: a well-formed aux span is present.
    pub fn aux_used(&self) -> bool {
        self.aux_span.is_some()
    }

    pub fn aux_body(&self) -> Option<&[TokenId]> {
        self.aux_span.map(|(s, e)| &self.tokens[s..e])
    }

    pub fn count_role(&self, vocab: &Vocabulary, role: Role) -> usize {
        let id = vocab.id(role);
        self.tokens.iter().filter(|&&t| t == id).count()
    }

    pub fn aux_token_count(&self, vocab: &Vocabulary) -> usize {
        self.tokens.iter().filter(|&&t| vocab.is_aux(t)).count()
    }
}

/// Tracks aux tags as tokens arrive and reports the close of the first
/// well-formed span.
///
/// A stray AUX_CLOSE or a nested AUX_OPEN seen before the first span closes
/// poisons the trajectory: no span is ever recorded for it.
#[derive(Debug, Clone, Default)]
pub struct AuxTracker {
    open_at: Option<usize>,
    poisoned: bool,
    span: Option<(usize, usize)>,
}

impl AuxTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed the token at `index`. Returns the body range when this token
    /// closes the first well-formed span.
    pub fn push(&mut self, vocab: &Vocabulary, index: usize, token: TokenId) -> Option<(usize, usize)> {
        if self.poisoned || self.span.is_some() {
            return None;
        }
        if token == vocab.id(Role::AuxOpen) {
            if self.open_at.is_some() {
                self.poisoned = true;
            } else {
                self.open_at = Some(index);
            }
        } else if token == vocab.id(Role::AuxClose) {
            match self.open_at.take() {
                Some(open) => {
                    self.span = Some((open + 1, index));
                    return self.span;
                }
                None => self.poisoned = true,
            }
        }
        None
    }

    pub fn span(&self) -> Option<(usize, usize)> {
        self.span
    }
}

pub fn detect_aux_span(vocab: &Vocabulary, tokens: &[TokenId]) -> Option<(usize, usize)> {
    let mut tracker = AuxTracker::new();
    for (i, &t) in tokens.iter().enumerate() {
        tracker.push(vocab, i, t);
    }
    tracker.span()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocabulary {
        Vocabulary::standard(16).unwrap()
    }

    #[test]
    fn spans() {
        let v = v();
        let (o, c, x) = (v.id(Role::AuxOpen), v.id(Role::AuxClose), 12);
        assert_eq!(detect_aux_span(&v, &[o, x, x, c, x]), Some((1, 3)));
        assert_eq!(detect_aux_span(&v, &[x, o, c]), Some((2, 2)));
        // close before open
        assert_eq!(detect_aux_span(&v, &[c, o, x, c]), None);
        // nested
        assert_eq!(detect_aux_span(&v, &[o, o, x, c, c]), None);
        // unclosed
        assert_eq!(detect_aux_span(&v, &[o, x, x]), None);
        // second span is ignored, first wins
        assert_eq!(detect_aux_span(&v, &[o, x, c, o, x, x, c]), Some((1, 2)));
    }
}
