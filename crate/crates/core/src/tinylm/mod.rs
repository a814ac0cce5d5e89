// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small decoder-only transformer with residual-stream read and write hooks.
//!
//! Pre-norm blocks (attention then GELU MLP), learned positional embeddings
//! and an output head tied to the token embedding. All arithmetic is `f64`;
//! stored parameters are rounded to `f32` so that a checkpoint loaded from
//! disk is bit-identical to the one that was trained.
//!
//! Hidden state `l` (1-based) is the residual stream at the exit of block
//! `l`, after the MLP addition.

mod checkpoint;
mod decode;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{Token, TokenKind, TokenSequence};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainMeta};
pub use decode::{generate, Decoder, Sampler, SamplerState, StepOutput};
pub use model::{forward, forward_with_edit, ForwardOutput, HiddenStates};
pub use train::{
    grad_check, grad_check_with, heldout_loss, train, unigram_entropy, GradCheckReport,
};

#[derive(Debug, Error)]
pub enum TinyLmError {
    #[error("sequence of {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },
    #[error("token {0:?} is not in the model vocabulary")]
    UnknownToken(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("layer {layer} outside 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub init_std: f64,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            steps: 600,
            batch_size: 12,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 30,
            grad_clip: 1.0,
            init_std: 0.02,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Zero means "take it from the training corpus".
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mlp_ratio: usize,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            n_layers: 6,
            hidden_dim: 64,
            n_heads: 4,
            context_len: 256,
            mlp_ratio: 4,
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TinyLmError> {
        let bad = |m: &str| Err(TinyLmError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.hidden_dim == 0 || self.n_heads == 0 {
            return bad("n_layers, hidden_dim and n_heads must be positive");
        }
        if self.hidden_dim % self.n_heads != 0 {
            return bad("hidden_dim must be divisible by n_heads");
        }
        if self.context_len < 2 || self.mlp_ratio == 0 {
            return bad("context_len must be at least 2 and mlp_ratio positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub text: String,
    /// `None` for the end-of-piece marker.
    pub kind: Option<TokenKind>,
}

/// Token text to id table. The end-of-piece marker is always the last id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub entries: Vec<VocabEntry>,
}

pub const EOS_TEXT: &str = "<eos>";

impl Vocab {
    /// Sorted unique token texts plus the end-of-piece marker.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut seen = std::collections::BTreeMap::new();
        for s in seqs {
            for t in s.iter() {
                seen.entry(t.text.clone()).or_insert(t.kind);
            }
        }
        let mut entries: Vec<VocabEntry> = seen
            .into_iter()
            .map(|(text, kind)| VocabEntry {
                text,
                kind: Some(kind),
            })
            .collect();
        entries.push(VocabEntry {
            text: EOS_TEXT.to_string(),
            kind: None,
        });
        Vocab { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn id(&self, text: &str) -> Option<usize> {
        self.entries[..self.eos()].iter().position(|e| e.text == text)
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<usize>, TinyLmError> {
        seq.iter()
            .map(|t| self.id(&t.text).ok_or_else(|| TinyLmError::UnknownToken(t.text.clone())))
            .collect()
    }

    /// `None` for the end-of-piece marker.
    pub fn token(&self, id: usize) -> Option<Token> {
        let e = &self.entries[id];
        e.kind.map(|kind| Token::new(e.text.clone(), kind))
    }

    pub fn decode(&self, ids: &[usize]) -> TokenSequence {
        TokenSequence::from_tokens(ids.iter().filter_map(|&i| self.token(i)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abc::tokenize;

    #[test]
    fn vocab_is_sorted_with_trailing_eos() {
        let a = tokenize("X:1\nK:C\nC2|").unwrap();
        let b = tokenize("%style:A\nD|").unwrap();
        let v = Vocab::from_sequences([&a, &b]);
        assert_eq!(v.entries.last().unwrap().text, EOS_TEXT);
        assert_eq!(v.eos(), v.len() - 1);
        let texts: Vec<&str> = v.entries[..v.eos()].iter().map(|e| e.text.as_str()).collect();
        let mut sorted = texts.clone();
        sorted.sort();
        assert_eq!(texts, sorted);
        let ids = v.encode(&a).unwrap();
        assert_eq!(v.decode(&ids), a);
        assert!(matches!(
            v.encode(&tokenize("E").unwrap()),
            Err(TinyLmError::UnknownToken(t)) if t == "E"
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        c.validate().unwrap();
        c.n_heads = 5;
        assert!(c.validate().is_err());
    }
}
