// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composer vectors and inference-time steering.
//!
//! A composer vector is the mean final-token hidden row, at one layer, over a
//! style's `prompt ⊕ piece` corpus. During generation the newest row at that
//! layer is moved along a (possibly fused) vector and rescaled back to its
//! original norm:
//!
//! ```text
//! ĥ = ‖h‖ / ‖h + α·s‖ · (h + α·s)
//! ```
//!
//! With the format gate on, every step first samples a candidate from the
//! unedited model. Format tokens (and end-of-piece) are emitted as is; for
//! content candidates the logits are recomputed with the edit and the token
//! is re-drawn with the same uniform draw, so `α = 0` reproduces unsteered
//! generation token for token.

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{self, TokenClass, TokenSequence};
use crate::corpus::{self, CorpusEntry, StyleCorpus, StyleLabel, StyleSpec};
use crate::tinylm::{forward, Checkpoint, Decoder, Sampler, SamplerState, TinyLmError, Vocab};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("no corpus entries for style")]
    EmptyCorpus,
    #[error("entries mix styles {first:?} and {other:?}")]
    MixedLabels { first: String, other: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer mismatch: expected {expected}, got {got}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("fusion needs at least one term")]
    EmptyFusion,
    #[error("steering coefficient and weights must be finite")]
    NonFinite,
    #[error("prompt does not start with the prompt line of {0:?}")]
    PromptMismatch(String),
    #[error(transparent)]
    Model(#[from] TinyLmError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vector schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerVector {
    pub label: StyleLabel,
    pub layer: usize,
    pub dim: usize,
    pub n_sources: usize,
    pub values: Vec<f64>,
}

/// A steering direction at one layer: a composer vector or a fusion of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub layer: usize,
    pub values: Vec<f64>,
}

impl ComposerVector {
    pub fn direction(&self) -> Direction {
        Direction {
            layer: self.layer,
            values: self.values.clone(),
        }
    }
}

/// Mean final-token row at `layer` over `entries`, which must share a style.
pub fn build_vector(
    ckpt: &Checkpoint,
    entries: &[&CorpusEntry],
    layer: usize,
) -> Result<ComposerVector, SteeringError> {
    ckpt.check_layer(layer)?;
    let first = entries.first().ok_or(SteeringError::EmptyCorpus)?;
    if let Some(e) = entries.iter().find(|e| e.label != first.label) {
        return Err(SteeringError::MixedLabels {
            first: first.label.name.clone(),
            other: e.label.name.clone(),
        });
    }
    let d = ckpt.hidden_dim();
    let mut sum = vec![0.0; d];
    for e in entries {
        let ids = ckpt.vocab.encode(&e.sequence())?;
        let out = forward(ckpt, &ids)?;
        for (acc, v) in sum.iter_mut().zip(out.hiddens[layer - 1].values.row(ids.len() - 1)) {
            *acc += v;
        }
    }
    let n = entries.len() as f64;
    Ok(ComposerVector {
        label: first.label.clone(),
        layer,
        dim: d,
        n_sources: entries.len(),
        values: sum.into_iter().map(|v| v / n).collect(),
    })
}

/// One vector per corpus style, in label order. `centered` subtracts the
/// mean of the style vectors from each of them.
pub fn build_vectors(
    ckpt: &Checkpoint,
    corpus: &StyleCorpus,
    layer: usize,
    centered: bool,
) -> Result<Vec<ComposerVector>, SteeringError> {
    let mut vectors = corpus
        .labels
        .iter()
        .map(|l| {
            let entries: Vec<&CorpusEntry> = corpus.entries_for(l.id).collect();
            build_vector(ckpt, &entries, layer)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if centered && !vectors.is_empty() {
        let k = vectors.len() as f64;
        let d = vectors[0].dim;
        let grand: Vec<f64> = (0..d)
            .map(|i| vectors.iter().map(|v| v.values[i]).sum::<f64>() / k)
            .collect();
        for v in &mut vectors {
            for (x, g) in v.values.iter_mut().zip(&grand) {
                *x -= g;
            }
        }
    }
    Ok(vectors)
}

/// `Σ wᵢ·sᵢ`. All vectors must share layer and dimension.
pub fn fuse(terms: &[(&ComposerVector, f64)]) -> Result<Direction, SteeringError> {
    let (first, _) = terms.first().ok_or(SteeringError::EmptyFusion)?;
    let mut values = vec![0.0; first.dim];
    for (v, w) in terms {
        if !w.is_finite() {
            return Err(SteeringError::NonFinite);
        }
        if v.values.len() != first.dim {
            return Err(SteeringError::DimensionMismatch {
                expected: first.dim,
                got: v.values.len(),
            });
        }
        if v.layer != first.layer {
            return Err(SteeringError::LayerMismatch {
                expected: first.layer,
                got: v.layer,
            });
        }
        for (acc, x) in values.iter_mut().zip(&v.values) {
            *acc += w * x;
        }
    }
    Ok(Direction {
        layer: first.layer,
        values,
    })
}

/// Below this norm of `h + α·s` the edit is skipped.
pub const CANCELLATION_GUARD: f64 = 1e-8;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `h + α·s`, rescaled to `‖h‖` when `norm_preserve` is set. Returns `h`
/// unchanged when `α = 0`, when `‖h‖ = 0` (norm preserving), or when the sum
/// nearly cancels.
pub fn steer_hidden(h: &[f64], s: &[f64], alpha: f64, norm_preserve: bool) -> Vec<f64> {
    assert_eq!(h.len(), s.len(), "hidden row and direction differ in length");
    if alpha == 0.0 {
        return h.to_vec();
    }
    let x: Vec<f64> = h.iter().zip(s).map(|(a, b)| a + alpha * b).collect();
    if !norm_preserve {
        return x;
    }
    let nh = norm(h);
    let nx = norm(&x);
    if nx < CANCELLATION_GUARD || nh == 0.0 {
        return h.to_vec();
    }
    let scale = nh / nx;
    x.into_iter().map(|v| v * scale).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub alpha: f64,
    pub direction: Direction,
    pub norm_preserve: bool,
    pub format_gate: bool,
}

impl SteeringConfig {
    pub fn new(alpha: f64, direction: Direction) -> Self {
        SteeringConfig {
            alpha,
            direction,
            norm_preserve: true,
            format_gate: true,
        }
    }
}

/// Generation prompt: the style's prompt line followed by a newline.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub style: StyleLabel,
    pub text: TokenSequence,
}

impl PromptSpec {
    pub fn for_style(spec: &StyleSpec) -> Result<Self, SteeringError> {
        let line = abc::tokenize(&spec.prompt_text).map_err(|e| {
            SteeringError::SchemaViolation(format!("prompt of {}: {e}", spec.label.name))
        })?;
        Ok(PromptSpec {
            style: spec.label.clone(),
            text: corpus::concat(&line, &TokenSequence::default()),
        })
    }

    pub fn check(&self, spec: &StyleSpec) -> Result<(), SteeringError> {
        if !self.text.source_text.starts_with(&spec.prompt_text) {
            return Err(SteeringError::PromptMismatch(spec.label.name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: String,
    pub was_gated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// The continuation after the prompt.
    pub tokens: TokenSequence,
    pub per_step: Vec<StepRecord>,
    pub config: Option<SteeringConfig>,
}

impl GenerationResult {
    pub fn gated_count(&self) -> usize {
        self.per_step.iter().filter(|s| s.was_gated).count()
    }

    pub fn text(&self) -> String {
        abc::detokenize(&self.tokens)
    }
}

/// End-of-piece counts as format: the gate always lets the model stop.
fn is_format(vocab: &Vocab, id: usize) -> bool {
    id == vocab.eos() || vocab.token(id).is_some_and(|t| t.class() == TokenClass::Format)
}

/// Samples a continuation of at most `max_len` tokens (fewer when the model
/// emits end-of-piece or the context fills up). `steering = None` is plain
/// sampling.
pub fn steered_generate(
    ckpt: &Checkpoint,
    prompt: &PromptSpec,
    steering: Option<&SteeringConfig>,
    sampler: Sampler,
    max_len: usize,
) -> Result<GenerationResult, SteeringError> {
    if let Some(cfg) = steering {
        ckpt.check_layer(cfg.direction.layer)?;
        if cfg.direction.values.len() != ckpt.hidden_dim() {
            return Err(SteeringError::DimensionMismatch {
                expected: ckpt.hidden_dim(),
                got: cfg.direction.values.len(),
            });
        }
        if !cfg.alpha.is_finite() || cfg.direction.values.iter().any(|v| !v.is_finite()) {
            return Err(SteeringError::NonFinite);
        }
    }
    let prompt_ids = ckpt.vocab.encode(&prompt.text)?;
    if prompt_ids.is_empty() {
        return Err(TinyLmError::EmptyPrompt.into());
    }
    let limit = ckpt.config.context_len;
    if prompt_ids.len() > limit {
        return Err(TinyLmError::ContextOverflow {
            len: prompt_ids.len(),
            max: limit,
        }
        .into());
    }
    let end = (prompt_ids.len() + max_len).min(limit);
    let eos = ckpt.vocab.eos();
    let mut state = SamplerState::new(sampler);
    let mut dec = Decoder::new(ckpt);
    let mut step = None;
    for &t in &prompt_ids {
        step = Some(dec.feed(t)?);
    }
    let mut step = step.expect("prompt is non-empty");
    let mut out = Vec::new();
    let mut per_step = Vec::new();
    while prompt_ids.len() + out.len() < end {
        let u = state.draw();
        let candidate = state.pick(step.logits.view(), u);
        let (token, was_gated) = match steering {
            Some(cfg) if !(cfg.format_gate && is_format(&ckpt.vocab, candidate)) => {
                let layer = cfg.direction.layer;
                let h = step.hiddens[layer - 1].as_slice().expect("contiguous row");
                let edited = steer_hidden(h, &cfg.direction.values, cfg.alpha, cfg.norm_preserve);
                let logits = dec.logits_with_edit(layer, ArrayView1::from(&edited))?;
                (state.pick(logits.view(), u), false)
            }
            Some(_) => (candidate, true),
            None => (candidate, false),
        };
        if token == eos {
            break;
        }
        out.push(token);
        let text = ckpt.vocab.entries[token].text.clone();
        per_step.push(StepRecord { token: text, was_gated });
        if prompt_ids.len() + out.len() < end {
            step = dec.feed(token)?;
        }
    }
    Ok(GenerationResult {
        tokens: ckpt.vocab.decode(&out),
        per_step,
        config: steering.cloned(),
    })
}

/// Adapts [`steer_hidden`] to the row-edit closures of the model API.
pub fn row_edit(
    s: &[f64],
    alpha: f64,
    norm_preserve: bool,
) -> impl Fn(ArrayView1<f64>) -> Array1<f64> + '_ {
    move |h| Array1::from(steer_hidden(&h.to_vec(), s, alpha, norm_preserve))
}

pub fn save_vector(v: &ComposerVector, path: &Path) -> Result<(), SteeringError> {
    let json = serde_json::to_string_pretty(v).expect("vector serializes") + "\n";
    fs::write(path, json).map_err(|source| SteeringError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_vector(path: &Path) -> Result<ComposerVector, SteeringError> {
    let text = fs::read_to_string(path).map_err(|source| SteeringError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    parse_vector(&text)
}

pub fn parse_vector(text: &str) -> Result<ComposerVector, SteeringError> {
    let v: ComposerVector =
        serde_json::from_str(text).map_err(|e| SteeringError::SchemaViolation(e.to_string()))?;
    if v.dim != v.values.len() {
        return Err(SteeringError::SchemaViolation(format!(
            "dim {} but {} values",
            v.dim,
            v.values.len()
        )));
    }
    if v.layer == 0 {
        return Err(SteeringError::SchemaViolation("layer must be at least 1".into()));
    }
    if v.n_sources == 0 {
        return Err(SteeringError::SchemaViolation("n_sources must be at least 1".into()));
    }
    Ok(v)
}
