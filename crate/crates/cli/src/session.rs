// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::Serialize;
use stylesteer::abc::validate;
use stylesteer::corpus::StyleSpec;
use stylesteer::shallow::StyleClassifier;
use stylesteer::steering::{
    fuse, steered_generate, ComposerVector, PromptSpec, SteeringConfig, SteeringError,
};
use stylesteer::tinylm::{Checkpoint, Sampler};

/// Everything needed to serve steered generations from one run.
pub struct Session {
    pub specs: Vec<StyleSpec>,
    pub ckpt: Checkpoint,
    /// One vector per style, registry order, all at `layer`.
    pub vectors: Vec<ComposerVector>,
    pub judge: StyleClassifier,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateParams {
    pub prompt_style: usize,
    /// `(style index, weight)`; empty together with `steering = false`.
    pub terms: Vec<(usize, f64)>,
    pub alpha: f64,
    pub steering: bool,
    pub format_gate: bool,
    pub norm_preserve: bool,
    pub temperature: f64,
    pub seed: u64,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generated {
    pub abc: String,
    pub parse_valid: bool,
    pub probabilities: BTreeMap<String, f64>,
    pub was_gated_count: usize,
    pub n_tokens: usize,
}

impl Session {
    pub fn style_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.label.name == name)
    }

    pub fn generate(&self, p: &GenerateParams) -> Result<Generated, SteeringError> {
        let prompt = PromptSpec::for_style(&self.specs[p.prompt_style])?;
        let config = if p.steering {
            let terms: Vec<(&ComposerVector, f64)> =
                p.terms.iter().map(|&(i, w)| (&self.vectors[i], w)).collect();
            let mut cfg = SteeringConfig::new(p.alpha, fuse(&terms)?);
            cfg.format_gate = p.format_gate;
            cfg.norm_preserve = p.norm_preserve;
            Some(cfg)
        } else {
            None
        };
        let sampler = if p.temperature > 0.0 {
            Sampler::Temperature {
                temperature: p.temperature,
                seed: p.seed,
            }
        } else {
            Sampler::Greedy
        };
        let result = steered_generate(&self.ckpt, &prompt, config.as_ref(), sampler, p.max_len)?;
        let probs = self.judge.predict_proba(&result.tokens);
        Ok(Generated {
            abc: result.text(),
            parse_valid: validate(&result.tokens).parse_valid,
            probabilities: self
                .specs
                .iter()
                .map(|s| s.label.name.clone())
                .zip(probs)
                .collect(),
            was_gated_count: result.gated_count(),
            n_tokens: result.tokens.len(),
        })
    }
}
