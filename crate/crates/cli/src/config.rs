// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a TOML file, overridable from the command line.
//!
//! Artifacts that depend on training (corpus, checkpoint, localization,
//! judge) live in a run directory named by a hash of the sections that
//! determine them. Experiment settings are hashed separately and select a
//! report subdirectory, so changing `--temperature` never overwrites the
//! reports of another setting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stylesteer::corpus::{default_registry, load_registry, StyleSpec};
use stylesteer::experiments::{ExperimentSettings, FUSION_RATIOS, SINGLE_STEER_ALPHAS};
use stylesteer::tinylm::ModelConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub judge: JudgeSection,
    pub vectors: VectorSection,
    pub experiments: ExperimentSection,
    pub serve: ServeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out: PathBuf::from("runs"),
            corpus: CorpusSection::default(),
            model: ModelConfig::default(),
            judge: JudgeSection::default(),
            vectors: VectorSection::default(),
            experiments: ExperimentSection::default(),
            serve: ServeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_per_style: usize,
    /// Style registry JSON; the built-in registry when absent.
    pub registry: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_per_style: 200,
            registry: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    pub l2: f64,
    pub epochs: usize,
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection {
            l2: 1e-2,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VectorSection {
    /// Subtract the grand mean over all styles from each composer vector.
    pub centered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds_per_cell: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub format_gate: bool,
    pub norm_preserve: bool,
    /// Steering strength for `steer`, `sweep-fusion` and the format check.
    pub alpha: f64,
    pub single_alphas: Vec<f64>,
    pub alpha_max: f64,
    /// Empty means the first three registry styles.
    pub sweep_targets: Vec<String>,
    pub fusion_ratios: Vec<f64>,
    pub fusion_pairs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let s = ExperimentSettings::default();
        ExperimentSection {
            seeds_per_cell: s.seeds_per_cell,
            temperature: s.temperature,
            max_len: s.max_len,
            format_gate: s.format_gate,
            norm_preserve: s.norm_preserve,
            alpha: 0.5,
            single_alphas: SINGLE_STEER_ALPHAS.to_vec(),
            alpha_max: 1.0,
            sweep_targets: Vec::new(),
            fusion_ratios: FUSION_RATIOS.to_vec(),
            fusion_pairs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub max_len_cap: usize,
    pub budget_secs: f64,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            addr: "127.0.0.1:8080".to_string(),
            max_len_cap: 512,
            budget_secs: 30.0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub no_format_gate: bool,
    pub no_norm_preserve: bool,
    pub centered: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::io(format!("reading {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::new("config", "InvalidConfig", e.to_string()))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(t) = o.temperature {
            self.experiments.temperature = t;
        }
        if let Some(a) = o.alpha {
            self.experiments.alpha = a;
        }
        if o.no_format_gate {
            self.experiments.format_gate = false;
        }
        if o.no_norm_preserve {
            self.experiments.norm_preserve = false;
        }
        if o.centered {
            self.vectors.centered = true;
        }
    }

    pub fn registry(&self) -> Result<Vec<StyleSpec>, CliError> {
        match &self.corpus.registry {
            None => Ok(default_registry()),
            Some(p) => Ok(load_registry(p)?),
        }
    }

    pub fn settings(&self) -> ExperimentSettings {
        let e = &self.experiments;
        ExperimentSettings {
            seed: self.derived_seed(Stage::Experiments),
            seeds_per_cell: e.seeds_per_cell,
            temperature: e.temperature,
            max_len: e.max_len,
            format_gate: e.format_gate,
            norm_preserve: e.norm_preserve,
        }
    }

    pub fn derived_seed(&self, stage: Stage) -> u64 {
        stylesteer::seed::derive_seed(self.seed, &[stage as u64])
    }

    /// Everything that determines the trained artifacts.
    pub fn run_key(&self, specs: &[StyleSpec]) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "n_per_style": self.corpus.n_per_style,
            "registry": specs,
            "model": self.model,
            "judge": self.judge,
        })
    }

    pub fn run_id(&self, specs: &[StyleSpec]) -> String {
        short_hash(&self.run_key(specs))
    }

    /// Hash of the experiment settings, the steering layer and the vector kind.
    pub fn report_id(&self, layer: usize) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            experiments: &'a ExperimentSection,
            centered: bool,
            layer: usize,
        }
        short_hash(&Key {
            experiments: &self.experiments,
            centered: self.vectors.centered,
            layer,
        })
    }
}

/// Fixed per-stage seed streams derived from the top-level seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Corpus = 1,
    Train = 2,
    Localize = 3,
    Judge = 4,
    Experiments = 5,
    Steer = 6,
}

fn short_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 9\n[model]\nn_layers = 4\n[model.train]\nsteps = 50\n[experiments]\nalpha_max = 0.8\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.n_layers, 4);
        assert_eq!(cfg.model.hidden_dim, 64);
        assert_eq!(cfg.model.train.steps, 50);
        assert_eq!(cfg.experiments.alpha_max, 0.8);
        assert_eq!(cfg.experiments.seeds_per_cell, 20);
        assert_eq!(cfg.corpus.n_per_style, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nlayers = 2\n").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn run_id_ignores_experiment_settings() {
        let specs = default_registry();
        let a = RunConfig::default();
        let mut b = a.clone();
        b.apply(&Overrides {
            temperature: Some(0.3),
            no_format_gate: true,
            out: Some("elsewhere".into()),
            ..Overrides::default()
        });
        assert_eq!(a.run_id(&specs), b.run_id(&specs));
        assert_ne!(a.report_id(6), b.report_id(6));
        assert_ne!(a.report_id(6), a.report_id(5));
        b.apply(&Overrides {
            seed: Some(2),
            ..Overrides::default()
        });
        assert_ne!(a.run_id(&specs), b.run_id(&specs));
        assert_eq!(a.run_id(&specs).len(), 12);
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        let seeds = [Stage::Corpus, Stage::Train, Stage::Localize, Stage::Judge]
            .map(|s| cfg.derived_seed(s));
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
