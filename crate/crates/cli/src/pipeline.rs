// SPDX-License-Identifier: MIT OR Apache-2.0

//! The pipeline stages behind each subcommand.
//!
//! Run directory layout:
//!
//! ```text
//! run-<id>/
//!   run.json                     hashed configuration
//!   styles.json  corpus.jsonl    gen-corpus
//!   checkpoint.json              train
//!   localization.json            localize
//!   vectors/<kind>/layer-<l>/    build-vectors (kind is raw or centered)
//!   judge.json judge-report.json first experiment that needs the judge
//!   projection-layer-<l>.csv     project
//!   reports/<report-id>/         steer experiments
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stylesteer::corpus::{build_corpus, load_corpus, save_corpus, save_registry, StyleCorpus, StyleSpec};
use stylesteer::experiments::{
    alpha_grid, most_distinct_pairs, run_alpha_sweep, run_format_eval, run_fusion_sweep,
    run_single_steer, Harness, SteerTrial,
};
use stylesteer::localization::{
    layer_report, pca_projection, piece_embedding, write_projection_csv, LayerReport,
};
use stylesteer::shallow::{ClassifierConfig, JudgeReport, StyleClassifier};
use stylesteer::steering::{self, load_vector, save_vector};
use stylesteer::tinylm::{self, load_checkpoint, save_checkpoint, Checkpoint};

use crate::config::{RunConfig, Stage};
use crate::error::CliError;
use crate::session::{GenerateParams, Generated, Session};

pub struct Run {
    pub config: RunConfig,
    pub specs: Vec<StyleSpec>,
    pub dir: PathBuf,
}

impl Run {
    /// Resolves the run directory for `config` and records its key there.
    pub fn open(config: RunConfig) -> Result<Run, CliError> {
        let specs = config.registry()?;
        let dir = config.out.join(format!("run-{}", config.run_id(&specs)));
        fs::create_dir_all(&dir)?;
        let key = serde_json::to_string_pretty(&config.run_key(&specs)).expect("key serializes");
        fs::write(dir.join("run.json"), key + "\n")?;
        Ok(Run { config, specs, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn existing(&self, name: &str, producer: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::missing(&p.display().to_string(), producer))
        }
    }

    pub fn corpus(&self) -> Result<StyleCorpus, CliError> {
        Ok(load_corpus(&self.existing("corpus.jsonl", "gen-corpus")?)?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, CliError> {
        Ok(load_checkpoint(&self.existing("checkpoint.json", "train")?)?)
    }

    /// The stored localization report, byte for byte.
    pub fn localization_json(&self) -> Result<String, CliError> {
        Ok(fs::read_to_string(self.existing("localization.json", "localize")?)?)
    }

    pub fn selected_layer(&self) -> Result<usize, CliError> {
        let report: LayerReport = serde_json::from_str(&self.localization_json()?)
            .map_err(|e| CliError::new("cli", "SchemaViolation", e.to_string()))?;
        Ok(report.selected_layer)
    }

    /// `layer` if given, otherwise the selected layer of the stored report.
    pub fn layer(&self, layer: Option<usize>) -> Result<usize, CliError> {
        match layer {
            Some(l) => Ok(l),
            None => self.selected_layer(),
        }
    }

    fn vector_dir(&self, layer: usize) -> PathBuf {
        let kind = if self.config.vectors.centered { "centered" } else { "raw" };
        self.dir.join("vectors").join(kind).join(format!("layer-{layer}"))
    }

    pub fn report_dir(&self, layer: usize) -> PathBuf {
        self.dir.join("reports").join(self.config.report_id(layer))
    }

    /// Loads the judge, training and storing it on first use.
    pub fn judge(&self) -> Result<(StyleClassifier, JudgeReport), CliError> {
        let (path, report_path) = (self.path("judge.json"), self.path("judge-report.json"));
        if path.exists() && report_path.exists() {
            let report = serde_json::from_str(&fs::read_to_string(&report_path)?)
                .map_err(|e| CliError::new("cli", "SchemaViolation", e.to_string()))?;
            return Ok((StyleClassifier::load(&path)?, report));
        }
        let config = ClassifierConfig {
            l2: self.config.judge.l2,
            epochs: self.config.judge.epochs,
        };
        let (judge, report) =
            StyleClassifier::train(&self.corpus()?, &config, self.config.derived_seed(Stage::Judge))?;
        judge.save(&path)?;
        write_json(&report_path, &report)?;
        Ok((judge, report))
    }

    pub fn session(&self, layer: Option<usize>) -> Result<Session, CliError> {
        let layer = self.layer(layer)?;
        let dir = self.vector_dir(layer);
        let mut vectors = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let p = dir.join(format!("{}.json", spec.label.name));
            if !p.exists() {
                return Err(CliError::missing(&p.display().to_string(), "build-vectors"));
            }
            vectors.push(load_vector(&p)?);
        }
        Ok(Session {
            specs: self.specs.clone(),
            ckpt: self.checkpoint()?,
            vectors,
            judge: self.judge()?.0,
            layer,
        })
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    Ok(fs::write(path, text)?)
}

pub fn gen_corpus(run: &Run) -> Result<Value, CliError> {
    let c = &run.config;
    if c.corpus.n_per_style == 0 {
        return Err(CliError::usage("corpus.n_per_style must be at least 1"));
    }
    let corpus = build_corpus(&run.specs, c.corpus.n_per_style, c.derived_seed(Stage::Corpus))?;
    save_registry(&run.specs, &run.path("styles.json"))?;
    save_corpus(&corpus, &run.path("corpus.jsonl"))?;
    Ok(json!({
        "run_dir": run.dir,
        "styles": corpus.labels.iter().map(|l| &l.name).collect::<Vec<_>>(),
        "counts": corpus.counts(),
    }))
}

pub fn train(run: &Run) -> Result<Value, CliError> {
    let corpus = run.corpus()?;
    let ckpt = tinylm::train(&corpus, &run.config.model, run.config.derived_seed(Stage::Train))?;
    save_checkpoint(&ckpt, &run.path("checkpoint.json"))?;
    Ok(json!({
        "run_dir": run.dir,
        "parameters": ckpt.params.len(),
        "vocab_size": ckpt.vocab.len(),
        "steps": ckpt.meta.loss_curve.len(),
        "final_train_loss": ckpt.meta.loss_curve.last(),
        "heldout_loss": ckpt.meta.heldout_loss,
        "unigram_entropy": ckpt.meta.unigram_entropy,
    }))
}

/// Computes and stores the per-layer report; returns its JSON text.
pub fn localize(run: &Run) -> Result<String, CliError> {
    let report = layer_report(
        &run.checkpoint()?,
        &run.corpus()?,
        run.config.derived_seed(Stage::Localize),
    )?;
    let text = report.to_json();
    fs::write(run.path("localization.json"), &text)?;
    Ok(text)
}

pub fn build_vectors(run: &Run, layer: Option<usize>) -> Result<Value, CliError> {
    let layer = run.layer(layer)?;
    let vectors = steering::build_vectors(
        &run.checkpoint()?,
        &run.corpus()?,
        layer,
        run.config.vectors.centered,
    )?;
    let dir = run.vector_dir(layer);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for v in &vectors {
        let p = dir.join(format!("{}.json", v.label.name));
        save_vector(v, &p)?;
        files.push(p);
    }
    Ok(json!({
        "layer": layer,
        "centered": run.config.vectors.centered,
        "norms": vectors
            .iter()
            .map(|v| (v.label.name.clone(), json!(v.values.iter().map(|x| x * x).sum::<f64>().sqrt())))
            .collect::<serde_json::Map<_, _>>(),
        "files": files,
    }))
}

#[derive(Debug, Clone, Default)]
pub struct SteerArgs {
    pub prompt_style: Option<String>,
    pub target: Option<String>,
    pub weights: Option<String>,
    pub no_steering: bool,
    pub layer: Option<usize>,
    pub sample_seed: Option<u64>,
    pub max_len: Option<usize>,
}

/// Parses `"A=0.7,B=0.3"`.
pub fn parse_weights(text: &str) -> Result<Vec<(String, f64)>, CliError> {
    let bad = |m: String| CliError::usage(format!("--weights: {m}"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, w) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected NAME=WEIGHT, got {part:?}")))?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| bad(format!("weight {w:?} is not a number")))?;
        if !w.is_finite() {
            return Err(CliError::new("cli", "NonFinite", format!("weight for {name} is {w}")));
        }
        out.push((name.trim().to_string(), w));
    }
    if out.is_empty() {
        return Err(bad("no weights given".into()));
    }
    Ok(out)
}

pub fn steer(run: &Run, args: &SteerArgs) -> Result<(Generated, Value), CliError> {
    let session = run.session(args.layer)?;
    let index = |name: &str| {
        session
            .style_index(name)
            .ok_or_else(|| CliError::new("cli", "UnknownStyle", format!("unknown style {name:?}")))
    };
    let prompt_style = match &args.prompt_style {
        Some(name) => index(name)?,
        None => 0,
    };
    let named: Vec<(String, f64)> = match (&args.target, &args.weights) {
        (Some(_), Some(_)) => return Err(CliError::usage("give --target or --weights, not both")),
        (Some(t), None) => vec![(t.clone(), 1.0)],
        (None, Some(w)) => parse_weights(w)?,
        (None, None) if args.no_steering => Vec::new(),
        (None, None) => return Err(CliError::usage("steer needs --target, --weights or --no-steering")),
    };
    let terms = named
        .iter()
        .map(|(n, w)| Ok((index(n)?, *w)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let e = &run.config.experiments;
    if !e.alpha.is_finite() {
        return Err(CliError::new("cli", "NonFinite", format!("alpha is {}", e.alpha)));
    }
    let params = GenerateParams {
        prompt_style,
        terms,
        alpha: e.alpha,
        steering: !args.no_steering,
        format_gate: e.format_gate,
        norm_preserve: e.norm_preserve,
        temperature: e.temperature,
        seed: args
            .sample_seed
            .unwrap_or_else(|| run.config.derived_seed(Stage::Steer)),
        max_len: args.max_len.unwrap_or(e.max_len),
    };
    let generated = session.generate(&params)?;
    let echo = json!({
        "prompt_style": session.specs[prompt_style].label.name,
        "targets": named,
        "alpha": params.alpha,
        "steering": params.steering,
        "layer": session.layer,
        "seed": params.seed,
    });
    Ok((generated, echo))
}

fn harness<'a>(run: &Run, s: &'a Session) -> Harness<'a> {
    Harness {
        ckpt: &s.ckpt,
        specs: &s.specs,
        vectors: &s.vectors,
        judge: &s.judge,
        settings: run.config.settings(),
    }
}

fn renumber(trials: &mut [SteerTrial]) {
    for (i, t) in trials.iter_mut().enumerate() {
        t.trial_id = i;
    }
}

pub fn sweep_alpha(run: &Run, targets: &[String], layer: Option<usize>) -> Result<Value, CliError> {
    let session = run.session(layer)?;
    let h = harness(run, &session);
    let targets: Vec<usize> = if !targets.is_empty() {
        targets.iter().map(|t| h.style_index(t)).collect::<Result<_, _>>()?
    } else if !run.config.experiments.sweep_targets.is_empty() {
        run.config
            .experiments
            .sweep_targets
            .iter()
            .map(|t| h.style_index(t))
            .collect::<Result<_, _>>()?
    } else {
        (0..session.specs.len().min(3)).collect()
    };
    let alphas = alpha_grid(run.config.experiments.alpha_max);
    let (mut summaries, mut trials) = (Vec::new(), Vec::new());
    for &c in &targets {
        let prompts: Vec<usize> = (0..session.specs.len()).filter(|&r| r != c).collect();
        let (summary, t) = run_alpha_sweep(&h, c, &prompts, &alphas)?;
        summaries.push(summary);
        trials.extend(t);
    }
    renumber(&mut trials);
    let dir = run.report_dir(session.layer);
    h.emit(&dir, "sweep-alpha", "alpha_sweep", &summaries, &trials)?;
    Ok(json!({
        "report_dir": dir,
        "layer": session.layer,
        "mean_spearman": summaries
            .iter()
            .map(|s| (s.target_style.clone(), json!(s.mean_spearman)))
            .collect::<serde_json::Map<_, _>>(),
    }))
}

pub fn sweep_fusion(run: &Run, pairs: &[String], layer: Option<usize>) -> Result<Value, CliError> {
    let session = run.session(layer)?;
    let h = harness(run, &session);
    let pairs: Vec<(usize, usize)> = if pairs.is_empty() {
        most_distinct_pairs(&session.vectors, run.config.experiments.fusion_pairs)
    } else {
        pairs
            .iter()
            .map(|p| {
                let (a, b) = p
                    .split_once(',')
                    .ok_or_else(|| CliError::usage(format!("--pair expects A,B, got {p:?}")))?;
                Ok((h.style_index(a.trim())?, h.style_index(b.trim())?))
            })
            .collect::<Result<_, CliError>>()?
    };
    let e = &run.config.experiments;
    let prompts: Vec<usize> = (0..session.specs.len()).collect();
    let (mut summaries, mut trials) = (Vec::new(), Vec::new());
    for &pair in &pairs {
        let (summary, t) = run_fusion_sweep(&h, pair, &prompts, &e.fusion_ratios, e.alpha)?;
        summaries.push(summary);
        trials.extend(t);
    }
    renumber(&mut trials);
    let dir = run.report_dir(session.layer);
    h.emit(&dir, "sweep-fusion", "fusion_sweep", &summaries, &trials)?;
    Ok(json!({
        "report_dir": dir,
        "layer": session.layer,
        "pairs": summaries
            .iter()
            .map(|s| json!({
                "first": s.first_style,
                "second": s.second_style,
                "slope_first": s.slope_first,
                "slope_second": s.slope_second,
                "opposite_signs": s.opposite_signs,
            }))
            .collect::<Vec<_>>(),
    }))
}

/// Judge accuracy, the single-steer grid and the format-gate comparison.
pub fn eval(run: &Run, layer: Option<usize>) -> Result<Value, CliError> {
    let session = run.session(layer)?;
    let (_, judge_report) = run.judge()?;
    let h = harness(run, &session);
    let dir = run.report_dir(session.layer);
    let (single, trials) = run_single_steer(&h, &run.config.experiments.single_alphas)?;
    h.emit(&dir, "single-steer", "single_steer", &single, &trials)?;
    let (format, trials) = run_format_eval(&h, run.config.experiments.alpha)?;
    h.emit(&dir, "format-eval", "format_gate", &format, &trials)?;
    Ok(json!({
        "report_dir": dir,
        "layer": session.layer,
        "judge": judge_report,
        "alphas": single.alphas,
        "positive_fraction": single.positive_fraction,
        "format": format,
    }))
}

pub fn project(run: &Run, layer: Option<usize>) -> Result<Value, CliError> {
    let layer = run.layer(layer)?;
    let ckpt = run.checkpoint()?;
    let corpus = run.corpus()?;
    let points = corpus
        .entries
        .iter()
        .map(|e| piece_embedding(&ckpt, &e.sequence(), layer))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<String> = corpus.entries.iter().map(|e| e.label.name.clone()).collect();
    let path = run.path(&format!("projection-layer-{layer}.csv"));
    write_projection_csv(&path, &pca_projection(&points, 2), &labels)?;
    Ok(json!({ "layer": layer, "points": points.len(), "file": path }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_parse() {
        assert_eq!(
            parse_weights("Alpha=0.7, Beta=0.3").unwrap(),
            vec![("Alpha".to_string(), 0.7), ("Beta".to_string(), 0.3)]
        );
        assert_eq!(parse_weights("Alpha=-1").unwrap(), vec![("Alpha".to_string(), -1.0)]);
        assert_eq!(parse_weights("Alpha").unwrap_err().kind, "Usage");
        assert_eq!(parse_weights("Alpha=x").unwrap_err().kind, "Usage");
        assert_eq!(parse_weights("").unwrap_err().kind, "Usage");
        assert_eq!(parse_weights("Alpha=NaN").unwrap_err().kind, "NonFinite");
        assert_eq!(parse_weights("Alpha=inf").unwrap_err().kind, "NonFinite");
    }
}
