// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded steering experiments and their reports.
//!
//! Every trial is one sampled continuation of a style prompt, scored by the
//! bigram judge. Sampler seeds depend only on the top-level seed, the prompt
//! style and the seed index, so a steered trial and its unsteered baseline
//! share random draws.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::validate;
use crate::corpus::StyleSpec;
use crate::seed;
use crate::shallow::StyleClassifier;
use crate::steering::{
    fuse, steered_generate, ComposerVector, Direction, PromptSpec, SteeringConfig, SteeringError,
};
use crate::tinylm::{Checkpoint, Sampler};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("unknown style {0:?}")]
    UnknownStyle(String),
    #[error("a fusion pair needs two distinct styles")]
    SameStyle,
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error("i/o failure on {path}: {message}")]
    IoFailure { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Reported as 0 when undefined.
    pub rho: f64,
    /// Set when either input is constant, so the rank correlation is undefined.
    pub tie_flag: bool,
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation, ExperimentError> {
    if xs.len() != ys.len() {
        return Err(ExperimentError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(ExperimentError::TooFewPoints(xs.len()));
    }
    Ok(match pearson(&average_ranks(xs), &average_ranks(ys)) {
        Some(rho) => Correlation {
            rho,
            tie_flag: false,
        },
        None => Correlation {
            rho: 0.0,
            tie_flag: true,
        },
    })
}

/// Ordinary-least-squares slope of `ys` on `xs` (0 when either is constant).
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Result<f64, ExperimentError> {
    if xs.len() != ys.len() {
        return Err(ExperimentError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(ExperimentError::TooFewPoints(xs.len()));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Ok(0.0);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(if sxx > 0.0 { sxy / sxx } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub seed: u64,
    pub seeds_per_cell: usize,
    pub temperature: f64,
    /// Maximum continuation length in tokens.
    pub max_len: usize,
    pub format_gate: bool,
    pub norm_preserve: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            seed: 0,
            seeds_per_cell: 20,
            temperature: 0.8,
            max_len: 250,
            format_gate: true,
            norm_preserve: true,
        }
    }
}

pub const SINGLE_STEER_ALPHAS: [f64; 4] = [0.1, 0.3, 0.5, 0.8];
pub const FUSION_RATIOS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// `0.0, 0.05, ..., max` (inclusive), computed as `i / 20` to avoid drift.
pub fn alpha_grid(max: f64) -> Vec<f64> {
    let steps = (max * 20.0).round() as usize;
    (0..=steps).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerTrial {
    pub trial_id: usize,
    pub prompt_style: String,
    pub target_style: String,
    pub alpha: f64,
    pub w1: Option<f64>,
    pub seed: u64,
    pub p_target: f64,
    pub probabilities: Vec<f64>,
    pub parse_valid: bool,
    pub was_gated_count: usize,
    pub abc: String,
}

/// Shared inputs of every experiment.
pub struct Harness<'a> {
    pub ckpt: &'a Checkpoint,
    pub specs: &'a [StyleSpec],
    pub vectors: &'a [ComposerVector],
    pub judge: &'a StyleClassifier,
    pub settings: ExperimentSettings,
}

struct Outcome {
    probabilities: Vec<f64>,
    parse_valid: bool,
    gated: usize,
    abc: String,
}

impl Harness<'_> {
    pub fn style_index(&self, name: &str) -> Result<usize, ExperimentError> {
        self.specs
            .iter()
            .position(|s| s.label.name == name)
            .ok_or_else(|| ExperimentError::UnknownStyle(name.to_string()))
    }

    /// Sampler seed shared by all trials of one prompt style and seed index.
    pub fn sampler_seed(&self, prompt: usize, index: usize) -> u64 {
        seed::derive_seed(self.settings.seed, &[0xE5, prompt as u64, index as u64])
    }

    fn run(
        &self,
        prompt: usize,
        index: usize,
        steer: Option<(Direction, f64)>,
    ) -> Result<Outcome, ExperimentError> {
        self.run_with(prompt, index, steer, self.settings.format_gate)
    }

    fn run_with(
        &self,
        prompt: usize,
        index: usize,
        steer: Option<(Direction, f64)>,
        format_gate: bool,
    ) -> Result<Outcome, ExperimentError> {
        let spec = &self.specs[prompt];
        let prompt_spec = PromptSpec::for_style(spec)?;
        let cfg = steer.map(|(direction, alpha)| SteeringConfig {
            alpha,
            direction,
            norm_preserve: self.settings.norm_preserve,
            format_gate,
        });
        let sampler = Sampler::Temperature {
            temperature: self.settings.temperature,
            seed: self.sampler_seed(prompt, index),
        };
        let result =
            steered_generate(self.ckpt, &prompt_spec, cfg.as_ref(), sampler, self.settings.max_len)?;
        Ok(Outcome {
            probabilities: self.judge.predict_proba(&result.tokens),
            parse_valid: validate(&result.tokens).parse_valid,
            gated: result.gated_count(),
            abc: result.text(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn trial(
        &self,
        trials: &mut Vec<SteerTrial>,
        prompt: usize,
        target: usize,
        alpha: f64,
        w1: Option<f64>,
        index: usize,
        o: &Outcome,
    ) {
        trials.push(SteerTrial {
            trial_id: trials.len(),
            prompt_style: self.specs[prompt].label.name.clone(),
            target_style: self.specs[target].label.name.clone(),
            alpha,
            w1,
            seed: self.sampler_seed(prompt, index),
            p_target: o.probabilities[target],
            probabilities: o.probabilities.clone(),
            parse_valid: o.parse_valid,
            was_gated_count: o.gated,
            abc: o.abc.clone(),
        });
    }

    fn labels(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.label.name.clone()).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerCell {
    pub prompt_style: String,
    pub target_style: String,
    pub alpha: f64,
    pub baseline_p: f64,
    pub steered_p: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleSteerSummary {
    pub alphas: Vec<f64>,
    /// Every (prompt, target, α) cell, prompts and targets in registry order.
    pub cells: Vec<SteerCell>,
    /// Per α: fraction of off-diagonal cells with positive improvement.
    pub positive_fraction: Vec<f64>,
}

/// Baseline versus steered P(target) for every (prompt, target) pair.
pub fn run_single_steer(
    h: &Harness,
    alphas: &[f64],
) -> Result<(SingleSteerSummary, Vec<SteerTrial>), ExperimentError> {
    let k = h.specs.len();
    let n = h.settings.seeds_per_cell;
    let mut trials = Vec::new();
    let mut baseline = vec![vec![0.0; k]; k];
    for r in 0..k {
        for i in 0..n {
            let o = h.run(r, i, None)?;
            for c in 0..k {
                baseline[r][c] += o.probabilities[c] / n as f64;
                h.trial(&mut trials, r, c, 0.0, None, i, &o);
            }
        }
    }
    let mut cells = Vec::new();
    let mut positive_fraction = Vec::new();
    for &alpha in alphas {
        let mut positive = 0usize;
        for r in 0..k {
            for c in 0..k {
                let mut ps = Vec::with_capacity(n);
                for i in 0..n {
                    let o = h.run(r, i, Some((h.vectors[c].direction(), alpha)))?;
                    ps.push(o.probabilities[c]);
                    h.trial(&mut trials, r, c, alpha, None, i, &o);
                }
                let steered = mean(&ps);
                let improvement = steered - baseline[r][c];
                if r != c && improvement > 0.0 {
                    positive += 1;
                }
                cells.push(SteerCell {
                    prompt_style: h.specs[r].label.name.clone(),
                    target_style: h.specs[c].label.name.clone(),
                    alpha,
                    baseline_p: baseline[r][c],
                    steered_p: steered,
                    improvement,
                });
            }
        }
        positive_fraction.push(positive as f64 / (k * (k - 1)).max(1) as f64);
    }
    Ok((
        SingleSteerSummary {
            alphas: alphas.to_vec(),
            cells,
            positive_fraction,
        },
        trials,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub prompt_style: String,
    pub mean_p: Vec<f64>,
    pub baseline_p: f64,
    pub slope: f64,
    pub spearman: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub target_style: String,
    pub alphas: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub mean_spearman: f64,
}

/// Summarizes mean P(target) curves over α, one per prompt style.
pub fn summarize_sweep(
    target_style: &str,
    alphas: &[f64],
    curves: &[(String, Vec<f64>)],
) -> Result<SweepSummary, ExperimentError> {
    let mut rows = Vec::with_capacity(curves.len());
    for (prompt, ps) in curves {
        rows.push(SweepRow {
            prompt_style: prompt.clone(),
            baseline_p: ps[0],
            slope: ols_slope(alphas, ps)?,
            spearman: spearman(alphas, ps)?,
            mean_p: ps.clone(),
        });
    }
    let mean_spearman = mean(&rows.iter().map(|r| r.spearman.rho).collect::<Vec<_>>());
    Ok(SweepSummary {
        target_style: target_style.to_string(),
        alphas: alphas.to_vec(),
        rows,
        mean_spearman,
    })
}

/// Mean P(target) against α for each prompt style.
pub fn run_alpha_sweep(
    h: &Harness,
    target: usize,
    prompts: &[usize],
    alphas: &[f64],
) -> Result<(SweepSummary, Vec<SteerTrial>), ExperimentError> {
    let n = h.settings.seeds_per_cell;
    let mut trials = Vec::new();
    let mut curves = Vec::new();
    for &r in prompts {
        let mut curve = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            let mut ps = Vec::with_capacity(n);
            for i in 0..n {
                let o = h.run(r, i, Some((h.vectors[target].direction(), alpha)))?;
                ps.push(o.probabilities[target]);
                h.trial(&mut trials, r, target, alpha, None, i, &o);
            }
            curve.push(mean(&ps));
        }
        curves.push((h.specs[r].label.name.clone(), curve));
    }
    let summary = summarize_sweep(&h.specs[target].label.name, alphas, &curves)?;
    Ok((summary, trials))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub first_style: String,
    pub second_style: String,
    pub alpha: f64,
    pub ratios: Vec<f64>,
    pub mean_p_first: Vec<f64>,
    pub mean_p_second: Vec<f64>,
    pub slope_first: f64,
    pub slope_second: f64,
    /// `slope_first > 0 && slope_second < 0`.
    pub opposite_signs: bool,
}

pub fn summarize_fusion(
    first: &str,
    second: &str,
    alpha: f64,
    ratios: &[f64],
    p_first: Vec<f64>,
    p_second: Vec<f64>,
) -> Result<FusionSummary, ExperimentError> {
    let slope_first = ols_slope(ratios, &p_first)?;
    let slope_second = ols_slope(ratios, &p_second)?;
    Ok(FusionSummary {
        first_style: first.to_string(),
        second_style: second.to_string(),
        alpha,
        ratios: ratios.to_vec(),
        mean_p_first: p_first,
        mean_p_second: p_second,
        slope_first,
        slope_second,
        opposite_signs: slope_first > 0.0 && slope_second < 0.0,
    })
}

/// P(c1) and P(c2) against the fusion weight `w1` (with `w2 = 1 - w1`),
/// averaged over the given prompt styles.
pub fn run_fusion_sweep(
    h: &Harness,
    pair: (usize, usize),
    prompts: &[usize],
    ratios: &[f64],
    alpha: f64,
) -> Result<(FusionSummary, Vec<SteerTrial>), ExperimentError> {
    let (c1, c2) = pair;
    if c1 == c2 {
        return Err(ExperimentError::SameStyle);
    }
    let n = h.settings.seeds_per_cell;
    let mut trials = Vec::new();
    let mut p1 = Vec::with_capacity(ratios.len());
    let mut p2 = Vec::with_capacity(ratios.len());
    for &w1 in ratios {
        let direction = fuse(&[(&h.vectors[c1], w1), (&h.vectors[c2], 1.0 - w1)])?;
        let (mut s1, mut s2) = (Vec::new(), Vec::new());
        for &r in prompts {
            for i in 0..n {
                let o = h.run(r, i, Some((direction.clone(), alpha)))?;
                s1.push(o.probabilities[c1]);
                s2.push(o.probabilities[c2]);
                h.trial(&mut trials, r, c1, alpha, Some(w1), i, &o);
            }
        }
        p1.push(mean(&s1));
        p2.push(mean(&s2));
    }
    let summary = summarize_fusion(
        &h.specs[c1].label.name,
        &h.specs[c2].label.name,
        alpha,
        ratios,
        p1,
        p2,
    )?;
    Ok((summary, trials))
}

/// The `count` style pairs whose composer vectors are farthest apart
/// (Euclidean), ties broken by registry order.
pub fn most_distinct_pairs(vectors: &[ComposerVector], count: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d: f64 = vectors[i]
                .values
                .iter()
                .zip(&vectors[j].values)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    pairs.into_iter().take(count).map(|(_, i, j)| (i, j)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatSummary {
    pub alpha: f64,
    pub unsteered_valid_rate: f64,
    pub gated_valid_rate: f64,
    pub ungated_valid_rate: f64,
    pub n_trials: usize,
}

/// parse_valid rates over all off-diagonal (prompt, target) cells: without
/// steering, steered with the gate, and steered without it.
pub fn run_format_eval(
    h: &Harness,
    alpha: f64,
) -> Result<(FormatSummary, Vec<SteerTrial>), ExperimentError> {
    let k = h.specs.len();
    let n = h.settings.seeds_per_cell;
    let mut trials = Vec::new();
    let (mut base, mut gated, mut ungated, mut count) = (0usize, 0usize, 0usize, 0usize);
    for r in 0..k {
        let mut base_valid = Vec::with_capacity(n);
        for i in 0..n {
            base_valid.push(h.run(r, i, None)?.parse_valid);
        }
        for c in (0..k).filter(|&c| c != r) {
            for i in 0..n {
                let on = h.run_with(r, i, Some((h.vectors[c].direction(), alpha)), true)?;
                let off = h.run_with(r, i, Some((h.vectors[c].direction(), alpha)), false)?;
                base += usize::from(base_valid[i]);
                gated += usize::from(on.parse_valid);
                ungated += usize::from(off.parse_valid);
                count += 1;
                h.trial(&mut trials, r, c, alpha, None, i, &on);
                h.trial(&mut trials, r, c, alpha, None, i, &off);
            }
        }
    }
    let rate = |v: usize| v as f64 / count.max(1) as f64;
    Ok((
        FormatSummary {
            alpha,
            unsteered_valid_rate: rate(base),
            gated_valid_rate: rate(gated),
            ungated_valid_rate: rate(ungated),
            n_trials: count,
        },
        trials,
    ))
}

pub const PUBLISHED_REFERENCE_LABEL: &str = "published reference (not reproduced)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub label: String,
    pub model: String,
    pub prompt_style: String,
    pub target_style: String,
    pub baseline_percent: f64,
    pub steered_percent: f64,
}

pub fn published_reference() -> PublishedReference {
    PublishedReference {
        label: PUBLISHED_REFERENCE_LABEL.to_string(),
        model: "NotaGen".to_string(),
        prompt_style: "Bach".to_string(),
        target_style: "Mozart".to_string(),
        baseline_percent: 5.9,
        steered_percent: 14.0,
    }
}

/// Summary JSON envelope; `summary` holds the experiment-specific record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary<T> {
    pub experiment: String,
    pub labels: Vec<String>,
    pub settings: ExperimentSettings,
    pub n_trials: usize,
    pub summary: T,
    pub reference: PublishedReference,
}

fn io_err(path: &Path) -> impl Fn(String) -> ExperimentError + '_ {
    move |message| ExperimentError::IoFailure {
        path: path.display().to_string(),
        message,
    }
}

/// Writes `<stem>.csv` (one row per trial) and `<stem>.json` (summary) into
/// `dir`. Output is a pure function of the arguments.
pub fn emit_report<T: Serialize>(
    dir: &Path,
    stem: &str,
    experiment: &str,
    h_labels: &[String],
    settings: &ExperimentSettings,
    summary: &T,
    trials: &[SteerTrial],
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir)(e.to_string()))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let err = io_err(&csv_path);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| err(e.to_string()))?;
    let mut header: Vec<String> = [
        "trial_id",
        "prompt_style",
        "target_style",
        "alpha",
        "w1",
        "seed",
        "p_target",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(h_labels.iter().map(|l| format!("p_{l}")));
    header.push("parse_valid".into());
    header.push("was_gated_count".into());
    w.write_record(&header).map_err(|e| err(e.to_string()))?;
    for t in trials {
        let mut row = vec![
            t.trial_id.to_string(),
            t.prompt_style.clone(),
            t.target_style.clone(),
            t.alpha.to_string(),
            t.w1.map(|v| v.to_string()).unwrap_or_default(),
            t.seed.to_string(),
            t.p_target.to_string(),
        ];
        row.extend(t.probabilities.iter().map(|p| p.to_string()));
        row.push(t.parse_valid.to_string());
        row.push(t.was_gated_count.to_string());
        w.write_record(&row).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))?;

    let json_path = dir.join(format!("{stem}.json"));
    let envelope = ReportSummary {
        experiment: experiment.to_string(),
        labels: h_labels.to_vec(),
        settings: settings.clone(),
        n_trials: trials.len(),
        summary,
        reference: published_reference(),
    };
    let json = serde_json::to_string_pretty(&envelope).expect("summary serializes") + "\n";
    fs::write(&json_path, json).map_err(|e| io_err(&json_path)(e.to_string()))
}

impl Harness<'_> {
    pub fn emit<T: Serialize>(
        &self,
        dir: &Path,
        stem: &str,
        experiment: &str,
        summary: &T,
        trials: &[SteerTrial],
    ) -> Result<(), ExperimentError> {
        emit_report(dir, stem, experiment, &self.labels(), &self.settings, summary, trials)
    }
}
