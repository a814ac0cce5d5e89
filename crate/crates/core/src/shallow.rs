// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shallow models: token-bigram features, a multinomial linear classifier
//! trained by full-batch gradient descent, and cosine similarity.
//!
//! The classifier is used twice: as the linear probe over hidden states and,
//! on bigram surface features, as the style judge for generated pieces. The
//! judge never sees the generator's hidden states.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{TokenClass, TokenSequence};
use crate::corpus::StyleCorpus;
use crate::seed;

#[derive(Debug, Error)]
pub enum ShallowError {
    #[error("need at least {needed} samples per label and 2 labels: {detail}")]
    InsufficientSamples { needed: usize, detail: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("classifier schema violation: {0}")]
    SchemaViolation(String),
}

/// Sorted table of content-token bigrams; index `len()` is the OOV bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigramVocab {
    pub bigrams: Vec<(String, String)>,
}

fn content_bigrams(seq: &TokenSequence) -> impl Iterator<Item = (&str, &str)> + '_ {
    let content: Vec<&str> = seq
        .iter()
        .filter(|t| t.class() == TokenClass::Content)
        .map(|t| t.text.as_str())
        .collect();
    (1..content.len().max(1))
        .map(move |i| (content[i - 1], content[i]))
        .collect::<Vec<_>>()
        .into_iter()
}

impl BigramVocab {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for s in seqs {
            for (a, b) in content_bigrams(s) {
                set.insert((a.to_string(), b.to_string()));
            }
        }
        BigramVocab {
            bigrams: set.into_iter().collect(),
        }
    }

    /// Feature dimension, including the OOV bucket.
    pub fn dim(&self) -> usize {
        self.bigrams.len() + 1
    }

    fn index(&self, a: &str, b: &str) -> usize {
        self.bigrams
            .binary_search_by(|(x, y)| (x.as_str(), y.as_str()).cmp(&(a, b)))
            .unwrap_or(self.bigrams.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Set when the sequence has no content bigram; `values` is then zero.
    pub empty: bool,
}

/// Normalized counts of adjacent content-token pairs (format tokens are
/// dropped before pairing).
pub fn bigram_features(seq: &TokenSequence, vocab: &BigramVocab) -> FeatureVector {
    let mut values = vec![0.0; vocab.dim()];
    let mut total = 0usize;
    for (a, b) in content_bigrams(seq) {
        values[vocab.index(a, b)] += 1.0;
        total += 1;
    }
    if total > 0 {
        for v in &mut values {
            *v /= total as f64;
        }
    }
    FeatureVector {
        values,
        empty: total == 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub l2: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// `(epoch, loss)` every 50 epochs and at the end.
    pub loss_checkpoints: Vec<(usize, f64)>,
}

/// Multinomial linear classifier over raw features; `weights[k]` has the
/// bias as its last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub meta: ClassifierMeta,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_top_eigenvalue(x: &[Vec<f64>]) -> f64 {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; dim];
        for row in x {
            let proj: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wi, a) in w.iter_mut().zip(row) {
                *wi += proj * a / n;
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

/// Fits the classifier by full-batch gradient descent on the L2-penalized
/// mean cross-entropy. Features are standardized internally and the result
/// is folded back into raw-feature weights. The step size `1 / (λ/2 + l2)`,
/// with `λ` the top eigenvalue of the standardized Gram matrix, bounds the
/// loss curvature, so the loss never increases.
pub fn train_classifier(
    x: &[Vec<f64>],
    y: &[usize],
    labels: &[String],
    config: &ClassifierConfig,
) -> Result<LinearClassifier, ShallowError> {
    let k = labels.len();
    let mut counts = vec![0usize; k];
    for &label in y {
        counts[label] += 1;
    }
    if k < 2 || counts.iter().any(|&c| c == 0) || x.is_empty() {
        return Err(ShallowError::InsufficientSamples {
            needed: 1,
            detail: format!("label counts {counts:?}"),
        });
    }
    let f = x[0].len();
    if let Some(bad) = x.iter().find(|r| r.len() != f) {
        return Err(ShallowError::DimensionMismatch {
            expected: f,
            got: bad.len(),
        });
    }
    let n = x.len();
    let mut mean = vec![0.0; f];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; f];
    for row in x {
        for j in 0..f {
            std[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            let mut r: Vec<f64> = (0..f).map(|j| (row[j] - mean[j]) / std[j]).collect();
            r.push(1.0);
            r
        })
        .collect();

    let lr = 1.0 / (0.5 * gram_top_eigenvalue(&xs) + config.l2);
    let mut w = vec![vec![0.0; f + 1]; k];
    let mut checkpoints = Vec::new();
    let mut probs = vec![0.0; k];
    for epoch in 0..=config.epochs {
        let mut grad = vec![vec![0.0; f + 1]; k];
        let mut loss = 0.0;
        for (row, &label) in xs.iter().zip(y) {
            for c in 0..k {
                probs[c] = w[c].iter().zip(row).map(|(a, b)| a * b).sum();
            }
            softmax_in_place(&mut probs);
            loss -= probs[label].max(1e-300).ln() / n as f64;
            for c in 0..k {
                let delta = (probs[c] - f64::from(u8::from(c == label))) / n as f64;
                for (g, v) in grad[c].iter_mut().zip(row) {
                    *g += delta * v;
                }
            }
        }
        for wc in &w {
            loss += 0.5 * config.l2 * wc[..f].iter().map(|v| v * v).sum::<f64>();
        }
        if epoch % 50 == 0 || epoch == config.epochs {
            checkpoints.push((epoch, loss));
        }
        if epoch == config.epochs {
            break;
        }
        for c in 0..k {
            for j in 0..=f {
                let penalty = if j < f { config.l2 * w[c][j] } else { 0.0 };
                w[c][j] -= lr * (grad[c][j] + penalty);
            }
        }
    }

    // fold standardization into raw-feature weights
    let weights = w
        .into_iter()
        .map(|wc| {
            let mut raw: Vec<f64> = (0..f).map(|j| wc[j] / std[j]).collect();
            let bias = wc[f] - (0..f).map(|j| wc[j] * mean[j] / std[j]).sum::<f64>();
            raw.push(bias);
            raw
        })
        .collect();
    Ok(LinearClassifier {
        labels: labels.to_vec(),
        weights,
        meta: ClassifierMeta {
            l2: config.l2,
            epochs: config.epochs,
            learning_rate: lr,
            loss_checkpoints: checkpoints,
        },
    })
}

impl LinearClassifier {
    pub fn n_features(&self) -> usize {
        self.weights[0].len() - 1
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, ShallowError> {
        let p = predict_proba(self, x)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> Result<f64, ShallowError> {
        let mut hits = 0usize;
        for (row, &label) in x.iter().zip(y) {
            hits += usize::from(self.predict(row)? == label);
        }
        Ok(hits as f64 / x.len().max(1) as f64)
    }
}

pub fn predict_proba(clf: &LinearClassifier, x: &[f64]) -> Result<Vec<f64>, ShallowError> {
    let f = clf.n_features();
    if x.len() != f {
        return Err(ShallowError::DimensionMismatch {
            expected: f,
            got: x.len(),
        });
    }
    let mut z: Vec<f64> = clf
        .weights
        .iter()
        .map(|w| w[..f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[f])
        .collect();
    softmax_in_place(&mut z);
    Ok(z)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, ShallowError> {
    if u.len() != v.len() {
        return Err(ShallowError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ShallowError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Per-label stratified split of sample indices into consecutive parts with
/// the given fractions (the last part takes the remainder).
pub fn stratified_split(y: &[usize], fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in y.iter().enumerate() {
        by_label.entry(label).or_default().push(i);
    }
    let mut parts = vec![Vec::new(); fractions.len()];
    for (label, mut idx) in by_label {
        idx.shuffle(&mut seed::derived_rng(seed, &[label as u64]));
        let n = idx.len();
        let mut start = 0;
        for (p, frac) in fractions.iter().enumerate() {
            let end = if p + 1 == fractions.len() {
                n
            } else {
                (start + (frac * n as f64).round() as usize).min(n)
            };
            parts[p].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

/// Accuracies of the style judge on its own corpus splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
}

/// Independent style judge: bigram features plus a linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub labels: Vec<String>,
    pub bigram_vocab: BigramVocab,
    pub weights: Vec<Vec<f64>>,
}

pub const JUDGE_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];

impl StyleClassifier {
    /// Trains on the pieces of `corpus` with a 70/10/20 stratified split.
    pub fn train(
        corpus: &StyleCorpus,
        config: &ClassifierConfig,
        seed: u64,
    ) -> Result<(StyleClassifier, JudgeReport), ShallowError> {
        let y: Vec<usize> = corpus.entries.iter().map(|e| e.label.id).collect();
        let min = corpus.counts().into_iter().min().unwrap_or(0);
        if corpus.labels.len() < 2 || min < 5 {
            return Err(ShallowError::InsufficientSamples {
                needed: 5,
                detail: format!("label counts {:?}", corpus.counts()),
            });
        }
        let parts = stratified_split(&y, &JUDGE_SPLIT, seed::derive_seed(seed, &[0x7A11]));
        let vocab =
            BigramVocab::from_sequences(parts[0].iter().map(|&i| &corpus.entries[i].piece));
        let feats: Vec<Vec<f64>> = corpus
            .entries
            .iter()
            .map(|e| bigram_features(&e.piece, &vocab).values)
            .collect();
        let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
            (idx.iter().map(|&i| feats[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
        };
        let labels: Vec<String> = corpus.labels.iter().map(|l| l.name.clone()).collect();
        let (xt, yt) = pick(&parts[0]);
        let clf = train_classifier(&xt, &yt, &labels, config)?;
        let (xv, yv) = pick(&parts[1]);
        let (xs, ys) = pick(&parts[2]);
        let report = JudgeReport {
            train_accuracy: clf.accuracy(&xt, &yt)?,
            validation_accuracy: clf.accuracy(&xv, &yv)?,
            test_accuracy: clf.accuracy(&xs, &ys)?,
            n_train: yt.len(),
            n_validation: yv.len(),
            n_test: ys.len(),
        };
        Ok((
            StyleClassifier {
                labels,
                bigram_vocab: vocab,
                weights: clf.weights,
            },
            report,
        ))
    }

    /// Style probabilities for a token sequence, in label order.
    pub fn predict_proba(&self, seq: &TokenSequence) -> Vec<f64> {
        let feats = bigram_features(seq, &self.bigram_vocab);
        let clf = self.linear();
        predict_proba(&clf, &feats.values).expect("feature dimension matches vocab")
    }

    fn linear(&self) -> LinearClassifier {
        LinearClassifier {
            labels: self.labels.clone(),
            weights: self.weights.clone(),
            meta: ClassifierMeta {
                l2: 0.0,
                epochs: 0,
                learning_rate: 0.0,
                loss_checkpoints: Vec::new(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ShallowError> {
        let json = serde_json::to_string(self).expect("classifier serializes");
        fs::write(path, json).map_err(|source| ShallowError::IoFailure {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ShallowError> {
        let text = fs::read_to_string(path).map_err(|source| ShallowError::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        let clf: StyleClassifier =
            serde_json::from_str(&text).map_err(|e| ShallowError::SchemaViolation(e.to_string()))?;
        let dim = clf.bigram_vocab.dim() + 1;
        if clf.weights.len() != clf.labels.len() || clf.weights.iter().any(|w| w.len() != dim) {
            return Err(ShallowError::SchemaViolation(format!(
                "weights must be {} rows of {dim}",
                clf.labels.len()
            )));
        }
        Ok(clf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abc::tokenize;

    fn vocab_of(texts: &[&str]) -> BigramVocab {
        let seqs: Vec<_> = texts.iter().map(|t| tokenize(t).unwrap()).collect();
        BigramVocab::from_sequences(&seqs)
    }

    #[test]
    fn repeated_bigram_is_an_indicator() {
        let v = vocab_of(&["CD|CD", "EF"]);
        let f = bigram_features(&tokenize("X:1\nK:C\nC|C|C").unwrap(), &vocab_of(&["CC"]));
        assert!(!f.empty);
        assert_eq!(f.values, vec![1.0, 0.0]);
        assert_eq!(v.dim(), 4); // (C,D), (D,C), (E,F) + OOV
    }

    #[test]
    fn empty_body_is_flagged() {
        let v = vocab_of(&["CD"]);
        let f = bigram_features(&tokenize("X:1\nK:C\n|").unwrap(), &v);
        assert!(f.empty);
        assert!(f.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_counted_frequencies() {
        // content tokens: C 2 D 2 C 2 E (barlines and spaces dropped)
        let seq = tokenize("C2 D2|C2 E|").unwrap();
        assert_eq!(seq.len(), 11);
        let v = vocab_of(&["C2D2"]);
        // vocab: (2,D) (C,2) (D,2); OOV gets (2,C) and (2,E)
        let f = bigram_features(&seq, &v);
        assert_eq!(f.values, vec![1.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0]);
        assert!((f.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("L{i}")).collect()
    }

    #[test]
    fn separable_set_is_fit_exactly() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            x.push(vec![1.0 + t, 0.5 - t]);
            y.push(0);
            x.push(vec![-1.0 - t, 0.2 + t]);
            y.push(1);
        }
        // brute-force witness: the first coordinate's sign separates the classes
        assert!(x.iter().zip(&y).all(|(r, &l)| (r[0] > 0.0) == (l == 0)));
        let cfg = ClassifierConfig { l2: 1e-3, epochs: 300 };
        let clf = train_classifier(&x, &y, &labels(2), &cfg).unwrap();
        assert_eq!(clf.accuracy(&x, &y).unwrap(), 1.0);
        let again = train_classifier(&x, &y, &labels(2), &cfg).unwrap();
        assert_eq!(clf, again);
        let losses: Vec<f64> = clf.meta.loss_checkpoints.iter().map(|p| p.1).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{losses:?}");
    }

    #[test]
    fn uninformative_features_predict_the_majority() {
        let x = vec![vec![0.3, 0.3]; 30];
        let y: Vec<usize> = (0..30).map(|i| usize::from(i >= 20)).collect();
        let cfg = ClassifierConfig { l2: 1e-3, epochs: 200 };
        let clf = train_classifier(&x, &y, &labels(2), &cfg).unwrap();
        assert!((clf.accuracy(&x, &y).unwrap() - 20.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn single_label_is_rejected() {
        let x = vec![vec![1.0]; 6];
        let y = vec![0; 6];
        let cfg = ClassifierConfig { l2: 1e-3, epochs: 10 };
        assert!(matches!(
            train_classifier(&x, &y, &labels(1), &cfg),
            Err(ShallowError::InsufficientSamples { .. })
        ));
    }

    fn fixed(weights: Vec<Vec<f64>>) -> LinearClassifier {
        LinearClassifier {
            labels: labels(weights.len()),
            weights,
            meta: ClassifierMeta {
                l2: 0.0,
                epochs: 0,
                learning_rate: 0.0,
                loss_checkpoints: vec![],
            },
        }
    }

    #[test]
    fn probabilities() {
        let zero = fixed(vec![vec![0.0; 3]; 4]);
        let p = predict_proba(&zero, &[0.4, -2.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let hand = fixed(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let p = predict_proba(&hand, &[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        assert!(matches!(
            predict_proba(&hand, &[1.0]),
            Err(ShallowError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(ShallowError::ZeroVector)));
    }

    #[test]
    fn split_is_stratified_and_complete() {
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let parts = stratified_split(&y, &JUDGE_SPLIT, 3);
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 40);
        assert_eq!(parts[0].len(), 28);
        assert_eq!(parts[1].len(), 4);
        for label in 0..4 {
            assert_eq!(parts[2].iter().filter(|&&i| y[i] == label).count(), 2);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_is_symmetric_and_scale_invariant(
                u in prop::collection::vec(-5.0f64..5.0, 4),
                v in prop::collection::vec(-5.0f64..5.0, 4),
                a in 0.1f64..10.0,
                b in 0.1f64..10.0,
            ) {
                prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
                let c = cosine(&u, &v).unwrap();
                prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-12);
                let au: Vec<f64> = u.iter().map(|x| x * a).collect();
                let bv: Vec<f64> = v.iter().map(|x| x * b).collect();
                prop_assert!((c - cosine(&au, &bv).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn probabilities_are_a_distribution(
                w in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..6),
                x in prop::collection::vec(-3.0f64..3.0, 3),
            ) {
                let clf = LinearClassifier {
                    labels: (0..w.len()).map(|i| i.to_string()).collect(),
                    weights: w,
                    meta: ClassifierMeta { l2: 0.0, epochs: 0, learning_rate: 0.0, loss_checkpoints: vec![] },
                };
                let p = predict_proba(&clf, &x).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }
}
