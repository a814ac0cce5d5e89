// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise style localization over piece-level embeddings.
//!
//! A piece embedding is the residual row of the final token at the exit of a
//! block. For every block the report computes four scores (linear-probe
//! accuracy, kNN purity, negated Davies-Bouldin index, separation ratio) and
//! picks the layer that is best on the most scores, preferring the deepest
//! layer on ties.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::abc::TokenSequence;
use crate::corpus::{StyleCorpus, StyleLabel};
use crate::seed;
use crate::shallow::{self, ClassifierConfig, ShallowError};
use crate::tinylm::{forward, Checkpoint, TinyLmError};

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error(transparent)]
    Model(#[from] TinyLmError),
    #[error(transparent)]
    Classifier(#[from] ShallowError),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceEmbedding {
    pub vector: Vec<f64>,
    /// Block index in `1..=L`.
    pub layer: usize,
    pub label: StyleLabel,
}

/// Final-token hidden row of `sequence` at the exit of block `layer`.
pub fn piece_embedding(
    ckpt: &Checkpoint,
    sequence: &TokenSequence,
    layer: usize,
) -> Result<Vec<f64>, LocalizationError> {
    ckpt.check_layer(layer)?;
    let ids = ckpt.vocab.encode(sequence)?;
    let out = forward(ckpt, &ids)?;
    Ok(out.hiddens[layer - 1].values.row(ids.len() - 1).to_vec())
}

/// Final-token rows at every layer: `result[l - 1]` is the layer-`l` row.
pub fn piece_embeddings_all_layers(
    ckpt: &Checkpoint,
    sequence: &TokenSequence,
) -> Result<Vec<Vec<f64>>, LocalizationError> {
    let ids = ckpt.vocab.encode(sequence)?;
    let out = forward(ckpt, &ids)?;
    Ok(out
        .hiddens
        .iter()
        .map(|h| h.values.row(ids.len() - 1).to_vec())
        .collect())
}

/// A clustering score; `degenerate` marks an infinite sentinel value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    #[serde(serialize_with = "finite_or_string", deserialize_with = "float_or_string")]
    pub value: f64,
    pub degenerate: bool,
}

fn finite_or_string<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn float_or_string<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
        },
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn n_labels(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Centroids and mean member-to-centroid distances of the labels present.
fn clusters(points: &[Vec<f64>], labels: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = n_labels(labels);
    let d = points.first().map_or(0, Vec::len);
    let mut counts = vec![0usize; k];
    let mut centroids = vec![vec![0.0; d]; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(p) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let mut scatter = vec![0.0; k];
    for (p, &l) in points.iter().zip(labels) {
        scatter[l] += dist(p, &centroids[l]) / counts[l] as f64;
    }
    let present: Vec<usize> = (0..k).filter(|&l| counts[l] > 0).collect();
    (
        present.iter().map(|&l| centroids[l].clone()).collect(),
        present.iter().map(|&l| scatter[l]).collect(),
    )
}

fn check_points(points: &[Vec<f64>], labels: &[usize]) -> Result<(), LocalizationError> {
    if points.len() != labels.len() {
        return Err(LocalizationError::InsufficientSamples(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(LocalizationError::InsufficientSamples(
            "need at least 2 labels".into(),
        ));
    }
    Ok(())
}

/// Mean fraction of same-label points among each point's `k` nearest
/// neighbours (Euclidean, self excluded, distance ties broken by index).
pub fn knn_purity(points: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64, LocalizationError> {
    if points.len() != labels.len() || points.len() <= k || k == 0 {
        return Err(LocalizationError::InsufficientSamples(format!(
            "knn purity needs n > k >= 1 (n = {}, k = {k})",
            points.len()
        )));
    }
    let n = points.len();
    let mut total = 0.0;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i).map(|j| (dist(&points[i], &points[j]), j)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let same = order[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count();
        total += same as f64 / k as f64;
    }
    Ok(total / n as f64)
}

/// `-(1/K) Σ_i max_{j≠i} (σ_i + σ_j) / d(μ_i, μ_j)`. Coincident centroids
/// give the `-∞` sentinel.
pub fn neg_davies_bouldin(points: &[Vec<f64>], labels: &[usize]) -> Result<Score, LocalizationError> {
    check_points(points, labels)?;
    let (centroids, scatter) = clusters(points, labels);
    let k = centroids.len();
    let mut sum = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let d = dist(&centroids[i], &centroids[j]);
            if d == 0.0 {
                return Ok(Score {
                    value: f64::NEG_INFINITY,
                    degenerate: true,
                });
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        sum += worst;
    }
    Ok(Score {
        value: -sum / k as f64,
        degenerate: false,
    })
}

/// Mean pairwise centroid distance over mean point-to-own-centroid distance.
/// Zero within-cluster spread gives the `+∞` sentinel.
pub fn separation_ratio(points: &[Vec<f64>], labels: &[usize]) -> Result<Score, LocalizationError> {
    check_points(points, labels)?;
    let (centroids, _) = clusters(points, labels);
    let k = centroids.len();
    let mut inter = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            inter += dist(&centroids[i], &centroids[j]);
        }
    }
    inter /= (k * (k - 1) / 2) as f64;
    // centroid per original label id, for the point-wise intra term
    let ids = {
        let mut v = labels.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let intra = points
        .iter()
        .zip(labels)
        .map(|(p, l)| dist(p, &centroids[ids.binary_search(l).expect("present")]))
        .sum::<f64>()
        / points.len() as f64;
    if intra == 0.0 {
        return Ok(Score {
            value: f64::INFINITY,
            degenerate: true,
        });
    }
    Ok(Score {
        value: inter / intra,
        degenerate: false,
    })
}

pub const PROBE_CONFIG: ClassifierConfig = ClassifierConfig {
    l2: 1e-3,
    epochs: 500,
};

/// Test accuracy of a multinomial linear probe on a stratified 75/25 split.
pub fn probe_accuracy(
    points: &[Vec<f64>],
    labels: &[usize],
    split_seed: u64,
) -> Result<f64, LocalizationError> {
    check_points(points, labels)?;
    let k = n_labels(labels);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c > 0 && c < 4) {
        return Err(LocalizationError::InsufficientSamples(format!(
            "probe needs at least 4 samples per label, got {counts:?}"
        )));
    }
    let present: Vec<usize> = (0..k).filter(|&l| counts[l] > 0).collect();
    let dense: Vec<usize> = labels
        .iter()
        .map(|l| present.binary_search(l).expect("present"))
        .collect();
    let parts = shallow::stratified_split(&dense, &[0.75, 0.25], split_seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            idx.iter().map(|&i| points[i].clone()).collect(),
            idx.iter().map(|&i| dense[i]).collect(),
        )
    };
    let (xt, yt) = pick(&parts[0]);
    let (xs, ys) = pick(&parts[1]);
    let names: Vec<String> = present.iter().map(|l| l.to_string()).collect();
    let clf = shallow::train_classifier(&xt, &yt, &names, &PROBE_CONFIG)?;
    Ok(clf.accuracy(&xs, &ys)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub probe_accuracy: f64,
    pub knn_purity: f64,
    pub neg_dbi: Score,
    pub sep_ratio: Score,
}

impl LayerMetrics {
    fn values(&self) -> [f64; 4] {
        [
            self.probe_accuracy,
            self.knn_purity,
            self.neg_dbi.value,
            self.sep_ratio.value,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layers: Vec<LayerMetrics>,
    /// `first_place_counts[l - 1]`: number of scores on which layer `l` is
    /// the (possibly tied) maximum.
    pub first_place_counts: Vec<usize>,
    pub selected_layer: usize,
}

impl LayerReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Counts first places per layer and picks the layer with the most, the
/// deepest one on ties.
pub fn select_layer(layers: Vec<LayerMetrics>) -> LayerReport {
    let mut counts = vec![0usize; layers.len()];
    for m in 0..4 {
        let best = layers
            .iter()
            .map(|l| l.values()[m])
            .fold(f64::NEG_INFINITY, f64::max);
        for (i, l) in layers.iter().enumerate() {
            if l.values()[m] == best {
                counts[i] += 1;
            }
        }
    }
    let mut selected = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c >= counts[selected] {
            selected = i;
        }
    }
    LayerReport {
        selected_layer: layers.get(selected).map_or(0, |l| l.layer),
        layers,
        first_place_counts: counts,
    }
}

pub const KNN_K: usize = 5;

/// Scores every layer on the corpus' final-token embeddings and selects l*.
pub fn layer_report(
    ckpt: &Checkpoint,
    corpus: &StyleCorpus,
    seed: u64,
) -> Result<LayerReport, LocalizationError> {
    let labels: Vec<usize> = corpus.entries.iter().map(|e| e.label.id).collect();
    let mut per_layer = vec![Vec::with_capacity(labels.len()); ckpt.n_layers()];
    for e in &corpus.entries {
        for (l, row) in piece_embeddings_all_layers(ckpt, &e.sequence())?
            .into_iter()
            .enumerate()
        {
            per_layer[l].push(row);
        }
    }
    let split_seed = seed::derive_seed(seed, &[0x9120]);
    let mut layers = Vec::with_capacity(per_layer.len());
    for (i, points) in per_layer.iter().enumerate() {
        layers.push(LayerMetrics {
            layer: i + 1,
            probe_accuracy: probe_accuracy(points, &labels, split_seed)?,
            knn_purity: knn_purity(points, &labels, KNN_K)?,
            neg_dbi: neg_davies_bouldin(points, &labels)?,
            sep_ratio: separation_ratio(points, &labels)?,
        });
    }
    Ok(select_layer(layers))
}

/// Projection of mean-centered points onto their top `dims` principal
/// directions. Each direction's sign is fixed so that its largest-magnitude
/// entry is positive.
pub fn pca_projection(points: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(dims.min(d))
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            axes.iter()
                .map(|a| (0..d).map(|j| centered[(i, j)] * a[j]).sum())
                .collect()
        })
        .collect()
}

/// Writes `piece_id,label,x,y` rows for a 2-D projection.
pub fn write_projection_csv(
    path: &Path,
    coords: &[Vec<f64>],
    labels: &[String],
) -> Result<(), LocalizationError> {
    let io = |e: csv::Error| LocalizationError::IoFailure {
        path: path.display().to_string(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["piece_id", "label", "x", "y"]).map_err(io)?;
    for (i, (c, l)) in coords.iter().zip(labels).enumerate() {
        let x = c.first().copied().unwrap_or(0.0);
        let y = c.get(1).copied().unwrap_or(0.0);
        w.write_record([i.to_string(), l.clone(), x.to_string(), y.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|source| LocalizationError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(layer: usize, v: [f64; 4]) -> LayerMetrics {
        LayerMetrics {
            layer,
            probe_accuracy: v[0],
            knn_purity: v[1],
            neg_dbi: Score {
                value: v[2],
                degenerate: false,
            },
            sep_ratio: Score {
                value: v[3],
                degenerate: false,
            },
        }
    }

    #[test]
    fn layer_winning_three_scores_is_selected() {
        let r = select_layer(vec![
            metrics(1, [0.5, 0.5, -2.0, 1.0]),
            metrics(2, [0.6, 0.9, -3.0, 1.1]),
            metrics(3, [0.9, 0.8, -1.0, 2.0]),
            metrics(4, [0.7, 0.7, -1.5, 1.5]),
        ]);
        assert_eq!(r.first_place_counts, vec![0, 1, 3, 0]);
        assert_eq!(r.selected_layer, 3);
    }

    #[test]
    fn full_tie_selects_deepest() {
        let r = select_layer((1..=6).map(|l| metrics(l, [1.0, 1.0, -1.0, 2.0])).collect());
        assert_eq!(r.first_place_counts, vec![4; 6]);
        assert_eq!(r.selected_layer, 6);
    }

    fn two_clusters() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.01;
            pts.push(vec![t, -t]);
            labels.push(0);
            pts.push(vec![100.0 + t, 50.0 - t]);
            labels.push(1);
        }
        (pts, labels)
    }

    #[test]
    fn knn_examples() {
        let (pts, labels) = two_clusters();
        assert_eq!(knn_purity(&pts, &labels, 5).unwrap(), 1.0);

        // alternating labels, unit spacing, k = 2: interior points see two
        // opposite labels; each endpoint sees one opposite and one same
        let line: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let alt: Vec<usize> = (0..8).map(|i| i % 2).collect();
        assert_eq!(knn_purity(&line, &alt, 2).unwrap(), 2.0 * 0.5 / 8.0);
        let strict: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![3.0], vec![4.0]];
        assert_eq!(knn_purity(&strict, &[0, 1, 1, 0], 1).unwrap(), 0.0);

        assert!(knn_purity(&pts[..5], &labels[..5], 5).is_err());
    }

    #[test]
    fn dbi_examples() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let s = neg_davies_bouldin(&pts, &[0, 1]).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(!s.degenerate);

        let pts = vec![vec![0.0], vec![2.0], vec![1.0], vec![1.0]];
        let s = neg_davies_bouldin(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s.degenerate && s.value == f64::NEG_INFINITY);
        assert!(neg_davies_bouldin(&pts, &[0; 4]).is_err());
    }

    #[test]
    fn hand_built_three_clusters() {
        // centroids (0,0), (4,0), (0,3); scatters 1, 0.5, 0
        let pts = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![4.0, 0.5],
            vec![4.0, -0.5],
            vec![0.0, 3.0],
        ];
        let labels = [0, 0, 1, 1, 2];
        let r0: f64 = [(1.5 / 4.0), (1.0 / 3.0)].into_iter().fold(f64::MIN, f64::max);
        let r1: f64 = [(1.5 / 4.0), (0.5 / 5.0)].into_iter().fold(f64::MIN, f64::max);
        let r2: f64 = [(1.0 / 3.0), (0.5 / 5.0)].into_iter().fold(f64::MIN, f64::max);
        let s = neg_davies_bouldin(&pts, &labels).unwrap();
        assert!((s.value + (r0 + r1 + r2) / 3.0).abs() < 1e-12);

        let sep = separation_ratio(&pts, &labels).unwrap();
        let inter = (4.0 + 3.0 + 5.0) / 3.0;
        let intra = (1.0 + 1.0 + 0.5 + 0.5 + 0.0) / 5.0;
        assert!((sep.value - inter / intra).abs() < 1e-12);
    }

    #[test]
    fn separation_examples() {
        let s = separation_ratio(&[vec![0.0], vec![5.0]], &[0, 1]).unwrap();
        assert!(s.degenerate && s.value == f64::INFINITY);

        // doubling the centroid gap of fixed-spread clusters doubles the ratio
        let make = |gap: f64| -> Vec<Vec<f64>> {
            vec![vec![-1.0], vec![1.0], vec![gap - 1.0], vec![gap + 1.0]]
        };
        let a = separation_ratio(&make(10.0), &[0, 0, 1, 1]).unwrap().value;
        let b = separation_ratio(&make(20.0), &[0, 0, 1, 1]).unwrap().value;
        assert!((a - 10.0).abs() < 1e-12 && (b - 20.0).abs() < 1e-12);
    }

    #[test]
    fn probe_examples() {
        let pts: Vec<Vec<f64>> = (0..16).map(|i| if i < 8 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let labels: Vec<usize> = (0..16).map(|i| usize::from(i >= 8)).collect();
        assert_eq!(probe_accuracy(&pts, &labels, 1).unwrap(), 1.0);
        assert!(matches!(
            probe_accuracy(&pts, &[0; 16], 1),
            Err(LocalizationError::InsufficientSamples(_))
        ));
        assert!(probe_accuracy(&pts[6..10], &labels[6..10], 1).is_err());
    }

    #[test]
    fn random_labels_on_identical_points_are_at_chance() {
        use rand::Rng;
        let pts = vec![vec![0.5, -0.5]; 80];
        let mut acc = 0.0;
        for s in 0..10 {
            let mut rng = seed::rng(s);
            let mut labels: Vec<usize> = (0..80).map(|i| i % 4).collect();
            for i in (1..80).rev() {
                labels.swap(i, rng.gen_range(0..=i));
            }
            acc += probe_accuracy(&pts, &labels, s).unwrap() / 10.0;
        }
        assert!((acc - 0.25).abs() < 0.15, "{acc}");
    }

    #[test]
    fn pca_properties() {
        // centered 2-D data: projection is an isometry
        let pts = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.5, -1.5], vec![-0.5, -1.0]];
        let proj = pca_projection(&pts, 2);
        for i in 0..4 {
            for j in 0..4 {
                assert!((dist(&pts[i], &pts[j]) - dist(&proj[i], &proj[j])).abs() < 1e-9);
            }
        }
        let var = |c: usize| proj.iter().map(|p| p[c] * p[c]).sum::<f64>();
        assert!(var(0) >= var(1));

        let rank1: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        for p in pca_projection(&rank1, 2) {
            assert!(p[1].abs() < 1e-9);
        }
    }

    #[test]
    fn report_json_keeps_sentinels() {
        let mut m = metrics(1, [1.0, 1.0, 0.0, 0.0]);
        m.sep_ratio = Score {
            value: f64::INFINITY,
            degenerate: true,
        };
        let r = select_layer(vec![m, metrics(2, [0.5, 0.5, -1.0, 3.0])]);
        let json = r.to_json();
        assert!(json.contains("\"inf\""));
        let back: LayerReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn projection_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_projection_csv(&path, &[vec![1.0, -0.5]], &["Alpha".into()]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "piece_id,label,x,y\n0,Alpha,1,-0.5\n");
    }
}
