// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop (AdamW, warmup plus cosine decay, global-norm clipping) and
//! the finite-difference gradient check.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, TrainMeta};
use super::model::{check_ids, loss_and_grad, Layout};
use super::{ModelConfig, TinyLmError, Vocab};
use crate::corpus::StyleCorpus;
use crate::seed;

fn init_params(cfg: &ModelConfig, layout: &Layout, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut p = vec![0.0; layout.total];
    let normal = Normal::new(0.0, std).expect("finite std");
    let residual = Normal::new(0.0, std / (2.0 * cfg.n_layers as f64).sqrt()).unwrap();
    let fill = |p: &mut [f64], dist: &Normal<f64>, rng: &mut _| {
        for v in p.iter_mut() {
            *v = dist.sample(rng);
        }
    };
    fill(&mut p[layout.tok_emb.range()], &normal, rng);
    fill(&mut p[layout.pos_emb.range()], &normal, rng);
    for b in &layout.blocks {
        for s in [b.wq, b.wk, b.wv, b.w1] {
            fill(&mut p[s.range()], &normal, rng);
        }
        for s in [b.wo, b.w2] {
            fill(&mut p[s.range()], &residual, rng);
        }
        for s in [b.ln1_g, b.ln2_g] {
            p[s.range()].fill(1.0);
        }
    }
    p[layout.lnf_g.range()].fill(1.0);
    p
}

fn round_to_f32(p: &mut [f64]) {
    for v in p.iter_mut() {
        *v = f64::from(*v as f32);
    }
}

/// Encodes each corpus entry as `prompt ⊕ piece` followed by end-of-piece.
fn encode_corpus(corpus: &StyleCorpus, vocab: &Vocab) -> Result<Vec<Vec<usize>>, TinyLmError> {
    corpus
        .entries
        .iter()
        .map(|e| {
            let mut ids = vocab.encode(&e.sequence())?;
            ids.push(vocab.eos());
            Ok(ids)
        })
        .collect()
}

/// Entropy (nats) of the empirical distribution of predicted tokens, i.e. the
/// loss of the best context-free predictor fitted to the same data.
pub fn unigram_entropy(seqs: &[Vec<usize>]) -> f64 {
    let mut counts = BTreeMap::new();
    let mut total = 0usize;
    for s in seqs {
        for &t in &s[1..] {
            *counts.entry(t).or_insert(0usize) += 1;
            total += 1;
        }
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mean next-token cross-entropy per predicted token.
pub fn heldout_loss(ckpt: &Checkpoint, seqs: &[Vec<usize>]) -> Result<f64, TinyLmError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        check_ids(&ckpt.config, s)?;
        if s.len() < 2 {
            continue;
        }
        total += loss_and_grad(&ckpt.config, ckpt.layout(), &ckpt.params, s, 0.0, None);
        count += s.len() - 1;
    }
    Ok(total / count.max(1) as f64)
}

fn split_holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::derived_rng(seed, &[0x5917]));
    let n_hold = if n < 2 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    let hold = idx[..n_hold].to_vec();
    let train = idx[n_hold..].to_vec();
    (train, hold)
}

/// Trains a model on the corpus. Fully determined by `(corpus, config, seed)`.
pub fn train(
    corpus: &StyleCorpus,
    config: &ModelConfig,
    seed: u64,
) -> Result<Checkpoint, TinyLmError> {
    let sequences: Vec<_> = corpus.entries.iter().map(|e| e.sequence()).collect();
    let vocab = Vocab::from_sequences(&sequences);
    let mut cfg = config.clone();
    if cfg.vocab_size != 0 && cfg.vocab_size != vocab.len() {
        return Err(TinyLmError::InvalidConfig(format!(
            "vocab_size {} but corpus vocabulary has {} entries",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    cfg.vocab_size = vocab.len();
    cfg.validate()?;
    let seqs = encode_corpus(corpus, &vocab)?;
    for s in &seqs {
        check_ids(&cfg, s)?;
    }
    let (train_idx, hold_idx) = split_holdout(seqs.len(), cfg.train.holdout_fraction, seed);

    let layout = Layout::new(&cfg);
    let mut rng = seed::derived_rng(seed, &[0x1417]);
    let mut params = init_params(&cfg, &layout, cfg.train.init_std, &mut rng);
    let tc = &cfg.train;
    let mut m = vec![0.0; layout.total];
    let mut v = vec![0.0; layout.total];
    let mut grads = vec![0.0; layout.total];
    let mut loss_curve = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        grads.fill(0.0);
        let batch: Vec<usize> = (0..tc.batch_size)
            .map(|_| train_idx[rng.gen_range(0..train_idx.len())])
            .collect();
        let n_tokens: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
        let scale = 1.0 / n_tokens as f64;
        let mut loss = 0.0;
        for &i in &batch {
            loss += loss_and_grad(&cfg, &layout, &params, &seqs[i], scale, Some(&mut grads));
        }
        loss *= scale;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TinyLmError::DivergenceDetected { step });
        }
        loss_curve.push(loss);

        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > tc.grad_clip { tc.grad_clip / norm } else { 1.0 };
        let lr = learning_rate(tc, step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - tc.beta1.powi(t);
        let bc2 = 1.0 - tc.beta2.powi(t);
        for i in 0..layout.total {
            let g = grads[i] * clip;
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g;
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + tc.eps);
            params[i] -= lr * (update + tc.weight_decay * params[i]);
        }
    }

    round_to_f32(&mut params);
    let hold: Vec<Vec<usize>> = hold_idx.iter().map(|&i| seqs[i].clone()).collect();
    let mut ckpt = Checkpoint::new(
        cfg,
        vocab,
        params,
        TrainMeta {
            seed,
            loss_curve,
            heldout_loss: f64::NAN,
            unigram_entropy: unigram_entropy(&hold),
        },
    )?;
    ckpt.meta.heldout_loss = heldout_loss(&ckpt, &hold)?;
    Ok(ckpt)
}

fn learning_rate(tc: &super::TrainConfig, step: usize) -> f64 {
    if step < tc.warmup_steps {
        return tc.learning_rate * (step + 1) as f64 / tc.warmup_steps as f64;
    }
    let span = (tc.steps - tc.warmup_steps).max(1) as f64;
    let progress = (step - tc.warmup_steps) as f64 / span;
    let floor = 0.1;
    tc.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub n_params: usize,
}

/// [`grad_check_with`] over 100 sampled coordinates.
pub fn grad_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport, TinyLmError> {
    grad_check_with(config, seed, 100, None)
}

/// Compares the analytic gradient of a random model's mean next-token loss
/// with central differences (step `1e-4`) on `n_samples` coordinates.
///
/// The error per coordinate is `|analytic - numeric| / (|numeric| + 1e-8)`.
/// `corrupt` doubles the analytic gradient of one coordinate (and always
/// checks it), for negative-control tests.
pub fn grad_check_with(
    config: &ModelConfig,
    seed: u64,
    n_samples: usize,
    corrupt: Option<usize>,
) -> Result<GradCheckReport, TinyLmError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = seed::derived_rng(seed, &[0x6C4E]);
    let mut params = init_params(config, &layout, 0.5, &mut rng);
    let jitter = Normal::new(0.0, 0.3).unwrap();
    let mut perturb = |range: std::ops::Range<usize>, rng: &mut _| {
        for v in &mut params[range] {
            *v += jitter.sample(rng);
        }
    };
    for b in &layout.blocks {
        for s in [b.ln1_g, b.ln1_b, b.ln2_g, b.ln2_b, b.b1, b.b2] {
            perturb(s.range(), &mut rng);
        }
    }
    perturb(layout.lnf_g.range(), &mut rng);
    perturb(layout.lnf_b.range(), &mut rng);

    let len = config.context_len.min(8).max(2);
    let batch: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect())
        .collect();
    let n_tokens: usize = batch.iter().map(|s| s.len() - 1).sum();
    let scale = 1.0 / n_tokens as f64;
    let loss = |p: &[f64]| -> f64 {
        batch
            .iter()
            .map(|s| loss_and_grad(config, &layout, p, s, 0.0, None))
            .sum::<f64>()
            * scale
    };

    let mut analytic = vec![0.0; layout.total];
    for s in &batch {
        loss_and_grad(config, &layout, &params, s, scale, Some(&mut analytic));
    }
    if let Some(i) = corrupt {
        analytic[i] *= 2.0;
    }

    let mut coords: Vec<usize> = (0..layout.total).collect();
    coords.shuffle(&mut rng);
    coords.truncate(n_samples.min(layout.total));
    if let Some(i) = corrupt {
        if !coords.contains(&i) {
            coords.push(i);
        }
    }

    let h = 1e-4;
    let mut max_rel_error: f64 = 0.0;
    for &i in &coords {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(&params);
        params[i] = orig - h;
        let down = loss(&params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        max_rel_error = max_rel_error.max(err);
    }
    Ok(GradCheckReport {
        max_rel_error,
        n_checked: coords.len(),
        n_params: layout.total,
    })
}
