// SPDX-License-Identifier: MIT OR Apache-2.0

//! Incremental decoding with a key/value cache, sampling, and generation.
//!
//! The cache only ever holds keys and values computed from unedited rows.
//! An edit at block `l` is applied by [`Decoder::logits_with_edit`], which
//! recomputes blocks `l+1..=L` for the newest position against the cached
//! history. That is exactly what a full [`forward_with_edit`] pass computes,
//! since earlier rows never see the edited one.
//!
//! [`forward_with_edit`]: super::forward_with_edit

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{gelu, ln_row, mat, vec1, BlockSlots};
use super::{Checkpoint, TinyLmError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Per-generation sampler state. One uniform draw is taken per step and may
/// be used for several candidate distributions.
pub struct SamplerState {
    temperature: f64,
    rng: Option<ChaCha8Rng>,
}

impl SamplerState {
    pub fn new(sampler: Sampler) -> Self {
        match sampler {
            Sampler::Greedy => SamplerState {
                temperature: 0.0,
                rng: None,
            },
            Sampler::Temperature { temperature, seed } => SamplerState {
                temperature,
                rng: Some(seed::rng(seed)),
            },
        }
    }

    pub fn draw(&mut self) -> f64 {
        self.rng.as_mut().map_or(0.0, |r| r.gen::<f64>())
    }

    /// Inverse-CDF pick from `softmax(logits / temperature)`; argmax when the
    /// temperature is zero.
    pub fn pick(&self, logits: ArrayView1<f64>, u: f64) -> usize {
        if self.temperature <= 0.0 || self.rng.is_none() {
            return argmax(logits);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits
            .iter()
            .map(|&l| ((l - max) / self.temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let target = u * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                last_positive = i;
            }
            acc += w;
            if acc > target {
                return i;
            }
        }
        last_positive
    }
}

pub(crate) fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Logits and per-block hidden rows for the newest position.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Array1<f64>,
    /// `hiddens[l - 1]` is the residual row at the exit of block `l`.
    pub hiddens: Vec<Array1<f64>>,
}

pub struct Decoder<'a> {
    ckpt: &'a Checkpoint,
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Self {
        let shape = (ckpt.config.context_len, ckpt.config.hidden_dim);
        Decoder {
            ckpt,
            keys: vec![Array2::zeros(shape); ckpt.config.n_layers],
            values: vec![Array2::zeros(shape); ckpt.config.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the unedited outputs at its position.
    pub fn feed(&mut self, token: usize) -> Result<StepOutput, TinyLmError> {
        let cfg = &self.ckpt.config;
        if self.len >= cfg.context_len {
            return Err(TinyLmError::ContextOverflow {
                len: self.len + 1,
                max: cfg.context_len,
            });
        }
        if token >= cfg.vocab_size {
            return Err(TinyLmError::UnknownToken(format!("#{token}")));
        }
        let layout = self.ckpt.layout();
        let p = &self.ckpt.params;
        let pos = self.len;
        let mut x = &mat(p, layout.tok_emb).row(token) + &mat(p, layout.pos_emb).row(pos);
        let mut hiddens = Vec::with_capacity(cfg.n_layers);
        for (li, bs) in layout.blocks.iter().enumerate() {
            let (out, k, v) = self.block_row(bs, li, x.view(), pos);
            self.keys[li].row_mut(pos).assign(&k);
            self.values[li].row_mut(pos).assign(&v);
            x = out;
            hiddens.push(x.clone());
        }
        self.len += 1;
        Ok(StepOutput {
            logits: self.head(x.view()),
            hiddens,
        })
    }

    /// Final-position logits when the newest position's row at the exit of
    /// block `layer` is replaced by `row`. The cache is left untouched.
    pub fn logits_with_edit(
        &self,
        layer: usize,
        row: ArrayView1<f64>,
    ) -> Result<Array1<f64>, TinyLmError> {
        self.ckpt.check_layer(layer)?;
        assert!(self.len > 0, "nothing has been fed yet");
        let layout = self.ckpt.layout();
        let pos = self.len - 1;
        let mut x = row.to_owned();
        for (li, bs) in layout.blocks.iter().enumerate().skip(layer) {
            x = self.block_row(bs, li, x.view(), pos).0;
        }
        Ok(self.head(x.view()))
    }

    /// One block for a single row at `pos`, attending to cached rows
    /// `0..pos` and to its own fresh key/value.
    fn block_row(
        &self,
        bs: &BlockSlots,
        li: usize,
        x: ArrayView1<f64>,
        pos: usize,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let cfg = &self.ckpt.config;
        let p = &self.ckpt.params;
        let d = cfg.hidden_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut a = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        ln_row(x, vec1(p, bs.ln1_g), vec1(p, bs.ln1_b), &mut a, &mut scratch);
        let a = ArrayView1::from(&a);
        let q = a.dot(&mat(p, bs.wq));
        let k = a.dot(&mat(p, bs.wk));
        let v = a.dot(&mat(p, bs.wv));

        let keys = self.keys[li].slice(s![..pos, ..]);
        let vals = self.values[li].slice(s![..pos, ..]);
        let mut o = Array1::zeros(d);
        let mut scores = vec![0.0; pos + 1];
        for h in 0..cfg.n_heads {
            let r = h * dh..(h + 1) * dh;
            let qh = q.slice(s![r.clone()]);
            for (j, kr) in keys.rows().into_iter().enumerate() {
                scores[j] = qh.dot(&kr.slice(s![r.clone()])) * scale;
            }
            scores[pos] = qh.dot(&k.slice(s![r.clone()])) * scale;
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                sum += *sc;
            }
            let mut oh = o.slice_mut(s![r.clone()]);
            for (j, vr) in vals.rows().into_iter().enumerate() {
                oh.scaled_add(scores[j] / sum, &vr.slice(s![r.clone()]));
            }
            oh.scaled_add(scores[pos] / sum, &v.slice(s![r.clone()]));
        }
        let x1 = &x + &o.dot(&mat(p, bs.wo));

        let mut m = vec![0.0; d];
        ln_row(x1.view(), vec1(p, bs.ln2_g), vec1(p, bs.ln2_b), &mut m, &mut scratch);
        let mut u = ArrayView1::from(&m).dot(&mat(p, bs.w1));
        u += &vec1(p, bs.b1);
        u.mapv_inplace(gelu);
        let mut f = u.dot(&mat(p, bs.w2));
        f += &vec1(p, bs.b2);
        (x1 + f, k, v)
    }

    fn head(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let layout = self.ckpt.layout();
        let p = &self.ckpt.params;
        let d = self.ckpt.config.hidden_dim;
        let mut z = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        ln_row(x, vec1(p, layout.lnf_g), vec1(p, layout.lnf_b), &mut z, &mut scratch);
        mat(p, layout.tok_emb).dot(&ArrayView1::from(&z))
    }
}

/// Per-step edit applied to the newest row at the exit of a block.
pub type StepEdit<'e> = (usize, &'e dyn Fn(ArrayView1<f64>) -> Array1<f64>);

/// Autoregressive generation from `prompt` (token ids). Returns the prompt
/// followed by the generated ids; stops at `max_len` total tokens or when
/// the end-of-piece id is drawn (which is not included).
pub fn generate(
    ckpt: &Checkpoint,
    prompt: &[usize],
    max_len: usize,
    sampler: Sampler,
    per_step_edit: Option<StepEdit<'_>>,
) -> Result<Vec<usize>, TinyLmError> {
    if prompt.is_empty() {
        return Err(TinyLmError::EmptyPrompt);
    }
    let limit = ckpt.config.context_len;
    if prompt.len() > limit || max_len > limit {
        return Err(TinyLmError::ContextOverflow {
            len: prompt.len().max(max_len),
            max: limit,
        });
    }
    if let Some((layer, _)) = per_step_edit {
        ckpt.check_layer(layer)?;
    }
    let eos = ckpt.vocab.eos();
    let mut state = SamplerState::new(sampler);
    let mut dec = Decoder::new(ckpt);
    let mut ids = prompt.to_vec();
    if ids.len() >= max_len {
        return Ok(ids);
    }
    let mut step = None;
    for &t in prompt {
        step = Some(dec.feed(t)?);
    }
    let mut step = step.expect("prompt is non-empty");
    while ids.len() < max_len {
        let u = state.draw();
        let token = match per_step_edit {
            Some((layer, edit)) => {
                let edited = edit(step.hiddens[layer - 1].view());
                state.pick(dec.logits_with_edit(layer, edited.view())?.view(), u)
            }
            None => state.pick(step.logits.view(), u),
        };
        if token == eos {
            break;
        }
        ids.push(token);
        if ids.len() < max_len {
            step = dec.feed(token)?;
        }
    }
    Ok(ids)
}
