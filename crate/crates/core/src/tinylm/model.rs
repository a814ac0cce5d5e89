// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter layout, full-sequence forward pass and its hand-written backward.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{Checkpoint, ModelConfig, TinyLmError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// A named parameter array inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub blocks: Vec<BlockSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub total: usize,
    /// Every slot in storage order, with its checkpoint name.
    pub named: Vec<(String, Slot)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.hidden_dim;
        let f = cfg.mlp_dim();
        let mut named = Vec::new();
        let mut offset = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            named.push((name, s));
            s
        };
        let tok_emb = slot("tok_emb".into(), cfg.vocab_size, d);
        let pos_emb = slot("pos_emb".into(), cfg.context_len, d);
        let blocks = (0..cfg.n_layers)
            .map(|i| BlockSlots {
                ln1_g: slot(format!("blocks.{i}.ln1.gain"), 1, d),
                ln1_b: slot(format!("blocks.{i}.ln1.bias"), 1, d),
                wq: slot(format!("blocks.{i}.attn.wq"), d, d),
                wk: slot(format!("blocks.{i}.attn.wk"), d, d),
                wv: slot(format!("blocks.{i}.attn.wv"), d, d),
                wo: slot(format!("blocks.{i}.attn.wo"), d, d),
                ln2_g: slot(format!("blocks.{i}.ln2.gain"), 1, d),
                ln2_b: slot(format!("blocks.{i}.ln2.bias"), 1, d),
                w1: slot(format!("blocks.{i}.mlp.w1"), d, f),
                b1: slot(format!("blocks.{i}.mlp.b1"), 1, f),
                w2: slot(format!("blocks.{i}.mlp.w2"), f, d),
                b2: slot(format!("blocks.{i}.mlp.b2"), 1, d),
            })
            .collect();
        let lnf_g = slot("lnf.gain".into(), 1, d);
        let lnf_b = slot("lnf.bias".into(), 1, d);
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            total: offset,
            named,
        }
    }
}

pub(crate) fn mat(p: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &p[s.range()]).expect("slot shape")
}

pub(crate) fn vec1(p: &[f64], s: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[s.range()])
}

fn accumulate<'a>(g: &mut [f64], s: Slot, values: impl IntoIterator<Item = &'a f64>) {
    for (acc, v) in g[s.range()].iter_mut().zip(values) {
        *acc += v;
    }
}

/// Layer norm of one row; returns `(normalized, rstd)` with `out = xhat*g + b`.
pub(crate) fn ln_row(
    x: ArrayView1<f64>,
    g: ArrayView1<f64>,
    b: ArrayView1<f64>,
    out: &mut [f64],
    xhat: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut y = Array2::zeros((t, d));
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        rstd[i] = ln_row(
            x.row(i),
            g,
            b,
            y.row_mut(i).as_slice_mut().unwrap(),
            xhat.row_mut(i).as_slice_mut().unwrap(),
        );
    }
    (y, LnCache { xhat, rstd })
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    grads: &mut [f64],
    g_slot: Slot,
    b_slot: Slot,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    let mut dg = Array1::<f64>::zeros(d);
    let mut db = Array1::<f64>::zeros(d);
    let inv_d = 1.0 / d as f64;
    for i in 0..t {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[[i, j]] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    accumulate(grads, g_slot, dg.iter());
    accumulate(grads, b_slot, db.iter());
    dx
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Row-wise causal softmax in place: row `i` keeps columns `0..=i`.
fn causal_softmax(s: &mut Array2<f64>) {
    let t = s.nrows();
    for i in 0..t {
        let mut row = s.row_mut(i);
        let max = row.iter().take(i + 1).cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..t {
            if j <= i {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub(crate) struct FwdCache {
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    z: Array2<f64>,
}

/// Residual-stream activations at the exit of block `layer` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layer: usize,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub hiddens: Vec<HiddenStates>,
}

pub(crate) type RowEdit<'e> = (usize, &'e mut dyn FnMut(ArrayView1<f64>) -> Array1<f64>);

pub(crate) struct RunOutput {
    pub logits: Array2<f64>,
    pub hiddens: Vec<Array2<f64>>,
    pub cache: Option<FwdCache>,
}

pub(crate) fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<(), TinyLmError> {
    if ids.is_empty() {
        return Err(TinyLmError::EmptyPrompt);
    }
    if ids.len() > cfg.context_len {
        return Err(TinyLmError::ContextOverflow {
            len: ids.len(),
            max: cfg.context_len,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(TinyLmError::UnknownToken(format!("#{bad}")));
    }
    Ok(())
}

/// Full forward pass. `edit` replaces the last row of the residual stream at
/// the exit of the given block; later blocks consume the edited row.
pub(crate) fn run(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    ids: &[usize],
    mut edit: Option<RowEdit<'_>>,
    keep_cache: bool,
    keep_hiddens: bool,
) -> RunOutput {
    let t = ids.len();
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let emb = mat(p, layout.tok_emb);
    let pos = mat(p, layout.pos_emb);

    let mut x = Array2::zeros((t, d));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&emb.row(id));
        row += &pos.row(i);
    }

    let mut caches = Vec::new();
    let mut hiddens = Vec::new();
    for (li, bs) in layout.blocks.iter().enumerate() {
        let (a, ln1) = ln_forward(&x, vec1(p, bs.ln1_g), vec1(p, bs.ln1_b));
        let q = a.dot(&mat(p, bs.wq));
        let k = a.dot(&mat(p, bs.wk));
        let v = a.dot(&mat(p, bs.wv));
        let mut o = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t());
            sc.mapv_inplace(|z| z * scale);
            causal_softmax(&mut sc);
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            if keep_cache {
                probs.push(sc);
            }
        }
        let x1 = &x + &o.dot(&mat(p, bs.wo));
        let (m, ln2) = ln_forward(&x1, vec1(p, bs.ln2_g), vec1(p, bs.ln2_b));
        let mut u = m.dot(&mat(p, bs.w1));
        u += &vec1(p, bs.b1);
        let g = u.mapv(gelu);
        let mut f = g.dot(&mat(p, bs.w2));
        f += &vec1(p, bs.b2);
        x = x1 + f;

        if let Some((layer, ref mut func)) = edit {
            if layer == li + 1 {
                let edited = func(x.row(t - 1));
                x.row_mut(t - 1).assign(&edited);
            }
        }
        if keep_hiddens {
            hiddens.push(x.clone());
        }
        if keep_cache {
            caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                m,
                u,
                g,
            });
        }
    }

    let (z, lnf) = ln_forward(&x, vec1(p, layout.lnf_g), vec1(p, layout.lnf_b));
    let logits = z.dot(&emb.t());
    RunOutput {
        logits,
        hiddens,
        cache: keep_cache.then(|| FwdCache {
            ids: ids.to_vec(),
            blocks: caches,
            lnf,
            z,
        }),
    }
}

/// Backpropagates `dlogits` through a cached forward pass, accumulating into
/// `grads` (same layout as the parameters).
pub(crate) fn backward(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    cache: &FwdCache,
    dlogits: &Array2<f64>,
    grads: &mut [f64],
) {
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let emb = mat(p, layout.tok_emb);
    let t = cache.ids.len();

    // tied head: logits = z · Eᵀ
    accumulate(grads, layout.tok_emb, dlogits.t().dot(&cache.z).iter());
    let dz = dlogits.dot(&emb);
    let mut dx = ln_backward(
        &dz,
        &cache.lnf,
        vec1(p, layout.lnf_g),
        grads,
        layout.lnf_g,
        layout.lnf_b,
    );

    for (bs, bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
        // MLP branch
        accumulate(grads, bs.w2, bc.g.t().dot(&dx).iter());
        accumulate(grads, bs.b2, dx.sum_axis(Axis(0)).iter());
        let mut du = dx.dot(&mat(p, bs.w2).t());
        du.zip_mut_with(&bc.u, |dg, &u| *dg *= gelu_grad(u));
        accumulate(grads, bs.w1, bc.m.t().dot(&du).iter());
        accumulate(grads, bs.b1, du.sum_axis(Axis(0)).iter());
        let dm = du.dot(&mat(p, bs.w1).t());
        let dx1 = dx + ln_backward(&dm, &bc.ln2, vec1(p, bs.ln2_g), grads, bs.ln2_g, bs.ln2_b);

        // attention branch
        accumulate(grads, bs.wo, bc.o.t().dot(&dx1).iter());
        let dout = dx1.dot(&mat(p, bs.wo).t());
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &bc.probs[h];
            let doh = dout.slice(cols);
            let da = doh.dot(&bc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&doh));
            let mut ds = Array2::zeros((t, t));
            for i in 0..t {
                let dot: f64 = (0..=i).map(|j| probs[[i, j]] * da[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = probs[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&bc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&bc.q.slice(cols)));
        }
        accumulate(grads, bs.wq, bc.a.t().dot(&dq).iter());
        accumulate(grads, bs.wk, bc.a.t().dot(&dk).iter());
        accumulate(grads, bs.wv, bc.a.t().dot(&dv).iter());
        let da = dq.dot(&mat(p, bs.wq).t()) + dk.dot(&mat(p, bs.wk).t()) + dv.dot(&mat(p, bs.wv).t());
        dx = dx1 + ln_backward(&da, &bc.ln1, vec1(p, bs.ln1_g), grads, bs.ln1_g, bs.ln1_b);
    }

    let te = layout.tok_emb;
    let pe = layout.pos_emb;
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(i);
        for j in 0..d {
            grads[te.offset + id * d + j] += row[j];
            grads[pe.offset + i * d + j] += row[j];
        }
    }
}

/// Summed next-token cross-entropy of `ids` (predicting `ids[1..]`) and its
/// gradient scaled by `grad_scale`, accumulated into `grads`.
pub(crate) fn loss_and_grad(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    ids: &[usize],
    grad_scale: f64,
    grads: Option<&mut [f64]>,
) -> f64 {
    let inputs = &ids[..ids.len() - 1];
    let targets = &ids[1..];
    let out = run(cfg, layout, p, inputs, None, grads.is_some(), false);
    let mut dlogits = out.logits;
    let mut loss = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let mut row = dlogits.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss -= (row[target] / sum).ln();
        for v in row.iter_mut() {
            *v = *v / sum * grad_scale;
        }
        row[target] -= grad_scale;
    }
    if let Some(grads) = grads {
        backward(cfg, layout, p, out.cache.as_ref().unwrap(), &dlogits, grads);
    }
    loss
}

/// Logits for every position plus the hidden states at the exit of each block.
pub fn forward(ckpt: &Checkpoint, tokens: &[usize]) -> Result<ForwardOutput, TinyLmError> {
    check_ids(&ckpt.config, tokens)?;
    let out = run(&ckpt.config, ckpt.layout(), &ckpt.params, tokens, None, false, true);
    Ok(ForwardOutput {
        logits: out.logits,
        hiddens: out
            .hiddens
            .into_iter()
            .enumerate()
            .map(|(i, values)| HiddenStates {
                layer: i + 1,
                values,
            })
            .collect(),
    })
}

/// Final-position logits after replacing the final-position hidden row at
/// the exit of block `layer` with `edit(row)`.
pub fn forward_with_edit<F>(
    ckpt: &Checkpoint,
    tokens: &[usize],
    layer: usize,
    mut edit: F,
) -> Result<Array1<f64>, TinyLmError>
where
    F: FnMut(ArrayView1<f64>) -> Array1<f64>,
{
    check_ids(&ckpt.config, tokens)?;
    ckpt.check_layer(layer)?;
    let out = run(
        &ckpt.config,
        ckpt.layout(),
        &ckpt.params,
        tokens,
        Some((layer, &mut edit)),
        false,
        false,
    );
    Ok(out.logits.row(tokens.len() - 1).to_owned())
}
