// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint container and its JSON file format.
//!
//! ```text
//! {
//!   "format": "stylesteer-tinylm/1",
//!   "config": { ModelConfig },
//!   "vocab": [ {"text": "\n", "kind": "Whitespace"}, ..., {"text": "<eos>", "kind": null} ],
//!   "params": [ {"name": "tok_emb", "shape": [V, d], "data": [f32, ...]}, ... ],
//!   "meta": { "seed": u64, "loss_curve": [...], "heldout_loss": f64, "unigram_entropy": f64 }
//! }
//! ```
//!
//! `params` appear in storage order and every `data` array is row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Layout;
use super::{ModelConfig, TinyLmError, Vocab};

pub const FORMAT: &str = "stylesteer-tinylm/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub heldout_loss: f64,
    pub unigram_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Flat parameter vector; every value is exactly representable as `f32`.
    pub params: Vec<f64>,
    pub meta: TrainMeta,
    layout: Layout,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.vocab == other.vocab
            && self.params == other.params
            && self.meta == other.meta
    }
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        params: Vec<f64>,
        meta: TrainMeta,
    ) -> Result<Self, TinyLmError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(TinyLmError::SchemaViolation(format!(
                "vocab has {} entries but config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(TinyLmError::SchemaViolation(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
            meta,
            layout,
        })
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn check_layer(&self, layer: usize) -> Result<(), TinyLmError> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(TinyLmError::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        Ok(())
    }

    /// Names and shapes of the stored parameter arrays, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 2])> {
        self.layout
            .named
            .iter()
            .map(|(n, s)| (n.clone(), [s.rows, s.cols]))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ParamArray {
    name: String,
    shape: [usize; 2],
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    vocab: Vec<super::VocabEntry>,
    params: Vec<ParamArray>,
    meta: TrainMeta,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TinyLmError + '_ {
    move |source| TinyLmError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TinyLmError> {
    let params = ckpt
        .layout
        .named
        .iter()
        .map(|(name, slot)| ParamArray {
            name: name.clone(),
            shape: [slot.rows, slot.cols],
            data: ckpt.params[slot.range()].iter().map(|&v| v as f32).collect(),
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.entries.clone(),
        params,
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_string(&file).expect("checkpoint serializes");
    fs::write(path, json).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TinyLmError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| TinyLmError::SchemaViolation(e.to_string()))?;
    if file.format != FORMAT {
        return Err(TinyLmError::SchemaViolation(format!(
            "unknown format {:?}",
            file.format
        )));
    }
    let layout = Layout::new(&file.config);
    if file.params.len() != layout.named.len() {
        return Err(TinyLmError::SchemaViolation(format!(
            "expected {} parameter arrays, got {}",
            layout.named.len(),
            file.params.len()
        )));
    }
    let mut params = vec![0.0; layout.total];
    for (arr, (name, slot)) in file.params.iter().zip(&layout.named) {
        if &arr.name != name || arr.shape != [slot.rows, slot.cols] || arr.data.len() != slot.len()
        {
            return Err(TinyLmError::SchemaViolation(format!(
                "parameter {:?} {:?} does not match expected {name:?} {:?}",
                arr.name,
                arr.shape,
                [slot.rows, slot.cols]
            )));
        }
        for (dst, &v) in params[slot.range()].iter_mut().zip(&arr.data) {
            *dst = f64::from(v);
        }
    }
    Checkpoint::new(
        file.config,
        Vocab {
            entries: file.vocab,
        },
        params,
        file.meta,
    )
}
